//! Procedural story world.
//!
//! Each story samples a persistent scene state once and evolves a transient
//! state through a small grammar of narrative tokens. Frames are an affine
//! render of the state, so the persistent part of any frame can be read back
//! by least squares and its spread across a story measures drift.
//!
//! Persistent coordinates come in two kinds. *Anchored* ones are visible in
//! the reference frame handed to the model; *free* ones are hidden from it and
//! only become fixed once the first story frame shows them.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{Segment, BEGIN_PLAN, END_OF_PLAN, IMG_CLOSE, IMG_OPEN};
use crate::numerics::Tensor;
use crate::rng::{stream, StreamRng};

/// First id used by grammar words; ids below are special tokens.
pub const FIRST_WORD_ID: u32 = 4;
const SPECIAL_NAMES: [&str; 4] = ["<eop>", "<img>", "</img>", "<bos>"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrammarConfig {
    pub subjects: Vec<String>,
    pub actions: Vec<String>,
    pub manners: Vec<String>,
    /// Sampling weights, one per word of the matching category. Empty means uniform.
    pub subject_weights: Vec<f64>,
    pub action_weights: Vec<f64>,
    pub manner_weights: Vec<f64>,
    /// Multiplier each manner applies to its action's transient delta.
    pub manner_scales: Vec<f64>,
    /// Standard deviation of the per-action transient deltas.
    pub delta_std: f64,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        Self {
            subjects: s(&["hero", "friend", "dog", "robot", "wizard", "child"]),
            actions: s(&[
                "walks", "runs", "jumps", "turns", "waves", "sits", "climbs", "falls", "dances",
                "hides",
            ]),
            manners: s(&["slowly", "quickly", "twice", "boldly"]),
            subject_weights: Vec::new(),
            action_weights: Vec::new(),
            manner_weights: Vec::new(),
            manner_scales: vec![0.5, 1.0, 1.5, 2.0],
            delta_std: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub grammar: GrammarConfig,
    /// Persistent coordinates (anchored + free).
    pub persistent: usize,
    /// How many of the persistent coordinates are hidden from the reference frame.
    pub free_persistent: usize,
    pub transient: usize,
    /// Rows per frame latent.
    pub rows: usize,
    /// Channels per latent row.
    pub channels: usize,
    /// Rows of the caption embedding used to pretrain the generator.
    pub caption_rows: usize,
    pub render_seed: u64,
    /// Scale of the row-specific part of the render and caption maps; every
    /// row also carries a shared map of the full state.
    pub row_variation: f64,
    pub noise: f64,
    pub persistent_std: f64,
    /// Prior standard deviation of the free persistent coordinates.
    pub free_std: f64,
    pub min_frames: usize,
    pub max_frames: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            grammar: GrammarConfig::default(),
            persistent: 4,
            free_persistent: 2,
            transient: 4,
            rows: 16,
            channels: 8,
            caption_rows: 4,
            render_seed: 7,
            row_variation: 0.25,
            noise: 0.01,
            persistent_std: 1.0,
            free_std: 0.5,
            min_frames: 2,
            max_frames: 5,
        }
    }
}

impl WorldConfig {
    pub fn anchored(&self) -> usize {
        self.persistent - self.free_persistent
    }

    pub fn state_dim(&self) -> usize {
        self.persistent + self.transient
    }

    pub fn latent_len(&self) -> usize {
        self.rows * self.channels
    }

    pub fn vocab_size(&self) -> usize {
        FIRST_WORD_ID as usize
            + self.grammar.subjects.len()
            + self.grammar.actions.len()
            + self.grammar.manners.len()
    }

    /// Size of the instruction vocabulary (frame counts `0..=max_frames`).
    pub fn instruction_vocab(&self) -> usize {
        self.max_frames + 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub persistent: Vec<f64>,
    pub transient: Vec<f64>,
}

impl SceneState {
    pub fn zeros(p: usize, q: usize) -> Self {
        Self { persistent: vec![0.0; p], transient: vec![0.0; q] }
    }

    pub fn concat(&self) -> Vec<f64> {
        self.persistent.iter().chain(&self.transient).copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoryFrame {
    /// Narrative run preceding the frame.
    pub text: Vec<u32>,
    pub latent: Tensor,
    pub state: SceneState,
}

/// The model-visible input: an instruction token and the reference frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputPrefix {
    pub instruction: u32,
    pub reference: Tensor,
}

impl InputPrefix {
    /// Number of input positions: one instruction plus one per reference row.
    pub fn len(&self) -> usize {
        1 + self.reference.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StorySample {
    pub input: InputPrefix,
    pub reference_state: SceneState,
    pub frames: Vec<StoryFrame>,
}

impl StorySample {
    /// Layout events for the ground-truth plan with `m` query slots per frame.
    pub fn plan_segments(&self, m: usize) -> Vec<Segment> {
        let mut segs = vec![Segment::Input(self.input.len()), Segment::Text(vec![BEGIN_PLAN])];
        for f in &self.frames {
            segs.push(Segment::Text(f.text.clone()));
            if m > 0 {
                segs.push(Segment::Query(m));
            } else {
                segs.push(Segment::Text(vec![IMG_OPEN, IMG_CLOSE]));
            }
        }
        segs.push(Segment::Text(vec![END_OF_PLAN]));
        segs
    }

    /// All text tokens of the ground-truth plan, delimiters included.
    pub fn plan_tokens(&self) -> Vec<u32> {
        let mut out = vec![BEGIN_PLAN];
        for f in &self.frames {
            out.extend(&f.text);
            out.push(IMG_OPEN);
            out.push(IMG_CLOSE);
        }
        out.push(END_OF_PLAN);
        out
    }

    pub fn latents(&self) -> Vec<Tensor> {
        self.frames.iter().map(|f| f.latent.clone()).collect()
    }
}

/// A world instance: the config plus its fixed random render and caption maps.
#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    render: Tensor,
    offset: Tensor,
    pinv: Tensor,
    caption: Tensor,
    deltas: Tensor,
    subject_dist: WeightedIndex<f64>,
    action_dist: WeightedIndex<f64>,
    manner_dist: WeightedIndex<f64>,
}

fn weights(w: &[f64], n: usize, what: &str) -> Result<WeightedIndex<f64>> {
    let w = if w.is_empty() { vec![1.0; n] } else { w.to_vec() };
    if w.len() != n {
        return Err(Error::InvalidArgument(format!("{what}: {} weights for {n} words", w.len())));
    }
    WeightedIndex::new(w).map_err(|e| Error::InvalidArgument(format!("{what}: {e}")))
}

/// `(rows·channels) × dim` map whose row blocks are `G0 + ρ·H_r`.
fn row_shared_map<R: Rng + ?Sized>(rows: usize, channels: usize, dim: usize, rho: f64, rng: &mut R) -> Tensor {
    let std = 1.0 / (dim as f64).sqrt();
    let shared = Tensor::randn(channels, dim, std, rng);
    let own = Tensor::randn(rows * channels, dim, rho * std, rng);
    let data = (0..rows * channels)
        .flat_map(|i| {
            let (s, o) = (shared.row(i % channels), own.row(i));
            s.iter().zip(o).map(|(a, b)| a + b).collect::<Vec<_>>()
        })
        .collect();
    Tensor::raw(rows * channels, dim, data)
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self> {
        let g = &config.grammar;
        if config.persistent == 0
            || config.free_persistent > config.persistent
            || config.rows == 0
            || config.channels == 0
            || config.caption_rows == 0
            || config.min_frames < 2
            || config.max_frames < config.min_frames
            || !(config.row_variation >= 0.0)
            || g.subjects.is_empty()
            || g.actions.is_empty()
            || g.manners.is_empty()
            || g.manner_scales.len() != g.manners.len()
        {
            return Err(Error::InvalidArgument("inconsistent world config".into()));
        }
        let s = config.state_dim();
        let n = config.latent_len();
        if n < s {
            return Err(Error::RankDeficient);
        }
        let mut rng = stream(config.render_seed, &["world", "render"]);
        let render = row_shared_map(config.rows, config.channels, s, config.row_variation, &mut rng);
        let offset = Tensor::randn(n, 1, 0.5, &mut rng);
        let pinv = pseudo_inverse(&render)?;

        let visible = config.anchored() + config.transient;
        let mut crng = stream(config.render_seed, &["world", "caption"]);
        let caption =
            row_shared_map(config.caption_rows, config.channels, visible.max(1), config.row_variation, &mut crng);
        let mut drng = stream(config.render_seed, &["world", "deltas"]);
        let deltas = Tensor::randn(g.actions.len(), config.transient.max(1), g.delta_std, &mut drng);

        Ok(Self {
            subject_dist: weights(&g.subject_weights, g.subjects.len(), "subjects")?,
            action_dist: weights(&g.action_weights, g.actions.len(), "actions")?,
            manner_dist: weights(&g.manner_weights, g.manners.len(), "manners")?,
            config,
            render,
            offset,
            pinv,
            caption,
            deltas,
        })
    }

    pub fn vocab(&self) -> Vec<String> {
        let g = &self.config.grammar;
        SPECIAL_NAMES
            .iter()
            .map(|s| s.to_string())
            .chain(g.subjects.iter().cloned())
            .chain(g.actions.iter().cloned())
            .chain(g.manners.iter().cloned())
            .collect()
    }

    pub fn subject_id(&self, i: usize) -> u32 {
        FIRST_WORD_ID + i as u32
    }

    pub fn action_id(&self, i: usize) -> u32 {
        FIRST_WORD_ID + (self.config.grammar.subjects.len() + i) as u32
    }

    pub fn manner_id(&self, i: usize) -> u32 {
        FIRST_WORD_ID
            + (self.config.grammar.subjects.len() + self.config.grammar.actions.len() + i) as u32
    }

    /// Grammar probability of each vocabulary id appearing at its slot of a run.
    pub fn slot_probabilities(&self) -> [Vec<(u32, f64)>; 3] {
        let norm = |d: &[f64], n: usize| -> Vec<f64> {
            let w = if d.is_empty() { vec![1.0; n] } else { d.to_vec() };
            let s: f64 = w.iter().sum();
            w.iter().map(|x| x / s).collect()
        };
        let g = &self.config.grammar;
        let subj = norm(&g.subject_weights, g.subjects.len());
        let act = norm(&g.action_weights, g.actions.len());
        let man = norm(&g.manner_weights, g.manners.len());
        [
            subj.iter().enumerate().map(|(i, &p)| (self.subject_id(i), p)).collect(),
            act.iter().enumerate().map(|(i, &p)| (self.action_id(i), p)).collect(),
            man.iter().enumerate().map(|(i, &p)| (self.manner_id(i), p)).collect(),
        ]
    }

    /// `reshape(G·[persistent; transient] + b + σ·noise)`.
    pub fn render_frame<R: Rng + ?Sized>(&self, state: &SceneState, rng: &mut R) -> Tensor {
        let s = state.concat();
        let c = &self.config;
        let mut data = Vec::with_capacity(c.latent_len());
        for r in 0..c.latent_len() {
            let mut v = self.offset.data()[r];
            for (g, x) in self.render.row(r).iter().zip(&s) {
                v += g * x;
            }
            if c.noise > 0.0 {
                v += c.noise * rng.sample::<f64, _>(StandardNormal);
            }
            data.push(v);
        }
        Tensor::raw(c.rows, c.channels, data)
    }

    /// Least-squares inverse of the render map.
    pub fn recover_state(&self, x: &Tensor) -> Result<SceneState> {
        let c = &self.config;
        if x.len() != c.latent_len() {
            return Err(Error::Shape(format!(
                "frame has {} entries, world renders {}",
                x.len(),
                c.latent_len()
            )));
        }
        let mut s = vec![0.0; c.state_dim()];
        for (k, sk) in s.iter_mut().enumerate() {
            let row = self.pinv.row(k);
            let mut acc = 0.0;
            for r in 0..c.latent_len() {
                acc += row[r] * (x.data()[r] - self.offset.data()[r]);
            }
            *sk = acc;
        }
        let transient = s.split_off(c.persistent);
        Ok(SceneState { persistent: s, transient })
    }

    /// Caption embedding of the caption-visible part of a state (anchored
    /// persistent and transient coordinates), `caption_rows × channels`.
    pub fn caption(&self, state: &SceneState) -> Tensor {
        let c = &self.config;
        let visible: Vec<f64> = state.persistent[..c.anchored()]
            .iter()
            .chain(&state.transient)
            .copied()
            .collect();
        let mut data = Vec::with_capacity(self.caption.rows());
        for r in 0..self.caption.rows() {
            data.push(self.caption.row(r).iter().zip(&visible).map(|(a, b)| a * b).sum());
        }
        Tensor::raw(c.caption_rows, c.channels, data)
    }

    /// Transient delta of an action id under a manner id.
    fn delta(&self, action: usize, manner: usize) -> Vec<f64> {
        let scale = self.config.grammar.manner_scales[manner];
        self.deltas.row(action).iter().take(self.config.transient).map(|d| d * scale).collect()
    }

    /// One story of `n_frames` frames.
    pub fn roll_story<R: Rng + ?Sized>(&self, n_frames: usize, rng: &mut R) -> Result<StorySample> {
        let c = &self.config;
        if n_frames < 2 {
            return Err(Error::InvalidArgument("a story needs at least two frames".into()));
        }
        if n_frames > c.max_frames {
            return Err(Error::InvalidArgument(format!(
                "{n_frames} frames exceeds max_frames {}",
                c.max_frames
            )));
        }
        let persistent: Vec<f64> = (0..c.persistent)
            .map(|k| {
                let std = if k < c.anchored() { c.persistent_std } else { c.free_std };
                std * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        let mut reference_state = SceneState {
            persistent: persistent.clone(),
            transient: vec![0.0; c.transient],
        };
        for x in reference_state.persistent[c.anchored()..].iter_mut() {
            *x = 0.0;
        }
        let reference = self.render_frame(&reference_state, rng);

        let mut transient = vec![0.0; c.transient];
        let mut frames = Vec::with_capacity(n_frames);
        for _ in 0..n_frames {
            let s = self.subject_dist.sample(rng);
            let a = self.action_dist.sample(rng);
            let m = self.manner_dist.sample(rng);
            for (t, d) in transient.iter_mut().zip(self.delta(a, m)) {
                *t += d;
            }
            let state = SceneState { persistent: persistent.clone(), transient: transient.clone() };
            let latent = self.render_frame(&state, rng);
            frames.push(StoryFrame {
                text: vec![self.subject_id(s), self.action_id(a), self.manner_id(m)],
                latent,
                state,
            });
        }
        Ok(StorySample {
            input: InputPrefix { instruction: n_frames as u32, reference },
            reference_state,
            frames,
        })
    }

    /// A story whose frame count is drawn uniformly from the configured range.
    pub fn roll_random_story<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<StorySample> {
        let n = rng.random_range(self.config.min_frames..=self.config.max_frames);
        self.roll_story(n, rng)
    }

    /// Variance (unbiased) of each recovered persistent coordinate across
    /// `frames`, averaged over coordinates. Zero means perfectly consistent.
    pub fn drift_metric(&self, frames: &[Tensor]) -> Result<f64> {
        self.drift_over(frames, 0..self.config.persistent)
    }

    /// Drift restricted to a range of persistent coordinates.
    pub fn drift_over(&self, frames: &[Tensor], coords: std::ops::Range<usize>) -> Result<f64> {
        if frames.len() < 2 {
            return Err(Error::InvalidArgument("drift needs at least two frames".into()));
        }
        if coords.is_empty() || coords.end > self.config.persistent {
            return Err(Error::InvalidArgument("bad persistent coordinate range".into()));
        }
        let states = frames.iter().map(|f| self.recover_state(f)).collect::<Result<Vec<_>>>()?;
        let n = states.len() as f64;
        let mut total = 0.0;
        for k in coords.clone() {
            let mean = states.iter().map(|s| s.persistent[k]).sum::<f64>() / n;
            let var =
                states.iter().map(|s| (s.persistent[k] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            total += var;
        }
        Ok(total / coords.len() as f64)
    }
}

fn pseudo_inverse(g: &Tensor) -> Result<Tensor> {
    let (n, s) = (g.rows(), g.cols());
    let m = DMatrix::from_row_slice(n, s, g.data());
    let gram = m.transpose() * &m;
    let chol = gram.cholesky().ok_or(Error::RankDeficient)?;
    let min_diag = chol.l().diagonal().iter().cloned().fold(f64::INFINITY, f64::min);
    if min_diag < 1e-8 {
        return Err(Error::RankDeficient);
    }
    let pinv = chol.inverse() * m.transpose();
    let mut data = Vec::with_capacity(s * n);
    for i in 0..s {
        for j in 0..n {
            data.push(pinv[(i, j)]);
        }
    }
    Ok(Tensor::raw(s, n, data))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<StorySample>,
    pub val: Vec<StorySample>,
    pub test: Vec<StorySample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for CorpusSizes {
    fn default() -> Self {
        Self { train: 512, val: 64, test: 64 }
    }
}

/// Story `index` of `split` under `seed`; independent of every other story.
pub fn story_rng(seed: u64, split: &str, index: usize) -> StreamRng {
    stream(seed, &["story", split, &index.to_string()])
}

impl Corpus {
    pub fn generate(world: &World, sizes: CorpusSizes, seed: u64) -> Result<Self> {
        let split = |name: &str, n: usize| -> Result<Vec<StorySample>> {
            (0..n).map(|i| world.roll_random_story(&mut story_rng(seed, name, i))).collect()
        };
        Ok(Self {
            train: split("train", sizes.train)?,
            val: split("val", sizes.val)?,
            test: split("test", sizes.test)?,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, stories) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            write_split(dir, name, stories)?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(Self {
            train: read_split(dir, "train")?,
            val: read_split(dir, "val")?,
            test: read_split(dir, "test")?,
        })
    }
}

/// One line of `<split>.jsonl`; latents live in `<split>.bin` as consecutive
/// little-endian `f64` blocks addressed by `(offset, len)` in entries.
#[derive(Serialize, Deserialize)]
struct StoryRecord {
    instruction: u32,
    reference_state: SceneState,
    reference: BlockRef,
    frames: Vec<FrameRecord>,
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    text: Vec<u32>,
    state: SceneState,
    latent: BlockRef,
}

#[derive(Serialize, Deserialize)]
struct BlockRef {
    offset: u64,
    rows: usize,
    cols: usize,
}

fn put_block(bin: &mut Vec<u8>, t: &Tensor) -> BlockRef {
    let offset = (bin.len() / 8) as u64;
    bin.extend(t.to_le_bytes());
    BlockRef { offset, rows: t.rows(), cols: t.cols() }
}

fn get_block(bin: &[f64], b: &BlockRef) -> Result<Tensor> {
    let start = b.offset as usize;
    let end = start + b.rows * b.cols;
    let data = bin
        .get(start..end)
        .ok_or_else(|| Error::Format("float block out of range".into()))?;
    Tensor::from_rows(b.rows, b.cols, data.to_vec())
}

pub fn write_split(dir: &Path, name: &str, stories: &[StorySample]) -> Result<()> {
    let mut bin = Vec::new();
    let mut jsonl = BufWriter::new(File::create(dir.join(format!("{name}.jsonl")))?);
    for s in stories {
        let rec = StoryRecord {
            instruction: s.input.instruction,
            reference_state: s.reference_state.clone(),
            reference: put_block(&mut bin, &s.input.reference),
            frames: s
                .frames
                .iter()
                .map(|f| FrameRecord {
                    text: f.text.clone(),
                    state: f.state.clone(),
                    latent: put_block(&mut bin, &f.latent),
                })
                .collect(),
        };
        serde_json::to_writer(&mut jsonl, &rec)?;
        jsonl.write_all(b"\n")?;
    }
    jsonl.flush()?;
    std::fs::write(dir.join(format!("{name}.bin")), bin)?;
    Ok(())
}

pub fn read_split(dir: &Path, name: &str) -> Result<Vec<StorySample>> {
    let mut raw = Vec::new();
    File::open(dir.join(format!("{name}.bin")))?.read_to_end(&mut raw)?;
    if raw.len() % 8 != 0 {
        return Err(Error::Format("float block file is not a multiple of 8 bytes".into()));
    }
    let floats: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let reader = BufReader::new(File::open(dir.join(format!("{name}.jsonl")))?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StoryRecord = serde_json::from_str(&line)?;
        out.push(StorySample {
            input: InputPrefix {
                instruction: rec.instruction,
                reference: get_block(&floats, &rec.reference)?,
            },
            reference_state: rec.reference_state,
            frames: rec
                .frames
                .into_iter()
                .map(|f| {
                    Ok(StoryFrame { text: f.text, state: f.state, latent: get_block(&floats, &f.latent)? })
                })
                .collect::<Result<_>>()?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn world(noise: f64) -> World {
        World::new(WorldConfig { noise, ..Default::default() }).unwrap()
    }

    #[test]
    fn noiseless_story_has_zero_drift() {
        let w = world(0.0);
        let mut rng = StreamRng::seed_from_u64(1);
        let s = w.roll_story(3, &mut rng).unwrap();
        let p0 = w.recover_state(&s.frames[0].latent).unwrap().persistent;
        for f in &s.frames {
            let p = w.recover_state(&f.latent).unwrap().persistent;
            for (a, b) in p.iter().zip(&p0) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        assert!(w.drift_metric(&s.latents()).unwrap() < 1e-18);
    }

    #[test]
    fn same_seed_same_story() {
        let w = world(0.01);
        let a = w.roll_story(4, &mut StreamRng::seed_from_u64(9)).unwrap();
        let b = w.roll_story(4, &mut StreamRng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(w.roll_story(1, &mut StreamRng::seed_from_u64(9)).is_err());
    }

    #[test]
    fn render_is_affine_and_invertible() {
        let w = world(0.0);
        let mut rng = StreamRng::seed_from_u64(2);
        let zero = SceneState::zeros(4, 4);
        let x0 = w.render_frame(&zero, &mut rng);
        assert_eq!(x0.data(), w.offset.data());

        let s1 = SceneState { persistent: vec![1.0, -2.0, 0.5, 0.0], transient: vec![0.3; 4] };
        let s2 = SceneState { persistent: vec![0.1, 0.2, -0.7, 2.0], transient: vec![-1.0; 4] };
        let sum = SceneState {
            persistent: s1.persistent.iter().zip(&s2.persistent).map(|(a, b)| a + b).collect(),
            transient: s1.transient.iter().zip(&s2.transient).map(|(a, b)| a + b).collect(),
        };
        let lhs = w
            .render_frame(&s1, &mut rng)
            .add(&w.render_frame(&s2, &mut rng))
            .unwrap()
            .sub(&x0)
            .unwrap();
        assert!(lhs.max_abs_diff(&w.render_frame(&sum, &mut rng)) < 1e-12);

        let back = w.recover_state(&w.render_frame(&s1, &mut rng)).unwrap();
        for (a, b) in back.concat().iter().zip(s1.concat()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn drift_edge_cases() {
        let w = world(0.0);
        let mut rng = StreamRng::seed_from_u64(4);
        let a = w.roll_story(2, &mut rng).unwrap();
        let b = w.roll_story(2, &mut rng).unwrap();
        assert!(w.drift_metric(&a.latents()[..1]).is_err());
        let mixed = vec![a.frames[0].latent.clone(), b.frames[0].latent.clone()];
        assert!(w.drift_metric(&mixed).unwrap() > 0.0);
        let same = vec![a.frames[0].latent.clone(); 3];
        assert!(w.drift_metric(&same).unwrap() < 1e-24);
    }

    #[test]
    fn reference_hides_free_coordinates() {
        let w = world(0.0);
        let s = w.roll_story(2, &mut StreamRng::seed_from_u64(5)).unwrap();
        let r = w.recover_state(&s.input.reference).unwrap();
        assert!(r.persistent[2].abs() < 1e-10 && r.persistent[3].abs() < 1e-10);
        assert!((r.persistent[0] - s.frames[0].state.persistent[0]).abs() < 1e-10);
    }

    #[test]
    fn rank_deficient_world_is_rejected() {
        let cfg = WorldConfig { rows: 1, channels: 4, ..Default::default() };
        assert!(matches!(World::new(cfg), Err(Error::RankDeficient)));
    }

    #[test]
    fn corpus_round_trips_through_files() {
        let w = world(0.01);
        let sizes = CorpusSizes { train: 3, val: 2, test: 1 };
        let c = Corpus::generate(&w, sizes, 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.write(dir.path()).unwrap();
        assert_eq!(Corpus::read(dir.path()).unwrap(), c);
    }

    #[test]
    fn plan_tokens_bracket_every_frame() {
        let w = world(0.0);
        let s = w.roll_story(3, &mut StreamRng::seed_from_u64(8)).unwrap();
        let toks = s.plan_tokens();
        assert_eq!(toks.iter().filter(|&&t| t == IMG_OPEN).count(), 3);
        assert_eq!(*toks.last().unwrap(), END_OF_PLAN);
        assert_eq!(toks.len(), 1 + 3 * 5 + 1);
    }
}
