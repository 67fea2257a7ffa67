//! Progressive training: generator pretraining, then the three stages.
//!
//! | phase    | trains                         | loss                          |
//! |----------|--------------------------------|-------------------------------|
//! | pretrain | `gen.*`                        | flow matching on captions     |
//! | stage 1  | `planner.*` minus input encoder| next-token cross-entropy      |
//! | stage 2  | `queries.*`, `projector.*`     | flow matching on `q_n`        |
//! | stage 3  | `gen.*`                        | flow matching on full `C_n`   |
//!
//! Every step draws its batch and noise from a stream keyed by
//! `(seed, phase, step)`, so an interrupted phase resumes bit-for-bit.

mod ablation;
mod checkpoint;
mod config;
mod manifest;
mod rollout;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use ablation::{ablate_seed, ablation_run, sign_test_p, AblationReport, SeedAblation};
pub use checkpoint::{Checkpoint, LossRecord, Progress, FORMAT_VERSION};
pub use config::{EvalConfig, MemoryConfig, Schedule, TrainConfig};
pub use manifest::RunManifest;
pub use rollout::{DriftSummary, GeneratedStory, MemoryMode};

use crate::error::{Error, Result};
use crate::generator::{finish_loss, mean_of, FMSample, Generator};
use crate::membank::{assemble_condition, ConditionSignal, FrameFeature, MemoryBank};
use crate::numerics::{AdamW, ParamSet, Tape, Tensor};
use crate::planner::{Planner, INPUT_PROJ, INSTRUCTION_EMB};
use crate::rng::{derive_seed, stream, StreamRng};
use crate::storyworld::{Corpus, StorySample, World};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Stage1,
    Stage2,
    Stage3,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Stage1 => "stage1",
            Phase::Stage2 => "stage2",
            Phase::Stage3 => "stage3",
        }
    }

    /// Whether this phase updates parameter `name`.
    pub fn trains(self, name: &str) -> bool {
        match self {
            Phase::Pretrain | Phase::Stage3 => name.starts_with("gen."),
            Phase::Stage1 => {
                name.starts_with("planner.") && name != INSTRUCTION_EMB && name != INPUT_PROJ
            }
            Phase::Stage2 => name.starts_with("queries.") || name.starts_with("projector."),
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Parameter groups whose checksums are recorded at phase boundaries.
pub const CHECKSUM_GROUPS: [&str; 6] =
    ["planner.", INSTRUCTION_EMB, INPUT_PROJ, "queries.", "projector.", "gen."];

/// Options for one call to [`Trainer::run_phase`].
#[derive(Clone, Copy, Debug, Default)]
pub struct PhaseOptions {
    /// Stop (leaving the phase resumable) once this many steps are done.
    pub stop_after: Option<usize>,
    /// Permit stage 3 on a checkpoint that skipped stage 2.
    pub allow_without_stage2: bool,
}

/// The data and models of one run; cheap to clone.
#[derive(Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub world: Arc<World>,
    pub corpus: Arc<Corpus>,
    pub planner: Planner,
    pub generator: Generator,
}

impl Trainer {
    /// Resolves `config` and generates the corpus from its seed.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        let config = config.resolved()?;
        let world = Arc::new(World::new(config.world.clone())?);
        let corpus =
            Arc::new(Corpus::generate(&world, config.corpus, derive_seed(config.seed, &["corpus"]))?);
        Self::assemble(config, world, corpus)
    }

    pub fn with_corpus(config: &TrainConfig, corpus: Arc<Corpus>) -> Result<Self> {
        let config = config.resolved()?;
        let world = Arc::new(World::new(config.world.clone())?);
        Self::assemble(config, world, corpus)
    }

    /// Same data and world, different config.
    pub fn reconfigured(&self, config: &TrainConfig) -> Result<Self> {
        let config = config.resolved()?;
        if config.world != self.config.world {
            return Err(Error::InvalidArgument("reconfigured run must keep the world".into()));
        }
        Self::assemble(config, self.world.clone(), self.corpus.clone())
    }

    fn assemble(config: TrainConfig, world: Arc<World>, corpus: Arc<Corpus>) -> Result<Self> {
        if corpus.train.is_empty() {
            return Err(Error::InvalidArgument("training split is empty".into()));
        }
        Ok(Self {
            planner: Planner::new(config.planner.clone())?,
            generator: Generator::new(config.generator.clone())?,
            config,
            world,
            corpus,
        })
    }

    fn rng(&self, path: &[&str]) -> StreamRng {
        stream(self.config.seed, path)
    }

    /// Freshly initialized parameters, no phase completed.
    pub fn init_checkpoint(&self) -> Checkpoint {
        let mut params = self.planner.init_params(&mut self.rng(&["init", "planner"]));
        params.extend_from(&self.generator.init_params(&mut self.rng(&["init", "generator"])));
        params.extend_from(
            &self
                .generator
                .init_projector(self.config.planner.d_model, &mut self.rng(&["init", "projector"])),
        );
        Checkpoint {
            config: self.config.clone(),
            vocab: self.world.vocab(),
            completed: Vec::new(),
            progress: None,
            checksums: BTreeMap::new(),
            losses: Vec::new(),
            params,
            optimizer: None,
        }
    }

    pub fn schedule(&self, phase: Phase) -> &Schedule {
        match phase {
            Phase::Pretrain => &self.config.pretrain,
            Phase::Stage1 => &self.config.stage1,
            Phase::Stage2 => &self.config.stage2,
            Phase::Stage3 => &self.config.stage3,
        }
    }

    fn check_prerequisites(&self, ck: &Checkpoint, phase: Phase, opts: PhaseOptions) -> Result<()> {
        if ck.has(phase) {
            return Err(Error::InvalidArgument(format!("{phase} already completed")));
        }
        if let Some(p) = &ck.progress {
            if p.phase != phase {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint holds an unfinished {}; finish it first",
                    p.phase
                )));
            }
        }
        let need = |p: Phase| {
            if ck.has(p) {
                Ok(())
            } else {
                Err(Error::MissingPrerequisite(format!("{phase} needs a completed {p} checkpoint")))
            }
        };
        match phase {
            Phase::Pretrain | Phase::Stage1 => {
                if ck.has(Phase::Stage2) || ck.has(Phase::Stage3) {
                    return Err(Error::InvalidArgument(format!("{phase} after later stages")));
                }
            }
            Phase::Stage2 => {
                need(Phase::Stage1)?;
                need(Phase::Pretrain)?;
                if ck.has(Phase::Stage3) {
                    return Err(Error::InvalidArgument("stage2 after stage3".into()));
                }
            }
            Phase::Stage3 => {
                need(Phase::Stage1)?;
                need(Phase::Pretrain)?;
                if !opts.allow_without_stage2 {
                    need(Phase::Stage2)?;
                }
            }
        }
        Ok(())
    }

    /// Runs (or resumes) `phase` on `ck`. Returns `true` when the phase
    /// completed, `false` when it stopped early per `opts.stop_after`.
    pub fn run_phase(&self, ck: &mut Checkpoint, phase: Phase, opts: PhaseOptions) -> Result<bool> {
        self.check_prerequisites(ck, phase, opts)?;
        let sched = self.schedule(phase).clone();
        if sched.batch == 0 {
            return Err(Error::InvalidArgument(format!("{phase}: batch must be positive")));
        }
        let before: BTreeMap<&str, String> =
            CHECKSUM_GROUPS.iter().map(|g| (*g, ck.params.checksum(g))).collect();
        let mut start = 0;
        let mut opt = match (&ck.progress, ck.optimizer.take()) {
            (Some(p), Some(o)) => {
                start = p.step;
                o
            }
            (Some(_), None) => return Err(Error::Format("progress without optimizer state".into())),
            (None, _) => {
                let names: Vec<String> =
                    ck.params.names().filter(|n| phase.trains(n)).map(str::to_string).collect();
                AdamW::new(self.config.optimizer.clone(), &ck.params, names)?
            }
        };
        let stage3_queries = if phase == Phase::Stage3 { Some(self.projected_queries(&ck.params)?) } else { None };
        ck.params.zero_grads();

        let end = opts.stop_after.map_or(sched.steps, |s| s.min(sched.steps));
        for step in start..end {
            let mut rng = self.rng(&[phase.label(), "step", &step.to_string()]);
            let loss = match phase {
                Phase::Pretrain => self.pretrain_step(&mut ck.params, &sched, &mut rng),
                Phase::Stage1 => self.stage1_step(&mut ck.params, &sched, &mut rng),
                Phase::Stage2 => self.stage2_step(&mut ck.params, &sched, &mut rng),
                Phase::Stage3 => self.stage3_step(
                    &mut ck.params,
                    &sched,
                    stage3_queries.as_ref().expect("computed above"),
                    &mut rng,
                ),
            }?;
            opt.config.lr = sched.lr_at(step);
            opt.step(&mut ck.params)?;
            ck.losses.push(LossRecord { phase, step, loss });
        }

        for (group, sum) in &before {
            let trained = ck.params.names().any(|n| n.starts_with(group) && phase.trains(n));
            if !trained && ck.params.checksum(group) != *sum {
                return Err(Error::FrozenChanged(format!("{group} changed during {phase}")));
            }
        }
        if matches!(phase, Phase::Stage2 | Phase::Stage3) {
            if let Some(s1) = ck.checksums.get("stage1/planner.") {
                if *s1 != ck.params.checksum("planner.") {
                    return Err(Error::FrozenChanged(format!("planner text path changed in {phase}")));
                }
            }
        }

        if end < sched.steps {
            ck.progress = Some(Progress { phase, step: end });
            ck.optimizer = Some(opt);
            return Ok(false);
        }
        ck.progress = None;
        ck.optimizer = None;
        ck.completed.push(phase);
        for g in CHECKSUM_GROUPS {
            ck.checksums.insert(format!("{phase}/{g}"), ck.params.checksum(g));
        }
        ck.config = self.config.clone();
        Ok(true)
    }

    fn pick<'a>(&'a self, n: usize, rng: &mut StreamRng) -> Vec<&'a StorySample> {
        let train = &self.corpus.train;
        (0..n).map(|_| &train[rng.random_range(0..train.len())]).collect()
    }

    fn pretrain_step(&self, params: &mut ParamSet, s: &Schedule, rng: &mut StreamRng) -> Result<f64> {
        let mut items = Vec::with_capacity(s.batch);
        for story in self.pick(s.batch, rng) {
            let f = &story.frames[rng.random_range(0..story.frames.len())];
            let cond = ConditionSignal::query_only(&self.world.caption(&f.state));
            items.push((FMSample::draw(f.latent.clone(), rng)?, cond));
        }
        let batch: Vec<_> = items.iter().map(|(s, c)| (s.clone(), c)).collect();
        self.generator.fm_loss_samples(params, &batch, &|n| Phase::Pretrain.trains(n), true)
    }

    fn stage1_step(&self, params: &mut ParamSet, s: &Schedule, rng: &mut StreamRng) -> Result<f64> {
        let batch = self.pick(s.batch, rng);
        self.planner.stage1_loss(params, &batch, &|n| Phase::Stage1.trains(n), true)
    }

    fn stage2_step(&self, params: &mut ParamSet, s: &Schedule, rng: &mut StreamRng) -> Result<f64> {
        let trainable = |n: &str| Phase::Stage2.trains(n);
        let m = self.config.planner.m_queries;
        let mut tape = Tape::new();
        let mut losses = Vec::new();
        for story in self.pick(s.batch, rng) {
            let layout = self.planner.story_layout(story)?;
            let out = self.planner.forward_tape(&mut tape, params, &layout, &story.input, &trainable)?;
            let states = out.query_states.ok_or_else(|| Error::Layout("story without queries".into()))?;
            let q = self.generator.project_queries_tape(&mut tape, params, states, true)?;
            for (n, frame) in story.frames.iter().enumerate() {
                let rows: Vec<usize> = (n * m..(n + 1) * m).collect();
                let qn = tape.gather(q, &rows)?;
                let spans = ConditionSignal::query_only(&Tensor::zeros(m, 1)).spans;
                let sample = FMSample::draw(frame.latent.clone(), rng)?;
                losses.push(self.generator.fm_loss_tape(&mut tape, params, &sample, qn, &spans, &trainable)?);
            }
        }
        let loss = mean_of(&mut tape, &losses)?;
        finish_loss(&mut tape, loss, params, true, "stage-2 loss")
    }

    /// Projected query blocks of every training story, indexed like the
    /// training split.
    fn projected_queries(&self, params: &ParamSet) -> Result<Vec<Vec<Tensor>>> {
        self.corpus
            .train
            .iter()
            .map(|s| {
                self.planner
                    .story_query_states(params, s)?
                    .iter()
                    .map(|q| self.generator.project_queries(q, params))
                    .collect()
            })
            .collect()
    }

    /// Full conditioning for frame `n` given the bank of earlier frames.
    pub fn condition_for(&self, query: &Tensor, reference: &Tensor, bank: &MemoryBank) -> Result<ConditionSignal> {
        let t = self.config.memory.history_depth;
        let pooled = if t == 0 { Vec::new() } else { bank.pooled_history(t, self.config.memory.lambda)? };
        assemble_condition(query, reference, &pooled)
    }

    fn stage3_step(
        &self,
        params: &mut ParamSet,
        s: &Schedule,
        queries: &[Vec<Tensor>],
        rng: &mut StreamRng,
    ) -> Result<f64> {
        let train = &self.corpus.train;
        let mut items = Vec::with_capacity(s.batch);
        for _ in 0..s.batch {
            let i = rng.random_range(0..train.len());
            let story = &train[i];
            let n = rng.random_range(0..story.frames.len());
            let mut bank = MemoryBank::new(self.config.memory.history_depth.max(1));
            for j in 0..n {
                let feature = if self.config.stage3_self_rollout {
                    let cond = self.condition_for(&queries[i][j], &story.input.reference, &bank)?;
                    self.generator.sample_euler(params, &cond, self.config.eval.n_steps, rng)?
                } else {
                    story.frames[j].latent.clone()
                };
                bank.push(FrameFeature { feature, frame_index: j })?;
            }
            let cond = self.condition_for(&queries[i][n], &story.input.reference, &bank)?;
            items.push((FMSample::draw(story.frames[n].latent.clone(), rng)?, cond));
        }
        let batch: Vec<_> = items.iter().map(|(s, c)| (s.clone(), c)).collect();
        self.generator.fm_loss_samples(params, &batch, &|n| Phase::Stage3.trains(n), true)
    }

    /// Runs the phases needed for stage `stage` (1, 2 or 3) that `ck` has
    /// not completed yet. Stage 1 includes generator pretraining.
    pub fn run_stage(&self, ck: &mut Checkpoint, stage: u8, opts: PhaseOptions) -> Result<bool> {
        let phases: &[Phase] = match stage {
            1 => &[Phase::Pretrain, Phase::Stage1],
            2 => &[Phase::Stage2],
            3 => &[Phase::Stage3],
            _ => return Err(Error::InvalidArgument(format!("unknown stage {stage}"))),
        };
        for &p in phases {
            if ck.has(p) {
                continue;
            }
            if !self.run_phase(ck, p, opts)? {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Mean next-token cross-entropy of the planner on `stories`.
    pub fn text_loss(&self, params: &ParamSet, stories: &[StorySample]) -> Result<f64> {
        let mut p = params.clone();
        let refs: Vec<&StorySample> = stories.iter().collect();
        self.planner.stage1_loss(&mut p, &refs, &|_| false, false)
    }

    /// Entropy (nats) of the empirical unigram distribution of next-token
    /// targets in the training split; the baseline a trained planner must beat.
    pub fn unigram_entropy(&self) -> f64 {
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        let mut total = 0usize;
        for s in &self.corpus.train {
            for &t in &s.plan_tokens()[1..] {
                *counts.entry(t).or_default() += 1;
                total += 1;
            }
        }
        counts
            .values()
            .map(|&c| {
                let p = c as f64 / total as f64;
                -p * p.ln()
            })
            .sum()
    }
}

#[cfg(test)]
mod tests;
