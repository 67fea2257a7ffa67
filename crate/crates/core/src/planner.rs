//! Toy autoregressive planner.
//!
//! A pre-norm transformer over an interleaved layout: an input prefix
//! (instruction token plus reference rows), narrative text, and blocks of
//! learnable query slots. Attention follows [`build_mask`], so text logits
//! never depend on the queries; the final hidden states at query slots are
//! the per-frame summaries handed to the generator.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{
    build_layout, build_mask_with, strip_queries, InputAttention, SequenceLayout, TokenRole,
    BEGIN_PLAN, END_OF_PLAN, IMG_CLOSE, IMG_OPEN,
};
use crate::numerics::{log_softmax, ParamSet, Tape, Tensor, Var};
use crate::storyworld::{InputPrefix, StorySample};

pub const INSTRUCTION_EMB: &str = "planner.instr_emb";
pub const INPUT_PROJ: &str = "planner.input_proj";
pub const QUERIES: &str = "queries.q";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub vocab_size: usize,
    pub instruction_vocab: usize,
    /// Channels of each reference row in the input prefix.
    pub input_channels: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub m_queries: usize,
    pub max_seq_len: usize,
    /// Separate query parameters per block index instead of one shared block.
    pub per_index_queries: bool,
    /// Block budget for per-index queries.
    pub max_blocks: usize,
    pub input_attention: InputAttention,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            vocab_size: 24,
            instruction_vocab: 6,
            input_channels: 8,
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_ff: 64,
            m_queries: 4,
            max_seq_len: 96,
            per_index_queries: false,
            max_blocks: 8,
            input_attention: InputAttention::Causal,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidArgument("d_model must be divisible by n_heads".into()));
        }
        if self.vocab_size <= BEGIN_PLAN as usize {
            return Err(Error::InvalidArgument(
                "vocabulary must contain <eop>, <img>, </img> and <bos>".into(),
            ));
        }
        if self.m_queries == 0 || self.n_layers == 0 || self.max_seq_len == 0 {
            return Err(Error::InvalidArgument("planner sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Outputs of one forward pass recorded on a tape.
pub struct PlannerOutputs {
    /// `n_text × vocab`, rows in text-position order.
    pub text_logits: Var,
    /// `Σm × d_model`, rows in query-position order; `None` without queries.
    pub query_states: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Planner {
    pub config: PlannerConfig,
}

fn layer_name(i: usize, what: &str) -> String {
    format!("planner.l{i}.{what}")
}

impl Planner {
    pub fn new(config: PlannerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let c = &self.config;
        let d = c.d_model;
        let mut p = ParamSet::new();
        let lin = |rows: usize, cols: usize, gain: f64, rng: &mut R| {
            Tensor::randn(rows, cols, gain / (rows as f64).sqrt(), rng)
        };
        p.insert(INSTRUCTION_EMB, Tensor::randn(c.instruction_vocab, d, 1.0, rng));
        p.insert(INPUT_PROJ, lin(c.input_channels, d, 1.0, rng));
        p.insert("planner.tok_emb", Tensor::randn(c.vocab_size, d, 1.0, rng));
        p.insert("planner.pos_emb", Tensor::randn(c.max_seq_len, d, 0.3, rng));
        let resid = 1.0 / (2.0 * c.n_layers as f64).sqrt();
        for i in 0..c.n_layers {
            p.insert(layer_name(i, "norm1"), Tensor::full(1, d, 1.0));
            p.insert(layer_name(i, "wq"), lin(d, d, 1.0, rng));
            p.insert(layer_name(i, "wk"), lin(d, d, 1.0, rng));
            p.insert(layer_name(i, "wv"), lin(d, d, 1.0, rng));
            p.insert(layer_name(i, "wo"), lin(d, d, resid, rng));
            p.insert(layer_name(i, "norm2"), Tensor::full(1, d, 1.0));
            p.insert(layer_name(i, "w1"), lin(d, c.d_ff, 1.0, rng));
            p.insert(layer_name(i, "w2"), lin(c.d_ff, d, resid, rng));
        }
        p.insert("planner.final_norm", Tensor::full(1, d, 1.0));
        p.insert("planner.lm_head", lin(d, c.vocab_size, 1.0, rng));
        let q_rows = if c.per_index_queries { c.max_blocks * c.m_queries } else { c.m_queries };
        p.insert(QUERIES, Tensor::randn(q_rows, d, 1.0, rng));
        p
    }

    /// Layout for a ground-truth story with query blocks.
    pub fn story_layout(&self, story: &StorySample) -> Result<SequenceLayout> {
        build_layout(&story.plan_segments(self.config.m_queries))
    }

    /// Records the forward pass on `tape`. Parameters are bound trainable
    /// when `trainable(name)` holds.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        layout: &SequenceLayout,
        input: &InputPrefix,
        trainable: &dyn Fn(&str) -> bool,
    ) -> Result<PlannerOutputs> {
        let c = &self.config;
        if layout.len() > c.max_seq_len {
            return Err(Error::SequenceTooLong { len: layout.len(), max: c.max_seq_len });
        }
        if layout.n_input() != input.len() {
            return Err(Error::Layout(format!(
                "layout has {} input positions, prefix has {}",
                layout.n_input(),
                input.len()
            )));
        }
        if input.reference.cols() != c.input_channels {
            return Err(Error::Shape("reference channels differ from planner input".into()));
        }
        if input.instruction as usize >= c.instruction_vocab {
            return Err(Error::InvalidArgument("instruction id out of range".into()));
        }
        let mask = Arc::new(build_mask_with(layout, c.input_attention)?);
        let bind = |tape: &mut Tape, name: &str| tape.param(params, name, trainable(name));

        // Embedding source rows: [instruction; reference rows; text tokens; query table].
        let instr_tab = bind(tape, INSTRUCTION_EMB)?;
        let instr = tape.gather(instr_tab, &[input.instruction as usize])?;
        let proj = bind(tape, INPUT_PROJ)?;
        let refv = tape.constant(input.reference.clone());
        let ref_rows = tape.matmul(refv, proj)?;
        let mut sources = vec![instr, ref_rows];
        let mut next_row = 1 + input.reference.rows();

        let text_tokens = layout.text_tokens();
        let text_base = next_row;
        if !text_tokens.is_empty() {
            if let Some(&bad) = text_tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
                return Err(Error::InvalidArgument(format!("token {bad} outside vocabulary")));
            }
            let tab = bind(tape, "planner.tok_emb")?;
            let idx: Vec<usize> = text_tokens.iter().map(|&t| t as usize).collect();
            sources.push(tape.gather(tab, &idx)?);
            next_row += idx.len();
        }
        let query_base = next_row;
        let has_queries = !layout.query_blocks().is_empty();
        if has_queries {
            if c.per_index_queries && layout.query_blocks().len() > c.max_blocks {
                return Err(Error::InvalidArgument("more query blocks than max_blocks".into()));
            }
            sources.push(bind(tape, QUERIES)?);
        }
        let src = tape.concat_rows(&sources)?;

        let mut order = Vec::with_capacity(layout.len());
        let mut text_seen = 0;
        for role in layout.roles() {
            order.push(match *role {
                TokenRole::Input { index } => index,
                TokenRole::Text { .. } => {
                    text_seen += 1;
                    text_base + text_seen - 1
                }
                TokenRole::Query { block, slot } => {
                    let row = if c.per_index_queries { block * c.m_queries + slot } else { slot };
                    query_base + row
                }
            });
        }
        let tok = tape.gather(src, &order)?;
        let pos_tab = bind(tape, "planner.pos_emb")?;
        let pos = tape.gather(pos_tab, &layout.position_ids())?;
        let mut h = tape.add(tok, pos)?;

        for i in 0..c.n_layers {
            let n1 = bind(tape, &layer_name(i, "norm1"))?;
            let hn = tape.rms_norm(h, n1)?;
            let wq = bind(tape, &layer_name(i, "wq"))?;
            let wk = bind(tape, &layer_name(i, "wk"))?;
            let wv = bind(tape, &layer_name(i, "wv"))?;
            let wo = bind(tape, &layer_name(i, "wo"))?;
            let q = tape.matmul(hn, wq)?;
            let k = tape.matmul(hn, wk)?;
            let v = tape.matmul(hn, wv)?;
            let a = tape.attention(q, k, v, c.n_heads, Some(&mask))?;
            let a = tape.matmul(a, wo)?;
            h = tape.add(h, a)?;

            let n2 = bind(tape, &layer_name(i, "norm2"))?;
            let hn = tape.rms_norm(h, n2)?;
            let w1 = bind(tape, &layer_name(i, "w1"))?;
            let w2 = bind(tape, &layer_name(i, "w2"))?;
            let f = tape.matmul(hn, w1)?;
            let f = tape.silu(f);
            let f = tape.matmul(f, w2)?;
            h = tape.add(h, f)?;
        }
        let fnorm = bind(tape, "planner.final_norm")?;
        let h = tape.rms_norm(h, fnorm)?;

        let text_pos = layout.text_positions();
        let text_logits = if text_pos.is_empty() {
            // Only the input prefix: expose logits of its last position so a
            // caller can still decode the first token.
            let last = tape.gather(h, &[layout.n_input() - 1])?;
            let head = bind(tape, "planner.lm_head")?;
            tape.matmul(last, head)?
        } else {
            let ht = tape.gather(h, &text_pos)?;
            let head = bind(tape, "planner.lm_head")?;
            tape.matmul(ht, head)?
        };
        let query_states =
            if has_queries { Some(tape.gather(h, &layout.query_positions())?) } else { None };
        Ok(PlannerOutputs { text_logits, query_states })
    }

    /// Text logits and query states without gradient tracking.
    pub fn forward(
        &self,
        params: &ParamSet,
        layout: &SequenceLayout,
        input: &InputPrefix,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let mut tape = Tape::new();
        let out = self.forward_tape(&mut tape, params, layout, input, &|_| false)?;
        let logits = tape.value(out.text_logits).clone();
        let states = out.query_states.map(|q| tape.value(q).clone());
        Ok((logits, states))
    }

    /// Mean next-token cross-entropy over the story's text stream on `tape`,
    /// plus the number of predicted tokens.
    ///
    /// Logits at text position `k` predict text token `k+1`; query slots carry
    /// no target. The forward pass runs on the query-free layout, which gives
    /// identical text logits.
    pub fn stage1_loss_tape(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        story: &StorySample,
        trainable: &dyn Fn(&str) -> bool,
    ) -> Result<(Var, usize)> {
        let layout = strip_queries(&self.story_layout(story)?);
        let tokens = layout.text_tokens();
        if tokens.len() < 2 {
            return Err(Error::InvalidArgument("story has no target tokens".into()));
        }
        let out = self.forward_tape(tape, params, &layout, &story.input, trainable)?;
        let n = tokens.len() - 1;
        let rows: Vec<usize> = (0..n).collect();
        let logits = tape.gather(out.text_logits, &rows)?;
        let targets: Vec<usize> = tokens[1..].iter().map(|&t| t as usize).collect();
        Ok((tape.cross_entropy(logits, &targets)?, n))
    }

    /// Token-weighted mean cross-entropy over a batch. Gradients for
    /// parameters selected by `trainable` are added into `params`.
    pub fn stage1_loss(
        &self,
        params: &mut ParamSet,
        batch: &[&StorySample],
        trainable: &dyn Fn(&str) -> bool,
        with_grad: bool,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut tape = Tape::new();
        let mut parts = Vec::with_capacity(batch.len());
        let mut total = 0;
        for s in batch {
            let (l, n) = self.stage1_loss_tape(&mut tape, params, s, trainable)?;
            parts.push((l, n));
            total += n;
        }
        let mut acc: Option<Var> = None;
        for (l, n) in parts {
            let w = tape.scale(l, n as f64 / total as f64);
            acc = Some(match acc {
                Some(a) => tape.add(a, w)?,
                None => w,
            });
        }
        let loss = acc.expect("non-empty batch");
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite("stage-1 loss".into()));
        }
        if with_grad {
            tape.backward(loss)?;
            tape.accumulate_grads(params);
        }
        Ok(value)
    }

    /// Query states of every block of a ground-truth story, one `m × d_model`
    /// tensor per frame.
    pub fn story_query_states(&self, params: &ParamSet, story: &StorySample) -> Result<Vec<Tensor>> {
        let layout = self.story_layout(story)?;
        let (_, states) = self.forward(params, &layout, &story.input)?;
        let states = states.ok_or_else(|| Error::Layout("story has no query blocks".into()))?;
        let m = self.config.m_queries;
        (0..layout.query_blocks().len()).map(|b| states.slice_rows(b * m, (b + 1) * m)).collect()
    }

    /// Autoregressive decoding of a plan from `input`.
    pub fn generate_plan<R: Rng + ?Sized>(
        &self,
        params: &ParamSet,
        input: &InputPrefix,
        sampling: Sampling,
        limits: PlanLimits,
        rng: &mut R,
    ) -> Result<PlanState> {
        let m = self.config.m_queries;
        let mut layout = SequenceLayout::with_input(input.len())?;
        layout.push_text(BEGIN_PLAN)?;
        let mut state = PlanState {
            tokens: vec![BEGIN_PLAN],
            query_states: Vec::new(),
            finished: false,
            bracket_violation: false,
            layout: layout.clone(),
        };
        let mut generated = 0;
        while generated < limits.max_tokens {
            if layout.len() + 1 > self.config.max_seq_len {
                break;
            }
            let (logits, qs) = self.forward(params, &layout, input)?;
            if matches!(layout.roles().last(), Some(TokenRole::Query { .. })) {
                let qs = qs.expect("open block has query states");
                let n = qs.rows();
                state.query_states.push(qs.slice_rows(n - m, n)?);
            }
            let last = logits.rows() - 1;
            let blocks_left = state.query_states.len() < limits.max_blocks;
            let room_for_block = layout.len() + 2 + m <= self.config.max_seq_len;
            let block_img = !(blocks_left && room_for_block);
            let next = sampling.pick(logits.row(last), |t| block_img && t == IMG_OPEN, rng);

            let after_block = matches!(layout.roles().last(), Some(TokenRole::Query { .. }));
            if after_block && next != IMG_CLOSE {
                match limits.brackets {
                    BracketPolicy::Expect => {
                        state.bracket_violation = true;
                        state.tokens.push(next);
                        break;
                    }
                    BracketPolicy::Force => {
                        layout.push_text(IMG_CLOSE)?;
                        state.tokens.push(IMG_CLOSE);
                        generated += 1;
                        continue;
                    }
                }
            }
            layout.push_text(next)?;
            state.tokens.push(next);
            generated += 1;
            if next == END_OF_PLAN {
                state.finished = true;
                break;
            }
            if next == IMG_OPEN {
                layout.push_query_block(m)?;
            }
        }
        state.layout = layout;
        Ok(state)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Greedy,
    Temperature(f64),
}

impl Sampling {
    /// Picks a token from one logits row, never returning a token for which
    /// `banned` holds.
    fn pick<R: Rng + ?Sized>(
        &self,
        logits: &[f64],
        banned: impl Fn(u32) -> bool,
        rng: &mut R,
    ) -> u32 {
        let allowed = |i: usize| !banned(i as u32);
        match *self {
            Sampling::Greedy => {
                let mut best = None;
                for (i, &l) in logits.iter().enumerate() {
                    if allowed(i) && best.is_none_or(|(_, b)| l > b) {
                        best = Some((i, l));
                    }
                }
                best.map_or(END_OF_PLAN, |(i, _)| i as u32)
            }
            Sampling::Temperature(tau) if tau <= 0.0 => Sampling::Greedy.pick(logits, banned, rng),
            Sampling::Temperature(tau) => {
                let scaled: Vec<f64> = logits
                    .iter()
                    .enumerate()
                    .map(|(i, &l)| if allowed(i) { l / tau } else { f64::NEG_INFINITY })
                    .collect();
                let probs: Vec<f64> = log_softmax(&scaled).iter().map(|x| x.exp()).collect();
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (i, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc && allowed(i) {
                        return i as u32;
                    }
                }
                (0..logits.len()).rev().find(|&i| allowed(i)).unwrap_or(0) as u32
            }
        }
    }
}

/// What decoding does when the model does not close a query block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BracketPolicy {
    /// Stop and flag the plan.
    #[default]
    Expect,
    /// Insert `</img>` regardless of the model's prediction.
    Force,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanLimits {
    pub max_tokens: usize,
    pub max_blocks: usize,
    pub brackets: BracketPolicy,
}

impl Default for PlanLimits {
    fn default() -> Self {
        Self { max_tokens: 48, max_blocks: 8, brackets: BracketPolicy::Expect }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanState {
    /// Emitted text tokens, `<bos>` first.
    pub tokens: Vec<u32>,
    /// One `m × d_model` state per query block, in block order.
    pub query_states: Vec<Tensor>,
    pub finished: bool,
    pub bracket_violation: bool,
    pub layout: SequenceLayout,
}

impl PlanState {
    /// `<img>` and `</img>` strictly alternate starting with `<img>`, every
    /// bracket pair encloses exactly one query block, and all are closed.
    pub fn brackets_balanced(&self) -> bool {
        if self.bracket_violation {
            return false;
        }
        let mut open = false;
        let mut opens = 0;
        for &t in &self.tokens {
            match t {
                IMG_OPEN if !open => {
                    open = true;
                    opens += 1;
                }
                IMG_CLOSE if open => open = false,
                IMG_OPEN | IMG_CLOSE => return false,
                _ if open => return false,
                _ => {}
            }
        }
        !open && opens == self.query_states.len() && opens == self.layout.query_blocks().len()
    }

    pub fn n_blocks(&self) -> usize {
        self.query_states.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{build_layout, Segment};
    use crate::rng::StreamRng;
    use rand::SeedableRng;

    fn tiny() -> (Planner, ParamSet) {
        let cfg = PlannerConfig {
            vocab_size: 10,
            instruction_vocab: 4,
            input_channels: 3,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            m_queries: 2,
            max_seq_len: 40,
            ..Default::default()
        };
        let p = Planner::new(cfg).unwrap();
        let params = p.init_params(&mut StreamRng::seed_from_u64(1));
        (p, params)
    }

    fn prefix(rows: usize, seed: u64) -> InputPrefix {
        let mut rng = StreamRng::seed_from_u64(seed);
        InputPrefix { instruction: 2, reference: Tensor::randn(rows, 3, 1.0, &mut rng) }
    }

    #[test]
    fn query_blocks_leave_text_logits_bitwise_unchanged() {
        let (p, params) = tiny();
        let input = prefix(2, 3);
        let with_q = build_layout(&[
            Segment::Input(3),
            Segment::Text(vec![3, 5, 6]),
            Segment::Query(2),
            Segment::Text(vec![7]),
            Segment::Query(2),
        ])
        .unwrap();
        let (a, qs) = p.forward(&params, &with_q, &input).unwrap();
        let (b, none) = p.forward(&params, &strip_queries(&with_q), &input).unwrap();
        assert_eq!(a, b);
        assert_eq!(qs.unwrap().shape(), &[4, 8]);
        assert!(none.is_none());
    }

    #[test]
    fn causality_of_text_logits() {
        let (p, params) = tiny();
        let input = prefix(2, 3);
        let mk = |t: u32| {
            build_layout(&[Segment::Input(3), Segment::Text(vec![3, 5, t, 6])]).unwrap()
        };
        let (a, _) = p.forward(&params, &mk(7), &input).unwrap();
        let (b, _) = p.forward(&params, &mk(8), &input).unwrap();
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn single_text_token_gives_one_row_and_too_long_errors() {
        let (p, params) = tiny();
        let input = prefix(2, 3);
        let l = build_layout(&[Segment::Input(3), Segment::Text(vec![3])]).unwrap();
        let (logits, _) = p.forward(&params, &l, &input).unwrap();
        assert_eq!(logits.shape(), &[1, 10]);
        let long = build_layout(&[Segment::Input(3), Segment::Text(vec![4; 40])]).unwrap();
        assert!(matches!(p.forward(&params, &long, &input), Err(Error::SequenceTooLong { .. })));
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let (p, mut params) = tiny();
        let head = params.value_mut("planner.lm_head").unwrap();
        head.data_mut().iter_mut().for_each(|x| *x = 0.0);
        let story = StorySample {
            input: prefix(2, 3),
            reference_state: crate::storyworld::SceneState::zeros(1, 1),
            frames: vec![crate::storyworld::StoryFrame {
                text: vec![4, 5],
                latent: Tensor::zeros(1, 1),
                state: crate::storyworld::SceneState::zeros(1, 1),
            }],
        };
        let p2 = Planner::new(PlannerConfig { m_queries: 2, ..p.config.clone() }).unwrap();
        let loss = p2.stage1_loss(&mut params, &[&story], &|_| false, false).unwrap();
        assert!((loss - (10f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn max_blocks_zero_gives_pure_text_and_greedy_is_deterministic() {
        let (p, params) = tiny();
        let input = prefix(2, 3);
        let limits = PlanLimits { max_tokens: 12, max_blocks: 0, ..Default::default() };
        let mut rng = StreamRng::seed_from_u64(0);
        let a = p.generate_plan(&params, &input, Sampling::Greedy, limits, &mut rng).unwrap();
        assert_eq!(a.n_blocks(), 0);
        assert!(!a.tokens.contains(&IMG_OPEN));
        let b = p.generate_plan(&params, &input, Sampling::Greedy, limits, &mut rng).unwrap();
        assert_eq!(a, b);
        let t = Sampling::Temperature(0.7);
        let limits = PlanLimits { max_tokens: 12, ..Default::default() };
        let c = p.generate_plan(&params, &input, t, limits, &mut StreamRng::seed_from_u64(5));
        let d = p.generate_plan(&params, &input, t, limits, &mut StreamRng::seed_from_u64(5));
        assert_eq!(c.unwrap(), d.unwrap());
    }

    #[test]
    fn stage1_gradients_match_finite_differences() {
        let (p, mut params) = tiny();
        let story = StorySample {
            input: prefix(2, 9),
            reference_state: crate::storyworld::SceneState::zeros(1, 1),
            frames: vec![
                crate::storyworld::StoryFrame {
                    text: vec![4, 5, 6],
                    latent: Tensor::zeros(1, 1),
                    state: crate::storyworld::SceneState::zeros(1, 1),
                };
                2
            ],
        };
        let report = crate::numerics::grad_check(
            |ps| p.stage1_loss(ps, &[&story], &|_| true, true),
            &mut params,
            |n| n.starts_with("planner."),
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err());
    }

    #[test]
    fn bracket_checker() {
        let layout = build_layout(&[
            Segment::Input(1),
            Segment::Text(vec![BEGIN_PLAN, 5]),
            Segment::Query(2),
            Segment::Text(vec![END_OF_PLAN]),
        ])
        .unwrap();
        let good = PlanState {
            tokens: layout.text_tokens(),
            query_states: vec![Tensor::zeros(2, 8)],
            finished: true,
            bracket_violation: false,
            layout,
        };
        assert!(good.brackets_balanced());
        let mut bad = good.clone();
        bad.tokens = vec![BEGIN_PLAN, IMG_CLOSE, IMG_OPEN, END_OF_PLAN];
        assert!(!bad.brackets_balanced());
        let mut flagged = good;
        flagged.bracket_violation = true;
        assert!(!flagged.brackets_balanced());
    }
}
