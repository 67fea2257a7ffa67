use serde::{Deserialize, Serialize};

use super::{Checkpoint, Phase, Trainer};
use crate::error::{Error, Result};
use crate::membank::{ConditionSignal, FrameFeature, MemoryBank};
use crate::numerics::Tensor;
use crate::planner::{PlanLimits, PlanState, Sampling};
use crate::rng::{derive_seed, stream};
use crate::storyworld::{InputPrefix, StorySample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryMode {
    /// The bank holds ground-truth frames.
    TeacherForced,
    /// The bank holds the model's own earlier frames.
    SelfRollout,
}

impl std::str::FromStr for MemoryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher_forced" | "teacher-forced" => Ok(Self::TeacherForced),
            "self_rollout" | "self-rollout" => Ok(Self::SelfRollout),
            _ => Err(Error::InvalidArgument(format!("unknown memory mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GeneratedStory {
    pub plan: PlanState,
    pub frames: Vec<Tensor>,
}

impl GeneratedStory {
    /// The planner produced no query block, so nothing was generated.
    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DriftSummary {
    /// Mean over stories of the drift over all persistent coordinates.
    pub drift: f64,
    /// Same, restricted to coordinates visible in the reference frame.
    pub drift_anchored: f64,
    /// Same, restricted to coordinates hidden from the reference frame.
    pub drift_free: f64,
    pub stories: usize,
    /// Stories with fewer than two generated frames.
    pub skipped: usize,
    pub per_story: Vec<f64>,
}

impl Trainer {
    /// Plans from `input`, then generates one frame per query block.
    ///
    /// The conditioning is the full `[q_n; f_cond; memory]` once stage 3 is
    /// complete and the query block alone before that. Frame `n` samples its
    /// noise from a stream keyed by `(seed, n)`, so both memory modes share
    /// frame 0.
    pub fn rollout(
        &self,
        ck: &Checkpoint,
        input: &InputPrefix,
        n_frames: usize,
        mode: MemoryMode,
        truth: Option<&StorySample>,
        seed: u64,
    ) -> Result<GeneratedStory> {
        if mode == MemoryMode::TeacherForced && truth.is_none() {
            return Err(Error::InvalidArgument("teacher-forced rollout needs a reference story".into()));
        }
        let limits = PlanLimits { max_blocks: n_frames, ..self.config.eval.limits };
        let mut plan_rng = stream(seed, &["plan"]);
        let plan = self.planner.generate_plan(&ck.params, input, Sampling::Greedy, limits, &mut plan_rng)?;
        let full = ck.has(Phase::Stage3);
        let mut bank = MemoryBank::new(self.config.memory.history_depth.max(1));
        let mut frames = Vec::with_capacity(plan.query_states.len());
        for (n, q) in plan.query_states.iter().enumerate() {
            let q = self.generator.project_queries(q, &ck.params)?;
            let cond = if full {
                self.condition_for(&q, &input.reference, &bank)?
            } else {
                ConditionSignal::query_only(&q)
            };
            let mut rng = stream(seed, &["frame", &n.to_string()]);
            let x = self.generator.sample_euler(&ck.params, &cond, self.config.eval.n_steps, &mut rng)?;
            let remembered = match (mode, truth.and_then(|t| t.frames.get(n))) {
                (MemoryMode::TeacherForced, Some(f)) => f.latent.clone(),
                _ => x.clone(),
            };
            bank.push(FrameFeature { feature: remembered, frame_index: n })?;
            frames.push(x);
        }
        Ok(GeneratedStory { plan, frames })
    }

    /// Rolls out the first `eval.stories` test stories and averages drift.
    pub fn evaluate_drift(&self, ck: &Checkpoint, mode: MemoryMode) -> Result<DriftSummary> {
        let c = &self.world.config;
        let n = self.config.eval.stories.min(self.corpus.test.len());
        let mut out = DriftSummary::default();
        let (mut all, mut anch, mut free) = (0.0, 0.0, 0.0);
        for (i, story) in self.corpus.test.iter().take(n).enumerate() {
            let seed = derive_seed(self.config.seed, &["eval", &i.to_string()]);
            let g = self.rollout(ck, &story.input, story.frames.len(), mode, Some(story), seed)?;
            if g.frames.len() < 2 {
                out.skipped += 1;
                continue;
            }
            let d = self.world.drift_metric(&g.frames)?;
            out.per_story.push(d);
            all += d;
            if c.anchored() > 0 {
                anch += self.world.drift_over(&g.frames, 0..c.anchored())?;
            }
            if c.free_persistent > 0 {
                free += self.world.drift_over(&g.frames, c.anchored()..c.persistent)?;
            }
            out.stories += 1;
        }
        if out.stories == 0 {
            return Err(Error::NoMultiFrameRollout);
        }
        let k = out.stories as f64;
        out.drift = all / k;
        out.drift_anchored = anch / k;
        out.drift_free = free / k;
        Ok(out)
    }
}
