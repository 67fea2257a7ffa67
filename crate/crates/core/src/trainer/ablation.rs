//! The 2×2 study over {with, without} stage 2 × {with, without} stage 3,
//! plus a stage-3 run with the memory bank disabled.

use serde::{Deserialize, Serialize};

use super::{Checkpoint, MemoryMode, Phase, PhaseOptions, TrainConfig, Trainer};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedAblation {
    pub seed: u64,
    /// Mean self-rollout drift, indexed `[with_stage2][with_stage3]`.
    pub drift: [[f64; 2]; 2],
    /// Stages 2 and 3 with history depth 0.
    pub drift_no_memory: f64,
    /// Held-out text loss after stage 1 and the unigram baseline.
    pub text_loss: f64,
    pub unigram_entropy: f64,
}

impl SeedAblation {
    pub fn stage2_gain(&self) -> f64 {
        self.drift[0][0] - self.drift[1][0]
    }

    pub fn stage3_gain(&self) -> f64 {
        self.drift[0][0] - self.drift[0][1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<SeedAblation>,
    pub mean: [[f64; 2]; 2],
    pub mean_no_memory: f64,
    /// One-sided sign-test p-values over seeds.
    pub p_stage3_with_stage2: f64,
    pub p_stage3_without_stage2: f64,
    pub p_stage3_beats_stage2: f64,
    pub p_memory: f64,
}

impl AblationReport {
    pub fn from_seeds(seeds: Vec<SeedAblation>) -> Result<Self> {
        if seeds.is_empty() {
            return Err(Error::InvalidArgument("ablation needs at least one seed".into()));
        }
        let k = seeds.len() as f64;
        let mut mean = [[0.0; 2]; 2];
        for s in &seeds {
            for (i, row) in mean.iter_mut().enumerate() {
                for (j, m) in row.iter_mut().enumerate() {
                    *m += s.drift[i][j] / k;
                }
            }
        }
        let mean_no_memory = seeds.iter().map(|s| s.drift_no_memory).sum::<f64>() / k;
        let p = |f: &dyn Fn(&SeedAblation) -> bool| {
            sign_test_p(seeds.iter().filter(|s| f(s)).count(), seeds.len())
        };
        Ok(Self {
            p_stage3_with_stage2: p(&|s| s.drift[1][1] < s.drift[1][0]),
            p_stage3_without_stage2: p(&|s| s.drift[0][1] < s.drift[0][0]),
            p_stage3_beats_stage2: p(&|s| s.drift[0][1] < s.drift[1][0]),
            p_memory: p(&|s| s.drift[1][1] < s.drift_no_memory),
            seeds,
            mean,
            mean_no_memory,
        })
    }

    pub fn to_table(&self) -> String {
        let m = &self.mean;
        format!(
            "mean self-rollout drift over {} seed(s)\n\
             {:>12} {:>12} {:>12}\n\
             {:>12} {:>12.4} {:>12.4}\n\
             {:>12} {:>12.4} {:>12.4}\n\
             stage 2+3 without memory: {:.4}\n",
            self.seeds.len(),
            "",
            "-stage3",
            "+stage3",
            "-stage2",
            m[0][0],
            m[0][1],
            "+stage2",
            m[1][0],
            m[1][1],
            self.mean_no_memory
        )
    }
}

/// One-sided sign test: probability of at least `wins` successes out of `n`
/// fair coin flips.
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    let mut p = 0.0;
    let mut c = 1.0f64;
    for k in 0..=n {
        if k > 0 {
            c = c * (n - k + 1) as f64 / k as f64;
        }
        if k >= wins {
            p += c;
        }
    }
    p / 2f64.powi(n as i32)
}

/// Trains every variant for `config.seed` and returns their drifts together
/// with the shared stage-1 checkpoint.
pub fn ablate_seed(config: &TrainConfig) -> Result<(SeedAblation, Checkpoint)> {
    let trainer = Trainer::new(config)?;
    let opts = PhaseOptions::default();
    let mut base = trainer.init_checkpoint();
    trainer.run_stage(&mut base, 1, opts)?;
    let text_loss = trainer.text_loss(&base.params, &trainer.corpus.val)?;

    let drift = |t: &Trainer, ck: &Checkpoint| t.evaluate_drift(ck, MemoryMode::SelfRollout).map(|d| d.drift);
    let d00 = drift(&trainer, &base)?;

    let mut s2 = base.clone();
    trainer.run_phase(&mut s2, Phase::Stage2, opts)?;
    let d10 = drift(&trainer, &s2)?;

    let mut s23 = s2.clone();
    trainer.run_phase(&mut s23, Phase::Stage3, opts)?;
    let d11 = drift(&trainer, &s23)?;

    let mut s3 = base.clone();
    trainer.run_phase(&mut s3, Phase::Stage3, PhaseOptions { allow_without_stage2: true, ..opts })?;
    let d01 = drift(&trainer, &s3)?;

    let mut no_mem_cfg = trainer.config.clone();
    no_mem_cfg.memory.history_depth = 0;
    let no_mem = trainer.reconfigured(&no_mem_cfg)?;
    let mut s23_0 = s2;
    no_mem.run_phase(&mut s23_0, Phase::Stage3, opts)?;
    let d_nm = drift(&no_mem, &s23_0)?;

    Ok((
        SeedAblation {
            seed: config.seed,
            drift: [[d00, d01], [d10, d11]],
            drift_no_memory: d_nm,
            text_loss,
            unigram_entropy: trainer.unigram_entropy(),
        },
        base,
    ))
}

/// Runs [`ablate_seed`] for every seed as concurrent jobs.
pub fn ablation_run(config: &TrainConfig, seeds: &[u64]) -> Result<AblationReport> {
    let results: Vec<Result<SeedAblation>> = std::thread::scope(|scope| {
        let jobs: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let cfg = TrainConfig { seed, ..config.clone() };
                scope.spawn(move || ablate_seed(&cfg).map(|(a, _)| a))
            })
            .collect();
        jobs.into_iter().map(|j| j.join().expect("ablation job panicked")).collect()
    });
    AblationReport::from_seeds(results.into_iter().collect::<Result<Vec<_>>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_test_values() {
        assert_eq!(sign_test_p(5, 5), 1.0 / 32.0);
        assert_eq!(sign_test_p(0, 5), 1.0);
        assert!((sign_test_p(4, 5) - 6.0 / 32.0).abs() < 1e-15);
    }
}
