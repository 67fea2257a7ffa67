//! Analytical cost of generating frame `n` when the generator sees every
//! prior frame in context (vanilla) versus a bounded, decay-pooled memory.
//!
//! Per-frame cost of a transformer over `t` tokens:
//! `layers · (4·t²·d + 8·t·d² + 4·t·d·d_ff)`; attention scores and mixing,
//! the four projections, and the feedforward pair. Norms and embeddings are
//! not counted.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::membank::total_memory_length;

/// Relative tolerance used to call a difference sequence constant.
pub const GROWTH_TOL: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub layers: usize,
    pub d: usize,
    pub d_ff: usize,
    /// Latent rows per frame.
    pub l: usize,
    /// Query rows.
    pub m: usize,
    /// Rows of the reference-frame condition.
    pub l_cond: usize,
    pub lambda: usize,
    pub history_depth: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            layers: 28,
            d: 1536,
            d_ff: 6144,
            l: 1024,
            m: 64,
            l_cond: 1024,
            lambda: 2,
            history_depth: 3,
        }
    }
}

impl ModelDims {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let dims: Self = toml::from_str(s)?;
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [self.layers, self.d, self.d_ff, self.l, self.m, self.l_cond, self.history_depth];
        if sizes.contains(&0) {
            return Err(Error::InvalidArgument("model dims must be positive".into()));
        }
        if self.lambda < 2 {
            return Err(Error::DecayFactor(self.lambda));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Vanilla,
    Bounded,
}

/// Tokens the generator processes for frame `n` (1-based).
pub fn frame_tokens(strategy: Strategy, n: usize, dims: &ModelDims) -> Result<usize> {
    dims.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("frame index starts at 1".into()));
    }
    Ok(match strategy {
        Strategy::Vanilla => n * dims.l + dims.l_cond,
        Strategy::Bounded => {
            let depth = (n - 1).min(dims.history_depth);
            let memory =
                if depth == 0 { 0 } else { total_memory_length(dims.l, dims.lambda, depth)? };
            dims.l + dims.m + dims.l_cond + memory
        }
    })
}

pub fn frame_flops(tokens: usize, dims: &ModelDims) -> f64 {
    let (t, d, f) = (tokens as f64, dims.d as f64, dims.d_ff as f64);
    dims.layers as f64 * (4.0 * t * t * d + 8.0 * t * d * d + 4.0 * t * d * f)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthOrder {
    Constant,
    Linear,
    Quadratic,
    Superquadratic,
}

fn diffs(xs: &[f64]) -> Vec<f64> {
    xs.windows(2).map(|w| w[1] - w[0]).collect()
}

fn nearly_constant(xs: &[f64], tol: f64) -> bool {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let spread = xs.iter().map(|x| (x - mean).abs()).fold(0.0, f64::max);
    let scale = xs.iter().map(|x| x.abs()).fold(0.0, f64::max);
    if mean.abs() <= 1e-12 * scale || scale == 0.0 {
        return spread <= 1e-12 * scale;
    }
    spread <= tol * mean.abs()
}

/// Lowest order whose finite differences are constant within
/// [`GROWTH_TOL`].
pub fn growth_order(series: &[f64]) -> Result<GrowthOrder> {
    if series.len() < 4 {
        return Err(Error::InvalidArgument("growth order needs at least 4 points".into()));
    }
    let d1 = diffs(series);
    let d2 = diffs(&d1);
    Ok(if nearly_constant(series, GROWTH_TOL) {
        GrowthOrder::Constant
    } else if nearly_constant(&d1, GROWTH_TOL) {
        GrowthOrder::Linear
    } else if nearly_constant(&d2, GROWTH_TOL) {
        GrowthOrder::Quadratic
    } else {
        GrowthOrder::Superquadratic
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub strategy: Strategy,
    pub tokens: Vec<usize>,
    pub flops: Vec<f64>,
    pub cumulative: Vec<f64>,
}

impl StrategyReport {
    /// Growth of the cumulative cost from frame `from` (1-based) on.
    pub fn growth_from(&self, from: usize) -> Result<GrowthOrder> {
        growth_order(self.cumulative.get(from.saturating_sub(1)..).unwrap_or(&[]))
    }
}

pub fn cumulative_report(strategy: Strategy, frames: usize, dims: &ModelDims) -> Result<StrategyReport> {
    if frames == 0 {
        return Err(Error::InvalidArgument("report needs at least one frame".into()));
    }
    let tokens = (1..=frames).map(|n| frame_tokens(strategy, n, dims)).collect::<Result<Vec<_>>>()?;
    let flops: Vec<f64> = tokens.iter().map(|&t| frame_flops(t, dims)).collect();
    let cumulative = flops
        .iter()
        .scan(0.0, |acc, f| {
            *acc += f;
            Some(*acc)
        })
        .collect();
    Ok(StrategyReport { strategy, tokens, flops, cumulative })
}

/// Both strategies side by side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub dims: ModelDims,
    pub vanilla: StrategyReport,
    pub bounded: StrategyReport,
    /// First frame from which the bounded cumulative cost never exceeds the
    /// vanilla one within the report.
    pub crossover: Option<usize>,
    /// Growth of the cumulative costs; the bounded one is measured on frames
    /// after the memory is full. `None` when too few frames.
    pub vanilla_order: Option<GrowthOrder>,
    pub bounded_order: Option<GrowthOrder>,
}

impl CostReport {
    pub fn new(frames: usize, dims: &ModelDims) -> Result<Self> {
        let vanilla = cumulative_report(Strategy::Vanilla, frames, dims)?;
        let bounded = cumulative_report(Strategy::Bounded, frames, dims)?;
        let mut crossover = None;
        for n in (1..=frames).rev() {
            if bounded.cumulative[n - 1] <= vanilla.cumulative[n - 1] {
                crossover = Some(n);
            } else {
                break;
            }
        }
        let vanilla_order = vanilla.growth_from(1).ok();
        let bounded_order = bounded.growth_from(dims.history_depth + 1).ok();
        Ok(Self { dims: dims.clone(), vanilla, bounded, crossover, vanilla_order, bounded_order })
    }

    pub fn frames(&self) -> usize {
        self.vanilla.tokens.len()
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("frame,tokens_vanilla,tokens_bounded,flops_vanilla,flops_bounded,cum_vanilla,cum_bounded\n");
        for i in 0..self.frames() {
            let _ = writeln!(
                out,
                "{},{},{},{:e},{:e},{:e},{:e}",
                i + 1,
                self.vanilla.tokens[i],
                self.bounded.tokens[i],
                self.vanilla.flops[i],
                self.bounded.flops[i],
                self.vanilla.cumulative[i],
                self.bounded.cumulative[i]
            );
        }
        out
    }

    /// Human-readable table with cumulative TFLOPs.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:>5} {:>10} {:>10} {:>14} {:>14}\n",
            "frame", "tok_van", "tok_bnd", "cum_van_TF", "cum_bnd_TF"
        );
        for i in 0..self.frames() {
            let _ = writeln!(
                out,
                "{:>5} {:>10} {:>10} {:>14.3} {:>14.3}",
                i + 1,
                self.vanilla.tokens[i],
                self.bounded.tokens[i],
                self.vanilla.cumulative[i] / 1e12,
                self.bounded.cumulative[i] / 1e12
            );
        }
        let fmt = |o: Option<GrowthOrder>| o.map_or("n/a".to_string(), |o| format!("{o:?}").to_lowercase());
        let _ = writeln!(out, "vanilla growth: {}", fmt(self.vanilla_order));
        let _ = writeln!(out, "bounded growth: {}", fmt(self.bounded_order));
        match self.crossover {
            Some(n) => {
                let _ = writeln!(out, "bounded cheaper from frame {n}");
            }
            None => out.push_str("bounded never cheaper within range\n"),
        }
        out
    }
}

/// Least-squares polynomial fit; returns coefficients (constant first) and R².
pub fn polyfit(xs: &[f64], ys: &[f64], degree: usize) -> Result<(Vec<f64>, f64)> {
    if xs.len() != ys.len() || xs.len() <= degree {
        return Err(Error::InvalidArgument("polyfit needs more points than the degree".into()));
    }
    let a = DMatrix::from_fn(xs.len(), degree + 1, |i, j| xs[i].powi(j as i32));
    let b = DVector::from_column_slice(ys);
    let coef = a
        .clone()
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|e| Error::InvalidArgument(format!("polyfit: {e}")))?;
    let fitted = &a * &coef;
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let ss_res: f64 = ys.iter().zip(fitted.iter()).map(|(y, f)| (y - f).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok((coef.iter().copied().collect(), r2))
}
