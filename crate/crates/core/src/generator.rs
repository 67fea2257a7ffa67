//! Toy conditional flow-matching generator.
//!
//! The velocity network `v_θ(x_t, t, C)` is a small transformer over latent
//! rows: each block cross-attends to every row of the conditioning signal,
//! then self-attends among latent rows, then applies an MLP. Training regresses
//! `ε − x_0` at `x_t = (1−t)·x_0 + t·ε`; sampling integrates from pure noise at
//! `t = 1` down to `t = 0` with explicit Euler steps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::membank::{ConditionPart, ConditionSignal, Span};
use crate::numerics::{ParamSet, Tape, Tensor, Var};

pub const PROJ_W: &str = "projector.w";
pub const PROJ_B: &str = "projector.b";

/// Frequencies of the sinusoidal time features.
const TIME_FREQS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub latent_rows: usize,
    pub latent_channels: usize,
    /// Channel width `d_c` of every conditioning row.
    pub cond_channels: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Largest memory lag that has its own segment embedding.
    pub max_lag: usize,
    /// Longest single conditioning part, in rows.
    pub max_part_rows: usize,
    pub n_steps: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            latent_rows: 16,
            latent_channels: 8,
            cond_channels: 8,
            width: 32,
            depth: 2,
            heads: 2,
            d_ff: 64,
            max_lag: 4,
            max_part_rows: 16,
            n_steps: 16,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.latent_rows,
            self.latent_channels,
            self.cond_channels,
            self.width,
            self.depth,
            self.heads,
            self.d_ff,
            self.max_part_rows,
            self.n_steps,
        ];
        if sizes.contains(&0) {
            return Err(Error::InvalidArgument("generator sizes must be positive".into()));
        }
        if self.width % self.heads != 0 {
            return Err(Error::InvalidArgument("width must be divisible by heads".into()));
        }
        Ok(())
    }
}

/// One flow-matching training example.
#[derive(Clone, Debug, PartialEq)]
pub struct FMSample {
    pub x0: Tensor,
    pub eps: Tensor,
    pub fm_time: f64,
    pub xt: Tensor,
    pub target: Tensor,
}

impl FMSample {
    pub fn new(x0: Tensor, eps: Tensor, fm_time: f64) -> Result<Self> {
        let xt = fm_interpolate(&x0, &eps, fm_time)?;
        let target = eps.sub(&x0)?;
        Ok(Self { x0, eps, fm_time, xt, target })
    }

    /// Draws `t ~ U[0,1]` and `ε ~ N(0, I)` from `rng`.
    pub fn draw<R: Rng + ?Sized>(x0: Tensor, rng: &mut R) -> Result<Self> {
        let t: f64 = rng.random();
        let eps = Tensor::randn(x0.rows(), x0.cols(), 1.0, rng);
        Self::new(x0, eps, t)
    }
}

/// `(1−t)·x0 + t·eps`.
pub fn fm_interpolate(x0: &Tensor, eps: &Tensor, fm_time: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&fm_time) {
        return Err(Error::InvalidArgument(format!("time {fm_time} outside [0, 1]")));
    }
    x0.zip(eps, |a, b| (1.0 - fm_time) * a + fm_time * b)
}

/// Integrates `dx/dt = v(x, t)` from `t = 1` to `t = 0` in `n_steps` equal
/// Euler steps, starting at `x`.
pub fn euler_integrate(
    mut x: Tensor,
    n_steps: usize,
    mut field: impl FnMut(&Tensor, f64) -> Result<Tensor>,
) -> Result<Tensor> {
    if n_steps == 0 {
        return Err(Error::InvalidArgument("sampler needs at least one step".into()));
    }
    let dt = 1.0 / n_steps as f64;
    for step in 0..n_steps {
        let t = 1.0 - step as f64 * dt;
        let v = field(&x, t)?;
        x = x.zip(&v, |a, b| a - dt * b)?;
        if !x.is_finite() {
            return Err(Error::Diverged { step });
        }
    }
    Ok(x)
}

/// Row metadata for a conditioning signal: segment id and offset in part.
fn condition_ids(cfg: &GeneratorConfig, spans: &[Span]) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut seg = Vec::new();
    let mut off = Vec::new();
    let mut expected = 0;
    for s in spans {
        if s.start != expected || s.end <= s.start {
            return Err(Error::Shape("condition spans must be contiguous and non-empty".into()));
        }
        expected = s.end;
        let id = match s.part {
            ConditionPart::Query => 0,
            ConditionPart::Reference => 1,
            ConditionPart::Memory { lag } if (1..=cfg.max_lag).contains(&lag) => 1 + lag,
            ConditionPart::Memory { lag } => {
                return Err(Error::InvalidArgument(format!(
                    "memory lag {lag} exceeds max_lag {}",
                    cfg.max_lag
                )))
            }
        };
        let n = s.end - s.start;
        if n > cfg.max_part_rows {
            return Err(Error::Shape(format!(
                "condition part of {n} rows exceeds max_part_rows {}",
                cfg.max_part_rows
            )));
        }
        seg.extend(std::iter::repeat_n(id, n));
        off.extend(0..n);
    }
    Ok((seg, off))
}

fn time_features(t: f64) -> Tensor {
    let mut f = Vec::with_capacity(2 * TIME_FREQS + 1);
    f.push(t);
    for k in 1..=TIME_FREQS {
        let a = std::f64::consts::PI * k as f64 * t;
        f.push(a.sin());
        f.push(a.cos());
    }
    Tensor::raw(1, f.len(), f)
}

fn block_name(i: usize, what: &str) -> String {
    format!("gen.b{i}.{what}")
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    /// Velocity-network parameters, all under the `gen.` prefix.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let c = &self.config;
        let w = c.width;
        let mut p = ParamSet::new();
        let lin = |rows: usize, cols: usize, gain: f64, rng: &mut R| {
            Tensor::randn(rows, cols, gain / (rows as f64).sqrt(), rng)
        };
        p.insert("gen.in_proj", lin(c.latent_channels, w, 1.0, rng));
        p.insert("gen.pos_emb", Tensor::randn(c.latent_rows, w, 0.3, rng));
        p.insert("gen.time_w", lin(2 * TIME_FREQS + 1, w, 1.0, rng));
        p.insert("gen.time_b", Tensor::zeros(1, w));
        p.insert("gen.cond_proj", lin(c.cond_channels, w, 1.0, rng));
        p.insert("gen.seg_emb", Tensor::randn(2 + c.max_lag, w, 0.3, rng));
        p.insert("gen.cond_pos", Tensor::randn(c.max_part_rows, w, 0.3, rng));
        let resid = 1.0 / (3.0 * c.depth as f64).sqrt();
        for i in 0..c.depth {
            for (norm, proj) in [("ca_norm", "ca"), ("sa_norm", "sa")] {
                p.insert(block_name(i, norm), Tensor::full(1, w, 1.0));
                for m in ["q", "k", "v"] {
                    p.insert(block_name(i, &format!("{proj}_{m}")), lin(w, w, 1.0, rng));
                }
                p.insert(block_name(i, &format!("{proj}_o")), lin(w, w, resid, rng));
            }
            p.insert(block_name(i, "cond_norm"), Tensor::full(1, w, 1.0));
            p.insert(block_name(i, "mlp_norm"), Tensor::full(1, w, 1.0));
            p.insert(block_name(i, "w1"), lin(w, c.d_ff, 1.0, rng));
            p.insert(block_name(i, "w2"), lin(c.d_ff, w, resid, rng));
        }
        p.insert("gen.final_norm", Tensor::full(1, w, 1.0));
        p.insert("gen.out_proj", lin(w, c.latent_channels, 0.5, rng));
        p
    }

    /// Affine projector from planner query states into the conditioning width.
    pub fn init_projector<R: Rng + ?Sized>(&self, d_model: usize, rng: &mut R) -> ParamSet {
        let mut p = ParamSet::new();
        let std = 1.0 / (d_model as f64).sqrt();
        p.insert(PROJ_W, Tensor::randn(d_model, self.config.cond_channels, std, rng));
        p.insert(PROJ_B, Tensor::zeros(1, self.config.cond_channels));
        p
    }

    pub fn project_queries_tape(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        states: Var,
        trainable: bool,
    ) -> Result<Var> {
        let w = tape.param(params, PROJ_W, trainable)?;
        if tape.value(states).cols() != tape.value(w).rows() {
            return Err(Error::Shape(format!(
                "query states have {} channels, projector expects {}",
                tape.value(states).cols(),
                tape.value(w).rows()
            )));
        }
        let b = tape.param(params, PROJ_B, trainable)?;
        let y = tape.matmul(states, w)?;
        tape.add_row(y, b)
    }

    /// `q·W + b` for each row of `q`.
    pub fn project_queries(&self, q: &Tensor, params: &ParamSet) -> Result<Tensor> {
        let mut tape = Tape::new();
        let s = tape.constant(q.clone());
        let y = self.project_queries_tape(&mut tape, params, s, false)?;
        Ok(tape.value(y).clone())
    }

    /// Records `v_θ(x_t, t, C)` on `tape`; `cond` holds the condition rows
    /// laid out as `spans` describes.
    #[allow(clippy::too_many_arguments)]
    pub fn velocity_tape(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        xt: &Tensor,
        t: f64,
        cond: Var,
        spans: &[Span],
        trainable: &dyn Fn(&str) -> bool,
    ) -> Result<Var> {
        let c = &self.config;
        if xt.rows() != c.latent_rows || xt.cols() != c.latent_channels {
            return Err(Error::Shape(format!(
                "latent is {}x{}, generator expects {}x{}",
                xt.rows(),
                xt.cols(),
                c.latent_rows,
                c.latent_channels
            )));
        }
        let cv = tape.value(cond);
        if cv.cols() != c.cond_channels {
            return Err(Error::Shape(format!(
                "condition has {} channels, generator expects {}",
                cv.cols(),
                c.cond_channels
            )));
        }
        if spans.last().map(|s| s.end) != Some(cv.rows()) {
            return Err(Error::Shape("condition spans do not cover the condition rows".into()));
        }
        let (seg, off) = condition_ids(c, spans)?;
        let bind = |tape: &mut Tape, name: &str| tape.param(params, name, trainable(name));

        let x = tape.constant(xt.clone());
        let in_proj = bind(tape, "gen.in_proj")?;
        let mut h = tape.matmul(x, in_proj)?;
        let pos = bind(tape, "gen.pos_emb")?;
        h = tape.add(h, pos)?;
        let tf = tape.constant(time_features(t));
        let tw = bind(tape, "gen.time_w")?;
        let tb = bind(tape, "gen.time_b")?;
        let te = tape.matmul(tf, tw)?;
        let te = tape.add_row(te, tb)?;
        let te = tape.silu(te);
        h = tape.add_row(h, te)?;

        let cproj = bind(tape, "gen.cond_proj")?;
        let mut ch = tape.matmul(cond, cproj)?;
        let seg_tab = bind(tape, "gen.seg_emb")?;
        let seg_e = tape.gather(seg_tab, &seg)?;
        ch = tape.add(ch, seg_e)?;
        let pos_tab = bind(tape, "gen.cond_pos")?;
        let pos_e = tape.gather(pos_tab, &off)?;
        ch = tape.add(ch, pos_e)?;

        for i in 0..c.depth {
            let g = bind(tape, &block_name(i, "ca_norm"))?;
            let hn = tape.rms_norm(h, g)?;
            let g = bind(tape, &block_name(i, "cond_norm"))?;
            let cn = tape.rms_norm(ch, g)?;
            let a = self.attend(tape, &bind, i, "ca", hn, cn)?;
            h = tape.add(h, a)?;

            let g = bind(tape, &block_name(i, "sa_norm"))?;
            let hn = tape.rms_norm(h, g)?;
            let a = self.attend(tape, &bind, i, "sa", hn, hn)?;
            h = tape.add(h, a)?;

            let g = bind(tape, &block_name(i, "mlp_norm"))?;
            let hn = tape.rms_norm(h, g)?;
            let w1 = bind(tape, &block_name(i, "w1"))?;
            let w2 = bind(tape, &block_name(i, "w2"))?;
            let f = tape.matmul(hn, w1)?;
            let f = tape.silu(f);
            let f = tape.matmul(f, w2)?;
            h = tape.add(h, f)?;
        }
        let g = bind(tape, "gen.final_norm")?;
        let h = tape.rms_norm(h, g)?;
        let out = bind(tape, "gen.out_proj")?;
        tape.matmul(h, out)
    }

    fn attend(
        &self,
        tape: &mut Tape,
        bind: &dyn Fn(&mut Tape, &str) -> Result<Var>,
        block: usize,
        kind: &str,
        queries: Var,
        keys: Var,
    ) -> Result<Var> {
        let wq = bind(tape, &block_name(block, &format!("{kind}_q")))?;
        let wk = bind(tape, &block_name(block, &format!("{kind}_k")))?;
        let wv = bind(tape, &block_name(block, &format!("{kind}_v")))?;
        let wo = bind(tape, &block_name(block, &format!("{kind}_o")))?;
        let q = tape.matmul(queries, wq)?;
        let k = tape.matmul(keys, wk)?;
        let v = tape.matmul(keys, wv)?;
        let a = tape.attention(q, k, v, self.config.heads, None)?;
        tape.matmul(a, wo)
    }

    pub fn velocity(
        &self,
        params: &ParamSet,
        xt: &Tensor,
        t: f64,
        condition: &ConditionSignal,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let cond = tape.constant(condition.rows.clone());
        let v = self.velocity_tape(&mut tape, params, xt, t, cond, &condition.spans, &|_| false)?;
        Ok(tape.value(v).clone())
    }

    /// Flow-matching loss of one sample on `tape`.
    #[allow(clippy::too_many_arguments)]
    pub fn fm_loss_tape(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        sample: &FMSample,
        cond: Var,
        spans: &[Span],
        trainable: &dyn Fn(&str) -> bool,
    ) -> Result<Var> {
        let v = self.velocity_tape(tape, params, &sample.xt, sample.fm_time, cond, spans, trainable)?;
        let target = tape.constant(sample.target.clone());
        tape.mse_mean(v, target)
    }

    /// Mean flow-matching loss over pre-drawn samples with constant
    /// conditions. Gradients of trainable parameters are added into `params`
    /// when `with_grad` is set.
    pub fn fm_loss_samples(
        &self,
        params: &mut ParamSet,
        batch: &[(FMSample, &ConditionSignal)],
        trainable: &dyn Fn(&str) -> bool,
        with_grad: bool,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut tape = Tape::new();
        let mut losses = Vec::with_capacity(batch.len());
        for (sample, cond) in batch {
            let cv = tape.constant(cond.rows.clone());
            losses.push(self.fm_loss_tape(&mut tape, params, sample, cv, &cond.spans, trainable)?);
        }
        let loss = mean_of(&mut tape, &losses)?;
        finish_loss(&mut tape, loss, params, with_grad, "flow-matching loss")
    }

    /// Mean flow-matching loss over `(x0, condition)` pairs, drawing one
    /// `(t, ε)` per pair from `rng` in batch order.
    pub fn fm_loss<R: Rng + ?Sized>(
        &self,
        params: &mut ParamSet,
        batch: &[(Tensor, ConditionSignal)],
        rng: &mut R,
        trainable: &dyn Fn(&str) -> bool,
        with_grad: bool,
    ) -> Result<f64> {
        let mut samples = Vec::with_capacity(batch.len());
        for (x0, cond) in batch {
            samples.push((FMSample::draw(x0.clone(), rng)?, cond));
        }
        self.fm_loss_samples(params, &samples, trainable, with_grad)
    }

    /// Draws `ε` from `rng` and integrates the learned field to `t = 0`.
    pub fn sample_euler<R: Rng + ?Sized>(
        &self,
        params: &ParamSet,
        condition: &ConditionSignal,
        n_steps: usize,
        rng: &mut R,
    ) -> Result<Tensor> {
        let c = &self.config;
        let eps = Tensor::randn(c.latent_rows, c.latent_channels, 1.0, rng);
        euler_integrate(eps, n_steps, |x, t| self.velocity(params, x, t, condition))
    }
}

/// Arithmetic mean of scalar vars.
pub(crate) fn mean_of(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    let w = 1.0 / parts.len() as f64;
    let mut acc: Option<Var> = None;
    for &p in parts {
        let s = tape.scale(p, w);
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    acc.ok_or_else(|| Error::InvalidArgument("mean of nothing".into()))
}

pub(crate) fn finish_loss(
    tape: &mut Tape,
    loss: Var,
    params: &mut ParamSet,
    with_grad: bool,
    what: &str,
) -> Result<f64> {
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite(what.into()));
    }
    if with_grad {
        tape.backward(loss)?;
        tape.accumulate_grads(params);
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::membank::assemble_condition;
    use crate::numerics::grad_check;
    use crate::rng::StreamRng;
    use rand::SeedableRng;

    fn small() -> (Generator, ParamSet) {
        let cfg = GeneratorConfig {
            latent_rows: 4,
            latent_channels: 3,
            cond_channels: 3,
            width: 8,
            depth: 1,
            heads: 2,
            d_ff: 8,
            max_lag: 2,
            max_part_rows: 4,
            n_steps: 4,
        };
        let g = Generator::new(cfg).unwrap();
        let mut rng = StreamRng::seed_from_u64(3);
        let mut p = g.init_params(&mut rng);
        p.extend_from(&g.init_projector(5, &mut rng));
        (g, p)
    }

    fn cond(rng: &mut StreamRng) -> ConditionSignal {
        let q = Tensor::randn(2, 3, 1.0, rng);
        let f = Tensor::randn(4, 3, 1.0, rng);
        let pooled = vec![crate::membank::PooledFeature {
            feature: Tensor::randn(4, 3, 1.0, rng),
            source_frame_index: 0,
            lag: 1,
        }];
        assemble_condition(&q, &f, &pooled).unwrap()
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let x0 = Tensor::from_rows(1, 2, vec![0.0, 2.0]).unwrap();
        let eps = Tensor::from_rows(1, 2, vec![2.0, 0.0]).unwrap();
        assert_eq!(fm_interpolate(&x0, &eps, 0.0).unwrap(), x0);
        assert_eq!(fm_interpolate(&x0, &eps, 1.0).unwrap(), eps);
        assert_eq!(fm_interpolate(&x0, &eps, 0.5).unwrap().data(), &[1.0, 1.0]);
        assert!(fm_interpolate(&x0, &eps, 1.5).is_err());
        assert!(fm_interpolate(&x0, &eps, -0.1).is_err());
    }

    #[test]
    fn euler_on_trivial_fields() {
        let mut rng = StreamRng::seed_from_u64(0);
        let eps = Tensor::randn(3, 2, 1.0, &mut rng);
        let out = euler_integrate(eps.clone(), 7, |x, _| Ok(Tensor::zeros(x.rows(), x.cols())))
            .unwrap();
        assert_eq!(out, eps);
        let c = Tensor::full(3, 2, 0.25);
        let out = euler_integrate(eps.clone(), 8, |_, _| Ok(c.clone())).unwrap();
        assert!(out.max_abs_diff(&eps.sub(&c).unwrap()) < 1e-15);
        let blow = euler_integrate(eps, 4, |x, _| Ok(x.map(|_| f64::INFINITY)));
        assert!(matches!(blow, Err(Error::Diverged { step: 0 })));
    }

    #[test]
    fn projector_identity_and_zero() {
        let (g, mut p) = small();
        let mut rng = StreamRng::seed_from_u64(1);
        let q = Tensor::randn(2, 5, 1.0, &mut rng);
        *p.value_mut(PROJ_W).unwrap() = Tensor::zeros(5, 3);
        assert_eq!(g.project_queries(&q, &p).unwrap(), Tensor::zeros(2, 3));
        let g3 = Generator::new(GeneratorConfig { cond_channels: 5, ..g.config.clone() }).unwrap();
        let mut p3 = g3.init_projector(5, &mut rng);
        *p3.value_mut(PROJ_W).unwrap() = Tensor::identity(5);
        assert_eq!(g3.project_queries(&q, &p3).unwrap(), q);
        assert!(g.project_queries(&Tensor::zeros(2, 4), &p).is_err());
    }

    #[test]
    fn zero_velocity_zero_data_gives_unit_loss() {
        let (g, mut p) = small();
        *p.value_mut("gen.out_proj").unwrap() = Tensor::zeros(8, 3);
        let mut rng = StreamRng::seed_from_u64(2);
        let c = cond(&mut rng);
        let batch: Vec<(Tensor, ConditionSignal)> =
            (0..400).map(|_| (Tensor::zeros(4, 3), c.clone())).collect();
        let loss = g.fm_loss(&mut p, &batch, &mut rng, &|_| false, false).unwrap();
        let tol = 3.0 / ((400 * 12) as f64).sqrt();
        assert!((loss - 1.0).abs() < tol, "loss {loss}");
    }

    #[test]
    fn loss_is_zero_when_prediction_is_exact() {
        let (g, mut p) = small();
        let mut rng = StreamRng::seed_from_u64(4);
        let c = cond(&mut rng);
        let x0 = Tensor::randn(4, 3, 1.0, &mut rng);
        let mut s = FMSample::draw(x0, &mut rng).unwrap();
        s.target = g.velocity(&p, &s.xt, s.fm_time, &c).unwrap();
        let loss = g.fm_loss_samples(&mut p, &[(s, &c)], &|_| false, false).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn condition_shape_checks() {
        let (g, p) = small();
        let mut rng = StreamRng::seed_from_u64(5);
        let xt = Tensor::zeros(4, 3);
        let wide = ConditionSignal::query_only(&Tensor::zeros(2, 6));
        assert!(matches!(g.velocity(&p, &xt, 0.5, &wide), Err(Error::Shape(_))));
        let c = cond(&mut rng);
        assert!(g.velocity(&p, &Tensor::zeros(5, 3), 0.5, &c).is_err());
        let deep = assemble_condition(
            &Tensor::zeros(2, 3),
            &Tensor::zeros(4, 3),
            &[crate::membank::PooledFeature {
                feature: Tensor::zeros(1, 3),
                source_frame_index: 0,
                lag: 3,
            }],
        )
        .unwrap();
        assert!(g.velocity(&p, &xt, 0.5, &deep).is_err());
    }

    #[test]
    fn memory_order_matters() {
        let (g, p) = small();
        let mut rng = StreamRng::seed_from_u64(6);
        let q = Tensor::randn(2, 3, 1.0, &mut rng);
        let f = Tensor::randn(4, 3, 1.0, &mut rng);
        let a = Tensor::randn(4, 3, 1.0, &mut rng);
        let b = Tensor::randn(2, 3, 1.0, &mut rng);
        let pf = |feature: &Tensor, lag| crate::membank::PooledFeature {
            feature: feature.clone(),
            source_frame_index: 0,
            lag,
        };
        let c1 = assemble_condition(&q, &f, &[pf(&a, 1), pf(&b, 2)]).unwrap();
        let c2 = assemble_condition(&q, &f, &[pf(&b, 1), pf(&a, 2)]).unwrap();
        let x = Tensor::randn(4, 3, 1.0, &mut rng);
        assert_ne!(g.velocity(&p, &x, 0.3, &c1).unwrap(), g.velocity(&p, &x, 0.3, &c2).unwrap());
    }

    #[test]
    fn fm_gradients_match_finite_differences() {
        let (g, mut p) = small();
        let mut rng = StreamRng::seed_from_u64(7);
        let c = cond(&mut rng);
        let samples: Vec<FMSample> = (0..2)
            .map(|_| FMSample::draw(Tensor::randn(4, 3, 1.0, &mut rng), &mut rng).unwrap())
            .collect();
        let report = grad_check(
            |ps| {
                let batch: Vec<_> = samples.iter().map(|s| (s.clone(), &c)).collect();
                g.fm_loss_samples(ps, &batch, &|_| true, true)
            },
            &mut p,
            |n| n.starts_with("gen."),
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err());
    }

    #[test]
    fn projector_gradients_through_condition() {
        let (g, mut p) = small();
        let mut rng = StreamRng::seed_from_u64(8);
        let states = Tensor::randn(2, 5, 1.0, &mut rng);
        let s = FMSample::draw(Tensor::randn(4, 3, 1.0, &mut rng), &mut rng).unwrap();
        let spans = [Span { part: ConditionPart::Query, start: 0, end: 2 }];
        let report = grad_check(
            |ps| {
                let mut tape = Tape::new();
                let sv = tape.constant(states.clone());
                let q = g.project_queries_tape(&mut tape, ps, sv, true)?;
                let l = g.fm_loss_tape(&mut tape, ps, &s, q, &spans, &|_| false)?;
                finish_loss(&mut tape, l, ps, true, "loss")
            },
            &mut p,
            |n| n.starts_with("projector."),
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err());
    }
}
