//! Text-conditioned flow matching over compact programs.
//!
//! Noise `ε` and a target program `m` are joined by the straight path
//! `m(r) = (1 − r) ε + r m`, whose velocity is the constant `m − ε`. A vector
//! field `v(m(r), r, Y)` is regressed onto that velocity; sampling integrates
//! `dm/dr = v` from `r = 0` to `1` with Euler steps, optionally with
//! classifier-free guidance `v_u + g (v_c − v_u)`.
//!
//! The field is a residual MLP over the flattened program. The time `r` enters
//! through a fixed sinusoidal embedding and the prompt through an additive
//! context vector; a learned null context stands in when the prompt is dropped.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bottleneck::{sample_posterior, BottleneckModel, CompactProgram, Posterior};
use crate::checkpoint::RngState;
use crate::dataset::Sample;
use crate::error::{shape_err, Error, Result};
use crate::linalg::gaussian_matrix;
use crate::nn::{silu, silu_backward, Linear, ParamBuilder, ParamLayout};
use crate::optim::{Adam, OptimConfig};
use crate::text::TokenTable;
use crate::train::{check_finite, Trained};

/// `(1 − r) ε + r m`; the endpoints return `ε` and `m` unchanged.
pub fn interpolate(epsilon: &Array2<f64>, m: &Array2<f64>, r: f64) -> Result<Array2<f64>> {
    if epsilon.dim() != m.dim() {
        return Err(shape_err(m.dim(), epsilon.dim()));
    }
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::RangeError { name: "r".into(), value: r, lo: 0.0, hi: 1.0 });
    }
    if r == 0.0 {
        return Ok(epsilon.clone());
    }
    if r == 1.0 {
        return Ok(m.clone());
    }
    Ok(epsilon * (1.0 - r) + m * r)
}

/// Anything that maps `(m, r, context)` to a velocity of the same shape as `m`.
/// `None` as context means the unconditional field.
pub trait VectorField {
    fn velocity(&self, m: ArrayView2<'_, f64>, r: f64, context: Option<ArrayView1<'_, f64>>) -> Result<Array2<f64>>;
}

/// A field that ignores its inputs.
#[derive(Debug, Clone)]
pub struct ConstantField(pub Array2<f64>);

impl VectorField for ConstantField {
    fn velocity(&self, m: ArrayView2<'_, f64>, _r: f64, _c: Option<ArrayView1<'_, f64>>) -> Result<Array2<f64>> {
        if m.dim() != self.0.dim() {
            return Err(shape_err(self.0.dim(), m.dim()));
        }
        Ok(self.0.clone())
    }
}

/// Mean squared error between the field and the path velocity `m − ε`, over all elements.
pub fn fm_loss<F: VectorField>(field: &F, epsilon: &Array2<f64>, m: &Array2<f64>, r: f64, context: Option<ArrayView1<'_, f64>>) -> Result<f64> {
    let x = interpolate(epsilon, m, r)?;
    let v = field.velocity(x.view(), r, context)?;
    let diff = v - (m - epsilon);
    Ok(diff.mapv(|d| d * d).mean().unwrap_or(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Euler,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    pub solver: Solver,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 16, guidance_scale: 1.5, solver: Solver::Euler }
    }
}

/// Integrates the flow from `init_noise` at `r = 0` to `r = 1`.
pub fn sample<F: VectorField>(field: &F, context: Option<ArrayView1<'_, f64>>, cfg: &SamplerConfig, init_noise: &Array2<f64>) -> Result<CompactProgram> {
    if cfg.steps == 0 {
        return Err(Error::ConfigInvalid("sampler needs at least one step".into()));
    }
    if !(cfg.guidance_scale >= 0.0) {
        return Err(Error::ConfigInvalid("guidance scale must be non-negative".into()));
    }
    let Solver::Euler = cfg.solver;
    let h = 1.0 / cfg.steps as f64;
    let g = cfg.guidance_scale;
    let mut m = init_noise.clone();
    for k in 0..cfg.steps {
        let r = k as f64 * h;
        let v = match context {
            None => field.velocity(m.view(), r, None)?,
            Some(_) if g == 1.0 => field.velocity(m.view(), r, context)?,
            Some(_) if g == 0.0 => field.velocity(m.view(), r, None)?,
            Some(_) => {
                let vc = field.velocity(m.view(), r, context)?;
                let vu = field.velocity(m.view(), r, None)?;
                &vu + &((vc - &vu) * g)
            }
        };
        m.scaled_add(h, &v);
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteState { step: k });
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub program_len: usize,
    pub program_dim: usize,
    pub context_dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub time_dim: usize,
    /// Probability of replacing the prompt context by the null context during training.
    pub cond_dropout: f64,
    /// Stratify `r` across each batch instead of drawing it independently.
    #[serde(default)]
    pub stratified_time: bool,
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { program_len: 8, program_dim: 48, context_dim: 32, hidden: 256, blocks: 2, time_dim: 32, cond_dropout: 0.2, stratified_time: false, seed: 0 }
    }
}

/// Fixed sinusoidal features of `r`, frequencies spaced geometrically from 1 to 1000.
pub fn time_embedding(r: f64, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for k in 0..half {
        let freq = if half > 1 { 1000f64.powf(k as f64 / (half - 1) as f64) } else { 1.0 };
        out[k] = (r * freq).sin();
        out[half + k] = (r * freq).cos();
    }
    out
}

#[derive(Debug, Clone)]
pub struct FlowModel {
    pub cfg: FlowConfig,
    pub layout: ParamLayout,
    pub params: Vec<f64>,
    lin_x: Linear,
    lin_r: Linear,
    lin_c: Linear,
    blocks: Vec<(Linear, Linear)>,
    lin_out: Linear,
    null_context: usize,
}

struct NetCache {
    x: Array2<f64>,
    temb: Array2<f64>,
    ctx: Array2<f64>,
    blocks: Vec<(Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>)>,
    top: Array2<f64>,
    top_act: Array2<f64>,
}

/// One regression example: noise, target program, time, and the prompt context (`None` = dropped).
#[derive(Debug, Clone, Copy)]
pub struct FlowExample<'a> {
    pub epsilon: &'a Array2<f64>,
    pub target: &'a Array2<f64>,
    pub r: f64,
    pub context: Option<ArrayView1<'a, f64>>,
}

impl FlowModel {
    pub fn new(cfg: FlowConfig) -> Result<Self> {
        if cfg.program_len == 0 || cfg.program_dim == 0 || cfg.hidden == 0 || cfg.time_dim < 2 {
            return Err(Error::ConfigInvalid("flow dimensions must be positive".into()));
        }
        if !(0.0..=1.0).contains(&cfg.cond_dropout) {
            return Err(Error::ConfigInvalid(format!("cond_dropout {} outside [0, 1]", cfg.cond_dropout)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut pb = ParamBuilder::new(&mut rng);
        let d = cfg.program_len * cfg.program_dim;
        let h = cfg.hidden;
        let lin_x = Linear::build(&mut pb, "flow.in", d, h, 1.0);
        let lin_r = Linear::build(&mut pb, "flow.time", cfg.time_dim, h, 1.0);
        let lin_c = Linear::build(&mut pb, "flow.context", cfg.context_dim, h, 1.0);
        let blocks = (0..cfg.blocks)
            .map(|i| (Linear::build(&mut pb, &format!("flow.block{i}.fc1"), h, h, 1.0), Linear::build(&mut pb, &format!("flow.block{i}.fc2"), h, h, 0.1)))
            .collect();
        let lin_out = Linear::build(&mut pb, "flow.out", h, d, 0.1);
        let null_context = pb.normal("flow.null_context", vec![1, cfg.context_dim], 0.1);
        let (layout, params) = pb.finish();
        Ok(Self { cfg, layout, params, lin_x, lin_r, lin_c, blocks, lin_out, null_context })
    }

    pub fn with_params(cfg: FlowConfig, params: Vec<f64>) -> Result<Self> {
        let mut model = Self::new(cfg)?;
        if params.len() != model.params.len() {
            return Err(shape_err(model.params.len(), params.len()));
        }
        model.params = params;
        Ok(model)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn null_context(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[self.null_context..self.null_context + self.cfg.context_dim])
    }

    fn forward(&self, x: Array2<f64>, temb: Array2<f64>, ctx: Array2<f64>) -> (Array2<f64>, NetCache) {
        let p = &self.params;
        let mut h = self.lin_x.forward(p, x.view());
        h += &self.lin_r.forward(p, temb.view());
        h += &self.lin_c.forward(p, ctx.view());
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (fc1, fc2) in &self.blocks {
            let a = silu(&h);
            let u = fc1.forward(p, a.view());
            let b = silu(&u);
            let next = &h + &fc2.forward(p, b.view());
            blocks.push((std::mem::replace(&mut h, next), a, u, b));
        }
        let top_act = silu(&h);
        let out = self.lin_out.forward(p, top_act.view());
        (out, NetCache { x, temb, ctx, blocks, top: h, top_act })
    }

    fn backward(&self, g: &mut [f64], cache: &NetCache, dout: &Array2<f64>, dropped: &[bool]) {
        let p = &self.params;
        let d_act = self.lin_out.backward(p, g, cache.top_act.view(), dout.view());
        let mut dh = silu_backward(&cache.top, &d_act);
        for ((fc1, fc2), (h, a, u, b)) in self.blocks.iter().zip(&cache.blocks).rev() {
            let db = fc2.backward(p, g, b.view(), dh.view());
            let du = silu_backward(u, &db);
            let da = fc1.backward(p, g, a.view(), du.view());
            dh += &silu_backward(h, &da);
        }
        self.lin_x.backward(p, g, cache.x.view(), dh.view());
        self.lin_r.backward(p, g, cache.temb.view(), dh.view());
        let dctx = self.lin_c.backward(p, g, cache.ctx.view(), dh.view());
        for (row, &drop) in dctx.rows().into_iter().zip(dropped) {
            if drop {
                for (k, v) in row.iter().enumerate() {
                    g[self.null_context + k] += v;
                }
            }
        }
    }

    fn check_program(&self, m: ArrayView2<'_, f64>) -> Result<()> {
        if m.dim() != (self.cfg.program_len, self.cfg.program_dim) {
            return Err(shape_err((self.cfg.program_len, self.cfg.program_dim), m.dim()));
        }
        Ok(())
    }

    fn context_row(&self, context: Option<ArrayView1<'_, f64>>) -> Result<Array1<f64>> {
        match context {
            Some(c) if c.len() != self.cfg.context_dim => Err(shape_err(self.cfg.context_dim, c.len())),
            Some(c) => Ok(c.to_owned()),
            None => Ok(self.null_context().to_owned()),
        }
    }

    fn assemble(&self, batch: &[FlowExample<'_>]) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>, Vec<bool>)> {
        let d = self.cfg.program_len * self.cfg.program_dim;
        let n = batch.len();
        let mut x = Array2::zeros((n, d));
        let mut target = Array2::zeros((n, d));
        let mut temb = Array2::zeros((n, self.cfg.time_dim));
        let mut ctx = Array2::zeros((n, self.cfg.context_dim));
        let mut dropped = Vec::with_capacity(n);
        for (i, ex) in batch.iter().enumerate() {
            self.check_program(ex.target.view())?;
            let xi = interpolate(ex.epsilon, ex.target, ex.r)?;
            x.row_mut(i).assign(&Array1::from_iter(xi.iter().copied()));
            target.row_mut(i).assign(&Array1::from_iter(ex.target.iter().zip(ex.epsilon.iter()).map(|(m, e)| m - e)));
            temb.row_mut(i).assign(&time_embedding(ex.r, self.cfg.time_dim));
            ctx.row_mut(i).assign(&self.context_row(ex.context)?);
            dropped.push(ex.context.is_none());
        }
        Ok((x, target, temb, ctx, dropped))
    }

    /// Mean over the batch of the per-example flow-matching loss.
    pub fn fm_loss_batch(&self, batch: &[FlowExample<'_>]) -> Result<f64> {
        self.loss_impl(batch, false).map(|(l, _)| l)
    }

    pub fn fm_loss_grad(&self, batch: &[FlowExample<'_>]) -> Result<(f64, Vec<f64>)> {
        self.loss_impl(batch, true)
    }

    fn loss_impl(&self, batch: &[FlowExample<'_>], with_grad: bool) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::DegenerateBatch(0));
        }
        let (x, target, temb, ctx, dropped) = self.assemble(batch)?;
        let (v, cache) = self.forward(x, temb, ctx);
        let diff = v - target;
        let denom = diff.len() as f64;
        let loss = diff.mapv(|d| d * d).sum() / denom;
        let mut grad = Vec::new();
        if with_grad {
            grad = vec![0.0; self.params.len()];
            self.backward(&mut grad, &cache, &(diff * (2.0 / denom)), &dropped);
        }
        Ok((loss, grad))
    }
}

impl VectorField for FlowModel {
    fn velocity(&self, m: ArrayView2<'_, f64>, r: f64, context: Option<ArrayView1<'_, f64>>) -> Result<Array2<f64>> {
        self.check_program(m)?;
        let x = Array2::from_shape_vec((1, m.len()), m.iter().copied().collect()).expect("flattened");
        let temb = time_embedding(r, self.cfg.time_dim).insert_axis(Axis(0));
        let ctx = self.context_row(context)?.insert_axis(Axis(0));
        let (v, _) = self.forward(x, temb, ctx);
        Ok(Array2::from_shape_vec(m.dim(), v.into_raw_vec_and_offset().0).expect("same size"))
    }
}

/// One optimizer step of the generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub step: usize,
    pub loss: f64,
}

/// Trains the field against a frozen bottleneck: each step draws targets from
/// the posterior of every sample, fresh noise and times, and drops the prompt
/// context with probability `cond_dropout`.
pub fn train_flow(samples: &[Sample], bottleneck: &BottleneckModel, model: FlowModel, opt: &OptimConfig) -> Result<Trained<FlowModel, FlowRecord>> {
    if samples.is_empty() {
        return Err(Error::TooFewSamples(0));
    }
    let table = TokenTable::new(bottleneck.cfg.text);
    let posteriors: Vec<Posterior> = samples.iter().map(|s| bottleneck.encode(&s.latents)).collect::<Result<_>>()?;
    let contexts: Vec<Array1<f64>> = samples
        .iter()
        .map(|s| table.embed(&s.prompt_tokens).map(|p| bottleneck.text_context(&p)))
        .collect::<Result<_>>()?;
    train_flow_on(&posteriors, &contexts, model, opt)
}

/// Training loop over precomputed posteriors and prompt contexts.
pub fn train_flow_on(posteriors: &[Posterior], contexts: &[Array1<f64>], mut model: FlowModel, opt: &OptimConfig) -> Result<Trained<FlowModel, FlowRecord>> {
    use rand::seq::SliceRandom;
    if posteriors.is_empty() || posteriors.len() != contexts.len() {
        return Err(Error::CountMismatch(format!("{} posteriors, {} contexts", posteriors.len(), contexts.len())));
    }
    if opt.batch_size == 0 {
        return Err(Error::ConfigInvalid("batch_size must be positive".into()));
    }
    let (tm, dm) = (model.cfg.program_len, model.cfg.program_dim);
    for p in posteriors {
        if p.mu.dim() != (tm, dm) {
            return Err(shape_err((tm, dm), p.mu.dim()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let mut adam = Adam::new(model.num_params());
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..posteriors.len()).collect();
    for _ in 0..opt.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(opt.batch_size) {
            let n = chunk.len();
            let mut eps = Vec::with_capacity(n);
            let mut targets = Vec::with_capacity(n);
            let mut rs = Vec::with_capacity(n);
            let mut keep = Vec::with_capacity(n);
            for (j, &i) in chunk.iter().enumerate() {
                targets.push(sample_posterior(&posteriors[i], &gaussian_matrix(&mut rng, tm, dm, 1.0))?);
                eps.push(gaussian_matrix(&mut rng, tm, dm, 1.0));
                let u: f64 = rng.gen();
                rs.push(if model.cfg.stratified_time { (j as f64 + u) / n as f64 } else { u });
                keep.push(rng.gen::<f64>() >= model.cfg.cond_dropout);
            }
            let batch: Vec<FlowExample<'_>> = chunk
                .iter()
                .enumerate()
                .map(|(j, &i)| FlowExample { epsilon: &eps[j], target: &targets[j], r: rs[j], context: keep[j].then(|| contexts[i].view()) })
                .collect();
            let (loss, grad) = model.fm_loss_grad(&batch)?;
            let step = adam.steps();
            check_finite(step, loss, &grad)?;
            adam.update(opt, &mut model.params, &grad);
            check_finite(step, loss, &model.params)?;
            history.push(FlowRecord { step, loss });
        }
    }
    Ok(Trained { model, history, rng_state: RngState::capture(&rng) })
}
