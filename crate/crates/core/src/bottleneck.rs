//! Text-aligned variational bottleneck over policy-latent trajectories.
//!
//! The encoder is a stack of stride-2 temporal convolutions with residual
//! blocks producing a diagonal Gaussian over a compact program of
//! `T_z / c` frames; the decoder mirrors it with nearest-neighbour
//! upsampling. Two projection heads map program frames and prompt tokens into
//! a shared unit-norm space for the frame-token contrastive term.
//!
//! The objective for a batch is
//!
//! ```text
//! L = mean_i [ (1/T_z) Σ_t ||z_t − ẑ_t||² + (λ_π/T_z) Σ_t KL(π(·|s_t, ẑ_t) || π(·|s_t, z_t)) ]
//!   + β · mean_i KL(q(m|z_i) || N(0, I))
//!   + λ_sem · L_sem
//! ```
//!
//! with the prior KL averaged over program frames and dimensions. Gradients
//! are derived by hand for every layer.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{contrastive_loss_grad, normalize_rows, normalize_rows_backward, similarity_backward, similarity_forward};
use crate::error::{shape_err, Error, Result};
use crate::geometry::{LatentTrajectory, StateTrajectory, Trajectory};
use crate::nn::{silu, silu_backward, upsample2, upsample2_backward, Conv1d, ConvCache, Linear, ParamBuilder, ParamLayout, ResBlock, ResCache};
use crate::text::{TextPrompt, TokenTableSpec};
use crate::world::SyntheticWorld;

/// A compact program, `[T_m × d_m]`.
pub type CompactProgram = Array2<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BottleneckConfig {
    pub latent_dim: usize,
    pub program_dim: usize,
    pub width: usize,
    /// Temporal compression factor; a power of two, one stride-2 level per factor of two.
    pub compression: usize,
    pub text: TokenTableSpec,
    pub embed_dim: usize,
    pub logit_scale_init: f64,
    /// Right-pad inputs whose length is not a multiple of `compression` by
    /// repeating the last frame; padded frames are masked out of every loss.
    pub pad_to_multiple: bool,
    pub seed: u64,
}

impl Default for BottleneckConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            program_dim: 48,
            width: 32,
            compression: 8,
            text: TokenTableSpec { vocab_size: 9, dim: 32, seed: 17 },
            embed_dim: 32,
            logit_scale_init: (1.0f64 / 0.07).ln(),
            pad_to_multiple: true,
            seed: 0,
        }
    }
}

impl BottleneckConfig {
    pub fn levels(&self) -> Result<usize> {
        let c = self.compression;
        if c < 2 || !c.is_power_of_two() {
            return Err(Error::ConfigInvalid(format!("compression factor {c} must be a power of two ≥ 2")));
        }
        Ok(c.trailing_zeros() as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub beta: f64,
    pub lambda_pi: f64,
    pub lambda_sem: f64,
    pub lambda_tok: f64,
    pub lambda_frm: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { beta: 1e-4, lambda_pi: 0.1, lambda_sem: 0.35, lambda_tok: 0.1, lambda_frm: 0.1 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.lambda_pi >= 0.0 && self.lambda_sem >= 0.0) {
            return Err(Error::ConfigInvalid("loss weights must be non-negative".into()));
        }
        if !(self.lambda_tok > 0.0 && self.lambda_frm > 0.0) {
            return Err(Error::ConfigInvalid("temperatures must be positive".into()));
        }
        Ok(())
    }
}

/// Diagonal Gaussian over a compact program.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub mu: Array2<f64>,
    pub log_var: Array2<f64>,
    /// Leading frames that cover at least one unpadded input frame.
    pub valid_frames: usize,
}

/// `m = μ + exp(½ log σ²) ⊙ noise`.
pub fn sample_posterior(p: &Posterior, noise: &Array2<f64>) -> Result<CompactProgram> {
    if noise.dim() != p.mu.dim() {
        return Err(shape_err(p.mu.dim(), noise.dim()));
    }
    let mut m = p.log_var.mapv(|lv| (0.5 * lv).exp());
    m *= noise;
    m += &p.mu;
    Ok(m)
}

/// Prior KL averaged over valid frames and dimensions.
pub fn kl_prior_loss(p: &Posterior) -> f64 {
    let n = p.valid_frames.min(p.mu.nrows());
    let mu = p.mu.slice(s![..n, ..]);
    let lv = p.log_var.slice(s![..n, ..]);
    let total: f64 = mu.iter().zip(lv.iter()).map(|(&m, &l)| 0.5 * (m * m + l.exp() - l - 1.0)).sum();
    total / (n * p.mu.ncols()) as f64
}

/// Latent MSE plus weighted policy KL, averaged over frames.
pub fn reconstruction_loss(
    z: &LatentTrajectory,
    z_hat: &LatentTrajectory,
    states: &StateTrajectory,
    world: &SyntheticWorld,
    lambda_pi: f64,
) -> Result<f64> {
    if z.data().dim() != z_hat.data().dim() {
        return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", z.data().dim(), z_hat.data().dim())));
    }
    let (mse, kl, _) = reconstruction_terms(z.view(), z_hat.view(), states, world)?;
    Ok(mse + lambda_pi * kl)
}

/// Mean squared latent error, mean policy KL, and `∂(mse + λ kl)/∂ẑ` split as (d_mse, d_kl).
fn reconstruction_terms(
    z: ArrayView2<'_, f64>,
    z_hat: ArrayView2<'_, f64>,
    states: &StateTrajectory,
    world: &SyntheticWorld,
) -> Result<(f64, f64, (Array2<f64>, Array2<f64>))> {
    let t = z.nrows();
    if states.len() < t {
        return Err(Error::DimensionMismatch(format!("{} states for {t} latents", states.len())));
    }
    if z.ncols() != world.latent_dim() {
        return Err(Error::DimensionMismatch("latent dimension differs from the world".into()));
    }
    let diff = &z_hat - &z;
    let tf = t as f64;
    let mse = diff.mapv(|x| x * x).sum() / tf;
    let var = world.policy_std() * world.policy_std();
    // ||W_z Δ||² / (2σ²) per frame
    let action_gap = diff.dot(&world.w_z.t());
    let kl = action_gap.mapv(|x| x * x).sum() / (2.0 * var * tf);
    let d_mse = &diff * (2.0 / tf);
    let d_kl = action_gap.dot(&world.w_z) / (var * tf);
    Ok((mse, kl, (d_mse, d_kl)))
}

#[derive(Debug, Clone)]
struct Encoder {
    conv_in: Conv1d,
    levels: Vec<(Conv1d, ResBlock)>,
    head_mu: Linear,
    head_lv: Linear,
}

struct EncoderCache {
    k_in: ConvCache,
    levels: Vec<(Array2<f64>, ConvCache, ResCache)>,
    top: Array2<f64>,
    top_act: Array2<f64>,
}

impl Encoder {
    fn forward(&self, p: &[f64], z: ArrayView2<'_, f64>) -> (Array2<f64>, Array2<f64>, EncoderCache) {
        let (mut h, k_in) = self.conv_in.forward(p, z);
        let mut levels = Vec::with_capacity(self.levels.len());
        for (down, res) in &self.levels {
            let (x, kd) = down.forward(p, silu(&h).view());
            let (y, rc) = res.forward(p, x);
            levels.push((std::mem::replace(&mut h, y), kd, rc));
        }
        let top_act = silu(&h);
        let mu = self.head_mu.forward(p, top_act.view());
        let lv = self.head_lv.forward(p, top_act.view());
        (mu, lv, EncoderCache { k_in, levels, top: h, top_act })
    }

    fn backward(&self, p: &[f64], g: &mut [f64], cache: &EncoderCache, dmu: &Array2<f64>, dlv: &Array2<f64>) {
        let mut d_act = self.head_mu.backward(p, g, cache.top_act.view(), dmu.view());
        d_act += &self.head_lv.backward(p, g, cache.top_act.view(), dlv.view());
        let mut dh = silu_backward(&cache.top, &d_act);
        for ((down, res), (h_prev, kd, rc)) in self.levels.iter().zip(&cache.levels).rev() {
            let dx = res.backward(p, g, rc, &dh);
            let da = down.backward(p, g, kd, dx.view());
            dh = silu_backward(h_prev, &da);
        }
        self.conv_in.backward(p, g, &cache.k_in, dh.view());
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    lin_in: Linear,
    levels: Vec<(Conv1d, ResBlock)>,
    conv_out: Conv1d,
}

struct DecoderCache {
    levels: Vec<(Array2<f64>, ConvCache, ResCache)>,
    top: Array2<f64>,
    k_out: ConvCache,
}

impl Decoder {
    fn forward(&self, p: &[f64], m: ArrayView2<'_, f64>) -> (Array2<f64>, DecoderCache) {
        let mut h = self.lin_in.forward(p, m);
        let mut levels = Vec::with_capacity(self.levels.len());
        for (conv, res) in &self.levels {
            let up = upsample2(&silu(&h));
            let (x, kc) = conv.forward(p, up.view());
            let (y, rc) = res.forward(p, x);
            levels.push((std::mem::replace(&mut h, y), kc, rc));
        }
        let (out, k_out) = self.conv_out.forward(p, silu(&h).view());
        (out, DecoderCache { levels, top: h, k_out })
    }

    fn backward(&self, p: &[f64], g: &mut [f64], cache: &DecoderCache, m: ArrayView2<'_, f64>, dout: &Array2<f64>) -> Array2<f64> {
        let d_act = self.conv_out.backward(p, g, &cache.k_out, dout.view());
        let mut dh = silu_backward(&cache.top, &d_act);
        for ((conv, res), (h_prev, kc, rc)) in self.levels.iter().zip(&cache.levels).rev() {
            let dx = res.backward(p, g, rc, &dh);
            let dup = conv.backward(p, g, kc, dx.view());
            dh = silu_backward(h_prev, &upsample2_backward(&dup));
        }
        self.lin_in.backward(p, g, m, dh.view())
    }
}

#[derive(Debug, Clone)]
pub struct BottleneckModel {
    pub cfg: BottleneckConfig,
    pub layout: ParamLayout,
    pub params: Vec<f64>,
    encoder: Encoder,
    decoder: Decoder,
    proj_m: Linear,
    proj_y: Linear,
    logit_scale: usize,
}

/// One training pair with its reparameterization noise (`[T_m × d_m]`).
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub latents: &'a LatentTrajectory,
    pub states: &'a StateTrajectory,
    pub prompt: &'a TextPrompt,
    pub noise: &'a Array2<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub rec: f64,
    pub kl: f64,
    pub sem: f64,
    pub rec_mse: f64,
    pub rec_policy: f64,
}

struct ItemPass {
    padded: Array2<f64>,
    valid_z: usize,
    valid_m: usize,
    enc: EncoderCache,
    mu: Array2<f64>,
    lv: Array2<f64>,
    m: Array2<f64>,
    dec: DecoderCache,
    z_hat: Array2<f64>,
    pm_unit: Array2<f64>,
    pm_norms: Array1<f64>,
    m_valid: Array2<f64>,
    y_unit: Array2<f64>,
    y_norms: Array1<f64>,
}

impl BottleneckModel {
    pub fn new(cfg: BottleneckConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let levels = cfg.levels()?;
        let w = cfg.width;
        let mut pb = ParamBuilder::new(&mut rng);
        let conv_in = Conv1d::same(&mut pb, "enc.in", cfg.latent_dim, w, 3, 1.0);
        let enc_levels = (0..levels)
            .map(|l| (Conv1d::down(&mut pb, &format!("enc.down{l}"), w, w, 1.0), ResBlock::build(&mut pb, &format!("enc.res{l}"), w)))
            .collect();
        let head_mu = Linear::build(&mut pb, "enc.mu", w, cfg.program_dim, 1.0);
        let head_lv = Linear::build(&mut pb, "enc.logvar", w, cfg.program_dim, 0.1);
        let lin_in = Linear::build(&mut pb, "dec.in", cfg.program_dim, w, 1.0);
        let dec_levels = (0..levels)
            .map(|l| (Conv1d::same(&mut pb, &format!("dec.up{l}"), w, w, 3, 1.0), ResBlock::build(&mut pb, &format!("dec.res{l}"), w)))
            .collect();
        let conv_out = Conv1d::same(&mut pb, "dec.out", w, cfg.latent_dim, 3, 1.0);
        let proj_m = Linear::build(&mut pb, "proj.program", cfg.program_dim, cfg.embed_dim, 1.0);
        let proj_y = Linear::build(&mut pb, "proj.text", cfg.text.dim, cfg.embed_dim, 1.0);
        let logit_scale = pb.constant("logit_scale", vec![1], cfg.logit_scale_init);
        let (layout, mut params) = pb.finish();
        // start with a moderately narrow posterior
        let lv_bias = layout.block("enc.logvar.bias").expect("declared above").range();
        params[lv_bias].iter_mut().for_each(|b| *b = -2.0);
        Ok(Self {
            cfg,
            layout,
            params,
            encoder: Encoder { conv_in, levels: enc_levels, head_mu, head_lv },
            decoder: Decoder { lin_in, levels: dec_levels, conv_out },
            proj_m,
            proj_y,
            logit_scale,
        })
    }

    /// Rebuilds a model with the given parameter vector.
    pub fn with_params(cfg: BottleneckConfig, params: Vec<f64>) -> Result<Self> {
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

    pub fn gamma(&self) -> f64 {
        self.params[self.logit_scale].exp()
    }

    pub fn program_len(&self, latent_len: usize) -> usize {
        latent_len.div_ceil(self.cfg.compression)
    }

    fn pad(&self, z: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let c = self.cfg.compression;
        let len = z.nrows();
        if len == 0 {
            return Err(Error::DimensionMismatch("empty latent sequence".into()));
        }
        if z.ncols() != self.cfg.latent_dim {
            return Err(Error::DimensionMismatch(format!("latent dimension {} vs {}", z.ncols(), self.cfg.latent_dim)));
        }
        if len % c == 0 {
            return Ok(z.to_owned());
        }
        if !self.cfg.pad_to_multiple {
            return Err(Error::LengthNotCompressible { len, factor: c });
        }
        let padded_len = len.div_ceil(c) * c;
        let mut out = Array2::zeros((padded_len, z.ncols()));
        out.slice_mut(s![..len, ..]).assign(&z);
        for t in len..padded_len {
            out.row_mut(t).assign(&z.row(len - 1));
        }
        Ok(out)
    }

    pub fn encode(&self, z: &LatentTrajectory) -> Result<Posterior> {
        let padded = self.pad(z.view())?;
        let (mu, log_var, _) = self.encoder.forward(&self.params, padded.view());
        Ok(Posterior { mu, log_var, valid_frames: self.program_len(z.len()) })
    }

    /// Decodes `T_m` program frames into `c · T_m` latents (not sphere-projected).
    pub fn decode(&self, m: &CompactProgram) -> Result<LatentTrajectory> {
        if m.ncols() != self.cfg.program_dim || m.nrows() == 0 {
            return Err(shape_err(("T_m", self.cfg.program_dim), m.dim()));
        }
        let (out, _) = self.decoder.forward(&self.params, m.view());
        Trajectory::new(out)
    }

    /// Unit-norm projected frames of a program, `[T_m × d_e]`.
    pub fn project_program(&self, m: ArrayView2<'_, f64>) -> Array2<f64> {
        normalize_rows(&self.proj_m.forward(&self.params, m)).0
    }

    /// Unit-norm projected tokens of a prompt, `[K × d_e]`.
    pub fn project_text(&self, prompt: &TextPrompt) -> Array2<f64> {
        normalize_rows(&self.proj_y.forward(&self.params, prompt.embeddings.view())).0
    }

    /// Pooled unit embedding of a program: normalized mean of its projected frames.
    pub fn program_embedding(&self, m: ArrayView2<'_, f64>) -> Array1<f64> {
        unit_mean(&self.project_program(m))
    }

    pub fn text_embedding(&self, prompt: &TextPrompt) -> Array1<f64> {
        unit_mean(&self.project_text(prompt))
    }

    /// Generator conditioning: mean of the projected unit tokens, `[d_e]`.
    pub fn text_context(&self, prompt: &TextPrompt) -> Array1<f64> {
        self.project_text(prompt).mean_axis(Axis(0)).expect("prompt has at least one token")
    }

    /// Embedding of a latent segment through the posterior mean.
    pub fn segment_embedding(&self, z: &LatentTrajectory) -> Result<Array1<f64>> {
        let post = self.encode(z)?;
        Ok(self.program_embedding(post.mu.slice(s![..post.valid_frames, ..])))
    }

    fn forward_item(&self, item: &BatchItem<'_>) -> Result<ItemPass> {
        let p = &self.params;
        let padded = self.pad(item.latents.view())?;
        let valid_z = item.latents.len();
        let (mu, lv, enc) = self.encoder.forward(p, padded.view());
        let valid_m = self.program_len(valid_z);
        if item.noise.dim() != mu.dim() {
            return Err(shape_err(mu.dim(), item.noise.dim()));
        }
        let m = &mu + &(lv.mapv(|x| (0.5 * x).exp()) * item.noise);
        let (z_hat, dec) = self.decoder.forward(p, m.view());
        let m_valid = m.slice(s![..valid_m, ..]).to_owned();
        let (pm_unit, pm_norms) = normalize_rows(&self.proj_m.forward(p, m_valid.view()));
        if item.prompt.embeddings.ncols() != self.cfg.text.dim {
            return Err(Error::DimensionMismatch("prompt embedding dimension".into()));
        }
        let (y_unit, y_norms) = normalize_rows(&self.proj_y.forward(p, item.prompt.embeddings.view()));
        Ok(ItemPass { padded, valid_z, valid_m, enc, mu, lv, m, dec, z_hat, pm_unit, pm_norms, m_valid, y_unit, y_norms })
    }

    /// Loss components without gradients.
    pub fn vbb_loss(&self, batch: &[BatchItem<'_>], world: &SyntheticWorld, cfg: &LossConfig) -> Result<LossComponents> {
        self.loss_impl(batch, world, cfg, false).map(|(c, _)| c)
    }

    /// Loss components and the gradient w.r.t. every parameter.
    pub fn vbb_loss_grad(&self, batch: &[BatchItem<'_>], world: &SyntheticWorld, cfg: &LossConfig) -> Result<(LossComponents, Vec<f64>)> {
        self.loss_impl(batch, world, cfg, true)
    }

    fn loss_impl(&self, batch: &[BatchItem<'_>], world: &SyntheticWorld, cfg: &LossConfig, with_grad: bool) -> Result<(LossComponents, Vec<f64>)> {
        cfg.validate()?;
        if batch.is_empty() {
            return Err(Error::DegenerateBatch(0));
        }
        let p = &self.params;
        let bf = batch.len() as f64;
        let passes = batch.iter().map(|item| self.forward_item(item)).collect::<Result<Vec<_>>>()?;
        let mut comp = LossComponents::default();
        let mut grad = vec![0.0; if with_grad { p.len() } else { 0 }];

        // semantic term over the whole batch; undefined for a single pair
        let mut sem_grads = None;
        if batch.len() >= 2 {
            let pv: Vec<_> = passes.iter().map(|x| x.pm_unit.view()).collect();
            let tv: Vec<_> = passes.iter().map(|x| x.y_unit.view()).collect();
            let parts = similarity_forward(&pv, &tv, cfg.lambda_tok, cfg.lambda_frm);
            let gamma = self.gamma();
            let (sem, d_r, d_gamma) = contrastive_loss_grad(&parts.r, gamma)?;
            comp.sem = sem;
            if with_grad && cfg.lambda_sem > 0.0 {
                let d_r = d_r * cfg.lambda_sem;
                let (dp, dt) = similarity_backward(&parts, &pv, &tv, &d_r, cfg.lambda_frm);
                grad[self.logit_scale] += cfg.lambda_sem * d_gamma * gamma;
                sem_grads = Some((dp, dt));
            }
        }

        for (k, (item, pass)) in batch.iter().zip(&passes).enumerate() {
            let z_hat = pass.z_hat.slice(s![..pass.valid_z, ..]);
            let (mse, pol, (d_mse, d_pol)) = reconstruction_terms(item.latents.view(), z_hat, item.states, world)?;
            comp.rec_mse += mse / bf;
            comp.rec_policy += pol / bf;
            comp.rec += (mse + cfg.lambda_pi * pol) / bf;
            let post = Posterior { mu: pass.mu.clone(), log_var: pass.lv.clone(), valid_frames: pass.valid_m };
            comp.kl += kl_prior_loss(&post) / bf;
            if !with_grad {
                continue;
            }
            let mut dz_hat = Array2::zeros(pass.z_hat.dim());
            dz_hat.slice_mut(s![..pass.valid_z, ..]).assign(&((d_mse + d_pol * cfg.lambda_pi) / bf));
            let mut dm = self.decoder.backward(p, &mut grad, &pass.dec, pass.m.view(), &dz_hat);
            if let Some((dp, dt)) = &sem_grads {
                let d_pre = normalize_rows_backward(&pass.pm_unit, &pass.pm_norms, &dp[k]);
                let d_mv = self.proj_m.backward(p, &mut grad, pass.m_valid.view(), d_pre.view());
                dm.slice_mut(s![..pass.valid_m, ..]).scaled_add(1.0, &d_mv);
                let d_ypre = normalize_rows_backward(&pass.y_unit, &pass.y_norms, &dt[k]);
                self.proj_y.backward(p, &mut grad, item.prompt.embeddings.view(), d_ypre.view());
            }
            // reparameterization plus the prior KL on valid frames
            let std = pass.lv.mapv(|x| (0.5 * x).exp());
            let mut dmu = dm.clone();
            let mut dlv = &dm * &(&std * item.noise) * 0.5;
            let scale = cfg.beta / (bf * (pass.valid_m * self.cfg.program_dim) as f64);
            {
                let mut dmu_v = dmu.slice_mut(s![..pass.valid_m, ..]);
                dmu_v.scaled_add(scale, &pass.mu.slice(s![..pass.valid_m, ..]));
                let mut dlv_v = dlv.slice_mut(s![..pass.valid_m, ..]);
                dlv_v.zip_mut_with(&pass.lv.slice(s![..pass.valid_m, ..]), |d, &l| *d += scale * 0.5 * (l.exp() - 1.0));
            }
            self.encoder.backward(p, &mut grad, &pass.enc, &dmu, &dlv);
            let _ = &pass.padded;
        }
        comp.total = comp.rec + cfg.beta * comp.kl + cfg.lambda_sem * comp.sem;
        Ok((comp, grad))
    }

    /// Reconstructs `z` through the posterior mean.
    pub fn reconstruct(&self, z: &LatentTrajectory) -> Result<LatentTrajectory> {
        let post = self.encode(z)?;
        let out = self.decode(&post.mu)?;
        Ok(out.slice(0, z.len()))
    }
}

fn unit_mean(rows: &Array2<f64>) -> Array1<f64> {
    let mean = rows.mean_axis(Axis(0)).expect("at least one row");
    let n = mean.dot(&mean).sqrt();
    mean / n
}
