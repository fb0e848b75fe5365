//! Clause-wise generation of multi-stage prompts.
//!
//! A prompt is split at separator tokens into clauses; each clause gets its own
//! program from the generator, is decoded to latents, and the per-clause
//! latents are stitched with a linear cross-fade of `O` frames before a single
//! rollout from the initial state.

use ndarray::{s, Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bottleneck::BottleneckModel;
use crate::error::{Error, Result};
use crate::flow::{sample, FlowModel, SamplerConfig};
use crate::geometry::{blend_overlap, project_rows, sphere_deviation, LatentTrajectory, StateTrajectory, Trajectory};
use crate::linalg::gaussian_matrix;
use crate::text::TokenTable;
use crate::world::SyntheticWorld;

/// Ordered clauses of a compositional prompt, each a non-empty token run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositePrompt {
    pub clauses: Vec<Vec<usize>>,
}

impl CompositePrompt {
    pub fn len(&self) -> usize {
        self.clauses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clauses.is_empty()
    }

    /// Tokens of all clauses joined by `separator`.
    pub fn joined(&self, separator: usize) -> Vec<usize> {
        self.clauses.join(&separator)
    }
}

/// Splits `raw` at every `separator`. Empty clauses (leading, trailing or
/// doubled separators, or an empty input) are rejected with their index.
pub fn split_prompt(raw: &[usize], separator: usize) -> Result<CompositePrompt> {
    let clauses: Vec<Vec<usize>> = raw.split(|&t| t == separator).map(<[usize]>::to_vec).collect();
    if let Some(i) = clauses.iter().position(Vec::is_empty) {
        return Err(Error::EmptyClause(i));
    }
    Ok(CompositePrompt { clauses })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendMode {
    /// The `O` blended frames replace the tail of stage `n` and the head of stage `n + 1`.
    #[default]
    Replace,
    /// The tail of stage `n` is blended, stage `n + 1` is kept whole.
    InPlace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositionConfig {
    pub overlap: usize,
    #[serde(default)]
    pub mode: BlendMode,
    /// Frames kept from each decoded clause; `None` keeps the full decoder output.
    #[serde(default)]
    pub stage_len: Option<usize>,
    /// Re-project blended latents onto the sphere before rollout.
    #[serde(default)]
    pub reproject: bool,
}

impl Default for CompositionConfig {
    fn default() -> Self {
        Self { overlap: 4, mode: BlendMode::Replace, stage_len: None, reproject: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComposedLatents {
    pub latents: LatentTrajectory,
    /// Output index of the last frame of every stage but the final one.
    pub boundaries: Vec<usize>,
    pub stage_lengths: Vec<usize>,
}

/// Stitches clause latents. With `O = 0` this is plain concatenation.
pub fn compose_latents(clauses: &[LatentTrajectory], overlap: usize, mode: BlendMode) -> Result<ComposedLatents> {
    let first = clauses.first().ok_or(Error::EmptyClause(0))?;
    let dim = first.dim();
    if clauses.iter().any(|c| c.dim() != dim) {
        return Err(Error::DimensionMismatch("clause latents differ in dimension".into()));
    }
    if overlap > 0 {
        if let Some(c) = clauses.iter().find(|c| c.len() < overlap + 1) {
            return Err(Error::OverlapTooLarge { overlap, len: c.len() });
        }
    }
    let stage_lengths: Vec<usize> = clauses.iter().map(Trajectory::len).collect();
    let mut out: Array2<f64> = first.data().clone();
    let mut boundaries = Vec::with_capacity(clauses.len() - 1);
    for next in &clauses[1..] {
        let t = out.nrows();
        let blended = blend_overlap(out.slice(s![t - overlap.., ..]), next.view().slice(s![..overlap, ..]))?;
        out.slice_mut(s![t - overlap.., ..]).assign(&blended);
        boundaries.push(t - 1);
        let keep_from = match mode {
            BlendMode::Replace => overlap,
            BlendMode::InPlace => 0,
        };
        let rest = next.view().slice(s![keep_from.., ..]).to_owned();
        out = ndarray::concatenate(ndarray::Axis(0), &[out.view(), rest.view()]).expect("same width");
    }
    Ok(ComposedLatents { latents: Trajectory::new(out)?, boundaries, stage_lengths })
}

/// Stage length that makes a composed prompt of `n` clauses span `total` frames in replace mode.
pub fn stage_len_for_total(total: usize, n: usize, overlap: usize) -> usize {
    (total + (n - 1) * overlap).div_ceil(n)
}

/// Models needed to turn prompts into rollouts.
#[derive(Debug, Clone, Copy)]
pub struct Generator<'a> {
    pub flow: &'a FlowModel,
    pub bottleneck: &'a BottleneckModel,
    pub table: &'a TokenTable,
    pub world: &'a SyntheticWorld,
    pub norm_floor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub states: StateTrajectory,
    pub latents: LatentTrajectory,
    pub boundaries: Vec<usize>,
    pub stage_lengths: Vec<usize>,
    /// `max_t | ||z_t|| − √d |` of the latents that were rolled out.
    pub sphere_deviation: f64,
}

impl Generator<'_> {
    /// Samples one program for `tokens` with noise from `rng` and decodes it
    /// to sphere-projected latents.
    pub fn clause_latents(&self, tokens: &[usize], sampler: &SamplerConfig, rng: &mut ChaCha8Rng) -> Result<LatentTrajectory> {
        let ctx = self.bottleneck.text_context(&self.table.embed(tokens)?);
        let noise = gaussian_matrix(rng, self.flow.cfg.program_len, self.flow.cfg.program_dim, 1.0);
        let m = sample(self.flow, Some(ctx.view()), sampler, &noise)?;
        project_rows(&self.bottleneck.decode(&m)?, self.norm_floor)
    }

    /// One program per clause, each from its own noise stream of `seed`.
    pub fn generate_composed(&self, prompt: &CompositePrompt, sampler: &SamplerConfig, cfg: &CompositionConfig, s1: ArrayView1<'_, f64>, seed: u64) -> Result<Rollout> {
        if prompt.is_empty() {
            return Err(Error::EmptyClause(0));
        }
        let mut parts = Vec::with_capacity(prompt.len());
        for (n, clause) in prompt.clauses.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(n as u64 + 1);
            let z = self.clause_latents(clause, sampler, &mut rng)?;
            parts.push(match cfg.stage_len {
                Some(len) if len < z.len() => z.slice(0, len),
                _ => z,
            });
        }
        let composed = compose_latents(&parts, cfg.overlap, cfg.mode)?;
        let latents = if cfg.reproject { project_rows(&composed.latents, self.norm_floor)? } else { composed.latents };
        let states = self.world.rollout(s1, &latents)?;
        Ok(Rollout {
            states,
            sphere_deviation: sphere_deviation(&latents),
            latents,
            boundaries: composed.boundaries,
            stage_lengths: composed.stage_lengths,
        })
    }

    /// Single-shot generation: the whole prompt conditions one program.
    pub fn generate(&self, tokens: &[usize], sampler: &SamplerConfig, s1: ArrayView1<'_, f64>, seed: u64) -> Result<Rollout> {
        let prompt = CompositePrompt { clauses: vec![tokens.to_vec()] };
        self.generate_composed(&prompt, sampler, &CompositionConfig { overlap: 0, ..CompositionConfig::default() }, s1, seed)
    }
}

/// Initial state used by generation commands: a seeded Gaussian draw.
pub fn initial_state(dim: usize, scale: f64, seed: u64) -> Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    crate::linalg::gaussian_vector(&mut rng, dim, scale)
}
