//! The end-to-end run: data, bottleneck, generator, evaluation.
//!
//! One [`RunConfig`] drives every stage. Sub-model seeds are derived from the
//! top-level seed by [`RunConfig::resolved`], so a single number fixes a run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::similarity_matrix;
use crate::checkpoint::{self, Manifest, RngState};
use crate::bottleneck::{BottleneckConfig, BottleneckModel, LossConfig};
use crate::compose::{initial_state, stage_len_for_total, CompositePrompt, CompositionConfig, Generator};
use crate::dataset::{generate_dataset, Dataset, DatasetSpec, Sample};
use crate::error::{Error, Result};
use crate::flow::{train_flow, FlowConfig, FlowModel, FlowRecord, SamplerConfig};
use crate::geometry::{project_rows, LatentTrajectory};
use crate::linalg::gaussian_vector;
use crate::metrics::{
    argmax, diversity, moment_distance, order_accuracy, retrieval_metrics, segment_ranges, transition_score, uniform_boundaries, EvalReport,
};
use crate::optim::OptimConfig;
use crate::text::TokenTable;
use crate::train::{train_bottleneck, LossRecord, Trained};
use crate::world::SyntheticWorld;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub retrieval_batch: usize,
    pub top_k: Vec<usize>,
    pub compose_trials: usize,
    pub compose_stages: usize,
    /// Generator draws per single-behavior prompt.
    pub draws_per_behavior: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { retrieval_batch: 32, top_k: vec![1, 2, 3, 5], compose_trials: 100, compose_stages: 3, draws_per_behavior: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { out_dir: PathBuf::from("runs/default") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub dataset: DatasetSpec,
    /// Trailing samples kept out of training.
    pub holdout: usize,
    pub bottleneck: BottleneckConfig,
    pub loss: LossConfig,
    pub bottleneck_optim: OptimConfig,
    pub flow: FlowConfig,
    pub flow_optim: OptimConfig,
    pub sampler: SamplerConfig,
    pub composition: CompositionConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let dataset = DatasetSpec::default();
        let bottleneck = BottleneckConfig {
            latent_dim: dataset.world.latent_dim,
            text: crate::text::TokenTableSpec { vocab_size: dataset.vocab_size(), dim: 32, seed: 17 },
            ..BottleneckConfig::default()
        };
        let flow = FlowConfig {
            program_len: dataset.latent_len / bottleneck.compression,
            program_dim: bottleneck.program_dim,
            context_dim: bottleneck.embed_dim,
            ..FlowConfig::default()
        };
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            dataset,
            holdout: 100,
            bottleneck,
            loss: LossConfig::default(),
            bottleneck_optim: OptimConfig::bottleneck(),
            flow,
            flow_optim: OptimConfig::flow(),
            sampler: SamplerConfig::default(),
            composition: CompositionConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

/// Mixes a run seed with a stage tag.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut x = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

const TAG_BOTTLENECK_INIT: u64 = 1;
const TAG_BOTTLENECK_OPT: u64 = 2;
const TAG_FLOW_INIT: u64 = 3;
const TAG_FLOW_OPT: u64 = 4;
const TAG_EVAL: u64 = 5;

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Copy with `seed` replaced and every sub-model seed derived from it.
    pub fn resolved(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.bottleneck.seed = derive_seed(seed, TAG_BOTTLENECK_INIT);
        c.bottleneck_optim.seed = derive_seed(seed, TAG_BOTTLENECK_OPT);
        c.flow.seed = derive_seed(seed, TAG_FLOW_INIT);
        c.flow_optim.seed = derive_seed(seed, TAG_FLOW_OPT);
        c
    }

    pub fn eval_seed(&self) -> u64 {
        derive_seed(self.seed, TAG_EVAL)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return bad(format!("schema_version {} (expected {CONFIG_SCHEMA_VERSION})", self.schema_version));
        }
        self.dataset.validate().map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        self.loss.validate()?;
        self.bottleneck.levels()?;
        let d = &self.dataset;
        if self.holdout >= d.n_samples {
            return bad(format!("holdout {} leaves no training samples out of {}", self.holdout, d.n_samples));
        }
        if self.bottleneck.latent_dim != d.world.latent_dim {
            return bad(format!("bottleneck.latent_dim {} ≠ dataset.world.latent_dim {}", self.bottleneck.latent_dim, d.world.latent_dim));
        }
        if self.bottleneck.text.vocab_size != d.vocab_size() {
            return bad(format!("bottleneck.text.vocab_size {} ≠ n_behaviors + 1 = {}", self.bottleneck.text.vocab_size, d.vocab_size()));
        }
        let tm = d.latent_len.div_ceil(self.bottleneck.compression);
        if self.flow.program_len != tm {
            return bad(format!("flow.program_len {} ≠ ceil(latent_len / compression) = {tm}", self.flow.program_len));
        }
        if self.flow.program_dim != self.bottleneck.program_dim {
            return bad("flow.program_dim must equal bottleneck.program_dim".into());
        }
        if self.flow.context_dim != self.bottleneck.embed_dim {
            return bad("flow.context_dim must equal bottleneck.embed_dim".into());
        }
        if self.sampler.steps == 0 {
            return bad("sampler.steps must be ≥ 1".into());
        }
        if self.eval.compose_stages > d.n_behaviors || self.eval.compose_stages == 0 {
            return bad("eval.compose_stages must be between 1 and n_behaviors".into());
        }
        if self.eval.retrieval_batch < 2 || self.eval.top_k.is_empty() {
            return bad("eval.retrieval_batch ≥ 2 and a non-empty top_k are required".into());
        }
        if self.bottleneck_optim.batch_size == 0 || self.flow_optim.batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        Ok(())
    }

    /// Bottleneck config with a different compression factor and matching generator shape.
    pub fn with_compression(&self, c: usize) -> Self {
        let mut out = self.clone();
        out.bottleneck.compression = c;
        out.flow.program_len = self.dataset.latent_len.div_ceil(c);
        out
    }
}

pub fn generate_data(cfg: &RunConfig) -> Result<Dataset> {
    generate_dataset(&cfg.dataset, cfg.seed)
}

pub fn train_vbb(cfg: &RunConfig, ds: &Dataset) -> Result<Trained<BottleneckModel, LossRecord>> {
    let (train, _) = ds.split(cfg.holdout);
    let world = ds.world()?;
    let model = BottleneckModel::new(cfg.bottleneck.clone())?;
    train_bottleneck(train, &world, model, &cfg.loss, &cfg.bottleneck_optim)
}

pub fn train_generator(cfg: &RunConfig, ds: &Dataset, bottleneck: &BottleneckModel) -> Result<Trained<FlowModel, FlowRecord>> {
    let (train, _) = ds.split(cfg.holdout);
    let model = FlowModel::new(cfg.flow.clone())?;
    train_flow(train, bottleneck, model, &cfg.flow_optim)
}

/// Held-out reconstruction through the posterior mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconStats {
    /// Mean over samples of the per-frame squared latent error.
    pub recon_mse: f64,
    pub action_kl: f64,
}

pub fn reconstruction_stats(model: &BottleneckModel, world: &SyntheticWorld, samples: &[Sample]) -> Result<ReconStats> {
    if samples.is_empty() {
        return Err(Error::TooFewSamples(0));
    }
    let (mut mse, mut kl) = (0.0, 0.0);
    for s in samples {
        let z_hat = model.reconstruct(&s.latents)?;
        mse += (z_hat.data() - s.latents.data()).mapv(|x| x * x).sum() / s.latents.len() as f64;
        kl += world.action_kl(&s.states, &s.latents, &z_hat)?;
    }
    let n = samples.len() as f64;
    Ok(ReconStats { recon_mse: mse / n, action_kl: kl / n })
}

/// Unit mean latent direction of each behavior over single-clause training samples.
pub fn behavior_prototypes(spec: &DatasetSpec, samples: &[Sample]) -> Array2<f64> {
    let sep = spec.separator_token();
    let d = spec.world.latent_dim;
    let fallback = spec.behavior_latents();
    let mut out = Array2::zeros((spec.n_behaviors, d));
    for b in 0..spec.n_behaviors {
        let rows: Vec<Array1<f64>> = samples
            .iter()
            .filter(|s| s.behaviors(sep) == [b])
            .map(|s| s.latents.data().mean_axis(Axis(0)).expect("non-empty"))
            .collect();
        let mean = if rows.is_empty() {
            fallback.row(b).to_owned()
        } else {
            rows.iter().fold(Array1::zeros(d), |acc, r| acc + r) / rows.len() as f64
        };
        let n = mean.dot(&mean).sqrt();
        out.row_mut(b).assign(&(mean / n));
    }
    out
}

/// Index of the prototype closest in cosine to the mean direction of `z`.
pub fn nearest_prototype(prototypes: &Array2<f64>, z: &LatentTrajectory) -> usize {
    let mean = z.data().mean_axis(Axis(0)).expect("non-empty");
    let scores: Vec<f64> = prototypes.rows().into_iter().map(|p| p.dot(&mean)).collect();
    argmax(&scores)
}

/// One-sided exact sign test: probability of at least `wins` successes in
/// `wins + losses` fair coin flips. Ties are dropped before calling.
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    // log-space binomial tail
    let ln_choose = |k: usize| -> f64 { (1..=k).map(|i| ((n - k + i) as f64).ln() - (i as f64).ln()).sum() };
    (wins..=n).map(|k| (ln_choose(k) - n as f64 * std::f64::consts::LN_2).exp()).sum::<f64>().min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionComparison {
    pub trials: usize,
    pub stages: usize,
    pub stage_len: usize,
    pub compose_order_accuracy: f64,
    pub single_order_accuracy: f64,
    pub compose_transition: f64,
    pub single_transition: f64,
    /// Trials where compose was strictly better / strictly worse.
    pub order_wins: usize,
    pub order_losses: usize,
    pub order_p_value: f64,
    pub transition_wins: usize,
    pub transition_losses: usize,
    pub transition_p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: EvalReport,
    pub untrained_recon_mse: f64,
    pub recon_ratio: f64,
    pub prototype_accuracy: f64,
    pub per_behavior_prototype_accuracy: Vec<f64>,
    pub retrieval_batches: usize,
    /// Program→text top-1 ranked by the frame-token similarity `R` instead of pooled cosine.
    pub similarity_top1: f64,
    pub margin: MarginCheck,
    pub composition: CompositionComparison,
}

/// Held-out pairs whose alignment error `η = 1 − e_Y·e_M` and text margin
/// `Δ = 1 − max_j e_Y·e_Yj` (over the rest of the retrieval batch) satisfy
/// `Δ > η + √(2η)`, and how many of those retrieve their own text.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginCheck {
    pub pairs: usize,
    pub in_regime: usize,
    pub in_regime_correct: usize,
    pub mean_eta: f64,
    pub mean_delta: f64,
}

impl MarginCheck {
    /// Share of in-regime pairs retrieved correctly (1 when there are none).
    pub fn implication_rate(&self) -> f64 {
        if self.in_regime == 0 {
            1.0
        } else {
            self.in_regime_correct as f64 / self.in_regime as f64
        }
    }
}

fn margin_counts(progs: &[Array1<f64>], texts: &[Array1<f64>], acc: &mut MarginCheck) {
    for i in 0..progs.len() {
        let eta = 1.0 - texts[i].dot(&progs[i]);
        let closest = (0..texts.len()).filter(|&j| j != i).map(|j| texts[i].dot(&texts[j])).fold(f64::NEG_INFINITY, f64::max);
        let delta = 1.0 - closest;
        acc.pairs += 1;
        acc.mean_eta += eta;
        acc.mean_delta += delta;
        if delta > eta + (2.0 * eta.max(0.0)).sqrt() {
            acc.in_regime += 1;
            let own = progs[i].dot(&texts[i]);
            if (0..texts.len()).filter(|&j| j != i).all(|j| progs[i].dot(&texts[j]) < own) {
                acc.in_regime_correct += 1;
            }
        }
    }
}

/// Held-out batches whose prompts have pairwise distinct behavior multisets.
pub fn retrieval_batches<'a>(samples: &'a [Sample], separator: usize, batch: usize) -> Vec<Vec<&'a Sample>> {
    let mut pool: Vec<&Sample> = samples.iter().collect();
    let mut out = Vec::new();
    while pool.len() >= 2 {
        let mut seen = std::collections::BTreeSet::new();
        let mut current = Vec::new();
        let mut rest = Vec::new();
        for s in pool {
            let mut key = s.behaviors(separator);
            key.sort_unstable();
            if current.len() < batch && seen.insert(key) {
                current.push(s);
            } else {
                rest.push(s);
            }
        }
        if current.len() < 2 || (current.len() < batch && !out.is_empty()) {
            break;
        }
        out.push(current);
        pool = rest;
    }
    out
}

/// Text embedding of a single clause's tokens.
fn clause_embedding(bottleneck: &BottleneckModel, table: &TokenTable, tokens: &[usize]) -> Result<Array1<f64>> {
    Ok(bottleneck.text_embedding(&table.embed(tokens)?))
}

fn segment_embeddings(bottleneck: &BottleneckModel, z: &LatentTrajectory, boundaries: &[usize]) -> Result<Vec<Array1<f64>>> {
    segment_ranges(z.len(), boundaries).into_iter().map(|(a, b)| bottleneck.segment_embedding(&z.slice(a, b))).collect()
}

/// Latent boundary `b` (last latent of a stage) as a state index: the state
/// produced by that latent is `b + 1`.
pub fn state_boundaries(latent_boundaries: &[usize]) -> Vec<usize> {
    latent_boundaries.iter().map(|b| b + 1).collect()
}

pub fn compare_composition(cfg: &RunConfig, ds: &Dataset, generator: &Generator<'_>) -> Result<CompositionComparison> {
    let spec = &ds.spec;
    let n = cfg.eval.compose_stages;
    let sep = spec.separator_token();
    let overlap = cfg.composition.overlap;
    let stage_len = stage_len_for_total(spec.latent_len, n, overlap);
    let comp = CompositionConfig { stage_len: Some(stage_len), ..cfg.composition.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval_seed());
    rng.set_stream(1);
    let (mut oc, mut os, mut tc, mut ts) = (0.0, 0.0, 0.0, 0.0);
    let (mut ow, mut ol, mut tw, mut tl) = (0, 0, 0, 0);
    for trial in 0..cfg.eval.compose_trials {
        let behaviors: Vec<usize> = sample_indices(&mut rng, spec.n_behaviors, n).into_vec();
        let s1 = gaussian_vector(&mut rng, spec.world.state_dim, spec.init_state_scale);
        let prompt = CompositePrompt { clauses: behaviors.iter().map(|&b| vec![b]).collect() };
        let seed = derive_seed(cfg.eval_seed(), 1000 + trial as u64);
        let composed = generator.generate_composed(&prompt, &cfg.sampler, &comp, s1.view(), seed)?;
        let single = generator.generate(&prompt.joined(sep), &cfg.sampler, s1.view(), seed)?;
        let single_bounds = uniform_boundaries(single.latents.len(), n);
        let clauses: Vec<Array1<f64>> = prompt.clauses.iter().map(|c| clause_embedding(generator.bottleneck, generator.table, c)).collect::<Result<_>>()?;
        let (a_c, a_s, t_c, t_s) = if n >= 2 {
            let a_c = order_accuracy(&segment_embeddings(generator.bottleneck, &composed.latents, &composed.boundaries)?, &clauses)?;
            let a_s = order_accuracy(&segment_embeddings(generator.bottleneck, &single.latents, &single_bounds)?, &clauses)?;
            let t_c = transition_score(&composed.states, &state_boundaries(&composed.boundaries))?;
            let t_s = transition_score(&single.states, &state_boundaries(&single_bounds))?;
            (a_c, a_s, t_c, t_s)
        } else {
            let a = order_accuracy(&segment_embeddings(generator.bottleneck, &composed.latents, &[])?, &clauses)?;
            (a, a, 0.0, 0.0)
        };
        oc += a_c;
        os += a_s;
        tc += t_c;
        ts += t_s;
        if a_c > a_s {
            ow += 1;
        } else if a_c < a_s {
            ol += 1;
        }
        if t_c < t_s {
            tw += 1;
        } else if t_c > t_s {
            tl += 1;
        }
    }
    let k = cfg.eval.compose_trials.max(1) as f64;
    Ok(CompositionComparison {
        trials: cfg.eval.compose_trials,
        stages: n,
        stage_len,
        compose_order_accuracy: oc / k,
        single_order_accuracy: os / k,
        compose_transition: tc / k,
        single_transition: ts / k,
        order_wins: ow,
        order_losses: ol,
        order_p_value: sign_test_p(ow, ol),
        transition_wins: tw,
        transition_losses: tl,
        transition_p_value: sign_test_p(tw, tl),
    })
}

pub fn evaluate(cfg: &RunConfig, ds: &Dataset, bottleneck: &BottleneckModel, flow: &FlowModel) -> Result<Evaluation> {
    let world = ds.world()?;
    let (train, test) = ds.split(cfg.holdout);
    let spec = &ds.spec;
    let sep = spec.separator_token();
    let table = TokenTable::new(bottleneck.cfg.text);

    let recon = reconstruction_stats(bottleneck, &world, test)?;
    let untrained = reconstruction_stats(&BottleneckModel::new(bottleneck.cfg.clone())?, &world, test)?;

    let mut top_sums: BTreeMap<usize, f64> = cfg.eval.top_k.iter().map(|&k| (k, 0.0)).collect();
    let mut mm = 0.0;
    let mut sim_top1 = 0.0;
    let mut margin = MarginCheck { pairs: 0, in_regime: 0, in_regime_correct: 0, mean_eta: 0.0, mean_delta: 0.0 };
    let batches = retrieval_batches(test, sep, cfg.eval.retrieval_batch);
    for batch in &batches {
        let progs: Vec<_> = batch.iter().map(|s| bottleneck.segment_embedding(&s.latents)).collect::<Result<_>>()?;
        let texts: Vec<_> = batch.iter().map(|s| table.embed(&s.prompt_tokens).map(|p| bottleneck.text_embedding(&p))).collect::<Result<_>>()?;
        let r = retrieval_metrics(&progs, &texts, &cfg.eval.top_k)?;
        for (k, v) in r.top_k {
            *top_sums.get_mut(&k).expect("same keys") += v;
        }
        mm += r.mm_dist;
        margin_counts(&progs, &texts, &mut margin);

        let frames: Vec<Array2<f64>> = batch
            .iter()
            .map(|s| bottleneck.encode(&s.latents).map(|p| bottleneck.project_program(p.mu.slice(ndarray::s![..p.valid_frames, ..]))))
            .collect::<Result<_>>()?;
        let tokens: Vec<Array2<f64>> = batch.iter().map(|s| table.embed(&s.prompt_tokens).map(|p| bottleneck.project_text(&p))).collect::<Result<_>>()?;
        let sim = similarity_matrix(&frames, &tokens, cfg.loss.lambda_tok, cfg.loss.lambda_frm)?;
        let hits = sim.rows().into_iter().enumerate().filter(|(i, row)| argmax(row.as_slice().expect("contiguous")) == *i).count();
        sim_top1 += hits as f64 / batch.len() as f64;
    }
    if margin.pairs > 0 {
        margin.mean_eta /= margin.pairs as f64;
        margin.mean_delta /= margin.pairs as f64;
    }
    let nb = batches.len().max(1) as f64;
    let retrieval_top_k: BTreeMap<usize, f64> = top_sums.into_iter().map(|(k, v)| (k, v / nb)).collect();

    let generator = Generator { flow, bottleneck, table: &table, world: &world, norm_floor: spec.extraction.norm_floor };
    let prototypes = behavior_prototypes(spec, train);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval_seed());
    rng.set_stream(2);
    let mut per_behavior = Vec::with_capacity(spec.n_behaviors);
    let mut generated_rows = Vec::new();
    let mut div = 0.0;
    for b in 0..spec.n_behaviors {
        let mut hits = 0usize;
        let mut programs = Vec::new();
        for _ in 0..cfg.eval.draws_per_behavior {
            let ctx = bottleneck.text_context(&table.embed(&[b])?);
            let noise = crate::linalg::gaussian_matrix(&mut rng, flow.cfg.program_len, flow.cfg.program_dim, 1.0);
            let m = crate::flow::sample(flow, Some(ctx.view()), &cfg.sampler, &noise)?;
            let z = project_rows(&bottleneck.decode(&m)?, spec.extraction.norm_floor)?;
            hits += usize::from(nearest_prototype(&prototypes, &z) == b);
            generated_rows.push(z.into_inner());
            programs.push(m);
        }
        per_behavior.push(hits as f64 / cfg.eval.draws_per_behavior.max(1) as f64);
        if programs.len() >= 2 {
            div += diversity(&programs)?;
        }
    }
    let prototype_accuracy = per_behavior.iter().sum::<f64>() / per_behavior.len() as f64;
    let generated = ndarray::concatenate(Axis(0), &generated_rows.iter().map(|a| a.view()).collect::<Vec<_>>()).map_err(|e| Error::NonFinite(e.to_string()))?;
    let data_rows = ndarray::concatenate(Axis(0), &train.iter().map(|s| s.latents.view()).collect::<Vec<_>>()).map_err(|e| Error::NonFinite(e.to_string()))?;
    let moment_gap = moment_distance(&generated, &data_rows)?;

    let composition = compare_composition(cfg, ds, &generator)?;
    let report = EvalReport {
        order_accuracy: composition.compose_order_accuracy,
        transition: composition.compose_transition,
        action_kl: recon.action_kl,
        recon_mse: recon.recon_mse,
        retrieval_top_k,
        mm_dist: mm / nb,
        moment_gap,
        diversity: div / spec.n_behaviors as f64,
        n_samples: test.len(),
    };
    report.validate()?;
    Ok(Evaluation {
        report,
        untrained_recon_mse: untrained.recon_mse,
        recon_ratio: recon.recon_mse / untrained.recon_mse,
        prototype_accuracy,
        per_behavior_prototype_accuracy: per_behavior,
        retrieval_batches: batches.len(),
        similarity_top1: sim_top1 / nb,
        margin,
        composition,
    })
}

/// One row of the compression sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub compression: usize,
    pub recon_mse: f64,
    pub action_kl: f64,
}

/// Trains one bottleneck per compression factor and reports held-out reconstruction.
pub fn sweep_compression(cfg: &RunConfig, ds: &Dataset, factors: &[usize]) -> Result<Vec<SweepRow>> {
    let world = ds.world()?;
    let (_, test) = ds.split(cfg.holdout);
    factors
        .iter()
        .map(|&c| {
            let run = cfg.with_compression(c);
            run.validate()?;
            let trained = train_vbb(&run, ds)?;
            let stats = reconstruction_stats(&trained.model, &world, test)?;
            Ok(SweepRow { compression: c, recon_mse: stats.recon_mse, action_kl: stats.action_kl })
        })
        .collect()
}

pub const BOTTLENECK_KIND: &str = "bottleneck";
pub const FLOW_KIND: &str = "flow";

fn manifest_for<T: Serialize>(kind: &str, layout: &crate::nn::ParamLayout, model_cfg: &T, run: &RunConfig, rng_state: RngState) -> Result<Manifest> {
    Ok(Manifest {
        schema_version: checkpoint::SCHEMA_VERSION,
        kind: kind.into(),
        shapes: layout.clone(),
        hyperparams: serde_json::json!({ "model": serde_json::to_value(model_cfg)?, "run": serde_json::to_value(run)? }),
        rng_state,
    })
}

fn model_config<T: for<'de> Deserialize<'de>>(manifest: &Manifest, kind: &str) -> Result<T> {
    if manifest.kind != kind {
        return Err(Error::MissingArtifact(format!("expected a {kind} checkpoint, found {}", manifest.kind)));
    }
    serde_json::from_value(manifest.hyperparams["model"].clone()).map_err(|e| Error::Serde(e.to_string()))
}

pub fn save_bottleneck(stem: &Path, trained: &Trained<BottleneckModel, LossRecord>, run: &RunConfig) -> Result<()> {
    let m = &trained.model;
    checkpoint::save(stem, &manifest_for(BOTTLENECK_KIND, &m.layout, &m.cfg, run, trained.rng_state)?, &m.params)
}

pub fn load_bottleneck(stem: &Path) -> Result<BottleneckModel> {
    let (manifest, params) = checkpoint::load(stem)?;
    BottleneckModel::with_params(model_config(&manifest, BOTTLENECK_KIND)?, params)
}

pub fn save_flow(stem: &Path, trained: &Trained<FlowModel, FlowRecord>, run: &RunConfig) -> Result<()> {
    let m = &trained.model;
    checkpoint::save(stem, &manifest_for(FLOW_KIND, &m.layout, &m.cfg, run, trained.rng_state)?, &m.params)
}

pub fn load_flow(stem: &Path) -> Result<FlowModel> {
    let (manifest, params) = checkpoint::load(stem)?;
    FlowModel::with_params(model_config(&manifest, FLOW_KIND)?, params)
}

/// Initial state for CLI generation.
pub fn cli_initial_state(cfg: &RunConfig, seed: u64) -> Array1<f64> {
    initial_state(cfg.dataset.world.state_dim, cfg.dataset.init_state_scale, derive_seed(seed, TAG_EVAL))
}
