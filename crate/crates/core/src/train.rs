//! Training loops and loss history.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bottleneck::{BatchItem, BottleneckModel, LossConfig};
use crate::checkpoint::RngState;
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::linalg::gaussian_matrix;
use crate::optim::{Adam, OptimConfig};
use crate::text::{TextPrompt, TokenTable};
use crate::world::SyntheticWorld;

/// One optimizer step of the bottleneck.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub rec: f64,
    pub kl: f64,
    pub sem: f64,
}

/// A trained model with its per-step history and the final state of the training RNG.
#[derive(Debug, Clone)]
pub struct Trained<M, H> {
    pub model: M,
    pub history: Vec<H>,
    pub rng_state: RngState,
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Moving average over a trailing window.
pub fn smooth(xs: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = 0.0;
    for i in 0..xs.len() {
        acc += xs[i];
        if i >= w {
            acc -= xs[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

pub(crate) fn check_finite(step: usize, loss: f64, params: &[f64]) -> Result<()> {
    if !loss.is_finite() || params.iter().any(|p| !p.is_finite()) {
        return Err(Error::DivergenceDetected { step });
    }
    Ok(())
}

/// Embeds every sample's full prompt (separators included).
pub fn embed_prompts(table: &TokenTable, samples: &[Sample]) -> Result<Vec<TextPrompt>> {
    samples.iter().map(|s| table.embed(&s.prompt_tokens)).collect()
}

/// Mini-batch AdamW on the bottleneck objective; batches are reshuffled every epoch.
pub fn train_bottleneck(
    samples: &[Sample],
    world: &SyntheticWorld,
    mut model: BottleneckModel,
    loss_cfg: &LossConfig,
    opt: &OptimConfig,
) -> Result<Trained<BottleneckModel, LossRecord>> {
    if samples.is_empty() {
        return Err(Error::TooFewSamples(0));
    }
    loss_cfg.validate()?;
    if opt.batch_size == 0 {
        return Err(Error::ConfigInvalid("batch_size must be positive".into()));
    }
    let table = TokenTable::new(model.cfg.text);
    let prompts = embed_prompts(&table, samples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let mut adam = Adam::new(model.num_params());
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for _ in 0..opt.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(opt.batch_size) {
            let noises: Vec<Array2<f64>> = chunk
                .iter()
                .map(|&i| gaussian_matrix(&mut rng, model.program_len(samples[i].latents.len()).max(1), model.cfg.program_dim, 1.0))
                .collect();
            let batch: Vec<BatchItem<'_>> = chunk
                .iter()
                .zip(&noises)
                .map(|(&i, noise)| BatchItem { latents: &samples[i].latents, states: &samples[i].states, prompt: &prompts[i], noise })
                .collect();
            let (c, grad) = model.vbb_loss_grad(&batch, world, loss_cfg)?;
            let step = adam.steps();
            check_finite(step, c.total, &grad)?;
            adam.update(opt, &mut model.params, &grad);
            check_finite(step, c.total, &model.params)?;
            history.push(LossRecord { step, total: c.total, rec: c.rec, kl: c.kl, sem: c.sem });
        }
    }
    Ok(Trained { model, history, rng_state: RngState::capture(&rng) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bottleneck::BottleneckConfig;
    use crate::dataset::{generate_dataset, DatasetSpec};

    #[test]
    fn smoothing_window() {
        assert_eq!(smooth(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn memorizes_a_single_sample() {
        let spec = DatasetSpec { n_samples: 1, latent_len: 32, min_stage_len: 8, ..DatasetSpec::default() };
        let ds = generate_dataset(&spec, 3).unwrap();
        let world = ds.world().unwrap();
        let cfg = BottleneckConfig { program_dim: 16, width: 16, compression: 4, ..BottleneckConfig::default() };
        let model = BottleneckModel::new(cfg).unwrap();
        let loss = LossConfig { beta: 0.0, ..LossConfig::default() };
        let opt = OptimConfig { epochs: 12000, warmup_steps: 50, base_lr: 3e-3, decay_steps: Some(11950), lr_scale: 1.0, weight_decay: 0.0, ..OptimConfig::bottleneck() };
        let Trained { model, history: hist, .. } = train_bottleneck(&ds.samples, &world, model, &loss, &opt).unwrap();
        let rec = model.reconstruct(&ds.samples[0].latents).unwrap();
        let mse = (rec.data() - ds.samples[0].latents.data()).mapv(|x| x * x).sum() / 32.0;
        assert!(mse < 1e-3, "mse {mse}, last {:?}", hist.last());
        assert!(hist.last().unwrap().rec < 1e-3);
    }

    #[test]
    fn training_is_deterministic() {
        let spec = DatasetSpec { n_samples: 6, latent_len: 16, min_stage_len: 4, ..DatasetSpec::default() };
        let ds = generate_dataset(&spec, 5).unwrap();
        let world = ds.world().unwrap();
        let cfg = BottleneckConfig { program_dim: 4, width: 8, compression: 4, ..BottleneckConfig::default() };
        let opt = OptimConfig { epochs: 3, batch_size: 4, ..OptimConfig::bottleneck() };
        let run = || train_bottleneck(&ds.samples, &world, BottleneckModel::new(cfg.clone()).unwrap(), &LossConfig::default(), &opt).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.history, b.history);
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(a.rng_state, b.rng_state);
    }
}
