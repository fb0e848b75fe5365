#![allow(dead_code)]

pub mod oracle;

use behave::bottleneck::{BatchItem, BottleneckConfig, BottleneckModel, LossConfig};
use behave::dataset::{generate_dataset, DatasetSpec};
use behave::flow::{FlowConfig, FlowExample, FlowModel};
use behave::linalg::gaussian_matrix;
use behave::nn::ParamLayout;
use behave::text::{TokenTable, TokenTableSpec};
use behave::world::WorldSpec;
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Worst relative error of the analytic gradient against central differences,
/// per parameter block: `||g − g_fd|| / max(||g||, ||g_fd||)`.
pub fn blockwise_fd_error(
    layout: &ParamLayout,
    params: &mut Vec<f64>,
    grad: &[f64],
    mut loss: impl FnMut(&[f64]) -> f64,
) -> Vec<(String, f64)> {
    let h = 1e-5;
    let mut out = Vec::new();
    for block in &layout.blocks {
        let (mut num, mut ga, mut gf) = (0.0, 0.0, 0.0);
        for i in block.offset..block.offset + block.len() {
            let orig = params[i];
            params[i] = orig + h;
            let up = loss(params);
            params[i] = orig - h;
            let dn = loss(params);
            params[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            num += (fd - grad[i]).powi(2);
            ga += grad[i].powi(2);
            gf += fd.powi(2);
        }
        let den = ga.sqrt().max(gf.sqrt());
        out.push((block.name.clone(), if den == 0.0 { 0.0 } else { num.sqrt() / den }));
    }
    out
}

/// Bottleneck with a handful of parameters per block, on a 2-item batch
/// whose second item is padded.
pub fn bottleneck_gradient_check() -> (usize, Vec<(String, f64)>) {
    let spec = DatasetSpec {
        world: WorldSpec { state_dim: 4, action_dim: 2, latent_dim: 2, ..WorldSpec::default() },
        n_samples: 2,
        latent_len: 8,
        min_stage_len: 2,
        ..DatasetSpec::default()
    };
    let ds = generate_dataset(&spec, 3).unwrap();
    let world = ds.world().unwrap();
    let cfg = BottleneckConfig {
        latent_dim: 2,
        program_dim: 2,
        width: 3,
        compression: 2,
        text: TokenTableSpec { vocab_size: spec.vocab_size(), dim: 3, seed: 1 },
        embed_dim: 2,
        ..BottleneckConfig::default()
    };
    let mut model = BottleneckModel::new(cfg).unwrap();
    let table = TokenTable::new(model.cfg.text);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let lat = [ds.samples[0].latents.clone(), ds.samples[1].latents.slice(0, 7)];
    let prompts: Vec<_> = ds.samples.iter().map(|s| table.embed(&s.prompt_tokens).unwrap()).collect();
    let noises: Vec<_> = (0..2).map(|_| gaussian_matrix(&mut rng, 4, 2, 1.0)).collect();
    let batch: Vec<_> = (0..2)
        .map(|i| BatchItem { latents: &lat[i], states: &ds.samples[i].states, prompt: &prompts[i], noise: &noises[i] })
        .collect();
    let lc = LossConfig { beta: 0.3, lambda_pi: 0.5, lambda_sem: 0.7, ..LossConfig::default() };
    let (_, grad) = model.vbb_loss_grad(&batch, &world, &lc).unwrap();
    let layout = model.layout.clone();
    let mut params = model.params.clone();
    let errs = blockwise_fd_error(&layout, &mut params, &grad, |p| {
        model.params.copy_from_slice(p);
        model.vbb_loss(&batch, &world, &lc).unwrap().total
    });
    (layout.total(), errs)
}

pub fn flow_gradient_check() -> (usize, Vec<(String, f64)>) {
    let mut model = FlowModel::new(FlowConfig { program_len: 2, program_dim: 3, context_dim: 4, hidden: 6, blocks: 2, time_dim: 4, seed: 3, ..FlowConfig::default() }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let eps: Vec<_> = (0..3).map(|_| gaussian_matrix(&mut rng, 2, 3, 1.0)).collect();
    let tgt: Vec<_> = (0..3).map(|_| gaussian_matrix(&mut rng, 2, 3, 1.0)).collect();
    let ctx: Vec<Array1<f64>> = (0..3).map(|_| Array1::from_shape_simple_fn(4, || rng.gen_range(-1.0..1.0))).collect();
    let rs: Vec<f64> = (0..3).map(|_| rng.gen()).collect();
    // the last example uses the learned null context
    let batch: Vec<_> = (0..3)
        .map(|i| FlowExample { epsilon: &eps[i], target: &tgt[i], r: rs[i], context: (i < 2).then(|| ctx[i].view()) })
        .collect();
    let (_, grad) = model.fm_loss_grad(&batch).unwrap();
    let layout = model.layout.clone();
    let mut params = model.params.clone();
    let errs = blockwise_fd_error(&layout, &mut params, &grad, |p| {
        model.params.copy_from_slice(p);
        model.fm_loss_batch(&batch).unwrap()
    });
    (layout.total(), errs)
}
