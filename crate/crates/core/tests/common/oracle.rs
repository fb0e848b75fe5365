use behave::alignment::{contrastive_loss, similarity_matrix};
use behave::bottleneck::{kl_prior_loss, Posterior};
use behave::flow::{sample, train_flow_on, FlowConfig, FlowModel, SamplerConfig, Solver, VectorField};
use behave::geometry::Trajectory;
use behave::linalg::{gaussian_matrix, gaussian_vector};
use behave::optim::OptimConfig;
use behave::world::{SyntheticWorld, WorldSpec};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn unit_rows<R: Rng>(rng: &mut R, n: usize, d: usize) -> Array2<f64> {
    let mut x = gaussian_matrix(rng, n, d, 1.0);
    for mut row in x.rows_mut() {
        let norm = row.dot(&row).sqrt();
        row /= norm;
    }
    x
}

pub fn unit_vec<R: Rng>(rng: &mut R, d: usize) -> Array1<f64> {
    unit_rows(rng, 1, d).row(0).to_owned()
}

pub fn brute_similarity(programs: &[Array2<f64>], texts: &[Array2<f64>], lt: f64, lf: f64) -> Array2<f64> {
    let mut r = Array2::zeros((programs.len(), texts.len()));
    for i in 0..programs.len() {
        for j in 0..texts.len() {
            let tm = programs[i].nrows();
            let k_len = texts[j].nrows();
            let mut f = vec![0.0; tm];
            for t in 0..tm {
                let mut acc = 0.0;
                for k in 0..k_len {
                    let mut c = 0.0;
                    for d in 0..programs[i].ncols() {
                        c += programs[i][[t, d]] * texts[j][[k, d]];
                    }
                    acc += (c / lt).exp();
                }
                f[t] = lt * (acc / k_len as f64).ln();
            }
            let z: f64 = f.iter().map(|x| (x / lf).exp()).sum();
            r[[i, j]] = f.iter().map(|x| (x / lf).exp() / z * x).sum();
        }
    }
    r
}

pub fn brute_contrastive(r: &Array2<f64>, gamma: f64) -> f64 {
    let b = r.nrows();
    let mut m2t = 0.0;
    let mut t2m = 0.0;
    for i in 0..b {
        let mut row = 0.0;
        let mut col = 0.0;
        for j in 0..b {
            row += (gamma * r[[i, j]]).exp();
            col += (gamma * r[[j, i]]).exp();
        }
        m2t -= ((gamma * r[[i, i]]).exp() / row).ln();
        t2m -= ((gamma * r[[i, i]]).exp() / col).ln();
    }
    0.5 * (m2t + t2m) / b as f64
}

/// Largest absolute gap between the library and the nested-loop versions of
/// the similarity matrix and the contrastive loss over random batches
/// (B ≤ 8, frames ≤ 4, tokens ≤ 5).
pub fn loss_oracle_max_error(seed: u64, batches: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..batches {
        let b = rng.gen_range(2..=8);
        let d = rng.gen_range(2..=6);
        let programs: Vec<_> = (0..b)
            .map(|_| {
                let tm = rng.gen_range(1..=4);
                unit_rows(&mut rng, tm, d)
            })
            .collect();
        let texts: Vec<_> = (0..b)
            .map(|_| {
                let k = rng.gen_range(1..=5);
                unit_rows(&mut rng, k, d)
            })
            .collect();
        let lt = rng.gen_range(0.05..1.0);
        let lf = rng.gen_range(0.05..1.0);
        let fast = similarity_matrix(&programs, &texts, lt, lf).unwrap();
        let slow = brute_similarity(&programs, &texts, lt, lf);
        for (a, e) in fast.iter().zip(slow.iter()) {
            worst = worst.max((a - e).abs());
        }
        let gamma = rng.gen_range(1.0..20.0);
        let l = contrastive_loss(&fast, gamma).unwrap();
        worst = worst.max((l - brute_contrastive(&fast, gamma)).abs());
    }
    worst
}

pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn random_posterior<R: Rng>(rng: &mut R, t: usize, d: usize) -> Posterior {
    Posterior {
        mu: gaussian_matrix(rng, t, d, 1.0),
        log_var: Array2::from_shape_simple_fn((t, d), || rng.gen_range(-2.0..1.0)),
        valid_frames: t,
    }
}

/// `|MC − exact| / SE` for the prior KL of a random 3×4 posterior.
pub fn prior_kl_z_score(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = random_posterior(&mut rng, 3, 4);
    let exact = kl_prior_loss(&p);
    // per draw: one sample of every element, averaged over elements
    let n = 1_000_000 / 12;
    let mut est = Vec::with_capacity(n);
    for _ in 0..n {
        let mut acc = 0.0;
        for (&mu, &lv) in p.mu.iter().zip(p.log_var.iter()) {
            let e: f64 = rng.sample(StandardNormal);
            let x = mu + (0.5 * lv).exp() * e;
            // log q(x) − log p(x)
            acc += -0.5 * lv - 0.5 * e * e + 0.5 * x * x;
        }
        est.push(acc / 12.0);
    }
    let (mean, se) = mean_se(&est);
    (mean - exact).abs() / se
}

/// `|MC − exact| / SE` for the action KL between a latent sequence and a
/// slightly perturbed copy, sampling actions from the perturbed policy.
pub fn action_kl_z_score(seed: u64) -> f64 {
    let world = SyntheticWorld::new(WorldSpec { seed: 3, ..WorldSpec::default() }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = 5;
    let z = Trajectory::new(gaussian_matrix(&mut rng, t, 8, 1.0)).unwrap();
    let z_hat = Trajectory::new(z.data() + &gaussian_matrix(&mut rng, t, 8, 0.05)).unwrap();
    let states = world.rollout(gaussian_vector(&mut rng, 16, 0.5).view(), &z).unwrap();
    let exact = world.action_kl(&states, &z, &z_hat).unwrap();
    let sigma = world.policy_std();
    let n = 200_000;
    let mut est = Vec::with_capacity(n);
    for _ in 0..n {
        let mut acc = 0.0;
        for step in 0..t {
            let ref_mean = world.policy_mean(states.row(step), z.row(step)).unwrap();
            let hat_mean = world.policy_mean(states.row(step), z_hat.row(step)).unwrap();
            // x ~ π(·|s, ẑ); log π(x|s, ẑ) − log π(x|s, z)
            let mut lr = 0.0;
            for a in 0..ref_mean.len() {
                let x = hat_mean[a] + sigma * rng.sample::<f64, _>(StandardNormal);
                lr += ((x - ref_mean[a]).powi(2) - (x - hat_mean[a]).powi(2)) / (2.0 * sigma * sigma);
            }
            acc += lr;
        }
        est.push(acc / t as f64);
    }
    let (mean, se) = mean_se(&est);
    (mean - exact).abs() / se
}

/// `dx/dr = −x · (1 + r) + sin(x)`: smooth and nonlinear, no closed form needed.
pub struct Nonlinear;

impl VectorField for Nonlinear {
    fn velocity(&self, m: ArrayView2<'_, f64>, r: f64, _context: Option<ArrayView1<'_, f64>>) -> behave::Result<Array2<f64>> {
        Ok(m.mapv(|x| -x * (1.0 + r) + x.sin()))
    }
}

/// `error · steps` against a 256-step reference for steps 4, 8, 16, 32,
/// normalized by the coarsest run.
pub fn euler_orders<F: VectorField>(field: &F, ctx: Option<ArrayView1<'_, f64>>, g: f64, noise: &Array2<f64>) -> Vec<f64> {
    let run = |steps| sample(field, ctx, &SamplerConfig { steps, guidance_scale: g, solver: Solver::Euler }, noise).unwrap();
    let reference = run(256);
    let errs: Vec<f64> = [4, 8, 16, 32].iter().map(|&s| (&run(s) - &reference).mapv(|d| d * d).sum().sqrt()).collect();
    errs.iter().zip([4.0, 8.0, 16.0, 32.0]).map(|(e, s)| e * s / (errs[0] * 4.0)).collect()
}

pub struct TwoPrompt {
    pub model: FlowModel,
    pub protos: [Array2<f64>; 2],
    pub contexts: [Array1<f64>; 2],
}

/// A small generator trained to map two one-hot contexts onto two fixed programs.
pub fn two_prompt_model() -> TwoPrompt {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (tm, dm) = (2, 4);
    let protos = [gaussian_matrix(&mut rng, tm, dm, 1.0), gaussian_matrix(&mut rng, tm, dm, 1.0)];
    let contexts = [Array1::from(vec![1.0, 0.0, 0.0]), Array1::from(vec![0.0, 1.0, 0.0])];
    let mut posteriors = Vec::new();
    let mut ctxs = Vec::new();
    for i in 0..64 {
        posteriors.push(Posterior {
            mu: &protos[i % 2] + &gaussian_matrix(&mut rng, tm, dm, 0.1),
            log_var: Array2::from_elem((tm, dm), -6.0),
            valid_frames: tm,
        });
        ctxs.push(contexts[i % 2].clone());
    }
    let model = FlowModel::new(FlowConfig { program_len: tm, program_dim: dm, context_dim: 3, hidden: 32, blocks: 1, time_dim: 8, seed: 1, ..FlowConfig::default() }).unwrap();
    let opt = OptimConfig { base_lr: 3e-3, lr_scale: 1.0, weight_decay: 0.0, warmup_steps: 20, batch_size: 16, epochs: 400, seed: 2, ..OptimConfig::flow() };
    let model = train_flow_on(&posteriors, &ctxs, model, &opt).unwrap().model;
    TwoPrompt { model, protos, contexts }
}

/// Every `error · steps` ratio of the Euler sampler, on the analytic field and
/// on the trained two-prompt generator under guidance.
pub fn euler_ratios(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = gaussian_matrix(&mut rng, 3, 4, 1.0);
    let mut out = euler_orders(&Nonlinear, None, 1.0, &noise);
    let TwoPrompt { model, contexts, .. } = two_prompt_model();
    for ctx in &contexts {
        let noise = gaussian_matrix(&mut rng, 2, 4, 1.0);
        out.extend(euler_orders(&model, Some(ctx.view()), 1.5, &noise));
    }
    out
}
