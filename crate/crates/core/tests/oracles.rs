//! Independent reference implementations and sampling estimates for the
//! closed-form quantities in the library.

mod common;

use behave::bottleneck::sample_posterior;
use behave::flow::{sample, FlowConfig, FlowModel, SamplerConfig, Solver};
use behave::linalg::gaussian_matrix;
use behave::metrics::{assign_segments, order_accuracy, retrieval_metrics};
use common::oracle::*;
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn similarity_and_contrastive_match_nested_loops() {
    let worst = loss_oracle_max_error(101, 200);
    assert!(worst < 1e-12, "{worst}");
}

#[test]
fn posterior_samples_center_on_the_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = random_posterior(&mut rng, 2, 3);
    let n = 100_000;
    let draws: Vec<Array2<f64>> = (0..n).map(|_| sample_posterior(&p, &gaussian_matrix(&mut rng, 2, 3, 1.0)).unwrap()).collect();
    for ((i, j), mu) in p.mu.indexed_iter() {
        let xs: Vec<f64> = draws.iter().map(|m| m[[i, j]]).collect();
        let (mean, se) = mean_se(&xs);
        assert!((mean - mu).abs() < 4.0 * se, "({i},{j}): {mean} vs {mu}, se {se}");
    }
}

#[test]
fn prior_kl_matches_monte_carlo() {
    let z = prior_kl_z_score(8);
    assert!(z < 3.0, "{z} standard errors");
}

#[test]
fn action_kl_matches_monte_carlo() {
    let z = action_kl_z_score(9);
    assert!(z < 3.0, "{z} standard errors");
}

#[test]
fn order_accuracy_at_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let trials = 100_000;
    let (mut hits, mut perm_hits, mut perms) = (0.0, 0.0, 0.0);
    for _ in 0..trials {
        let segs: Vec<_> = (0..3).map(|_| unit_vec(&mut rng, 8)).collect();
        let clauses: Vec<_> = (0..3).map(|_| unit_vec(&mut rng, 8)).collect();
        let acc = order_accuracy(&segs, &clauses).unwrap();
        hits += acc;
        let mut a = assign_segments(&segs, &clauses).unwrap();
        a.sort_unstable();
        if a == [0, 1, 2] {
            perms += 1.0;
            perm_hits += acc;
        }
    }
    // independent argmax per segment: each of 27 assignments is equally likely
    let p = hits / trials as f64;
    assert!((p - 1.0 / 27.0).abs() < 4.0 * (1.0 / 27.0 * 26.0 / 27.0 / trials as f64).sqrt(), "{p}");
    // among assignments that form a permutation, one ordering in six
    let q = perm_hits / perms;
    assert!((q - 1.0 / 6.0).abs() < 4.0 * (5.0 / 36.0 / perms).sqrt(), "{q}");
}

#[test]
fn retrieval_at_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let trials = 2000;
    let mut top1 = 0.0;
    for _ in 0..trials {
        let progs: Vec<_> = (0..32).map(|_| unit_vec(&mut rng, 16)).collect();
        let texts: Vec<_> = (0..32).map(|_| unit_vec(&mut rng, 16)).collect();
        top1 += retrieval_metrics(&progs, &texts, &[1]).unwrap().top_k[&1];
    }
    let p = top1 / trials as f64;
    let n = (trials * 32) as f64;
    assert!((p - 1.0 / 32.0).abs() < 4.0 * (1.0 / 32.0 * 31.0 / 32.0 / n).sqrt(), "{p}");
}

#[test]
fn euler_is_first_order() {
    for ratio in euler_ratios(12) {
        assert!((0.5..=2.0).contains(&ratio), "{ratio}");
    }
}

#[test]
fn guidance_is_continuous_in_the_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let model = FlowModel::new(FlowConfig { program_len: 2, program_dim: 4, context_dim: 3, hidden: 16, blocks: 1, time_dim: 8, seed: 5, ..FlowConfig::default() }).unwrap();
    let noise = gaussian_matrix(&mut rng, 2, 4, 1.0);
    let ctx = Array1::from(vec![1.0, 0.0, -0.5]);
    let run = |g: f64| sample(&model, Some(ctx.view()), &SamplerConfig { steps: 16, guidance_scale: g, solver: Solver::Euler }, &noise).unwrap();
    for g in [0.0, 1.0, 1.5] {
        let at = run(g);
        for h in [1e-3, 1e-5, 1e-7] {
            let near = run(g + h);
            let gap = (&near - &at).mapv(f64::abs).fold(0.0f64, |m, &x| m.max(x));
            assert!(gap < 1e3 * h, "g={g}, h={h}: {gap}");
        }
    }
}

#[test]
fn two_prompt_generator_follows_its_prompt() {
    let TwoPrompt { model, protos, contexts } = two_prompt_model();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let cos = |a: &Array2<f64>, b: &Array2<f64>| (a * b).sum() / ((a * a).sum().sqrt() * (b * b).sum().sqrt());
    let cfg = SamplerConfig::default();
    let draws = 200;
    let mut correct = 0;
    for d in 0..draws {
        let (own, other) = (d % 2, 1 - d % 2);
        let m = sample(&model, Some(contexts[own].view()), &cfg, &gaussian_matrix(&mut rng, 2, 4, 1.0)).unwrap();
        if cos(&m, &protos[own]) > cos(&m, &protos[other]) {
            correct += 1;
        }
    }
    assert!(correct as f64 >= 0.95 * draws as f64, "{correct}/{draws}");
}
