//! Executable checks of the compression and retrieval guarantees.
//!
//! * [`verify_prop1`]: a latent curve of path length `V` admits a
//!   piecewise-constant approximation with `m` segments whose rollout error
//!   stays below `L_z δ Σ L_s^k`, `δ = V / (m − 1)`.
//! * [`verify_tv_smoothing`]: lookahead averaging telescopes, which bounds
//!   the path length of extracted latents by the future-window displacement
//!   of the states.
//! * [`verify_prop2`]: a text/program alignment error `η` and a text margin
//!   `Δ > η + √(2η)` force correct retrieval, with a softmax lower bound.
//!
//! All inequalities are checked with an absolute slack of [`BOUND_TOL`].

use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    l2, max_deviation, piecewise_constant_approx, project_to_sphere, total_variation, LatentTrajectory,
    StateTrajectory, Trajectory,
};
use crate::linalg::gaussian_vector;
use crate::world::{ExtractionConfig, SyntheticWorld, WorldSpec};

pub const BOUND_TOL: f64 = 1e-9;

/// `L_z V / ((m − 1)(1 − L_s))`.
pub fn uniform_rollout_bound(l_s: f64, l_z: f64, v: f64, m: usize) -> Result<f64> {
    if l_s >= 1.0 {
        return Err(Error::UnstableWorld(l_s));
    }
    if m < 2 {
        return Err(Error::RangeError { name: "m", value: m as f64, lo: 2.0, hi: f64::INFINITY });
    }
    Ok(l_z * v / ((m - 1) as f64 * (1.0 - l_s)))
}

/// `L_z δ Σ_{k=0}^{t−1} L_s^k` for the state at 0-based index `t`.
fn step_bound(l_s: f64, l_z: f64, delta: f64, t: usize) -> f64 {
    let mut geo = 0.0;
    let mut pow = 1.0;
    for _ in 0..t {
        geo += pow;
        pow *= l_s;
    }
    l_z * delta * geo
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop1Report {
    #[serde(rename = "V")]
    pub v: f64,
    pub m: usize,
    pub delta: f64,
    pub l_s: f64,
    pub l_z: f64,
    pub segments: usize,
    pub max_latent_dev: f64,
    pub bound_latent: f64,
    /// `||s̃_t − s_t||` for every state of the rollout, starting at the shared `s_1`.
    pub max_rollout_err_per_t: Vec<f64>,
    pub bound_per_t: Vec<f64>,
    /// Absent when the world is not contracting.
    pub uniform_bound: Option<f64>,
    pub all_pass: bool,
}

impl Prop1Report {
    pub fn max_rollout_err(&self) -> f64 {
        self.max_rollout_err_per_t.iter().copied().fold(0.0, f64::max)
    }

    /// Measured maximum rollout error over the uniform bound (0 when the bound is 0).
    pub fn tightness(&self) -> Option<f64> {
        self.uniform_bound.map(|b| if b > 0.0 { self.max_rollout_err() / b } else { 0.0 })
    }
}

/// Rolls out `z` and its greedy piecewise-constant approximation under the
/// deterministic closed loop and checks the latent, per-step and uniform bounds.
pub fn verify_prop1(world: &SyntheticWorld, z: &LatentTrajectory, m: usize, s1: ArrayView1<'_, f64>) -> Result<Prop1Report> {
    let (approx, partition) = piecewise_constant_approx(z, m)?;
    let v = total_variation(z);
    let delta = v / (m - 1) as f64;
    let l_s = world.lipschitz_state();
    let l_z = world.lipschitz_latent();

    let max_latent_dev = max_deviation(z, &approx)?;
    let states = world.rollout(s1, z)?;
    let approx_states = world.rollout(s1, &approx)?;
    let errs: Vec<f64> = (0..states.len()).map(|t| l2((&states.row(t) - &approx_states.row(t)).view())).collect();
    let bounds: Vec<f64> = (0..states.len()).map(|t| step_bound(l_s, l_z, delta, t)).collect();
    let uniform = uniform_rollout_bound(l_s, l_z, v, m).ok();

    let mut ok = max_latent_dev <= delta + BOUND_TOL && partition.segment_count() <= m.max(1);
    ok &= errs.iter().zip(&bounds).all(|(e, b)| *e <= b + BOUND_TOL);
    if let Some(u) = uniform {
        ok &= errs.iter().all(|e| *e <= u + BOUND_TOL);
    }
    Ok(Prop1Report {
        v,
        m,
        delta,
        l_s,
        l_z,
        segments: partition.segment_count(),
        max_latent_dev,
        bound_latent: delta,
        max_rollout_err_per_t: errs,
        bound_per_t: bounds,
        uniform_bound: uniform,
        all_pass: ok,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TvReport {
    pub lookahead: usize,
    /// Latent pairs `(t, t+1)` whose windows are both full.
    pub full_window_pairs: usize,
    /// Latent pairs left out because a window is truncated at the end.
    pub excluded_pairs: usize,
    pub max_telescoping_residual: f64,
    pub rho: f64,
    pub l_b: f64,
    /// `2 √d_z L_B / (ρ L)`.
    pub factor: f64,
    pub tv_full: f64,
    pub c_motion: f64,
    pub tv_bound: f64,
    /// Worst per-pair slack `factor · ||s_{t+L+1} − s_{t+1}|| − ||z_{t+1} − z_t||`.
    pub min_step_slack: f64,
    pub all_pass: bool,
}

/// Checks the telescoping identity on the pre-projection averages and the
/// path-length bound over the full-window part of `states`.
pub fn verify_tv_smoothing(world: &SyntheticWorld, cfg: &ExtractionConfig, states: &StateTrajectory) -> Result<TvReport> {
    let raw = world.backward_averages(cfg, states)?;
    let n_latents = raw.nrows();
    let l = cfg.lookahead;
    // row t averages states t+1 ..= t+L; full when t + L ≤ n_latents
    let full_pairs: Vec<usize> = (0..n_latents.saturating_sub(1)).filter(|&t| t + 1 + l <= n_latents).collect();
    let excluded = n_latents.saturating_sub(1) - full_pairs.len();
    if full_pairs.is_empty() {
        return Err(Error::PreconditionViolated(format!(
            "{} states leave no full lookahead window for L = {l}",
            states.len()
        )));
    }

    let rho = full_pairs
        .iter()
        .flat_map(|&t| [t, t + 1])
        .map(|t| l2(raw.row(t)))
        .fold(f64::INFINITY, f64::min);
    if !(rho >= cfg.norm_floor) {
        return Err(Error::DegenerateRho { rho, floor: cfg.norm_floor });
    }

    let b = &world.b_mat;
    let l_b = world.lipschitz_backward();
    let d = raw.ncols() as f64;
    let factor = 2.0 * d.sqrt() * l_b / (rho * l as f64);

    let mut max_resid = 0.0f64;
    let mut min_slack = f64::INFINITY;
    let mut tv = 0.0;
    let mut c_motion = 0.0;
    let mut ok = true;
    for &t in &full_pairs {
        let diff = &raw.row(t + 1) - &raw.row(t);
        let far = states.row(t + l + 1);
        let near = states.row(t + 1);
        let predicted = (b.dot(&far) - b.dot(&near)) / l as f64;
        let resid = l2((&diff - &predicted).view());
        let scale = 1.0 + l2(diff.view());
        max_resid = max_resid.max(resid / scale);

        let z0 = project_to_sphere(raw.row(t), cfg.norm_floor)?;
        let z1 = project_to_sphere(raw.row(t + 1), cfg.norm_floor)?;
        let step = l2((&z1 - &z0).view());
        let disp = l2((&far - &near).view());
        let slack = factor * disp - step;
        min_slack = min_slack.min(slack);
        ok &= slack >= -BOUND_TOL;
        tv += step;
        c_motion += disp;
    }
    let tv_bound = factor * c_motion;
    ok &= max_resid <= 1e-10 && tv <= tv_bound + BOUND_TOL;
    Ok(TvReport {
        lookahead: l,
        full_window_pairs: full_pairs.len(),
        excluded_pairs: excluded,
        max_telescoping_residual: max_resid,
        rho,
        l_b,
        factor,
        tv_full: tv,
        c_motion,
        tv_bound,
        min_step_slack: min_slack,
        all_pass: ok,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop2Input {
    pub e_y: Vec<f64>,
    pub e_m: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
    pub eta: f64,
    #[serde(rename = "Delta")]
    pub delta: f64,
    pub tau: f64,
}

impl Prop2Input {
    /// Number of negatives `N`.
    pub fn n(&self) -> usize {
        self.negatives.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginRegime {
    /// `Δ > η + √(2η)`: retrieval is guaranteed.
    Inside,
    /// No retrieval guarantee applies.
    OutsideMarginRegime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop2Report {
    pub regime: MarginRegime,
    /// `Δ − η − √(2η)`.
    pub gap_bound: f64,
    pub min_gap: f64,
    pub retrieval_correct: bool,
    pub softmax_p: f64,
    pub p_bound: f64,
    pub all_pass: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `1 / (1 + N exp(−g / τ))`.
pub fn contrastive_lower_bound(gap_bound: f64, n: usize, tau: f64) -> f64 {
    1.0 / (1.0 + n as f64 * (-gap_bound / tau).exp())
}

/// `exp(s⁺/τ) / (exp(s⁺/τ) + Σ exp(s⁻/τ))`, stabilized by the max logit.
fn softmax_positive(pos: f64, negs: &[f64], tau: f64) -> f64 {
    let top = negs.iter().copied().fold(pos, f64::max);
    let num = ((pos - top) / tau).exp();
    let den = num + negs.iter().map(|s| ((s - top) / tau).exp()).sum::<f64>();
    num / den
}

pub fn verify_prop2(input: &Prop2Input) -> Result<Prop2Report> {
    let d = input.e_y.len();
    let unit = |v: &[f64], what: &str| -> Result<()> {
        if v.len() != d {
            return Err(Error::DimensionMismatch(format!("{what} has {} entries, e_Y has {d}", v.len())));
        }
        let norm = dot(v, v).sqrt();
        if (norm - 1.0).abs() > BOUND_TOL {
            return Err(Error::NonUnitInput { norm, tol: BOUND_TOL });
        }
        Ok(())
    };
    unit(&input.e_y, "e_Y")?;
    unit(&input.e_m, "e_M")?;
    for n in &input.negatives {
        unit(n, "negative")?;
    }
    if input.negatives.is_empty() {
        return Err(Error::PreconditionViolated("no negatives".into()));
    }
    if !(input.tau > 0.0) || !(input.eta >= 0.0) {
        return Err(Error::PreconditionViolated(format!("need τ > 0 and η ≥ 0, got τ = {}, η = {}", input.tau, input.eta)));
    }
    let align = dot(&input.e_y, &input.e_m);
    if 1.0 - align > input.eta + BOUND_TOL {
        return Err(Error::PreconditionViolated(format!("alignment error {} exceeds η = {}", 1.0 - align, input.eta)));
    }
    for (i, n) in input.negatives.iter().enumerate() {
        let c = dot(&input.e_y, n);
        if c > 1.0 - input.delta + BOUND_TOL {
            return Err(Error::PreconditionViolated(format!(
                "negative {i} has text cosine {c}, above 1 − Δ = {}",
                1.0 - input.delta
            )));
        }
    }

    let gap_bound = input.delta - input.eta - (2.0 * input.eta).sqrt();
    let regime = if gap_bound > 0.0 { MarginRegime::Inside } else { MarginRegime::OutsideMarginRegime };
    let pos = dot(&input.e_m, &input.e_y);
    let negs: Vec<f64> = input.negatives.iter().map(|n| dot(&input.e_m, n)).collect();
    let min_gap = negs.iter().map(|s| pos - s).fold(f64::INFINITY, f64::min);
    let retrieval_correct = min_gap > 0.0;
    let softmax_p = softmax_positive(pos, &negs, input.tau);
    let p_bound = contrastive_lower_bound(gap_bound, input.n(), input.tau);

    let mut ok = min_gap >= gap_bound - BOUND_TOL && softmax_p >= p_bound - BOUND_TOL;
    if regime == MarginRegime::Inside {
        ok &= retrieval_correct;
    }
    Ok(Prop2Report { regime, gap_bound, min_gap, retrieval_correct, softmax_p, p_bound, all_pass: ok })
}

/// A unit vector orthogonal to `u` (unit), drawn from `rng`.
fn random_orthogonal<R: Rng>(rng: &mut R, u: &Array1<f64>) -> Array1<f64> {
    loop {
        let mut v = gaussian_vector(rng, u.len(), 1.0);
        let proj = v.dot(u);
        v.scaled_add(-proj, u);
        let n = l2(v.view());
        if n > 1e-6 {
            return v / n;
        }
    }
}

fn random_unit<R: Rng>(rng: &mut R, d: usize) -> Array1<f64> {
    loop {
        let v = gaussian_vector(rng, d, 1.0);
        let n = l2(v.view());
        if n > 1e-6 {
            return v / n;
        }
    }
}

/// Unit vector at cosine `c` from the unit vector `u`.
fn at_cosine<R: Rng>(rng: &mut R, u: &Array1<f64>, c: f64) -> Array1<f64> {
    let w = random_orthogonal(rng, u);
    let v = u * c + &w * (1.0 - c * c).max(0.0).sqrt();
    let n = l2(v.view());
    v / n
}

/// A margin instance satisfying the bound's assumptions with
/// `Δ = η + √(2η) + margin_excess`.
pub fn margin_instance<R: Rng>(rng: &mut R, dim: usize, eta: f64, margin_excess: f64, n_neg: usize, tau: f64) -> Prop2Input {
    let e_y = random_unit(rng, dim);
    let frac: f64 = rng.gen_range(0.0..=1.0);
    let e_m = at_cosine(rng, &e_y, 1.0 - eta * frac);
    let delta = eta + (2.0 * eta).sqrt() + margin_excess;
    let negatives = (0..n_neg)
        .map(|_| {
            let c = (1.0 - delta - rng.gen_range(0.0..0.5)).max(-1.0);
            at_cosine(rng, &e_y, c).to_vec()
        })
        .collect();
    Prop2Input { e_y: e_y.to_vec(), e_m: e_m.to_vec(), negatives, eta, delta, tau }
}

/// A unit-speed-ish random walk on the sphere of radius `√d` with `len` frames.
pub fn sphere_walk<R: Rng>(rng: &mut R, dim: usize, len: usize, step: f64) -> Result<LatentTrajectory> {
    let mut z = Array2::zeros((len, dim));
    let mut cur = project_to_sphere(gaussian_vector(rng, dim, 1.0).view(), 1e-8)?;
    for t in 0..len {
        z.row_mut(t).assign(&cur);
        let next = &cur + &gaussian_vector(rng, dim, step / (dim as f64).sqrt());
        cur = project_to_sphere(next.view(), 1e-8)?;
    }
    Trajectory::new(z)
}

fn random_world<R: Rng>(rng: &mut R, l_s: f64, l_z: Option<f64>) -> Result<SyntheticWorld> {
    let state_dim = rng.gen_range(4..=16);
    SyntheticWorld::new(WorldSpec {
        state_dim,
        action_dim: rng.gen_range(2..=8),
        latent_dim: rng.gen_range(2..=8),
        target_state_gain: l_s,
        target_latent_gain: l_z,
        seed: rng.gen(),
        ..WorldSpec::default()
    })
}

/// Outcome of running one of the randomized theorem suites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub check: String,
    pub instances: usize,
    pub passed: usize,
    /// Instances outside the claim (Prop. 2 margin regime); counted as passed
    /// when their bounds hold.
    pub outside_regime: usize,
    pub failures: Vec<String>,
}

impl SuiteReport {
    pub fn all_pass(&self) -> bool {
        self.passed == self.instances
    }
}

/// Random `(world, z, m)` instances with `L_s ∈ [0.3, 0.95]`, `m ∈ {2, 4, 8, 16}`.
pub fn prop1_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = SuiteReport { check: "prop1".into(), instances, passed: 0, outside_regime: 0, failures: vec![] };
    for i in 0..instances {
        let l_s = rng.gen_range(0.3..=0.95);
        let world = random_world(&mut rng, l_s, None)?;
        let len = rng.gen_range(8..=64);
        let m = [2, 4, 8, 16][rng.gen_range(0..4)];
        let step = rng.gen_range(0.0..0.6);
        let z = sphere_walk(&mut rng, world.latent_dim(), len, step)?;
        let s1 = gaussian_vector(&mut rng, world.state_dim(), 0.5);
        let r = verify_prop1(&world, &z, m, s1.view())?;
        if r.all_pass {
            rep.passed += 1;
        } else {
            rep.failures.push(format!("instance {i}: V = {}, m = {m}, L_s = {l_s}", r.v));
        }
    }
    Ok(rep)
}

/// Constructed margin instances: half inside the margin regime, a quarter at
/// its boundary from above, a quarter outside it.
pub fn prop2_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = SuiteReport { check: "prop2".into(), instances, passed: 0, outside_regime: 0, failures: vec![] };
    for i in 0..instances {
        let dim = rng.gen_range(3..=32);
        let eta = rng.gen_range(0.0..0.05);
        let excess = match i % 4 {
            0 | 1 => rng.gen_range(0.01..0.5),
            2 => 1e-6,
            _ => -rng.gen_range(0.01..0.2),
        };
        let n = rng.gen_range(1..=31);
        let tau = rng.gen_range(0.02..1.0);
        let input = margin_instance(&mut rng, dim, eta, excess, n, tau);
        let r = verify_prop2(&input)?;
        if r.regime == MarginRegime::OutsideMarginRegime {
            rep.outside_regime += 1;
        }
        if r.all_pass {
            rep.passed += 1;
        } else {
            rep.failures.push(format!("instance {i}: η = {eta}, Δ = {}", input.delta));
        }
    }
    Ok(rep)
}

/// Extracted latents of random closed-loop rollouts with noise.
pub fn tv_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = SuiteReport { check: "tv".into(), instances, passed: 0, outside_regime: 0, failures: vec![] };
    for i in 0..instances {
        let l_s = rng.gen_range(0.3..=0.95);
        let world = random_world(&mut rng, l_s, None)?;
        let cfg = ExtractionConfig { lookahead: rng.gen_range(1..=6), ..ExtractionConfig::default() };
        let len = rng.gen_range(cfg.lookahead + 3..=64);
        let step = rng.gen_range(0.0..1.0);
        let z = sphere_walk(&mut rng, world.latent_dim(), len, step)?;
        let s1 = gaussian_vector(&mut rng, world.state_dim(), 0.5);
        let noise = crate::world::StateNoise { std: rng.gen_range(0.0..0.2), seed: rng.gen() };
        let states = world.rollout_with_noise(s1.view(), &z, Some(noise))?;
        let r = verify_tv_smoothing(&world, &cfg, &states)?;
        if r.all_pass {
            rep.passed += 1;
        } else {
            rep.failures.push(format!("instance {i}: residual {:e}, slack {:e}", r.max_telescoping_residual, r.min_step_slack));
        }
    }
    Ok(rep)
}

/// Grid for [`sweep_prop1`]. `v` is a target path length; the measured one
/// is reported.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prop1Grid {
    pub l_s: Vec<f64>,
    pub l_z: Vec<f64>,
    pub v: Vec<f64>,
    pub m: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_len")]
    pub len: usize,
}

fn default_len() -> usize {
    64
}

impl Default for Prop1Grid {
    fn default() -> Self {
        Self {
            l_s: vec![0.3, 0.6, 0.9, 0.95],
            l_z: vec![0.5, 1.0],
            v: vec![2.0, 8.0],
            m: vec![2, 4, 8, 16],
            seeds: vec![0, 1],
            len: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub l_s: f64,
    pub l_z: f64,
    pub v_target: f64,
    pub v: f64,
    pub m: usize,
    pub seed: u64,
    pub max_rollout_err: f64,
    pub bound: f64,
    pub tightness: f64,
    pub pass: bool,
}

pub const SWEEP_CSV_HEADER: &str = "l_s,l_z,v_target,v,m,seed,max_rollout_err,bound,tightness,pass";

/// One row per grid cell, in `l_s, l_z, v, m, seed` order.
pub fn sweep_prop1(grid: &Prop1Grid) -> Result<Vec<SweepCell>> {
    if grid.l_s.is_empty() || grid.l_z.is_empty() || grid.v.is_empty() || grid.m.is_empty() || grid.seeds.is_empty() {
        return Err(Error::ConfigInvalid("sweep grid has an empty axis".into()));
    }
    if grid.len < 2 {
        return Err(Error::ConfigInvalid("sweep trajectories need at least 2 frames".into()));
    }
    let mut rows = Vec::new();
    for &l_s in &grid.l_s {
        for &l_z in &grid.l_z {
            for &v_target in &grid.v {
                for &m in &grid.m {
                    for &seed in &grid.seeds {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        let world = SyntheticWorld::new(WorldSpec {
                            target_state_gain: l_s,
                            target_latent_gain: Some(l_z),
                            seed,
                            ..WorldSpec::default()
                        })?;
                        let d = world.latent_dim();
                        let step = v_target / (grid.len - 1) as f64;
                        let z = sphere_walk(&mut rng, d, grid.len, step)?;
                        let s1 = gaussian_vector(&mut rng, world.state_dim(), 0.5);
                        let r = verify_prop1(&world, &z, m, s1.view())?;
                        let bound = r.uniform_bound.ok_or(Error::UnstableWorld(l_s))?;
                        rows.push(SweepCell {
                            l_s,
                            l_z,
                            v_target,
                            v: r.v,
                            m,
                            seed,
                            max_rollout_err: r.max_rollout_err(),
                            bound,
                            tightness: r.tightness().unwrap_or(0.0),
                            pass: r.all_pass,
                        });
                    }
                }
            }
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepCell]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.l_s, r.l_z, r.v_target, r.v, r.m, r.seed, r.max_rollout_err, r.bound, r.tightness, r.pass
        );
    }
    out
}
