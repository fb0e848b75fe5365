//! A linear stand-in for a frozen latent-conditioned behavior policy.
//!
//! The closed loop is `s' = A_s s + A_a (W_s s + W_z z)`, the policy is the
//! isotropic Gaussian `N(W_s s + W_z z, σ² I)`, and the backward map is the
//! linear `B s`. Because everything is linear the Lipschitz constants of the
//! closed loop are exact operator norms:
//!
//! * `L_s = ||A_s + A_a W_s||`
//! * `L_z = ||A_a W_z||`
//! * `L_B = ||B||`

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project_to_sphere, LatentTrajectory, StateTrajectory, Trajectory, DEFAULT_NORM_FLOOR};
use crate::linalg::{gaussian_matrix, operator_norm, pinv, solve};

/// How the backward map `B` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackwardMap {
    /// Pseudo-inverse of the steady-state response `(I − M)⁻¹ N`, so holding a
    /// latent long enough makes its backward embedding reproduce it.
    SteadyStateInverse,
    /// Independent Gaussian matrix.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub state_dim: usize,
    pub action_dim: usize,
    pub latent_dim: usize,
    /// Operator norm the closed-loop state gain is rescaled to.
    pub target_state_gain: f64,
    /// Optional operator norm for the closed-loop latent gain.
    #[serde(default)]
    pub target_latent_gain: Option<f64>,
    pub policy_std: f64,
    pub backward: BackwardMap,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            state_dim: 16,
            action_dim: 8,
            latent_dim: 8,
            target_state_gain: 0.8,
            target_latent_gain: None,
            policy_std: 0.1,
            backward: BackwardMap::SteadyStateInverse,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub spec: WorldSpec,
    pub a_s: Array2<f64>,
    pub a_a: Array2<f64>,
    pub w_s: Array2<f64>,
    pub w_z: Array2<f64>,
    pub b_mat: Array2<f64>,
}

/// Lookahead averaging parameters for latent extraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractionConfig {
    pub lookahead: usize,
    pub norm_floor: f64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self { lookahead: 4, norm_floor: DEFAULT_NORM_FLOOR }
    }
}

/// Additive Gaussian state noise for qualitative experiments.
#[derive(Debug, Clone, Copy)]
pub struct StateNoise {
    pub std: f64,
    pub seed: u64,
}

impl SyntheticWorld {
    pub fn new(spec: WorldSpec) -> Result<Self> {
        let WorldSpec { state_dim, action_dim, latent_dim, .. } = spec;
        if state_dim == 0 || action_dim == 0 || latent_dim == 0 {
            return Err(Error::InvalidSpec("world dimensions must be positive".into()));
        }
        if !(spec.target_state_gain > 0.0) || !(spec.policy_std > 0.0) {
            return Err(Error::InvalidSpec("state gain and policy std must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut a_s = gaussian_matrix(&mut rng, state_dim, state_dim, 1.0 / (state_dim as f64).sqrt());
        let a_a = gaussian_matrix(&mut rng, state_dim, action_dim, 1.0 / (action_dim as f64).sqrt());
        let mut w_s = gaussian_matrix(&mut rng, action_dim, state_dim, 1.0 / (state_dim as f64).sqrt());
        let mut w_z = gaussian_matrix(&mut rng, action_dim, latent_dim, 1.0 / (latent_dim as f64).sqrt());

        // M = A_s + A_a W_s is linear in (A_s, W_s): scaling both rescales M exactly
        let closed = &a_s + &a_a.dot(&w_s);
        let k = spec.target_state_gain / operator_norm(&closed);
        a_s *= k;
        w_s *= k;
        if let Some(target) = spec.target_latent_gain {
            let k = target / operator_norm(&a_a.dot(&w_z));
            w_z *= k;
        }

        let b_mat = match spec.backward {
            BackwardMap::Random => gaussian_matrix(&mut rng, latent_dim, state_dim, 1.0 / (state_dim as f64).sqrt()),
            BackwardMap::SteadyStateInverse => {
                let m = &a_s + &a_a.dot(&w_s);
                let i_minus_m = Array2::eye(state_dim) - m;
                let response = solve(&i_minus_m, &a_a.dot(&w_z))?;
                pinv(&response)?
            }
        };
        Ok(Self { spec, a_s, a_a, w_s, w_z, b_mat })
    }

    pub fn state_dim(&self) -> usize {
        self.spec.state_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    pub fn policy_std(&self) -> f64 {
        self.spec.policy_std
    }

    /// Closed-loop state gain `A_s + A_a W_s`.
    pub fn state_gain(&self) -> Array2<f64> {
        &self.a_s + &self.a_a.dot(&self.w_s)
    }

    /// Closed-loop latent gain `A_a W_z`.
    pub fn latent_gain(&self) -> Array2<f64> {
        self.a_a.dot(&self.w_z)
    }

    pub fn lipschitz_state(&self) -> f64 {
        operator_norm(&self.state_gain())
    }

    pub fn lipschitz_latent(&self) -> f64 {
        operator_norm(&self.latent_gain())
    }

    pub fn lipschitz_backward(&self) -> f64 {
        operator_norm(&self.b_mat)
    }

    /// Operator norm of `W_z`, the Lipschitz constant of the policy mean in `z`.
    pub fn lipschitz_policy_latent(&self) -> f64 {
        operator_norm(&self.w_z)
    }

    fn check(&self, s: ArrayView1<'_, f64>, z: ArrayView1<'_, f64>) -> Result<()> {
        if s.len() != self.spec.state_dim || z.len() != self.spec.latent_dim {
            return Err(Error::DimensionMismatch(format!(
                "state {} / latent {} vs world {} / {}",
                s.len(),
                z.len(),
                self.spec.state_dim,
                self.spec.latent_dim
            )));
        }
        Ok(())
    }

    pub fn policy_mean(&self, s: ArrayView1<'_, f64>, z: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        self.check(s, z)?;
        Ok(self.w_s.dot(&s) + self.w_z.dot(&z))
    }

    /// Deterministic closed-loop step `F(s, z)`.
    pub fn step(&self, s: ArrayView1<'_, f64>, z: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let a = self.policy_mean(s, z)?;
        Ok(self.a_s.dot(&s) + self.a_a.dot(&a))
    }

    /// Rolls out `T_z` latents from `s1`, returning `T_z + 1` states.
    pub fn rollout(&self, s1: ArrayView1<'_, f64>, z: &LatentTrajectory) -> Result<StateTrajectory> {
        self.rollout_with_noise(s1, z, None)
    }

    pub fn rollout_with_noise(
        &self,
        s1: ArrayView1<'_, f64>,
        z: &LatentTrajectory,
        noise: Option<StateNoise>,
    ) -> Result<StateTrajectory> {
        if s1.len() != self.spec.state_dim {
            return Err(Error::DimensionMismatch(format!("initial state has {} entries", s1.len())));
        }
        if !z.is_empty() && z.dim() != self.spec.latent_dim {
            return Err(Error::DimensionMismatch(format!("latents have dimension {}", z.dim())));
        }
        let mut rng = noise.map(|n| ChaCha8Rng::seed_from_u64(n.seed));
        let mut states = Array2::zeros((z.len() + 1, self.spec.state_dim));
        states.row_mut(0).assign(&s1);
        for t in 0..z.len() {
            let mut next = self.step(states.row(t), z.row(t))?;
            if let (Some(n), Some(rng)) = (noise, rng.as_mut()) {
                next.mapv_inplace(|x| x + n.std * rng.sample::<f64, _>(StandardNormal));
            }
            if next.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteState { step: t + 1 });
            }
            states.row_mut(t + 1).assign(&next);
        }
        Trajectory::new(states)
    }

    /// Window-averaged backward embeddings before projection, one row per
    /// latent: row `t` averages `B s` over the `H_t = min(L, T − 1 − t)`
    /// states following `s_t` (0-based).
    pub fn backward_averages(&self, cfg: &ExtractionConfig, states: &StateTrajectory) -> Result<Array2<f64>> {
        if cfg.lookahead == 0 {
            return Err(Error::InvalidSpec("lookahead must be at least 1".into()));
        }
        if states.dim() != self.spec.state_dim {
            return Err(Error::DimensionMismatch(format!("states have dimension {}", states.dim())));
        }
        let len = states.len();
        if len < 2 {
            return Err(Error::DimensionMismatch("need at least two states".into()));
        }
        let embedded = states.data().dot(&self.b_mat.t());
        let mut out = Array2::zeros((len - 1, self.spec.latent_dim));
        for t in 0..len - 1 {
            let window = cfg.lookahead.min(len - 1 - t);
            let mut acc = Array1::<f64>::zeros(self.spec.latent_dim);
            for k in 0..window {
                acc += &embedded.row(t + 1 + k);
            }
            out.row_mut(t).assign(&(acc / window as f64));
        }
        Ok(out)
    }

    /// Lookahead-averaged, sphere-projected policy latents (`T − 1` rows).
    pub fn extract_latents(&self, cfg: &ExtractionConfig, states: &StateTrajectory) -> Result<LatentTrajectory> {
        let mut avg = self.backward_averages(cfg, states)?;
        for mut row in avg.rows_mut() {
            let p = project_to_sphere(row.view(), cfg.norm_floor)?;
            row.assign(&p);
        }
        Trajectory::new(avg)
    }

    /// Mean per-step KL between the policy under `z_hat` and under `z`, both
    /// evaluated at the reference states.
    ///
    /// For equal isotropic covariances this is `||W_z (ẑ − z)||² / (2σ²)`.
    pub fn action_kl(&self, states: &StateTrajectory, z: &LatentTrajectory, z_hat: &LatentTrajectory) -> Result<f64> {
        if z.data().dim() != z_hat.data().dim() {
            return Err(Error::DimensionMismatch("latent sequences differ in shape".into()));
        }
        if states.len() < z.len() || z.dim() != self.spec.latent_dim || states.dim() != self.spec.state_dim {
            return Err(Error::DimensionMismatch("states do not cover the latent sequence".into()));
        }
        if z.is_empty() {
            return Ok(0.0);
        }
        let var = self.spec.policy_std * self.spec.policy_std;
        let mut total = 0.0;
        for t in 0..z.len() {
            let gap = self.w_z.dot(&(&z_hat.row(t) - &z.row(t)));
            total += gap.dot(&gap) / (2.0 * var);
        }
        Ok(total / z.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::gaussian_vector;
    use ndarray::array;

    fn world(seed: u64, gain: f64) -> SyntheticWorld {
        SyntheticWorld::new(WorldSpec { target_state_gain: gain, seed, ..WorldSpec::default() }).unwrap()
    }

    fn zero_world() -> SyntheticWorld {
        let mut w = world(0, 0.5);
        w.a_s.fill(0.0);
        w.a_a.fill(0.0);
        w.w_s.fill(0.0);
        w.w_z.fill(0.0);
        w
    }

    #[test]
    fn policy_mean_cases() {
        let w = world(1, 0.7);
        let s = Array1::zeros(16);
        let z = Array1::zeros(8);
        assert!(w.policy_mean(s.view(), z.view()).unwrap().iter().all(|&x| x == 0.0));

        let mut small = SyntheticWorld::new(WorldSpec {
            state_dim: 2,
            action_dim: 2,
            latent_dim: 2,
            ..WorldSpec::default()
        })
        .unwrap();
        small.w_s = Array2::eye(2);
        small.w_z.fill(0.0);
        let a = small.policy_mean(array![1.0, 2.0].view(), array![5.0, -3.0].view()).unwrap();
        assert_eq!(a, array![1.0, 2.0]);
        assert!(w.policy_mean(array![1.0].view(), z.view()).is_err());
    }

    #[test]
    fn policy_mean_latent_lipschitz() {
        let w = world(2, 0.8);
        let lip = w.lipschitz_policy_latent();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = gaussian_vector(&mut rng, 16, 1.0);
        for _ in 0..200 {
            let z = gaussian_vector(&mut rng, 8, 1.0);
            let z2 = gaussian_vector(&mut rng, 8, 1.0);
            let gap = w.policy_mean(s.view(), z.view()).unwrap() - w.policy_mean(s.view(), z2.view()).unwrap();
            let dz = &z - &z2;
            assert!(gap.dot(&gap).sqrt() <= lip * dz.dot(&dz).sqrt() + 1e-12);
        }
    }

    #[test]
    fn step_cases() {
        let w = zero_world();
        let s = Array1::from_elem(16, 1.0);
        let z = Array1::from_elem(8, 1.0);
        assert!(w.step(s.view(), z.view()).unwrap().iter().all(|&x| x == 0.0));

        let mut id = zero_world();
        id.a_s = Array2::eye(16);
        assert_eq!(id.step(s.view(), z.view()).unwrap(), s);
        let states = id.rollout(s.view(), &Trajectory::new(Array2::from_elem((5, 8), 0.3)).unwrap()).unwrap();
        assert!(states.data().rows().into_iter().all(|r| r == s));
    }

    #[test]
    fn gains_hit_targets() {
        for (seed, gain) in [(0, 0.3), (1, 0.8), (2, 0.95)] {
            let w = world(seed, gain);
            assert!((w.lipschitz_state() - gain).abs() < 1e-9);
            assert!(w.lipschitz_state() < 1.0);
        }
        let w = SyntheticWorld::new(WorldSpec { target_latent_gain: Some(0.6), ..WorldSpec::default() }).unwrap();
        assert!((w.lipschitz_latent() - 0.6).abs() < 1e-9);
    }

    #[test]
    fn rollout_length_and_empty() {
        let w = world(3, 0.8);
        let s1 = Array1::from_elem(16, 0.5);
        let empty = Trajectory::new(Array2::zeros((0, 8))).unwrap();
        let states = w.rollout(s1.view(), &empty).unwrap();
        assert_eq!(states.len(), 1);
        assert_eq!(states.row(0), s1);
        let z = Trajectory::new(Array2::from_elem((7, 8), 0.2)).unwrap();
        assert_eq!(w.rollout(s1.view(), &z).unwrap().len(), 8);
    }

    #[test]
    fn rollout_divergence_is_reported() {
        let mut w = zero_world();
        w.a_s = Array2::eye(16) * 1e200;
        let z = Trajectory::new(Array2::zeros((5, 8))).unwrap();
        assert!(matches!(w.rollout(Array1::from_elem(16, 1.0).view(), &z), Err(Error::NonFiniteState { .. })));
    }

    #[test]
    fn single_frame_perturbation_respects_unrolled_bound() {
        let w = world(4, 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = Trajectory::new(gaussian_matrix(&mut rng, 20, 8, 1.0)).unwrap();
        let mut z2 = z.data().clone();
        let j = 5;
        z2.row_mut(j).mapv_inplace(|x| x + 0.7);
        let z2 = Trajectory::new(z2).unwrap();
        let s1 = gaussian_vector(&mut rng, 16, 1.0);
        let a = w.rollout(s1.view(), &z).unwrap();
        let b = w.rollout(s1.view(), &z2).unwrap();
        let (ls, lz) = (w.lipschitz_state(), w.lipschitz_latent());
        let dz = (0.7f64 * 0.7 * 8.0).sqrt();
        for t in 0..a.len() {
            let gap = (&a.row(t) - &b.row(t)).mapv(|x| x * x).sum().sqrt();
            let bound = if t > j { lz * ls.powi((t - 1 - j) as i32) * dz } else { 0.0 };
            assert!(gap <= bound + 1e-9, "t={t}: {gap} > {bound}");
        }
    }

    #[test]
    fn extraction_window_of_one() {
        let w = world(5, 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let states = Trajectory::new(gaussian_matrix(&mut rng, 6, 16, 1.0)).unwrap();
        let cfg = ExtractionConfig { lookahead: 1, ..Default::default() };
        let z = w.extract_latents(&cfg, &states).unwrap();
        assert_eq!(z.len(), 5);
        for t in 0..5 {
            let expect = project_to_sphere(w.b_mat.dot(&states.row(t + 1)).view(), 1e-8).unwrap();
            assert!((&z.row(t) - &expect).mapv(f64::abs).sum() < 1e-13);
        }
    }

    #[test]
    fn extraction_windows_shrink_at_the_end() {
        let w = world(6, 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let states = Trajectory::new(gaussian_matrix(&mut rng, 4, 16, 1.0)).unwrap();
        let cfg = ExtractionConfig { lookahead: 3, ..Default::default() };
        let avg = w.backward_averages(&cfg, &states).unwrap();
        let b = |i: usize| w.b_mat.dot(&states.row(i));
        // hand-unrolled: H = 3, 2, 1
        let expect = [(b(1) + b(2) + b(3)) / 3.0, (b(2) + b(3)) / 2.0, b(3)];
        for (t, e) in expect.iter().enumerate() {
            let err = (&avg.row(t) - e).mapv(f64::abs).fold(0.0, |m: f64, &x| m.max(x));
            assert!(err < 1e-14);
        }
        let z = w.extract_latents(&cfg, &states).unwrap();
        for row in z.data().rows() {
            assert!((row.dot(&row).sqrt() - 8f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_states_give_constant_latents() {
        let w = world(7, 0.8);
        let states = Trajectory::new(Array2::from_shape_fn((10, 16), |(_, j)| 0.1 * (j as f64 + 1.0))).unwrap();
        let z = w.extract_latents(&ExtractionConfig::default(), &states).unwrap();
        assert!(crate::geometry::total_variation(&z) < 1e-12);
    }

    #[test]
    fn action_kl_closed_forms() {
        let w = world(8, 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let states = Trajectory::new(gaussian_matrix(&mut rng, 4, 16, 1.0)).unwrap();
        let z = Trajectory::new(gaussian_matrix(&mut rng, 3, 8, 1.0)).unwrap();
        assert_eq!(w.action_kl(&states, &z, &z).unwrap(), 0.0);

        let mut unit = w.clone();
        unit.spec.policy_std = 1.0;
        let z1 = z.slice(0, 1);
        let mut shifted = z1.data().clone();
        shifted[[0, 0]] += 0.5;
        let shifted = Trajectory::new(shifted).unwrap();
        let gap = unit.w_z.column(0).mapv(|x| 0.5 * x);
        let g2 = gap.dot(&gap);
        assert!((unit.action_kl(&states, &z1, &shifted).unwrap() - g2 / 2.0).abs() < 1e-14);
    }

    #[test]
    fn steady_state_backward_map_recovers_latent() {
        let w = world(9, 0.6);
        let target = project_to_sphere(array![1.0, -0.5, 0.3, 0.0, 0.2, 0.9, -0.4, 0.1].view(), 1e-8).unwrap();
        let z = Trajectory::new(Array2::from_shape_fn((80, 8), |(_, j)| target[j])).unwrap();
        let states = w.rollout(Array1::zeros(16).view(), &z).unwrap();
        let ext = w.extract_latents(&ExtractionConfig::default(), &states).unwrap();
        let last = ext.row(ext.len() - 1);
        assert!((&last - &target).mapv(f64::abs).sum() < 1e-6);
    }
}
