//! Geometry of latent trajectories: the sphere projection, path length,
//! piecewise-constant approximation, and linear overlap blending.
//!
//! Trajectories are stored row-major as `[T × d]` arrays. Every function
//! here is pure.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{shape_err, Error, Result};

/// Default lower bound on the norm of a vector handed to [`project_to_sphere`].
pub const DEFAULT_NORM_FLOOR: f64 = 1e-8;

/// A time-ordered sequence of real vectors, one row per step.
///
/// Used both for behavioral latents (`[T_z × d_z]`) and simulator states
/// (`[T × state_dim]`). Construction rejects non-finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    data: Array2<f64>,
}

pub type LatentTrajectory = Trajectory;
pub type StateTrajectory = Trajectory;

impl Trajectory {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("trajectory entry {pos}")));
        }
        Ok(Self { data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch("ragged trajectory rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let data = Array2::from_shape_vec((rows.len(), dim), flat)
            .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
        Self::new(data)
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn row(&self, t: usize) -> ArrayView1<'_, f64> {
        self.data.row(t)
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.rows().into_iter().map(|r| r.to_vec()).collect()
    }

    /// Frames `start..end` as a new trajectory.
    pub fn slice(&self, start: usize, end: usize) -> Trajectory {
        Trajectory {
            data: self.data.slice(ndarray::s![start..end, ..]).to_owned(),
        }
    }

    /// Concatenates along time. All parts must share the same dimension.
    pub fn concat(parts: &[Trajectory]) -> Result<Trajectory> {
        let dim = parts.first().map_or(0, Trajectory::dim);
        if parts.iter().any(|p| p.dim() != dim) {
            return Err(Error::DimensionMismatch("concatenating trajectories of different dimension".into()));
        }
        let views: Vec<_> = parts.iter().map(|p| p.data.view()).collect();
        let data = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
        Ok(Trajectory { data })
    }
}

/// Contiguous segmentation of `[0, T)` given by the start index of each segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentPartition {
    /// Strictly increasing 0-based start indices; the first is always 0.
    pub boundaries: Vec<usize>,
    pub len: usize,
}

impl SegmentPartition {
    pub fn segment_count(&self) -> usize {
        self.boundaries.len()
    }

    /// `(start, end)` half-open ranges of every segment.
    pub fn ranges(&self) -> Vec<(usize, usize)> {
        self.boundaries
            .iter()
            .enumerate()
            .map(|(i, &a)| (a, self.boundaries.get(i + 1).copied().unwrap_or(self.len)))
            .collect()
    }
}

/// Scales `u` onto the sphere of radius `sqrt(d)`.
pub fn project_to_sphere(u: ArrayView1<'_, f64>, norm_floor: f64) -> Result<Array1<f64>> {
    let norm = l2(u);
    if !(norm >= norm_floor) {
        return Err(Error::ZeroNormInput { norm, floor: norm_floor });
    }
    let scale = (u.len() as f64).sqrt() / norm;
    Ok(u.mapv(|x| x * scale))
}

/// Projects every row of `z` onto the sphere of radius `sqrt(d)`.
pub fn project_rows(z: &Trajectory, norm_floor: f64) -> Result<Trajectory> {
    let mut out = z.data.clone();
    for mut row in out.rows_mut() {
        let p = project_to_sphere(row.view(), norm_floor)?;
        row.assign(&p);
    }
    Ok(Trajectory { data: out })
}

pub(crate) fn l2(v: ArrayView1<'_, f64>) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn row_gap(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Path length `Σ_t ||z_{t+1} − z_t||`.
pub fn total_variation(z: &Trajectory) -> f64 {
    (1..z.len()).map(|t| row_gap(z.row(t), z.row(t - 1))).sum()
}

/// Greedy piecewise-constant approximation with at most `m` segments.
///
/// Segments are grown left to right while their internal path length stays
/// within `δ = V / (m − 1)`; every frame is replaced by the first frame of
/// its segment, so `max_t ||z_t − z̃_t|| ≤ δ`. When `m ≥ T` every frame
/// becomes its own segment and the approximation is exact.
pub fn piecewise_constant_approx(z: &Trajectory, m: usize) -> Result<(Trajectory, SegmentPartition)> {
    if m < 2 {
        return Err(Error::RangeError { name: "m", value: m as f64, lo: 2.0, hi: f64::INFINITY });
    }
    let len = z.len();
    let boundaries: Vec<usize> = if m >= len {
        (0..len.max(1)).collect()
    } else {
        let delta = total_variation(z) / (m - 1) as f64;
        let mut starts = vec![0];
        let mut acc = 0.0;
        for t in 1..len {
            let step = row_gap(z.row(t), z.row(t - 1));
            if acc + step <= delta {
                acc += step;
            } else {
                starts.push(t);
                acc = 0.0;
            }
        }
        starts
    };
    let partition = SegmentPartition { boundaries, len };
    let mut approx = z.data.clone();
    for (a, b) in partition.ranges() {
        let first = z.data.row(a).to_owned();
        for t in a..b {
            approx.row_mut(t).assign(&first);
        }
    }
    Ok((Trajectory { data: approx }, partition))
}

/// Linear cross-fade of two equally shaped windows with weights `ρ_o = o / (O + 1)`.
pub fn blend_overlap(tail: ArrayView2<'_, f64>, head: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if tail.dim() != head.dim() {
        return Err(shape_err(tail.dim(), head.dim()));
    }
    let overlap = tail.nrows();
    let mut out = Array2::zeros(tail.dim());
    for o in 0..overlap {
        let rho = (o + 1) as f64 / (overlap + 1) as f64;
        let row = &tail.row(o) * (1.0 - rho) + &head.row(o) * rho;
        out.row_mut(o).assign(&row);
    }
    Ok(out)
}

/// Largest gap between a frame's norm and the sphere radius `√d`.
pub fn sphere_deviation(z: &Trajectory) -> f64 {
    let radius = (z.dim() as f64).sqrt();
    z.data.rows().into_iter().map(|r| (l2(r) - radius).abs()).fold(0.0, f64::max)
}

/// `max_t ||a_t − b_t||`.
pub fn max_deviation(a: &Trajectory, b: &Trajectory) -> Result<f64> {
    if a.data.dim() != b.data.dim() {
        return Err(shape_err(a.data.dim(), b.data.dim()));
    }
    Ok((0..a.len()).map(|t| row_gap(a.row(t), b.row(t))).fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_traj(rng: &mut ChaCha8Rng, len: usize, dim: usize) -> Trajectory {
        Trajectory::new(Array2::from_shape_fn((len, dim), |_| rng.gen_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn sphere_deviation_of_blends() {
        let on = Trajectory::from_rows(&[vec![2.0, 0.0, 0.0, 0.0], vec![0.0, 2.0, 0.0, 0.0]]).unwrap();
        assert!(sphere_deviation(&on) < 1e-12);
        let mid = blend_overlap(on.view().slice(ndarray::s![..1, ..]), on.view().slice(ndarray::s![1.., ..])).unwrap();
        // halfway between orthogonal points on the radius-2 sphere
        let dev = sphere_deviation(&Trajectory::new(mid).unwrap());
        assert!((dev - (2.0 - 2.0f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn projection_examples() {
        let p = project_to_sphere(array![1.0, 0.0, 0.0, 0.0].view(), 1e-8).unwrap();
        assert_eq!(p, array![2.0, 0.0, 0.0, 0.0]);
        let p = project_to_sphere(array![3.0, 4.0].view(), 1e-8).unwrap();
        let s = 2f64.sqrt() / 5.0;
        assert!((p[0] - 3.0 * s).abs() < 1e-15 && (p[1] - 4.0 * s).abs() < 1e-15);
        assert!(matches!(
            project_to_sphere(array![0.0, 0.0].view(), 1e-8),
            Err(Error::ZeroNormInput { .. })
        ));
    }

    #[test]
    fn tv_examples() {
        let c = Trajectory::new(Array2::from_elem((7, 3), 0.4)).unwrap();
        assert_eq!(total_variation(&c), 0.0);
        let z = Trajectory::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(total_variation(&z), 5.0);
        let single = Trajectory::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(total_variation(&single), 0.0);
    }

    #[test]
    fn tv_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = random_traj(&mut rng, 6, 4);
        let rows = z.to_rows();
        let mut naive = 0.0;
        for t in 0..5 {
            let mut sq = 0.0;
            for k in 0..4 {
                sq += (rows[t + 1][k] - rows[t][k]).powi(2);
            }
            naive += sq.sqrt();
        }
        assert_eq!(total_variation(&z), naive);
    }

    #[test]
    fn piecewise_constant_cases() {
        let c = Trajectory::new(Array2::from_elem((9, 2), 1.5)).unwrap();
        let (approx, part) = piecewise_constant_approx(&c, 3).unwrap();
        assert_eq!(approx, c);
        assert_eq!(part.segment_count(), 1);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = random_traj(&mut rng, 5, 3);
        let (approx, part) = piecewise_constant_approx(&z, 5).unwrap();
        assert_eq!(approx, z);
        assert_eq!(part.boundaries, vec![0, 1, 2, 3, 4]);

        // uneven steps: greedy would merge the short tail, the m ≥ T rule keeps it exact
        let z = Trajectory::from_rows(&[vec![0.0], vec![1.0], vec![1.1], vec![1.2]]).unwrap();
        assert_eq!(piecewise_constant_approx(&z, 4).unwrap().0, z);

        let z = random_traj(&mut rng, 40, 3);
        let v = total_variation(&z);
        let (approx, part) = piecewise_constant_approx(&z, 4).unwrap();
        let mut brute = 0.0f64;
        for t in 0..40 {
            let d: f64 = (0..3).map(|k| (z.data()[[t, k]] - approx.data()[[t, k]]).powi(2)).sum();
            brute = brute.max(d.sqrt());
        }
        assert!(brute <= v / 3.0 + 1e-12);
        assert!(part.segment_count() <= 4);
        assert!(piecewise_constant_approx(&z, 1).is_err());
    }

    #[test]
    fn blend_examples() {
        let out = blend_overlap(array![[2.0]].view(), array![[4.0]].view()).unwrap();
        assert_eq!(out, array![[3.0]]);
        let a = Array2::from_elem((3, 2), 0.7);
        assert_eq!(blend_overlap(a.view(), a.view()).unwrap(), a);
        let out = blend_overlap(Array2::zeros((3, 1)).view(), Array2::from_elem((3, 1), 4.0).view()).unwrap();
        assert_eq!(out, array![[1.0], [2.0], [3.0]]);
        assert!(matches!(
            blend_overlap(Array2::zeros((3, 1)).view(), Array2::zeros((2, 1)).view()),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn max_deviation_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_traj(&mut rng, 6, 2);
        assert_eq!(max_deviation(&a, &a).unwrap(), 0.0);
        let mut b = a.data().clone();
        b[[2, 0]] += 3.0;
        b[[2, 1]] += 4.0;
        let b = Trajectory::new(b).unwrap();
        assert!((max_deviation(&a, &b).unwrap() - 5.0).abs() < 1e-12);
        let c = random_traj(&mut rng, 6, 2);
        let brute = (0..6)
            .map(|t| ((a.data()[[t, 0]] - c.data()[[t, 0]]).powi(2) + (a.data()[[t, 1]] - c.data()[[t, 1]]).powi(2)).sqrt())
            .fold(0.0, f64::max);
        assert_eq!(max_deviation(&a, &c).unwrap(), brute);
        assert!(max_deviation(&a, &random_traj(&mut rng, 5, 2)).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Trajectory::new(array![[1.0, f64::NAN]]).is_err());
    }
}
