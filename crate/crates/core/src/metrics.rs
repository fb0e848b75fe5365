//! Evaluation metrics: order accuracy, transition smoothness, retrieval in the
//! learned joint space, sample diversity and a latent moment gap.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::alignment::UNIT_TOL;
use crate::error::{Error, Result};
use crate::geometry::StateTrajectory;

fn check_unit_vec(v: ArrayView1<'_, f64>) -> Result<()> {
    let norm = v.dot(&v).sqrt();
    if (norm - 1.0).abs() > UNIT_TOL {
        return Err(Error::NonUnitInput { norm, tol: UNIT_TOL });
    }
    Ok(())
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Clause assigned to every segment by cosine argmax.
pub fn assign_segments(segments: &[Array1<f64>], clauses: &[Array1<f64>]) -> Result<Vec<usize>> {
    for v in segments.iter().chain(clauses) {
        check_unit_vec(v.view())?;
    }
    Ok(segments
        .iter()
        .map(|s| argmax(&clauses.iter().map(|c| s.dot(c)).collect::<Vec<_>>()))
        .collect())
}

/// 1 when segment `n` is assigned clause `n` for every `n`, else 0.
pub fn order_accuracy(segments: &[Array1<f64>], clauses: &[Array1<f64>]) -> Result<f64> {
    if segments.len() != clauses.len() || segments.is_empty() {
        return Err(Error::CountMismatch(format!("{} segments, {} clauses", segments.len(), clauses.len())));
    }
    let assigned = assign_segments(segments, clauses)?;
    Ok(if assigned.iter().enumerate().all(|(n, &a)| a == n) { 1.0 } else { 0.0 })
}

/// Mean order accuracy over prompts.
pub fn order_accuracy_batch(items: &[(Vec<Array1<f64>>, Vec<Array1<f64>>)]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::TooFewSamples(0));
    }
    let mut acc = 0.0;
    for (s, c) in items {
        acc += order_accuracy(s, c)?;
    }
    Ok(acc / items.len() as f64)
}

/// Boundary indices splitting `len` frames into `n` near-equal segments.
pub fn uniform_boundaries(len: usize, n: usize) -> Vec<usize> {
    (1..n).map(|k| (k * len).div_ceil(n).max(1) - 1).collect()
}

/// Half-open frame ranges delimited by boundaries (each boundary is the last frame of its segment).
pub fn segment_ranges(len: usize, boundaries: &[usize]) -> Vec<(usize, usize)> {
    let mut start = 0;
    let mut out = Vec::with_capacity(boundaries.len() + 1);
    for &b in boundaries {
        out.push((start, b + 1));
        start = b + 1;
    }
    out.push((start, len));
    out
}

/// Mean over boundaries `i` of `||s_{i+1} − s_i|| + ||v_{i+1} − v_i||` with
/// backward-difference velocities `v_t = s_t − s_{t−1}`.
pub fn transition_score(states: &StateTrajectory, boundaries: &[usize]) -> Result<f64> {
    let len = states.len();
    if boundaries.is_empty() {
        return Err(Error::CountMismatch("transition score needs at least one boundary".into()));
    }
    let s = states.data();
    let mut total = 0.0;
    for &i in boundaries {
        if i == 0 || i + 1 >= len {
            return Err(Error::BoundaryOutOfRange { index: i, len });
        }
        let gap = &s.row(i + 1) - &s.row(i);
        let v_prev = &s.row(i) - &s.row(i - 1);
        let dv = &gap - &v_prev;
        total += gap.dot(&gap).sqrt() + dv.dot(&dv).sqrt();
    }
    Ok(total / boundaries.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub top_k: BTreeMap<usize, f64>,
    pub mm_dist: f64,
}

/// Rank of the paired text for every program, 0-based. Texts scoring equal to
/// the true one rank ahead of it only if their index is lower.
pub fn retrieval_ranks(programs: &[Array1<f64>], texts: &[Array1<f64>]) -> Result<Vec<usize>> {
    if programs.len() != texts.len() || programs.is_empty() {
        return Err(Error::CountMismatch(format!("{} programs, {} texts", programs.len(), texts.len())));
    }
    for v in programs.iter().chain(texts) {
        check_unit_vec(v.view())?;
    }
    Ok(programs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let scores: Vec<f64> = texts.iter().map(|t| p.dot(t)).collect();
            let own = scores[i];
            scores.iter().enumerate().filter(|&(j, &s)| s > own || (s == own && j < i)).count()
        })
        .collect())
}

pub fn retrieval_metrics(programs: &[Array1<f64>], texts: &[Array1<f64>], ks: &[usize]) -> Result<RetrievalReport> {
    let ranks = retrieval_ranks(programs, texts)?;
    let n = ranks.len() as f64;
    let top_k = ks.iter().map(|&k| (k, ranks.iter().filter(|&&r| r < k).count() as f64 / n)).collect();
    let mm_dist = programs.iter().zip(texts).map(|(p, t)| (p - t).mapv(|x| x * x).sum().sqrt()).sum::<f64>() / n;
    Ok(RetrievalReport { top_k, mm_dist })
}

/// Mean pairwise Euclidean distance between flattened samples.
pub fn diversity(samples: &[Array2<f64>]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples(samples.len()));
    }
    let dim = samples[0].dim();
    if samples.iter().any(|s| s.dim() != dim) {
        return Err(Error::DimensionMismatch("samples differ in shape".into()));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            total += (&samples[i] - &samples[j]).mapv(|x| x * x).sum().sqrt();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// `||μ_a − μ_b|| + ||Σ_a − Σ_b||_F` between two sets of row vectors.
/// A distribution gap in latent space, not comparable to FID.
pub fn moment_distance(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.ncols() != b.ncols() || a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::DimensionMismatch("moment distance needs ≥ 2 rows of equal width".into()));
    }
    let stats = |x: &Array2<f64>| {
        let mu = x.mean_axis(Axis(0)).expect("rows");
        let c = x - &mu;
        let cov = c.t().dot(&c) / (x.nrows() - 1) as f64;
        (mu, cov)
    };
    let (ma, ca) = stats(a);
    let (mb, cb) = stats(b);
    let dm = &ma - &mb;
    let dc = &ca - &cb;
    Ok(dm.dot(&dm).sqrt() + dc.mapv(|x| x * x).sum().sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub order_accuracy: f64,
    pub transition: f64,
    pub action_kl: f64,
    pub recon_mse: f64,
    pub retrieval_top_k: BTreeMap<usize, f64>,
    pub mm_dist: f64,
    /// Latent moment gap between generated and dataset latents.
    pub moment_gap: f64,
    pub diversity: f64,
    pub n_samples: usize,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.order_accuracy, self.transition, self.action_kl, self.recon_mse, self.mm_dist, self.moment_gap, self.diversity]
            .iter()
            .chain(self.retrieval_top_k.values())
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::NonFinite("evaluation report".into()));
        }
        let rates_ok = std::iter::once(&self.order_accuracy).chain(self.retrieval_top_k.values()).all(|r| (0.0..=1.0).contains(r));
        if !rates_ok {
            return Err(Error::NonFinite("rate outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec!["order_accuracy", "transition", "action_kl", "recon_mse"].into_iter().map(String::from).collect::<Vec<_>>();
        cols.extend(self.retrieval_top_k.keys().map(|k| format!("top{k}")));
        cols.extend(["mm_dist", "moment_gap", "diversity", "n_samples"].map(String::from));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut vals = vec![self.order_accuracy, self.transition, self.action_kl, self.recon_mse].iter().map(|v| v.to_string()).collect::<Vec<_>>();
        vals.extend(self.retrieval_top_k.values().map(|v| v.to_string()));
        vals.extend([self.mm_dist, self.moment_gap, self.diversity].iter().map(|v| v.to_string()));
        vals.push(self.n_samples.to_string());
        vals.join(",")
    }
}
