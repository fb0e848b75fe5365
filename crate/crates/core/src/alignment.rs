//! Frame-token similarity between compact programs and prompts, and the
//! symmetric contrastive objective built on it.
//!
//! For program `i` (frames `m̃_{i,t}`) and prompt `j` (tokens `ỹ_{j,k}`),
//! all unit vectors:
//!
//! ```text
//! F_ijt = λ_tok · log( (1/K_j) Σ_k exp(m̃_it·ỹ_jk / λ_tok) )
//! w_ijt = softmax_t(F_ijt / λ_frm)
//! R_ij  = Σ_t w_ijt F_ijt
//! ```
//!
//! The contrastive loss averages the program→text and text→program softmax
//! cross-entropies of `γR`.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

pub const UNIT_TOL: f64 = 1e-6;

pub(crate) fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn softmax(xs: &Array1<f64>) -> Array1<f64> {
    let max = xs.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let e = xs.mapv(|x| (x - max).exp());
    let s = e.sum();
    e / s
}

/// Row-normalizes `x`, returning the unit rows and the original norms.
pub fn normalize_rows(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let mut y = x.clone();
    for (mut r, &n) in y.rows_mut().into_iter().zip(norms.iter()) {
        r /= n;
    }
    (y, norms)
}

/// Backward of [`normalize_rows`] given its outputs.
pub fn normalize_rows_backward(unit: &Array2<f64>, norms: &Array1<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    for ((mut d, u), &n) in dx.rows_mut().into_iter().zip(unit.rows()).zip(norms.iter()) {
        let proj = u.dot(&d);
        d.zip_mut_with(&u, |g, &ui| *g = (*g - ui * proj) / n);
    }
    dx
}

fn check_unit(x: ArrayView2<'_, f64>) -> Result<()> {
    for r in x.rows() {
        let norm = r.dot(&r).sqrt();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::NonUnitInput { norm, tol: UNIT_TOL });
        }
    }
    Ok(())
}

/// Intermediate values of the similarity computation kept for the backward pass.
pub struct SimilarityParts {
    pub r: Array2<f64>,
    /// `[i][j]` frame scores `F_ij·`.
    pub frame_scores: Vec<Vec<Array1<f64>>>,
    /// `[i][j]` frame weights `w_ij·`.
    pub frame_weights: Vec<Vec<Array1<f64>>>,
    /// `[i][j]` token attention `softmax_k(m̃·ỹ/λ_tok)`, `[T_i × K_j]`.
    token_weights: Vec<Vec<Array2<f64>>>,
}

pub(crate) fn similarity_forward(
    programs: &[ArrayView2<'_, f64>],
    texts: &[ArrayView2<'_, f64>],
    lambda_tok: f64,
    lambda_frm: f64,
) -> SimilarityParts {
    let b_m = programs.len();
    let b_y = texts.len();
    let mut r = Array2::zeros((b_m, b_y));
    let mut frame_scores = Vec::with_capacity(b_m);
    let mut frame_weights = Vec::with_capacity(b_m);
    let mut token_weights = Vec::with_capacity(b_m);
    for (i, prog) in programs.iter().enumerate() {
        let (mut fs, mut ws, mut ts) = (Vec::with_capacity(b_y), Vec::with_capacity(b_y), Vec::with_capacity(b_y));
        for (j, text) in texts.iter().enumerate() {
            let cos = prog.dot(&text.t());
            let k = text.nrows() as f64;
            let mut f = Array1::zeros(prog.nrows());
            let mut att = Array2::zeros(cos.dim());
            for (t, row) in cos.rows().into_iter().enumerate() {
                let scaled = row.mapv(|s| s / lambda_tok);
                f[t] = lambda_tok * (log_sum_exp(scaled.iter().copied()) - k.ln());
                att.row_mut(t).assign(&softmax(&scaled));
            }
            let w = softmax(&f.mapv(|x| x / lambda_frm));
            r[[i, j]] = w.dot(&f);
            fs.push(f);
            ws.push(w);
            ts.push(att);
        }
        frame_scores.push(fs);
        frame_weights.push(ws);
        token_weights.push(ts);
    }
    SimilarityParts { r, frame_scores, frame_weights, token_weights }
}

/// `B_m × B_y` similarity matrix. Every program frame and token must be a unit vector.
pub fn similarity_matrix(
    programs: &[Array2<f64>],
    texts: &[Array2<f64>],
    lambda_tok: f64,
    lambda_frm: f64,
) -> Result<Array2<f64>> {
    if !(lambda_tok > 0.0) || !(lambda_frm > 0.0) {
        return Err(Error::InvalidSpec("temperatures must be positive".into()));
    }
    for p in programs {
        check_unit(p.view())?;
    }
    for t in texts {
        check_unit(t.view())?;
    }
    let pv: Vec<_> = programs.iter().map(|p| p.view()).collect();
    let tv: Vec<_> = texts.iter().map(|t| t.view()).collect();
    Ok(similarity_forward(&pv, &tv, lambda_tok, lambda_frm).r)
}

/// Gradients of a scalar loss w.r.t. the unit program frames and text tokens given `∂L/∂R`.
pub(crate) fn similarity_backward(
    parts: &SimilarityParts,
    programs: &[ArrayView2<'_, f64>],
    texts: &[ArrayView2<'_, f64>],
    d_r: &Array2<f64>,
    lambda_frm: f64,
) -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
    let mut d_prog: Vec<Array2<f64>> = programs.iter().map(|p| Array2::zeros(p.dim())).collect();
    let mut d_text: Vec<Array2<f64>> = texts.iter().map(|t| Array2::zeros(t.dim())).collect();
    for (i, prog) in programs.iter().enumerate() {
        for (j, text) in texts.iter().enumerate() {
            let g = d_r[[i, j]];
            if g == 0.0 {
                continue;
            }
            let f = &parts.frame_scores[i][j];
            let w = &parts.frame_weights[i][j];
            let r = parts.r[[i, j]];
            // ∂R/∂F_t = w_t (1 + (F_t − R)/λ_frm)
            let df = Array1::from_shape_fn(f.len(), |t| g * w[t] * (1.0 + (f[t] - r) / lambda_frm));
            // ∂F_t/∂s_tk = a_tk
            let mut ds = parts.token_weights[i][j].clone();
            for (mut row, &d) in ds.rows_mut().into_iter().zip(df.iter()) {
                row *= d;
            }
            d_prog[i] += &ds.dot(text);
            d_text[j] += &ds.t().dot(prog);
        }
    }
    (d_prog, d_text)
}

/// Symmetric InfoNCE on `γR`; requires `B ≥ 2`.
pub fn contrastive_loss(r: &Array2<f64>, gamma: f64) -> Result<f64> {
    contrastive_loss_grad(r, gamma).map(|(l, _, _)| l)
}

/// Loss, `∂L/∂R` and `∂L/∂γ`.
pub(crate) fn contrastive_loss_grad(r: &Array2<f64>, gamma: f64) -> Result<(f64, Array2<f64>, f64)> {
    let b = r.nrows();
    if b < 2 || r.ncols() != b {
        return Err(Error::DegenerateBatch(b));
    }
    if !(gamma > 0.0) {
        return Err(Error::RangeError { name: "gamma", value: gamma, lo: 0.0, hi: f64::INFINITY });
    }
    let bf = b as f64;
    let logits = r.mapv(|x| gamma * x);
    let mut loss = 0.0;
    let mut d_logits = Array2::zeros((b, b));
    for i in 0..b {
        let row_lse = log_sum_exp(logits.row(i).iter().copied());
        let col_lse = log_sum_exp(logits.column(i).iter().copied());
        loss += 0.5 * ((row_lse - logits[[i, i]]) + (col_lse - logits[[i, i]])) / bf;
        for j in 0..b {
            d_logits[[i, j]] += 0.5 * (logits[[i, j]] - row_lse).exp() / bf;
            d_logits[[j, i]] += 0.5 * (logits[[j, i]] - col_lse).exp() / bf;
        }
        d_logits[[i, i]] -= 1.0 / bf;
    }
    let d_gamma = (&d_logits * r).sum();
    Ok((loss, d_logits * gamma, d_gamma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::gaussian_matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        normalize_rows(&gaussian_matrix(rng, r, c, 1.0)).0
    }

    #[test]
    fn single_frame_gets_full_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let progs = vec![unit_rows(&mut rng, 1, 4), unit_rows(&mut rng, 1, 4)];
        let texts = vec![unit_rows(&mut rng, 3, 4), unit_rows(&mut rng, 2, 4)];
        let pv: Vec<_> = progs.iter().map(|p| p.view()).collect();
        let tv: Vec<_> = texts.iter().map(|p| p.view()).collect();
        let parts = similarity_forward(&pv, &tv, 0.1, 0.1);
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(parts.frame_weights[i][j][0], 1.0);
                assert_eq!(parts.r[[i, j]], parts.frame_scores[i][j][0]);
            }
        }
    }

    #[test]
    fn identical_vectors_give_unit_similarity() {
        let v = Array2::from_shape_vec((1, 3), vec![0.0, 0.6, 0.8]).unwrap();
        let prog = ndarray::concatenate(Axis(0), &[v.view(), v.view(), v.view()]).unwrap();
        let text = ndarray::concatenate(Axis(0), &[v.view(), v.view()]).unwrap();
        let r = similarity_matrix(&[prog], &[text], 0.07, 0.3).unwrap();
        assert!((r[[0, 0]] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn rejects_non_unit() {
        let p = Array2::from_elem((2, 2), 1.0);
        assert!(matches!(similarity_matrix(&[p.clone()], &[p], 0.1, 0.1), Err(Error::NonUnitInput { .. })));
    }

    #[test]
    fn frame_weights_sum_to_one_and_scores_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let progs: Vec<_> = (0..4).map(|_| unit_rows(&mut rng, 5, 6)).collect();
        let texts: Vec<_> = (0..4).map(|k| unit_rows(&mut rng, k + 1, 6)).collect();
        let pv: Vec<_> = progs.iter().map(|p| p.view()).collect();
        let tv: Vec<_> = texts.iter().map(|p| p.view()).collect();
        let parts = similarity_forward(&pv, &tv, 0.05, 0.2);
        for i in 0..4 {
            for j in 0..4 {
                assert!((parts.frame_weights[i][j].sum() - 1.0).abs() < 1e-12);
                assert!(parts.frame_scores[i][j].iter().all(|&f| (-1.0 - 1e-12..=1.0 + 1e-12).contains(&f)));
            }
        }
    }

    #[test]
    fn duplicating_tokens_leaves_scores_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prog = unit_rows(&mut rng, 4, 5);
        let text = unit_rows(&mut rng, 3, 5);
        let doubled = ndarray::concatenate(Axis(0), &[text.view(), text.view()]).unwrap();
        let a = similarity_forward(&[prog.view()], &[text.view()], 0.1, 0.1);
        let b = similarity_forward(&[prog.view()], &[doubled.view()], 0.1, 0.1);
        for t in 0..4 {
            assert!((a.frame_scores[0][0][t] - b.frame_scores[0][0][t]).abs() < 1e-12);
        }
    }

    #[test]
    fn contrastive_limits() {
        for b in [2usize, 3, 7] {
            let r = Array2::from_elem((b, b), 0.3);
            assert!((contrastive_loss(&r, 2.5).unwrap() - (b as f64).ln()).abs() < 1e-14);
        }
        let r = Array2::eye(4) * 100.0;
        assert!(contrastive_loss(&r, 1.0).unwrap() < 1e-40);
        assert!(matches!(contrastive_loss(&Array2::zeros((1, 1)), 1.0), Err(Error::DegenerateBatch(1))));
    }

    #[test]
    fn contrastive_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = gaussian_matrix(&mut rng, 5, 5, 1.0);
        let perm = [3, 0, 4, 1, 2];
        let rp = Array2::from_shape_fn((5, 5), |(i, j)| r[[perm[i], perm[j]]]);
        let a = contrastive_loss(&r, 3.0).unwrap();
        let b = contrastive_loss(&rp, 3.0).unwrap();
        assert!((a - b).abs() < 1e-13);
    }

    #[test]
    fn contrastive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = gaussian_matrix(&mut rng, 4, 4, 0.5);
        let gamma = rng.gen_range(1.0..5.0);
        let (_, dr, dg) = contrastive_loss_grad(&r, gamma).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..4 {
                let mut up = r.clone();
                up[[i, j]] += h;
                let mut dn = r.clone();
                dn[[i, j]] -= h;
                let fd = (contrastive_loss(&up, gamma).unwrap() - contrastive_loss(&dn, gamma).unwrap()) / (2.0 * h);
                assert!((fd - dr[[i, j]]).abs() < 1e-8);
            }
        }
        let fd = (contrastive_loss(&r, gamma + h).unwrap() - contrastive_loss(&r, gamma - h).unwrap()) / (2.0 * h);
        assert!((fd - dg).abs() < 1e-8);
    }

    #[test]
    fn similarity_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let progs: Vec<_> = (0..3).map(|_| unit_rows(&mut rng, 3, 4)).collect();
        let texts: Vec<_> = (0..3).map(|k| unit_rows(&mut rng, k + 2, 4)).collect();
        let probe = gaussian_matrix(&mut rng, 3, 3, 1.0);
        let (lt, lf) = (0.2, 0.3);
        let loss = |ps: &[Array2<f64>], ts: &[Array2<f64>]| {
            let pv: Vec<_> = ps.iter().map(|p| p.view()).collect();
            let tv: Vec<_> = ts.iter().map(|p| p.view()).collect();
            (&similarity_forward(&pv, &tv, lt, lf).r * &probe).sum()
        };
        let pv: Vec<_> = progs.iter().map(|p| p.view()).collect();
        let tv: Vec<_> = texts.iter().map(|p| p.view()).collect();
        let parts = similarity_forward(&pv, &tv, lt, lf);
        let (dp, dt) = similarity_backward(&parts, &pv, &tv, &probe, lf);
        let h = 1e-6;
        for i in 0..3 {
            for idx in 0..progs[i].len() {
                let (r, c) = (idx / 4, idx % 4);
                let mut up = progs.clone();
                up[i][[r, c]] += h;
                let mut dn = progs.clone();
                dn[i][[r, c]] -= h;
                let fd = (loss(&up, &texts) - loss(&dn, &texts)) / (2.0 * h);
                assert!((fd - dp[i][[r, c]]).abs() < 1e-7, "{fd} vs {}", dp[i][[r, c]]);
            }
            for idx in 0..texts[i].len() {
                let (r, c) = (idx / 4, idx % 4);
                let mut up = texts.clone();
                up[i][[r, c]] += h;
                let mut dn = texts.clone();
                dn[i][[r, c]] -= h;
                let fd = (loss(&progs, &up) - loss(&progs, &dn)) / (2.0 * h);
                assert!((fd - dt[i][[r, c]]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn normalization_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = gaussian_matrix(&mut rng, 3, 4, 1.0);
        let probe = gaussian_matrix(&mut rng, 3, 4, 1.0);
        let (u, n) = normalize_rows(&x);
        let dx = normalize_rows_backward(&u, &n, &probe);
        let h = 1e-6;
        for idx in 0..12 {
            let (r, c) = (idx / 4, idx % 4);
            let mut up = x.clone();
            up[[r, c]] += h;
            let mut dn = x.clone();
            dn[[r, c]] -= h;
            let fd = ((&normalize_rows(&up).0 * &probe).sum() - (&normalize_rows(&dn).0 * &probe).sum()) / (2.0 * h);
            assert!((fd - dx[[r, c]]).abs() < 1e-8);
        }
    }
}
