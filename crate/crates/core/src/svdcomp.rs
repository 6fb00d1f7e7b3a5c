//! Low-rank SVD baselines: truncated post-processing of a pretrained table
//! and the factorized (small embedding + projection) layer used for
//! task-aware fine-tuning.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};

use crate::binio;
use crate::embio::{EmbeddingMatrix, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix};

const SVDF_MAGIC: &[u8; 4] = b"SVDF";
const MAX_SWEEPS: usize = 60;

/// Thin singular value decomposition `A = U diag(S) Vt` with `S` descending.
#[derive(Debug, Clone, PartialEq)]
pub struct Svd {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub vt: Matrix,
}

/// Rank-`r` truncation of an embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactors {
    /// `V x r`, orthonormal columns.
    pub u: Matrix,
    /// `r` non-negative values, descending.
    pub s: Vec<f64>,
    /// `r x D`, orthonormal rows.
    pub vt: Matrix,
    pub rank: usize,
    pub fraction: f64,
}

impl LowRankFactors {
    pub fn num_rows(&self) -> usize {
        self.u.rows()
    }

    pub fn dim(&self) -> usize {
        self.vt.cols()
    }

    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        scale_columns(&mut us, &self.s);
        us.matmul(&self.vt).expect("factor shapes agree")
    }

    /// `4 * (V*r + r + r*D)`.
    pub fn storage_bytes(&self) -> usize {
        4 * (self.num_rows() * self.rank + self.rank + self.rank * self.dim())
    }
}

/// Trainable factorized lookup: row `i` of `small` times `projection`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedLayer {
    /// `V x r`
    pub small: Matrix,
    /// `r x D`
    pub projection: Matrix,
}

impl FactorizedLayer {
    pub fn rank(&self) -> usize {
        self.projection.rows()
    }

    pub fn parameter_count(&self) -> usize {
        self.small.len() + self.projection.len()
    }

    pub fn compose(&self) -> Matrix {
        self.small.matmul(&self.projection).expect("factor shapes agree")
    }

    pub fn lookup(&self, id: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.projection.cols()];
        self.projection.matvec_t_acc(self.small.row(id), &mut out);
        out
    }
}

fn scale_columns(m: &mut Matrix, s: &[f64]) {
    let cols = m.cols();
    for r in 0..m.rows() {
        for (x, sv) in m.row_mut(r).iter_mut().zip(s) {
            *x *= sv;
        }
    }
    debug_assert_eq!(cols, s.len());
}

/// One-sided Jacobi SVD of a tall matrix (`rows >= cols`).
fn jacobi_tall(a: &Matrix) -> Svd {
    let (m, n) = a.shape();
    // column-major working copy so that column rotations touch contiguous memory
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.get(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let eps = 1e-15;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
                let (lo, hi) = v.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let scale = norms.iter().cloned().fold(0.0, f64::max);
    let tiny = scale * 1e-13 * (m.max(n) as f64);
    let mut u = Matrix::zeros(m, n);
    let mut vt = Matrix::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (k, &j) in order.iter().enumerate() {
        let sigma = if norms[j] > tiny { norms[j] } else { 0.0 };
        let col = if sigma > 0.0 {
            cols[j].iter().map(|x| x / sigma).collect()
        } else {
            complete_basis(&basis, m)
        };
        for i in 0..m {
            u.set(i, k, col[i]);
        }
        basis.push(col);
        s.push(sigma);
        vt.row_mut(k).copy_from_slice(&v[j]);
    }
    Svd { u, s, vt }
}

fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (xa, yb) = (*a, *b);
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

/// A unit vector orthogonal to `basis`, found by Gram-Schmidt over the
/// standard basis.
fn complete_basis(basis: &[Vec<f64>], m: usize) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for e in 0..m {
        let mut cand = vec![0.0; m];
        cand[e] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let proj = dot(&cand, b);
                for (c, bv) in cand.iter_mut().zip(b) {
                    *c -= proj * bv;
                }
            }
        }
        let norm = dot(&cand, &cand).sqrt();
        if norm > 0.5 {
            return cand.into_iter().map(|x| x / norm).collect();
        }
        if best.as_ref().is_none_or(|(n, _)| norm > *n) {
            best = Some((norm, cand));
        }
    }
    let (norm, cand) = best.expect("m >= 1");
    cand.into_iter().map(|x| x / norm).collect()
}

/// Thin SVD of any matrix: `U` is `rows x k`, `Vt` is `k x cols`, with
/// `k = min(rows, cols)`.
pub fn svd(a: &Matrix) -> Result<Svd> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::dim("SVD of an empty matrix"));
    }
    if !a.is_finite() {
        return Err(Error::param("SVD input contains non-finite values"));
    }
    if a.rows() >= a.cols() {
        Ok(jacobi_tall(a))
    } else {
        let t = jacobi_tall(&a.transpose());
        Ok(Svd {
            u: t.vt.transpose(),
            s: t.s,
            vt: t.u.transpose(),
        })
    }
}

/// `round(n * min(V, D))`, at least 1.
pub fn retained_rank(n: f64, v: usize, d: usize) -> usize {
    ((n * v.min(d) as f64).round() as usize).clamp(1, v.min(d))
}

pub fn svd_truncate(emb: &EmbeddingMatrix, n: f64) -> Result<LowRankFactors> {
    truncate_matrix(&emb.weights, n)
}

pub fn truncate_matrix(a: &Matrix, n: f64) -> Result<LowRankFactors> {
    if !(n > 0.0 && n <= 1.0) {
        return Err(Error::param(format!("retained fraction must be in (0, 1], got {n}")));
    }
    let full = svd(a)?;
    let r = retained_rank(n, a.rows(), a.cols());
    let k = full.s.len();
    let u_cols: Vec<usize> = (0..r).collect();
    let mut u = Matrix::zeros(a.rows(), r);
    for i in 0..a.rows() {
        for &c in &u_cols {
            u.set(i, c, full.u.get(i, c));
        }
    }
    let vt = full.vt.select_rows(&u_cols);
    debug_assert!(r <= k);
    Ok(LowRankFactors {
        u,
        s: full.s[..r].to_vec(),
        vt,
        rank: r,
        fraction: n,
    })
}

pub fn svd_spectrum(emb: &EmbeddingMatrix) -> Result<Vec<f64>> {
    Ok(svd(&emb.weights)?.s)
}

pub fn make_factorized_layer(factors: &LowRankFactors) -> FactorizedLayer {
    let mut small = factors.u.clone();
    scale_columns(&mut small, &factors.s);
    FactorizedLayer {
        small,
        projection: factors.vt.clone(),
    }
}

/// ```text
/// "SVDF" | V u64 | D u64 | r u64 | n f64 | U f32[V*r] | S f32[r] | Vt f32[r*D] | vocab
/// ```
pub fn factors_to_bytes(vocab: &Vocabulary, f: &LowRankFactors) -> Result<Vec<u8>> {
    if vocab.len() != f.num_rows() {
        return Err(Error::dim(format!(
            "{} factor rows for a vocabulary of {}",
            f.num_rows(),
            vocab.len()
        )));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(SVDF_MAGIC);
    buf.write_u64::<LittleEndian>(f.num_rows() as u64)?;
    buf.write_u64::<LittleEndian>(f.dim() as u64)?;
    buf.write_u64::<LittleEndian>(f.rank as u64)?;
    buf.write_f64::<LittleEndian>(f.fraction)?;
    binio::write_f32s(&mut buf, &f.u)?;
    binio::write_f32s(&mut buf, &Matrix::new(1, f.rank, f.s.clone())?)?;
    binio::write_f32s(&mut buf, &f.vt)?;
    vocab.write_to(&mut buf)?;
    Ok(buf)
}

pub fn factors_from_bytes(bytes: &[u8]) -> Result<(Vocabulary, LowRankFactors)> {
    let mut r = Cursor::new(bytes);
    binio::expect_magic(&mut r, SVDF_MAGIC)?;
    let v = binio::read_u64(&mut r)? as usize;
    let d = binio::read_u64(&mut r)? as usize;
    let rank = binio::read_u64(&mut r)? as usize;
    let fraction = binio::read_f64(&mut r)?;
    let need = v
        .saturating_mul(rank)
        .saturating_add(rank)
        .saturating_add(rank.saturating_mul(d))
        .saturating_mul(4);
    if need > bytes.len() {
        return Err(Error::format("SVDF header larger than file"));
    }
    let u = binio::read_f32s(&mut r, v, rank)?;
    let s = binio::read_f32s(&mut r, 1, rank)?.into_data();
    let vt = binio::read_f32s(&mut r, rank, d)?;
    let vocab = Vocabulary::read_from(&mut r, v)?;
    if r.position() as usize != bytes.len() {
        return Err(Error::format("trailing bytes after SVDF vocabulary"));
    }
    Ok((vocab, LowRankFactors { u, s, vt, rank, fraction }))
}

pub fn save_factors(path: &Path, vocab: &Vocabulary, f: &LowRankFactors) -> Result<()> {
    binio::write_atomic(path, &factors_to_bytes(vocab, f)?)
}

pub fn load_factors(path: &Path) -> Result<(Vocabulary, LowRankFactors)> {
    factors_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        Matrix::random_normal(rows, cols, 1.0, &mut Rng::new(seed))
    }

    fn emb(w: Matrix) -> EmbeddingMatrix {
        let vocab = Vocabulary::new((1..w.rows()).map(|i| format!("w{i}"))).unwrap();
        EmbeddingMatrix::new(vocab, w).unwrap()
    }

    fn orthonormality_error(rows_are_vectors: &Matrix) -> f64 {
        let g = rows_are_vectors.matmul(&rows_are_vectors.transpose()).unwrap();
        g.max_abs_diff(&Matrix::identity(g.rows()))
    }

    fn nalgebra_singular_values(a: &Matrix) -> Vec<f64> {
        let m = nalgebra::DMatrix::from_row_slice(a.rows(), a.cols(), a.data());
        let mut s: Vec<f64> = m.singular_values().iter().cloned().collect();
        s.sort_by(|x, y| y.total_cmp(x));
        s
    }

    #[test]
    fn identity_and_diagonal_spectra() {
        assert_eq!(svd_spectrum(&emb(Matrix::identity(3))).unwrap(), vec![1.0, 1.0, 1.0]);
        let d = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 3.0, 0.0], vec![0.0, 0.0, 2.0]]).unwrap();
        assert_eq!(svd_spectrum(&emb(d)).unwrap(), vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn rank_one_is_exact_for_any_fraction() {
        let a: Vec<f64> = (0..12).map(|i| i as f64 - 3.5).collect();
        let b = [0.5, -1.0, 2.0, 0.25];
        let mut m = Matrix::zeros(12, 4);
        m.add_outer(&a, &b);
        for n in [0.01, 0.3, 1.0] {
            let f = truncate_matrix(&m, n).unwrap();
            assert!(f.reconstruct().max_abs_diff(&m) <= 1e-9);
        }
    }

    #[test]
    fn fraction_out_of_range() {
        let m = random(4, 3, 0);
        for n in [0.0, -0.5, 1.5, f64::NAN] {
            assert!(matches!(truncate_matrix(&m, n), Err(Error::Parameter(_))));
        }
    }

    #[test]
    fn rank_rounding() {
        assert_eq!(retained_rank(0.5, 2000, 300), 150);
        assert_eq!(retained_rank(0.001, 2000, 300), 1);
        assert_eq!(retained_rank(1.0, 10, 20), 10);
        assert_eq!(retained_rank(0.25, 10, 6), 2);
    }

    #[test]
    fn zero_singular_values_still_give_orthonormal_u() {
        let mut m = Matrix::zeros(6, 4);
        m.set(0, 0, 2.0);
        m.set(1, 1, 1.0);
        let s = svd(&m).unwrap();
        assert_eq!(s.s, vec![2.0, 1.0, 0.0, 0.0]);
        assert!(orthonormality_error(&s.u.transpose()) < 1e-12);
        assert!(orthonormality_error(&s.vt) < 1e-12);
    }

    #[test]
    fn matches_nalgebra_oracle() {
        for (r, c, seed) in [(30, 8, 1), (8, 30, 2), (50, 50, 3), (1, 5, 4)] {
            let m = random(r, c, seed);
            let ours = svd(&m).unwrap().s;
            let theirs = nalgebra_singular_values(&m);
            for (a, b) in ours.iter().zip(&theirs) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn factorized_layer_composes_to_truncation() {
        let m = random(40, 10, 9);
        let f = truncate_matrix(&m, 0.3).unwrap();
        let layer = make_factorized_layer(&f);
        assert!(layer.compose().max_abs_diff(&f.reconstruct()) <= 1e-9);
        assert_eq!(layer.parameter_count(), 40 * 3 + 3 * 10);
        let direct = layer.compose();
        for (a, b) in layer.lookup(7).iter().zip(direct.row(7)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn storage_accounting() {
        let f = truncate_matrix(&random(20, 6, 1), 0.5).unwrap();
        assert_eq!(f.rank, 3);
        assert_eq!(f.storage_bytes(), 4 * (20 * 3 + 3 + 3 * 6));
    }

    #[test]
    fn svdf_round_trip() {
        let e = emb(random(15, 5, 2));
        let mut f = svd_truncate(&e, 0.6).unwrap();
        f.u.round_to_f32();
        f.vt.round_to_f32();
        f.s.iter_mut().for_each(|x| *x = *x as f32 as f64);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.svdf");
        save_factors(&path, &e.vocab, &f).unwrap();
        let (vocab, back) = load_factors(&path).unwrap();
        assert_eq!(vocab, e.vocab);
        assert_eq!(back, f);
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        assert!(matches!(factors_from_bytes(&bytes), Err(Error::Format(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn eckart_young_and_orthogonality(rows in 1usize..25, cols in 1usize..25, n in 0.01f64..1.0, seed in 0u64..1000) {
            let m = random(rows, cols, seed);
            let f = truncate_matrix(&m, n).unwrap();
            let full = svd(&m).unwrap();
            let mut err = f.reconstruct();
            err.add_scaled(-1.0, &m).unwrap();
            let discarded: f64 = full.s[f.rank..].iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((err.frobenius_norm() - discarded).abs() <= 1e-9);
            prop_assert!(orthonormality_error(&f.u.transpose()) <= 1e-8);
            prop_assert!(orthonormality_error(&f.vt) <= 1e-8);
            prop_assert!(f.s.windows(2).all(|w| w[0] >= w[1]) && f.s.iter().all(|&x| x >= 0.0));
            let sq: f64 = full.s.iter().map(|x| x * x).sum();
            prop_assert!((sq - m.frobenius_norm().powi(2)).abs() <= 1e-9 * sq.max(1.0));
        }

        #[test]
        fn full_rank_is_exact(rows in 1usize..20, cols in 1usize..20, seed in 0u64..1000) {
            let m = random(rows, cols, seed);
            prop_assert!(truncate_matrix(&m, 1.0).unwrap().reconstruct().max_abs_diff(&m) <= 1e-9);
        }

        #[test]
        fn error_monotone_in_fraction(a in 0.01f64..1.0, b in 0.01f64..1.0, seed in 0u64..1000) {
            let m = random(12, 9, seed);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let e = |n| {
                let mut d = truncate_matrix(&m, n).unwrap().reconstruct();
                d.add_scaled(-1.0, &m).unwrap();
                d.frobenius_norm()
            };
            prop_assert!(e(hi) <= e(lo) + 1e-12);
        }
    }
}
