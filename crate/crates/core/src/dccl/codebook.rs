use crate::error::{Error, Result};
use crate::numerics::{axpy, Matrix, Parameter, Rng};

/// `M` codebooks of `K` codewords each, stored as one `(M*K) x D` table
/// whose row `m*K + k` is codeword `k` of book `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookSet {
    m: usize,
    k: usize,
    pub table: Parameter,
}

impl CodebookSet {
    /// Normal initialization with standard deviation `1/sqrt(M)`, so a sum
    /// of `M` codewords has unit variance per dimension.
    pub fn random(m: usize, k: usize, d: usize, rng: &mut Rng) -> Result<Self> {
        Self::check_shape(m, k, d)?;
        let std = 1.0 / (m as f64).sqrt();
        Ok(CodebookSet {
            m,
            k,
            table: Parameter::new("dccl.codebooks", Matrix::random_normal(m * k, d, std, rng)),
        })
    }

    /// Stacks `M` matrices of shape `K x D`.
    pub fn from_books(books: &[Matrix]) -> Result<Self> {
        let first = books
            .first()
            .ok_or_else(|| Error::param("at least one codebook required"))?;
        let (k, d) = first.shape();
        Self::check_shape(books.len(), k, d)?;
        let mut data = Vec::with_capacity(books.len() * k * d);
        for b in books {
            if b.shape() != (k, d) {
                return Err(Error::dim("codebooks must share one shape"));
            }
            data.extend_from_slice(b.data());
        }
        Self::from_table(books.len(), k, Matrix::new(books.len() * k, d, data)?)
    }

    pub fn from_table(m: usize, k: usize, table: Matrix) -> Result<Self> {
        Self::check_shape(m, k, table.cols())?;
        if table.rows() != m * k {
            return Err(Error::dim(format!(
                "codebook table has {} rows, expected {}",
                table.rows(),
                m * k
            )));
        }
        if !table.is_finite() {
            return Err(Error::param("codebooks contain non-finite values"));
        }
        Ok(CodebookSet {
            m,
            k,
            table: Parameter::new("dccl.codebooks", table),
        })
    }

    fn check_shape(m: usize, k: usize, d: usize) -> Result<()> {
        if m < 1 || k < 2 || d < 1 {
            return Err(Error::param(format!(
                "need M >= 1, K >= 2, D >= 1; got M={m} K={k} D={d}"
            )));
        }
        Ok(())
    }

    pub fn num_books(&self) -> usize {
        self.m
    }

    pub fn num_codewords(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.table.value.cols()
    }

    pub fn book(&self, m: usize) -> Matrix {
        let rows: Vec<usize> = (m * self.k..(m + 1) * self.k).collect();
        self.table.value.select_rows(&rows)
    }

    #[inline]
    pub fn codeword(&self, m: usize, k: usize) -> &[f64] {
        self.table.value.row(m * self.k + k)
    }

    /// `Σ_m C_m^{z_m}`.
    pub fn reconstruct(&self, codes: &[usize]) -> Result<Vec<f64>> {
        if codes.len() != self.m {
            return Err(Error::dim(format!(
                "{} codes for {} codebooks",
                codes.len(),
                self.m
            )));
        }
        let mut out = vec![0.0; self.dim()];
        for (m, &z) in codes.iter().enumerate() {
            if z >= self.k {
                return Err(Error::Code(format!("code {z} >= K={} in book {m}", self.k)));
            }
            axpy(1.0, self.codeword(m, z), &mut out);
        }
        Ok(out)
    }

    /// `Σ_m r_m · C_m` for (one-hot or soft) selector rows `r_m`.
    pub fn reconstruct_weighted(&self, selectors: &[Vec<f64>]) -> Result<Vec<f64>> {
        if selectors.len() != self.m || selectors.iter().any(|r| r.len() != self.k) {
            return Err(Error::dim(format!(
                "expected {} selector vectors of length {}",
                self.m, self.k
            )));
        }
        let mut out = vec![0.0; self.dim()];
        for (m, r) in selectors.iter().enumerate() {
            for (k, &w) in r.iter().enumerate() {
                if w != 0.0 {
                    axpy(w, self.codeword(m, k), &mut out);
                }
            }
        }
        Ok(out)
    }

    pub fn round_to_f32(&mut self) {
        self.table.value.round_to_f32();
    }

    /// `M * K * D * 4` bytes on disk.
    pub fn payload_bytes(&self) -> usize {
        self.table.value.len() * 4
    }
}

/// `V x M` integer codes with entries in `[0, K)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeMatrix {
    v: usize,
    m: usize,
    k: usize,
    codes: Vec<u32>,
}

impl CodeMatrix {
    pub fn new(v: usize, m: usize, k: usize, codes: Vec<u32>) -> Result<Self> {
        if k < 2 || m < 1 {
            return Err(Error::param(format!("need M >= 1 and K >= 2, got M={m} K={k}")));
        }
        if codes.len() != v * m {
            return Err(Error::dim(format!(
                "{} codes for a {v}x{m} code matrix",
                codes.len()
            )));
        }
        if let Some(bad) = codes.iter().find(|&&c| c as usize >= k) {
            return Err(Error::Code(format!("code {bad} >= K={k}")));
        }
        Ok(CodeMatrix { v, m, k, codes })
    }

    pub fn num_words(&self) -> usize {
        self.v
    }

    pub fn num_books(&self) -> usize {
        self.m
    }

    pub fn num_codewords(&self) -> usize {
        self.k
    }

    pub fn row(&self, word: usize) -> Vec<usize> {
        self.codes[word * self.m..(word + 1) * self.m]
            .iter()
            .map(|&c| c as usize)
            .collect()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.codes
    }

    /// Reconstructs every word into a `V x D` matrix.
    pub fn reconstruct_all(&self, books: &CodebookSet) -> Result<Matrix> {
        if books.num_books() != self.m || books.num_codewords() != self.k {
            return Err(Error::dim(format!(
                "codes are {}x{} but codebooks are {}x{}",
                self.m,
                self.k,
                books.num_books(),
                books.num_codewords()
            )));
        }
        let mut out = Matrix::zeros(self.v, books.dim());
        for w in 0..self.v {
            let r = books.reconstruct(&self.row(w))?;
            out.row_mut(w).copy_from_slice(&r);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_book_returns_the_codeword() {
        let mut rng = Rng::new(4);
        let books = CodebookSet::random(1, 5, 3, &mut rng).unwrap();
        for k in 0..5 {
            assert_eq!(books.reconstruct(&[k]).unwrap(), books.codeword(0, k));
        }
    }

    #[test]
    fn constant_books_sum() {
        let ones = Matrix::filled(4, 3, 1.0);
        let books = CodebookSet::from_books(&[ones.clone(), ones]).unwrap();
        assert_eq!(books.reconstruct(&[1, 3]).unwrap(), vec![2.0; 3]);
    }

    #[test]
    fn out_of_range_code_is_rejected() {
        let books = CodebookSet::from_books(&[Matrix::zeros(2, 2)]).unwrap();
        assert!(matches!(books.reconstruct(&[2]), Err(Error::Code(_))));
        assert!(matches!(
            CodeMatrix::new(1, 1, 2, vec![2]),
            Err(Error::Code(_))
        ));
    }

    #[test]
    fn one_hot_and_index_forms_agree() {
        let mut rng = Rng::new(11);
        for _ in 0..50 {
            let (m, k, d) = (1 + rng.below(4), 2 + rng.below(7), 1 + rng.below(9));
            let books = CodebookSet::random(m, k, d, &mut rng).unwrap();
            let codes: Vec<usize> = (0..m).map(|_| rng.below(k)).collect();
            let onehots: Vec<Vec<f64>> = codes
                .iter()
                .map(|&c| {
                    let mut v = vec![0.0; k];
                    v[c] = 1.0;
                    v
                })
                .collect();
            let a = books.reconstruct(&codes).unwrap();
            let b = books.reconstruct_weighted(&onehots).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn reconstruction_is_linear_in_codebooks() {
        let mut rng = Rng::new(5);
        let a = CodebookSet::random(3, 4, 6, &mut rng).unwrap();
        let b = CodebookSet::random(3, 4, 6, &mut rng).unwrap();
        let (alpha, beta) = (0.7, -2.5);
        let mut mix = a.table.value.clone();
        mix.scale(alpha);
        mix.add_scaled(beta, &b.table.value).unwrap();
        let mixed = CodebookSet::from_table(3, 4, mix).unwrap();
        let codes = [3, 0, 2];
        let lhs = mixed.reconstruct(&codes).unwrap();
        let ra = a.reconstruct(&codes).unwrap();
        let rb = b.reconstruct(&codes).unwrap();
        for i in 0..6 {
            assert!((lhs[i] - (alpha * ra[i] + beta * rb[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn single_book_is_vector_quantization() {
        let centroids = Matrix::from_rows(&[vec![0.0, 1.0], vec![5.0, -1.0], vec![2.0, 2.0]]).unwrap();
        let books = CodebookSet::from_books(&[centroids.clone()]).unwrap();
        let codes = CodeMatrix::new(4, 1, 3, vec![2, 0, 1, 2]).unwrap();
        let rec = codes.reconstruct_all(&books).unwrap();
        for (w, &c) in [2usize, 0, 1, 2].iter().enumerate() {
            assert_eq!(rec.row(w), centroids.row(c));
        }
    }
}
