use crate::dccl::{CodeMatrix, CodebookSet};
use crate::error::{Error, Result};
use crate::numerics::{
    argmax, gumbel_softmax_hard, softmax_backward, squared_distance, HardSample, HasParameters,
    Matrix, Parameter, Relaxation, Rng, SampleMode,
};

/// Sampling settings for one pass through the compression layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodeOptions {
    pub tau: f64,
    pub mode: SampleMode,
    pub relaxation: Relaxation,
}

impl EncodeOptions {
    pub fn deterministic() -> Self {
        EncodeOptions {
            tau: 1.0,
            mode: SampleMode::Deterministic,
            relaxation: Relaxation::StraightThrough,
        }
    }

    pub fn training(tau: f64) -> Self {
        EncodeOptions {
            tau,
            mode: SampleMode::Sample,
            relaxation: Relaxation::StraightThrough,
        }
    }
}

impl Default for EncodeOptions {
    fn default() -> Self {
        Self::deterministic()
    }
}

/// Two projections `D -> H -> M*K` with a tanh in between; each block of
/// `K` outputs is the logit vector of one codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct DcclEncoder {
    m: usize,
    k: usize,
    pub w1: Parameter,
    pub b1: Parameter,
    pub w2: Parameter,
    pub b2: Parameter,
}

/// Forward state of one encoded word, kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub hidden: Vec<f64>,
    pub samples: Vec<HardSample>,
}

impl Encoding {
    pub fn codes(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.index).collect()
    }

    pub fn one_hots(&self) -> Vec<Vec<f64>> {
        self.samples.iter().map(HardSample::one_hot).collect()
    }
}

fn glorot(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::random_uniform(rows, cols, bound, rng)
}

impl DcclEncoder {
    /// Default hidden width `M*K/2`.
    pub fn default_hidden(m: usize, k: usize) -> usize {
        (m * k / 2).max(1)
    }

    pub fn new(d: usize, m: usize, k: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        if d == 0 || m == 0 || k < 2 || hidden == 0 {
            return Err(Error::param(format!(
                "invalid encoder shape D={d} M={m} K={k} H={hidden}"
            )));
        }
        Ok(DcclEncoder {
            m,
            k,
            w1: Parameter::new("dccl.w1", glorot(hidden, d, rng)),
            b1: Parameter::new("dccl.b1", Matrix::zeros(1, hidden)),
            w2: Parameter::new("dccl.w2", glorot(m * k, hidden, rng)),
            b2: Parameter::new("dccl.b2", Matrix::zeros(1, m * k)),
        })
    }

    /// Rebuilds an encoder from stored tensors, checking their shapes.
    pub fn from_parts(m: usize, k: usize, w1: Matrix, b1: Matrix, w2: Matrix, b2: Matrix) -> Result<Self> {
        let h = w1.rows();
        if b1.shape() != (1, h) || w2.shape() != (m * k, h) || b2.shape() != (1, m * k) {
            return Err(Error::dim("inconsistent encoder tensor shapes"));
        }
        Ok(DcclEncoder {
            m,
            k,
            w1: Parameter::new("dccl.w1", w1),
            b1: Parameter::new("dccl.b1", b1),
            w2: Parameter::new("dccl.w2", w2),
            b2: Parameter::new("dccl.b2", b2),
        })
    }

    pub fn num_books(&self) -> usize {
        self.m
    }

    pub fn num_codewords(&self) -> usize {
        self.k
    }

    pub fn hidden(&self) -> usize {
        self.w1.value.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.w1.value.cols()
    }

    /// Returns `(tanh(W1 w + b1), W2 h + b2)`.
    pub fn logits(&self, w: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut hidden = self.w1.value.matvec(w);
        for (h, b) in hidden.iter_mut().zip(self.b1.value.data()) {
            *h = (*h + b).tanh();
        }
        let mut logits = self.w2.value.matvec(&hidden);
        for (l, b) in logits.iter_mut().zip(self.b2.value.data()) {
            *l += b;
        }
        (hidden, logits)
    }

    /// `r_m = σ_G(f_L(w))` for every codebook.
    pub fn encode_word(
        &self,
        w: &[f64],
        tau: f64,
        rng: &mut Rng,
        mode: SampleMode,
    ) -> Result<Encoding> {
        if w.len() != self.input_dim() {
            return Err(Error::dim(format!(
                "encoder expects {} inputs, got {}",
                self.input_dim(),
                w.len()
            )));
        }
        let (hidden, logits) = self.logits(w);
        let samples = logits
            .chunks_exact(self.k)
            .map(|block| gumbel_softmax_hard(block, tau, rng, mode))
            .collect::<Result<Vec<_>>>()?;
        Ok(Encoding { hidden, samples })
    }

    /// Inference-time codes: argmax of each logit block, no noise.
    pub fn codes_for(&self, w: &[f64]) -> Vec<usize> {
        let (_, logits) = self.logits(w);
        logits.chunks_exact(self.k).map(argmax).collect()
    }

    /// Accumulates parameter gradients given the gradient with respect to
    /// the logits.
    fn backward_logits(&mut self, w: &[f64], hidden: &[f64], d_logits: &[f64]) {
        self.w2.grad.add_outer(d_logits, hidden);
        for (g, d) in self.b2.grad.data_mut().iter_mut().zip(d_logits) {
            *g += d;
        }
        let mut d_hidden = vec![0.0; hidden.len()];
        self.w2.value.matvec_t_acc(d_logits, &mut d_hidden);
        for (dh, h) in d_hidden.iter_mut().zip(hidden) {
            *dh *= 1.0 - h * h;
        }
        self.w1.grad.add_outer(&d_hidden, w);
        for (g, d) in self.b1.grad.data_mut().iter_mut().zip(&d_hidden) {
            *g += d;
        }
    }
}

/// Encoder plus codebooks: the compression layers.
#[derive(Debug, Clone, PartialEq)]
pub struct DcclModel {
    pub encoder: DcclEncoder,
    pub books: CodebookSet,
}

impl HasParameters for DcclModel {
    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![
            &mut self.encoder.w1,
            &mut self.encoder.b1,
            &mut self.encoder.w2,
            &mut self.encoder.b2,
            &mut self.books.table,
        ]
    }
}

impl DcclModel {
    pub fn new(d: usize, m: usize, k: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        let encoder = DcclEncoder::new(d, m, k, hidden, rng)?;
        let books = CodebookSet::random(m, k, d, rng)?;
        Ok(DcclModel { encoder, books })
    }

    pub fn dim(&self) -> usize {
        self.books.dim()
    }

    /// Reconstruction from an encoding: hard codewords under
    /// straight-through, soft mixtures otherwise.
    pub fn decode(&self, enc: &Encoding, relaxation: Relaxation) -> Vec<f64> {
        let out = match relaxation {
            Relaxation::StraightThrough => self.books.reconstruct(&enc.codes()),
            Relaxation::Soft => self
                .books
                .reconstruct_weighted(&enc.samples.iter().map(|s| s.soft.clone()).collect::<Vec<_>>()),
        };
        out.expect("encoding shaped by this model")
    }

    pub fn forward(
        &self,
        w: &[f64],
        opts: &EncodeOptions,
        rng: &mut Rng,
    ) -> Result<(Vec<f64>, Encoding)> {
        let enc = self.encoder.encode_word(w, opts.tau, rng, opts.mode)?;
        Ok((self.decode(&enc, opts.relaxation), enc))
    }

    /// Accumulates gradients of a loss whose gradient with respect to the
    /// reconstruction is `d_out`.
    pub fn backward(&mut self, w: &[f64], enc: &Encoding, d_out: &[f64], opts: &EncodeOptions) {
        let k = self.books.num_codewords();
        let d = self.dim();
        let mut d_logits = vec![0.0; self.books.num_books() * k];
        let mut d_sel = vec![0.0; k];
        for (m, sample) in enc.samples.iter().enumerate() {
            for (kk, g) in d_sel.iter_mut().enumerate() {
                *g = crate::numerics::dot(self.books.codeword(m, kk), d_out);
            }
            let table = self.books.table.grad.data_mut();
            match opts.relaxation {
                Relaxation::StraightThrough => {
                    let row = m * k + sample.index;
                    crate::numerics::axpy(1.0, d_out, &mut table[row * d..(row + 1) * d]);
                }
                Relaxation::Soft => {
                    for (kk, &y) in sample.soft.iter().enumerate() {
                        let row = m * k + kk;
                        crate::numerics::axpy(y, d_out, &mut table[row * d..(row + 1) * d]);
                    }
                }
            }
            softmax_backward(&sample.soft, &d_sel, opts.tau, &mut d_logits[m * k..(m + 1) * k]);
        }
        self.encoder.backward_logits(w, &enc.hidden, &d_logits);
    }

    /// Mean squared reconstruction error over `word_ids` (duplicates
    /// counted); gradients are accumulated, scaled by `weight`, when
    /// `with_grad` is set.
    pub fn reconstruction_loss_with_grad(
        &mut self,
        weights: &Matrix,
        word_ids: &[usize],
        opts: &EncodeOptions,
        rng: &mut Rng,
        weight: f64,
        with_grad: bool,
    ) -> Result<f64> {
        if word_ids.is_empty() {
            return Err(Error::param("reconstruction loss over an empty word list"));
        }
        let n = word_ids.len() as f64;
        let mut total = 0.0;
        for &id in word_ids {
            let w = weights.row(id);
            let (rec, enc) = self.forward(w, opts, rng)?;
            total += squared_distance(w, &rec);
            if with_grad {
                let d_out: Vec<f64> = rec
                    .iter()
                    .zip(w)
                    .map(|(r, x)| weight * 2.0 * (r - x) / n)
                    .collect();
                self.backward(w, &enc, &d_out, opts);
            }
        }
        Ok(total / n)
    }

    pub fn round_to_f32(&mut self) {
        for p in self.parameters_mut() {
            p.value.round_to_f32();
        }
    }
}

/// `(1/N) Σ_i ||w_i - w'_i||²` over the listed words.
pub fn reconstruction_loss(
    weights: &Matrix,
    model: &DcclModel,
    word_ids: &[usize],
    opts: &EncodeOptions,
    rng: &mut Rng,
) -> Result<f64> {
    if word_ids.is_empty() {
        return Err(Error::param("reconstruction loss over an empty word list"));
    }
    let mut total = 0.0;
    for &id in word_ids {
        let w = weights.row(id);
        let (rec, _) = model.forward(w, opts, rng)?;
        total += squared_distance(w, &rec);
    }
    Ok(total / word_ids.len() as f64)
}

/// Deterministic codes for every row of `weights`.
pub fn compress_all(encoder: &DcclEncoder, weights: &Matrix) -> Result<CodeMatrix> {
    if weights.cols() != encoder.input_dim() {
        return Err(Error::dim(format!(
            "encoder expects dimension {}, embeddings have {}",
            encoder.input_dim(),
            weights.cols()
        )));
    }
    let mut codes = Vec::with_capacity(weights.rows() * encoder.num_books());
    for r in 0..weights.rows() {
        codes.extend(encoder.codes_for(weights.row(r)).into_iter().map(|c| c as u32));
    }
    CodeMatrix::new(weights.rows(), encoder.num_books(), encoder.num_codewords(), codes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::testing::{st_reference, st_surrogate};

    fn small_model(seed: u64, d: usize, m: usize, k: usize) -> DcclModel {
        let mut rng = Rng::new(seed);
        DcclModel::new(d, m, k, DcclEncoder::default_hidden(m, k), &mut rng).unwrap()
    }

    #[test]
    fn zero_encoder_picks_first_codeword() {
        let mut model = small_model(1, 4, 3, 5);
        for p in model.parameters_mut() {
            p.value.fill(0.0);
        }
        let mut rng = Rng::new(0);
        let enc = model
            .encoder
            .encode_word(&[0.3, -1.0, 2.0, 0.5], 1.0, &mut rng, SampleMode::Deterministic)
            .unwrap();
        assert_eq!(enc.codes(), vec![0, 0, 0]);
    }

    #[test]
    fn rigged_bias_selects_codes() {
        let mut model = small_model(2, 4, 3, 4);
        model.encoder.w2.value.fill(0.0);
        model.encoder.b2.value.fill(0.0);
        for m in 0..3 {
            model.encoder.b2.value.set(0, m * 4 + m, 10.0);
        }
        let mut rng = Rng::new(0);
        let enc = model
            .encoder
            .encode_word(&[1.0, 2.0, 3.0, 4.0], 1.0, &mut rng, SampleMode::Deterministic)
            .unwrap();
        assert_eq!(enc.codes(), vec![0, 1, 2]);
    }

    #[test]
    fn deterministic_codes_are_block_argmax_of_logits() {
        let model = small_model(3, 6, 4, 8);
        let mut rng = Rng::new(9);
        for _ in 0..100 {
            let w: Vec<f64> = (0..6).map(|_| rng.normal() * 2.0).collect();
            let (_, logits) = model.encoder.logits(&w);
            let oracle: Vec<usize> = (0..4)
                .map(|m| {
                    let block = &logits[m * 8..(m + 1) * 8];
                    let mut best = 0;
                    for i in 0..8 {
                        if block[i] > block[best] {
                            best = i;
                        }
                    }
                    best
                })
                .collect();
            let enc = model
                .encoder
                .encode_word(&w, 1.0, &mut rng, SampleMode::Deterministic)
                .unwrap();
            assert_eq!(enc.codes(), oracle);
            assert_eq!(model.encoder.codes_for(&w), oracle);
        }
    }

    #[test]
    fn loss_hand_arithmetic_and_empty_ids() {
        // M=1, K=2 codebook with a zero row; rig the encoder to pick it.
        let mut model = small_model(4, 2, 1, 2);
        model.books.table.value.fill(0.0);
        let w = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let opts = EncodeOptions::deterministic();
        let mut rng = Rng::new(0);
        let loss = reconstruction_loss(&w, &model, &[0], &opts, &mut rng).unwrap();
        assert!((loss - 1.0).abs() < 1e-15);
        assert!(matches!(
            reconstruction_loss(&w, &model, &[], &opts, &mut rng),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn perfect_reconstruction_has_zero_loss() {
        let mut model = small_model(5, 3, 1, 2);
        let w = Matrix::from_rows(&[vec![0.5, -0.5, 2.0]]).unwrap();
        let code = model.encoder.codes_for(w.row(0))[0];
        model.books.table.value.row_mut(code).copy_from_slice(w.row(0));
        let mut rng = Rng::new(0);
        let loss =
            reconstruction_loss(&w, &model, &[0, 0], &EncodeOptions::deterministic(), &mut rng).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn loss_matches_naive_loop() {
        let model = small_model(6, 5, 2, 4);
        let mut rng = Rng::new(1);
        let w = Matrix::random_normal(12, 5, 1.0, &mut rng);
        let ids = [0usize, 3, 3, 11, 7, 0];
        let mut naive = 0.0;
        for &id in &ids {
            let codes = model.encoder.codes_for(w.row(id));
            let rec = model.books.reconstruct(&codes).unwrap();
            for (a, b) in w.row(id).iter().zip(&rec) {
                naive += (a - b) * (a - b);
            }
        }
        naive /= ids.len() as f64;
        let got = reconstruction_loss(&w, &model, &ids, &EncodeOptions::deterministic(), &mut rng)
            .unwrap();
        assert!((got - naive).abs() <= 1e-12);
    }

    #[test]
    fn compress_all_is_batch_independent() {
        let model = small_model(7, 4, 2, 4);
        let mut rng = Rng::new(2);
        let w = Matrix::random_normal(10, 4, 1.0, &mut rng);
        let all = compress_all(&model.encoder, &w).unwrap();
        let first = compress_all(&model.encoder, &w.select_rows(&[0, 1, 2, 3, 4])).unwrap();
        let rest = compress_all(&model.encoder, &w.select_rows(&[5, 6, 7, 8, 9])).unwrap();
        let mut joined = first.as_slice().to_vec();
        joined.extend_from_slice(rest.as_slice());
        assert_eq!(all.as_slice(), joined.as_slice());

        let single = compress_all(&model.encoder, &w.select_rows(&[3])).unwrap();
        assert_eq!(single.num_words(), 1);
        assert_eq!(single.row(0), all.row(3));
    }

    fn autoencoder_grad_check(relaxation: Relaxation) {
        let mut model = small_model(8, 4, 2, 4);
        let mut rng = Rng::new(3);
        let w = Matrix::random_normal(8, 4, 1.0, &mut rng);
        let ids: Vec<usize> = (0..8).collect();
        let opts = EncodeOptions {
            tau: 1.0,
            mode: SampleMode::Deterministic,
            relaxation,
        };
        let reference = st_reference(&model, &w, &ids, &opts);
        let report = grad_check(
            &mut model,
            |m, g| {
                let mut r = Rng::new(0);
                let base = m.reconstruction_loss_with_grad(&w, &ids, &opts, &mut r, 1.0, g).unwrap();
                match relaxation {
                    Relaxation::Soft => base,
                    // the hard forward is piecewise constant in the encoder;
                    // compare against the surrogate whose gradient it reports
                    Relaxation::StraightThrough => {
                        base + st_surrogate(m, &w, &ids, &opts, &reference)
                    }
                }
            },
            1e-4,
            1e-3,
        );
        assert!(report.passed(), "{:?}", &report.failures[..report.failures.len().min(5)]);
    }

    #[test]
    fn soft_autoencoder_gradients_pass_grad_check() {
        autoencoder_grad_check(Relaxation::Soft);
    }

    #[test]
    fn straight_through_autoencoder_gradients_pass_grad_check() {
        autoencoder_grad_check(Relaxation::StraightThrough);
    }
}
