//! Post-training linear quantization to at most 256 levels per tensor.

use crate::error::{Error, Result};
use crate::nlu::NluModel;
use crate::numerics::{HasParameters, Matrix};

pub const DEFAULT_BINS: usize = 256;

/// A matrix stored as one byte per entry over `bins` equally spaced
/// levels `min + i * bin_width`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    pub rows: usize,
    pub cols: usize,
    pub min: f64,
    /// `(max - min) / (bins - 1)`, or 0 for a constant matrix.
    pub bin_width: f64,
    pub bins: usize,
    pub data: Vec<u8>,
}

impl QuantizedMatrix {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// One byte per entry.
    pub fn payload_bytes(&self) -> usize {
        self.data.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=256).contains(&self.bins) {
            return Err(Error::format(format!("bin count {} out of range", self.bins)));
        }
        if self.data.len() != self.rows * self.cols {
            return Err(Error::format("quantized payload length does not match shape"));
        }
        if !self.min.is_finite() || !self.bin_width.is_finite() || self.bin_width < 0.0 {
            return Err(Error::format("non-finite quantization range"));
        }
        if self.data.iter().any(|&i| i as usize >= self.bins) {
            return Err(Error::format("quantized index out of range"));
        }
        Ok(())
    }
}

pub fn quantize(m: &Matrix, bins: usize) -> Result<QuantizedMatrix> {
    if !(2..=256).contains(&bins) {
        return Err(Error::param(format!("bin count must be in [2, 256], got {bins}")));
    }
    if !m.is_finite() {
        return Err(Error::param("cannot quantize non-finite values"));
    }
    let (min, max) = m
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let (min, max) = if m.is_empty() { (0.0, 0.0) } else { (min, max) };
    let bin_width = if max > min { (max - min) / (bins - 1) as f64 } else { 0.0 };
    let data = m
        .data()
        .iter()
        .map(|&x| {
            if bin_width == 0.0 {
                0
            } else {
                // f64::round rounds half away from zero
                ((x - min) / bin_width).round().clamp(0.0, (bins - 1) as f64) as u8
            }
        })
        .collect();
    Ok(QuantizedMatrix {
        rows: m.rows(),
        cols: m.cols(),
        min,
        bin_width,
        bins,
        data,
    })
}

pub fn dequantize(q: &QuantizedMatrix) -> Matrix {
    let data = q.data.iter().map(|&i| q.min + i as f64 * q.bin_width).collect();
    Matrix::new(q.rows, q.cols, data).expect("finite by construction")
}

/// Which tensors [`quantize_model`] touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantizeTargets {
    pub recurrent: bool,
    pub heads: bool,
}

impl Default for QuantizeTargets {
    fn default() -> Self {
        QuantizeTargets {
            recurrent: true,
            heads: false,
        }
    }
}

fn selected(name: &str, targets: QuantizeTargets) -> bool {
    let recurrent = name.starts_with("lstm.") && !name.ends_with(".b");
    let head = ["dc.w", "ic.w", "ner.w"].contains(&name);
    (targets.recurrent && recurrent) || (targets.heads && head)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantReport {
    pub tensors: Vec<String>,
    pub entries: usize,
    /// `entries * 4`
    pub float_payload_bytes: usize,
    /// `entries * 1`
    pub quantized_payload_bytes: usize,
}

/// Replaces the selected weight matrices by their quantized form. Biases
/// and CRF transitions are left untouched. Parameter values afterwards hold
/// the dequantized matrices.
pub fn quantize_model(model: &NluModel, bins: usize, targets: QuantizeTargets) -> Result<(NluModel, QuantReport)> {
    let mut out = model.clone();
    let mut report = QuantReport {
        tensors: Vec::new(),
        entries: 0,
        float_payload_bytes: 0,
        quantized_payload_bytes: 0,
    };
    let mut stored = Vec::new();
    for p in out.parameters_mut() {
        if !selected(&p.name, targets) {
            continue;
        }
        let q = quantize(&p.value, bins)?;
        p.value = dequantize(&q);
        report.tensors.push(p.name.clone());
        report.entries += q.len();
        report.float_payload_bytes += 4 * q.len();
        report.quantized_payload_bytes += q.payload_bytes();
        stored.push((p.name.clone(), q));
    }
    out.quantized.extend(stored);
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    #[test]
    fn constant_matrix() {
        let m = Matrix::filled(3, 4, -2.5);
        let q = quantize(&m, 256).unwrap();
        assert_eq!(q.bin_width, 0.0);
        assert!(q.data.iter().all(|&i| i == 0));
        assert_eq!(dequantize(&q), m);
        let z = Matrix::zeros(2, 2);
        assert_eq!(dequantize(&quantize(&z, 256).unwrap()), z);
    }

    #[test]
    fn midpoint_rounds_away_from_zero() {
        let m = Matrix::from_rows(&[vec![0.0, 0.5, 1.0]]).unwrap();
        let q = quantize(&m, 256).unwrap();
        assert_eq!(q.data, vec![0, 128, 255]);
        assert!((dequantize(&q).get(0, 1) - 0.501961).abs() < 1e-6);
    }

    #[test]
    fn bin_count_range() {
        let m = Matrix::zeros(1, 1);
        assert!(matches!(quantize(&m, 1), Err(Error::Parameter(_))));
        assert!(matches!(quantize(&m, 257), Err(Error::Parameter(_))));
        assert!(quantize(&m, 2).is_ok());
    }

    #[test]
    fn model_quantization_is_recurrent_only_by_default() {
        let m = crate::nlu::tests::toy_model(10, 6, 4, 3, 0);
        let (q, report) = quantize_model(&m, 256, QuantizeTargets::default()).unwrap();
        assert_eq!(report.tensors, vec!["lstm.fwd.w_ih", "lstm.fwd.w_hh", "lstm.bwd.w_ih", "lstm.bwd.w_hh"]);
        assert_eq!(report.float_payload_bytes, 4 * report.quantized_payload_bytes);
        assert_eq!(q.fwd.b, m.fwd.b);
        assert_eq!(q.transitions, m.transitions);
        assert_eq!(q.dc, m.dc);
        let (h, _) = quantize_model(&m, 256, QuantizeTargets { recurrent: true, heads: true }).unwrap();
        assert_eq!(h.quantized.len(), 7);
        assert_eq!(h.dc.b, m.dc.b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn error_within_half_bin(rows in 1usize..12, cols in 1usize..12, bins in 2usize..=256, seed in 0u64..100_000) {
            let m = Matrix::random_normal(rows, cols, 3.0, &mut Rng::new(seed));
            let q = quantize(&m, bins).unwrap();
            let d = dequantize(&q);
            for (x, y) in m.data().iter().zip(d.data()) {
                prop_assert!((x - y).abs() <= q.bin_width / 2.0 * (1.0 + 1e-12) + 1e-15);
            }
        }

        #[test]
        fn requantizing_is_a_fixed_point(rows in 1usize..10, cols in 1usize..10, seed in 0u64..100_000) {
            let m = Matrix::random_normal(rows, cols, 1.0, &mut Rng::new(seed));
            let q = quantize(&m, 256).unwrap();
            prop_assert_eq!(quantize(&dequantize(&q), 256).unwrap().data, q.data);
        }

        #[test]
        fn indices_are_scale_covariant(alpha in 0.01f64..100.0, seed in 0u64..100_000) {
            let m = Matrix::random_normal(6, 7, 1.0, &mut Rng::new(seed));
            let mut scaled = m.clone();
            scaled.scale(alpha);
            let (a, b) = (quantize(&m, 256).unwrap(), quantize(&scaled, 256).unwrap());
            prop_assert_eq!(&a.data, &b.data);
            prop_assert!((b.min - alpha * a.min).abs() <= 1e-12 * alpha.max(1.0) * a.min.abs().max(1.0));
            prop_assert!((b.bin_width - alpha * a.bin_width).abs() <= 1e-12 * alpha.max(1.0));
        }
    }
}
