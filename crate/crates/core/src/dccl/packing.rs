//! Bit-packing of code matrices.
//!
//! Codes are written word-major, then codebook-major, each occupying
//! exactly `ceil(log2 K)` bits. Bits fill each byte from the least
//! significant end, and a code's low bits come first. Only the end of the
//! whole stream is padded to a byte boundary.

use crate::dccl::CodeMatrix;
use crate::error::{Error, Result};

/// `ceil(log2 K)` for `K >= 2`.
pub fn bits_per_code(k: usize) -> u32 {
    assert!(k >= 2, "K must be at least 2");
    usize::BITS - (k - 1).leading_zeros()
}

/// Packed stream length in bytes for `V x M` codes over alphabet `K`.
pub fn packed_len(v: usize, m: usize, k: usize) -> usize {
    (v * m * bits_per_code(k) as usize).div_ceil(8)
}

pub fn pack_codes(codes: &CodeMatrix) -> Vec<u8> {
    let bits = bits_per_code(codes.num_codewords());
    let mut out = vec![0u8; packed_len(codes.num_words(), codes.num_books(), codes.num_codewords())];
    let mut pos = 0usize;
    for &c in codes.as_slice() {
        for b in 0..bits {
            if (c >> b) & 1 == 1 {
                out[pos / 8] |= 1 << (pos % 8);
            }
            pos += 1;
        }
    }
    out
}

pub fn unpack_codes(bytes: &[u8], v: usize, m: usize, k: usize) -> Result<CodeMatrix> {
    if k < 2 {
        return Err(Error::param(format!("K must be at least 2, got {k}")));
    }
    let expected = packed_len(v, m, k);
    if bytes.len() < expected {
        return Err(Error::format(format!(
            "truncated code stream: {} bytes, need {expected}",
            bytes.len()
        )));
    }
    if bytes.len() > expected {
        return Err(Error::format(format!(
            "code stream has {} trailing bytes",
            bytes.len() - expected
        )));
    }
    let bits = bits_per_code(k);
    let mut codes = Vec::with_capacity(v * m);
    let mut pos = 0usize;
    for _ in 0..v * m {
        let mut c = 0u32;
        for b in 0..bits {
            if (bytes[pos / 8] >> (pos % 8)) & 1 == 1 {
                c |= 1 << b;
            }
            pos += 1;
        }
        codes.push(c);
    }
    CodeMatrix::new(v, m, k, codes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    #[test]
    fn bit_widths() {
        assert_eq!(bits_per_code(2), 1);
        assert_eq!(bits_per_code(3), 2);
        assert_eq!(bits_per_code(4), 2);
        assert_eq!(bits_per_code(16), 4);
        assert_eq!(bits_per_code(17), 5);
        assert_eq!(bits_per_code(256), 8);
        assert_eq!(bits_per_code(257), 9);
    }

    #[test]
    fn nibble_layout() {
        let codes = CodeMatrix::new(1, 4, 16, vec![1, 2, 3, 4]).unwrap();
        assert_eq!(pack_codes(&codes), vec![0x21, 0x43]);
    }

    #[test]
    fn one_bit_codes_pack_eight_per_byte() {
        let codes = CodeMatrix::new(2, 8, 2, vec![1, 0, 1, 1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 1]).unwrap();
        let packed = pack_codes(&codes);
        assert_eq!(packed, vec![0b1000_1101, 0b1000_0000]);
        let nine = CodeMatrix::new(9, 1, 2, vec![1; 9]).unwrap();
        assert_eq!(pack_codes(&nine).len(), 2);
    }

    #[test]
    fn truncated_stream_is_rejected() {
        let codes = CodeMatrix::new(3, 3, 17, vec![16, 0, 5, 1, 2, 3, 4, 5, 6]).unwrap();
        let packed = pack_codes(&codes);
        assert!(matches!(
            unpack_codes(&packed[..packed.len() - 1], 3, 3, 17),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn invalid_codes_in_stream_are_rejected() {
        // K=3 uses two bits, so the pattern 0b11 is not a valid code
        assert!(matches!(unpack_codes(&[0b11], 1, 1, 3), Err(Error::Code(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]
        #[test]
        fn round_trip(
            k in prop::sample::select(vec![2usize, 3, 4, 16, 17, 256]),
            v in 1usize..40, m in 1usize..9, seed in 0u64..u64::MAX
        ) {
            let mut rng = Rng::new(seed);
            let raw: Vec<u32> = (0..v * m).map(|_| rng.below(k) as u32).collect();
            let codes = CodeMatrix::new(v, m, k, raw).unwrap();
            let packed = pack_codes(&codes);
            prop_assert_eq!(packed.len() * 8 >= v * m * bits_per_code(k) as usize, true);
            prop_assert_eq!(unpack_codes(&packed, v, m, k).unwrap(), codes);
        }
    }
}
