//! Compositional codes: an encoder that maps each embedding to `M` discrete
//! codes, `M` codebooks whose selected codewords sum to the reconstruction,
//! and the bit-packed on-disk form.

mod codebook;
mod encoder;
mod file;
mod packing;

pub use codebook::{CodeMatrix, CodebookSet};
pub use encoder::{
    compress_all, reconstruction_loss, DcclEncoder, DcclModel, EncodeOptions, Encoding,
};
pub use file::{
    compression_rate, dccl_model_from_bytes, dccl_model_to_bytes, load_dccl_model, read_compressed,
    save_dccl_model, write_compressed, CompressedEmbeddings, DcclSizes,
    DCCL_HEADER_BYTES,
};
pub use packing::{bits_per_code, pack_codes, packed_len, unpack_codes};

/// Bits used by the codes of `V` words: `V * M * ceil(log2 K)`.
pub fn code_bits(v: usize, m: usize, k: usize) -> usize {
    v * m * bits_per_code(k) as usize
}

/// Bits used by the codebooks: `M * K * D * 32`.
pub fn codebook_bits(m: usize, k: usize, d: usize) -> usize {
    m * k * d * 32
}
