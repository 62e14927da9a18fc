//! File formats: tensor manifests (JSON + little-endian blob), PPM images,
//! and deterministic synthetic fixtures.

mod manifest;
mod ppm;
pub mod synthetic;

pub use manifest::{
    blob_path, decode_bank, decode_model, decode_tensors, encode_bank, encode_model, encode_tensors,
    load_bank, load_model, save_bank, save_model, Metadata, TensorEntry, TensorManifest, BANK_TENSOR,
    FORMAT_VERSION,
};
pub use ppm::{encode_ppm, load_ppm, parse_ppm, save_ppm};
pub use synthetic::{gen_synthetic, SplitMix64, SyntheticConfig};
