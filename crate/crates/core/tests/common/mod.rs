#![allow(dead_code)]

use std::collections::BTreeMap;

use wavelet_vit::encoder::{Init, ModelConfig, ModelParams};
use wavelet_vit::inference::EmbeddingBank;
use wavelet_vit::modelio::synthetic::random_image;
use wavelet_vit::modelio::{gen_synthetic, SplitMix64, SyntheticConfig};
use wavelet_vit::numerics::{Matrix, Scalar};
use wavelet_vit::tokenizer::{build_token_plan, TokenPlan};
use wavelet_vit::wavelet::{rgb_to_ycbcr, ImagePlane, RgbImage, YCbCrImage};

pub const SIDE: usize = 64;

/// Seeded desk-scale model, bank and the 64x64 plan it runs on.
pub fn desk<T: Scalar>(seed: u64) -> (ModelParams<T>, EmbeddingBank<T>, TokenPlan) {
    let cfg = SyntheticConfig::desk();
    let (p, b) = gen_synthetic::<T>(seed, &cfg).unwrap();
    let plan = build_token_plan(SIDE, SIDE, cfg.model.patch_size, cfg.model.levels).unwrap();
    (p, b, plan)
}

pub fn noise_ycbcr<T: Scalar>(rng: &mut SplitMix64, h: usize, w: usize) -> YCbCrImage<T> {
    let rgb: RgbImage<T> = if h == w {
        random_image(rng, h, w)
    } else {
        let mut plane = || ImagePlane::new(h, w, (0..h * w).map(|_| T::of(rng.next_f64())).collect()).unwrap();
        let (r, g, b) = (plane(), plane(), plane());
        RgbImage::new(r, g, b).unwrap()
    };
    rgb_to_ycbcr(&rgb).unwrap()
}

/// Parameters with every block weight zero, so each token's final hidden
/// state equals its embedding. Gains are one, everything else zero.
pub fn inert_params(config: ModelConfig) -> ModelParams<f64> {
    let tensors: BTreeMap<String, Vec<f64>> = config
        .tensor_specs()
        .into_iter()
        .map(|s| {
            let v = match s.init {
                Init::One => 1.0,
                _ => 0.0,
            };
            let n = s.numel();
            (s.name, vec![v; n])
        })
        .collect();
    ModelParams::from_tensors(config, tensors).unwrap()
}

/// Row `i` of the identity, `n` wide.
pub fn basis(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

pub fn two_class_bank(dim: usize) -> EmbeddingBank<f64> {
    let e = Matrix::from_rows(&[basis(dim, 0), basis(dim, 1)]).unwrap();
    EmbeddingBank::new(e, vec!["zero".into(), "one".into()], 100.0).unwrap()
}
