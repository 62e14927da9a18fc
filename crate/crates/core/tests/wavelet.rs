mod common;

use proptest::prelude::*;
use wavelet_vit::modelio::SplitMix64;
use wavelet_vit::wavelet::{combine, decompose, dwt2_level, reconstruct, ImagePlane, YCbCrImage};

/// Separable oracle: orthonormal 1-D Haar along rows, then along columns.
fn separable_haar(v: &[f64], h: usize, w: usize) -> [Vec<f64>; 4] {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let (oh, ow) = (h / 2, w / 2);
    let mut lo = vec![0.0; h * ow];
    let mut hi = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            let (a, b) = (v[r * w + 2 * c], v[r * w + 2 * c + 1]);
            lo[r * ow + c] = (a + b) * s;
            hi[r * ow + c] = (a - b) * s;
        }
    }
    let cols = |m: &[f64], sign: f64| {
        let mut out = vec![0.0; oh * ow];
        for r in 0..oh {
            for c in 0..ow {
                out[r * ow + c] = (m[2 * r * ow + c] + sign * m[(2 * r + 1) * ow + c]) * s;
            }
        }
        out
    };
    // lh: low along rows, high along columns
    [cols(&lo, 1.0), cols(&lo, -1.0), cols(&hi, 1.0), cols(&hi, -1.0)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn level_matches_separable_oracle(hh in 1usize..6, ww in 1usize..6, seed in any::<u64>()) {
        let (h, w) = (2 * hh, 2 * ww);
        let mut rng = SplitMix64::new(seed);
        let v: Vec<f64> = (0..h * w).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let bands = dwt2_level(&ImagePlane::new(h, w, v.clone()).unwrap()).unwrap();
        let [ll, lh, hl, hhb] = separable_haar(&v, h, w);
        for (got, want) in [(&bands.ll, ll), (&bands.lh, lh), (&bands.hl, hl), (&bands.hh, hhb)] {
            for (a, b) in got.values().iter().zip(&want) {
                prop_assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn round_trip_f64(levels in 1usize..=3, hm in 1usize..4, wm in 1usize..4, seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let img = common::noise_ycbcr::<f64>(&mut rng, 8 * hm, 8 * wm);
        let back = reconstruct(&decompose(&img, levels).unwrap()).unwrap();
        prop_assert!(back.max_abs_diff(&img) <= 1e-12);
    }

    #[test]
    fn round_trip_f32(levels in 1usize..=3, seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let img = common::noise_ycbcr::<f32>(&mut rng, 32, 32);
        let back = reconstruct(&decompose(&img, levels).unwrap()).unwrap();
        prop_assert!(back.max_abs_diff(&img) <= 1e-5);
    }

    #[test]
    fn energy_preserved(levels in 1usize..=3, seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let img = common::noise_ycbcr::<f64>(&mut rng, 32, 32);
        let e = img.energy();
        prop_assert!((decompose(&img, levels).unwrap().energy() - e).abs() <= 1e-12 * e);
    }

    #[test]
    fn linear(alpha in -3.0f64..3.0, beta in -3.0f64..3.0, seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let x = common::noise_ycbcr::<f64>(&mut rng, 16, 16);
        let y = common::noise_ycbcr::<f64>(&mut rng, 16, 16);
        let lhs = decompose(&combine(&x, alpha, &y, beta), 2).unwrap();
        let (dx, dy) = (decompose(&x, 2).unwrap(), decompose(&y, 2).unwrap());
        let check = |a: &ImagePlane<f64>, b: &ImagePlane<f64>, c: &ImagePlane<f64>| {
            a.values().iter().zip(b.values()).zip(c.values())
                .all(|((l, u), v)| (l - (alpha * u + beta * v)).abs() <= 1e-12)
        };
        for ch in 0..3 {
            prop_assert!(check(&lhs.ll()[ch], &dx.ll()[ch], &dy.ll()[ch]));
            for level in 1..=2 {
                let (l, a, b) = (lhs.details(level), dx.details(level), dy.details(level));
                prop_assert!(check(&l.lh[ch], &a.lh[ch], &b.lh[ch]));
                prop_assert!(check(&l.hl[ch], &a.hl[ch], &b.hl[ch]));
                prop_assert!(check(&l.hh[ch], &a.hh[ch], &b.hh[ch]));
            }
        }
    }

    #[test]
    fn constant_image(c in -1.0f64..1.0, levels in 1usize..=3) {
        let p = |v| ImagePlane::filled(16, 16, v);
        let img = YCbCrImage::new(p(c), p(-c), p(0.5 * c)).unwrap();
        let pyr = decompose(&img, levels).unwrap();
        let scale = (1u32 << levels) as f64;
        for (ch, &v) in pyr.ll().iter().zip(&[c, -c, 0.5 * c]) {
            prop_assert!(ch.values().iter().all(|x| (x - v * scale).abs() <= 1e-12));
        }
        for level in 1..=levels {
            let d = pyr.details(level);
            for stack in [&d.lh, &d.hl, &d.hh] {
                prop_assert!(stack.iter().all(|p| p.values().iter().all(|x| x.abs() <= 1e-12)));
            }
        }
    }
}
