//! Seeded invariant suite behind `wvit selfcheck`.
//!
//! Every check is deterministic for a given seed and reports one line with
//! no timing information, so two runs produce byte-identical output.

use std::fmt::Write as _;

use crate::distill::{distill_loss, distill_loss_grad, fit_projection, DistillBatch};
use crate::encoder::{attention_allowed, encode_full_masked, encode_full_with_attention, encode_progressive, ModelParams};
use crate::error::Result;
use crate::flopsmodel::{block_macs_full, expected_cost, progressive_cost, two_point_fraction, CostConfig};
use crate::inference::{all_level_scores, exit_level, sweep, EmbeddingBank, GateConfig};
use crate::modelio::synthetic::{random_image, synthetic_images};
use crate::modelio::{decode_bank, decode_model, encode_bank, encode_model, gen_synthetic, SplitMix64, SyntheticConfig};
use crate::numerics::{Matrix, Scalar};
use crate::tokenizer::{build_token_plan, embed_tokens, table1_counts, token_counts, TokenPlan};
use crate::wavelet::{decompose, reconstruct, rgb_to_ycbcr, YCbCrImage};

/// Reference token counts, indexed by `L - 1`, then column.
pub const TABLE1: [&[usize]; 4] = [&[197], &[50, 198], &[13, 51, 199], &[4, 14, 52, 200]];

/// Full-token ViT-B/16 cost in GFLOPs.
pub const BASELINE_GFLOPS: f64 = 16.87;

/// `(expected tokens, GFLOPs)` operating points on the two-level schedule.
pub const TABLE2: [(f64, f64); 3] = [(71.93, 6.22), (89.0, 7.8), (160.0, 14.03)];

/// Accepted band for the naive re-encoding overhead at the deepest point.
pub const OVERHEAD_BAND: (f64, f64) = (0.18, 0.25);

const SIDE: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SelfCheckReport {
    pub checks: Vec<CheckResult>,
}

impl SelfCheckReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// One `PASS|FAIL name detail` line per check.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let tag = if c.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "{tag} {} {}", c.name, c.detail);
        }
        out
    }
}

type Check = fn(u64) -> Result<(bool, String)>;

const CHECKS: &[(&str, Check)] = &[
    ("wavelet_round_trip_f64", wavelet_round_trip_f64),
    ("wavelet_round_trip_f32", wavelet_round_trip_f32),
    ("wavelet_energy", wavelet_energy),
    ("table1_counts", table1),
    ("token_partition", token_partition),
    ("cached_equals_full_f64", cached_equals_full::<f64>),
    ("cached_equals_full_f32", cached_equals_full::<f32>),
    ("level_causality", level_causality),
    ("mask_soundness", mask_soundness),
    ("flops_baseline", flops_baseline),
    ("table2_compute", table2_compute),
    ("naive_overhead", naive_overhead),
    ("gate_monotonicity", gate_monotonicity),
    ("distill_gradient", distill_gradient),
    ("fit_descent", fit_descent),
    ("manifest_round_trip", manifest_round_trip),
];

pub fn run_selfcheck(seed: u64) -> SelfCheckReport {
    let checks = CHECKS
        .iter()
        .map(|&(name, f)| match f(seed) {
            Ok((passed, detail)) => CheckResult { name, passed, detail },
            Err(e) => CheckResult {
                name,
                passed: false,
                detail: format!("error: {e}"),
            },
        })
        .collect();
    SelfCheckReport { checks }
}

fn ycbcr_noise<T: Scalar>(rng: &mut SplitMix64, side: usize) -> Result<YCbCrImage<T>> {
    rgb_to_ycbcr(&random_image(rng, side, side))
}

fn round_trip_error<T: Scalar>(seed: u64) -> Result<f64> {
    let mut rng = SplitMix64::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..4 {
        let img = ycbcr_noise::<T>(&mut rng, SIDE)?;
        for levels in 1..=3 {
            let back = reconstruct(&decompose(&img, levels)?)?;
            worst = worst.max(back.max_abs_diff(&img).as_f64());
        }
    }
    Ok(worst)
}

fn wavelet_round_trip_f64(seed: u64) -> Result<(bool, String)> {
    let e = round_trip_error::<f64>(seed)?;
    Ok((e <= 1e-12, format!("max_err={e:.3e} tol=1e-12")))
}

fn wavelet_round_trip_f32(seed: u64) -> Result<(bool, String)> {
    let e = round_trip_error::<f32>(seed)?;
    Ok((e <= 1e-5, format!("max_err={e:.3e} tol=1e-5")))
}

fn wavelet_energy(seed: u64) -> Result<(bool, String)> {
    let mut rng = SplitMix64::new(seed ^ 0xE4E6);
    let img = ycbcr_noise::<f64>(&mut rng, SIDE)?;
    let mut worst = 0.0f64;
    for levels in 1..=3 {
        let p = decompose(&img, levels)?;
        worst = worst.max((p.energy() - img.energy()).abs() / img.energy());
    }
    Ok((worst <= 1e-12, format!("rel_err={worst:.3e} tol=1e-12")))
}

fn table1(_: u64) -> Result<(bool, String)> {
    let mut mismatches = 0;
    for (i, row) in TABLE1.iter().enumerate() {
        let levels = i + 1;
        for (c, &want) in row.iter().enumerate() {
            if table1_counts(196, levels, c + 1) != want {
                mismatches += 1;
            }
        }
    }
    Ok((mismatches == 0, format!("mismatches={mismatches}/10")))
}

fn token_partition(_: u64) -> Result<(bool, String)> {
    let cases = [(SIDE, SIDE, 8, 2), (256, 256, 16, 2), (128, 64, 4, 3), (64, 64, 8, 1)];
    let mut ok = true;
    for &(h, w, p, l) in &cases {
        let plan = build_token_plan(h, w, p, l)?;
        let spatial: usize = plan.groups.iter().map(|g| g.spatial_len()).sum();
        ok &= spatial == h * w / (p * p);
        for (s, &n) in plan.cumulative_counts().iter().enumerate() {
            ok &= n == token_counts(h, w, p, l, s)?;
        }
    }
    Ok((ok, format!("plans={}", cases.len())))
}

fn desk_model<T: Scalar>(seed: u64) -> Result<(ModelParams<T>, EmbeddingBank<T>, TokenPlan)> {
    let cfg = SyntheticConfig::desk();
    let (params, bank) = gen_synthetic::<T>(seed, &cfg)?;
    let plan = build_token_plan(SIDE, SIDE, cfg.model.patch_size, cfg.model.levels)?;
    Ok((params, bank, plan))
}

fn cached_equals_full<T: Scalar>(seed: u64) -> Result<(bool, String)> {
    let tol = if T::DTYPE.size() == 8 { 1e-10 } else { 1e-4 };
    let (params, _, plan) = desk_model::<T>(seed)?;
    let mut worst = 0.0f64;
    for img in synthetic_images::<T>(seed.wrapping_add(1), 2, SIDE, SIDE) {
        let pyr = decompose(&rgb_to_ycbcr(&img)?, plan.levels)?;
        let full = encode_full_masked(&embed_tokens(&pyr, &plan, &params)?, &params)?;
        let prog = encode_progressive(&pyr, &plan, &params, plan.levels)?;
        worst = worst.max(prog.hidden.max_abs_diff(&full.hidden)?.as_f64());
    }
    Ok((worst <= tol, format!("max_err={worst:.3e} tol={tol:.0e}")))
}

fn level_causality(seed: u64) -> Result<(bool, String)> {
    let (params, _, plan) = desk_model::<f64>(seed)?;
    let img = &synthetic_images::<f64>(seed.wrapping_add(2), 1, SIDE, SIDE)[0];
    let pyr = decompose(&rgb_to_ycbcr(img)?, plan.levels)?;
    let mut perturbed = pyr.clone();
    let mut rng = SplitMix64::new(seed ^ 0xCA05);
    for v in perturbed.details_mut(1).hh[0].values_mut() {
        *v += rng.uniform(-1.0, 1.0);
    }
    let a = encode_full_masked(&embed_tokens(&pyr, &plan, &params)?, &params)?;
    let b = encode_full_masked(&embed_tokens(&perturbed, &plan, &params)?, &params)?;
    let coarse = plan.levels;
    let same = a.readouts[..coarse] == b.readouts[..coarse];
    let changed = a.readouts[coarse] != b.readouts[coarse];
    let prog = encode_progressive(&perturbed, &plan, &params, coarse - 1)?;
    let same_prog = prog.readouts[..] == a.readouts[..coarse];
    Ok((
        same && changed && same_prog,
        format!("coarse_identical={} finest_changed={changed}", same && same_prog),
    ))
}

fn mask_soundness(seed: u64) -> Result<(bool, String)> {
    let (params, _, plan) = desk_model::<f64>(seed)?;
    let img = &synthetic_images::<f64>(seed.wrapping_add(3), 1, SIDE, SIDE)[0];
    let seq = embed_tokens(&decompose(&rgb_to_ycbcr(img)?, plan.levels)?, &plan, &params)?;
    let out = encode_full_with_attention(&seq, &params)?;
    let (mut leaked, mut worst_sum) = (0usize, 0.0f64);
    for maps in out.attention.as_deref().unwrap_or_default() {
        for m in maps {
            for i in 0..m.rows() {
                let mut sum = 0.0;
                for j in 0..m.cols() {
                    let p = m.get(i, j);
                    if !attention_allowed(seq.group_ids[i], seq.group_ids[j]) && p != 0.0 {
                        leaked += 1;
                    }
                    sum += p;
                }
                worst_sum = worst_sum.max((sum - 1.0).abs());
            }
        }
    }
    Ok((
        leaked == 0 && worst_sum <= 1e-12,
        format!("masked_nonzero={leaked} row_sum_err={worst_sum:.3e}"),
    ))
}

fn flops_baseline(_: u64) -> Result<(bool, String)> {
    let g = block_macs_full(197, &CostConfig::vit_b16()) as f64 / 1e9;
    let rel = (g - BASELINE_GFLOPS).abs() / BASELINE_GFLOPS;
    Ok((rel <= 0.10, format!("gflops={g:.4} ref={BASELINE_GFLOPS} rel={rel:.4}")))
}

fn table2_compute(_: u64) -> Result<(bool, String)> {
    let schedule = [50, 198];
    let cfg = CostConfig::vit_b16();
    let mut ok = true;
    let mut parts = Vec::new();
    for &(tokens, want) in &TABLE2 {
        let f = two_point_fraction(tokens, schedule[0], schedule[1])?;
        let g = expected_cost(&[1.0 - f, f], &schedule, &cfg)?.macs_cached / 1e9;
        let rel = (g - want).abs() / want;
        ok &= rel <= 0.05;
        parts.push(format!("{g:.3}/{want}"));
    }
    Ok((ok, format!("gflops={}", parts.join(","))))
}

fn naive_overhead(_: u64) -> Result<(bool, String)> {
    let r = progressive_cost(&[50, 198], 1, &CostConfig::vit_b16())?;
    let o = r.overhead_fraction();
    Ok((
        (OVERHEAD_BAND.0..=OVERHEAD_BAND.1).contains(&o),
        format!("overhead={o:.4} excess_over_cached={:.4}", r.naive_excess_over_cached()),
    ))
}

fn gate_monotonicity(seed: u64) -> Result<(bool, String)> {
    let (params, bank, plan) = desk_model::<f64>(seed)?;
    let images = synthetic_images::<f64>(seed.wrapping_add(4), 8, SIDE, SIDE);
    let margin_grid: Vec<f64> = (0..=20).map(|i| i as f64 * 0.05).collect();
    let prob_grid: Vec<f64> = (0..=20).map(|i| i as f64 * 0.05).collect();
    let mut ok = true;
    for img in &images {
        let levels = all_level_scores(img, &params, &bank, &plan)?;
        for (gate, grid) in [(GateConfig::margin(0.0), &margin_grid), (GateConfig::prob(0.0), &prob_grid)] {
            let exits: Vec<usize> = grid.iter().map(|&t| exit_level(&levels, &gate.with_threshold(t))).collect();
            ok &= exits.windows(2).all(|w| w[0] <= w[1]);
        }
    }
    let rows = sweep(&images, &params, &bank, &GateConfig::margin(0.0), &margin_grid, &plan, None)?;
    ok &= rows.windows(2).all(|w| w[0].mean_tokens <= w[1].mean_tokens);
    Ok((
        ok,
        format!(
            "images={} tokens={:.2}..{:.2}",
            images.len(),
            rows[0].mean_tokens,
            rows[rows.len() - 1].mean_tokens
        ),
    ))
}

/// Worst `max_i |g_i - fd_i| / max_i |fd_i|` over random cases.
pub fn gradient_check(seed: u64, cases: usize, dim: usize) -> Result<f64> {
    let mut rng = SplitMix64::new(seed);
    let eps = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let v: Vec<f64> = (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let t: Vec<f64> = (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let g = distill_loss_grad(&v, &t)?;
        let loss = |x: Vec<f64>| {
            distill_loss(&DistillBatch {
                readouts: vec![x],
                teacher: t.clone(),
            })
        };
        let (mut err, mut scale) = (0.0f64, 0.0f64);
        for i in 0..dim {
            let (mut up, mut down) = (v.clone(), v.clone());
            up[i] += eps;
            down[i] -= eps;
            let fd = (loss(up)? - loss(down)?) / (2.0 * eps);
            err = err.max((g[i] - fd).abs());
            scale = scale.max(fd.abs());
        }
        worst = worst.max(err / scale.max(f64::MIN_POSITIVE));
    }
    Ok(worst)
}

fn distill_gradient(seed: u64) -> Result<(bool, String)> {
    let t = [0.4, -1.1, 0.25, 2.0];
    let at_teacher: f64 = distill_loss(&DistillBatch {
        readouts: vec![t.to_vec(); 3],
        teacher: t.to_vec(),
    })?;
    let rel = gradient_check(seed, 20, 8)?;
    Ok((
        at_teacher.abs() <= 1e-15 && rel <= 1e-5,
        format!("loss_at_teacher={at_teacher:.1e} fd_rel_err={rel:.3e}"),
    ))
}

/// Two-dimensional projection fit: one hidden row, identity start, a target
/// direction roughly 70 degrees away.
pub fn fit_fixture() -> (Matrix<f64>, Matrix<f64>, Matrix<f64>) {
    let h = Matrix::from_vec(1, 2, vec![1.0, 0.5]).expect("1x2");
    let t = Matrix::from_vec(1, 2, vec![-0.3, 1.0]).expect("1x2");
    (h, t, Matrix::identity(2))
}

fn fit_descent(_: u64) -> Result<(bool, String)> {
    let (h, t, w0) = fit_fixture();
    let r = fit_projection(&h, &t, &w0, 100, 0.1)?;
    let strict = r.history.windows(2).all(|w| w[1] < w[0]);
    Ok((
        strict && !r.diverged && r.history.len() == 101,
        format!("loss={:.6}->{:.6}", r.history[0], r.history[r.history.len() - 1]),
    ))
}

fn manifest_round_trip(seed: u64) -> Result<(bool, String)> {
    let (params, bank, _) = desk_model::<f32>(seed)?;
    let (m, blob) = encode_model(&params)?;
    let back: ModelParams<f32> = decode_model(&m, &blob)?;
    let bits = |p: &ModelParams<f32>| {
        p.to_tensors()
            .into_iter()
            .flat_map(|(_, _, v)| v.into_iter().map(f32::to_bits))
            .collect::<Vec<_>>()
    };
    let model_ok = bits(&back) == bits(&params);
    let (bm, bblob) = encode_bank(&bank)?;
    let bank_back: EmbeddingBank<f32> = decode_bank(&bm, &bblob)?;
    let bank_ok = bank_back == bank;
    Ok((
        model_ok && bank_ok,
        format!("tensors={} bytes={} bank_ok={bank_ok}", m.tensors.len(), blob.len()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_is_stable() {
        let a = run_selfcheck(7);
        assert!(a.all_passed(), "{}", a.render());
        assert_eq!(a.render(), run_selfcheck(7).render());
    }
}
