//! Analytic multiply-accumulate accounting.
//!
//! One multiply-add counts as one reported FLOP; this is the convention under
//! which a 197-token ViT-B/16 lands near 17 GFLOPs. Norms, softmax and the
//! activation are left out unless `include_elementwise` is set. Only the
//! image encoder is counted.

use serde::Serialize;

use crate::encoder::ModelConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CostConfig {
    pub dim: u64,
    pub blocks: u64,
    pub mlp_ratio: u64,
    /// Flattened patch length, `3 * P * P`.
    pub patch_dim: u64,
    pub out_dim: u64,
    pub include_elementwise: bool,
}

impl CostConfig {
    pub fn from_model(cfg: &ModelConfig) -> Self {
        CostConfig {
            dim: cfg.dim as u64,
            blocks: cfg.blocks as u64,
            mlp_ratio: cfg.mlp_ratio as u64,
            patch_dim: (3 * cfg.patch_size * cfg.patch_size) as u64,
            out_dim: cfg.out_dim as u64,
            include_elementwise: false,
        }
    }

    pub fn vit_b16() -> Self {
        Self::from_model(&ModelConfig::vit_b16())
    }
}

/// Per-term MACs of one forward (full or incremental).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Breakdown {
    pub embed: u64,
    pub qkv_out: u64,
    pub attention: u64,
    pub mlp: u64,
    pub elementwise: u64,
    pub readout: u64,
}

impl Breakdown {
    pub fn total(&self) -> u64 {
        self.embed + self.qkv_out + self.attention + self.mlp + self.elementwise + self.readout
    }
}

/// `n_new` query tokens attending over `n_total` keys, every block.
fn breakdown(n_new: u64, n_total: u64, cfg: &CostConfig) -> Breakdown {
    let (d, b, r) = (cfg.dim, cfg.blocks, cfg.mlp_ratio);
    let elementwise = if cfg.include_elementwise {
        // two norms and the activation per token, softmax per score
        b * (2 * n_new * d + n_new * r * d + n_new * n_total) + d
    } else {
        0
    };
    Breakdown {
        embed: n_new * d * cfg.patch_dim,
        qkv_out: b * 4 * n_new * d * d,
        attention: b * 2 * n_new * n_total * d,
        mlp: b * 2 * n_new * d * r * d,
        elementwise,
        readout: d * cfg.out_dim,
    }
}

/// MACs of a full forward over `n` tokens.
pub fn block_macs_full(n: u64, cfg: &CostConfig) -> u64 {
    breakdown(n, n, cfg).total()
}

/// MACs of an incremental step: `n_new` fresh tokens against a cache that
/// reaches `n_total` tokens once they are appended.
pub fn step_macs_cached(n_new: u64, n_total: u64, cfg: &CostConfig) -> Result<u64> {
    if n_new > n_total {
        return Err(Error::Range(format!("{n_new} new tokens exceed total {n_total}")));
    }
    Ok(breakdown(n_new, n_total, cfg).total())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepCost {
    pub step: usize,
    pub n_new: u64,
    pub n_total: u64,
    pub terms: Breakdown,
    pub cached: u64,
    pub naive: u64,
    pub cumulative_cached: u64,
    pub cumulative_naive: u64,
    /// `cumulative_naive - cumulative_cached`.
    pub delta: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub steps: Vec<StepCost>,
    pub cached_total: u64,
    pub naive_total: u64,
}

impl CostReport {
    /// Share of the naive cost spent re-encoding tokens that were already
    /// encoded: `(naive - cached) / naive`.
    pub fn overhead_fraction(&self) -> f64 {
        if self.naive_total == 0 {
            return 0.0;
        }
        (self.naive_total - self.cached_total) as f64 / self.naive_total as f64
    }

    /// `naive / cached - 1`.
    pub fn naive_excess_over_cached(&self) -> f64 {
        self.naive_total as f64 / self.cached_total as f64 - 1.0
    }
}

fn check_schedule(cumulative: &[usize]) -> Result<()> {
    if cumulative.is_empty() {
        return Err(Error::Config("empty token schedule".into()));
    }
    if cumulative[0] == 0 || cumulative.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(format!(
            "token schedule {cumulative:?} must be positive and strictly increasing"
        )));
    }
    Ok(())
}

/// Cost of exiting after step `exit` for a schedule of cumulative token
/// counts (one entry per step). Cached pays each step incrementally; naive
/// re-encodes the whole cumulative set at every step.
pub fn progressive_cost(cumulative: &[usize], exit: usize, cfg: &CostConfig) -> Result<CostReport> {
    check_schedule(cumulative)?;
    if exit >= cumulative.len() {
        return Err(Error::Range(format!(
            "exit step {exit} outside {} steps",
            cumulative.len()
        )));
    }
    let mut steps = Vec::with_capacity(exit + 1);
    let (mut cum_cached, mut cum_naive, mut prev) = (0u64, 0u64, 0u64);
    for (s, &n) in cumulative[..=exit].iter().enumerate() {
        let n_total = n as u64;
        let n_new = n_total - prev;
        let terms = breakdown(n_new, n_total, cfg);
        let cached = terms.total();
        let naive = block_macs_full(n_total, cfg);
        cum_cached += cached;
        cum_naive += naive;
        steps.push(StepCost {
            step: s,
            n_new,
            n_total,
            terms,
            cached,
            naive,
            cumulative_cached: cum_cached,
            cumulative_naive: cum_naive,
            delta: cum_naive - cum_cached,
        });
        prev = n_total;
    }
    Ok(CostReport {
        steps,
        cached_total: cum_cached,
        naive_total: cum_naive,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExpectedCost {
    pub tokens: f64,
    pub macs_cached: f64,
    pub macs_naive: f64,
}

/// Expectation over exit steps, `fractions[s]` being the share of inputs
/// exiting after step `s`.
pub fn expected_cost(fractions: &[f64], cumulative: &[usize], cfg: &CostConfig) -> Result<ExpectedCost> {
    check_schedule(cumulative)?;
    if fractions.len() != cumulative.len() {
        return Err(Error::Config(format!(
            "{} fractions for {} steps",
            fractions.len(),
            cumulative.len()
        )));
    }
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(Error::Config(format!("invalid exit fractions {fractions:?}")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("exit fractions sum to {total}, not 1")));
    }
    let full = progressive_cost(cumulative, cumulative.len() - 1, cfg)?;
    let mut out = ExpectedCost {
        tokens: 0.0,
        macs_cached: 0.0,
        macs_naive: 0.0,
    };
    for (s, &f) in fractions.iter().enumerate() {
        out.tokens += f * cumulative[s] as f64;
        out.macs_cached += f * full.steps[s].cumulative_cached as f64;
        out.macs_naive += f * full.steps[s].cumulative_naive as f64;
    }
    Ok(out)
}

/// Share of inputs that must run to `high` tokens so that the mean token
/// count over a two-point schedule `{low, high}` equals `expected`.
pub fn two_point_fraction(expected: f64, low: usize, high: usize) -> Result<f64> {
    if high <= low {
        return Err(Error::Config(format!("operating points {low} and {high} are not ordered")));
    }
    let f = (expected - low as f64) / (high - low) as f64;
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::Range(format!(
            "{expected} tokens is outside [{low}, {high}]"
        )));
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> CostConfig {
        CostConfig {
            dim: 1,
            blocks: 1,
            mlp_ratio: 1,
            patch_dim: 3,
            out_dim: 1,
            include_elementwise: false,
        }
    }

    #[test]
    fn unit_arithmetic() {
        let b = breakdown(1, 1, &unit());
        assert_eq!(b.qkv_out + b.attention + b.mlp, 8);
        assert_eq!(block_macs_full(1, &unit()), 8 + 3 + 1);
    }

    #[test]
    fn attention_term_is_superlinear() {
        let cfg = CostConfig::vit_b16();
        for n in [1u64, 17, 197, 1000] {
            assert!(block_macs_full(2 * n, &cfg) > 2 * block_macs_full(n, &cfg) - cfg.dim * cfg.out_dim);
        }
    }

    #[test]
    fn convexity() {
        let cfg = CostConfig::vit_b16();
        for n in 2..300u64 {
            let (a, b, c) = (
                block_macs_full(n - 1, &cfg),
                block_macs_full(n, &cfg),
                block_macs_full(n + 1, &cfg),
            );
            assert!(b > a);
            assert!(c + a >= 2 * b);
        }
    }

    #[test]
    fn first_step_equals_full_pass() {
        let cfg = CostConfig::vit_b16();
        assert_eq!(step_macs_cached(50, 50, &cfg).unwrap(), block_macs_full(50, &cfg));
        assert!(step_macs_cached(51, 50, &cfg).is_err());
    }

    #[test]
    fn exit_at_zero_costs_the_same() {
        let r = progressive_cost(&[50, 198], 0, &CostConfig::vit_b16()).unwrap();
        assert_eq!(r.cached_total, r.naive_total);
        assert_eq!(r.overhead_fraction(), 0.0);
    }

    #[test]
    fn elementwise_toggle_only_adds() {
        let mut cfg = CostConfig::vit_b16();
        let off = block_macs_full(197, &cfg);
        cfg.include_elementwise = true;
        assert!(block_macs_full(197, &cfg) > off);
    }

    #[test]
    fn expected_cost_validation() {
        let cfg = CostConfig::vit_b16();
        assert!(expected_cost(&[0.5, 0.6], &[50, 198], &cfg).is_err());
        assert!(expected_cost(&[1.2, -0.2], &[50, 198], &cfg).is_err());
        assert!(expected_cost(&[1.0], &[50, 198], &cfg).is_err());
        let e = expected_cost(&[1.0, 0.0], &[50, 198], &cfg).unwrap();
        assert_eq!(e.tokens, 50.0);
        assert_eq!(e.macs_cached, block_macs_full(50, &cfg) as f64);
        assert!(two_point_fraction(20.0, 50, 198).is_err());
    }

    #[test]
    fn schedule_must_increase() {
        let cfg = unit();
        assert!(progressive_cost(&[5, 5], 1, &cfg).is_err());
        assert!(progressive_cost(&[], 0, &cfg).is_err());
        assert!(progressive_cost(&[5, 9], 2, &cfg).is_err());
    }
}
