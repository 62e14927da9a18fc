//! Coarse-to-fine token plans, token-count arithmetic and embedding.
//!
//! Group 0 holds the patches of the coarsest LL band; group `s >= 1` holds
//! the LH, HL and HH patches of level `L - s + 1`. Every group starts with
//! one readout token, so after `s` refinements there are `s + 1` readouts.
//! The three YCbCr channels are stacked inside a patch, never multiplied
//! into separate tokens.

use serde::Serialize;

use crate::encoder::ModelParams;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Scalar};
use crate::wavelet::{ChannelStack, SubbandPyramid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SubbandKind {
    Ll,
    Lh,
    Hl,
    Hh,
    Readout,
}

impl SubbandKind {
    /// Row of the per-kind projection / embedding tables. `None` for readouts.
    pub fn table_index(self) -> Option<usize> {
        match self {
            SubbandKind::Ll => Some(0),
            SubbandKind::Lh => Some(1),
            SubbandKind::Hl => Some(2),
            SubbandKind::Hh => Some(3),
            SubbandKind::Readout => None,
        }
    }

    pub const SPATIAL: [SubbandKind; 4] =
        [SubbandKind::Ll, SubbandKind::Lh, SubbandKind::Hl, SubbandKind::Hh];

    pub fn name(self) -> &'static str {
        match self {
            SubbandKind::Ll => "ll",
            SubbandKind::Lh => "lh",
            SubbandKind::Hl => "hl",
            SubbandKind::Hh => "hh",
            SubbandKind::Readout => "readout",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TokenDescriptor {
    pub kind: SubbandKind,
    pub level: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TokenGroup {
    pub group_id: usize,
    /// Wavelet level the group's patches come from.
    pub level: usize,
    /// Patch grid of each subband in this group (rows, cols).
    pub grid: (usize, usize),
    pub readout_index: usize,
    pub tokens: Vec<TokenDescriptor>,
}

impl TokenGroup {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn spatial_len(&self) -> usize {
        self.tokens.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TokenPlan {
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub levels: usize,
    pub groups: Vec<TokenGroup>,
}

impl TokenPlan {
    pub fn group_sizes(&self) -> Vec<usize> {
        self.groups.iter().map(TokenGroup::len).collect()
    }

    /// Tokens processed after step `s`, for s = 0..=L, specials included.
    pub fn cumulative_counts(&self) -> Vec<usize> {
        self.groups
            .iter()
            .scan(0, |acc, g| {
                *acc += g.len();
                Some(*acc)
            })
            .collect()
    }

    pub fn group_offset(&self, s: usize) -> usize {
        self.groups[..s].iter().map(TokenGroup::len).sum()
    }

    pub fn total_tokens(&self) -> usize {
        self.groups.iter().map(TokenGroup::len).sum()
    }

    /// Sequence positions of the readout tokens, one per group.
    pub fn readout_positions(&self) -> Vec<usize> {
        self.groups
            .iter()
            .map(|g| self.group_offset(g.group_id) + g.readout_index)
            .collect()
    }
}

fn check_grid(height: usize, width: usize, patch: usize, levels: usize) -> Result<()> {
    if patch == 0 || height == 0 || width == 0 {
        return Err(Error::Config(format!(
            "degenerate geometry {height}x{width} with patch {patch}"
        )));
    }
    if levels == 0 || levels >= 32 {
        return Err(Error::Config(format!("unsupported level count {levels}")));
    }
    for level in 1..=levels {
        let m = 1usize << level;
        if !height.is_multiple_of(m) || !width.is_multiple_of(m) {
            return Err(Error::Config(format!(
                "level {level}: {height}x{width} is not divisible by {m}"
            )));
        }
        let (h, w) = (height / m, width / m);
        if h % patch != 0 || w % patch != 0 {
            return Err(Error::Config(format!(
                "level {level}: subband {h}x{w} is not divisible by patch size {patch}"
            )));
        }
    }
    Ok(())
}

pub fn build_token_plan(height: usize, width: usize, patch: usize, levels: usize) -> Result<TokenPlan> {
    check_grid(height, width, patch, levels)?;
    let mut groups = Vec::with_capacity(levels + 1);
    for s in 0..=levels {
        let level = if s == 0 { levels } else { levels - s + 1 };
        let grid = ((height >> level) / patch, (width >> level) / patch);
        let kinds: &[SubbandKind] = if s == 0 {
            &[SubbandKind::Ll]
        } else {
            &[SubbandKind::Lh, SubbandKind::Hl, SubbandKind::Hh]
        };
        let mut tokens = vec![TokenDescriptor {
            kind: SubbandKind::Readout,
            level,
            row: 0,
            col: 0,
        }];
        for &kind in kinds {
            for row in 0..grid.0 {
                for col in 0..grid.1 {
                    tokens.push(TokenDescriptor {
                        kind,
                        level,
                        row,
                        col,
                    });
                }
            }
        }
        groups.push(TokenGroup {
            group_id: s,
            level,
            grid,
            readout_index: 0,
            tokens,
        });
    }
    Ok(TokenPlan {
        height,
        width,
        patch_size: patch,
        levels,
        groups,
    })
}

/// Tokens after `s` refinement steps: `HW / (P^2 4^(L-s)) + s + 1`.
pub fn token_counts(height: usize, width: usize, patch: usize, levels: usize, s: usize) -> Result<usize> {
    check_grid(height, width, patch, levels)?;
    if s > levels {
        return Err(Error::Range(format!("step {s} exceeds {levels} levels")));
    }
    let full = height * width / (patch * patch);
    Ok(full / 4usize.pow((levels - s) as u32) + s + 1)
}

/// Reference-table convention: `floor(N_full / 4^(L-col)) + col`, with
/// `col` in 1..=L.
pub fn table1_counts(n_full: usize, levels: usize, col: usize) -> usize {
    assert!(col >= 1 && col <= levels, "column {col} outside 1..={levels}");
    n_full / 4usize.pow((levels - col) as u32) + col
}

/// Cumulative counts under the table convention for a given L: one entry
/// per column, suitable as an operating-point schedule for cost modelling.
pub fn table1_schedule(n_full: usize, levels: usize) -> Vec<usize> {
    (1..=levels).map(|c| table1_counts(n_full, levels, c)).collect()
}

/// Non-overlapping `P x P` patches of a channel stack.
///
/// Patches are emitted in row-major grid order; each is flattened channel
/// first, then row-major inside the patch, giving `3 * P * P` values.
pub fn patchify_subband<T: Scalar>(stack: &ChannelStack<T>, patch: usize) -> Result<Matrix<T>> {
    let (h, w) = stack[0].dims();
    if stack.iter().any(|p| p.dims() != (h, w)) {
        return Err(Error::Dimension("channel planes differ in size".into()));
    }
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Dimension(format!(
            "{h}x{w} subband is not divisible by patch size {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let dim = 3 * patch * patch;
    let mut data = Vec::with_capacity(gh * gw * dim);
    for gr in 0..gh {
        for gc in 0..gw {
            for plane in stack {
                for r in 0..patch {
                    let start = (gr * patch + r) * w + gc * patch;
                    data.extend_from_slice(&plane.values()[start..start + patch]);
                }
            }
        }
    }
    Matrix::from_vec(gh * gw, dim, data)
}

/// 2D sinusoidal code: the first half of the channels encode the row, the
/// second half the column, each as interleaved sin/cos pairs.
pub fn sinusoidal_2d(row: usize, col: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    encode_axis(row as f64, half, &mut out);
    encode_axis(col as f64, dim - half, &mut out);
    out
}

fn encode_axis(pos: f64, width: usize, out: &mut Vec<f64>) {
    for k in 0..width {
        let i = (k / 2) as f64;
        let freq = 1.0 / 10000f64.powf(2.0 * i / width.max(1) as f64);
        out.push(if k % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() });
    }
}

/// Embedded tokens plus bookkeeping needed by the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<T> {
    pub embeddings: Matrix<T>,
    pub group_ids: Vec<usize>,
    pub readout_positions: Vec<usize>,
}

impl<T: Scalar> TokenSequence<T> {
    pub fn len(&self) -> usize {
        self.group_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.group_ids.is_empty()
    }
}

fn check_plan_against<T: Scalar>(pyramid: &SubbandPyramid<T>, plan: &TokenPlan, params: &ModelParams<T>) -> Result<()> {
    if pyramid.source_dims() != (plan.height, plan.width) || pyramid.levels() != plan.levels {
        return Err(Error::Dimension(format!(
            "pyramid {:?} with {} levels does not match plan {}x{} with {} levels",
            pyramid.source_dims(),
            pyramid.levels(),
            plan.height,
            plan.width,
            plan.levels
        )));
    }
    let cfg = &params.config;
    if cfg.patch_size != plan.patch_size || cfg.levels != plan.levels {
        return Err(Error::Dimension(format!(
            "model expects patch {} / {} levels, plan has patch {} / {} levels",
            cfg.patch_size, cfg.levels, plan.patch_size, plan.levels
        )));
    }
    Ok(())
}

/// Embeds the tokens of group `s` in plan order.
pub fn embed_group<T: Scalar>(
    pyramid: &SubbandPyramid<T>,
    plan: &TokenPlan,
    params: &ModelParams<T>,
    s: usize,
) -> Result<Matrix<T>> {
    check_plan_against(pyramid, plan, params)?;
    let group = plan
        .groups
        .get(s)
        .ok_or_else(|| Error::Range(format!("group {s} outside plan")))?;
    let d = params.config.dim;
    let patch = plan.patch_size;

    let sources: Vec<(SubbandKind, &ChannelStack<T>)> = if s == 0 {
        vec![(SubbandKind::Ll, pyramid.ll())]
    } else {
        let det = pyramid.details(group.level);
        vec![
            (SubbandKind::Lh, &det.lh),
            (SubbandKind::Hl, &det.hl),
            (SubbandKind::Hh, &det.hh),
        ]
    };
    let mut projected = Vec::with_capacity(sources.len());
    for (kind, stack) in sources {
        let k = kind.table_index().expect("spatial kind");
        let mut m = patchify_subband(stack, patch)?.matmul(&params.patch_proj[k])?;
        m.add_row_vector(&params.patch_bias[k])?;
        projected.push((kind, m));
    }

    let (gh, gw) = group.grid;
    let mut out = Matrix::zeros(group.len(), d);
    for (i, tok) in group.tokens.iter().enumerate() {
        let row = out.row_mut(i);
        match tok.kind.table_index() {
            None => row.copy_from_slice(params.readout_embed.row(s)),
            Some(k) => {
                let proj = &projected
                    .iter()
                    .find(|(kind, _)| *kind == tok.kind)
                    .expect("projected subband")
                    .1;
                let src = proj.row(tok.row * gw + tok.col);
                let pos = sinusoidal_2d(tok.row, tok.col, d);
                let level = params.level_embed.row(tok.level - 1);
                let kind = params.kind_embed.row(k);
                for (j, v) in row.iter_mut().enumerate() {
                    *v = src[j] + T::of(pos[j]) + level[j] + kind[j];
                }
            }
        }
        debug_assert!(tok.kind == SubbandKind::Readout || tok.row < gh);
    }
    Ok(out)
}

/// Embeds every group and concatenates them in plan order.
pub fn embed_tokens<T: Scalar>(
    pyramid: &SubbandPyramid<T>,
    plan: &TokenPlan,
    params: &ModelParams<T>,
) -> Result<TokenSequence<T>> {
    let mut embeddings = Matrix::zeros(0, params.config.dim);
    let mut group_ids = Vec::with_capacity(plan.total_tokens());
    for g in &plan.groups {
        embeddings.append_rows(&embed_group(pyramid, plan, params, g.group_id)?)?;
        group_ids.extend(std::iter::repeat_n(g.group_id, g.len()));
    }
    Ok(TokenSequence {
        embeddings,
        group_ids,
        readout_positions: plan.readout_positions(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wavelet::ImagePlane;

    #[test]
    fn plan_256_p16_l2() {
        let plan = build_token_plan(256, 256, 16, 2).unwrap();
        let spatial: Vec<usize> = plan.groups.iter().map(TokenGroup::spatial_len).collect();
        assert_eq!(spatial, vec![16, 48, 192]);
        assert_eq!(spatial.iter().sum::<usize>(), (256 / 16) * (256 / 16));
        assert_eq!(plan.cumulative_counts(), vec![17, 66, 259]);
        for s in 0..=2 {
            assert_eq!(plan.cumulative_counts()[s], token_counts(256, 256, 16, 2, s).unwrap());
        }
    }

    #[test]
    fn plan_64_p8_l1() {
        let plan = build_token_plan(64, 64, 8, 1).unwrap();
        let spatial: Vec<usize> = plan.groups.iter().map(TokenGroup::spatial_len).collect();
        assert_eq!(spatial, vec![16, 48]);
        assert_eq!(spatial.iter().sum::<usize>(), 64);
    }

    #[test]
    fn plan_layout_order() {
        let plan = build_token_plan(32, 64, 8, 2).unwrap();
        let g1 = &plan.groups[1];
        assert_eq!(g1.level, 2);
        assert_eq!(g1.tokens[0].kind, SubbandKind::Readout);
        let kinds: Vec<SubbandKind> = g1.tokens[1..].iter().map(|t| t.kind).collect();
        let n = g1.grid.0 * g1.grid.1;
        assert!(kinds[..n].iter().all(|&k| k == SubbandKind::Lh));
        assert!(kinds[n..2 * n].iter().all(|&k| k == SubbandKind::Hl));
        assert!(kinds[2 * n..].iter().all(|&k| k == SubbandKind::Hh));
        assert_eq!((g1.tokens[2].row, g1.tokens[2].col), (0, 1));
        assert_eq!(plan.groups[2].level, 1);
        assert_eq!(plan.readout_positions(), vec![0, 3, 3 + 7]);
    }

    #[test]
    fn plan_rejects_and_names_level() {
        assert!(build_token_plan(64, 64, 16, 2).is_ok());
        let err = build_token_plan(64, 64, 16, 3).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("level 3"), "{err}");
        assert!(build_token_plan(224, 224, 16, 2).is_err());
    }

    #[test]
    fn token_count_formula() {
        assert_eq!(token_counts(256, 256, 16, 2, 2).unwrap(), 259);
        assert_eq!(token_counts(256, 256, 16, 2, 0).unwrap(), 17);
        for levels in 1..=3 {
            assert_eq!(
                token_counts(512, 256, 16, levels, levels).unwrap(),
                512 * 256 / 256 + levels + 1
            );
        }
        assert!(matches!(token_counts(256, 256, 16, 2, 3), Err(Error::Range(_))));
    }

    #[test]
    fn table_convention() {
        assert_eq!(table1_counts(196, 1, 1), 197);
        assert_eq!(table1_schedule(196, 2), vec![50, 198]);
        assert_eq!(table1_schedule(196, 3), vec![13, 51, 199]);
        assert_eq!(table1_schedule(196, 4), vec![4, 14, 52, 200]);
    }

    #[test]
    fn table_and_strict_counts_agree_up_to_one_readout() {
        // On divisible grids the two conventions differ only by the coarse readout.
        let n_full = 256 * 256 / 256;
        for col in 1..=2 {
            assert_eq!(
                table1_counts(n_full, 2, col) + 1,
                token_counts(256, 256, 16, 2, col).unwrap()
            );
        }
    }

    fn const_stack(h: usize, w: usize, v: f32) -> ChannelStack<f32> {
        [
            ImagePlane::filled(h, w, v),
            ImagePlane::filled(h, w, v),
            ImagePlane::filled(h, w, v),
        ]
    }

    #[test]
    fn patchify_shapes_and_order() {
        let m = patchify_subband(&const_stack(16, 16, 0.5), 16).unwrap();
        assert_eq!(m.shape(), (1, 768));
        assert!(m.data().iter().all(|&v| v == 0.5));

        // value encodes (channel, row, col) so ordering is observable
        let mk = |c: usize| {
            let vals = (0..32 * 32).map(|i| (c * 10000 + i) as f32).collect();
            ImagePlane::new(32, 32, vals).unwrap()
        };
        let m = patchify_subband(&[mk(0), mk(1), mk(2)], 16).unwrap();
        assert_eq!(m.shape(), (4, 768));
        let first = |t: usize| m.row(t)[0] as usize;
        assert_eq!(
            (0..4).map(first).collect::<Vec<_>>(),
            vec![0, 16, 16 * 32, 16 * 32 + 16]
        );
        // second row of the patch follows the first
        assert_eq!(m.row(0)[16] as usize, 32);
        // channel 1 starts after 256 values
        assert_eq!(m.row(0)[256] as usize, 10000);
        assert!(patchify_subband(&const_stack(24, 16, 0.0), 16).is_err());
    }

    #[test]
    fn sinusoid_origin() {
        let p = sinusoidal_2d(0, 0, 8);
        assert_eq!(p, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(sinusoidal_2d(3, 5, 7).len(), 7);
    }
}
