//! Pre-norm transformer encoder with a block-causal cross-level mask.
//!
//! A query from group `s` may attend to any key from groups `<= s`;
//! attention inside a group is bidirectional. Because no token ever looks
//! at a finer group, the keys and values of groups already processed never
//! change, and a refinement step only has to run the new tokens against
//! the cached keys/values.

mod params;

pub use params::{BlockParams, Init, ModelConfig, ModelParams, TensorSpec};

use crate::error::{Error, Result};
use crate::numerics::{dot, gelu, layernorm, softmax_row, Matrix, Scalar, LN_EPS};
use crate::tokenizer::{embed_group, TokenPlan, TokenSequence};
use crate::wavelet::SubbandPyramid;

/// Cross-level mask: keys of coarser or equal groups are visible.
pub fn attention_allowed(query_group: usize, key_group: usize) -> bool {
    key_group <= query_group
}

/// Post-projection keys and values of every processed token, per block.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache<T> {
    keys: Vec<Matrix<T>>,
    values: Vec<Matrix<T>>,
    group_ids: Vec<usize>,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(config: &ModelConfig) -> Self {
        KvCache {
            keys: (0..config.blocks).map(|_| Matrix::zeros(0, config.dim)).collect(),
            values: (0..config.blocks).map(|_| Matrix::zeros(0, config.dim)).collect(),
            group_ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.group_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.group_ids.is_empty()
    }

    pub fn group_ids(&self) -> &[usize] {
        &self.group_ids
    }

    pub fn keys(&self, block: usize) -> &Matrix<T> {
        &self.keys[block]
    }

    pub fn values(&self, block: usize) -> &Matrix<T> {
        &self.values[block]
    }

    pub fn last_group(&self) -> Option<usize> {
        self.group_ids.last().copied()
    }
}

/// Multi-head masked attention. Keys a query may not see are skipped
/// entirely, so they contribute exactly nothing.
///
/// When `probs` is given, the per-head probability matrices
/// (`queries x keys`) are pushed into it.
pub fn masked_attention<T: Scalar>(
    q: &Matrix<T>,
    q_groups: &[usize],
    k: &Matrix<T>,
    v: &Matrix<T>,
    k_groups: &[usize],
    heads: usize,
    mut probs: Option<&mut Vec<Matrix<T>>>,
) -> Result<Matrix<T>> {
    let d = q.cols();
    if k.cols() != d || v.cols() != d || k.rows() != v.rows() {
        return Err(Error::Dimension(format!(
            "q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if q_groups.len() != q.rows() || k_groups.len() != k.rows() {
        return Err(Error::Dimension("group id count does not match rows".into()));
    }
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("{d} channels across {heads} heads")));
    }
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let (nq, nk) = (q.rows(), k.rows());
    let mut out = Matrix::zeros(nq, d);
    let mut logits = vec![T::zero(); nk];
    let mut allowed = vec![false; nk];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let mut head_probs = probs.as_ref().map(|_| Matrix::zeros(nq, nk));
        for i in 0..nq {
            let qi = &q.row(i)[cols.clone()];
            for j in 0..nk {
                allowed[j] = attention_allowed(q_groups[i], k_groups[j]);
                logits[j] = if allowed[j] {
                    dot(qi, &k.row(j)[cols.clone()]) * scale
                } else {
                    T::zero()
                };
            }
            let p = softmax_row(&logits, &allowed)?;
            let orow = &mut out.row_mut(i)[cols.clone()];
            for j in (0..nk).filter(|&j| allowed[j]) {
                for (o, &vv) in orow.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *o = *o + p[j] * vv;
                }
            }
            if let Some(hp) = head_probs.as_mut() {
                hp.row_mut(i).copy_from_slice(&p);
            }
        }
        if let (Some(store), Some(hp)) = (probs.as_deref_mut(), head_probs) {
            store.push(hp);
        }
    }
    Ok(out)
}

fn norm_rows<T: Scalar>(x: &Matrix<T>, gain: &[T], bias: &[T]) -> Result<Matrix<T>> {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        out.row_mut(i).copy_from_slice(&layernorm(x.row(i), gain, bias, LN_EPS)?);
    }
    Ok(out)
}

fn linear<T: Scalar>(x: &Matrix<T>, w: &Matrix<T>, b: &[T]) -> Result<Matrix<T>> {
    let mut y = x.matmul(w)?;
    y.add_row_vector(b)?;
    Ok(y)
}

fn add_in_place<T: Scalar>(x: &mut Matrix<T>, y: &Matrix<T>) {
    for (a, b) in x.data_mut().iter_mut().zip(y.data()) {
        *a = *a + *b;
    }
}

fn mlp<T: Scalar>(x: &Matrix<T>, blk: &BlockParams<T>) -> Result<Matrix<T>> {
    let h = norm_rows(x, &blk.norm2_gain, &blk.norm2_bias)?;
    let a = linear(&h, &blk.w1, &blk.b1)?.map(gelu);
    linear(&a, &blk.w2, &blk.b2)
}

fn readout_vector<T: Scalar>(hidden_row: &[T], params: &ModelParams<T>) -> Result<Vec<T>> {
    let normed = layernorm(hidden_row, &params.final_norm_gain, &params.final_norm_bias, LN_EPS)?;
    Ok(Matrix::from_vec(1, normed.len(), normed)?
        .matmul(&params.readout_proj)?
        .into_data())
}

/// Result of one incremental step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput<T> {
    /// Final-block hidden states of the new tokens (before the final norm).
    pub hidden: Matrix<T>,
    pub readout: Vec<T>,
}

/// Runs the tokens of group `group` through every block against `cache`,
/// then appends their keys/values to it.
///
/// `readout_row` indexes the group's readout token within `new_tokens`.
pub fn forward_step<T: Scalar>(
    new_tokens: &Matrix<T>,
    group: usize,
    readout_row: usize,
    cache: &mut KvCache<T>,
    params: &ModelParams<T>,
) -> Result<StepOutput<T>> {
    let cfg = &params.config;
    if new_tokens.cols() != cfg.dim {
        return Err(Error::Dimension(format!(
            "tokens have {} channels, model dim is {}",
            new_tokens.cols(),
            cfg.dim
        )));
    }
    if readout_row >= new_tokens.rows() {
        return Err(Error::Dimension(format!(
            "readout row {readout_row} outside {} new tokens",
            new_tokens.rows()
        )));
    }
    if cache.keys.len() != cfg.blocks {
        return Err(Error::Dimension(format!(
            "cache built for {} blocks, model has {}",
            cache.keys.len(),
            cfg.blocks
        )));
    }
    if let Some(last) = cache.last_group() {
        if last >= group {
            return Err(Error::Sequencing(format!(
                "group {group} cannot follow cached group {last}"
            )));
        }
    }
    let n = new_tokens.rows();
    let q_groups = vec![group; n];
    let mut k_groups = cache.group_ids.clone();
    k_groups.extend_from_slice(&q_groups);

    let mut x = new_tokens.clone();
    for (b, blk) in params.blocks.iter().enumerate() {
        let h = norm_rows(&x, &blk.norm1_gain, &blk.norm1_bias)?;
        let q = linear(&h, &blk.wq, &blk.bq)?;
        cache.keys[b].append_rows(&linear(&h, &blk.wk, &blk.bk)?)?;
        cache.values[b].append_rows(&linear(&h, &blk.wv, &blk.bv)?)?;
        let attn = masked_attention(
            &q,
            &q_groups,
            &cache.keys[b],
            &cache.values[b],
            &k_groups,
            cfg.heads,
            None,
        )?;
        add_in_place(&mut x, &linear(&attn, &blk.wo, &blk.bo)?);
        let m = mlp(&x, blk)?;
        add_in_place(&mut x, &m);
    }
    cache.group_ids = k_groups;
    let readout = readout_vector(x.row(readout_row), params)?;
    Ok(StepOutput { hidden: x, readout })
}

/// Output of a single pass over every token.
#[derive(Debug, Clone, PartialEq)]
pub struct FullOutput<T> {
    pub hidden: Matrix<T>,
    /// One readout per group, in group order.
    pub readouts: Vec<Vec<T>>,
    /// `attention[block][head]` when requested.
    pub attention: Option<Vec<Vec<Matrix<T>>>>,
}

/// One pass over the whole sequence under the cross-level mask, with no
/// cache. This is both the reference for the incremental path and the
/// "re-encode everything" baseline.
pub fn encode_full_masked<T: Scalar>(seq: &TokenSequence<T>, params: &ModelParams<T>) -> Result<FullOutput<T>> {
    encode_full(seq, params, false)
}

/// Like [`encode_full_masked`] but also records every attention map.
pub fn encode_full_with_attention<T: Scalar>(
    seq: &TokenSequence<T>,
    params: &ModelParams<T>,
) -> Result<FullOutput<T>> {
    encode_full(seq, params, true)
}

fn encode_full<T: Scalar>(seq: &TokenSequence<T>, params: &ModelParams<T>, record: bool) -> Result<FullOutput<T>> {
    let cfg = &params.config;
    if seq.embeddings.cols() != cfg.dim || seq.embeddings.rows() != seq.group_ids.len() {
        return Err(Error::Dimension(format!(
            "sequence {:?} with {} group ids for model dim {}",
            seq.embeddings.shape(),
            seq.group_ids.len(),
            cfg.dim
        )));
    }
    if seq.group_ids.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Sequencing("group ids must be non-decreasing".into()));
    }
    let groups = &seq.group_ids;
    let mut attention = record.then(Vec::new);
    let mut x = seq.embeddings.clone();
    for blk in &params.blocks {
        let h = norm_rows(&x, &blk.norm1_gain, &blk.norm1_bias)?;
        let q = linear(&h, &blk.wq, &blk.bq)?;
        let k = linear(&h, &blk.wk, &blk.bk)?;
        let v = linear(&h, &blk.wv, &blk.bv)?;
        let mut maps = Vec::new();
        let attn = masked_attention(&q, groups, &k, &v, groups, cfg.heads, record.then_some(&mut maps))?;
        if let Some(a) = attention.as_mut() {
            a.push(maps);
        }
        add_in_place(&mut x, &linear(&attn, &blk.wo, &blk.bo)?);
        let m = mlp(&x, blk)?;
        add_in_place(&mut x, &m);
    }
    let readouts = seq
        .readout_positions
        .iter()
        .map(|&p| readout_vector(x.row(p), params))
        .collect::<Result<Vec<_>>>()?;
    Ok(FullOutput {
        hidden: x,
        readouts,
        attention,
    })
}

/// Coarse-to-fine session for one image. Each call to [`step`] embeds and
/// encodes only the next group.
///
/// [`step`]: ProgressiveEncoder::step
pub struct ProgressiveEncoder<'a, T> {
    pyramid: &'a SubbandPyramid<T>,
    plan: &'a TokenPlan,
    params: &'a ModelParams<T>,
    cache: KvCache<T>,
    hidden: Matrix<T>,
    readouts: Vec<Vec<T>>,
}

impl<'a, T: Scalar> ProgressiveEncoder<'a, T> {
    pub fn new(pyramid: &'a SubbandPyramid<T>, plan: &'a TokenPlan, params: &'a ModelParams<T>) -> Result<Self> {
        params.validate()?;
        Ok(ProgressiveEncoder {
            pyramid,
            plan,
            params,
            cache: KvCache::new(&params.config),
            hidden: Matrix::zeros(0, params.config.dim),
            readouts: Vec::new(),
        })
    }

    /// Index of the group the next step will process.
    pub fn next_group(&self) -> usize {
        self.readouts.len()
    }

    pub fn is_done(&self) -> bool {
        self.next_group() > self.plan.levels
    }

    pub fn tokens_processed(&self) -> usize {
        self.cache.len()
    }

    pub fn cache(&self) -> &KvCache<T> {
        &self.cache
    }

    pub fn readouts(&self) -> &[Vec<T>] {
        &self.readouts
    }

    pub fn hidden(&self) -> &Matrix<T> {
        &self.hidden
    }

    /// Encodes the next group and returns its readout.
    pub fn step(&mut self) -> Result<&[T]> {
        let s = self.next_group();
        if s > self.plan.levels {
            return Err(Error::Sequencing(format!(
                "all {} groups already processed",
                self.plan.levels + 1
            )));
        }
        let tokens = embed_group(self.pyramid, self.plan, self.params, s)?;
        let out = forward_step(
            &tokens,
            s,
            self.plan.groups[s].readout_index,
            &mut self.cache,
            self.params,
        )?;
        self.hidden.append_rows(&out.hidden)?;
        self.readouts.push(out.readout);
        Ok(self.readouts.last().expect("just pushed"))
    }

    pub fn into_output(self) -> ProgressiveOutput<T> {
        ProgressiveOutput {
            readouts: self.readouts,
            hidden: self.hidden,
            cache: self.cache,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProgressiveOutput<T> {
    pub readouts: Vec<Vec<T>>,
    /// Hidden states of every processed token, in sequence order.
    pub hidden: Matrix<T>,
    pub cache: KvCache<T>,
}

/// Runs groups `0..=upto` incrementally, never recomputing earlier groups.
pub fn encode_progressive<T: Scalar>(
    pyramid: &SubbandPyramid<T>,
    plan: &TokenPlan,
    params: &ModelParams<T>,
    upto: usize,
) -> Result<ProgressiveOutput<T>> {
    if upto > plan.levels {
        return Err(Error::Range(format!("step {upto} exceeds {} levels", plan.levels)));
    }
    let mut enc = ProgressiveEncoder::new(pyramid, plan, params)?;
    for _ in 0..=upto {
        enc.step()?;
    }
    Ok(enc.into_output())
}
