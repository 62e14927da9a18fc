use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Scalar};

/// Architecture hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub levels: usize,
    pub out_dim: usize,
}

impl ModelConfig {
    /// Small configuration used by the test suites.
    pub fn desk() -> Self {
        ModelConfig {
            dim: 32,
            blocks: 2,
            heads: 4,
            mlp_ratio: 4,
            patch_size: 8,
            levels: 2,
            out_dim: 16,
        }
    }

    /// ViT-B/16 image tower with a two-level tokenizer.
    pub fn vit_b16() -> Self {
        ModelConfig {
            dim: 768,
            blocks: 12,
            heads: 12,
            mlp_ratio: 4,
            patch_size: 16,
            levels: 2,
            out_dim: 512,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("dim", self.dim),
            ("blocks", self.blocks),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("patch_size", self.patch_size),
            ("levels", self.levels),
            ("out_dim", self.out_dim),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    /// Canonical tensor names and shapes, in storage order.
    pub fn tensor_specs(&self) -> Vec<TensorSpec> {
        let (d, p, hd) = (self.dim, self.patch_dim(), self.hidden_dim());
        let mut v = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, init: Init| v.push(TensorSpec { name, shape, init });
        for kind in KIND_NAMES {
            push(format!("patch_proj.{kind}.weight"), vec![p, d], Init::Random);
            push(format!("patch_proj.{kind}.bias"), vec![d], Init::Random);
        }
        push("embed.level".into(), vec![self.levels, d], Init::Random);
        push("embed.kind".into(), vec![4, d], Init::Random);
        push("embed.readout".into(), vec![self.levels + 1, d], Init::Random);
        for b in 0..self.blocks {
            let pre = format!("blocks.{b}");
            push(format!("{pre}.norm1.gain"), vec![d], Init::One);
            push(format!("{pre}.norm1.bias"), vec![d], Init::Zero);
            for proj in ["q", "k", "v", "out"] {
                push(format!("{pre}.attn.{proj}.weight"), vec![d, d], Init::Random);
                push(format!("{pre}.attn.{proj}.bias"), vec![d], Init::Random);
            }
            push(format!("{pre}.norm2.gain"), vec![d], Init::One);
            push(format!("{pre}.norm2.bias"), vec![d], Init::Zero);
            push(format!("{pre}.mlp.fc1.weight"), vec![d, hd], Init::Random);
            push(format!("{pre}.mlp.fc1.bias"), vec![hd], Init::Random);
            push(format!("{pre}.mlp.fc2.weight"), vec![hd, d], Init::Random);
            push(format!("{pre}.mlp.fc2.bias"), vec![d], Init::Random);
        }
        push("final_norm.gain".into(), vec![d], Init::One);
        push("final_norm.bias".into(), vec![d], Init::Zero);
        push("readout_proj.weight".into(), vec![d, self.out_dim], Init::Random);
        v
    }
}

const KIND_NAMES: [&str; 4] = ["ll", "lh", "hl", "hh"];

/// How a tensor is initialized by the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Random,
    One,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub norm1_gain: Vec<T>,
    pub norm1_bias: Vec<T>,
    pub wq: Matrix<T>,
    pub bq: Vec<T>,
    pub wk: Matrix<T>,
    pub bk: Vec<T>,
    pub wv: Matrix<T>,
    pub bv: Vec<T>,
    pub wo: Matrix<T>,
    pub bo: Vec<T>,
    pub norm2_gain: Vec<T>,
    pub norm2_bias: Vec<T>,
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
}

/// Every encoder weight. Immutable once built; share freely across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    /// Indexed by `SubbandKind::table_index`.
    pub patch_proj: [Matrix<T>; 4],
    pub patch_bias: [Vec<T>; 4],
    /// Row `l - 1` for wavelet level `l`.
    pub level_embed: Matrix<T>,
    pub kind_embed: Matrix<T>,
    /// Row `s` for group `s`.
    pub readout_embed: Matrix<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub final_norm_gain: Vec<T>,
    pub final_norm_bias: Vec<T>,
    pub readout_proj: Matrix<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// Builds parameters from named flat tensors. Missing and unexpected
    /// names are both reported.
    pub fn from_tensors(config: ModelConfig, mut tensors: BTreeMap<String, Vec<T>>) -> Result<Self> {
        config.validate()?;
        let specs = config.tensor_specs();
        let missing: Vec<&str> = specs
            .iter()
            .filter(|s| !tensors.contains_key(&s.name))
            .map(|s| s.name.as_str())
            .collect();
        let extra: Vec<&String> = tensors
            .keys()
            .filter(|k| !specs.iter().any(|s| &s.name == *k))
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::Format(format!(
                "tensor set mismatch; missing: [{}]; extra: [{}]",
                missing.join(", "),
                extra.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            )));
        }
        for s in &specs {
            let got = tensors[&s.name].len();
            if got != s.numel() {
                return Err(Error::Dimension(format!(
                    "{} has {got} values, expected shape {:?}",
                    s.name, s.shape
                )));
            }
        }
        let d = config.dim;
        let (p, hd) = (config.patch_dim(), config.hidden_dim());
        let mut take = |name: &str| tensors.remove(name).expect("checked above");
        let mut mat = |name: &str, r: usize, c: usize| Matrix::from_vec(r, c, take(name));

        let mut patch_proj = Vec::with_capacity(4);
        let mut patch_bias = Vec::with_capacity(4);
        for kind in KIND_NAMES {
            patch_proj.push(mat(&format!("patch_proj.{kind}.weight"), p, d)?);
            patch_bias.push(mat(&format!("patch_proj.{kind}.bias"), 1, d)?.into_data());
        }
        let level_embed = mat("embed.level", config.levels, d)?;
        let kind_embed = mat("embed.kind", 4, d)?;
        let readout_embed = mat("embed.readout", config.levels + 1, d)?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let n = |s: &str| format!("blocks.{b}.{s}");
            let norm1_gain = mat(&n("norm1.gain"), 1, d)?.into_data();
            let norm1_bias = mat(&n("norm1.bias"), 1, d)?.into_data();
            let wq = mat(&n("attn.q.weight"), d, d)?;
            let bq = mat(&n("attn.q.bias"), 1, d)?.into_data();
            let wk = mat(&n("attn.k.weight"), d, d)?;
            let bk = mat(&n("attn.k.bias"), 1, d)?.into_data();
            let wv = mat(&n("attn.v.weight"), d, d)?;
            let bv = mat(&n("attn.v.bias"), 1, d)?.into_data();
            let wo = mat(&n("attn.out.weight"), d, d)?;
            let bo = mat(&n("attn.out.bias"), 1, d)?.into_data();
            let norm2_gain = mat(&n("norm2.gain"), 1, d)?.into_data();
            let norm2_bias = mat(&n("norm2.bias"), 1, d)?.into_data();
            let w1 = mat(&n("mlp.fc1.weight"), d, hd)?;
            let b1 = mat(&n("mlp.fc1.bias"), 1, hd)?.into_data();
            let w2 = mat(&n("mlp.fc2.weight"), hd, d)?;
            let b2 = mat(&n("mlp.fc2.bias"), 1, d)?.into_data();
            blocks.push(BlockParams {
                norm1_gain,
                norm1_bias,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                norm2_gain,
                norm2_bias,
                w1,
                b1,
                w2,
                b2,
            });
        }
        let final_norm_gain = mat("final_norm.gain", 1, d)?.into_data();
        let final_norm_bias = mat("final_norm.bias", 1, d)?.into_data();
        let readout_proj = mat("readout_proj.weight", d, config.out_dim)?;
        let params = ModelParams {
            config,
            patch_proj: patch_proj.try_into().expect("four kinds"),
            patch_bias: patch_bias.try_into().expect("four kinds"),
            level_embed,
            kind_embed,
            readout_embed,
            blocks,
            final_norm_gain,
            final_norm_bias,
            readout_proj,
        };
        params.validate()?;
        Ok(params)
    }

    /// Flat tensors in canonical order.
    pub fn to_tensors(&self) -> Vec<(String, Vec<usize>, Vec<T>)> {
        let mut by_name: BTreeMap<String, Vec<T>> = BTreeMap::new();
        for (k, kind) in KIND_NAMES.iter().enumerate() {
            by_name.insert(format!("patch_proj.{kind}.weight"), self.patch_proj[k].data().to_vec());
            by_name.insert(format!("patch_proj.{kind}.bias"), self.patch_bias[k].clone());
        }
        by_name.insert("embed.level".into(), self.level_embed.data().to_vec());
        by_name.insert("embed.kind".into(), self.kind_embed.data().to_vec());
        by_name.insert("embed.readout".into(), self.readout_embed.data().to_vec());
        for (b, blk) in self.blocks.iter().enumerate() {
            let n = |s: &str| format!("blocks.{b}.{s}");
            by_name.insert(n("norm1.gain"), blk.norm1_gain.clone());
            by_name.insert(n("norm1.bias"), blk.norm1_bias.clone());
            by_name.insert(n("attn.q.weight"), blk.wq.data().to_vec());
            by_name.insert(n("attn.q.bias"), blk.bq.clone());
            by_name.insert(n("attn.k.weight"), blk.wk.data().to_vec());
            by_name.insert(n("attn.k.bias"), blk.bk.clone());
            by_name.insert(n("attn.v.weight"), blk.wv.data().to_vec());
            by_name.insert(n("attn.v.bias"), blk.bv.clone());
            by_name.insert(n("attn.out.weight"), blk.wo.data().to_vec());
            by_name.insert(n("attn.out.bias"), blk.bo.clone());
            by_name.insert(n("norm2.gain"), blk.norm2_gain.clone());
            by_name.insert(n("norm2.bias"), blk.norm2_bias.clone());
            by_name.insert(n("mlp.fc1.weight"), blk.w1.data().to_vec());
            by_name.insert(n("mlp.fc1.bias"), blk.b1.clone());
            by_name.insert(n("mlp.fc2.weight"), blk.w2.data().to_vec());
            by_name.insert(n("mlp.fc2.bias"), blk.b2.clone());
        }
        by_name.insert("final_norm.gain".into(), self.final_norm_gain.clone());
        by_name.insert("final_norm.bias".into(), self.final_norm_bias.clone());
        by_name.insert("readout_proj.weight".into(), self.readout_proj.data().to_vec());
        self.config
            .tensor_specs()
            .into_iter()
            .map(|s| {
                let data = by_name.remove(&s.name).expect("every spec is populated");
                (s.name, s.shape, data)
            })
            .collect()
    }

    /// Checks that every shape agrees with `config`.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let (d, p, hd) = (c.dim, c.patch_dim(), c.hidden_dim());
        let mut problems = Vec::new();
        let mut mat = |name: &str, m: &Matrix<T>, shape: (usize, usize)| {
            if m.shape() != shape {
                problems.push(format!("{name}: {:?} != {:?}", m.shape(), shape));
            }
        };
        for (k, kind) in KIND_NAMES.iter().enumerate() {
            mat(&format!("patch_proj.{kind}.weight"), &self.patch_proj[k], (p, d));
        }
        mat("embed.level", &self.level_embed, (c.levels, d));
        mat("embed.kind", &self.kind_embed, (4, d));
        mat("embed.readout", &self.readout_embed, (c.levels + 1, d));
        mat("readout_proj.weight", &self.readout_proj, (d, c.out_dim));
        for (b, blk) in self.blocks.iter().enumerate() {
            for (n, m) in [("q", &blk.wq), ("k", &blk.wk), ("v", &blk.wv), ("out", &blk.wo)] {
                mat(&format!("blocks.{b}.attn.{n}.weight"), m, (d, d));
            }
            mat(&format!("blocks.{b}.mlp.fc1.weight"), &blk.w1, (d, hd));
            mat(&format!("blocks.{b}.mlp.fc2.weight"), &blk.w2, (hd, d));
        }
        let mut vectors: Vec<(String, usize, usize)> = Vec::new();
        for (k, kind) in KIND_NAMES.iter().enumerate() {
            vectors.push((format!("patch_proj.{kind}.bias"), self.patch_bias[k].len(), d));
        }
        for (b, blk) in self.blocks.iter().enumerate() {
            for (n, v, len) in [
                ("norm1.gain", &blk.norm1_gain, d),
                ("norm1.bias", &blk.norm1_bias, d),
                ("attn.q.bias", &blk.bq, d),
                ("attn.k.bias", &blk.bk, d),
                ("attn.v.bias", &blk.bv, d),
                ("attn.out.bias", &blk.bo, d),
                ("norm2.gain", &blk.norm2_gain, d),
                ("norm2.bias", &blk.norm2_bias, d),
                ("mlp.fc1.bias", &blk.b1, hd),
                ("mlp.fc2.bias", &blk.b2, d),
            ] {
                vectors.push((format!("blocks.{b}.{n}"), v.len(), len));
            }
        }
        vectors.push(("final_norm.gain".into(), self.final_norm_gain.len(), d));
        vectors.push(("final_norm.bias".into(), self.final_norm_bias.len(), d));
        for (name, got, want) in vectors {
            if got != want {
                problems.push(format!("{name}: length {got} != {want}"));
            }
        }
        if self.blocks.len() != c.blocks {
            problems.push(format!("{} blocks, expected {}", self.blocks.len(), c.blocks));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Dimension(problems.join("; ")))
        }
    }

    /// Converts every tensor to another element type.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let tensors = self
            .to_tensors()
            .into_iter()
            .map(|(n, _, v)| (n, v.into_iter().map(|x| U::of(x.as_f64())).collect()))
            .collect();
        ModelParams::from_tensors(self.config, tensors).expect("casting preserves shapes")
    }
}
