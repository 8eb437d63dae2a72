//! Model dimensions and parameter initialization for both branches.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::blocks::{init_block, init_block_shared, init_linear, init_qkv, BlockConfig};
use crate::config::KvReader;
use crate::error::{Error, Result};
use crate::tensor::{Branch, ParamTree};

/// Rotary base length of the understanding sequence; longer inputs are
/// position-interpolated.
pub const TEXT_BASE_LEN: usize = 128;
pub const POSITION_CAPACITY: usize = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Image side the understanding encoder and base generation grid use.
    pub image_size: usize,
    pub patch_size: usize,
    pub vision_dim: usize,
    pub vision_heads: usize,
    pub vision_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub mlp_ratio: usize,
    pub vocab_size: usize,
    /// Fixed number of condition rows fed to the generation branch.
    pub cond_len: usize,
    pub latent_channels: usize,
    pub latent_factor: usize,
    pub probe_dim: usize,
    pub time_dim: usize,
}

impl ModelConfig {
    /// d = 128, four layers: the reference desk configuration.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 8,
            vision_dim: 64,
            vision_heads: 4,
            vision_layers: 1,
            model_dim: 128,
            num_heads: 4,
            num_layers: 4,
            mlp_ratio: 4,
            vocab_size,
            cond_len: 32,
            latent_channels: 4,
            latent_factor: 4,
            probe_dim: 32,
            time_dim: 32,
        }
    }

    /// d = 64 variant sized for single-core end-to-end runs.
    pub fn compact(vocab_size: usize) -> Self {
        ModelConfig {
            model_dim: 64,
            ..ModelConfig::desk(vocab_size)
        }
    }

    /// Two layers, tiny widths: for gradient checks and unit tests.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            image_size: 16,
            patch_size: 8,
            vision_dim: 8,
            vision_heads: 2,
            vision_layers: 1,
            model_dim: 8,
            num_heads: 2,
            num_layers: 2,
            mlp_ratio: 2,
            vocab_size,
            cond_len: 4,
            latent_channels: 2,
            latent_factor: 4,
            probe_dim: 4,
            time_dim: 4,
        }
    }

    pub fn preset(name: &str, vocab_size: usize) -> Result<Self> {
        match name {
            "desk" => Ok(ModelConfig::desk(vocab_size)),
            "compact" => Ok(ModelConfig::compact(vocab_size)),
            "tiny" => Ok(ModelConfig::tiny(vocab_size)),
            other => Err(Error::Config(format!("unknown preset {other:?} (desk, compact, tiny)"))),
        }
    }

    /// Field name and value pairs, in declaration order.
    pub fn to_pairs(&self) -> Vec<(&'static str, usize)> {
        vec![
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("vision_dim", self.vision_dim),
            ("vision_heads", self.vision_heads),
            ("vision_layers", self.vision_layers),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("num_layers", self.num_layers),
            ("mlp_ratio", self.mlp_ratio),
            ("vocab_size", self.vocab_size),
            ("cond_len", self.cond_len),
            ("latent_channels", self.latent_channels),
            ("latent_factor", self.latent_factor),
            ("probe_dim", self.probe_dim),
            ("time_dim", self.time_dim),
        ]
    }

    /// Reads every field from `{prefix}{field}` keys.
    pub fn from_map(map: &BTreeMap<String, String>, prefix: &str, path: &Path) -> Result<Self> {
        let r = KvReader::new(map, path);
        let get = |k: &str| r.req::<usize>(&format!("{prefix}{k}"));
        let cfg = ModelConfig {
            image_size: get("image_size")?,
            patch_size: get("patch_size")?,
            vision_dim: get("vision_dim")?,
            vision_heads: get("vision_heads")?,
            vision_layers: get("vision_layers")?,
            model_dim: get("model_dim")?,
            num_heads: get("num_heads")?,
            num_layers: get("num_layers")?,
            mlp_ratio: get("mlp_ratio")?,
            vocab_size: get("vocab_size")?,
            cond_len: get("cond_len")?,
            latent_channels: get("latent_channels")?,
            latent_factor: get("latent_factor")?,
            probe_dim: get("probe_dim")?,
            time_dim: get("time_dim")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Indivisible {
                dim: self.image_size,
                factor: self.patch_size,
            });
        }
        if !self.image_size.is_multiple_of(self.latent_factor) {
            return Err(Error::Indivisible {
                dim: self.image_size,
                factor: self.latent_factor,
            });
        }
        if self.vocab_size < 4 || self.cond_len == 0 || self.num_layers == 0 {
            return Err(Error::Config("vocab_size ≥ 4, cond_len ≥ 1 and num_layers ≥ 1 required".into()));
        }
        self.vision_block()?.validate()?;
        self.text_block()?.validate()
    }

    pub fn vision_block(&self) -> Result<BlockConfig> {
        let mut b = BlockConfig::new(self.vision_dim, self.vision_heads, self.vision_layers)?;
        b.mlp_hidden = self.vision_dim * self.mlp_ratio;
        Ok(b)
    }

    pub fn text_block(&self) -> Result<BlockConfig> {
        let mut b = BlockConfig::new(self.model_dim, self.num_heads, self.num_layers)?;
        b.mlp_hidden = self.model_dim * self.mlp_ratio;
        Ok(b)
    }

    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    /// Latent tokens at the base image size.
    pub fn base_latent_tokens(&self) -> usize {
        (self.image_size / self.latent_factor).pow(2)
    }

    /// Rotary base length of the generation sequence `[T_in, N]`.
    pub fn gen_base_len(&self) -> usize {
        self.cond_len + self.base_latent_tokens()
    }

    /// Number of blocks after which hidden states are aligned to probe
    /// features: a third of the depth, at least one.
    pub fn repa_layer(&self) -> usize {
        (self.num_layers / 3).max(1)
    }
}

/// Fresh parameters for both branches.
pub fn init_params<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<ParamTree> {
    cfg.validate()?;
    let mut p = ParamTree::new();
    init_understanding(&mut p, cfg, rng)?;
    init_generation(&mut p, cfg, rng)?;
    Ok(p)
}

fn init_understanding<R: Rng + ?Sized>(p: &mut ParamTree, cfg: &ModelConfig, rng: &mut R) -> Result<()> {
    let u = Branch::Understanding;
    let vb = cfg.vision_block()?;
    let tb = cfg.text_block()?;
    let patch_in = cfg.patch_size * cfg.patch_size;
    init_linear(p, "und.vis.patch", u, patch_in, cfg.vision_dim, rng)?;
    p.insert_randn("und.vis.pos", u, &[cfg.num_patches(), cfg.vision_dim], 0.02, rng)?;
    for l in 0..cfg.vision_layers {
        init_block(p, &format!("und.vis.layer{l}"), u, &vb, rng)?;
    }
    p.insert_const("und.vis.norm", u, &[cfg.vision_dim], 1.0)?;
    init_linear(p, "und.conn.fc1", u, cfg.vision_dim, cfg.model_dim, rng)?;
    init_linear(p, "und.conn.fc2", u, cfg.model_dim, cfg.model_dim, rng)?;
    p.insert_randn("und.embed", u, &[cfg.vocab_size, cfg.model_dim], 1.0, rng)?;
    for l in 0..cfg.num_layers {
        init_block(p, &format!("und.layer{l}"), u, &tb, rng)?;
    }
    p.insert_const("und.norm", u, &[cfg.model_dim], 1.0)?;
    init_linear(p, "und.head", u, cfg.model_dim, cfg.vocab_size, rng)
}

fn init_generation<R: Rng + ?Sized>(p: &mut ParamTree, cfg: &ModelConfig, rng: &mut R) -> Result<()> {
    let g = Branch::Generation;
    let tb = cfg.text_block()?;
    let d = cfg.model_dim;
    init_linear(p, "gen.latent_in", g, cfg.latent_channels, d, rng)?;
    init_linear(p, "gen.latent_out", g, d, cfg.latent_channels, rng)?;
    init_linear(p, "gen.time", g, cfg.time_dim, d, rng)?;
    for l in 0..cfg.num_layers {
        let prefix = format!("gen.layer{l}");
        init_qkv(p, &prefix, "_und", g, &tb, rng)?;
        init_qkv(p, &prefix, "_gen", g, &tb, rng)?;
        init_block_shared(p, &prefix, g, &tb, rng)?;
    }
    p.insert_const("gen.norm", g, &[d], 1.0)?;
    init_linear(p, "gen.repa.fc1", g, d, d, rng)?;
    init_linear(p, "gen.repa.fc2", g, d, cfg.probe_dim, rng)?;
    Ok(())
}

/// Copies the understanding backbone into the generation backbone: both QKV
/// sets, norms, output projections and MLPs of every layer plus the final
/// norm. Latent projections, time embedding and REPA head keep their values.
pub fn init_generation_from_understanding(p: &mut ParamTree, cfg: &ModelConfig) -> Result<()> {
    let tb = cfg.text_block()?;
    for l in 0..cfg.num_layers {
        let (src, dst) = (format!("und.layer{l}"), format!("gen.layer{l}"));
        let mut names: Vec<&str> = vec!["wq", "wk", "wv"];
        if tb.qkv_bias {
            names.extend(["bq", "bk", "bv"]);
        }
        for n in names {
            for suffix in ["_und", "_gen"] {
                p.copy_value(&format!("{src}.attn.{n}"), &format!("{dst}.attn.{n}{suffix}"))?;
            }
        }
        let mut shared = vec!["norm.attn", "norm.mlp", "attn.wo", "attn.bo", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2"];
        if tb.qk_norm {
            shared.extend(["attn.q_norm", "attn.k_norm"]);
        }
        for n in shared {
            p.copy_value(&format!("{src}.{n}"), &format!("{dst}.{n}"))?;
        }
    }
    p.copy_value("und.norm", "gen.norm")
}
