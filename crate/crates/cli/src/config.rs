//! Flat TOML run configuration. Every key is optional and overrides the
//! built-in default; unknown keys are rejected.

use std::fs;
use std::path::Path;

use crossfuse_core::{AblationFlags, NetworkConfig, TrainConfig};
use serde::Deserialize;

use crate::{CliError, CliResult};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub encoder_channels: Option<usize>,
    pub encoder_dilations: Option<Vec<usize>>,
    pub kernel_size: Option<usize>,
    pub negative_slope: Option<f64>,
    pub embed_dim: Option<usize>,
    pub window_size: Option<usize>,
    pub num_heads: Option<usize>,
    pub patch_size: Option<usize>,
    pub decoder_depth: Option<usize>,
    pub mlp_ratio: Option<usize>,
    pub share_encoder: Option<bool>,
    pub share_nca_alpha: Option<bool>,
    pub lr_init: Option<f64>,
    pub lr_final: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub crop_size: Option<usize>,
    pub lambda_1: Option<f64>,
    pub seed: Option<u64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub weight_decay: Option<f64>,
    pub adam_eps: Option<f64>,
    pub grad_clip_norm: Option<f64>,
    pub disable_stb: Option<bool>,
    pub disable_nca: Option<bool>,
    pub disable_bfm: Option<bool>,
}

/// Network and training settings for one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

macro_rules! apply {
    ($file:ident, $target:expr, $($field:ident),+) => {
        $(if let Some(v) = $file.$field { $target.$field = v; })+
    };
}

impl RunConfig {
    pub fn from_file(file: ConfigFile) -> CliResult<Self> {
        let mut cfg = RunConfig::default();
        let f = file;
        apply!(f, cfg.network, encoder_channels, encoder_dilations, kernel_size, negative_slope, embed_dim, window_size,
            num_heads, patch_size, decoder_depth, mlp_ratio, share_encoder, share_nca_alpha);
        apply!(f, cfg.train, lr_init, lr_final, batch_size, epochs, crop_size, lambda_1, seed, beta1, beta2,
            weight_decay, adam_eps, grad_clip_norm);
        apply!(f, cfg.train.ablation, disable_stb, disable_nca, disable_bfm);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| CliError::usage(anyhow::anyhow!("invalid config: {e}")))?;
        Self::from_file(file)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::usage(anyhow::anyhow!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError {
            kind: e.kind,
            error: e.error.context(format!("in {}", path.display())),
        })
    }

    /// Defaults when `path` is `None`, then the `--seed` override.
    pub fn resolve(path: Option<&Path>, seed: Option<u64>) -> CliResult<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(s) = seed {
            cfg.train.seed = s;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.network.validate()?;
        self.train.validate()?;
        Ok(())
    }

    pub fn with_ablation(&self, flags: AblationFlags) -> Self {
        let mut cfg = self.clone();
        cfg.train.ablation = flags;
        cfg
    }

    /// Flat TOML listing every key, suitable as a config file.
    pub fn to_toml(&self) -> String {
        let n = &self.network;
        let t = &self.train;
        let dil: Vec<String> = n.encoder_dilations.iter().map(|d| d.to_string()).collect();
        format!(
            "encoder_channels = {}\nencoder_dilations = [{}]\nkernel_size = {}\nnegative_slope = {:?}\nembed_dim = {}\n\
             window_size = {}\nnum_heads = {}\npatch_size = {}\ndecoder_depth = {}\nmlp_ratio = {}\nshare_encoder = {}\n\
             share_nca_alpha = {}\nlr_init = {:?}\nlr_final = {:?}\nbatch_size = {}\nepochs = {}\ncrop_size = {}\n\
             lambda_1 = {:?}\nseed = {}\nbeta1 = {:?}\nbeta2 = {:?}\nweight_decay = {:?}\nadam_eps = {:?}\n\
             grad_clip_norm = {:?}\ndisable_stb = {}\ndisable_nca = {}\ndisable_bfm = {}\n",
            n.encoder_channels,
            dil.join(", "),
            n.kernel_size,
            n.negative_slope,
            n.embed_dim,
            n.window_size,
            n.num_heads,
            n.patch_size,
            n.decoder_depth,
            n.mlp_ratio,
            n.share_encoder,
            n.share_nca_alpha,
            t.lr_init,
            t.lr_final,
            t.batch_size,
            t.epochs,
            t.crop_size,
            t.lambda_1,
            t.seed,
            t.beta1,
            t.beta2,
            t.weight_decay,
            t.adam_eps,
            t.grad_clip_norm,
            t.ablation.disable_stb,
            t.ablation.disable_nca,
            t.ablation.disable_bfm,
        )
    }
}
