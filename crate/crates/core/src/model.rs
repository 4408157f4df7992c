//! The full fusion network and its ablation variants.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bfm;
use crate::decoder::{Decoder, DecoderTrace};
use crate::encoder::{BranchEncoders, EncoderTrace};
use crate::error::{Error, Result};
use crate::nca::{NcaBlock, NcaTrace};
use crate::params::{Gradients, ParamStore};
use crate::tensor::FeatureMap;

/// Architectural hyperparameters.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NetworkConfig {
    pub encoder_channels: usize,
    pub encoder_dilations: Vec<usize>,
    pub kernel_size: usize,
    pub negative_slope: f64,
    pub embed_dim: usize,
    pub window_size: usize,
    pub num_heads: usize,
    pub patch_size: usize,
    pub decoder_depth: usize,
    pub mlp_ratio: usize,
    /// Both modality branches run the same encoder weights.
    pub share_encoder: bool,
    /// Both attention blocks use one residual scale.
    pub share_nca_alpha: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            encoder_channels: 64,
            encoder_dilations: vec![1, 2, 4, 8, 1],
            kernel_size: 3,
            negative_slope: 0.2,
            embed_dim: 96,
            window_size: 8,
            num_heads: 3,
            patch_size: 2,
            decoder_depth: 3,
            mlp_ratio: 4,
            share_encoder: true,
            share_nca_alpha: false,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.into()));
        if self.encoder_channels < 2 {
            return fail("encoder_channels must be at least 2");
        }
        if self.encoder_dilations.is_empty() || self.encoder_dilations.contains(&0) {
            return fail("encoder_dilations must be a non-empty list of positive integers");
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return fail("kernel_size must be a positive odd integer");
        }
        if !(self.negative_slope > 0.0 && self.negative_slope < 1.0) {
            return fail("negative_slope must lie in (0, 1)");
        }
        if self.embed_dim == 0 || self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.window_size == 0 || self.patch_size == 0 || self.decoder_depth == 0 || self.mlp_ratio == 0 {
            return fail("window_size, patch_size, decoder_depth and mlp_ratio must be positive");
        }
        Ok(())
    }
}

/// Components removed for the ablation study.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AblationFlags {
    /// Transformer blocks replaced by convolution + activation blocks.
    pub disable_stb: bool,
    /// Cross-modal attention replaced by the identity.
    pub disable_nca: bool,
    /// Branch fusion replaced by a plain average.
    pub disable_bfm: bool,
}

impl AblationFlags {
    pub const FULL: Self = Self {
        disable_stb: false,
        disable_nca: false,
        disable_bfm: false,
    };

    /// The four variants compared in an ablation run, full model first.
    pub fn variants() -> [(&'static str, AblationFlags); 4] {
        [
            ("full", Self::FULL),
            ("w/o STB", Self { disable_stb: true, ..Self::FULL }),
            ("w/o NCA", Self { disable_nca: true, ..Self::FULL }),
            ("w/o BFM", Self { disable_bfm: true, ..Self::FULL }),
        ]
    }
}

/// Counts of the major blocks in a built model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModuleSummary {
    pub encoder_layers: usize,
    pub encoders: usize,
    pub nca_blocks: usize,
    pub bfm_blocks: usize,
    pub transformer_blocks: usize,
    pub conv_token_blocks: usize,
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct FusionTrace {
    encoded: [EncoderTrace; 2],
    nca: Option<[NcaTrace; 2]>,
    attended: [FeatureMap; 2],
    fused: FeatureMap,
    decoder: DecoderTrace,
}

impl FusionTrace {
    pub fn features(&self, branch: usize) -> &FeatureMap {
        self.encoded[branch].output()
    }

    pub fn attended(&self, branch: usize) -> &FeatureMap {
        &self.attended[branch]
    }

    pub fn fused(&self) -> &FeatureMap {
        &self.fused
    }

    pub fn decoder(&self) -> &DecoderTrace {
        &self.decoder
    }
}

/// Two-branch encoder, cross-modal attention, branch fusion and decoder.
#[derive(Debug, Clone)]
pub struct FusionNet {
    config: NetworkConfig,
    flags: AblationFlags,
    params: ParamStore,
    encoders: BranchEncoders,
    nca: Option<[NcaBlock; 2]>,
    decoder: Decoder,
}

impl FusionNet {
    /// Builds a model with parameters drawn from `seed`.
    pub fn new(config: NetworkConfig, flags: AblationFlags, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(config, flags, &mut rng)
    }

    pub fn with_rng<R: rand::Rng + ?Sized>(config: NetworkConfig, flags: AblationFlags, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if flags.disable_nca && config.share_nca_alpha {
            return Err(Error::Config("share_nca_alpha has no effect with disable_nca".into()));
        }
        let mut params = ParamStore::new();
        let encoders = BranchEncoders::new(&mut params, &config, rng);
        let nca = if flags.disable_nca {
            None
        } else if config.share_nca_alpha {
            let first = NcaBlock::new(&mut params, "nca.shared");
            Some([first.clone(), NcaBlock::sharing(first.alpha)])
        } else {
            Some([NcaBlock::new(&mut params, "nca.0"), NcaBlock::new(&mut params, "nca.1")])
        };
        let decoder = Decoder::new(&mut params, &config, !flags.disable_stb, rng)?;
        Ok(Self {
            config,
            flags,
            params,
            encoders,
            nca,
            decoder,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn flags(&self) -> AblationFlags {
        self.flags
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn encoders(&self) -> &BranchEncoders {
        &self.encoders
    }

    pub fn nca_blocks(&self) -> Option<&[NcaBlock; 2]> {
        self.nca.as_ref()
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn summary(&self) -> ModuleSummary {
        ModuleSummary {
            encoder_layers: self.encoders.branch(0).layers().len(),
            encoders: if self.encoders.is_shared() { 1 } else { 2 },
            nca_blocks: self.nca.as_ref().map_or(0, |n| n.len()),
            bfm_blocks: usize::from(!self.flags.disable_bfm),
            transformer_blocks: self.decoder.transformer_blocks().len(),
            conv_token_blocks: self.decoder.conv_blocks(),
        }
    }

    /// Smallest image side the encoder accepts.
    pub fn min_image_size(&self) -> usize {
        self.encoders.branch(0).min_size()
    }

    /// Merges two attended branch features into `Phi^f`.
    pub fn merge(&self, first: &FeatureMap, second: &FeatureMap) -> Result<FeatureMap> {
        if self.flags.disable_bfm {
            bfm::average_branches(first, second)
        } else {
            bfm::fuse_branches(first, second)
        }
    }

    /// Fuses two `[B, 1, H, W]` images in `[-1, 1]`.
    pub fn fuse(&self, first: &FeatureMap, second: &FeatureMap) -> Result<FeatureMap> {
        let (phi_1, phi_2) = self.encoders.encode_pair(&self.params, first, second)?;
        let (att_1, att_2) = match &self.nca {
            Some([b1, b2]) => crate::nca::nca_pair(&self.params, &phi_1, &phi_2, b1, b2)?,
            None => (phi_1, phi_2),
        };
        let fused = self.merge(&att_1, &att_2)?;
        self.decoder.forward(&self.params, &fused)
    }

    pub fn forward_traced(&self, first: &FeatureMap, second: &FeatureMap) -> Result<(FeatureMap, FusionTrace)> {
        first.ensure_same_dims(second)?;
        let enc_1 = self.encoders.branch(0).encode_traced(&self.params, first)?;
        let enc_2 = self.encoders.branch(1).encode_traced(&self.params, second)?;
        let (nca, attended) = match &self.nca {
            Some([b1, b2]) => {
                let (o1, t1) = b1.forward_traced(&self.params, enc_1.output(), enc_2.output())?;
                let (o2, t2) = b2.forward_traced(&self.params, enc_2.output(), enc_1.output())?;
                (Some([t1, t2]), [o1, o2])
            }
            None => (None, [enc_1.output().clone(), enc_2.output().clone()]),
        };
        let fused = self.merge(&attended[0], &attended[1])?;
        let (out, decoder) = self.decoder.forward_traced(&self.params, &fused)?;
        Ok((
            out,
            FusionTrace {
                encoded: [enc_1, enc_2],
                nca,
                attended,
                fused,
                decoder,
            },
        ))
    }

    /// Back-propagates `grad_out` (w.r.t. the fused image) into `grads`;
    /// returns the gradients w.r.t. both input images.
    pub fn backward(&self, trace: &FusionTrace, grad_out: &FeatureMap, grads: &mut Gradients) -> (FeatureMap, FeatureMap) {
        let d_fused = self.decoder.backward(&self.params, &trace.decoder, grad_out, grads);
        let (d_att_1, d_att_2) = if self.flags.disable_bfm {
            let mut half = d_fused;
            for v in half.data_mut() {
                *v *= 0.5;
            }
            (half.clone(), half)
        } else {
            bfm::fuse_branches_backward(&trace.attended[0], &trace.attended[1], &d_fused)
        };
        let phi_1 = trace.encoded[0].output();
        let phi_2 = trace.encoded[1].output();
        let (d_phi_1, d_phi_2) = match (&self.nca, &trace.nca) {
            (Some([b1, b2]), Some([t1, t2])) => {
                let (mut dp1, dv2) = b1.backward(&self.params, phi_1, phi_2, t1, &d_att_1, grads);
                let (mut dp2, dv1) = b2.backward(&self.params, phi_2, phi_1, t2, &d_att_2, grads);
                dp1.add_assign(&dv1);
                dp2.add_assign(&dv2);
                (dp1, dp2)
            }
            _ => (d_att_1, d_att_2),
        };
        let d_in_1 = self.encoders.branch(0).backward(&self.params, &trace.encoded[0], &d_phi_1, grads);
        let d_in_2 = self.encoders.branch(1).backward(&self.params, &trace.encoded[1], &d_phi_2, grads);
        (d_in_1, d_in_2)
    }

    /// Names and shapes of all parameters, in registration order.
    pub fn param_layout(&self) -> Vec<(alloc::string::String, Vec<usize>)> {
        self.params
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.tensor.shape().to_vec()))
            .collect()
    }
}
