//! Context-aggregation encoder: a stack of dilated 3x3 convolutions with
//! leaky rectification that widens the receptive field while keeping the
//! input resolution.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::NetworkConfig;
use crate::nn::{leaky_relu, leaky_relu_backward, Conv2d};
use crate::params::{Gradients, ParamStore};
use crate::tensor::FeatureMap;

#[derive(Debug, Clone)]
pub struct Encoder {
    layers: Vec<Conv2d>,
    slope: f64,
}

/// Activations kept for the backward pass: the input followed by the output
/// of every layer.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    activations: Vec<FeatureMap>,
}

impl EncoderTrace {
    pub fn output(&self) -> &FeatureMap {
        self.activations.last().expect("trace holds at least the input")
    }
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &NetworkConfig, rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(cfg.encoder_dilations.len());
        let mut in_ch = 1;
        for (i, &dilation) in cfg.encoder_dilations.iter().enumerate() {
            layers.push(Conv2d::new(
                store,
                &format!("{name}.conv{i}"),
                in_ch,
                cfg.encoder_channels,
                cfg.kernel_size,
                dilation,
                cfg.negative_slope,
                rng,
            ));
            in_ch = cfg.encoder_channels;
        }
        Self {
            layers,
            slope: cfg.negative_slope,
        }
    }

    pub fn layers(&self) -> &[Conv2d] {
        &self.layers
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(1, |l| l.out_channels)
    }

    /// Smallest accepted height/width: the kernel itself, and one pixel past
    /// the padding of the most dilated layer so every tap offset reaches into
    /// the image.
    pub fn min_size(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.kernel.max(l.padding() + 1))
            .max()
            .unwrap_or(1)
    }

    fn validate(&self, image: &FeatureMap) -> Result<()> {
        let d = image.dims();
        if d.channels != 1 {
            return Err(Error::Config(format!(
                "encoder expects single-channel input, got {} channels",
                d.channels
            )));
        }
        image.ensure_finite("encoder input")?;
        let min = self.min_size();
        if d.height < min || d.width < min {
            return Err(Error::TooSmall {
                height: d.height,
                width: d.width,
                min,
            });
        }
        Ok(())
    }

    /// Maps `[B, 1, H, W]` images to `[B, C, H, W]` features.
    pub fn encode(&self, params: &ParamStore, image: &FeatureMap) -> Result<FeatureMap> {
        self.validate(image)?;
        let mut x = image.clone();
        for layer in &self.layers {
            x = layer.forward(params, &x);
            leaky_relu(x.data_mut(), self.slope);
        }
        Ok(x)
    }

    pub fn encode_traced(&self, params: &ParamStore, image: &FeatureMap) -> Result<EncoderTrace> {
        self.validate(image)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(image.clone());
        for layer in &self.layers {
            let mut y = layer.forward(params, activations.last().unwrap());
            leaky_relu(y.data_mut(), self.slope);
            activations.push(y);
        }
        Ok(EncoderTrace { activations })
    }

    /// Accumulates parameter gradients; returns the gradient w.r.t. the image.
    pub fn backward(&self, params: &ParamStore, trace: &EncoderTrace, grad_out: &FeatureMap, grads: &mut Gradients) -> FeatureMap {
        let mut g = grad_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            leaky_relu_backward(g.data_mut(), trace.activations[i + 1].data(), self.slope);
            g = layer.backward(params, &trace.activations[i], &g, grads);
        }
        g
    }
}

/// The two modality branches. With shared weights both branches run the
/// same [`Encoder`].
#[derive(Debug, Clone)]
pub struct BranchEncoders {
    encoders: Vec<Encoder>,
}

impl BranchEncoders {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &NetworkConfig, rng: &mut R) -> Self {
        let encoders = if cfg.share_encoder {
            alloc::vec![Encoder::new(store, "encoder", cfg, rng)]
        } else {
            alloc::vec![
                Encoder::new(store, "encoder.branch0", cfg, rng),
                Encoder::new(store, "encoder.branch1", cfg, rng),
            ]
        };
        Self { encoders }
    }

    pub fn is_shared(&self) -> bool {
        self.encoders.len() == 1
    }

    /// Encoder used by branch `k` (0 or 1).
    pub fn branch(&self, k: usize) -> &Encoder {
        &self.encoders[k.min(self.encoders.len() - 1)]
    }

    pub fn encode_pair(&self, params: &ParamStore, first: &FeatureMap, second: &FeatureMap) -> Result<(FeatureMap, FeatureMap)> {
        first.ensure_same_dims(second)?;
        Ok((
            self.branch(0).encode(params, first)?,
            self.branch(1).encode(params, second)?,
        ))
    }
}
