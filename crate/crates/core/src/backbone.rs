//! Small convolutional backbone standing in for a deep pretrained network.
//!
//! Two stages of 3x3 conv + relu layers. The local map is read after the
//! last layer of the first stage and the global map after the last layer
//! of the second, so the global map is spatially no larger and has at
//! least as many channels.

use serde::{Deserialize, Serialize};

use crate::params::{join, Parameters};
use crate::rng::{self, normal_vec};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub local_stage: Vec<ConvSpec>,
    pub global_stage: Vec<ConvSpec>,
}

impl Default for BackboneConfig {
    /// 32x32x3 input, local map 8x8x32, global map 4x4x64.
    fn default() -> Self {
        let c = |channels, stride| ConvSpec { channels, stride };
        Self {
            input_height: 32,
            input_width: 32,
            in_channels: 3,
            kernel: 3,
            local_stage: vec![c(16, 2), c(32, 2), c(32, 1)],
            global_stage: vec![c(64, 2), c(64, 1)],
        }
    }
}

fn conv_out(size: usize, kernel: usize, stride: usize) -> usize {
    let pad = kernel / 2;
    (size + 2 * pad - kernel) / stride + 1
}

impl BackboneConfig {
    fn layers(&self) -> impl Iterator<Item = &ConvSpec> {
        self.local_stage.iter().chain(&self.global_stage)
    }

    fn stage_shape(&self, stage_end: usize) -> (usize, usize, usize) {
        let (mut h, mut w, mut c) = (self.input_height, self.input_width, self.in_channels);
        for spec in self.layers().take(stage_end) {
            h = conv_out(h, self.kernel, spec.stride);
            w = conv_out(w, self.kernel, spec.stride);
            c = spec.channels;
        }
        (h, w, c)
    }

    /// `(H_l, W_l, C_l)`.
    pub fn local_shape(&self) -> (usize, usize, usize) {
        self.stage_shape(self.local_stage.len())
    }

    /// `(H_g, W_g, C_g)`.
    pub fn global_shape(&self) -> (usize, usize, usize) {
        self.stage_shape(self.local_stage.len() + self.global_stage.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_height == 0 || self.input_width == 0 || self.in_channels == 0 {
            return Err(Error::config(
                "backbone.input",
                "dimensions must be positive",
            ));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::config("backbone.kernel", "kernel must be odd"));
        }
        if self.local_stage.is_empty() || self.global_stage.is_empty() {
            return Err(Error::config(
                "backbone.stages",
                "both stages need at least one layer",
            ));
        }
        if self.layers().any(|s| s.channels == 0 || s.stride == 0) {
            return Err(Error::config(
                "backbone.stages",
                "channels and strides must be positive",
            ));
        }
        let (hl, wl, cl) = self.local_shape();
        let (hg, wg, cg) = self.global_shape();
        if cg < cl {
            return Err(Error::config(
                "backbone.global_stage",
                format!("global channels {cg} < local channels {cl}"),
            ));
        }
        debug_assert!(hg <= hl && wg <= wl);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `[k, k, Cin, Cout]`.
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub layers: Vec<ConvLayer>,
}

/// He-normal conv weights (std `sqrt(2 / fan_in)`), zero biases.
pub fn init_backbone(config: &BackboneConfig, seed: u64) -> Result<BackboneParams> {
    config.validate()?;
    let mut rng = rng::seeded(seed, rng::stream::BACKBONE);
    let k = config.kernel;
    let mut cin = config.in_channels;
    let mut layers = Vec::new();
    for spec in config.layers() {
        let fan_in = k * k * cin;
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = Tensor::new(
            [k, k, cin, spec.channels],
            normal_vec(&mut rng, fan_in * spec.channels, std),
        )?;
        layers.push(ConvLayer {
            weight: weight.with_grad(),
            bias: Tensor::zeros([spec.channels]).with_grad(),
            stride: spec.stride,
        });
        cin = spec.channels;
    }
    Ok(BackboneParams {
        config: config.clone(),
        layers,
    })
}

/// Tape handles for one forward pass over [`BackboneParams`].
#[derive(Debug, Clone)]
pub struct BackboneVars {
    layers: Vec<(Var, Var, usize)>,
    local_index: usize,
    pad: usize,
    input: (usize, usize, usize),
}

impl BackboneVars {
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b, _)| [w, b]).collect()
    }
}

impl BackboneParams {
    pub fn bind(&self, tape: &mut Tape) -> BackboneVars {
        self.bind_with(&mut |t| tape.leaf(t))
    }

    /// Binds through `leaf`, called once per parameter in traversal order.
    pub fn bind_with(&self, leaf: &mut dyn FnMut(&Tensor) -> Var) -> BackboneVars {
        BackboneVars {
            layers: self
                .layers
                .iter()
                .map(|l| (leaf(&l.weight), leaf(&l.bias), l.stride))
                .collect(),
            local_index: self.config.local_stage.len() - 1,
            pad: self.config.kernel / 2,
            input: (
                self.config.input_height,
                self.config.input_width,
                self.config.in_channels,
            ),
        }
    }
}

impl Parameters for BackboneParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            f(join(prefix, &format!("conv{i}.weight")), &l.weight);
            f(join(prefix, &format!("conv{i}.bias")), &l.bias);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(join(prefix, &format!("conv{i}.weight")), &mut l.weight);
            f(join(prefix, &format!("conv{i}.bias")), &mut l.bias);
        }
    }
}

/// Runs `x: [B,H,W,3]` through the backbone, returning `(f_l, f_g)`.
pub fn backbone_forward(tape: &mut Tape, x: Var, p: &BackboneVars) -> Result<(Var, Var)> {
    let s = tape.shape(x);
    if s.len() != 4 || (s[1], s[2], s[3]) != p.input {
        return Err(Error::config(
            "backbone.input",
            format!(
                "expected [B,{},{},{}], got {s:?}",
                p.input.0, p.input.1, p.input.2
            ),
        ));
    }
    let mut h = x;
    let mut local = None;
    for (i, &(w, b, stride)) in p.layers.iter().enumerate() {
        let conv = tape.conv2d(h, w, stride, p.pad)?;
        let biased = tape.add_bias(conv, b)?;
        h = tape.relu(biased)?;
        if i == p.local_index {
            local = Some(h);
        }
    }
    Ok((local.expect("local stage is non-empty"), h))
}
