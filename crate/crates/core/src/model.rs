//! The assembled embedding network and its ablation variants.

use serde::{Deserialize, Serialize};

use crate::backbone::{
    backbone_forward, init_backbone, BackboneConfig, BackboneParams, BackboneVars,
};
use crate::head::{embed_branches, init_head, space_to_depth, HeadConfig, HeadParams, HeadVars};
use crate::params::{join, Parameters};
use crate::soa::{init_soa, soa_forward, SoaConfig, SoaParams, SoaVars};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Which backbone maps feed the embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Descriptors {
    Local,
    Global,
    #[default]
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// One attention block per descriptor map.
    #[default]
    On,
    /// Maps go straight to pooling.
    Off,
    /// The local map is folded into the global grid by space-to-depth,
    /// concatenated with the global map, and a single block attends over
    /// the merged map. Requires both descriptors.
    SingleHead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub zeta: f64,
    pub embedding_dim: usize,
    pub descriptors: Descriptors,
    pub attention: AttentionMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            zeta: 1.0,
            embedding_dim: HeadConfig::default().embedding_dim,
            descriptors: Descriptors::Both,
            attention: AttentionMode::On,
        }
    }
}

/// A branch is one feature map on its way to the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Branch {
    Local,
    Global,
    /// Local folded into the global grid and concatenated with it.
    Merged {
        block: usize,
    },
}

impl Branch {
    fn name(self) -> &'static str {
        match self {
            Branch::Local => "local",
            Branch::Global => "global",
            Branch::Merged { .. } => "merged",
        }
    }
}

impl ModelConfig {
    fn branches(&self) -> Result<Vec<Branch>> {
        self.backbone.validate()?;
        if self.attention == AttentionMode::SingleHead {
            if self.descriptors != Descriptors::Both {
                return Err(Error::config("soa", "single_head needs descriptors = both"));
            }
            let (hl, wl, _) = self.backbone.local_shape();
            let (hg, wg, _) = self.backbone.global_shape();
            let block = hl / hg;
            if block == 0 || hl != block * hg || wl != block * wg {
                return Err(Error::config(
                    "soa",
                    format!("single_head needs the local grid {hl}x{wl} to be a multiple of the global grid {hg}x{wg}"),
                ));
            }
            return Ok(vec![Branch::Merged { block }]);
        }
        Ok(match self.descriptors {
            Descriptors::Local => vec![Branch::Local],
            Descriptors::Global => vec![Branch::Global],
            Descriptors::Both => vec![Branch::Local, Branch::Global],
        })
    }

    fn branch_channels(&self, b: Branch) -> usize {
        let (_, _, cl) = self.backbone.local_shape();
        let (_, _, cg) = self.backbone.global_shape();
        match b {
            Branch::Local => cl,
            Branch::Global => cg,
            Branch::Merged { block } => cl * block * block + cg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let branches = self.branches()?;
        if !self.zeta.is_finite() {
            return Err(Error::config("zeta", "must be finite"));
        }
        if self.embedding_dim == 0 || !self.embedding_dim.is_multiple_of(branches.len()) {
            return Err(Error::config(
                "embedding_dim",
                format!(
                    "{} must be a positive multiple of {}",
                    self.embedding_dim,
                    branches.len()
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: BackboneParams,
    /// One block per branch when attention is enabled, else empty.
    pub soa: Vec<SoaParams>,
    pub head: HeadParams,
    branches: Vec<Branch>,
}

/// Distinct seeds for blocks that share the attention stream.
fn block_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let branches = config.branches()?;
        let channels: Vec<usize> = branches
            .iter()
            .map(|&b| config.branch_channels(b))
            .collect();
        let backbone = init_backbone(&config.backbone, seed)?;
        let soa = match config.attention {
            AttentionMode::Off => Vec::new(),
            AttentionMode::On | AttentionMode::SingleHead => channels
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    init_soa(
                        c,
                        SoaConfig::for_channels(c, config.zeta),
                        block_seed(seed, i),
                    )
                })
                .collect::<Result<_>>()?,
        };
        let head = init_head(
            &channels,
            HeadConfig {
                embedding_dim: config.embedding_dim,
            },
            seed,
        )?;
        Ok(Self {
            config: config.clone(),
            backbone,
            soa,
            head,
            branches,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.head.embedding_dim()
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        self.bind_with(&mut |t| tape.leaf(t))
    }

    /// Binds through `leaf`, called once per parameter in traversal order.
    pub fn bind_with(&self, leaf: &mut dyn FnMut(&Tensor) -> Var) -> ModelVars {
        ModelVars {
            backbone: self.backbone.bind_with(leaf),
            soa: self.soa.iter().map(|s| s.bind_with(leaf)).collect(),
            head: self.head.bind_with(leaf),
        }
    }

    /// `x: [B,H,W,3]` to a `[B,D]` embedding.
    pub fn forward(&self, tape: &mut Tape, x: Var, vars: &ModelVars) -> Result<ModelOutput> {
        let (f_l, f_g) = backbone_forward(tape, x, &vars.backbone)?;
        let mut maps = Vec::with_capacity(self.branches.len());
        for &b in &self.branches {
            maps.push(match b {
                Branch::Local => f_l,
                Branch::Global => f_g,
                Branch::Merged { block } => {
                    let folded = space_to_depth(tape, f_l, block)?;
                    tape.concat(&[folded, f_g], 3)?
                }
            });
        }
        let mut attention = Vec::new();
        if !vars.soa.is_empty() {
            for (m, s) in maps.iter_mut().zip(&vars.soa) {
                let out = soa_forward(tape, *m, s)?;
                *m = out.output;
                attention.push(out.attention);
            }
        }
        let embedding = embed_branches(tape, &maps, &vars.head)?;
        Ok(ModelOutput {
            embedding,
            attention,
        })
    }

    /// Names of the descriptor branches in head order.
    pub fn branch_names(&self) -> Vec<&'static str> {
        self.branches.iter().map(|b| b.name()).collect()
    }
}

impl Parameters for Model {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        for (s, b) in self.soa.iter().zip(&self.branches) {
            s.visit(&join(prefix, &format!("soa_{}", b.name())), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        for (s, b) in self.soa.iter_mut().zip(&self.branches) {
            s.visit_mut(&join(prefix, &format!("soa_{}", b.name())), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Tape handles for one forward pass, in [`Parameters`] order.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub backbone: BackboneVars,
    pub soa: Vec<SoaVars>,
    pub head: HeadVars,
}

impl ModelVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = self.backbone.vars();
        for s in &self.soa {
            out.extend(s.vars());
        }
        out.extend(self.head.vars());
        out
    }
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub embedding: Var,
    /// Per attention block, one `[hw, hw]` matrix per sample.
    pub attention: Vec<Vec<Var>>,
}
