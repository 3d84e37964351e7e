//! Descriptor aggregation and projection.
//!
//! Each attention-enhanced map is pooled with GAP + GMP, passed through its
//! own fully connected layer, and the branch outputs are concatenated into
//! the final embedding. With two branches each produces `D / 2` coordinates.

use serde::{Deserialize, Serialize};

use crate::params::{join, Parameters};
use crate::rng::{self, normal_vec};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub embedding_dim: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { embedding_dim: 512 }
    }
}

/// Per-channel spatial mean plus spatial max: `[B,H,W,C] -> [B,C]`.
pub fn gap_gmp_pool(tape: &mut Tape, f: Var) -> Result<Var> {
    let s = tape.shape(f);
    if s.len() != 4 || s[1] * s[2] == 0 {
        return Err(Error::config(
            "head.input",
            format!("expected a non-empty [B,H,W,C] map, got {s:?}"),
        ));
    }
    let mean = tape.spatial_mean(f)?;
    let max = tape.spatial_max(f)?;
    Ok(tape.add(mean, max)?)
}

/// Relayout `[B,h,w,C] -> [B,h/b,w/b,C*b*b]` used to merge a local map into
/// the global map's grid.
pub fn space_to_depth(tape: &mut Tape, f: Var, block: usize) -> Result<Var> {
    Ok(tape.space_to_depth(f, block)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Fan-in normal weights (std `1/sqrt(in)`), zero bias.
    pub fn init(inputs: usize, outputs: usize, rng: &mut rng::Rng) -> Result<Self> {
        let std = (1.0 / inputs as f64).sqrt();
        Ok(Self {
            weight: Tensor::new([inputs, outputs], normal_vec(rng, inputs * outputs, std))?
                .with_grad(),
            bias: Tensor::zeros([outputs]).with_grad(),
        })
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// One projection per descriptor branch, in concatenation order.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub branches: Vec<Linear>,
}

/// Splits `embedding_dim` evenly over one branch per entry of
/// `branch_channels`.
pub fn init_head(branch_channels: &[usize], config: HeadConfig, seed: u64) -> Result<HeadParams> {
    let nb = branch_channels.len();
    if nb == 0 {
        return Err(Error::config("head", "need at least one branch"));
    }
    if config.embedding_dim == 0 || !config.embedding_dim.is_multiple_of(nb) {
        return Err(Error::config(
            "embedding_dim",
            format!(
                "{} not divisible across {nb} branches",
                config.embedding_dim
            ),
        ));
    }
    let out = config.embedding_dim / nb;
    let mut rng = rng::seeded(seed, rng::stream::HEAD);
    let branches = branch_channels
        .iter()
        .map(|&c| Linear::init(c, out, &mut rng))
        .collect::<Result<_>>()?;
    Ok(HeadParams { branches })
}

impl HeadParams {
    pub fn embedding_dim(&self) -> usize {
        self.branches.iter().map(Linear::outputs).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> HeadVars {
        self.bind_with(&mut |t| tape.leaf(t))
    }

    /// Binds through `leaf`, called once per parameter in traversal order.
    pub fn bind_with(&self, leaf: &mut dyn FnMut(&Tensor) -> Var) -> HeadVars {
        HeadVars {
            branches: self
                .branches
                .iter()
                .map(|l| (leaf(&l.weight), leaf(&l.bias)))
                .collect(),
        }
    }
}

fn branch_name(i: usize, count: usize) -> String {
    match (count, i) {
        (2, 0) => "local".into(),
        (2, 1) => "global".into(),
        _ => format!("branch{i}"),
    }
}

impl Parameters for HeadParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        let n = self.branches.len();
        for (i, l) in self.branches.iter().enumerate() {
            let b = join(prefix, &branch_name(i, n));
            f(join(&b, "weight"), &l.weight);
            f(join(&b, "bias"), &l.bias);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        let n = self.branches.len();
        for (i, l) in self.branches.iter_mut().enumerate() {
            let b = join(prefix, &branch_name(i, n));
            f(join(&b, "weight"), &mut l.weight);
            f(join(&b, "bias"), &mut l.bias);
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeadVars {
    branches: Vec<(Var, Var)>,
}

impl HeadVars {
    pub fn vars(&self) -> Vec<Var> {
        self.branches.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Pools each map, projects it through its branch, and concatenates.
/// The embedding is returned un-normalized.
pub fn embed_branches(tape: &mut Tape, maps: &[Var], p: &HeadVars) -> Result<Var> {
    if maps.len() != p.branches.len() {
        return Err(Error::config(
            "head",
            format!("{} maps for {} branches", maps.len(), p.branches.len()),
        ));
    }
    let mut parts = Vec::with_capacity(maps.len());
    for (&m, &(w, b)) in maps.iter().zip(&p.branches) {
        let pooled = gap_gmp_pool(tape, m)?;
        let proj = tape.matmul(pooled, w)?;
        parts.push(tape.add_bias(proj, b)?);
    }
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    Ok(tape.concat(&parts, 1)?)
}

/// `F = [pool(f_l) W_l + b_l, pool(f_g) W_g + b_g]`.
pub fn embed(tape: &mut Tape, f_l: Var, f_g: Var, p: &HeadVars) -> Result<Var> {
    if p.branches.len() != 2 {
        return Err(Error::config(
            "head",
            "embed needs exactly a local and a global branch",
        ));
    }
    embed_branches(tape, &[f_l, f_g], p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_small_cases() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full([1, 2, 3, 2], 1.5));
        let p = gap_gmp_pool(&mut tape, c).unwrap();
        assert_eq!(tape.value(p), &[3.0, 3.0]);
        let m = tape.constant(Tensor::new([1, 2, 2, 1], vec![0.0, 0.0, 0.0, 4.0]).unwrap());
        let p = gap_gmp_pool(&mut tape, m).unwrap();
        assert_eq!(tape.value(p), &[5.0]);
    }

    #[test]
    fn zero_maps_embed_to_zero() {
        let head = init_head(&[3, 5], HeadConfig { embedding_dim: 4 }, 1).unwrap();
        let mut tape = Tape::new();
        let vars = head.bind(&mut tape);
        let fl = tape.constant(Tensor::zeros([2, 4, 4, 3]));
        let fg = tape.constant(Tensor::zeros([2, 2, 2, 5]));
        let e = embed(&mut tape, fl, fg, &vars).unwrap();
        assert_eq!(tape.shape(e), &[2, 4]);
        assert!(tape.value(e).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn halves_are_independent() {
        let head = init_head(&[2, 2], HeadConfig { embedding_dim: 4 }, 2).unwrap();
        let run = |g: f64| {
            let mut tape = Tape::new();
            let vars = head.bind(&mut tape);
            let fl = tape.constant(Tensor::from_fn([1, 2, 2, 2], |i| i as f64 * 0.3));
            let fg = tape.constant(Tensor::full([1, 2, 2, 2], g));
            let e = embed(&mut tape, fl, fg, &vars).unwrap();
            tape.value(e).to_vec()
        };
        let (a, b) = (run(0.1), run(2.0));
        assert_eq!(a[..2], b[..2]);
        assert_ne!(a[2..], b[2..]);
    }

    #[test]
    fn odd_dimension_is_rejected() {
        assert!(init_head(&[3, 3], HeadConfig { embedding_dim: 5 }, 0).is_err());
        assert!(init_head(&[3], HeadConfig { embedding_dim: 5 }, 0).is_ok());
    }

    #[test]
    fn space_to_depth_layout() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = space_to_depth(&mut tape, x, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 4]);
        assert_eq!(tape.value(y), &[1.0, 2.0, 3.0, 4.0]);
        let same = space_to_depth(&mut tape, x, 1).unwrap();
        assert_eq!(tape.value(same), tape.value(x));
        let odd = tape.constant(Tensor::zeros([1, 3, 2, 1]));
        assert!(space_to_depth(&mut tape, odd, 2).is_err());
    }
}
