//! Second-order attention: every spatial location of a feature map is
//! re-expressed through its softmax-normalized correlation with all other
//! locations, added back onto the input as a residual.
//!
//! For one sample with `hw` locations and projection width `d`:
//!
//! ```text
//! q, k, v = conv1x1(f)             each [hw, d]
//! a       = softmax_rows(zeta * q kᵀ)   [hw, hw]
//! out     = f + phi(a v)           phi: conv1x1 d -> C
//! ```
//!
//! Rows of `a` index query locations, columns key locations. Samples in a
//! batch never attend to each other.

use serde::{Deserialize, Serialize};

use crate::params::{join, Parameters};
use crate::rng::{self, normal_vec};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoaConfig {
    pub zeta: f64,
    /// Projection width of q, k and v.
    pub d: usize,
}

impl SoaConfig {
    /// `d = max(C / 2, 1)`.
    pub fn for_channels(channels: usize, zeta: f64) -> Self {
        Self {
            zeta,
            d: (channels / 2).max(1),
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if !self.zeta.is_finite() {
            return Err(Error::config("zeta", "must be finite"));
        }
        if self.d == 0 || self.d > channels {
            return Err(Error::config(
                "soa.d",
                format!("projection width {} outside 1..={channels}", self.d),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoaParams {
    pub config: SoaConfig,
    pub channels: usize,
    /// `[1,1,C,d]`
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    /// `[1,1,d,C]`
    pub wphi: Tensor,
    pub bphi: Tensor,
}

/// q/k/v projections He-normal, `phi` and all biases zero, so a fresh
/// block is the identity map.
pub fn init_soa(channels: usize, config: SoaConfig, seed: u64) -> Result<SoaParams> {
    config.validate(channels)?;
    let d = config.d;
    let mut rng = rng::seeded(seed, rng::stream::SOA);
    let std = (2.0 / channels as f64).sqrt();
    let mut proj = || {
        Tensor::new([1, 1, channels, d], normal_vec(&mut rng, channels * d, std))
            .map(Tensor::with_grad)
    };
    Ok(SoaParams {
        config,
        channels,
        wq: proj()?,
        wk: proj()?,
        wv: proj()?,
        bq: Tensor::zeros([d]).with_grad(),
        bk: Tensor::zeros([d]).with_grad(),
        bv: Tensor::zeros([d]).with_grad(),
        wphi: Tensor::zeros([1, 1, d, channels]).with_grad(),
        bphi: Tensor::zeros([channels]).with_grad(),
    })
}

macro_rules! soa_fields {
    ($m:ident) => {
        [
            ("wq", &$m.wq),
            ("bq", &$m.bq),
            ("wk", &$m.wk),
            ("bk", &$m.bk),
            ("wv", &$m.wv),
            ("bv", &$m.bv),
            ("wphi", &$m.wphi),
            ("bphi", &$m.bphi),
        ]
    };
}

impl Parameters for SoaParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (name, t) in soa_fields!(self) {
            f(join(prefix, name), t);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        let SoaParams {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wphi,
            bphi,
            ..
        } = self;
        for (name, t) in [
            ("wq", wq),
            ("bq", bq),
            ("wk", wk),
            ("bk", bk),
            ("wv", wv),
            ("bv", bv),
            ("wphi", wphi),
            ("bphi", bphi),
        ] {
            f(join(prefix, name), t);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SoaVars {
    pub config: SoaConfig,
    pub channels: usize,
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wphi: Var,
    bphi: Var,
}

impl SoaVars {
    pub fn vars(&self) -> Vec<Var> {
        vec![
            self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wphi, self.bphi,
        ]
    }
}

impl SoaParams {
    pub fn bind(&self, tape: &mut Tape) -> SoaVars {
        self.bind_with(&mut |t| tape.leaf(t))
    }

    /// Binds through `leaf`, called once per parameter in traversal order.
    pub fn bind_with(&self, leaf: &mut dyn FnMut(&Tensor) -> Var) -> SoaVars {
        SoaVars {
            config: self.config,
            channels: self.channels,
            wq: leaf(&self.wq),
            bq: leaf(&self.bq),
            wk: leaf(&self.wk),
            bk: leaf(&self.bk),
            wv: leaf(&self.wv),
            bv: leaf(&self.bv),
            wphi: leaf(&self.wphi),
            bphi: leaf(&self.bphi),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SoaOutput {
    /// Same shape as the input map.
    pub output: Var,
    /// One `[hw, hw]` attention matrix per sample.
    pub attention: Vec<Var>,
}

fn project(tape: &mut Tape, f: Var, w: Var, b: Var) -> Result<Var> {
    let c = tape.conv2d(f, w, 1, 0)?;
    Ok(tape.add_bias(c, b)?)
}

fn map_dims(tape: &Tape, f: Var, p: &SoaVars) -> Result<[usize; 4]> {
    match *tape.shape(f) {
        [b, h, w, c] if c == p.channels => Ok([b, h, w, c]),
        ref s => Err(Error::config(
            "soa.input",
            format!("expected [B,H,W,{}], got {s:?}", p.channels),
        )),
    }
}

/// Per-sample attention `softmax(zeta * q kᵀ)` over the last axis, plus the
/// projected values each map will be applied to.
fn attention_and_values(tape: &mut Tape, f: Var, p: &SoaVars) -> Result<(Vec<Var>, Vec<Var>)> {
    let [batch, h, w, _] = map_dims(tape, f, p)?;
    p.config.validate(p.channels)?;
    let d = p.config.d;
    let q = project(tape, f, p.wq, p.bq)?;
    let k = project(tape, f, p.wk, p.bk)?;
    let v = project(tape, f, p.wv, p.bv)?;
    let hw = h * w;
    let mut maps = Vec::with_capacity(batch);
    let mut values = Vec::with_capacity(batch);
    for n in 0..batch {
        let rows = |t: &mut Tape, x: Var| -> Result<Var> {
            let s = t.slice(x, 0, n, 1)?;
            Ok(t.reshape(s, &[hw, d])?)
        };
        let qn = rows(tape, q)?;
        let kn = rows(tape, k)?;
        let vn = rows(tape, v)?;
        let kt = tape.transpose(kn)?;
        let logits = tape.matmul(qn, kt)?;
        let scaled = tape.scale(logits, p.config.zeta)?;
        maps.push(tape.softmax(scaled, 1)?);
        values.push(vn);
    }
    Ok((maps, values))
}

/// The `[hw, hw]` attention matrix of each sample in `f`.
pub fn attention_map(tape: &mut Tape, f: Var, p: &SoaVars) -> Result<Vec<Var>> {
    Ok(attention_and_values(tape, f, p)?.0)
}

/// `f + phi(a v)`, shape-preserving.
pub fn soa_forward(tape: &mut Tape, f: Var, p: &SoaVars) -> Result<SoaOutput> {
    let [_, h, w, _] = map_dims(tape, f, p)?;
    let (maps, values) = attention_and_values(tape, f, p)?;
    let d = p.config.d;
    let mut mixed = Vec::with_capacity(maps.len());
    for (&a, &v) in maps.iter().zip(&values) {
        let av = tape.matmul(a, v)?;
        mixed.push(tape.reshape(av, &[1, h, w, d])?);
    }
    let stacked = tape.concat(&mixed, 0)?;
    let phi = project(tape, stacked, p.wphi, p.bphi)?;
    let output = tape.add(f, phi)?;
    Ok(SoaOutput {
        output,
        attention: maps,
    })
}

/// CSV dump of one attention matrix, row-major, one query location per line.
pub fn attention_csv(tape: &Tape, a: Var) -> String {
    let s = tape.shape(a);
    let cols = s[s.len() - 1];
    let mut out = String::new();
    for row in tape.value(a).chunks(cols) {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}
