//! Proxy-anchor, multi-similarity and hybrid objectives over cosine
//! similarity.
//!
//! Every `log(1 + sum exp(..))` is evaluated by [`Tape::log1p_sum_exp`],
//! which shifts by the running max, so the scaled logits (up to `±64` for
//! proxy-anchor and `100` for the multi-similarity negative term at the
//! default settings) never overflow.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::Parameters;
use crate::rng::{self, normal_vec};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Rows with a smaller norm are rejected by [`cosine_similarity_matrix`].
pub const MIN_ROW_NORM: f64 = 1e-12;

/// One learnable proxy per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyBank {
    /// `[num_classes, D]`, stored un-normalized.
    pub proxies: Tensor,
    classes: Vec<usize>,
    rows: BTreeMap<usize, usize>,
}

impl ProxyBank {
    pub fn new(proxies: Tensor, classes: Vec<usize>) -> Result<Self> {
        if proxies.ndim() != 2 || proxies.shape()[0] != classes.len() {
            return Err(Error::config(
                "proxies",
                format!(
                    "{:?} proxies for {} classes",
                    proxies.shape(),
                    classes.len()
                ),
            ));
        }
        let rows: BTreeMap<usize, usize> =
            classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        if rows.len() != classes.len() {
            return Err(Error::config("proxies", "duplicate class id"));
        }
        Ok(Self {
            proxies,
            classes,
            rows,
        })
    }

    /// Standard-normal proxies for an explicit class list.
    pub fn with_classes(classes: Vec<usize>, dim: usize, seed: u64) -> Result<Self> {
        if classes.is_empty() || dim == 0 {
            return Err(Error::config(
                "proxies",
                "need at least one class and dimension",
            ));
        }
        let mut rng = rng::seeded(seed, rng::stream::PROXIES);
        let t = Tensor::new(
            [classes.len(), dim],
            normal_vec(&mut rng, classes.len() * dim, 1.0),
        )?;
        Self::new(t.with_grad(), classes)
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn dim(&self) -> usize {
        self.proxies.shape()[1]
    }

    pub fn row_of(&self, class: usize) -> Result<usize> {
        self.rows
            .get(&class)
            .copied()
            .ok_or(Error::UnknownLabel(class))
    }
}

impl Parameters for ProxyBank {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(crate::params::join(prefix, "proxies"), &self.proxies);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(crate::params::join(prefix, "proxies"), &mut self.proxies);
    }
}

/// Proxies for classes `0..num_classes`, i.i.d. standard normal.
pub fn init_proxies(num_classes: usize, dim: usize, seed: u64) -> Result<ProxyBank> {
    ProxyBank::with_classes((0..num_classes).collect(), dim, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxyAnchorConfig {
    pub alpha: f64,
    pub delta: f64,
}

impl Default for ProxyAnchorConfig {
    fn default() -> Self {
        Self {
            alpha: 32.0,
            delta: 0.1,
        }
    }
}

impl ProxyAnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha", "must be positive"));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::config("delta", "must be positive"));
        }
        Ok(())
    }
}

/// Sign of the margin in the negative-pair exponent `beta * (S ± sigma)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MarginSign {
    #[default]
    Plus,
    Minus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MsConfig {
    pub gamma: f64,
    pub beta: f64,
    pub sigma: f64,
    pub negative_margin_sign: MarginSign,
}

impl Default for MsConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            beta: 50.0,
            sigma: 1.0,
            negative_margin_sign: MarginSign::Plus,
        }
    }
}

impl MsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("gamma", "must be positive"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta", "must be positive"));
        }
        if !self.sigma.is_finite() {
            return Err(Error::config("sigma", "must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridConfig {
    pub lambda: f64,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self { lambda: 0.03 }
    }
}

impl HybridConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", "must be finite and non-negative"));
        }
        Ok(())
    }
}

fn check_rows(tape: &Tape, x: Var, what: &str) -> Result<(usize, usize)> {
    let s = tape.shape(x);
    if s.len() != 2 {
        return Err(Error::config(
            what,
            format!("expected a 2-d matrix, got {s:?}"),
        ));
    }
    let (n, d) = (s[0], s[1]);
    for (i, row) in tape.value(x).chunks(d).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < MIN_ROW_NORM {
            return Err(Error::Data(format!(
                "{what} row {i} has near-zero norm {norm:e}"
            )));
        }
    }
    Ok((n, d))
}

/// `S[i, j] = <a_i, b_j> / (|a_i| |b_j|)` for `a: [n, D]`, `b: [m, D]`.
pub fn cosine_similarity_matrix(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (_, da) = check_rows(tape, a, "lhs")?;
    let (_, db) = check_rows(tape, b, "rhs")?;
    if da != db {
        return Err(Error::config("similarity", format!("dims {da} vs {db}")));
    }
    let an = tape.l2_normalize(a, 1, MIN_ROW_NORM)?;
    let bn = if a == b {
        an
    } else {
        tape.l2_normalize(b, 1, MIN_ROW_NORM)?
    };
    let bt = tape.transpose(bn)?;
    Ok(tape.matmul(an, bt)?)
}

/// Proxy-anchor loss. Positive term averaged over proxies with at least one
/// positive in the batch, negative term over all proxies.
pub fn proxy_anchor_loss(
    tape: &mut Tape,
    x: Var,
    labels: &[usize],
    proxies: Var,
    bank: &ProxyBank,
    cfg: &ProxyAnchorConfig,
) -> Result<Var> {
    cfg.validate()?;
    if labels.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    if tape.shape(x).first() != Some(&labels.len()) {
        return Err(Error::config(
            "labels",
            "one label per embedding row required",
        ));
    }
    let rows: Vec<usize> = labels
        .iter()
        .map(|&l| bank.row_of(l))
        .collect::<Result<_>>()?;
    let (np, b) = (bank.num_classes(), labels.len());
    let sim = cosine_similarity_matrix(tape, x, proxies)?;
    let by_proxy = tape.transpose(sim)?;

    let pos_mask: Vec<bool> = (0..np * b).map(|i| rows[i % b] == i / b).collect();
    let neg_mask: Vec<bool> = pos_mask.iter().map(|m| !m).collect();
    let with_pos: Vec<bool> = (0..np).map(|p| rows.contains(&p)).collect();
    let n_pos = with_pos.iter().filter(|&&on| on).count() as f64;

    let (a, d) = (cfg.alpha, cfg.delta);
    let pos_logits = tape.affine(by_proxy, -a, a * d)?;
    let pos = tape.log1p_sum_exp(pos_logits, &pos_mask)?;
    let neg_logits = tape.affine(by_proxy, a, a * d)?;
    let neg = tape.log1p_sum_exp(neg_logits, &neg_mask)?;

    let pos_w = tape.constant(Tensor::from_fn([np], |p| {
        if with_pos[p] {
            1.0 / n_pos
        } else {
            0.0
        }
    }));
    let weighted_pos = tape.mul(pos, pos_w)?;
    let pos_term = tape.sum(weighted_pos)?;
    let neg_total = tape.sum(neg)?;
    let neg_term = tape.scale(neg_total, 1.0 / np as f64)?;
    Ok(tape.add(pos_term, neg_term)?)
}

/// Multi-similarity loss over all in-batch pairs, averaged over the batch.
pub fn ms_loss(tape: &mut Tape, x: Var, labels: &[usize], cfg: &MsConfig) -> Result<Var> {
    cfg.validate()?;
    let m = labels.len();
    if m < 2 {
        return Err(Error::Data(format!(
            "multi-similarity loss needs a batch of at least 2, got {m}"
        )));
    }
    if tape.shape(x).first() != Some(&m) {
        return Err(Error::config(
            "labels",
            "one label per embedding row required",
        ));
    }
    let sim = cosine_similarity_matrix(tape, x, x)?;
    let pos_mask: Vec<bool> = (0..m * m)
        .map(|i| {
            let (r, c) = (i / m, i % m);
            r != c && labels[r] == labels[c]
        })
        .collect();
    let neg_mask: Vec<bool> = (0..m * m).map(|i| labels[i / m] != labels[i % m]).collect();

    let (g, beta, s) = (cfg.gamma, cfg.beta, cfg.sigma);
    let pos_logits = tape.affine(sim, -g, g * s)?;
    let pos = tape.log1p_sum_exp(pos_logits, &pos_mask)?;
    let margin = match cfg.negative_margin_sign {
        MarginSign::Plus => s,
        MarginSign::Minus => -s,
    };
    let neg_logits = tape.affine(sim, beta, beta * margin)?;
    let neg = tape.log1p_sum_exp(neg_logits, &neg_mask)?;

    let pos_total = tape.sum(pos)?;
    let pos_term = tape.scale(pos_total, 1.0 / (g * m as f64))?;
    let neg_total = tape.sum(neg)?;
    let neg_term = tape.scale(neg_total, 1.0 / (beta * m as f64))?;
    Ok(tape.add(pos_term, neg_term)?)
}

/// Hyperparameters of the full objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossConfig {
    pub proxy_anchor: ProxyAnchorConfig,
    pub ms: MsConfig,
    pub hybrid: HybridConfig,
}

/// The two components alongside their weighted sum.
#[derive(Debug, Clone, Copy)]
pub struct HybridTerms {
    pub total: Var,
    pub ms: Var,
    pub proxy: Var,
}

/// `ms_loss + lambda * proxy_anchor_loss`.
pub fn hybrid_loss(
    tape: &mut Tape,
    x: Var,
    labels: &[usize],
    proxies: Var,
    bank: &ProxyBank,
    cfg: &LossConfig,
) -> Result<HybridTerms> {
    cfg.hybrid.validate()?;
    let ms_v = ms_loss(tape, x, labels, &cfg.ms)?;
    let pa_v = proxy_anchor_loss(tape, x, labels, proxies, bank, &cfg.proxy_anchor)?;
    let scaled = tape.scale(pa_v, cfg.hybrid.lambda)?;
    let total = tape.add(ms_v, scaled)?;
    Ok(HybridTerms {
        total,
        ms: ms_v,
        proxy: pa_v,
    })
}
