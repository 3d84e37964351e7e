//! AdamW with decoupled weight decay and per-group learning rates.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr_model: f64,
    pub lr_proxy: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_model: 1e-4,
            lr_proxy: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("lr_model", self.lr_model), ("lr_proxy", self.lr_proxy)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, "learning rate must be positive"));
            }
        }
        for (field, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(field, "must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::config("eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub lr: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Optimizer state. Parameters are passed to [`AdamW::step`] group by
/// group, in the same order on every call; moments are allocated on the
/// first step and their shapes are checked afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub groups: Vec<ParamGroup>,
    pub(crate) moments: Vec<Vec<Moments>>,
    pub(crate) t: u64,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, groups: Vec<ParamGroup>) -> Self {
        let moments = groups.iter().map(|_| Vec::new()).collect();
        Self {
            beta1,
            beta2,
            eps,
            groups,
            moments,
            t: 0,
        }
    }

    /// Two groups, `model` then `proxy`, sharing the configured decay.
    pub fn from_config(cfg: &OptimConfig) -> Self {
        let group = |name: &str, lr| ParamGroup {
            name: name.into(),
            lr,
            weight_decay: cfg.weight_decay,
        };
        Self::new(
            cfg.beta1,
            cfg.beta2,
            cfg.eps,
            vec![group("model", cfg.lr_model), group("proxy", cfg.lr_proxy)],
        )
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One AdamW update. `params[g]` holds the tensors of group `g`. The
    /// step is all-or-nothing: a missing or non-finite gradient anywhere
    /// aborts before any parameter changes.
    pub fn step(&mut self, params: &mut [Vec<&mut Tensor>]) -> Result<()> {
        if params.len() != self.groups.len() {
            return Err(Error::config(
                "optimizer",
                format!(
                    "{} parameter groups for {} configured",
                    params.len(),
                    self.groups.len()
                ),
            ));
        }
        for (g, group) in params.iter().enumerate() {
            let known = &self.moments[g];
            if !known.is_empty() && known.len() != group.len() {
                return Err(Error::config(
                    "optimizer",
                    format!("group {g} changed size"),
                ));
            }
            for (i, p) in group.iter().enumerate() {
                let grad = p.grad().ok_or_else(|| {
                    Error::Data(format!("missing gradient in group {g} param {i}"))
                })?;
                if grad.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        what: format!("gradient in group {g} param {i}"),
                    });
                }
                if let Some(mom) = known.get(i) {
                    if mom.m.len() != p.numel() {
                        return Err(Error::config(
                            "optimizer",
                            format!("group {g} param {i} changed shape"),
                        ));
                    }
                }
            }
        }

        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((group, cfg), moments) in params.iter_mut().zip(&self.groups).zip(&mut self.moments) {
            if moments.is_empty() {
                *moments = group
                    .iter()
                    .map(|p| Moments {
                        m: vec![0.0; p.numel()],
                        v: vec![0.0; p.numel()],
                    })
                    .collect();
            }
            for (p, mom) in group.iter_mut().zip(moments.iter_mut()) {
                let grad = p.grad().expect("checked above").to_vec();
                let data = p.data_mut();
                for i in 0..data.len() {
                    let g = grad[i];
                    mom.m[i] = b1 * mom.m[i] + (1.0 - b1) * g;
                    mom.v[i] = b2 * mom.v[i] + (1.0 - b2) * g * g;
                    let m_hat = mom.m[i] / bc1;
                    let v_hat = mom.v[i] / bc2;
                    data[i] -= cfg.lr * cfg.weight_decay * data[i];
                    data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }

    /// Clears the gradient accumulators of every passed parameter.
    pub fn zero_grads(params: &mut [Vec<&mut Tensor>]) {
        params.iter_mut().flatten().for_each(|p| p.zero_grad());
    }

    /// First and second moments by group and parameter position.
    pub fn moments(&self) -> impl Iterator<Item = (usize, usize, &[f64], &[f64])> {
        self.moments.iter().enumerate().flat_map(|(g, ms)| {
            ms.iter()
                .enumerate()
                .map(move |(i, m)| (g, i, m.m.as_slice(), m.v.as_slice()))
        })
    }

    /// Restores state written by [`AdamW::moments`] and [`AdamW::step_count`].
    pub fn restore(&mut self, t: u64, moments: Vec<Vec<(Vec<f64>, Vec<f64>)>>) -> Result<()> {
        if moments.len() != self.groups.len() {
            return Err(Error::config(
                "optimizer",
                "group count mismatch on restore",
            ));
        }
        self.t = t;
        self.moments = moments
            .into_iter()
            .map(|g| g.into_iter().map(|(m, v)| Moments { m, v }).collect())
            .collect();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(lr: f64, wd: f64) -> AdamW {
        AdamW::new(
            0.9,
            0.999,
            1e-8,
            vec![ParamGroup {
                name: "p".into(),
                lr,
                weight_decay: wd,
            }],
        )
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let mut opt = single(0.1, 0.0);
        let mut p = Tensor::new([2], vec![1.0, -2.0]).unwrap().with_grad();
        p.accumulate_grad(&[0.0, 0.0]).unwrap();
        opt.step(&mut [vec![&mut p]]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_by_hand() {
        let mut opt = single(0.1, 0.0);
        let mut p = Tensor::new([1], vec![1.0]).unwrap().with_grad();
        p.accumulate_grad(&[1.0]).unwrap();
        opt.step(&mut [vec![&mut p]]).unwrap();
        assert!((p.data()[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((p.data()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut opt = single(0.1, 0.5);
        let mut p = Tensor::new([1], vec![2.0]).unwrap().with_grad();
        p.accumulate_grad(&[0.0]).unwrap();
        opt.step(&mut [vec![&mut p]]).unwrap();
        // no adaptive term with zero gradient
        assert!((p.data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut opt = single(0.05, 0.0);
        let mut p = Tensor::new([1], vec![0.0]).unwrap().with_grad();
        for _ in 0..500 {
            p.clear_grad();
            let g = 2.0 * (p.data()[0] - 3.0);
            p.accumulate_grad(&[g]).unwrap();
            opt.step(&mut [vec![&mut p]]).unwrap();
        }
        assert!((p.data()[0] - 3.0).abs() < 1e-2, "theta = {}", p.data()[0]);
    }

    #[test]
    fn bad_gradients_abort_without_mutation() {
        let mut opt = single(0.1, 0.0);
        let mut a = Tensor::new([1], vec![1.0]).unwrap().with_grad();
        let mut b = Tensor::new([1], vec![1.0]).unwrap().with_grad();
        a.accumulate_grad(&[1.0]).unwrap();
        assert!(opt.step(&mut [vec![&mut a, &mut b]]).is_err());
        assert_eq!(a.data(), &[1.0]);
        assert_eq!(opt.step_count(), 0);
        b.accumulate_grad(&[f64::INFINITY]).unwrap();
        assert!(matches!(
            opt.step(&mut [vec![&mut a, &mut b]]),
            Err(Error::NonFinite { .. })
        ));
        assert_eq!(a.data(), &[1.0]);
    }

    #[test]
    fn zero_grads_clears() {
        let mut a = Tensor::zeros([3]).with_grad();
        a.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        AdamW::zero_grads(&mut [vec![&mut a]]);
        assert_eq!(a.grad().unwrap(), &[0.0; 3]);
    }
}
