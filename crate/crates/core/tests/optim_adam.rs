//! AdamW against a scalar re-derivation of the update rule.

use dmlkit_core::optim::{AdamW, OptimConfig, ParamGroup};
use dmlkit_core::Tensor;

/// One scalar AdamW step with decoupled decay; returns `(theta, m, v)`.
fn scalar_step(
    (theta, m, v): (f64, f64, f64),
    g: f64,
    t: i32,
    lr: f64,
    cfg: &OptimConfig,
) -> (f64, f64, f64) {
    let (wd, b1, b2, eps) = (cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps);
    let m = b1 * m + (1.0 - b1) * g;
    let v = b2 * v + (1.0 - b2) * g * g;
    let m_hat = m / (1.0 - b1.powi(t));
    let v_hat = v / (1.0 - b2.powi(t));
    let theta = theta * (1.0 - lr * wd) - lr * m_hat / (v_hat.sqrt() + eps);
    (theta, m, v)
}

#[test]
fn matches_scalar_rule_on_a_quadratic() {
    let cfg = OptimConfig {
        lr_model: 0.05,
        lr_proxy: 0.2,
        ..OptimConfig::default()
    };
    let targets = [1.5, -0.5, 3.0];
    let mut model = Tensor::new([2], vec![0.3, -0.2]).unwrap().with_grad();
    let mut proxy = Tensor::new([1], vec![-1.0]).unwrap().with_grad();
    let mut opt = AdamW::from_config(&cfg);

    let mut shadow: Vec<(f64, f64, f64)> =
        vec![(0.3, 0.0, 0.0), (-0.2, 0.0, 0.0), (-1.0, 0.0, 0.0)];
    let lrs = [cfg.lr_model, cfg.lr_model, cfg.lr_proxy];
    for t in 1..=200 {
        let gm: Vec<f64> = model
            .data()
            .iter()
            .zip(&targets[..2])
            .map(|(x, c)| 2.0 * (x - c))
            .collect();
        let gp = vec![2.0 * (proxy.data()[0] - targets[2])];
        model.zero_grad();
        proxy.zero_grad();
        model.accumulate_grad(&gm).unwrap();
        proxy.accumulate_grad(&gp).unwrap();
        opt.step(&mut [vec![&mut model], vec![&mut proxy]]).unwrap();

        for (i, s) in shadow.iter_mut().enumerate() {
            let g = 2.0 * (s.0 - targets[i]);
            *s = scalar_step(*s, g, t, lrs[i], &cfg);
        }
        let got = [model.data()[0], model.data()[1], proxy.data()[0]];
        for i in 0..3 {
            assert!(
                (got[i] - shadow[i].0).abs() <= 1e-12,
                "step {t} coord {i}: {} vs {}",
                got[i],
                shadow[i].0
            );
        }
    }
    assert_eq!(opt.step_count(), 200);
    assert!((proxy.data()[0] - targets[2]).abs() < 0.05);
}

#[test]
fn zero_gradient_leaves_only_decay() {
    let group = ParamGroup {
        name: "only".into(),
        lr: 0.1,
        weight_decay: 0.01,
    };
    let mut opt = AdamW::new(0.9, 0.999, 1e-8, vec![group]);
    let mut p = Tensor::new([3], vec![1.0, -2.0, 4.0]).unwrap().with_grad();
    for _ in 0..10 {
        p.zero_grad();
        p.accumulate_grad(&[0.0; 3]).unwrap();
        opt.step(&mut [vec![&mut p]]).unwrap();
    }
    let factor = (1.0f64 - 0.1 * 0.01).powi(10);
    for (got, start) in p.data().iter().zip([1.0, -2.0, 4.0]) {
        assert!((got - start * factor).abs() <= 1e-15);
    }
}

#[test]
fn non_finite_gradient_aborts_without_touching_parameters() {
    let mut opt = AdamW::from_config(&OptimConfig::default());
    let mut a = Tensor::new([2], vec![1.0, 2.0]).unwrap().with_grad();
    let mut b = Tensor::new([1], vec![3.0]).unwrap().with_grad();
    a.accumulate_grad(&[0.5, 0.5]).unwrap();
    b.accumulate_grad(&[f64::NAN]).unwrap();
    assert!(opt.step(&mut [vec![&mut a], vec![&mut b]]).is_err());
    assert_eq!(a.data(), &[1.0, 2.0]);
    assert_eq!(opt.step_count(), 0);
}
