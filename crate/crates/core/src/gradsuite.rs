//! The registry of gradient checks run by `dmlkit gradcheck`: one case per
//! differentiable tape op, plus the composite blocks of the model and the
//! full image-to-loss graph.

use rand::Rng as _;

use crate::backbone::{backbone_forward, init_backbone, BackboneConfig, ConvSpec};
use crate::gradcheck::{check_gradients, GradcheckOptions, GradcheckReport};
use crate::head::{embed, gap_gmp_pool, init_head, HeadConfig};
use crate::losses::{
    cosine_similarity_matrix, hybrid_loss, init_proxies, ms_loss, proxy_anchor_loss, LossConfig,
};
use crate::model::{Model, ModelConfig};
use crate::params::Parameters;
use crate::rng::{self, normal_vec, Rng};
use crate::soa::{attention_map, init_soa, soa_forward, SoaConfig};
use crate::tensor::{Elementwise, Tensor};
use crate::Result;

type CaseFn = fn(&mut Rng, &GradcheckOptions) -> Result<GradcheckReport>;

/// A named gradient check.
pub struct Case {
    pub name: &'static str,
    run: CaseFn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub cases: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }
}

fn randn(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(rng, n, std)).expect("finite draws")
}

/// Uniform magnitudes in `[lo, hi]` with random sign, away from kinks at 0.
fn away_from_zero(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(lo..hi);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values so spatial maxima have no near-ties.
fn distinct(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
    Tensor::from_fn(shape.to_vec(), |i| {
        order[i] as f64 * 0.1 + rng.random_range(0.0..0.01)
    })
}

fn randomize<P: Parameters>(module: &mut P, rng: &mut Rng, std: f64) {
    module.visit_mut("", &mut |_, t| {
        let vals = normal_vec(rng, t.numel(), std);
        t.data_mut().copy_from_slice(&vals);
    });
}

fn params_of<P: Parameters>(module: &P) -> Vec<Tensor> {
    module
        .named_params()
        .into_iter()
        .map(|(_, t)| t.clone())
        .collect()
}

fn elementwise(
    kind: Elementwise,
    rng: &mut Rng,
    o: &GradcheckOptions,
    binary: bool,
) -> Result<GradcheckReport> {
    let a = match kind {
        Elementwise::Log => Tensor::from_fn([2, 3], |_| rng.random_range(0.5..2.0)),
        Elementwise::Relu => away_from_zero(rng, &[2, 3], 0.1, 1.0),
        _ => randn(rng, &[2, 3], 1.0),
    };
    let mut inputs = vec![a];
    if binary {
        inputs.push(randn(rng, &[2, 3], 1.0));
        inputs.push(randn(rng, &[1], 1.0));
    }
    check_gradients(
        &inputs,
        |t, v| {
            if binary {
                // full-shape then scalar-broadcast operand
                let full = t.elementwise(kind, v[0], Some(v[1]))?;
                Ok(t.elementwise(kind, full, Some(v[2]))?)
            } else {
                Ok(t.elementwise(kind, v[0], None)?)
            }
        },
        o,
    )
}

fn case_add(r: &mut Rng, o: &GradcheckOptions) -> Result<GradcheckReport> {
    elementwise(Elementwise::Add, r, o, true)
}
fn case_sub(r: &mut Rng, o: &GradcheckOptions) -> Result<GradcheckReport> {
    elementwise(Elementwise::Sub, r, o, true)
}
fn case_mul(r: &mut Rng, o: &GradcheckOptions) -> Result<GradcheckReport> {
    elementwise(Elementwise::Mul, r, o, true)
}
fn case_exp(r: &mut Rng, o: &GradcheckOptions) -> Result<GradcheckReport> {
    elementwise(Elementwise::Exp, r, o, false)
}
fn case_log(r: &mut Rng, o: &GradcheckOptions) -> Result<GradcheckReport> {
    elementwise(Elementwise::Log, r, o, false)
}
fn case_relu(r: &mut Rng, o: &GradcheckOptions) -> Result<GradcheckReport> {
    elementwise(Elementwise::Relu, r, o, false)
}
fn case_scale(r: &mut Rng, o: &GradcheckOptions) -> Result<GradcheckReport> {
    let c = r.random_range(-2.0..2.0);
    elementwise(Elementwise::Scale(c), r, o, false)
}

fn case_affine(r: &mut Rng, o: &GradcheckOptions) -> Result<GradcheckReport> {
    let x = randn(r, &[3, 2], 1.0);
    check_gradients(&[x], |t, v| Ok(t.affine(v[0], -1.7, 0.3)?), o)
}

fn case_add_bias(r: &mut Rng, o: &GradcheckOptions) -> Result<GradcheckReport> {
    let x = randn(r, &[2, 3, 4], 1.0);
    let b = randn(r, &[4], 1.0);
    check_gradients(&[x, b], |t, v| Ok(t.add_bias(v[0], v[1])?), o)
}

fn case_matmul(r: &mut Rng, o: &GradcheckOptions) -> Result<GradcheckReport> {
    let a = randn(r, &[3, 4], 1.0);
    let b = randn(r, &[4, 2], 1.0);
    check_gradients(&[a, b], |t, v| Ok(t.matmul(v[0], v[1])?), o)
}

fn case_transpose(r: &mut Rng, o: &GradcheckOptions) -> Result<GradcheckReport> {
    let a = randn(r, &[3, 5], 1.0);
    check_gradients(&[a], |t, v| Ok(t.transpose(v[0])?), o)
}

fn case_softmax(r: &mut Rng, o: &GradcheckOptions) -> Result<GradcheckReport> {
    let x = randn(r, &[2, 4, 3], 1.5);
    check_gradients(
        &[x],
        |t, v| {
            let mid = t.softmax(v[0], 1)?;
            Ok(t.softmax(mid, 2)?)
        },
        o,
    )
}

fn case_conv2d(r: &mut Rng, o: &GradcheckOptions) -> Result<GradcheckReport> {
    let x = randn(r, &[2, 5, 5, 3], 1.0);
    let w3 = randn(r, &[3, 3, 3, 4], 0.5);
    let w1 = randn(r, &[1, 1, 4, 2], 0.5);
    check_gradients(
        &[x, w3, w1],
        |t, v| {
            let h = t.conv2d(v[0], v[1], 2, 1)?;
            Ok(t.conv2d(h, v[2], 1, 0)?)
        },
        o,
    )
}

fn case_spatial_mean(r: &mut Rng, o: &GradcheckOptions) -> Result<GradcheckReport> {
    let x = randn(r, &[2, 3, 2, 3], 1.0);
    check_gradients(&[x], |t, v| Ok(t.spatial_mean(v[0])?), o)
}

fn case_spatial_max(r: &mut Rng, o: &GradcheckOptions) -> Result<GradcheckReport> {
    let x = distinct(r, &[2, 3, 2, 3]);
    check_gradients(&[x], |t, v| Ok(t.spatial_max(v[0])?), o)
}

fn case_reshape(r: &mut Rng, o: &GradcheckOptions) -> Result<GradcheckReport> {
    let x = randn(r, &[2, 6], 1.0);
    let w = randn(r, &[3, 2], 1.0);
    check_gradients(
        &[x, w],
        |t, v| {
            let y = t.reshape(v[0], &[4, 3])?;
            Ok(t.matmul(y, v[1])?)
        },
        o,
    )
}

fn case_concat(r: &mut Rng, o: &GradcheckOptions) -> Result<GradcheckReport> {
    let a = randn(r, &[2, 2, 3], 1.0);
    let b = randn(r, &[2, 1, 3], 1.0);
    check_gradients(&[a, b], |t, v| Ok(t.concat(&[v[0], v[1]], 1)?), o)
}

fn case_slice(r: &mut Rng, o: &GradcheckOptions) -> Result<GradcheckReport> {
    let x = randn(r, &[3, 5, 2], 1.0);
    check_gradients(&[x], |t, v| Ok(t.slice(v[0], 1, 1, 3)?), o)
}

fn case_sum(r: &mut Rng, o: &GradcheckOptions) -> Result<GradcheckReport> {
    let x = randn(r, &[4, 3], 1.0);
    check_gradients(
        &[x],
        |t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum(sq)?)
        },
        o,
    )
}

fn case_l2_normalize(r: &mut Rng, o: &GradcheckOptions) -> Result<GradcheckReport> {
    let x = randn(r, &[3, 4], 1.0);
    check_gradients(&[x], |t, v| Ok(t.l2_normalize(v[0], 1, 1e-12)?), o)
}

fn case_log1p_sum_exp(r: &mut Rng, o: &GradcheckOptions) -> Result<GradcheckReport> {
    let x = randn(r, &[3, 5], 3.0);
    let mut mask: Vec<bool> = (0..15).map(|_| r.random_bool(0.6)).collect();
    mask[0] = true;
    mask[10..].iter_mut().for_each(|m| *m = false);
    check_gradients(&[x], move |t, v| Ok(t.log1p_sum_exp(v[0], &mask)?), o)
}

fn case_space_to_depth(r: &mut Rng, o: &GradcheckOptions) -> Result<GradcheckReport> {
    let x = randn(r, &[2, 4, 4, 2], 1.0);
    check_gradients(&[x], |t, v| Ok(t.space_to_depth(v[0], 2)?), o)
}

fn soa_inputs(r: &mut Rng) -> Result<(Vec<Tensor>, crate::soa::SoaParams)> {
    let c = 4;
    let mut p = init_soa(c, SoaConfig::for_channels(c, 1.0), r.random())?;
    randomize(&mut p, r, 0.5);
    let mut inputs = vec![randn(r, &[2, 2, 3, c], 1.0)];
    inputs.extend(params_of(&p));
    Ok((inputs, p))
}

fn case_attention_map(r: &mut Rng, o: &GradcheckOptions) -> Result<GradcheckReport> {
    let (inputs, p) = soa_inputs(r)?;
    check_gradients(
        &inputs,
        |t, v| {
            let mut it = v[1..].iter().copied();
            let pv = p.bind_with(&mut |_| it.next().expect("one var per parameter"));
            let maps = attention_map(t, v[0], &pv)?;
            Ok(t.concat(&maps, 0)?)
        },
        o,
    )
}

fn case_soa_forward(r: &mut Rng, o: &GradcheckOptions) -> Result<GradcheckReport> {
    let (inputs, p) = soa_inputs(r)?;
    check_gradients(
        &inputs,
        |t, v| {
            let mut it = v[1..].iter().copied();
            let pv = p.bind_with(&mut |_| it.next().expect("one var per parameter"));
            Ok(soa_forward(t, v[0], &pv)?.output)
        },
        o,
    )
}

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        input_height: 6,
        input_width: 6,
        in_channels: 2,
        kernel: 3,
        local_stage: vec![ConvSpec {
            channels: 3,
            stride: 2,
        }],
        global_stage: vec![ConvSpec {
            channels: 4,
            stride: 1,
        }],
    }
}

fn case_backbone_forward(r: &mut Rng, o: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut p = init_backbone(&tiny_backbone(), r.random())?;
    randomize(&mut p, r, 0.5);
    let mut inputs = vec![randn(r, &[2, 6, 6, 2], 1.0)];
    inputs.extend(params_of(&p));
    check_gradients(
        &inputs,
        |t, v| {
            let mut it = v[1..].iter().copied();
            let pv = p.bind_with(&mut |_| it.next().expect("one var per parameter"));
            let (fl, fg) = backbone_forward(t, v[0], &pv)?;
            let fl = t.reshape(fl, &[54])?;
            let fg = t.reshape(fg, &[72])?;
            Ok(t.concat(&[fl, fg], 0)?)
        },
        o,
    )
}

fn case_gap_gmp_pool(r: &mut Rng, o: &GradcheckOptions) -> Result<GradcheckReport> {
    let x = distinct(r, &[2, 2, 3, 3]);
    check_gradients(&[x], |t, v| gap_gmp_pool(t, v[0]), o)
}

fn case_embed(r: &mut Rng, o: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut head = init_head(&[3, 5], HeadConfig { embedding_dim: 4 }, r.random())?;
    randomize(&mut head, r, 0.5);
    let mut inputs = vec![distinct(r, &[2, 2, 2, 3]), distinct(r, &[2, 1, 2, 5])];
    inputs.extend(params_of(&head));
    check_gradients(
        &inputs,
        |t, v| {
            let mut it = v[2..].iter().copied();
            let hv = head.bind_with(&mut |_| it.next().expect("one var per parameter"));
            embed(t, v[0], v[1], &hv)
        },
        o,
    )
}

fn case_cosine_similarity(r: &mut Rng, o: &GradcheckOptions) -> Result<GradcheckReport> {
    let a = randn(r, &[3, 4], 1.0);
    let b = randn(r, &[2, 4], 1.0);
    check_gradients(&[a, b], |t, v| cosine_similarity_matrix(t, v[0], v[1]), o)
}

const LABELS: [usize; 6] = [0, 0, 1, 1, 2, 1];

fn case_proxy_anchor_loss(r: &mut Rng, o: &GradcheckOptions) -> Result<GradcheckReport> {
    let bank = init_proxies(3, 4, r.random())?;
    let inputs = [randn(r, &[6, 4], 1.0), bank.proxies.clone()];
    let cfg = LossConfig::default().proxy_anchor;
    check_gradients(
        &inputs,
        |t, v| proxy_anchor_loss(t, v[0], &LABELS, v[1], &bank, &cfg),
        o,
    )
}

fn case_ms_loss(r: &mut Rng, o: &GradcheckOptions) -> Result<GradcheckReport> {
    let cfg = LossConfig::default().ms;
    let x = randn(r, &[6, 4], 1.0);
    check_gradients(&[x], |t, v| ms_loss(t, v[0], &LABELS, &cfg), o)
}

fn case_hybrid_loss(r: &mut Rng, o: &GradcheckOptions) -> Result<GradcheckReport> {
    let bank = init_proxies(3, 4, r.random())?;
    let inputs = [randn(r, &[6, 4], 1.0), bank.proxies.clone()];
    let cfg = LossConfig::default();
    check_gradients(
        &inputs,
        |t, v| Ok(hybrid_loss(t, v[0], &LABELS, v[1], &bank, &cfg)?.total),
        o,
    )
}

fn case_end_to_end(r: &mut Rng, o: &GradcheckOptions) -> Result<GradcheckReport> {
    let config = ModelConfig {
        backbone: BackboneConfig {
            input_height: 8,
            input_width: 8,
            in_channels: 3,
            kernel: 3,
            local_stage: vec![ConvSpec {
                channels: 4,
                stride: 2,
            }],
            global_stage: vec![ConvSpec {
                channels: 6,
                stride: 2,
            }],
        },
        embedding_dim: 6,
        ..ModelConfig::default()
    };
    let mut model = Model::new(&config, r.random())?;
    randomize(&mut model, r, 0.4);
    let bank = init_proxies(2, 6, r.random())?;
    let labels = [0, 1, 0, 1];
    let mut inputs = vec![Tensor::from_fn([4, 8, 8, 3], |_| r.random_range(0.0..1.0))];
    inputs.extend(params_of(&model));
    inputs.push(bank.proxies.clone());
    let cfg = LossConfig::default();
    let n = inputs.len();
    check_gradients(
        &inputs,
        |t, v| {
            let mut it = v[1..n - 1].iter().copied();
            let mv = model.bind_with(&mut |_| it.next().expect("one var per parameter"));
            let out = model.forward(t, v[0], &mv)?;
            Ok(hybrid_loss(t, out.embedding, &labels, v[n - 1], &bank, &cfg)?.total)
        },
        o,
    )
}

/// Every registered check, in report order. Names are unique.
pub fn registry() -> Vec<Case> {
    macro_rules! cases {
        ($($name:ident => $f:ident),* $(,)?) => {
            vec![$(Case { name: stringify!($name), run: $f }),*]
        };
    }
    cases![
        add => case_add,
        sub => case_sub,
        mul => case_mul,
        exp => case_exp,
        log => case_log,
        relu => case_relu,
        scale => case_scale,
        affine => case_affine,
        add_bias => case_add_bias,
        matmul => case_matmul,
        transpose => case_transpose,
        softmax => case_softmax,
        conv2d => case_conv2d,
        spatial_mean => case_spatial_mean,
        spatial_max => case_spatial_max,
        reshape => case_reshape,
        concat => case_concat,
        slice => case_slice,
        sum => case_sum,
        l2_normalize => case_l2_normalize,
        log1p_sum_exp => case_log1p_sum_exp,
        space_to_depth => case_space_to_depth,
        attention_map => case_attention_map,
        soa_forward => case_soa_forward,
        backbone_forward => case_backbone_forward,
        gap_gmp_pool => case_gap_gmp_pool,
        embed => case_embed,
        cosine_similarity => case_cosine_similarity,
        proxy_anchor_loss => case_proxy_anchor_loss,
        ms_loss => case_ms_loss,
        hybrid_loss => case_hybrid_loss,
        end_to_end => case_end_to_end,
    ]
}

/// Runs every case from inputs drawn with `seed`. `flip_sign` names a case
/// whose analytic gradient is negated before comparison, a fault the
/// suite must report.
pub fn run_suite(seed: u64, flip_sign: Option<&str>) -> Result<SuiteReport> {
    let base = GradcheckOptions {
        seed,
        ..GradcheckOptions::default()
    };
    let mut cases = Vec::new();
    for (i, case) in registry().into_iter().enumerate() {
        let mut rng = rng::seeded(seed, 0x100 + i as u64);
        let opts = GradcheckOptions {
            analytic_scale: if flip_sign == Some(case.name) {
                -1.0
            } else {
                1.0
            },
            ..base
        };
        let r = (case.run)(&mut rng, &opts)?;
        cases.push(CaseResult {
            name: case.name,
            max_rel_error: r.max_rel_error,
            coords_checked: r.coords_checked,
            passed: r.passed,
        });
    }
    Ok(SuiteReport {
        tolerance: base.tolerance,
        cases,
    })
}
