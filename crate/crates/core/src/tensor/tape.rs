use super::{numel, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(super) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kinds accepted by [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Exp,
    Log,
    Relu,
    Scale(f64),
}

#[derive(Debug)]
pub(super) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Affine {
        x: Var,
        scale: f64,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    MatMul(Var, Var),
    Transpose(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    SpatialMean(Var),
    SpatialMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    L2Normalize {
        x: Var,
        axis: usize,
        eps: f64,
    },
    Log1pSumExp {
        x: Var,
        mask: Vec<bool>,
    },
    SpaceToDepth {
        x: Var,
        block: usize,
    },
}

#[derive(Debug)]
pub(super) struct Node {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub op: Op,
    pub requires_grad: bool,
}

/// Records one forward pass. Nodes are appended in evaluation order, so
/// every node's inputs precede it and the reverse sweep in
/// [`Tape::backward`] is a plain reverse iteration.
#[derive(Debug, Default)]
pub struct Tape {
    pub(super) nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    pub(super) grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `target`'s accumulator. A var that
    /// received no gradient contributes zeros.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => target.accumulate_grad(g),
            None => target.accumulate_grad(&vec![0.0; target.numel()]),
        }
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(super) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

/// Flat source index in `[B,H,W,C]` for output index `o` of space-to-depth.
pub(super) fn space_to_depth_source(in_shape: &[usize], block: usize, o: usize) -> usize {
    let (h, w, c) = (in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow, oc) = (h / block, w / block, c * block * block);
    let ch = o % oc;
    let ox = (o / oc) % ow;
    let oy = (o / (oc * ow)) % oh;
    let b = o / (oc * ow * oh);
    let pos = ch / c;
    let ci = ch % c;
    let (dy, dx) = (pos / block, pos % block);
    ((b * h + oy * block + dy) * w + ox * block + dx) * c + ci
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies the recorded value out as a detached tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("tape values are validated on push")
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        let n = &self.nodes[v.0];
        if n.data.len() == 1 {
            Ok(n.data[0])
        } else {
            Err(TensorError::NonScalar(n.shape.clone()))
        }
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
    ) -> Result<Var> {
        debug_assert_eq!(numel(&shape), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            other => inputs_of(other)
                .iter()
                .any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records `t` as a leaf, honoring its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Records `t` as a differentiable leaf regardless of its flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), true)
    }

    /// Records `t` as a non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push_leaf(shape, t.into_data(), false)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            data,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || {
            b.ok_or(TensorError::InvalidArgument {
                op: "elementwise",
                msg: "binary kind needs a second operand".into(),
            })
        };
        match kind {
            Elementwise::Add => self.add(a, need_b()?),
            Elementwise::Sub => self.sub(a, need_b()?),
            Elementwise::Mul => self.mul(a, need_b()?),
            Elementwise::Exp => self.exp(a),
            Elementwise::Log => self.log(a),
            Elementwise::Relu => self.relu(a),
            Elementwise::Scale(c) => self.scale(a, c),
        }
    }

    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || (numel(sb) == 1 && sa.len() >= sb.len()) {
            Ok(sa.to_vec())
        } else if numel(sa) == 1 && sb.len() >= sa.len() {
            Ok(sb.to_vec())
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let shape = self.broadcast_shape(name, a, b)?;
        let (da, db) = (self.value(a), self.value(b));
        let n = numel(&shape);
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let x = if da.len() == 1 { da[0] } else { da[i] };
                let y = if db.len() == 1 { db[0] } else { db[i] };
                f(x, y)
            })
            .collect();
        self.push(name, shape, data, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let data = self.value(x).iter().map(|&v| f(v)).collect();
        self.push(name, shape, data, op)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(&bad) = self.value(x).iter().find(|&&v| v <= 0.0) {
            return Err(TensorError::NonPositiveLog(bad));
        }
        self.unary("log", x, f64::ln, Op::Log(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.affine(x, c, 0.0)
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.unary("affine", x, |v| scale * v + shift, Op::Affine { x, scale })
    }

    /// Adds a `[C]` bias along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias).to_vec();
        if sb.len() != 1 || sx.last() != sb.first() {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: sx,
                rhs: sb,
            });
        }
        let c = sb[0];
        let bv = self.value(bias);
        let data = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % c])
            .collect();
        self.push("add_bias", sx, data, Op::AddBias { x, bias })
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.value(a), self.value(b), m, k, n);
        self.push("matmul", vec![m, n], data, Op::MatMul(a, b))
    }

    /// Swaps the two axes of a 2-d tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                msg: format!("expected rank 2, got {s:?}"),
            });
        }
        let (m, n) = (s[0], s[1]);
        let d = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        self.push("transpose", vec![n, m], out, Op::Transpose(x))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let ndim = self.shape(x).len();
        if axis >= ndim {
            return Err(TensorError::InvalidAxis { op, axis, ndim });
        }
        Ok(())
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        let d = self.value(x);
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len)
                    .map(|j| d[idx(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (d[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        self.push("softmax", shape, out, Op::Softmax { x, axis })
    }

    /// Zero-padded cross-correlation of `x: [B,H,W,Cin]` with
    /// `w: [kh,kw,Cin,Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[3] != sw[2] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                msg: "stride must be positive".into(),
            });
        }
        let geom = ConvGeom::new(&sx, &sw, stride, pad)?;
        let mut out = vec![0.0; geom.out_len()];
        let (xd, wd) = (self.value(x), self.value(w));
        geom.for_each_tap(|x_base, w_base, o_base| {
            let orow = &mut out[o_base..o_base + geom.cout];
            for ci in 0..geom.cin {
                let xv = xd[x_base + ci];
                if xv == 0.0 {
                    continue;
                }
                let wrow = &wd[w_base + ci * geom.cout..w_base + (ci + 1) * geom.cout];
                orow.iter_mut().zip(wrow).for_each(|(o, &wv)| *o += xv * wv);
            }
        });
        self.push(
            "conv2d",
            geom.out_shape(),
            out,
            Op::Conv2d { x, w, stride, pad },
        )
    }

    fn spatial_dims(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(TensorError::InvalidArgument {
                op,
                msg: format!("expected a [B,H,W,C] map, got {s:?}"),
            });
        }
        Ok((s[0], s[1] * s[2], s[3]))
    }

    /// Per-channel spatial mean: `[B,H,W,C] -> [B,C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let (b, hw, c) = self.spatial_dims("spatial_mean", x)?;
        let d = self.value(x);
        let mut out = vec![0.0; b * c];
        for n in 0..b {
            for p in 0..hw {
                let row = &d[(n * hw + p) * c..(n * hw + p + 1) * c];
                out[n * c..(n + 1) * c]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(o, v)| *o += v);
            }
        }
        out.iter_mut().for_each(|v| *v /= hw as f64);
        self.push("spatial_mean", vec![b, c], out, Op::SpatialMean(x))
    }

    /// Per-channel spatial max: `[B,H,W,C] -> [B,C]`. Ties resolve to the
    /// first location in row-major order.
    pub fn spatial_max(&mut self, x: Var) -> Result<Var> {
        let (b, hw, c) = self.spatial_dims("spatial_max", x)?;
        let d = self.value(x);
        let mut out = vec![f64::NEG_INFINITY; b * c];
        let mut argmax = vec![0usize; b * c];
        for n in 0..b {
            for p in 0..hw {
                for ch in 0..c {
                    let i = (n * hw + p) * c + ch;
                    if d[i] > out[n * c + ch] {
                        out[n * c + ch] = d[i];
                        argmax[n * c + ch] = i;
                    }
                }
            }
        }
        self.push("spatial_max", vec![b, c], out, Op::SpatialMax { x, argmax })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.contains(&0) || numel(shape) != self.value(x).len() {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                len: self.value(x).len(),
            });
        }
        let data = self.value(x).to_vec();
        self.push("reshape", shape.to_vec(), data, Op::Reshape(x))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or(TensorError::EmptyExtent { op: "concat" })?;
        self.check_axis("concat", *first, axis)?;
        let base = self.shape(*first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let d = self.value(v);
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            "concat",
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("slice", x, axis)?;
        let shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                msg: format!(
                    "range {start}..{} outside axis of length {}",
                    start + len,
                    shape[axis]
                ),
            });
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let d = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            out.extend_from_slice(&d[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push("slice", out_shape, out, Op::Slice { x, axis, start })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).iter().sum();
        self.push("sum", Vec::new(), vec![total], Op::Sum(x))
    }

    /// `x / max(||x||, eps)` along `axis`.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        self.check_axis("l2_normalize", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        let d = self.value(x);
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let norm = (0..len).map(|j| d[idx(j)] * d[idx(j)]).sum::<f64>().sqrt();
                let denom = norm.max(eps);
                for j in 0..len {
                    out[idx(j)] = d[idx(j)] / denom;
                }
            }
        }
        self.push("l2_normalize", shape, out, Op::L2Normalize { x, axis, eps })
    }

    /// `log(1 + sum_{j: mask} exp(x[.., j]))` over the last axis, computed
    /// with a max shift so large logits cannot overflow. An all-false row
    /// yields exactly 0.
    pub fn log1p_sum_exp(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || mask.len() != numel(&shape) {
            return Err(TensorError::ShapeMismatch {
                op: "log1p_sum_exp",
                lhs: shape,
                rhs: vec![mask.len()],
            });
        }
        let n = *shape.last().unwrap();
        let d = self.value(x);
        let rows = d.len() / n;
        let mut out = vec![0.0; rows];
        for (r, o) in out.iter_mut().enumerate() {
            let row = &d[r * n..(r + 1) * n];
            let m = &mask[r * n..(r + 1) * n];
            let shift = row
                .iter()
                .zip(m)
                .filter(|(_, &on)| on)
                .map(|(&v, _)| v)
                .fold(0.0, f64::max);
            let tail: f64 = row
                .iter()
                .zip(m)
                .filter(|(_, &on)| on)
                .map(|(&v, _)| (v - shift).exp())
                .sum();
            *o = shift + ((-shift).exp() + tail).ln();
        }
        self.push(
            "log1p_sum_exp",
            shape[..shape.len() - 1].to_vec(),
            out,
            Op::Log1pSumExp {
                x,
                mask: mask.to_vec(),
            },
        )
    }

    /// Moves each `block x block` spatial patch into channels:
    /// `[B,h,w,C] -> [B,h/b,w/b,C*b*b]`. Output channel
    /// `(dy * block + dx) * C + c` holds input channel `c` at patch offset
    /// `(dy, dx)`.
    pub fn space_to_depth(&mut self, x: Var, block: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || block == 0 || !s[1].is_multiple_of(block) || !s[2].is_multiple_of(block)
        {
            return Err(TensorError::InvalidArgument {
                op: "space_to_depth",
                msg: format!("shape {s:?} not divisible by block {block}"),
            });
        }
        let out_shape = vec![s[0], s[1] / block, s[2] / block, s[3] * block * block];
        let d = self.value(x);
        let out = (0..d.len())
            .map(|o| d[space_to_depth_source(&s, block, o)])
            .collect();
        self.push(
            "space_to_depth",
            out_shape,
            out,
            Op::SpaceToDepth { x, block },
        )
    }
}

pub(super) fn inputs_of(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
        Op::AddBias { x, bias } => vec![*x, *bias],
        Op::Conv2d { x, w, .. } => vec![*x, *w],
        Op::Concat { inputs, .. } => inputs.clone(),
        Op::Exp(x)
        | Op::Log(x)
        | Op::Relu(x)
        | Op::Transpose(x)
        | Op::SpatialMean(x)
        | Op::Reshape(x)
        | Op::Sum(x)
        | Op::Affine { x, .. }
        | Op::Softmax { x, .. }
        | Op::SpatialMax { x, .. }
        | Op::Slice { x, .. }
        | Op::L2Normalize { x, .. }
        | Op::Log1pSumExp { x, .. }
        | Op::SpaceToDepth { x, .. } => vec![*x],
    }
}

pub(super) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, &bv)| *o += av * bv);
        }
    }
    out
}

/// Index arithmetic shared by the conv forward and backward passes.
pub(super) struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(sx: &[usize], sw: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (h, w) = (sx[1] + 2 * pad, sx[2] + 2 * pad);
        if h < sw[0] || w < sw[1] {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                msg: format!(
                    "kernel {}x{} larger than padded input {h}x{w}",
                    sw[0], sw[1]
                ),
            });
        }
        Ok(Self {
            batch: sx[0],
            h: sx[1],
            w: sx[2],
            cin: sx[3],
            kh: sw[0],
            kw: sw[1],
            cout: sw[3],
            oh: (h - sw[0]) / stride + 1,
            ow: (w - sw[1]) / stride + 1,
            stride,
            pad,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.oh, self.ow, self.cout]
    }

    pub fn out_len(&self) -> usize {
        self.batch * self.oh * self.ow * self.cout
    }

    /// Calls `f(x_base, w_base, out_base)` for every in-bounds kernel tap.
    /// `x_base` indexes channel 0 of an input pixel, `w_base` channel 0 of
    /// the matching `[ci, cout]` weight slab and `out_base` channel 0 of the
    /// output pixel.
    pub fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for b in 0..self.batch {
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let o_base = ((b * self.oh + oy) * self.ow + ox) * self.cout;
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let x_base =
                                ((b * self.h + iy as usize) * self.w + ix as usize) * self.cin;
                            let w_base = (ky * self.kw + kx) * self.cin * self.cout;
                            f(x_base, w_base, o_base);
                        }
                    }
                }
            }
        }
    }
}
