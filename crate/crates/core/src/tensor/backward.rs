use super::tape::{axis_split, space_to_depth_source, ConvGeom, Gradients, Node, Op, Tape, Var};
use super::{Result, TensorError};

/// Adds `contrib(i)` for every element of `v`'s gradient buffer, summing
/// down to a single value when `v` was broadcast as a scalar.
fn add_elementwise(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    v: Var,
    out_len: usize,
    contrib: impl Fn(usize) -> f64,
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let len = nodes[v.0].data.len();
    let g = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    if len == out_len {
        g.iter_mut()
            .enumerate()
            .for_each(|(i, gi)| *gi += contrib(i));
    } else {
        g[0] += (0..out_len).map(contrib).sum::<f64>();
    }
}

fn buffer<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &[Node],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].data.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

impl Tape {
    /// Reverse sweep from the scalar `loss`. Consumes the tape; the
    /// returned table holds the gradient of every node that depends on a
    /// differentiable leaf.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes;
        if loss.0 >= nodes.len() {
            return Err(TensorError::InvalidArgument {
                op: "backward",
                msg: format!("var {} not on this tape", loss.0),
            });
        }
        if nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalar(nodes[loss.0].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !matches!(node.op, Op::Leaf) {
                propagate(&nodes, &mut grads, node, &g);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], node: &Node, g: &[f64]) {
    let n = g.len();
    let value = |v: Var| nodes[v.0].data.as_slice();
    let at = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            add_elementwise(grads, nodes, *a, n, |i| g[i]);
            add_elementwise(grads, nodes, *b, n, |i| g[i]);
        }
        Op::Sub(a, b) => {
            add_elementwise(grads, nodes, *a, n, |i| g[i]);
            add_elementwise(grads, nodes, *b, n, |i| -g[i]);
        }
        Op::Mul(a, b) => {
            let (da, db) = (value(*a), value(*b));
            add_elementwise(grads, nodes, *a, n, |i| g[i] * at(db, i));
            add_elementwise(grads, nodes, *b, n, |i| g[i] * at(da, i));
        }
        Op::Exp(x) => {
            let y = &node.data;
            add_elementwise(grads, nodes, *x, n, |i| g[i] * y[i]);
        }
        Op::Log(x) => {
            let d = value(*x);
            add_elementwise(grads, nodes, *x, n, |i| g[i] / d[i]);
        }
        Op::Relu(x) => {
            let d = value(*x);
            add_elementwise(grads, nodes, *x, n, |i| if d[i] > 0.0 { g[i] } else { 0.0 });
        }
        Op::Affine { x, scale } => {
            add_elementwise(grads, nodes, *x, n, |i| g[i] * scale);
        }
        Op::AddBias { x, bias } => {
            add_elementwise(grads, nodes, *x, n, |i| g[i]);
            if let Some(gb) = buffer(grads, nodes, *bias) {
                let c = gb.len();
                g.iter().enumerate().for_each(|(i, v)| gb[i % c] += v);
            }
        }
        Op::MatMul(a, b) => {
            let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
            let (m, k, nn) = (sa[0], sa[1], sb[1]);
            let (da, db) = (value(*a), value(*b));
            if let Some(ga) = buffer(grads, nodes, *a) {
                for i in 0..m {
                    let grow = &g[i * nn..(i + 1) * nn];
                    for p in 0..k {
                        let brow = &db[p * nn..(p + 1) * nn];
                        ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            if let Some(gb) = buffer(grads, nodes, *b) {
                for i in 0..m {
                    let grow = &g[i * nn..(i + 1) * nn];
                    for p in 0..k {
                        let av = da[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        gb[p * nn..(p + 1) * nn]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(o, &gv)| *o += av * gv);
                    }
                }
            }
        }
        Op::Transpose(x) => {
            let (rows, cols) = (node.shape[0], node.shape[1]);
            if let Some(gx) = buffer(grads, nodes, *x) {
                // node is [rows, cols]; input is [cols, rows]
                for i in 0..rows {
                    for j in 0..cols {
                        gx[j * rows + i] += g[i * cols + j];
                    }
                }
            }
        }
        Op::Softmax { x, axis } => {
            let y = &node.data;
            let (outer, len, inner) = axis_split(&node.shape, *axis);
            if let Some(gx) = buffer(grads, nodes, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            gx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::Conv2d { x, w, stride, pad } => {
            let geom = ConvGeom::new(&nodes[x.0].shape, &nodes[w.0].shape, *stride, *pad)
                .expect("geometry validated in forward");
            let (xd, wd) = (value(*x), value(*w));
            let cout = geom.cout;
            if nodes[x.0].requires_grad {
                let mut gx = grads[x.0].take().unwrap_or_else(|| vec![0.0; xd.len()]);
                geom.for_each_tap(|x_base, w_base, o_base| {
                    let grow = &g[o_base..o_base + cout];
                    for ci in 0..geom.cin {
                        let wrow = &wd[w_base + ci * cout..w_base + (ci + 1) * cout];
                        gx[x_base + ci] += wrow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
                grads[x.0] = Some(gx);
            }
            if let Some(gw) = buffer(grads, nodes, *w) {
                geom.for_each_tap(|x_base, w_base, o_base| {
                    let grow = &g[o_base..o_base + cout];
                    for ci in 0..geom.cin {
                        let xv = xd[x_base + ci];
                        if xv == 0.0 {
                            continue;
                        }
                        gw[w_base + ci * cout..w_base + (ci + 1) * cout]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(o, &gv)| *o += xv * gv);
                    }
                });
            }
        }
        Op::SpatialMean(x) => {
            let s = &nodes[x.0].shape;
            let (hw, c) = (s[1] * s[2], s[3]);
            if let Some(gx) = buffer(grads, nodes, *x) {
                let inv = 1.0 / hw as f64;
                for (i, gi) in gx.iter_mut().enumerate() {
                    let b = i / (hw * c);
                    *gi += g[b * c + i % c] * inv;
                }
            }
        }
        Op::SpatialMax { x, argmax } => {
            if let Some(gx) = buffer(grads, nodes, *x) {
                argmax.iter().zip(g).for_each(|(&src, &gv)| gx[src] += gv);
            }
        }
        Op::Reshape(x) => add_elementwise(grads, nodes, *x, n, |i| g[i]),
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = axis_split(&node.shape, *axis);
            let mut offset = 0;
            for &v in inputs {
                let len = nodes[v.0].shape[*axis];
                if let Some(gv) = buffer(grads, nodes, v) {
                    for o in 0..outer {
                        let src =
                            &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        gv[o * len * inner..(o + 1) * len * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a += b);
                    }
                }
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let (outer, full, inner) = axis_split(&nodes[x.0].shape, *axis);
            let len = node.shape[*axis];
            if let Some(gx) = buffer(grads, nodes, *x) {
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    gx[dst..dst + len * inner]
                        .iter_mut()
                        .zip(&g[o * len * inner..(o + 1) * len * inner])
                        .for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::Sum(x) => {
            let len = nodes[x.0].data.len();
            add_elementwise(grads, nodes, *x, len, |_| g[0]);
        }
        Op::L2Normalize { x, axis, eps } => {
            let y = &node.data;
            let d = value(*x);
            let (outer, len, inner) = axis_split(&node.shape, *axis);
            if let Some(gx) = buffer(grads, nodes, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let norm = (0..len).map(|j| d[idx(j)] * d[idx(j)]).sum::<f64>().sqrt();
                        if norm > *eps {
                            let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..len {
                                gx[idx(j)] += (g[idx(j)] - y[idx(j)] * dot) / norm;
                            }
                        } else {
                            for j in 0..len {
                                gx[idx(j)] += g[idx(j)] / eps;
                            }
                        }
                    }
                }
            }
        }
        Op::Log1pSumExp { x, mask } => {
            let d = value(*x);
            let width = *nodes[x.0].shape.last().unwrap();
            let out = &node.data;
            if let Some(gx) = buffer(grads, nodes, *x) {
                for (i, gi) in gx.iter_mut().enumerate() {
                    if mask[i] {
                        let r = i / width;
                        *gi += g[r] * (d[i] - out[r]).exp();
                    }
                }
            }
        }
        Op::SpaceToDepth { x, block } => {
            let s = nodes[x.0].shape.clone();
            if let Some(gx) = buffer(grads, nodes, *x) {
                for (o, &gv) in g.iter().enumerate() {
                    gx[space_to_depth_source(&s, *block, o)] += gv;
                }
            }
        }
    }
}
