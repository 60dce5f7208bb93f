//! Tape-based reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! A [`Graph`] is rebuilt per training step; parameters enter as grad-tracked
//! leaves, data as constants. [`Graph::backward`] returns a fresh gradient set
//! for one loss node, so several losses can be differentiated independently on
//! the same graph without cross-contamination — the teacher's update is
//! computed from the teacher's loss alone even when both models share forward
//! nodes.
//!
//! All stored values are standard-layout owned arrays. Ops are deterministic:
//! the same graph produces bit-identical values and gradients on every run.

use ndarray::{ArrayD, ArrayView2, ArrayViewD, Axis, Ix2, IxDyn};

pub type NodeId = usize;

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    /// lhs + rhs with rhs broadcast to lhs shape (rhs axes of size 1 or missing).
    AddBroadcast(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Elementwise multiply by a constant (same shape as input).
    MulConst(NodeId, ArrayD<f64>),
    /// a * x + b; only the multiplier matters to the gradient.
    Affine(NodeId, f64),
    Matmul(NodeId, NodeId),
    /// [L.., M, K] x [L.., K, N] with identical leading dims.
    BatchMatmul(NodeId, NodeId),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    Concat(Vec<NodeId>, usize),
    SliceAxis(NodeId, usize, usize, usize),
    /// [1, rest..] -> [b, rest..]
    BroadcastAxis0(NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    SoftmaxLast(NodeId),
    LogSoftmaxLast(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: ArrayD<f64>,
        inv_std: ArrayD<f64>,
    },
    SumAll(NodeId),
    MeanAll(NodeId),
    SumAxisLast(NodeId),
    Abs(NodeId),
    /// Row-wise cosine similarity of two [n, d] arrays -> [n].
    CosineRows(NodeId, NodeId),
    /// Per-element binary cross-entropy on logits against constant targets.
    BceWithLogits(NodeId, ArrayD<f64>),
    /// [B, H, W, C] -> [B, T, p*p*C] patch flattening.
    PatchExtract(NodeId, usize),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients from one [`Graph::backward`] call, indexed by `NodeId`.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. node `id`; `None` when no path reaches it.
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn standard(value: ArrayD<f64>) -> ArrayD<f64> {
    if value.is_standard_layout() {
        value
    } else {
        value.as_standard_layout().to_owned()
    }
}

fn mm(a: ArrayView2<f64>, b: ArrayView2<f64>) -> ArrayD<f64> {
    a.dot(&b).into_dyn()
}

fn as2(v: ArrayViewD<f64>) -> ndarray::ArrayView2<f64> {
    v.into_dimensionality::<Ix2>().expect("2-d value")
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id].value;
        debug_assert_eq!(v.len(), 1, "scalar() on non-scalar node");
        v.iter().copied().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value: standard(value),
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Grad-tracked leaf (parameters, or inputs under a gradient probe).
    pub fn var(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf: no gradient ever flows into or through it.
    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Value copy with the tape cut: gradients stop here.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.clone();
        self.push(v, Op::Leaf, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[a].value.shape(), self.nodes[b].value.shape());
        let v = &self.nodes[a].value + &self.nodes[b].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn add_broadcast(&mut self, lhs: NodeId, rhs: NodeId) -> NodeId {
        let v = &self.nodes[lhs].value + &self.nodes[rhs].value;
        debug_assert_eq!(v.shape(), self.nodes[lhs].value.shape());
        let rg = self.rg(lhs) || self.rg(rhs);
        self.push(v, Op::AddBroadcast(lhs, rhs), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[a].value.shape(), self.nodes[b].value.shape());
        let v = &self.nodes[a].value - &self.nodes[b].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[a].value.shape(), self.nodes[b].value.shape());
        let v = &self.nodes[a].value * &self.nodes[b].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn mul_const(&mut self, x: NodeId, c: ArrayD<f64>) -> NodeId {
        debug_assert_eq!(self.nodes[x].value.shape(), c.shape());
        let v = &self.nodes[x].value * &c;
        let rg = self.rg(x);
        self.push(v, Op::MulConst(x, c), rg)
    }

    /// a * x + b, elementwise with scalars a and b.
    pub fn affine(&mut self, x: NodeId, a: f64, b: f64) -> NodeId {
        let v = self.nodes[x].value.mapv(|t| a * t + b);
        let rg = self.rg(x);
        self.push(v, Op::Affine(x, a), rg)
    }

    pub fn scale(&mut self, x: NodeId, a: f64) -> NodeId {
        self.affine(x, a, 0.0)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = mm(as2(self.nodes[a].value.view()), as2(self.nodes[b].value.view()));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Matmul(a, b), rg)
    }

    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        let ra = av.ndim();
        debug_assert_eq!(ra, bv.ndim());
        debug_assert!(ra >= 3);
        debug_assert_eq!(av.shape()[..ra - 2], bv.shape()[..ra - 2]);
        debug_assert_eq!(av.shape()[ra - 1], bv.shape()[ra - 2]);
        let lead: usize = av.shape()[..ra - 2].iter().product();
        let (m, k) = (av.shape()[ra - 2], av.shape()[ra - 1]);
        let n = bv.shape()[ra - 1];
        let a3 = av.view().into_shape_with_order((lead, m, k)).unwrap();
        let b3 = bv.view().into_shape_with_order((lead, k, n)).unwrap();
        let mut out = ndarray::Array3::<f64>::zeros((lead, m, n));
        for l in 0..lead {
            out.index_axis_mut(Axis(0), l)
                .assign(&a3.index_axis(Axis(0), l).dot(&b3.index_axis(Axis(0), l)));
        }
        let mut shape: Vec<usize> = av.shape()[..ra - 2].to_vec();
        shape.push(m);
        shape.push(n);
        let v = out.into_shape_with_order(IxDyn(&shape)).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::BatchMatmul(a, b), rg)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = self.nodes[x]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        let rg = self.rg(x);
        self.push(v, Op::Reshape(x), rg)
    }

    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> NodeId {
        let v = self.nodes[x].value.view().permuted_axes(IxDyn(axes)).to_owned();
        let rg = self.rg(x);
        self.push(v, Op::Permute(x, axes.to_vec()), rg)
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p].value.view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::Concat(parts.to_vec(), axis), rg)
    }

    pub fn slice_axis(&mut self, x: NodeId, axis: usize, start: usize, end: usize) -> NodeId {
        let v = self.nodes[x]
            .value
            .slice_axis(Axis(axis), ndarray::Slice::from(start..end))
            .to_owned();
        let rg = self.rg(x);
        self.push(v, Op::SliceAxis(x, axis, start, end), rg)
    }

    pub fn broadcast_axis0(&mut self, x: NodeId, b: usize) -> NodeId {
        let xv = &self.nodes[x].value;
        debug_assert_eq!(xv.shape()[0], 1);
        let mut shape = xv.shape().to_vec();
        shape[0] = b;
        let v = xv.broadcast(IxDyn(&shape)).unwrap().to_owned();
        let rg = self.rg(x);
        self.push(v, Op::BroadcastAxis0(x), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(gelu_fwd);
        let rg = self.rg(x);
        self.push(v, Op::Gelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(sigmoid_fwd);
        let rg = self.rg(x);
        self.push(v, Op::Sigmoid(x), rg)
    }

    pub fn softmax_last(&mut self, x: NodeId) -> NodeId {
        let v = softmax_last_fwd(&self.nodes[x].value);
        let rg = self.rg(x);
        self.push(v, Op::SoftmaxLast(x), rg)
    }

    pub fn log_softmax_last(&mut self, x: NodeId) -> NodeId {
        let v = log_softmax_last_fwd(&self.nodes[x].value);
        let rg = self.rg(x);
        self.push(v, Op::LogSoftmaxLast(x), rg)
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let xv = &self.nodes[x].value;
        let d = *xv.shape().last().unwrap();
        let rows = xv.len() / d;
        let x2 = xv.view().into_shape_with_order((rows, d)).unwrap();
        let mut xhat = ndarray::Array2::<f64>::zeros((rows, d));
        let mut inv_std = ndarray::Array1::<f64>::zeros(rows);
        for r in 0..rows {
            let row = x2.row(r);
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                xhat[[r, c]] = (row[c] - mean) * is;
            }
        }
        let g = as2(self.nodes[gain].value.view().insert_axis(Axis(0)));
        let b = as2(self.nodes[bias].value.view().insert_axis(Axis(0)));
        let y2 = &xhat * &g + &b;
        let v = y2.into_shape_with_order(xv.raw_dim()).unwrap();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat: xhat.into_dyn(),
                inv_std: inv_std.into_dyn(),
            },
            rg,
        )
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = ndarray::arr0(self.nodes[x].value.sum()).into_dyn();
        let rg = self.rg(x);
        self.push(v, Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].value.len() as f64;
        let v = ndarray::arr0(self.nodes[x].value.sum() / n).into_dyn();
        let rg = self.rg(x);
        self.push(v, Op::MeanAll(x), rg)
    }

    pub fn sum_axis_last(&mut self, x: NodeId) -> NodeId {
        let last = self.nodes[x].value.ndim() - 1;
        let v = self.nodes[x].value.sum_axis(Axis(last));
        let rg = self.rg(x);
        self.push(v, Op::SumAxisLast(x), rg)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(f64::abs);
        let rg = self.rg(x);
        self.push(v, Op::Abs(x), rg)
    }

    /// Row-wise cosine similarity between `[n, d]` arrays; denominators are
    /// floored at 1e-12 to guard the all-zero row.
    pub fn cosine_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = as2(self.nodes[a].value.view());
        let bv = as2(self.nodes[b].value.view());
        debug_assert_eq!(av.shape(), bv.shape());
        let n = av.nrows();
        let mut out = ndarray::Array1::<f64>::zeros(n);
        for r in 0..n {
            let (ar, br) = (av.row(r), bv.row(r));
            let dot = ar.dot(&br);
            let na = ar.dot(&ar).sqrt();
            let nb = br.dot(&br).sqrt();
            out[r] = dot / (na * nb).max(COSINE_EPS);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out.into_dyn(), Op::CosineRows(a, b), rg)
    }

    /// Numerically stable per-element BCE on logits against constant targets
    /// in [0, 1]: `max(x, 0) - x*t + ln(1 + exp(-|x|))`.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: ArrayD<f64>) -> NodeId {
        let xv = &self.nodes[logits].value;
        debug_assert_eq!(xv.shape(), targets.shape());
        let mut v = xv.clone();
        ndarray::Zip::from(&mut v).and(&targets).for_each(|x, &t| {
            *x = x.max(0.0) - *x * t + (-x.abs()).exp().ln_1p();
        });
        let rg = self.rg(logits);
        self.push(v, Op::BceWithLogits(logits, targets), rg)
    }

    /// [B, H, W, C] -> [B, (H/p)*(W/p), p*p*C], patches in row-major order.
    pub fn patch_extract(&mut self, images: NodeId, patch: usize) -> NodeId {
        let img = &self.nodes[images].value;
        let (bsz, h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2], img.shape()[3]);
        debug_assert!(h % patch == 0 && w % patch == 0);
        let (gh, gw) = (h / patch, w / patch);
        let t = gh * gw;
        let pdim = patch * patch * c;
        let mut out = ndarray::Array3::<f64>::zeros((bsz, t, pdim));
        for b in 0..bsz {
            for py in 0..gh {
                for px in 0..gw {
                    let ti = py * gw + px;
                    for dy in 0..patch {
                        for dx in 0..patch {
                            for ch in 0..c {
                                out[[b, ti, (dy * patch + dx) * c + ch]] =
                                    img[[b, py * patch + dy, px * patch + dx, ch]];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(images);
        self.push(out.into_dyn(), Op::PatchExtract(images, patch), rg)
    }

    /// Reverse pass from a scalar node. Returns a fresh gradient set; calling
    /// this twice with different roots yields independent gradients.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(self.nodes[root].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(ArrayD::ones(self.nodes[root].value.raw_dim()));
        for id in (0..=root).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let gy = grads[id].take().unwrap();
            self.accumulate_parents(id, &gy, &mut grads);
            grads[id] = Some(gy);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut Vec<Option<ArrayD<f64>>>, id: NodeId, delta: ArrayD<f64>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        debug_assert_eq!(delta.shape(), self.nodes[id].value.shape());
        match &mut grads[id] {
            Some(g) => *g += &delta,
            // Stored grads must be standard layout: op backwards reshape them.
            slot @ None => *slot = Some(standard(delta)),
        }
    }

    fn accumulate_parents(&self, id: NodeId, gy: &ArrayD<f64>, grads: &mut Vec<Option<ArrayD<f64>>>) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::AddBroadcast(lhs, rhs) => {
                self.accumulate(grads, *lhs, gy.clone());
                if self.nodes[*rhs].requires_grad {
                    let rshape = self.nodes[*rhs].value.shape().to_vec();
                    self.accumulate(grads, *rhs, reduce_to_shape(gy, &rshape));
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                self.accumulate(grads, *a, gy * bv);
                self.accumulate(grads, *b, gy * av);
            }
            Op::MulConst(x, c) => {
                self.accumulate(grads, *x, gy * c);
            }
            Op::Affine(x, a) => {
                self.accumulate(grads, *x, gy.mapv(|v| a * v));
            }
            Op::Matmul(a, b) => {
                let av = as2(self.nodes[*a].value.view());
                let bv = as2(self.nodes[*b].value.view());
                let g2 = as2(gy.view());
                if self.nodes[*a].requires_grad {
                    self.accumulate(grads, *a, mm(g2, bv.t()));
                }
                if self.nodes[*b].requires_grad {
                    self.accumulate(grads, *b, mm(av.t(), g2));
                }
            }
            Op::BatchMatmul(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let ra = av.ndim();
                let lead: usize = av.shape()[..ra - 2].iter().product();
                let (m, k) = (av.shape()[ra - 2], av.shape()[ra - 1]);
                let n = bv.shape()[ra - 1];
                let a3 = av.view().into_shape_with_order((lead, m, k)).unwrap();
                let b3 = bv.view().into_shape_with_order((lead, k, n)).unwrap();
                let g3 = gy.view().into_shape_with_order((lead, m, n)).unwrap();
                if self.nodes[*a].requires_grad {
                    let mut da = ndarray::Array3::<f64>::zeros((lead, m, k));
                    for l in 0..lead {
                        da.index_axis_mut(Axis(0), l).assign(
                            &g3.index_axis(Axis(0), l).dot(&b3.index_axis(Axis(0), l).t()),
                        );
                    }
                    self.accumulate(grads, *a, da.into_shape_with_order(av.raw_dim()).unwrap());
                }
                if self.nodes[*b].requires_grad {
                    let mut db = ndarray::Array3::<f64>::zeros((lead, k, n));
                    for l in 0..lead {
                        db.index_axis_mut(Axis(0), l).assign(
                            &a3.index_axis(Axis(0), l).t().dot(&g3.index_axis(Axis(0), l)),
                        );
                    }
                    self.accumulate(grads, *b, db.into_shape_with_order(bv.raw_dim()).unwrap());
                }
            }
            Op::Reshape(x) => {
                let xshape = self.nodes[*x].value.raw_dim();
                self.accumulate(grads, *x, gy.clone().into_shape_with_order(xshape).unwrap());
            }
            Op::Permute(x, axes) => {
                let mut inv = vec![0usize; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                let gx = gy.view().permuted_axes(IxDyn(&inv)).to_owned();
                self.accumulate(grads, *x, gx);
            }
            Op::Concat(parts, axis) => {
                let mut start = 0usize;
                for &p in parts {
                    let extent = self.nodes[p].value.shape()[*axis];
                    let slice = gy
                        .slice_axis(Axis(*axis), ndarray::Slice::from(start..start + extent))
                        .to_owned();
                    self.accumulate(grads, p, slice);
                    start += extent;
                }
            }
            Op::SliceAxis(x, axis, start, end) => {
                if self.nodes[*x].requires_grad {
                    let mut gx = ArrayD::<f64>::zeros(self.nodes[*x].value.raw_dim());
                    gx.slice_axis_mut(Axis(*axis), ndarray::Slice::from(*start..*end))
                        .assign(gy);
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::BroadcastAxis0(x) => {
                let gx = gy.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.accumulate(grads, *x, gx);
            }
            Op::Gelu(x) => {
                let gx = ndarray::Zip::from(gy)
                    .and(&self.nodes[*x].value)
                    .map_collect(|&g, &v| g * gelu_grad(v));
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[id].value;
                self.accumulate(grads, *x, gy * &y.mapv(|s| s * (1.0 - s)));
            }
            Op::SoftmaxLast(x) => {
                let y = &self.nodes[id].value;
                let d = *y.shape().last().unwrap();
                let rows = y.len() / d;
                let y2 = y.view().into_shape_with_order((rows, d)).unwrap();
                let g2 = gy.view().into_shape_with_order((rows, d)).unwrap();
                let mut gx = ndarray::Array2::<f64>::zeros((rows, d));
                for r in 0..rows {
                    let dot = g2.row(r).dot(&y2.row(r));
                    for c in 0..d {
                        gx[[r, c]] = y2[[r, c]] * (g2[[r, c]] - dot);
                    }
                }
                self.accumulate(grads, *x, gx.into_shape_with_order(y.raw_dim()).unwrap());
            }
            Op::LogSoftmaxLast(x) => {
                let y = &self.nodes[id].value;
                let d = *y.shape().last().unwrap();
                let rows = y.len() / d;
                let y2 = y.view().into_shape_with_order((rows, d)).unwrap();
                let g2 = gy.view().into_shape_with_order((rows, d)).unwrap();
                let mut gx = ndarray::Array2::<f64>::zeros((rows, d));
                for r in 0..rows {
                    let gsum = g2.row(r).sum();
                    for c in 0..d {
                        gx[[r, c]] = g2[[r, c]] - y2[[r, c]].exp() * gsum;
                    }
                }
                self.accumulate(grads, *x, gx.into_shape_with_order(y.raw_dim()).unwrap());
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = *self.nodes[*x].value.shape().last().unwrap();
                let rows = self.nodes[*x].value.len() / d;
                let xh = xhat.view().into_shape_with_order((rows, d)).unwrap();
                let g2 = gy.view().into_shape_with_order((rows, d)).unwrap();
                let gmv = &self.nodes[*gain].value;
                if self.nodes[*gain].requires_grad {
                    let mut dg = ndarray::Array1::<f64>::zeros(d);
                    for r in 0..rows {
                        for c in 0..d {
                            dg[c] += g2[[r, c]] * xh[[r, c]];
                        }
                    }
                    self.accumulate(grads, *gain, dg.into_dyn());
                }
                if self.nodes[*bias].requires_grad {
                    let mut db = ndarray::Array1::<f64>::zeros(d);
                    for r in 0..rows {
                        for c in 0..d {
                            db[c] += g2[[r, c]];
                        }
                    }
                    self.accumulate(grads, *bias, db.into_dyn());
                }
                if self.nodes[*x].requires_grad {
                    let gv = gmv.view().into_shape_with_order(d).unwrap();
                    let mut gx = ndarray::Array2::<f64>::zeros((rows, d));
                    for r in 0..rows {
                        let mut mean_gd = 0.0;
                        let mut mean_gdx = 0.0;
                        for c in 0..d {
                            let gd = g2[[r, c]] * gv[c];
                            mean_gd += gd;
                            mean_gdx += gd * xh[[r, c]];
                        }
                        mean_gd /= d as f64;
                        mean_gdx /= d as f64;
                        let is = inv_std[r];
                        for c in 0..d {
                            let gd = g2[[r, c]] * gv[c];
                            gx[[r, c]] = (gd - mean_gd - xh[[r, c]] * mean_gdx) * is;
                        }
                    }
                    let gx = gx
                        .into_shape_with_order(self.nodes[*x].value.raw_dim())
                        .unwrap();
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::SumAll(x) => {
                let g = gy.iter().copied().next().unwrap();
                let gx = ArrayD::from_elem(self.nodes[*x].value.raw_dim(), g);
                self.accumulate(grads, *x, gx);
            }
            Op::MeanAll(x) => {
                let n = self.nodes[*x].value.len() as f64;
                let g = gy.iter().copied().next().unwrap() / n;
                let gx = ArrayD::from_elem(self.nodes[*x].value.raw_dim(), g);
                self.accumulate(grads, *x, gx);
            }
            Op::SumAxisLast(x) => {
                let xshape = self.nodes[*x].value.shape().to_vec();
                let gx = gy
                    .view()
                    .insert_axis(Axis(gy.ndim()))
                    .broadcast(IxDyn(&xshape))
                    .unwrap()
                    .to_owned();
                self.accumulate(grads, *x, gx);
            }
            Op::Abs(x) => {
                let gx = ndarray::Zip::from(gy)
                    .and(&self.nodes[*x].value)
                    .map_collect(|&g, &v| g * sign(v));
                self.accumulate(grads, *x, gx);
            }
            Op::CosineRows(a, b) => {
                let av = as2(self.nodes[*a].value.view());
                let bv = as2(self.nodes[*b].value.view());
                let cv = &self.nodes[id].value;
                let n = av.nrows();
                let d = av.ncols();
                let need_a = self.nodes[*a].requires_grad;
                let need_b = self.nodes[*b].requires_grad;
                let mut da = ndarray::Array2::<f64>::zeros((n, d));
                let mut db = ndarray::Array2::<f64>::zeros((n, d));
                for r in 0..n {
                    let (ar, br) = (av.row(r), bv.row(r));
                    let na = ar.dot(&ar).sqrt();
                    let nb = br.dot(&br).sqrt();
                    let denom = (na * nb).max(COSINE_EPS);
                    let c = cv[r];
                    let g = gy[r];
                    for j in 0..d {
                        if need_a {
                            da[[r, j]] = g * (br[j] / denom - c * ar[j] / (na * na).max(COSINE_EPS));
                        }
                        if need_b {
                            db[[r, j]] = g * (ar[j] / denom - c * br[j] / (nb * nb).max(COSINE_EPS));
                        }
                    }
                }
                if need_a {
                    self.accumulate(grads, *a, da.into_dyn());
                }
                if need_b {
                    self.accumulate(grads, *b, db.into_dyn());
                }
            }
            Op::BceWithLogits(x, targets) => {
                let gx = ndarray::Zip::from(gy)
                    .and(&self.nodes[*x].value)
                    .and(targets)
                    .map_collect(|&g, &v, &t| g * (sigmoid_fwd(v) - t));
                self.accumulate(grads, *x, gx);
            }
            Op::PatchExtract(images, patch) => {
                if self.nodes[*images].requires_grad {
                    let ishape = self.nodes[*images].value.shape().to_vec();
                    let (bsz, h, w, c) = (ishape[0], ishape[1], ishape[2], ishape[3]);
                    let (gh, gw) = (h / patch, w / patch);
                    let mut gx = ArrayD::<f64>::zeros(IxDyn(&ishape));
                    for b in 0..bsz {
                        for py in 0..gh {
                            for px in 0..gw {
                                let ti = py * gw + px;
                                for dy in 0..*patch {
                                    for dx in 0..*patch {
                                        for ch in 0..c {
                                            gx[[b, py * patch + dy, px * patch + dx, ch]] =
                                                gy[[b, ti, (dy * patch + dx) * c + ch]];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *images, gx);
                }
            }
        }
    }
}

const COSINE_EPS: f64 = 1e-12;

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn sigmoid_fwd(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_last_fwd(x: &ArrayD<f64>) -> ArrayD<f64> {
    let d = *x.shape().last().unwrap();
    let rows = x.len() / d;
    let x2 = x.view().into_shape_with_order((rows, d)).unwrap();
    let mut out = ndarray::Array2::<f64>::zeros((rows, d));
    for r in 0..rows {
        let row = x2.row(r);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for c in 0..d {
            let e = (row[c] - mx).exp();
            out[[r, c]] = e;
            z += e;
        }
        for c in 0..d {
            out[[r, c]] /= z;
        }
    }
    out.into_shape_with_order(x.raw_dim()).unwrap()
}

fn log_softmax_last_fwd(x: &ArrayD<f64>) -> ArrayD<f64> {
    let d = *x.shape().last().unwrap();
    let rows = x.len() / d;
    let x2 = x.view().into_shape_with_order((rows, d)).unwrap();
    let mut out = ndarray::Array2::<f64>::zeros((rows, d));
    for r in 0..rows {
        let row = x2.row(r);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
        for c in 0..d {
            out[[r, c]] = row[c] - lse;
        }
    }
    out.into_shape_with_order(x.raw_dim()).unwrap()
}

/// Reduce `g` to `shape` by summing over broadcast axes.
fn reduce_to_shape(g: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (ax, (&have, &want)) in out.shape().to_vec().iter().zip(shape).enumerate() {
        if have != want {
            debug_assert_eq!(want, 1);
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    out
}

/// Finite-difference oracles for gradient verification. These evaluate the
/// forward pass only and are independent of the backward implementation.
pub mod check {
    use ndarray::ArrayD;

    /// Central-difference gradient of `f` at `x`, perturbing one coordinate
    /// at a time.
    pub fn numerical_gradient(
        mut f: impl FnMut(&ArrayD<f64>) -> f64,
        x: &ArrayD<f64>,
        h: f64,
    ) -> ArrayD<f64> {
        let mut g = ArrayD::<f64>::zeros(x.raw_dim());
        let mut xp = x.clone();
        for idx in 0..x.len() {
            let orig = xp.as_slice().unwrap()[idx];
            xp.as_slice_mut().unwrap()[idx] = orig + h;
            let fp = f(&xp);
            xp.as_slice_mut().unwrap()[idx] = orig - h;
            let fm = f(&xp);
            xp.as_slice_mut().unwrap()[idx] = orig;
            g.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * h);
        }
        g
    }

    /// Relative error between two gradient tensors:
    /// `||a - b|| / max(||a|| + ||b||, 1e-12)`.
    pub fn rel_error(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
        assert_eq!(a.shape(), b.shape());
        let diff = (a - b).mapv(|v| v * v).sum().sqrt();
        let na = a.mapv(|v| v * v).sum().sqrt();
        let nb = b.mapv(|v| v * v).sum().sqrt();
        diff / (na + nb).max(1e-12)
    }
}
