//! Minimal reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Graph`] is an append-only tape of f64 tensors. Every operation pushes a
//! node whose parents precede it, so the reverse pass is a single backward
//! sweep over node indices. All math is double precision; the finite-difference
//! checks in the test suite rely on that.

use ndarray::{ArrayD, Axis, IxDyn};

/// Index of a tensor on the tape.
pub type TensorId = usize;

type BackwardFn = Box<dyn Fn(&Graph, &ArrayD<f64>) -> Vec<(TensorId, ArrayD<f64>)>>;

pub(crate) struct Node {
    value: ArrayD<f64>,
    needs_grad: bool,
    backward: Option<BackwardFn>,
}

/// Computation tape. Build a fresh one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Tensor that participates in differentiation (parameters).
    pub fn leaf(&mut self, value: ArrayD<f64>) -> TensorId {
        self.push(value, true, None)
    }

    /// Tensor treated as data: no gradient is ever propagated into it.
    pub fn constant(&mut self, value: ArrayD<f64>) -> TensorId {
        self.push(value, false, None)
    }

    pub fn value(&self, id: TensorId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    pub fn scalar_value(&self, id: TensorId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "expected scalar tensor");
        *v.iter().next().unwrap()
    }

    pub fn needs_grad(&self, id: TensorId) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(
        &mut self,
        value: ArrayD<f64>,
        needs_grad: bool,
        backward: Option<BackwardFn>,
    ) -> TensorId {
        assert!(
            value.iter().all(|v| v.is_finite()),
            "non-finite value entered the graph at node {}",
            self.nodes.len()
        );
        self.nodes.push(Node {
            value,
            needs_grad,
            backward,
        });
        self.nodes.len() - 1
    }

    pub(crate) fn any_needs_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Reverse sweep from `root` (must be scalar). Returns one gradient slot
    /// per node; slots stay `None` for nodes the root does not depend on.
    pub fn backward(&self, root: TensorId) -> Gradients {
        assert_eq!(self.nodes[root].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(ArrayD::ones(self.nodes[root].value.raw_dim()));
        for idx in (0..=root).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(back) = self.nodes[idx].backward.as_ref() else {
                continue;
            };
            let out_grad = grads[idx].take().unwrap();
            for (parent, contrib) in back(self, &out_grad) {
                if !self.nodes[parent].needs_grad {
                    continue;
                }
                debug_assert_eq!(
                    contrib.shape(),
                    self.nodes[parent].value.shape(),
                    "gradient shape mismatch for node {parent}"
                );
                match &mut grads[parent] {
                    Some(g) => *g += &contrib,
                    slot => *slot = Some(contrib),
                }
            }
            grads[idx] = Some(out_grad);
        }
        Gradients { grads }
    }
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&ArrayD<f64>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: TensorId) -> Option<ArrayD<f64>> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

pub(crate) fn reshaped(a: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let flat: Vec<f64> = if let Some(s) = a.as_slice() {
        s.to_vec()
    } else {
        a.iter().cloned().collect()
    };
    ArrayD::from_shape_vec(IxDyn(shape), flat).expect("reshape element count mismatch")
}

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

pub fn add(g: &mut Graph, a: TensorId, b: TensorId) -> TensorId {
    assert_eq!(g.shape(a), g.shape(b), "add: shape mismatch");
    let value = g.value(a) + g.value(b);
    let needs = g.any_needs_grad(&[a, b]);
    g.push(
        value,
        needs,
        Some(Box::new(move |_, out| {
            vec![(a, out.clone()), (b, out.clone())]
        })),
    )
}

pub fn sub(g: &mut Graph, a: TensorId, b: TensorId) -> TensorId {
    assert_eq!(g.shape(a), g.shape(b), "sub: shape mismatch");
    let value = g.value(a) - g.value(b);
    let needs = g.any_needs_grad(&[a, b]);
    g.push(
        value,
        needs,
        Some(Box::new(move |_, out| {
            vec![(a, out.clone()), (b, out.mapv(|v| -v))]
        })),
    )
}

pub fn mul(g: &mut Graph, a: TensorId, b: TensorId) -> TensorId {
    assert_eq!(g.shape(a), g.shape(b), "mul: shape mismatch");
    let value = g.value(a) * g.value(b);
    let needs = g.any_needs_grad(&[a, b]);
    g.push(
        value,
        needs,
        Some(Box::new(move |gr, out| {
            vec![(a, out * gr.value(b)), (b, out * gr.value(a))]
        })),
    )
}

pub fn scale(g: &mut Graph, a: TensorId, k: f64) -> TensorId {
    let value = g.value(a).mapv(|v| v * k);
    let needs = g.needs_grad(a);
    g.push(
        value,
        needs,
        Some(Box::new(move |_, out| vec![(a, out.mapv(|v| v * k))])),
    )
}

pub fn relu(g: &mut Graph, a: TensorId) -> TensorId {
    let value = g.value(a).mapv(|v| v.max(0.0));
    let needs = g.needs_grad(a);
    g.push(
        value,
        needs,
        Some(Box::new(move |gr, out| {
            let mask = gr.value(a).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            vec![(a, out * &mask)]
        })),
    )
}

pub fn sigmoid_value(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sum of every element, producing a scalar.
pub fn sum_all(g: &mut Graph, a: TensorId) -> TensorId {
    let value = ArrayD::from_elem(IxDyn(&[]), g.value(a).sum());
    let needs = g.needs_grad(a);
    g.push(
        value,
        needs,
        Some(Box::new(move |gr, out| {
            let k = out[[]];
            vec![(a, ArrayD::from_elem(gr.value(a).raw_dim(), k))]
        })),
    )
}

pub fn mean_all(g: &mut Graph, a: TensorId) -> TensorId {
    let n = g.value(a).len() as f64;
    let s = sum_all(g, a);
    scale(g, s, 1.0 / n)
}

/// Sum of several scalar terms.
pub fn add_scalars(g: &mut Graph, terms: &[TensorId]) -> TensorId {
    assert!(!terms.is_empty());
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = add(g, acc, t);
    }
    acc
}

pub fn reshape(g: &mut Graph, a: TensorId, shape: &[usize]) -> TensorId {
    let value = reshaped(g.value(a), shape);
    let needs = g.needs_grad(a);
    g.push(
        value,
        needs,
        Some(Box::new(move |gr, out| {
            vec![(a, reshaped(out, gr.value(a).shape()))]
        })),
    )
}

/// Concatenate along channel axis (axis 1) of NCHW tensors.
pub fn concat_channels(g: &mut Graph, a: TensorId, b: TensorId) -> TensorId {
    let (va, vb) = (g.value(a), g.value(b));
    assert_eq!(va.ndim(), 4);
    assert_eq!(vb.ndim(), 4);
    let ca = va.shape()[1];
    let value = ndarray::concatenate(Axis(1), &[va.view(), vb.view()]).unwrap();
    let needs = g.any_needs_grad(&[a, b]);
    g.push(
        value.into_dyn(),
        needs,
        Some(Box::new(move |_, out| {
            let ga = out.slice_axis(Axis(1), ndarray::Slice::from(0..ca)).to_owned();
            let gb = out.slice_axis(Axis(1), ndarray::Slice::from(ca..)).to_owned();
            vec![(a, ga.into_dyn()), (b, gb.into_dyn())]
        })),
    )
}

/// Row-wise chunk selection: `x` is `n x (k*m)`, output row i is the
/// `idx[i]`-th chunk of width `m`. Used to pick the class-specific slice of
/// per-class regression outputs.
pub fn select_row_chunks(g: &mut Graph, x: TensorId, idx: &[usize], m: usize) -> TensorId {
    let v = g.value(x);
    assert_eq!(v.ndim(), 2);
    let (n, cols) = (v.shape()[0], v.shape()[1]);
    assert_eq!(n, idx.len());
    assert_eq!(cols % m, 0);
    let mut out = ArrayD::zeros(IxDyn(&[n, m]));
    for (i, &c) in idx.iter().enumerate() {
        assert!(c * m + m <= cols, "chunk index out of range");
        for j in 0..m {
            out[[i, j]] = v[[i, c * m + j]];
        }
    }
    let idx_cap: Vec<usize> = idx.to_vec();
    let needs = g.needs_grad(x);
    g.push(
        out,
        needs,
        Some(Box::new(move |gr, og| {
            let mut dx = ArrayD::zeros(gr.value(x).raw_dim());
            for (i, &c) in idx_cap.iter().enumerate() {
                for j in 0..m {
                    dx[[i, c * m + j]] = og[[i, j]];
                }
            }
            vec![(x, dx)]
        })),
    )
}

/// Per-row channel selection from an `n x K x H x W` tensor: output is
/// `n x H x W` with row i taken from channel `idx[i]`.
pub fn select_channels(g: &mut Graph, x: TensorId, idx: &[usize]) -> TensorId {
    let v = g.value(x);
    assert_eq!(v.ndim(), 4);
    let (n, k, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
    assert_eq!(n, idx.len());
    let mut out = ArrayD::zeros(IxDyn(&[n, h, w]));
    for (i, &c) in idx.iter().enumerate() {
        assert!(c < k, "channel index out of range");
        for y in 0..h {
            for xx in 0..w {
                out[[i, y, xx]] = v[[i, c, y, xx]];
            }
        }
    }
    let idx_cap: Vec<usize> = idx.to_vec();
    let needs = g.needs_grad(x);
    g.push(
        out,
        needs,
        Some(Box::new(move |gr, og| {
            let mut dx = ArrayD::zeros(gr.value(x).raw_dim());
            let sh = gr.value(x).shape().to_vec();
            for (i, &c) in idx_cap.iter().enumerate() {
                for y in 0..sh[2] {
                    for xx in 0..sh[3] {
                        dx[[i, c, y, xx]] = og[[i, y, xx]];
                    }
                }
            }
            vec![(x, dx)]
        })),
    )
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

fn mat_mul(a: &ndarray::ArrayView2<f64>, b: &ndarray::ArrayView2<f64>) -> ndarray::Array2<f64> {
    let mut out = ndarray::Array2::zeros((a.nrows(), b.ncols()));
    ndarray::linalg::general_mat_mul(1.0, a, b, 0.0, &mut out);
    out
}

fn as2d(a: &ArrayD<f64>) -> ndarray::ArrayView2<f64> {
    a.view().into_dimensionality::<ndarray::Ix2>().unwrap()
}

/// `x @ w + bias` with `x: n x d`, `w: d x m`, `bias: m`.
pub fn linear(g: &mut Graph, x: TensorId, w: TensorId, bias: TensorId) -> TensorId {
    let xv = as2d(g.value(x)).to_owned();
    let wv = as2d(g.value(w)).to_owned();
    let bv = g.value(bias);
    assert_eq!(xv.ncols(), wv.nrows(), "linear: inner dimension mismatch");
    assert_eq!(bv.len(), wv.ncols(), "linear: bias length mismatch");
    let mut out = mat_mul(&xv.view(), &wv.view());
    for mut row in out.rows_mut() {
        for (o, b) in row.iter_mut().zip(bv.iter()) {
            *o += *b;
        }
    }
    let needs = g.any_needs_grad(&[x, w, bias]);
    g.push(
        out.into_dyn(),
        needs,
        Some(Box::new(move |gr, og| {
            let og2 = as2d(og);
            let xv = as2d(gr.value(x));
            let wv = as2d(gr.value(w));
            let dx = mat_mul(&og2, &wv.t());
            let dw = mat_mul(&xv.t(), &og2);
            let db = og2.sum_axis(Axis(0));
            vec![
                (x, dx.into_dyn()),
                (w, dw.into_dyn()),
                (bias, db.into_dyn()),
            ]
        })),
    )
}

/// Batched `a^T b`: `a: n x c x p`, `b: n x c x q` -> `n x p x q`.
pub fn bmm_tn(g: &mut Graph, a: TensorId, b: TensorId) -> TensorId {
    let (av, bv) = (g.value(a), g.value(b));
    let (n, c, p) = (av.shape()[0], av.shape()[1], av.shape()[2]);
    let q = bv.shape()[2];
    assert_eq!(bv.shape()[0], n);
    assert_eq!(bv.shape()[1], c);
    let mut out = ArrayD::zeros(IxDyn(&[n, p, q]));
    for i in 0..n {
        let ai = av.index_axis(Axis(0), i).into_dimensionality::<ndarray::Ix2>().unwrap();
        let bi = bv.index_axis(Axis(0), i).into_dimensionality::<ndarray::Ix2>().unwrap();
        let oi = mat_mul(&ai.t(), &bi);
        out.index_axis_mut(Axis(0), i).assign(&oi);
    }
    let needs = g.any_needs_grad(&[a, b]);
    g.push(
        out,
        needs,
        Some(Box::new(move |gr, og| {
            let (av, bv) = (gr.value(a), gr.value(b));
            let n = av.shape()[0];
            let mut da = ArrayD::zeros(av.raw_dim());
            let mut db = ArrayD::zeros(bv.raw_dim());
            for i in 0..n {
                let ai = av.index_axis(Axis(0), i).into_dimensionality::<ndarray::Ix2>().unwrap();
                let bi = bv.index_axis(Axis(0), i).into_dimensionality::<ndarray::Ix2>().unwrap();
                let gi = og.index_axis(Axis(0), i).into_dimensionality::<ndarray::Ix2>().unwrap();
                // d(a^T b) w.r.t. a is b g^T, w.r.t. b is a g
                da.index_axis_mut(Axis(0), i).assign(&mat_mul(&bi, &gi.t()));
                db.index_axis_mut(Axis(0), i).assign(&mat_mul(&ai, &gi));
            }
            vec![(a, da), (b, db)]
        })),
    )
}

/// Batched `a b^T` over the last axes: `a: n x c x q`, `b: n x p x q` -> `n x c x p`.
pub fn bmm_nt(g: &mut Graph, a: TensorId, b: TensorId) -> TensorId {
    let (av, bv) = (g.value(a), g.value(b));
    let (n, c, q) = (av.shape()[0], av.shape()[1], av.shape()[2]);
    let p = bv.shape()[1];
    assert_eq!(bv.shape()[0], n);
    assert_eq!(bv.shape()[2], q);
    let mut out = ArrayD::zeros(IxDyn(&[n, c, p]));
    for i in 0..n {
        let ai = av.index_axis(Axis(0), i).into_dimensionality::<ndarray::Ix2>().unwrap();
        let bi = bv.index_axis(Axis(0), i).into_dimensionality::<ndarray::Ix2>().unwrap();
        out.index_axis_mut(Axis(0), i).assign(&mat_mul(&ai, &bi.t()));
    }
    let needs = g.any_needs_grad(&[a, b]);
    g.push(
        out,
        needs,
        Some(Box::new(move |gr, og| {
            let (av, bv) = (gr.value(a), gr.value(b));
            let n = av.shape()[0];
            let mut da = ArrayD::zeros(av.raw_dim());
            let mut db = ArrayD::zeros(bv.raw_dim());
            for i in 0..n {
                let ai = av.index_axis(Axis(0), i).into_dimensionality::<ndarray::Ix2>().unwrap();
                let bi = bv.index_axis(Axis(0), i).into_dimensionality::<ndarray::Ix2>().unwrap();
                let gi = og.index_axis(Axis(0), i).into_dimensionality::<ndarray::Ix2>().unwrap();
                da.index_axis_mut(Axis(0), i).assign(&mat_mul(&gi, &bi));
                db.index_axis_mut(Axis(0), i).assign(&mat_mul(&gi.t(), &ai).t());
            }
            vec![(a, da), (b, db)]
        })),
    )
}

/// Softmax over the last axis of a 3-d tensor.
pub fn softmax_last(g: &mut Graph, x: TensorId) -> TensorId {
    let v = g.value(x);
    assert_eq!(v.ndim(), 3);
    let mut out = v.to_owned();
    for mut lane in out.lanes_mut(Axis(2)) {
        let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for e in lane.iter_mut() {
            *e = (*e - m).exp();
            s += *e;
        }
        for e in lane.iter_mut() {
            *e /= s;
        }
    }
    let needs = g.needs_grad(x);
    let out_id = g.push(
        out,
        needs,
        None,
    );
    // backward needs the output value itself; rebuild closure now that we know the id
    let back: BackwardFn = Box::new(move |gr, og| {
        let y = gr.value(out_id);
        let mut dx = og.clone();
        // dx = y * (og - sum(og*y, last))
        let n = y.shape()[0];
        let p = y.shape()[1];
        let q = y.shape()[2];
        for i in 0..n {
            for j in 0..p {
                let mut dot = 0.0;
                for k0 in 0..q {
                    dot += og[[i, j, k0]] * y[[i, j, k0]];
                }
                for k0 in 0..q {
                    dx[[i, j, k0]] = y[[i, j, k0]] * (og[[i, j, k0]] - dot);
                }
            }
        }
        vec![(x, dx)]
    });
    g.nodes[out_id].backward = Some(back);
    out_id
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Multi-class cross entropy with integer labels, averaged over rows.
pub fn softmax_cross_entropy(g: &mut Graph, logits: TensorId, labels: &[usize]) -> TensorId {
    let v = as2d(g.value(logits)).to_owned();
    let n = v.nrows();
    assert_eq!(n, labels.len());
    assert!(n > 0, "cross entropy over empty batch");
    let mut total = 0.0;
    for (row, &lab) in v.rows().into_iter().zip(labels) {
        assert!(lab < row.len());
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
        total += lse - row[lab];
    }
    let labels_cap: Vec<usize> = labels.to_vec();
    let needs = g.needs_grad(logits);
    g.push(
        ArrayD::from_elem(IxDyn(&[]), total / n as f64),
        needs,
        Some(Box::new(move |gr, og| {
            let k = og[[]] / labels_cap.len() as f64;
            let v = as2d(gr.value(logits));
            let mut dl = ndarray::Array2::zeros((v.nrows(), v.ncols()));
            for (i, (row, &lab)) in v.rows().into_iter().zip(&labels_cap).enumerate() {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|&l| (l - m).exp()).collect();
                let s: f64 = exps.iter().sum();
                for (j, e) in exps.iter().enumerate() {
                    let softmax = e / s;
                    dl[[i, j]] = k * (softmax - if j == lab { 1.0 } else { 0.0 });
                }
            }
            vec![(logits, dl.into_dyn())]
        })),
    )
}

/// Binary cross entropy on logits against targets in [0,1], averaged over all
/// elements. Numerically stable form.
pub fn bce_with_logits(g: &mut Graph, logits: TensorId, targets: &ArrayD<f64>) -> TensorId {
    let v = g.value(logits);
    assert_eq!(v.shape(), targets.shape());
    let n = v.len() as f64;
    assert!(n > 0.0);
    let mut total = 0.0;
    for (&x, &t) in v.iter().zip(targets.iter()) {
        total += x.max(0.0) - x * t + (1.0 + (-x.abs()).exp()).ln();
    }
    let targets_cap = targets.clone();
    let needs = g.needs_grad(logits);
    g.push(
        ArrayD::from_elem(IxDyn(&[]), total / n),
        needs,
        Some(Box::new(move |gr, og| {
            let k = og[[]] / gr.value(logits).len() as f64;
            let mut dx = gr.value(logits).clone();
            for (d, t) in dx.iter_mut().zip(targets_cap.iter()) {
                *d = k * (sigmoid_value(*d) - t);
            }
            vec![(logits, dx)]
        })),
    )
}

/// Smooth-L1 (Huber with beta = 1) against constant targets, averaged over all
/// elements.
pub fn smooth_l1(g: &mut Graph, pred: TensorId, targets: &ArrayD<f64>) -> TensorId {
    let v = g.value(pred);
    assert_eq!(v.shape(), targets.shape());
    let n = v.len() as f64;
    assert!(n > 0.0);
    let mut total = 0.0;
    for (&p, &t) in v.iter().zip(targets.iter()) {
        let d = p - t;
        total += if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
    }
    let targets_cap = targets.clone();
    let needs = g.needs_grad(pred);
    g.push(
        ArrayD::from_elem(IxDyn(&[]), total / n),
        needs,
        Some(Box::new(move |gr, og| {
            let k = og[[]] / gr.value(pred).len() as f64;
            let mut dx = gr.value(pred).clone();
            for (d, t) in dx.iter_mut().zip(targets_cap.iter()) {
                let diff = *d - t;
                *d = k * diff.clamp(-1.0, 1.0);
            }
            vec![(pred, dx)]
        })),
    )
}

/// Mean squared error against constant targets.
pub fn mse(g: &mut Graph, pred: TensorId, targets: &ArrayD<f64>) -> TensorId {
    let v = g.value(pred);
    assert_eq!(v.shape(), targets.shape());
    let n = v.len() as f64;
    let total: f64 = v
        .iter()
        .zip(targets.iter())
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum();
    let targets_cap = targets.clone();
    let needs = g.needs_grad(pred);
    g.push(
        ArrayD::from_elem(IxDyn(&[]), total / n),
        needs,
        Some(Box::new(move |gr, og| {
            let k = og[[]] * 2.0 / gr.value(pred).len() as f64;
            let mut dx = gr.value(pred).clone();
            for (d, t) in dx.iter_mut().zip(targets_cap.iter()) {
                *d = k * (*d - t);
            }
            vec![(pred, dx)]
        })),
    )
}

/// Row-wise softmax of a plain 2-d array (no graph involvement).
pub fn softmax_rows(logits: &ndarray::Array2<f64>) -> ndarray::Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for e in row.iter_mut() {
            *e = (*e - m).exp();
            s += *e;
        }
        for e in row.iter_mut() {
            *e /= s;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_scalar_fn;
    use ndarray::arr2;

    #[test]
    fn add_mul_backward() {
        let mut g = Graph::new();
        let a = g.leaf(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = g.leaf(arr2(&[[5.0, 6.0], [7.0, 8.0]]).into_dyn());
        let c = mul(&mut g, a, b);
        let d = add(&mut g, c, a);
        let s = sum_all(&mut g, d);
        let grads = g.backward(s);
        // d(sum(a*b + a))/da = b + 1
        let ga = grads.get(a).unwrap();
        assert_eq!(ga[[0, 0]], 6.0);
        assert_eq!(ga[[1, 1]], 9.0);
        let gb = grads.get(b).unwrap();
        assert_eq!(gb[[0, 1]], 2.0);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(ArrayD::ones(IxDyn(&[3])));
        let c = g.constant(ArrayD::ones(IxDyn(&[3])));
        let m = mul(&mut g, a, c);
        let s = sum_all(&mut g, m);
        let grads = g.backward(s);
        assert!(grads.get(c).is_none());
        assert!(grads.get(a).is_some());
    }

    #[test]
    fn linear_gradcheck() {
        check_scalar_fn(&[&[2, 3], &[3, 4]], |g, ids| {
            let bias = g.leaf(ArrayD::zeros(IxDyn(&[4])));
            let y = linear(g, ids[0], ids[1], bias);
            let y = relu(g, y);
            sum_all(g, y)
        });
    }

    #[test]
    fn softmax_ce_gradcheck() {
        check_scalar_fn(&[&[4, 3]], |g, ids| {
            softmax_cross_entropy(g, ids[0], &[0, 2, 1, 2])
        });
    }

    #[test]
    fn bce_gradcheck() {
        let targets = ArrayD::from_shape_vec(
            IxDyn(&[2, 3]),
            vec![1.0, 0.0, 1.0, 0.0, 0.5, 1.0],
        )
        .unwrap();
        check_scalar_fn(&[&[2, 3]], move |g, ids| bce_with_logits(g, ids[0], &targets));
    }

    #[test]
    fn smooth_l1_matches_hand_values() {
        let mut g = Graph::new();
        let p = g.leaf(ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.0, 2.0, 0.5]).unwrap());
        let t = ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.0, 0.0, 0.0]).unwrap();
        let l = smooth_l1(&mut g, p, &t);
        // (0 + (2-0.5) + 0.5*0.25)/3
        assert!((g.scalar_value(l) - (1.5 + 0.125) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn bmm_softmax_gradcheck() {
        check_scalar_fn(&[&[1, 2, 3], &[1, 2, 3]], |g, ids| {
            let att = bmm_tn(g, ids[0], ids[1]);
            let att = softmax_last(g, att);
            let y = bmm_nt(g, ids[1], att);
            sum_all(g, y)
        });
    }

    #[test]
    fn select_row_chunks_picks_expected() {
        let mut g = Graph::new();
        let x = g.leaf(
            ArrayD::from_shape_vec(IxDyn(&[2, 6]), (0..12).map(|v| v as f64).collect()).unwrap(),
        );
        let y = select_row_chunks(&mut g, x, &[2, 0], 2);
        assert_eq!(g.value(y)[[0, 0]], 4.0);
        assert_eq!(g.value(y)[[0, 1]], 5.0);
        assert_eq!(g.value(y)[[1, 0]], 6.0);
        let s = sum_all(&mut g, y);
        let grads = g.backward(s);
        let gx = grads.get(x).unwrap();
        assert_eq!(gx[[0, 4]], 1.0);
        assert_eq!(gx[[0, 0]], 0.0);
    }
}
