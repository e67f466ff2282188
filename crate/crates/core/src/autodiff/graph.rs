use std::collections::HashMap;

use rand::{Rng, RngCore};

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Normalize down each column (over rows).
    Rows,
    /// Normalize along each row (over columns).
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    LeakyRelu(NodeId, f64),
    Dropout(NodeId, Vec<f64>),
    Softmax(NodeId, Axis),
    LayerNorm {
        input: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv1d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        width: usize,
    },
    MeanPool(NodeId),
    Concat(Vec<NodeId>, Axis),
    Transpose(NodeId),
    Sum(NodeId),
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor,
    },
    SelectStraightThrough {
        docked: NodeId,
        probs: NodeId,
        chosen: Vec<usize>,
        reference: Tensor,
    },
}

/// A single-use reverse-mode tape.
///
/// Parameters are read from a borrowed [`ParamStore`]; after `backward`,
/// [`Graph::into_param_grads`] hands the accumulated gradients back so the
/// caller can apply them to the store.
pub struct Graph<'a> {
    store: &'a ParamStore,
    rng: Option<&'a mut dyn RngCore>,
    values: Vec<Tensor>,
    ops: Vec<Op>,
    grads: Vec<Option<Tensor>>,
    param_nodes: HashMap<ParamId, NodeId>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

impl<'a> Graph<'a> {
    /// Evaluation-mode graph: dropout is the identity and nothing is sampled.
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            rng: None,
            values: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    /// Training-mode graph; all stochastic primitives draw from `rng`.
    pub fn training(store: &'a ParamStore, rng: &'a mut dyn RngCore) -> Self {
        let mut g = Self::new(store);
        g.rng = Some(rng);
        g
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn rng(&mut self) -> Option<&mut (dyn RngCore + 'a)> {
        self.rng.as_deref_mut()
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.values.push(value);
        self.ops.push(op);
        self.grads.push(None);
        NodeId(self.values.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let n = self.push(self.store.value(id).clone(), Op::Param);
        self.param_nodes.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.values[a.0].matmul(&self.values[b.0])?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (&self.values[a.0], &self.values[b.0]);
        if !x.same_shape(y) {
            return Err(shape_err("add", x, y));
        }
        let mut v = x.clone();
        v.add_assign(y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Adds a `1 x c` row to every row of an `r x c` matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (x, b) = (&self.values[a.0], &self.values[row.0]);
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(shape_err("add_row", x, b));
        }
        let mut v = x.clone();
        let c = x.cols();
        for (i, e) in v.data_mut().iter_mut().enumerate() {
            *e += b.data()[i % c];
        }
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (&self.values[a.0], &self.values[b.0]);
        if !x.same_shape(y) {
            return Err(shape_err("mul", x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let v = Tensor::from_vec(x.rows(), x.cols(), data)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Multiplies every row of an `r x c` matrix element-wise by a `1 x c` row.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (x, b) = (&self.values[a.0], &self.values[row.0]);
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(shape_err("mul_row", x, b));
        }
        let c = x.cols();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, e)| e * b.data()[i % c])
            .collect();
        let v = Tensor::from_vec(x.rows(), c, data)?;
        Ok(self.push(v, Op::MulRow(a, row)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = self.values[a.0].map(|x| x * factor);
        self.push(v, Op::Scale(a, factor))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let v = self.values[a.0].map(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    /// Inverted dropout: zeroes entries with probability `p` and scales the
    /// survivors by `1 / (1 - p)`. Identity in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, a: NodeId, p: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout rate {p} outside [0, 1)")));
        }
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(a);
        };
        if p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.values[a.0].len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let x = &self.values[a.0];
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let v = Tensor::from_vec(x.rows(), x.cols(), data)?;
        Ok(self.push(v, Op::Dropout(a, mask)))
    }

    pub fn softmax(&mut self, a: NodeId, axis: Axis) -> Result<NodeId> {
        self.masked_softmax(a, axis, None)
    }

    /// Softmax along `axis`. With a mask (one flag per position along the
    /// normalized axis), masked positions get probability exactly zero and the
    /// remaining ones renormalize. At least one position must be unmasked.
    pub fn masked_softmax(&mut self, a: NodeId, axis: Axis, mask: Option<&[bool]>) -> Result<NodeId> {
        let x = &self.values[a.0];
        let (groups, span) = match axis {
            Axis::Cols => (x.rows(), x.cols()),
            Axis::Rows => (x.cols(), x.rows()),
        };
        if let Some(m) = mask {
            if m.len() != span {
                return Err(Error::Shape {
                    op: "masked_softmax",
                    left: x.shape(),
                    right: vec![m.len()],
                });
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::NoAvailableModality);
            }
        }
        let live = |j: usize| mask.is_none_or(|m| m[j]);
        let idx = |g: usize, j: usize| match axis {
            Axis::Cols => g * x.cols() + j,
            Axis::Rows => j * x.cols() + g,
        };
        let mut out = Tensor::zeros(x.rows(), x.cols());
        let src = x.data();
        let dst = out.data_mut();
        for g in 0..groups {
            let max = (0..span)
                .filter(|&j| live(j))
                .map(|j| src[idx(g, j)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in (0..span).filter(|&j| live(j)) {
                let e = (src[idx(g, j)] - max).exp();
                dst[idx(g, j)] = e;
                total += e;
            }
            for j in (0..span).filter(|&j| live(j)) {
                dst[idx(g, j)] /= total;
            }
        }
        Ok(self.push(out, Op::Softmax(a, axis)))
    }

    /// Per-row normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> NodeId {
        let x = &self.values[a.0];
        let (r, c) = (x.rows(), x.cols());
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = x.row_slice(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[i] = s;
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mean) * s;
            }
        }
        let v = Tensor::from_vec(r, c, xhat.clone()).expect("layer_norm shape");
        self.push(v, Op::LayerNorm { input: a, xhat, inv_std })
    }

    /// Convolution over the time (row) axis with zero "same" padding.
    ///
    /// `input` is `T x C_in`, `weight` is `C_out x (width * C_in)` where column
    /// `k * C_in + i` multiplies input channel `i` at time offset
    /// `k - width / 2`, and `bias` is `1 x C_out`. Output is `T x C_out`.
    pub fn conv1d(&mut self, input: NodeId, weight: NodeId, bias: NodeId, width: usize) -> Result<NodeId> {
        let (x, w, b) = (&self.values[input.0], &self.values[weight.0], &self.values[bias.0]);
        if width.is_multiple_of(2) {
            return Err(Error::Parameter(format!("conv1d width {width} must be odd")));
        }
        let (t, cin, cout) = (x.rows(), x.cols(), w.rows());
        if w.cols() != width * cin {
            return Err(shape_err("conv1d", x, w));
        }
        if b.rows() != 1 || b.cols() != cout {
            return Err(shape_err("conv1d bias", w, b));
        }
        let half = (width / 2) as isize;
        let mut out = Tensor::zeros(t, cout);
        for step in 0..t {
            for o in 0..cout {
                let mut acc = b.data()[o];
                let wrow = w.row_slice(o);
                for k in 0..width {
                    let src = step as isize + k as isize - half;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let xrow = x.row_slice(src as usize);
                    let wk = &wrow[k * cin..(k + 1) * cin];
                    acc += wk.iter().zip(xrow).map(|(p, q)| p * q).sum::<f64>();
                }
                out.set(step, o, acc);
            }
        }
        Ok(self.push(out, Op::Conv1d { input, weight, bias, width }))
    }

    /// Mean over rows: `r x c -> 1 x c`.
    pub fn mean_pool(&mut self, a: NodeId) -> Result<NodeId> {
        let x = &self.values[a.0];
        if x.rows() == 0 {
            return Err(Error::Empty("mean_pool over zero rows"));
        }
        let mut out = Tensor::zeros(1, x.cols());
        for r in 0..x.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(x.row_slice(r)) {
                *o += v;
            }
        }
        let n = x.rows() as f64;
        out.data_mut().iter_mut().for_each(|v| *v /= n);
        Ok(self.push(out, Op::MeanPool(a)))
    }

    /// Concatenates along `axis`: `Rows` stacks vertically, `Cols` side by side.
    pub fn concat(&mut self, parts: &[NodeId], axis: Axis) -> Result<NodeId> {
        let first = parts.first().ok_or(Error::Empty("concat of zero tensors"))?;
        let f = &self.values[first.0];
        let out = match axis {
            Axis::Rows => {
                let cols = f.cols();
                let mut data = Vec::new();
                let mut rows = 0;
                for p in parts {
                    let v = &self.values[p.0];
                    if v.cols() != cols {
                        return Err(shape_err("concat", f, v));
                    }
                    data.extend_from_slice(v.data());
                    rows += v.rows();
                }
                Tensor::from_vec(rows, cols, data)?
            }
            Axis::Cols => {
                let rows = f.rows();
                let mut cols = 0;
                for p in parts {
                    let v = &self.values[p.0];
                    if v.rows() != rows {
                        return Err(shape_err("concat", f, v));
                    }
                    cols += v.cols();
                }
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for p in parts {
                        data.extend_from_slice(self.values[p.0].row_slice(r));
                    }
                }
                Tensor::from_vec(rows, cols, data)?
            }
        };
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a.0].transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.values[a.0].data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Mean softmax cross-entropy over the rows of a `B x K` logit matrix.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let z = &self.values[logits.0];
        if z.rows() != labels.len() || z.rows() == 0 {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: z.shape(),
                right: vec![labels.len()],
            });
        }
        let k = z.cols();
        let mut probs = Tensor::zeros(z.rows(), k);
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            if label >= k {
                return Err(Error::Parameter(format!("label {label} out of range for {k} classes")));
            }
            let row = z.row_slice(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + total.ln();
            loss += log_z - row[label];
            for j in 0..k {
                probs.set(r, j, (row[j] - log_z).exp());
            }
        }
        let n = labels.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss / n),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Hard per-column selection with a straight-through path to the
    /// selection probabilities.
    ///
    /// `docked` and `probs` are `M x c`; `chosen[d]` picks a row for column `d`.
    /// The output row is
    /// `out[d] = docked[chosen[d], d] + sum_m (probs[m, d] - reference[m, d]) * docked[m, d]`
    /// where `reference` is a constant. Passing the current value of `probs`
    /// as `reference` makes the forward value exactly the hard selection while
    /// the backward pass routes `g[d] * docked[m, d]` into `probs`, i.e. it
    /// treats the one-hot choice as if it were the probability column.
    /// Gradients into `docked` reach only the chosen entries in that case.
    pub fn select_straight_through(
        &mut self,
        docked: NodeId,
        probs: NodeId,
        chosen: &[usize],
        reference: Option<Tensor>,
    ) -> Result<NodeId> {
        let (x, p) = (&self.values[docked.0], &self.values[probs.0]);
        if !x.same_shape(p) {
            return Err(shape_err("select_straight_through", x, p));
        }
        if chosen.len() != x.cols() || chosen.iter().any(|&m| m >= x.rows()) {
            return Err(Error::Shape {
                op: "select_straight_through",
                left: x.shape(),
                right: vec![chosen.len()],
            });
        }
        let reference = reference.unwrap_or_else(|| p.clone());
        if !reference.same_shape(p) {
            return Err(shape_err("select_straight_through reference", p, &reference));
        }
        let c = x.cols();
        let mut out = Tensor::zeros(1, c);
        for (d, &m) in chosen.iter().enumerate() {
            let mut v = x.get(m, d);
            for r in 0..x.rows() {
                let delta = p.get(r, d) - reference.get(r, d);
                if delta != 0.0 {
                    v += delta * x.get(r, d);
                }
            }
            out.set(0, d, v);
        }
        Ok(self.push(
            out,
            Op::SelectStraightThrough {
                docked,
                probs,
                chosen: chosen.to_vec(),
                reference,
            },
        ))
    }

    fn accumulate(&mut self, id: NodeId, g: Tensor) {
        match &mut self.grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse pass from a `1 x 1` node. Gradients accumulate across shared
    /// subexpressions and across repeated calls.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let root = self.values.get(loss.0).ok_or(Error::MissingTrace)?;
        if root.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                left: root.shape(),
                right: vec![1, 1],
            });
        }
        self.accumulate(loss, Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &Tensor) -> Result<()> {
        let ops = std::mem::replace(&mut self.ops[i], Op::Leaf);
        let res = self.backprop_op(i, &ops, g);
        self.ops[i] = ops;
        res
    }

    fn backprop_op(&mut self, i: usize, op: &Op, g: &Tensor) -> Result<()> {
        match op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let ga = g.matmul(&self.values[b.0].transpose())?;
                let gb = self.values[a.0].transpose().matmul(g)?;
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.clone());
            }
            Op::AddRow(a, row) => {
                let c = g.cols();
                let mut gr = Tensor::zeros(1, c);
                for r in 0..g.rows() {
                    gr.data_mut().iter_mut().zip(g.row_slice(r)).for_each(|(o, v)| *o += v);
                }
                self.accumulate(*a, g.clone());
                self.accumulate(*row, gr);
            }
            Op::Mul(a, b) => {
                let (x, y) = (&self.values[a.0], &self.values[b.0]);
                let ga = elementwise(g, y, |p, q| p * q);
                let gb = elementwise(g, x, |p, q| p * q);
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::MulRow(a, row) => {
                let (x, w) = (&self.values[a.0], &self.values[row.0]);
                let c = x.cols();
                let mut ga = g.clone();
                let mut gw = Tensor::zeros(1, c);
                for (k, e) in ga.data_mut().iter_mut().enumerate() {
                    gw.data_mut()[k % c] += *e * x.data()[k];
                    *e *= w.data()[k % c];
                }
                self.accumulate(*a, ga);
                self.accumulate(*row, gw);
            }
            Op::Scale(a, f) => {
                let ga = g.map(|v| v * f);
                self.accumulate(*a, ga);
            }
            Op::LeakyRelu(a, slope) => {
                let x = &self.values[a.0];
                let ga = elementwise(g, x, |gv, xv| if xv > 0.0 { gv } else { slope * gv });
                self.accumulate(*a, ga);
            }
            Op::Dropout(a, mask) => {
                let data = g.data().iter().zip(mask).map(|(v, m)| v * m).collect();
                let ga = Tensor::from_vec(g.rows(), g.cols(), data)?;
                self.accumulate(*a, ga);
            }
            Op::Softmax(a, axis) => {
                let y = &self.values[i];
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                let (groups, span) = match axis {
                    Axis::Cols => (y.rows(), y.cols()),
                    Axis::Rows => (y.cols(), y.rows()),
                };
                let cols = y.cols();
                let idx = |grp: usize, j: usize| match axis {
                    Axis::Cols => grp * cols + j,
                    Axis::Rows => j * cols + grp,
                };
                for grp in 0..groups {
                    let dot: f64 = (0..span).map(|j| y.data()[idx(grp, j)] * g.data()[idx(grp, j)]).sum();
                    for j in 0..span {
                        let k = idx(grp, j);
                        ga.data_mut()[k] = y.data()[k] * (g.data()[k] - dot);
                    }
                }
                self.accumulate(*a, ga);
            }
            Op::LayerNorm { input, xhat, inv_std } => {
                let (r, c) = (g.rows(), g.cols());
                let mut ga = Tensor::zeros(r, c);
                for row in 0..r {
                    let gs = g.row_slice(row);
                    let xs = &xhat[row * c..(row + 1) * c];
                    let mean_g = gs.iter().sum::<f64>() / c as f64;
                    let mean_gx = gs.iter().zip(xs).map(|(p, q)| p * q).sum::<f64>() / c as f64;
                    for j in 0..c {
                        ga.set(row, j, inv_std[row] * (gs[j] - mean_g - xs[j] * mean_gx));
                    }
                }
                self.accumulate(*input, ga);
            }
            Op::Conv1d { input, weight, bias, width } => {
                let (x, w) = (&self.values[input.0], &self.values[weight.0]);
                let (t, cin, cout) = (x.rows(), x.cols(), w.rows());
                let half = (*width / 2) as isize;
                let mut gx = Tensor::zeros(t, cin);
                let mut gw = Tensor::zeros(cout, width * cin);
                let mut gb = Tensor::zeros(1, cout);
                for step in 0..t {
                    for o in 0..cout {
                        let go = g.get(step, o);
                        if go == 0.0 {
                            continue;
                        }
                        gb.data_mut()[o] += go;
                        for k in 0..*width {
                            let src = step as isize + k as isize - half;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let src = src as usize;
                            for ch in 0..cin {
                                let col = k * cin + ch;
                                let wv = w.get(o, col);
                                let xv = x.get(src, ch);
                                gw.data_mut()[o * width * cin + col] += go * xv;
                                gx.data_mut()[src * cin + ch] += go * wv;
                            }
                        }
                    }
                }
                self.accumulate(*input, gx);
                self.accumulate(*weight, gw);
                self.accumulate(*bias, gb);
            }
            Op::MeanPool(a) => {
                let x = &self.values[a.0];
                let n = x.rows() as f64;
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    for c in 0..x.cols() {
                        ga.set(r, c, g.get(0, c) / n);
                    }
                }
                self.accumulate(*a, ga);
            }
            Op::Concat(parts, axis) => {
                let mut offset = 0;
                let shapes: Vec<(usize, usize)> = parts
                    .iter()
                    .map(|p| (self.values[p.0].rows(), self.values[p.0].cols()))
                    .collect();
                for (p, (pr, pc)) in parts.iter().zip(shapes) {
                    let mut gp = Tensor::zeros(pr, pc);
                    match axis {
                        Axis::Rows => {
                            for r in 0..pr {
                                for c in 0..pc {
                                    gp.set(r, c, g.get(offset + r, c));
                                }
                            }
                            offset += pr;
                        }
                        Axis::Cols => {
                            for r in 0..pr {
                                for c in 0..pc {
                                    gp.set(r, c, g.get(r, offset + c));
                                }
                            }
                            offset += pc;
                        }
                    }
                    self.accumulate(*p, gp);
                }
            }
            Op::Transpose(a) => {
                self.accumulate(*a, g.transpose());
            }
            Op::Sum(a) => {
                let x = &self.values[a.0];
                let ga = Tensor::filled(x.rows(), x.cols(), g.data()[0]);
                self.accumulate(*a, ga);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = labels.len() as f64;
                let scale = g.data()[0] / n;
                let mut ga = probs.clone();
                for (r, &label) in labels.iter().enumerate() {
                    let v = ga.get(r, label);
                    ga.set(r, label, v - 1.0);
                }
                ga.data_mut().iter_mut().for_each(|v| *v *= scale);
                self.accumulate(*logits, ga);
            }
            Op::SelectStraightThrough {
                docked,
                probs,
                chosen,
                reference,
            } => {
                let (x, p) = (&self.values[docked.0], &self.values[probs.0]);
                let (m, c) = (x.rows(), x.cols());
                let mut gx = Tensor::zeros(m, c);
                let mut gp = Tensor::zeros(m, c);
                for d in 0..c {
                    let gd = g.get(0, d);
                    for r in 0..m {
                        let weight = if r == chosen[d] { 1.0 } else { 0.0 } + p.get(r, d) - reference.get(r, d);
                        gx.set(r, d, gd * weight);
                        gp.set(r, d, gd * x.get(r, d));
                    }
                }
                self.accumulate(*docked, gx);
                self.accumulate(*probs, gp);
            }
        }
        Ok(())
    }

    /// Gradients of every parameter touched by this graph.
    pub fn into_param_grads(mut self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .param_nodes
            .iter()
            .filter_map(|(&pid, &node)| self.grads[node.0].take().map(|g| (pid, g)))
            .collect();
        out.sort_by_key(|(pid, _)| *pid);
        out
    }

    /// Draws a uniform sample in `[0, 1)` from the training RNG.
    pub fn uniform(&mut self) -> Option<f64> {
        self.rng.as_deref_mut().map(|r| r.random::<f64>())
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("elementwise shape")
}
