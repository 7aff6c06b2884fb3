//! Tape-based reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! Every operation appends a node holding its forward value, an op tag and
//! the ids of its parents. Parents always precede children, so walking the
//! tape backwards from a scalar root is a valid reverse topological order.
//!
//! ```
//! use fewgraph::numcore::{Matrix, Tape};
//!
//! let mut tape = Tape::new();
//! let w = tape.param(Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
//! let loss = tape.sum(w);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[1.0; 4]);
//! ```

use super::matrix::{gemm, Matrix};
use crate::error::{Error, Result};

/// Clamp applied to probabilities before taking logarithms.
pub const LOG_EPSILON: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    AbsDiff(Var, Var),
    PairwiseAbsDiff(Var),
    PairMlp(Var, Vec<Var>),
    SymmetricFromPairs(Var, usize),
    Relu(Var),
    RowSoftmax(Var, f64),
    GcnNormalize(Var),
    SelectRows(Var, Vec<usize>),
    Sum(Var),
    CrossEntropy(Var, Matrix),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Records operations for a single forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every reachable leaf that
/// requires a gradient.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
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

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.leaf(value, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = zip_with("add", self.value(a), self.value(b), |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = zip_with("mul", self.value(a), self.value(b), |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    /// Adds a `1 x c` row to every row of an `n x c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != m.cols() {
            return Err(Error::dim(
                "add_row",
                format!("{:?} plus row {:?}", m.shape(), r.shape()),
            ));
        }
        let mut value = m.clone();
        for i in 0..value.rows() {
            for (v, b) in value.row_mut(i).iter_mut().zip(r.data()) {
                *v += b;
            }
        }
        let rg = self.any_grad(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    /// Elementwise `|a - b|`; the subgradient at `a == b` is 0.
    pub fn abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = zip_with("abs_diff", self.value(a), self.value(b), |x, y| (x - y).abs())?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::AbsDiff(a, b), rg))
    }

    /// For an `n x k` input, the `n(n-1)/2 x k` matrix of `|x_i - x_j|` over
    /// all pairs `i < j`, ordered by `i` then `j` (see [`pair_index`]).
    pub fn pairwise_abs_diff(&mut self, x: Var) -> Var {
        let xm = self.value(x);
        let (n, k) = xm.shape();
        let mut value = Matrix::zeros(pair_count(n), k);
        let mut p = 0;
        for i in 0..n {
            let xi = xm.row(i);
            for j in i + 1..n {
                let xj = xm.row(j);
                for ((o, a), b) in value.row_mut(p).iter_mut().zip(xi).zip(xj) {
                    *o = (a - b).abs();
                }
                p += 1;
            }
        }
        let rg = self.any_grad(&[x]);
        self.push(value, Op::PairwiseAbsDiff(x), rg)
    }

    /// Bias-free MLP applied to `|x_i - x_j|` for every pair `i < j`, with
    /// ReLU between layers and a linear output. Equals `pairwise_abs_diff`
    /// followed by alternating `matmul`/`relu`, but works through the pairs
    /// in blocks so no `pairs x hidden` intermediate is kept; the backward
    /// pass recomputes each block.
    pub fn pair_mlp(&mut self, x: Var, layers: &[Var]) -> Result<Var> {
        let Some(&last) = layers.last() else {
            return Err(Error::Parameter("pair_mlp needs at least one layer".into()));
        };
        let mut width = self.value(x).cols();
        for &w in layers {
            let wm = self.value(w);
            if wm.rows() != width {
                return Err(Error::dim(
                    "pair_mlp",
                    format!("layer expects {} inputs, gets {width}", wm.rows()),
                ));
            }
            width = wm.cols();
        }
        let xm = self.value(x);
        let weights: Vec<&Matrix> = layers.iter().map(|&w| self.value(w)).collect();
        let pairs = pair_list(xm.rows());
        let mut value = Matrix::zeros(pairs.len(), self.value(last).cols());
        let mut acts = Vec::new();
        for (b, block) in pairs.chunks(PAIR_BLOCK).enumerate() {
            pair_block_forward(xm, &weights, block, &mut acts);
            let out = acts.last().expect("at least one layer");
            let start = b * PAIR_BLOCK * value.cols();
            value.data_mut()[start..start + out.len()].copy_from_slice(out.data());
        }
        let mut parents = vec![x];
        parents.extend_from_slice(layers);
        let rg = self.any_grad(&parents);
        Ok(self.push(value, Op::PairMlp(x, layers.to_vec()), rg))
    }

    /// Scatters a column of `n(n-1)/2` pair values into a symmetric `n x n`
    /// matrix with a zero diagonal.
    pub fn symmetric_from_pairs(&mut self, pairs: Var, n: usize) -> Result<Var> {
        let v = self.value(pairs);
        if v.cols() != 1 || v.rows() != pair_count(n) {
            return Err(Error::dim(
                "symmetric_from_pairs",
                format!("{:?} pair values for {n} nodes", v.shape()),
            ));
        }
        let mut value = Matrix::zeros(n, n);
        let mut p = 0;
        for i in 0..n {
            for j in i + 1..n {
                let e = v.data()[p];
                value.set(i, j, e);
                value.set(j, i, e);
                p += 1;
            }
        }
        let rg = self.any_grad(&[pairs]);
        Ok(self.push(value, Op::SymmetricFromPairs(pairs, n), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    /// Row-wise softmax of `a / temperature`.
    pub fn row_softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        let value = row_softmax(self.value(a), temperature)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::RowSoftmax(a, temperature), rg))
    }

    /// `D^{-1/2} (A + I) D^{-1/2}` with `D` the row sums of `A + I`.
    pub fn gcn_normalize(&mut self, a: Var) -> Result<Var> {
        let value = gcn_normalize(self.value(a))?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::GcnNormalize(a), rg))
    }

    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let m = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= m.rows()) {
            return Err(Error::dim(
                "select_rows",
                format!("row {bad} of a {}-row matrix", m.rows()),
            ));
        }
        let value = m.select_rows(indices);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::SelectRows(a, indices.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    /// Mean over rows of `-sum_y target_y * ln(max(pred_y, LOG_EPSILON))`.
    ///
    /// Zero rows give a loss of 0.
    pub fn cross_entropy(&mut self, pred: Var, target: &Matrix) -> Result<Var> {
        let value = Matrix::scalar(cross_entropy(self.value(pred), target)?);
        let rg = self.any_grad(&[pred]);
        Ok(self.push(value, Op::CrossEntropy(pred, target.clone()), rg))
    }

    /// Reverse sweep from a scalar root.
    ///
    /// Only leaves keep their gradients; intermediate adjoints are dropped as
    /// soon as they have been propagated.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.shape() != (1, 1) {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        if root.requires_grad {
            grads[loss.0] = Some(Matrix::scalar(1.0));
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            if let Some(g) = grads[id].take() {
                self.propagate(node, &g, &mut grads);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], var: Var, g: Matrix) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    gemm(g, false, bv, true, &mut ga, 0.0);
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                    gemm(av, true, g, false, &mut gb, 0.0);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let ga = zip_unchecked(g, self.value(*b), |x, y| x * y);
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = zip_unchecked(g, self.value(*a), |x, y| x * y);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|x| x * s));
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*row) {
                    let mut gr = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, v) in gr.data_mut().iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::AbsDiff(a, b) => {
                let sign = zip_unchecked(self.value(*a), self.value(*b), |x, y| sign(x - y));
                if self.wants(*a) {
                    self.accumulate(grads, *a, zip_unchecked(g, &sign, |x, s| x * s));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, zip_unchecked(g, &sign, |x, s| -x * s));
                }
            }
            Op::PairwiseAbsDiff(x) => {
                let xm = self.value(*x);
                let (n, k) = xm.shape();
                let mut gx = Matrix::zeros(n, k);
                let mut p = 0;
                for i in 0..n {
                    for j in i + 1..n {
                        let gp = g.row(p);
                        for c in 0..k {
                            let d = gp[c] * sign(xm.get(i, c) - xm.get(j, c));
                            gx.data_mut()[i * k + c] += d;
                            gx.data_mut()[j * k + c] -= d;
                        }
                        p += 1;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::PairMlp(x, layers) => self.pair_mlp_backward(*x, layers, g, grads),
            Op::SymmetricFromPairs(pairs, n) => {
                let mut gp = Matrix::zeros(pair_count(*n), 1);
                let mut p = 0;
                for i in 0..*n {
                    for j in i + 1..*n {
                        gp.data_mut()[p] = g.get(i, j) + g.get(j, i);
                        p += 1;
                    }
                }
                self.accumulate(grads, *pairs, gp);
            }
            Op::Relu(a) => {
                let ga = zip_unchecked(g, &node.value, |x, y| if y > 0.0 { x } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::RowSoftmax(a, t) => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (gi, yi) = (g.row(i), y.row(i));
                    let dot: f64 = gi.iter().zip(yi).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in ga.row_mut(i).iter_mut().zip(gi).zip(yi) {
                        *o = yv * (gv - dot) / t;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::GcnNormalize(a) => {
                let am = self.value(*a);
                let n = am.rows();
                let (b, inv_sqrt) = self_loop_degrees(am);
                // dL/ds_i, where s_i = d_i^{-1/2} enters row i and column i.
                let mut gs = vec![0.0; n];
                for i in 0..n {
                    for j in 0..n {
                        let w = g.get(i, j) * b.get(i, j);
                        gs[i] += w * inv_sqrt[j];
                        gs[j] += w * inv_sqrt[i];
                    }
                }
                let mut ga = Matrix::zeros(n, n);
                for i in 0..n {
                    // ds_i/dd_i = -1/2 d_i^{-3/2} = -1/2 s_i^3
                    let through_degree = gs[i] * -0.5 * inv_sqrt[i].powi(3);
                    for j in 0..n {
                        ga.set(
                            i,
                            j,
                            g.get(i, j) * inv_sqrt[i] * inv_sqrt[j] + through_degree,
                        );
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SelectRows(a, indices) => {
                let am = self.value(*a);
                let mut ga = Matrix::zeros(am.rows(), am.cols());
                for (r, &i) in indices.iter().enumerate() {
                    for (o, v) in ga.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let am = self.value(*a);
                self.accumulate(grads, *a, Matrix::filled(am.rows(), am.cols(), g.data()[0]));
            }
            Op::CrossEntropy(pred, target) => {
                let p = self.value(*pred);
                let n = p.rows() as f64;
                let scale = g.data()[0] / n;
                let gp = zip_unchecked(p, target, |pv, tv| {
                    if pv > LOG_EPSILON {
                        -scale * tv / pv
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *pred, gp);
            }
        }
    }
}

impl Tape {
    fn pair_mlp_backward(&self, x: Var, layers: &[Var], g: &Matrix, grads: &mut [Option<Matrix>]) {
        let xm = self.value(x);
        let (n, k) = xm.shape();
        let weights: Vec<&Matrix> = layers.iter().map(|&w| self.value(w)).collect();
        let want_x = self.wants(x);
        let mut gw: Vec<Option<Matrix>> = layers
            .iter()
            .zip(&weights)
            .map(|(&v, w)| self.wants(v).then(|| Matrix::zeros(w.rows(), w.cols())))
            .collect();
        let mut gx = want_x.then(|| Matrix::zeros(n, k));
        let pairs = pair_list(n);
        let out_w = g.cols();
        let mut acts = Vec::new();
        for (b, block) in pairs.chunks(PAIR_BLOCK).enumerate() {
            pair_block_forward(xm, &weights, block, &mut acts);
            let start = b * PAIR_BLOCK * out_w;
            let mut delta =
                Matrix::from_vec(block.len(), out_w, g.data()[start..start + block.len() * out_w].to_vec())
                    .expect("block slice has the block's shape");
            for l in (0..weights.len()).rev() {
                // acts[l] is the input of layer l: the pair features for l = 0,
                // otherwise the previous layer's ReLU output.
                if let Some(gwl) = gw[l].as_mut() {
                    gemm(&acts[l], true, &delta, false, gwl, 1.0);
                }
                if l == 0 && !want_x {
                    break;
                }
                let mut prev = Matrix::zeros(block.len(), weights[l].rows());
                gemm(&delta, false, weights[l], true, &mut prev, 0.0);
                if l > 0 {
                    for (d, &a) in prev.data_mut().iter_mut().zip(acts[l].data()) {
                        *d = if a > 0.0 { *d } else { 0.0 };
                    }
                }
                delta = prev;
            }
            if let Some(gx) = gx.as_mut() {
                let mut d = vec![0.0; k];
                for (r, &(i, j)) in block.iter().enumerate() {
                    let (i, j) = (i as usize, j as usize);
                    for (((o, g), a), b) in d.iter_mut().zip(delta.row(r)).zip(xm.row(i)).zip(xm.row(j)) {
                        *o = g * sign(a - b);
                    }
                    for (o, v) in gx.row_mut(i).iter_mut().zip(&d) {
                        *o += v;
                    }
                    for (o, v) in gx.row_mut(j).iter_mut().zip(&d) {
                        *o -= v;
                    }
                }
            }
        }
        if let Some(gx) = gx {
            self.accumulate(grads, x, gx);
        }
        for (&v, gwl) in layers.iter().zip(gw) {
            if let Some(gwl) = gwl {
                self.accumulate(grads, v, gwl);
            }
        }
    }
}

/// Pairs per block in [`Tape::pair_mlp`].
const PAIR_BLOCK: usize = 256;

/// All pairs `i < j` in [`pair_index`] order.
fn pair_list(n: usize) -> Vec<(u32, u32)> {
    let mut out = Vec::with_capacity(pair_count(n));
    for i in 0..n {
        for j in i + 1..n {
            out.push((i as u32, j as u32));
        }
    }
    out
}

/// Fills `acts` with the input of every layer followed by the final output
/// for one block of pairs, reusing the buffers already in `acts`.
fn pair_block_forward(x: &Matrix, weights: &[&Matrix], block: &[(u32, u32)], acts: &mut Vec<Matrix>) {
    let widths = std::iter::once(x.cols()).chain(weights.iter().map(|w| w.cols()));
    if acts.len() != weights.len() + 1 || acts[0].rows() != block.len() {
        *acts = widths.map(|c| Matrix::zeros(block.len(), c)).collect();
    }
    let d = &mut acts[0];
    for (r, &(i, j)) in block.iter().enumerate() {
        let (xi, xj) = (x.row(i as usize), x.row(j as usize));
        for ((o, a), b) in d.row_mut(r).iter_mut().zip(xi).zip(xj) {
            *o = (a - b).abs();
        }
    }
    let last = weights.len() - 1;
    for (l, w) in weights.iter().enumerate() {
        let (done, rest) = acts.split_at_mut(l + 1);
        let z = &mut rest[0];
        gemm(&done[l], false, w, false, z, 0.0);
        if l < last {
            // Branch-free: activations are negative about half the time.
            for v in z.data_mut() {
                *v = v.max(0.0);
            }
        }
    }
}

/// Subgradient of `|x|`, with 0 at 0; branch-free.
#[inline]
fn sign(x: f64) -> f64 {
    f64::from(u8::from(x > 0.0)) - f64::from(u8::from(x < 0.0))
}

/// Number of unordered node pairs `i < j` among `n` nodes.
pub fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Row of pair `(i, j)`, `i < j`, in [`Tape::pairwise_abs_diff`] output.
pub fn pair_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * n - i * (i + 1) / 2 + (j - i - 1)
}

fn zip_with(op: &'static str, a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(zip_unchecked(a, b, f))
}

fn zip_unchecked(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("shapes checked by caller")
}

/// Row-wise softmax of `a / temperature` with max subtraction.
pub fn row_softmax(a: &Matrix, temperature: f64) -> Result<Matrix> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Parameter(format!(
            "softmax temperature must be positive and finite, got {temperature}"
        )));
    }
    let mut out = Matrix::zeros(a.rows(), a.cols());
    for i in 0..a.rows() {
        let row = a.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
        let dst = out.row_mut(i);
        let mut total = 0.0;
        for (o, &v) in dst.iter_mut().zip(row) {
            *o = (v / temperature - max).exp();
            total += *o;
        }
        for o in dst.iter_mut() {
            *o /= total;
        }
    }
    Ok(out)
}

/// `A + I` and `D^{-1/2}` as a vector.
fn self_loop_degrees(a: &Matrix) -> (Matrix, Vec<f64>) {
    let n = a.rows();
    let mut b = a.clone();
    for i in 0..n {
        b.set(i, i, b.get(i, i) + 1.0);
    }
    let inv_sqrt = (0..n).map(|i| 1.0 / b.row(i).iter().sum::<f64>().sqrt()).collect();
    (b, inv_sqrt)
}

/// Symmetric GCN normalisation `D^{-1/2} (A + I) D^{-1/2}`.
pub fn gcn_normalize(a: &Matrix) -> Result<Matrix> {
    if a.rows() != a.cols() {
        return Err(Error::dim(
            "gcn_normalize",
            format!("adjacency must be square, got {:?}", a.shape()),
        ));
    }
    let n = a.rows();
    let (mut b, inv_sqrt) = self_loop_degrees(a);
    if let Some(i) = inv_sqrt.iter().position(|s| !s.is_finite()) {
        return Err(Error::Parameter(format!(
            "node {i} has non-positive degree in A + I"
        )));
    }
    for i in 0..n {
        for j in 0..n {
            b.set(i, j, inv_sqrt[i] * b.get(i, j) * inv_sqrt[j]);
        }
    }
    Ok(b)
}

/// Mean over rows of `-sum_y target_y * ln(max(pred_y, LOG_EPSILON))`.
pub fn cross_entropy(pred: &Matrix, target: &Matrix) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::dim(
            "cross_entropy",
            format!("pred {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    if pred.rows() == 0 {
        return Ok(0.0);
    }
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| if t == 0.0 { 0.0 } else { -t * p.max(LOG_EPSILON).ln() })
        .sum();
    Ok(total / pred.rows() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_index_enumerates_in_order() {
        let n = 6;
        let mut p = 0;
        for i in 0..n {
            for j in i + 1..n {
                assert_eq!(pair_index(n, i, j), p);
                p += 1;
            }
        }
        assert_eq!(p, pair_count(n));
        assert_eq!(pair_count(0), 0);
        assert_eq!(pair_count(1), 0);
    }

    fn seeded(rows: usize, cols: usize, seed: u64) -> Matrix {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn pair_mlp_matches_composed_ops() {
        // 40 nodes give 780 pairs, so several blocks including a partial one.
        let (x0, w1, w2, w3) = (seeded(40, 5, 1), seeded(5, 7, 2), seeded(7, 4, 3), seeded(4, 1, 4));
        let weights = Matrix::from_vec(780, 1, seeded(780, 1, 5).into_vec()).unwrap();
        let run = |fused: bool| {
            let mut t = Tape::new();
            let x = t.param(x0.clone());
            let ws = [t.param(w1.clone()), t.param(w2.clone()), t.param(w3.clone())];
            let out = if fused {
                t.pair_mlp(x, &ws).unwrap()
            } else {
                let mut h = t.pairwise_abs_diff(x);
                for (l, &w) in ws.iter().enumerate() {
                    h = t.matmul(h, w).unwrap();
                    if l < 2 {
                        h = t.relu(h);
                    }
                }
                h
            };
            let c = t.constant(weights.clone());
            let m = t.mul(out, c).unwrap();
            let loss = t.sum(m);
            let g = t.backward(loss).unwrap();
            let mut all = vec![t.value(out).clone(), g.get(x).unwrap().clone()];
            all.extend(ws.iter().map(|&w| g.get(w).unwrap().clone()));
            all
        };
        let (a, b) = (run(true), run(false));
        for (fa, fb) in a.iter().zip(&b) {
            assert_eq!(fa.shape(), fb.shape());
            assert!(fa.max_abs_diff(fb) < 1e-12, "{}", fa.max_abs_diff(fb));
        }
    }

    #[test]
    fn pair_mlp_rejects_bad_layers() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::zeros(3, 4));
        let w = t.param(Matrix::zeros(5, 1));
        assert!(matches!(t.pair_mlp(x, &[w]), Err(Error::Dimension { .. })));
        assert!(matches!(t.pair_mlp(x, &[]), Err(Error::Parameter(_))));
    }

    #[test]
    fn abs_diff_values() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::row_vector(&[1.0, -2.0]));
        let d = t.abs_diff(a, a).unwrap();
        assert_eq!(t.value(d).data(), &[0.0, 0.0]);
        let a = t.constant(Matrix::row_vector(&[3.0, 0.0]));
        let b = t.constant(Matrix::row_vector(&[1.0, 4.0]));
        let d = t.abs_diff(a, b).unwrap();
        assert_eq!(t.value(d).data(), &[2.0, 4.0]);
        let c = t.constant(Matrix::row_vector(&[1.0]));
        assert!(matches!(t.abs_diff(a, c), Err(Error::Dimension { .. })));
    }

    #[test]
    fn relu_values_and_dead_gradient() {
        let mut t = Tape::new();
        let a = t.param(Matrix::row_vector(&[-1.0, 0.0, 2.0]));
        let r = t.relu(a);
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);

        let mut t = Tape::new();
        let a = t.param(Matrix::row_vector(&[-1.0, -0.5, -3.0]));
        let r = t.relu(a);
        let s = t.sum(r);
        assert_eq!(t.value(r).data(), &[0.0; 3]);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn softmax_cases() {
        let u = row_softmax(&Matrix::row_vector(&[0.0, 0.0, 0.0]), 1.0).unwrap();
        for v in u.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = row_softmax(&Matrix::row_vector(&[1000.0, 0.0]), 1.0).unwrap();
        assert!(s.is_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1] < 1e-12);
        let hot = row_softmax(&Matrix::row_vector(&[3.0, -1.0, 0.5, 2.0]), 1e6).unwrap();
        for v in hot.data() {
            assert!((v - 0.25).abs() < 1e-3);
        }
        assert!(matches!(
            row_softmax(&Matrix::row_vector(&[1.0]), 0.0),
            Err(Error::Parameter(_))
        ));
        assert!(row_softmax(&Matrix::row_vector(&[1.0]), -2.0).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let onehot = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!(cross_entropy(&onehot, &onehot).unwrap().abs() < 1e-12);
        let half = Matrix::row_vector(&[0.5, 0.5]);
        let tgt = Matrix::row_vector(&[1.0, 0.0]);
        assert!((cross_entropy(&half, &tgt).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&half, &onehot).is_err());
        // Fully confident wrong prediction is clamped, not infinite.
        let wrong = Matrix::row_vector(&[0.0, 1.0]);
        let v = cross_entropy(&wrong, &tgt).unwrap();
        assert!((v - (-LOG_EPSILON.ln())).abs() < 1e-9);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut t = Tape::new();
        let w = t.param(Matrix::zeros(2, 2));
        assert!(matches!(t.backward(w), Err(Error::Usage(_))));
    }

    #[test]
    fn sum_and_half_squared_norm_gradients() {
        let w0 = Matrix::from_rows(&[[1.0, -2.0, 0.5], [3.0, 0.0, -1.5]]).unwrap();
        let mut t = Tape::new();
        let w = t.param(w0.clone());
        let s = t.sum(w);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0; 6]);

        // tr(W^T W) / 2 = sum(W * W) / 2
        let sq = t.mul(w, w).unwrap();
        let tot = t.sum(sq);
        let half = t.scale(tot, 0.5);
        let g = t.backward(half).unwrap();
        assert_eq!(g.get(w).unwrap(), &w0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Matrix::filled(2, 2, 1.0));
        let w = t.param(Matrix::filled(2, 2, 2.0));
        let p = t.matmul(c, w).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert!(g.get(w).is_some());
    }

    #[test]
    fn gcn_normalize_two_nodes() {
        let a = Matrix::filled(2, 2, 0.5);
        let n = gcn_normalize(&a).unwrap();
        let want = Matrix::from_rows(&[[0.75, 0.25], [0.25, 0.75]]).unwrap();
        assert!(n.max_abs_diff(&want) < 1e-15);
        assert!(gcn_normalize(&Matrix::zeros(2, 3)).is_err());
        assert!(gcn_normalize(&Matrix::filled(1, 1, -2.0)).is_err());
    }
}
