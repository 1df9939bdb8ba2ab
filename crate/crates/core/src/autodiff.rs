//! Define-by-run reverse-mode differentiation over dense `f64` matrices.
//!
//! Every model in the crate records its forward pass on a [`Tape`], then
//! calls [`Tape::backward`] on a `1 x 1` loss node. Values are plain
//! [`Array2`]s; column vectors are `n x 1` and row vectors `1 x n`.

use ndarray::{s, Array2, Axis, Zip};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Transpose(usize),
    AddRow(usize, usize),
    AddCol(usize, usize),
    OuterSum(usize, usize),
    RowSlice(usize, usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Elu(usize),
    Sigmoid(usize),
    Softplus(usize),
    Ln(usize),
    Sqrt(usize),
    Abs(usize),
    Square(usize),
    FloorAt(usize, f64),
    Clamp(usize, f64, f64),
    Sum(usize),
    RowSums(usize),
    ColMeans(usize),
    MaskedRowSoftmax(usize, Array2<bool>),
    PairwiseL1(usize),
    SortRowsDesc(usize, Vec<Vec<usize>>),
    SoftmaxCrossEntropy(usize, usize),
    FrobeniusNorm(usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Epsilon inside the square root of [`Tape::frobenius_norm`].
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node on the tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; zeros if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Array2<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(self.shapes[v.0]),
        }
    }
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
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

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Input or parameter.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a.0, b.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a.0, b.0))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a.0, b.0))
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) / self.value(b);
        self.push(v, Op::Div(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a.0, k))
    }

    /// Adds a constant to every entry.
    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        self.push(v, Op::Offset(a.0))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a.0))
    }

    /// `a (n x m) + row (1 x m)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a.0, row.0))
    }

    /// `a (n x m) + col (n x 1)` broadcast over columns.
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let v = self.value(a) + self.value(col);
        self.push(v, Op::AddCol(a.0, col.0))
    }

    /// `out[i][j] = u[i] + v[j]` for column vectors `u`, `v`.
    pub fn outer_sum(&mut self, u: Var, v: Var) -> Var {
        let (uu, vv) = (self.value(u), self.value(v));
        let out = Array2::from_shape_fn((uu.nrows(), vv.nrows()), |(i, j)| uu[[i, 0]] + vv[[j, 0]]);
        self.push(out, Op::OuterSum(u.0, v.0))
    }

    /// Rows `start..end`.
    pub fn row_slice(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(v, Op::RowSlice(a.0, start))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a.0))
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Var {
        let v = self.value(a).mapv(|x| if x > 0.0 { x } else { alpha * x });
        self.push(v, Op::LeakyRelu(a.0, alpha))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(elu);
        self.push(v, Op::Elu(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(softplus);
        self.push(v, Op::Softplus(a.0))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Ln(a.0))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        self.push(v, Op::Abs(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a.0))
    }

    /// `max(x, floor)` elementwise.
    pub fn floor_at(&mut self, a: Var, floor: f64) -> Var {
        let v = self.value(a).mapv(|x| x.max(floor));
        self.push(v, Op::FloorAt(a.0, floor))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a.0, lo, hi))
    }

    /// Sum of all entries as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a.0))
    }

    /// `n x 1` column of row sums.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::RowSums(a.0))
    }

    /// `1 x m` row of column means (mean-pooling over nodes).
    pub fn col_means(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("non-empty")
            .insert_axis(Axis(0));
        self.push(v, Op::ColMeans(a.0))
    }

    /// Row-wise softmax restricted to `mask`; masked-out entries are exactly 0.
    /// Rows with no admissible entry are all zero.
    pub fn masked_row_softmax(&mut self, a: Var, mask: &Array2<bool>) -> Var {
        let x = self.value(a);
        let mut out = Array2::zeros(x.dim());
        for i in 0..x.nrows() {
            let mut max = f64::NEG_INFINITY;
            for j in 0..x.ncols() {
                if mask[[i, j]] {
                    max = max.max(x[[i, j]]);
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut denom = 0.0;
            for j in 0..x.ncols() {
                if mask[[i, j]] {
                    let e = (x[[i, j]] - max).exp();
                    out[[i, j]] = e;
                    denom += e;
                }
            }
            for j in 0..x.ncols() {
                out[[i, j]] /= denom;
            }
        }
        self.push(out, Op::MaskedRowSoftmax(a.0, mask.clone()))
    }

    /// `out[i][j] = sum_d |z[i][d] - z[j][d]|`.
    pub fn pairwise_l1(&mut self, z: Var) -> Var {
        let zz = self.value(z);
        let n = zz.nrows();
        let mut out = Array2::zeros((n, n));
        for i in 0..n {
            for j in (i + 1)..n {
                let d: f64 = zz
                    .row(i)
                    .iter()
                    .zip(zz.row(j).iter())
                    .map(|(a, b)| (a - b).abs())
                    .sum();
                out[[i, j]] = d;
                out[[j, i]] = d;
            }
        }
        self.push(out, Op::PairwiseL1(z.0))
    }

    /// Each row sorted in descending order. Node-order-free summary of a
    /// node's connectivity profile.
    pub fn sort_rows_desc(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Array2::zeros(x.dim());
        let mut perms = Vec::with_capacity(x.nrows());
        for i in 0..x.nrows() {
            let mut idx: Vec<usize> = (0..x.ncols()).collect();
            idx.sort_by(|&p, &q| x[[i, q]].total_cmp(&x[[i, p]]));
            for (k, &p) in idx.iter().enumerate() {
                out[[i, k]] = x[[i, p]];
            }
            perms.push(idx);
        }
        self.push(out, Op::SortRowsDesc(a.0, perms))
    }

    /// Cross-entropy of a `1 x c` logit row against class `target`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Var {
        let z = self.value(logits);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let v = Array2::from_elem((1, 1), lse - z[[0, target]]);
        self.push(v, Op::SoftmaxCrossEntropy(logits.0, target))
    }

    /// `sqrt(sum(a^2) + NORM_EPS)`.
    pub fn frobenius_norm(&mut self, a: Var) -> Var {
        let sq: f64 = self.value(a).iter().map(|x| x * x).sum();
        let v = Array2::from_elem((1, 1), (sq + NORM_EPS).sqrt());
        self.push(v, Op::FrobeniusNorm(a.0))
    }

    /// Reverse sweep from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar node");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; n];
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        fn acc(grads: &mut [Option<Array2<f64>>], idx: usize, g: Array2<f64>) {
            match &mut grads[idx] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let val = |i: usize| &self.nodes[i].value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, g.dot(&val(*b).t()));
                    acc(&mut grads, *b, val(*a).t().dot(&g));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, -&g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * val(*b));
                    acc(&mut grads, *b, &g * val(*a));
                }
                Op::Div(a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    acc(&mut grads, *a, &g / y);
                    let gb = Zip::from(&g).and(x).and(y).map_collect(|&g, &x, &y| -g * x / (y * y));
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, k) => acc(&mut grads, *a, &g * *k),
                Op::Offset(a) => acc(&mut grads, *a, g.clone()),
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g.clone());
                }
                Op::AddCol(a, col) => {
                    acc(&mut grads, *col, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                    acc(&mut grads, *a, g.clone());
                }
                Op::OuterSum(u, v) => {
                    acc(&mut grads, *u, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                    acc(&mut grads, *v, g.sum_axis(Axis(0)).insert_axis(Axis(1)));
                }
                Op::RowSlice(a, start) => {
                    let mut full = Array2::zeros(val(*a).dim());
                    full.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *a, full);
                }
                Op::Relu(a) => {
                    let ga = Zip::from(&g).and(val(*a)).map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::LeakyRelu(a, alpha) => {
                    let ga = Zip::from(&g)
                        .and(val(*a))
                        .map_collect(|&g, &x| if x > 0.0 { g } else { alpha * g });
                    acc(&mut grads, *a, ga);
                }
                Op::Elu(a) => {
                    let ga = Zip::from(&g)
                        .and(val(*a))
                        .map_collect(|&g, &x| if x > 0.0 { g } else { g * x.exp() });
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = Zip::from(&g).and(&node.value).map_collect(|&g, &y| g * y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let ga = Zip::from(&g).and(val(*a)).map_collect(|&g, &x| g * sigmoid(x));
                    acc(&mut grads, *a, ga);
                }
                Op::Ln(a) => acc(&mut grads, *a, &g / val(*a)),
                Op::Sqrt(a) => {
                    let ga = Zip::from(&g).and(&node.value).map_collect(|&g, &y| 0.5 * g / y);
                    acc(&mut grads, *a, ga);
                }
                Op::Abs(a) => {
                    let ga = Zip::from(&g).and(val(*a)).map_collect(|&g, &x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let ga = Zip::from(&g).and(val(*a)).map_collect(|&g, &x| 2.0 * g * x);
                    acc(&mut grads, *a, ga);
                }
                Op::FloorAt(a, floor) => {
                    let ga = Zip::from(&g)
                        .and(val(*a))
                        .map_collect(|&g, &x| if x > *floor { g } else { 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let ga = Zip::from(&g)
                        .and(val(*a))
                        .map_collect(|&g, &x| if x > *lo && x < *hi { g } else { 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => acc(&mut grads, *a, Array2::from_elem(val(*a).dim(), g[[0, 0]])),
                Op::RowSums(a) => {
                    let (r, c) = val(*a).dim();
                    let ga = Array2::from_shape_fn((r, c), |(i, _)| g[[i, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::ColMeans(a) => {
                    let (r, c) = val(*a).dim();
                    let ga = Array2::from_shape_fn((r, c), |(_, j)| g[[0, j]] / r as f64);
                    acc(&mut grads, *a, ga);
                }
                Op::MaskedRowSoftmax(a, mask) => {
                    let y = &node.value;
                    let mut ga = Array2::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let dot: f64 = (0..y.ncols()).map(|j| y[[i, j]] * g[[i, j]]).sum();
                        for j in 0..y.ncols() {
                            if mask[[i, j]] {
                                ga[[i, j]] = y[[i, j]] * (g[[i, j]] - dot);
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::PairwiseL1(z) => {
                    let zz = val(*z);
                    let (n, d) = zz.dim();
                    let mut gz = Array2::zeros((n, d));
                    for i in 0..n {
                        for j in 0..n {
                            if i == j {
                                continue;
                            }
                            let w = g[[i, j]] + g[[j, i]];
                            if w == 0.0 {
                                continue;
                            }
                            for k in 0..d {
                                let diff = zz[[i, k]] - zz[[j, k]];
                                if diff > 0.0 {
                                    gz[[i, k]] += w;
                                } else if diff < 0.0 {
                                    gz[[i, k]] -= w;
                                }
                            }
                        }
                    }
                    acc(&mut grads, *z, gz);
                }
                Op::SortRowsDesc(a, perms) => {
                    let mut ga = Array2::zeros(val(*a).dim());
                    for (i, idx) in perms.iter().enumerate() {
                        for (k, &p) in idx.iter().enumerate() {
                            ga[[i, p]] += g[[i, k]];
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxCrossEntropy(a, target) => {
                    let z = val(*a);
                    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = z.iter().map(|v| (v - max).exp()).sum();
                    let mut ga = z.mapv(|v| (v - max).exp() / denom);
                    ga[[0, *target]] -= 1.0;
                    acc(&mut grads, *a, ga * g[[0, 0]]);
                }
                Op::FrobeniusNorm(a) => {
                    let norm = node.value[[0, 0]];
                    acc(&mut grads, *a, val(*a) * (g[[0, 0]] / norm));
                }
            }
        }
        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.dim()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_array(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    /// Compares backward() against central differences for every entry of
    /// every input.
    fn check<F>(inputs: Vec<Array2<f64>>, f: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let loss = f(&mut tape, &vars);
        let grads = tape.backward(loss);
        let eval = |xs: &[Array2<f64>]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
            let l = f(&mut t, &vs);
            t.scalar(l)
        };
        let h = 1e-6;
        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads.wrt(vars[k]);
            for idx in 0..x.len() {
                let (r, c) = (idx / x.ncols(), idx % x.ncols());
                let mut plus = inputs.clone();
                plus[k][[r, c]] += h;
                let mut minus = inputs.clone();
                minus[k][[r, c]] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[[r, c]];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "input {k} entry ({r},{c}): analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_array(3, 4, &mut rng);
        let b = rand_array(3, 4, &mut rng).mapv(|x| x.abs() + 0.5);
        check(vec![a, b], |t, v| {
            let p = t.mul(v[0], v[1]);
            let q = t.div(v[0], v[1]);
            let r = t.sub(p, q);
            let e = t.elu(r);
            let l = t.leaky_relu(e, 0.2);
            let s = t.sigmoid(l);
            let sp = t.softplus(v[0]);
            let sq = t.square(sp);
            let w = t.add(s, sq);
            let ln = t.ln(v[1]);
            let rt = t.sqrt(v[1]);
            let z = t.mul(ln, rt);
            let ab = t.abs(v[0]);
            let y = t.add(w, z);
            let y = t.add(y, ab);
            let y = t.scale(y, 1.7);
            let y = t.offset(y, 0.3);
            let y = t.floor_at(y, -100.0);
            let y = t.clamp(y, -100.0, 100.0);
            let y = t.relu(y);
            t.sum(y)
        });
    }

    #[test]
    fn structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_array(4, 3, &mut rng);
        let b = rand_array(3, 2, &mut rng);
        let row = rand_array(1, 2, &mut rng);
        let col = rand_array(4, 1, &mut rng);
        check(vec![a, b, row, col], |t, v| {
            let m = t.matmul(v[0], v[1]);
            let m = t.add_row(m, v[2]);
            let m = t.add_col(m, v[3]);
            let mt = t.transpose(m);
            let g = t.matmul(m, mt);
            let rs = t.row_sums(g);
            let os = t.outer_sum(rs, v[3]);
            let sl = t.row_slice(os, 1, 3);
            let cm = t.col_means(sl);
            let sq = t.square(cm);
            let s = t.sum(sq);
            let fr = t.frobenius_norm(g);
            t.add(s, fr)
        });
    }

    #[test]
    fn softmax_sort_and_pairwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_array(5, 5, &mut rng);
        let z = rand_array(5, 3, &mut rng);
        let w = rand_array(5, 5, &mut rng);
        let mask = Array2::from_shape_fn((5, 5), |(i, j)| i == j || (i + j) % 2 == 1);
        check(vec![a, z, w], move |t, v| {
            let sm = t.masked_row_softmax(v[0], &mask);
            let srt = t.sort_rows_desc(v[0]);
            let pl = t.pairwise_l1(v[1]);
            let x = t.mul(sm, v[2]);
            let y = t.mul(srt, v[2]);
            let q = t.mul(pl, v[2]);
            let s1 = t.sum(x);
            let s2 = t.sum(y);
            let s3 = t.sum(q);
            let s = t.add(s1, s2);
            t.add(s, s3)
        });
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = rand_array(1, 2, &mut rng);
        check(vec![logits], |t, v| t.softmax_cross_entropy(v[0], 1));
    }

    #[test]
    fn masked_softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.leaf(Array2::from_shape_vec((2, 3), vec![0.5, 2.0, -1.0, 3.0, 0.0, 1.0]).unwrap());
        let mask = Array2::from_shape_vec((2, 3), vec![true, false, true, false, false, false]).unwrap();
        let y = t.masked_row_softmax(x, &mask);
        let v = t.value(y);
        assert!((v[[0, 0]] + v[[0, 2]] - 1.0).abs() < 1e-15);
        assert_eq!(v[[0, 1]], 0.0);
        assert_eq!(v.row(1).sum(), 0.0);
    }

    #[test]
    fn stable_helpers() {
        assert!((softplus(800.0) - 800.0).abs() < 1e-9);
        assert!(softplus(-800.0) >= 0.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
    }
}
