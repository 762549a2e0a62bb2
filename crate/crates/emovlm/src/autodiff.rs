//! Reverse-mode automatic differentiation over a flat tape of 2-D arrays.
//!
//! Every differentiable quantity in the pipeline is an `Array2<f64>` node on a
//! [`Graph`]. Forward methods push nodes and record the producing op; a single
//! [`Graph::backward`] sweep then yields gradients for every node, including
//! parameter leaves bound by name. Scalars are `[1, 1]` arrays and row vectors
//! (biases, layer-norm gains) are `[1, d]`.
//!
//! The op set is deliberately small: matmul, broadcast add/mul, GELU, a
//! mask-aware softmax, layer normalization, concat/slice/transpose, row
//! gathers for embedding lookups, and the reductions needed for losses.
//! Shape mismatches inside the tape are programmer errors and panic; public
//! module operations validate their inputs before touching the tape.

use ndarray::{concatenate, Array2, Axis};
use std::collections::BTreeMap;
use std::sync::Arc;

/// Numeric precision of tape values.
///
/// `Single` stores every intermediate rounded to the nearest f32 while still
/// accumulating inside each op in f64 (storage-rounded arithmetic). `Double`
/// keeps full f64 and is required for finite-difference gradient checks.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Precision {
    Single,
    Double,
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(u32);

impl Var {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// `[n, d] + [1, d]`, the second operand broadcast across rows.
    AddRow(Var, Var),
    Mul(Var, Var),
    /// `[n, d] * [1, d]`, the second operand broadcast across rows.
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax {
        x: Var,
        mask: Option<Arc<Array2<bool>>>,
    },
    LayerNorm {
        x: Var,
        eps: f64,
    },
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
        len: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    /// Row gather: `y[k, :] = x[idx[k], :]`.
    GatherRows {
        x: Var,
        idx: Arc<Vec<usize>>,
    },
    /// Per-row column pick: `y[i, 0] = x[i, idx[i]]`.
    SelectPerRow {
        x: Var,
        idx: Arc<Vec<usize>>,
    },
    /// `y[i, 0] = log sum_j exp(x[i, j])`, computed with max-shift.
    LogSumExpRows(Var),
    SumAll(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients of a scalar root with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.idx()).and_then(|g| g.as_ref())
    }
}

/// Wengert-list computation graph.
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    bindings: Vec<(String, Var)>,
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Graph {
            nodes: Vec::new(),
            precision,
            bindings: Vec::new(),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.idx()].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let d = self.nodes[v.idx()].value.dim();
        (d.0, d.1)
    }

    /// True when every entry of `v` is finite.
    pub fn is_finite(&self, v: Var) -> bool {
        self.value(v).iter().all(|x| x.is_finite())
    }

    fn quantize(&self, mut value: Array2<f64>) -> Array2<f64> {
        if self.precision == Precision::Single {
            value.mapv_inplace(|x| x as f32 as f64);
        }
        value
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        let value = self.quantize(value);
        let id = u32::try_from(self.nodes.len()).expect("tape overflow");
        self.nodes.push(Node { value, op });
        Var(id)
    }

    /// New leaf holding `value` (an input or constant; not name-bound).
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// New leaf bound to a parameter name. Binding the same name several
    /// times models weight sharing: [`Graph::grads_by_name`] sums over all
    /// leaves carrying the name.
    pub fn bind(&mut self, name: &str, value: Array2<f64>) -> Var {
        let v = self.push(value, Op::Leaf);
        self.bindings.push((name.to_string(), v));
        v
    }

    pub fn bindings(&self) -> &[(String, Var)] {
        &self.bindings
    }

    // ---- ops -------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ac, br, "matmul inner dims {ar}x{ac} . {br}x{bc}");
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, ac) = self.shape(a);
        let (rr, rc) = self.shape(row);
        assert_eq!((rr, rc), (1, ac), "add_row wants [1, {ac}]");
        let value = self.value(a) + &self.value(row).row(0);
        self.push(value, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (_, ac) = self.shape(a);
        let (rr, rc) = self.shape(row);
        assert_eq!((rr, rc), (1, ac), "mul_row wants [1, {ac}]");
        let value = self.value(a) * &self.value(row).row(0);
        self.push(value, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a, c))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        self.push(value, Op::Gelu(a))
    }

    /// Row-wise softmax. With a mask, the distribution is supported only on
    /// permitted columns: excluded logits never enter the normalization and
    /// their output weight is exactly zero. Every row must permit at least
    /// one column.
    pub fn softmax(&mut self, x: Var, mask: Option<Arc<Array2<bool>>>) -> Var {
        let dims = self.shape(x);
        if let Some(m) = &mask {
            assert_eq!((m.nrows(), m.ncols()), dims, "softmax mask shape");
            assert!(
                m.rows().into_iter().all(|r| r.iter().any(|&b| b)),
                "softmax mask has an all-false row"
            );
        }
        let value = masked_softmax(self.value(x), mask.as_deref());
        self.push(value, Op::Softmax { x, mask })
    }

    /// Row-wise standardization `(x - mean) / sqrt(var + eps)` without affine
    /// terms; compose with `mul_row`/`add_row` for learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let value = layer_norm_value(self.value(x), eps);
        self.push(value, Op::LayerNorm { x, eps })
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows width mismatch");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols height mismatch");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (r, _) = self.shape(x);
        assert!(start + len <= r, "slice_rows out of range");
        let value = self
            .value(x)
            .slice(ndarray::s![start..start + len, ..])
            .to_owned();
        self.push(value, Op::SliceRows { x, start, len })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (_, c) = self.shape(x);
        assert!(start + len <= c, "slice_cols out of range");
        let value = self
            .value(x)
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        self.push(value, Op::SliceCols { x, start, len })
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let (r, c) = self.shape(x);
        assert!(idx.iter().all(|&i| i < r), "gather_rows index out of range");
        let mut value = Array2::zeros((idx.len(), c));
        for (k, &i) in idx.iter().enumerate() {
            value.row_mut(k).assign(&self.value(x).row(i));
        }
        self.push(
            value,
            Op::GatherRows {
                x,
                idx: Arc::new(idx.to_vec()),
            },
        )
    }

    pub fn select_per_row(&mut self, x: Var, idx: &[usize]) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(idx.len(), r, "select_per_row wants one index per row");
        assert!(idx.iter().all(|&j| j < c), "select_per_row out of range");
        let mut value = Array2::zeros((r, 1));
        for (i, &j) in idx.iter().enumerate() {
            value[[i, 0]] = self.value(x)[[i, j]];
        }
        self.push(
            value,
            Op::SelectPerRow {
                x,
                idx: Arc::new(idx.to_vec()),
            },
        )
    }

    pub fn logsumexp_rows(&mut self, x: Var) -> Var {
        let (r, _) = self.shape(x);
        let mut value = Array2::zeros((r, 1));
        for (i, row) in self.value(x).rows().into_iter().enumerate() {
            value[[i, 0]] = logsumexp(row.iter().copied());
        }
        self.push(value, Op::LogSumExpRows(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(x).sum());
        self.push(value, Op::SumAll(x))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a `[1, 1]` root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; root.idx() + 1];
        grads[root.idx()] = Some(Array2::from_elem((1, 1), 1.0));

        for id in (0..=root.idx()).rev() {
            let Some(gy) = grads[id].clone() else {
                continue;
            };
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = gy.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&gy);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, gy.clone());
                    accumulate(&mut grads, *b, gy);
                }
                Op::AddRow(a, row) => {
                    let drow = gy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *a, gy);
                    accumulate(&mut grads, *row, drow);
                }
                Op::Mul(a, b) => {
                    let da = &gy * self.value(*b);
                    let db = &gy * self.value(*a);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MulRow(a, row) => {
                    let da = &gy * &self.value(*row).row(0);
                    let drow = (&gy * self.value(*a))
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *row, drow);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, &gy * *c);
                }
                Op::Gelu(a) => {
                    let dx = &gy * &self.value(*a).mapv(gelu_grad);
                    accumulate(&mut grads, *a, dx);
                }
                Op::Softmax { x, .. } => {
                    // dz = y * (gy - sum(gy * y)) per row; masked-out entries
                    // have y = 0 and therefore dz = 0.
                    let y = &self.nodes[id].value;
                    let dot = (&gy * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let dx = y * &(&gy - &dot);
                    accumulate(&mut grads, *x, dx);
                }
                Op::LayerNorm { x, eps } => {
                    let dx = layer_norm_grad(self.value(*x), &self.nodes[id].value, &gy, *eps);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, gy.t().to_owned());
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let (r, _) = self.shape(p);
                        let slice = gy.slice(ndarray::s![start..start + r, ..]).to_owned();
                        accumulate(&mut grads, p, slice);
                        start += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let (_, c) = self.shape(p);
                        let slice = gy.slice(ndarray::s![.., start..start + c]).to_owned();
                        accumulate(&mut grads, p, slice);
                        start += c;
                    }
                }
                Op::SliceRows { x, start, len } => {
                    let mut dx = Array2::zeros(self.value(*x).dim());
                    dx.slice_mut(ndarray::s![*start..*start + *len, ..])
                        .assign(&gy);
                    accumulate(&mut grads, *x, dx);
                }
                Op::SliceCols { x, start, len } => {
                    let mut dx = Array2::zeros(self.value(*x).dim());
                    dx.slice_mut(ndarray::s![.., *start..*start + *len])
                        .assign(&gy);
                    accumulate(&mut grads, *x, dx);
                }
                Op::GatherRows { x, idx } => {
                    let mut dx = Array2::zeros(self.value(*x).dim());
                    for (k, &i) in idx.iter().enumerate() {
                        let mut row = dx.row_mut(i);
                        row += &gy.row(k);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::SelectPerRow { x, idx } => {
                    let mut dx = Array2::zeros(self.value(*x).dim());
                    for (i, &j) in idx.iter().enumerate() {
                        dx[[i, j]] += gy[[i, 0]];
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::LogSumExpRows(x) => {
                    // d lse / dx = softmax(x) row-wise.
                    let sm = masked_softmax(self.value(*x), None);
                    let dx = &sm * &gy; // gy is [n, 1], broadcast over columns
                    accumulate(&mut grads, *x, dx);
                }
                Op::SumAll(x) => {
                    let dx = Array2::from_elem(self.value(*x).dim(), gy[[0, 0]]);
                    accumulate(&mut grads, *x, dx);
                }
            }
        }
        Gradients { grads }
    }

    /// Gradients for bound parameters, summed across leaves sharing a name.
    pub fn grads_by_name(&self, grads: &Gradients) -> BTreeMap<String, Array2<f64>> {
        let mut out: BTreeMap<String, Array2<f64>> = BTreeMap::new();
        for (name, var) in &self.bindings {
            let Some(g) = grads.get(*var) else { continue };
            match out.get_mut(name) {
                Some(acc) => *acc += g,
                None => {
                    out.insert(name.clone(), g.clone());
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
    match &mut grads[v.idx()] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

/// GELU with the tanh approximation; smooth, so finite differences converge.
fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = values.map(|v| (v - m).exp()).sum();
    m + s.ln()
}

fn masked_softmax(x: &Array2<f64>, mask: Option<&Array2<bool>>) -> Array2<f64> {
    let mut out = Array2::zeros(x.dim());
    for (i, row) in x.rows().into_iter().enumerate() {
        let allowed = |j: usize| mask.map_or(true, |m| m[[i, j]]);
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if allowed(j) && v > max {
                max = v;
            }
        }
        let mut denom = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if allowed(j) {
                let e = (v - max).exp();
                out[[i, j]] = e;
                denom += e;
            }
        }
        for j in 0..row.len() {
            if allowed(j) {
                out[[i, j]] /= denom;
            }
        }
    }
    out
}

fn layer_norm_value(x: &Array2<f64>, eps: f64) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut out = Array2::zeros(x.dim());
    for (i, row) in x.rows().into_iter().enumerate() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + eps).sqrt();
        for (j, &v) in row.iter().enumerate() {
            out[[i, j]] = (v - mean) * inv;
        }
    }
    out
}

fn layer_norm_grad(x: &Array2<f64>, xhat: &Array2<f64>, gy: &Array2<f64>, eps: f64) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut dx = Array2::zeros(x.dim());
    for i in 0..x.nrows() {
        let row = x.row(i);
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + eps).sqrt();
        let g = gy.row(i);
        let h = xhat.row(i);
        let g_mean = g.sum() / d;
        let gh_mean = g
            .iter()
            .zip(h.iter())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / d;
        for j in 0..x.ncols() {
            dx[[i, j]] = inv * (g[j] - g_mean - h[j] * gh_mean);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| {
            // Box-Muller keeps the test free of rand_distr.
            let u1: f64 = rng.gen_range(1e-9..1.0);
            let u2: f64 = rng.gen::<f64>();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
    }

    /// Finite-difference check of every leaf gradient for a scalar-valued
    /// builder. The builder must be a pure function of the leaf values.
    fn check_leaf_grads(
        leaves: &[Array2<f64>],
        build: impl Fn(&mut Graph, &[Var]) -> Var,
        tol: f64,
    ) {
        let mut g = Graph::new(Precision::Double);
        let vars: Vec<Var> = leaves.iter().map(|l| g.input(l.clone())).collect();
        let root = build(&mut g, &vars);
        let grads = g.backward(root);

        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads
                .get(vars[li])
                .cloned()
                .unwrap_or_else(|| Array2::zeros(leaf.dim()));
            for i in 0..leaf.nrows() {
                for j in 0..leaf.ncols() {
                    let eval = |delta: f64| {
                        let mut g2 = Graph::new(Precision::Double);
                        let vars2: Vec<Var> = leaves
                            .iter()
                            .enumerate()
                            .map(|(k, l)| {
                                let mut l = l.clone();
                                if k == li {
                                    l[[i, j]] += delta;
                                }
                                g2.input(l)
                            })
                            .collect();
                        let r = build(&mut g2, &vars2);
                        g2.value(r)[[0, 0]]
                    };
                    let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                    let a = analytic[[i, j]];
                    let denom = a.abs().max(numeric.abs()).max(1e-6);
                    assert!(
                        (a - numeric).abs() / denom < tol,
                        "leaf {li} [{i},{j}]: analytic {a} vs numeric {numeric}"
                    );
                }
            }
        }
    }

    #[test]
    fn matmul_add_chain_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&mut rng, 3, 4);
        let b = randn(&mut rng, 4, 2);
        let c = randn(&mut rng, 1, 2);
        check_leaf_grads(&[a, b, c], |g, v| {
            let y = g.matmul(v[0], v[1]);
            let y = g.add_row(y, v[2]);
            let y = g.gelu(y);
            g.sum_all(y)
        }, 1e-6);
    }

    #[test]
    fn softmax_layernorm_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&mut rng, 4, 5);
        let w = randn(&mut rng, 4, 5);
        check_leaf_grads(&[x, w], |g, v| {
            let s = g.softmax(v[0], None);
            let n = g.layer_norm(s, 1e-5);
            let p = g.mul(n, v[1]);
            g.sum_all(p)
        }, 1e-5);
    }

    #[test]
    fn masked_softmax_grads_and_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&mut rng, 3, 3);
        let w = randn(&mut rng, 3, 3);
        let mask = Arc::new(array![
            [true, true, false],
            [false, true, true],
            [false, false, true],
        ]);
        let m = mask.clone();
        check_leaf_grads(&[x.clone(), w], move |g, v| {
            let s = g.softmax(v[0], Some(m.clone()));
            let p = g.mul(s, v[1]);
            g.sum_all(p)
        }, 1e-6);

        let mut g = Graph::new(Precision::Double);
        let xv = g.input(x);
        let s = g.softmax(xv, Some(mask));
        let val = g.value(s);
        assert_eq!(val[[0, 2]], 0.0);
        assert_eq!(val[[1, 0]], 0.0);
        assert_eq!(val[[2, 2]], 1.0);
        for row in val.rows() {
            let sum: f64 = row.sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn slice_concat_gather_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = randn(&mut rng, 4, 3);
        let b = randn(&mut rng, 2, 3);
        let e = randn(&mut rng, 5, 3);
        check_leaf_grads(&[a, b, e], |g, v| {
            let cat = g.concat_rows(&[v[0], v[1]]);
            let sl = g.slice_rows(cat, 1, 4);
            let gat = g.gather_rows(v[2], &[0, 2, 2, 4]);
            let t = g.transpose(gat);
            let t = g.transpose(t);
            let p = g.mul(sl, gat);
            let p = g.add(p, t);
            let cols = g.slice_cols(p, 1, 2);
            g.sum_all(cols)
        }, 1e-6);
    }

    #[test]
    fn lse_select_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, 4, 6);
        check_leaf_grads(&[x], |g, v| {
            let lse = g.logsumexp_rows(v[0]);
            let picked = g.select_per_row(v[0], &[1, 0, 5, 3]);
            let picked = g.scale(picked, -1.0);
            let d = g.add(lse, picked);
            let s = g.sum_all(d);
            g.scale(s, 0.25)
        }, 1e-6);
    }

    #[test]
    fn shared_binding_sums_grads() {
        let mut g = Graph::new(Precision::Double);
        let w = Array2::from_elem((1, 1), 3.0);
        let a = g.bind("w", w.clone());
        let b = g.bind("w", w);
        let p = g.mul(a, b); // w^2: d/dw = 2w = 6
        let root = g.sum_all(p);
        let grads = g.backward(root);
        let by_name = g.grads_by_name(&grads);
        assert!((by_name["w"][[0, 0]] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn single_precision_rounds_storage() {
        let mut g = Graph::new(Precision::Single);
        let v = g.input(Array2::from_elem((1, 1), 0.1));
        let x = g.value(v)[[0, 0]];
        assert_eq!(x, 0.1f32 as f64);
        let mut g = Graph::new(Precision::Double);
        let v = g.input(Array2::from_elem((1, 1), 0.1));
        assert_eq!(g.value(v)[[0, 0]], 0.1);
    }
}
