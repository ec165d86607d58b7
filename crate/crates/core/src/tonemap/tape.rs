//! Small reverse-mode tape over row-major 2D tensors.
//!
//! Only the operations the tone mapper needs are provided. Reductions over
//! rows (weight gradients) are accumulated in fixed row blocks and summed in
//! block order, so results do not depend on the thread count.

use crate::par;

/// Rows per block for weight-gradient reductions.
const ROW_BLOCK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor shape mismatch");
        Self { rows, cols, data }
    }

    pub fn row_vector(data: &[f64]) -> Self {
        Self::from_vec(1, data.len(), data.to_vec())
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// `x · wᵀ + b`, with `w` stored out × in and `b` 1 × out.
    Affine { x: Var, w: Var, b: Var },
    /// `x · wᵀ`
    MatMulT { x: Var, w: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Column { x: Var, col: usize },
    StackCols(Vec<Var>),
    /// Repeats a single-row tensor `rows` times.
    BroadcastRows { x: Var, rows: usize },
    ConcatCols(Var, Var),
    /// `ln(max(x, eps) · exposure)` elementwise.
    LogExposure { x: Var, eps: f64 },
    /// Row `r` of the output is row `index[r]` of `x`.
    Gather { x: Var, index: Vec<usize> },
}

struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(xv.cols, wv.cols, "affine input width");
        assert_eq!((bv.rows, bv.cols), (1, wv.rows), "affine bias shape");
        let mut out = matmul_t(xv, wv);
        for r in 0..out.rows {
            let row = &mut out.data[r * out.cols..(r + 1) * out.cols];
            row.iter_mut().zip(&bv.data).for_each(|(o, b)| *o += b);
        }
        self.push(Op::Affine { x, w, b }, out)
    }

    pub fn matmul_t(&mut self, x: Var, w: Var) -> Var {
        assert_eq!(self.value(x).cols, self.value(w).cols, "matmul width");
        let out = matmul_t(self.value(x), self.value(w));
        self.push(Op::MatMulT { x, w }, out)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(av.same_shape(bv), "elementwise shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::from_vec(av.rows, av.cols, data);
        self.push(op, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64 + Sync + Send) -> Var {
        let av = self.value(a);
        let data = av.data.iter().map(|x| f(*x)).collect();
        let out = Tensor::from_vec(av.rows, av.cols, data);
        self.push(op, out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), crate::scene::sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn log_exposure(&mut self, a: Var, exposure: f64, eps: f64) -> Var {
        self.map(a, Op::LogExposure { x: a, eps }, move |x| (x.max(eps) * exposure).ln())
    }

    pub fn column(&mut self, x: Var, col: usize) -> Var {
        let xv = self.value(x);
        assert!(col < xv.cols);
        let data = (0..xv.rows).map(|r| xv.at(r, col)).collect();
        let out = Tensor::from_vec(xv.rows, 1, data);
        self.push(Op::Column { x, col }, out)
    }

    pub fn stack_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols).collect();
        assert!(parts.iter().all(|p| self.value(*p).rows == rows));
        let cols: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Tensor::from_vec(rows, cols, data);
        self.push(Op::StackCols(parts.to_vec()), out)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            assert_eq!(av.rows, bv.rows);
            let cols = av.cols + bv.cols;
            let mut data = Vec::with_capacity(av.rows * cols);
            for r in 0..av.rows {
                data.extend_from_slice(av.row(r));
                data.extend_from_slice(bv.row(r));
            }
            Tensor::from_vec(av.rows, cols, data)
        };
        self.push(Op::ConcatCols(a, b), out)
    }

    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows, 1);
        let mut data = Vec::with_capacity(rows * xv.cols);
        for _ in 0..rows {
            data.extend_from_slice(&xv.data);
        }
        let out = Tensor::from_vec(rows, xv.cols, data);
        self.push(Op::BroadcastRows { x, rows }, out)
    }

    pub fn gather(&mut self, x: Var, index: Vec<usize>) -> Var {
        let xv = self.value(x);
        let mut data = Vec::with_capacity(index.len() * xv.cols);
        for &i in &index {
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::from_vec(index.len(), xv.cols, data);
        self.push(Op::Gather { x, index }, out)
    }

    /// Reverse sweep from the given output seeds. Returns one gradient slot per
    /// node; `None` where no gradient reached the node.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            assert!(self.value(*v).same_shape(g), "seed shape mismatch");
            accumulate(&mut grads[v.0], g.clone());
        }
        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Affine { x, w, b } => {
                    let (dx, dw) = matmul_t_backward(&g, self.value(*x), self.value(*w));
                    let mut db = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        db.data.iter_mut().zip(g.row(r)).for_each(|(d, v)| *d += v);
                    }
                    accumulate(&mut grads[x.0], dx);
                    accumulate(&mut grads[w.0], dw);
                    accumulate(&mut grads[b.0], db);
                }
                Op::MatMulT { x, w } => {
                    let (dx, dw) = matmul_t_backward(&g, self.value(*x), self.value(*w));
                    accumulate(&mut grads[x.0], dx);
                    accumulate(&mut grads[w.0], dw);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::Sub(a, b) => {
                    let neg = Tensor::from_vec(g.rows, g.cols, g.data.iter().map(|v| -v).collect());
                    accumulate(&mut grads[a.0], g);
                    accumulate(&mut grads[b.0], neg);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = zip_with(&g, bv, |g, y| g * y);
                    let db = zip_with(&g, av, |g, x| g * x);
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Relu(a) => {
                    let d = zip_with(&g, self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                    accumulate(&mut grads[a.0], d);
                }
                Op::Sigmoid(a) => {
                    let d = zip_with(&g, &node.value, |g, y| g * y * (1.0 - y));
                    accumulate(&mut grads[a.0], d);
                }
                Op::Tanh(a) => {
                    let d = zip_with(&g, &node.value, |g, y| g * (1.0 - y * y));
                    accumulate(&mut grads[a.0], d);
                }
                Op::LogExposure { x, eps, .. } => {
                    let d = zip_with(&g, self.value(*x), |g, v| if v > *eps { g / v } else { 0.0 });
                    accumulate(&mut grads[x.0], d);
                }
                Op::Column { x, col } => {
                    let xv = self.value(*x);
                    let mut d = Tensor::zeros(xv.rows, xv.cols);
                    for r in 0..xv.rows {
                        d.data[r * xv.cols + col] = g.data[r];
                    }
                    accumulate(&mut grads[x.0], d);
                }
                Op::StackCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let pc = self.value(*p).cols;
                        let mut d = Tensor::zeros(g.rows, pc);
                        for r in 0..g.rows {
                            d.data[r * pc..(r + 1) * pc]
                                .copy_from_slice(&g.row(r)[offset..offset + pc]);
                        }
                        offset += pc;
                        accumulate(&mut grads[p.0], d);
                    }
                }
                Op::ConcatCols(a, b) => {
                    let ac = self.value(*a).cols;
                    let bc = self.value(*b).cols;
                    let mut da = Tensor::zeros(g.rows, ac);
                    let mut dbt = Tensor::zeros(g.rows, bc);
                    for r in 0..g.rows {
                        da.data[r * ac..(r + 1) * ac].copy_from_slice(&g.row(r)[..ac]);
                        dbt.data[r * bc..(r + 1) * bc].copy_from_slice(&g.row(r)[ac..]);
                    }
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], dbt);
                }
                Op::BroadcastRows { x, rows } => {
                    let cols = g.cols;
                    let mut d = Tensor::zeros(1, cols);
                    for r in 0..*rows {
                        d.data.iter_mut().zip(g.row(r)).for_each(|(a, v)| *a += v);
                    }
                    accumulate(&mut grads[x.0], d);
                }
                Op::Gather { x, index } => {
                    let xv = self.value(*x);
                    let mut d = Tensor::zeros(xv.rows, xv.cols);
                    for (r, &i) in index.iter().enumerate() {
                        let dst = &mut d.data[i * xv.cols..(i + 1) * xv.cols];
                        dst.iter_mut().zip(g.row(r)).for_each(|(a, v)| *a += v);
                    }
                    accumulate(&mut grads[x.0], d);
                }
            }
        }
        Gradients { grads }
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros shaped like `like` when none reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.rows, like.cols))
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.data.iter_mut().zip(&g.data).for_each(|(a, v)| *a += v),
        None => *slot = Some(g),
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect();
    Tensor::from_vec(a.rows, a.cols, data)
}

/// `x · wᵀ` for x: n × i, w: o × i.
fn matmul_t(x: &Tensor, w: &Tensor) -> Tensor {
    let (i, o) = (w.cols, w.rows);
    let mut wt = vec![0.0; i * o];
    for j in 0..o {
        for k in 0..i {
            wt[k * o + j] = w.data[j * i + k];
        }
    }
    matmul(x, &wt, o)
}

/// `x · m` for x: n × i and row-major m: i × o.
fn matmul(x: &Tensor, m: &[f64], o: usize) -> Tensor {
    let (n, i) = (x.rows, x.cols);
    debug_assert_eq!(m.len(), i * o);
    let mut out = Tensor::zeros(n, o);
    if n == 0 || o == 0 {
        return out;
    }
    par::for_each_chunk_mut(&mut out.data, ROW_BLOCK * o, |block, chunk| {
        let mut r = block * ROW_BLOCK;
        let mut quads = chunk.chunks_exact_mut(4 * o);
        for q in &mut quads {
            let (a, rest) = q.split_at_mut(o);
            let (b, rest) = rest.split_at_mut(o);
            let (c, d) = rest.split_at_mut(o);
            let (x0, x1, x2, x3) = (x.row(r), x.row(r + 1), x.row(r + 2), x.row(r + 3));
            for k in 0..i {
                let mrow = &m[k * o..(k + 1) * o];
                let (v0, v1, v2, v3) = (x0[k], x1[k], x2[k], x3[k]);
                for j in 0..o {
                    let mv = mrow[j];
                    a[j] += v0 * mv;
                    b[j] += v1 * mv;
                    c[j] += v2 * mv;
                    d[j] += v3 * mv;
                }
            }
            r += 4;
        }
        for orow in quads.into_remainder().chunks_mut(o) {
            for (k, &xv) in x.row(r).iter().enumerate() {
                if xv != 0.0 {
                    orow.iter_mut().zip(&m[k * o..(k + 1) * o]).for_each(|(a, mv)| *a += xv * mv);
                }
            }
            r += 1;
        }
    });
    out
}

/// Returns `(dx, dw)` for `y = x · wᵀ` given `g = dL/dy`.
fn matmul_t_backward(g: &Tensor, x: &Tensor, w: &Tensor) -> (Tensor, Tensor) {
    let (n, i, o) = (x.rows, x.cols, w.rows);
    let dx = matmul(g, &w.data, i);
    let blocks = n.div_ceil(ROW_BLOCK);
    let partials = par::map_range(blocks, |block| {
        let mut dw = vec![0.0; o * i];
        let (lo, hi) = (block * ROW_BLOCK, ((block + 1) * ROW_BLOCK).min(n));
        let mut r = lo;
        while r + 4 <= hi {
            let (x0, x1, x2, x3) = (x.row(r), x.row(r + 1), x.row(r + 2), x.row(r + 3));
            let (g0, g1, g2, g3) = (g.row(r), g.row(r + 1), g.row(r + 2), g.row(r + 3));
            for j in 0..o {
                let (a, b, c, d) = (g0[j], g1[j], g2[j], g3[j]);
                if a == 0.0 && b == 0.0 && c == 0.0 && d == 0.0 {
                    continue;
                }
                let dst = &mut dw[j * i..(j + 1) * i];
                for k in 0..i {
                    dst[k] += a * x0[k] + b * x1[k] + c * x2[k] + d * x3[k];
                }
            }
            r += 4;
        }
        for r in r..hi {
            let xr = x.row(r);
            for (j, &gv) in g.row(r).iter().enumerate() {
                if gv == 0.0 {
                    continue;
                }
                let dst = &mut dw[j * i..(j + 1) * i];
                dst.iter_mut().zip(xr).for_each(|(d, xv)| *d += gv * xv);
            }
        }
        dw
    });
    let mut dw = Tensor::zeros(o, i);
    for p in partials {
        dw.data.iter_mut().zip(&p).for_each(|(a, v)| *a += v);
    }
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl Fn(&mut Tape, Var) -> Var, input: Tensor) {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let y = build(&mut tape, x);
        let yv = tape.value(y).clone();
        let weights: Vec<f64> = (0..yv.len()).map(|k| ((k as f64) * 0.71).cos()).collect();
        let seed = Tensor::from_vec(yv.rows, yv.cols, weights.clone());
        let grads = tape.backward(&[(y, seed)]);
        let analytic = grads.get_or_zeros(x, &input);
        let h = 1e-6;
        for k in 0..input.len() {
            let eval = |delta: f64| {
                let mut p = input.clone();
                p.data[k] += delta;
                let mut t = Tape::new();
                let x = t.leaf(p);
                let y = build(&mut t, x);
                t.value(y).data.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!(
                (fd - analytic.data[k]).abs() < 1e-6 * (1.0 + fd.abs()),
                "entry {k}: fd {fd} vs {}",
                analytic.data[k]
            );
        }
    }

    fn sample(rows: usize, cols: usize, phase: f64) -> Tensor {
        let data = (0..rows * cols).map(|k| ((k as f64) * 1.3 + phase).sin()).collect();
        Tensor::from_vec(rows, cols, data)
    }

    #[test]
    fn affine_stack_matches_finite_differences() {
        fd_check(
            |t, x| {
                let w = t.leaf(sample(4, 3, 0.2));
                let b = t.leaf(sample(1, 4, 0.9));
                let h = t.affine(x, w, b);
                let h = t.tanh(h);
                let u = t.leaf(sample(2, 4, 0.4));
                let y = t.matmul_t(h, u);
                t.sigmoid(y)
            },
            sample(5, 3, 0.0),
        );
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        fd_check(
            |t, w| {
                let x = t.leaf(sample(600, 3, 0.5));
                let b = t.leaf(sample(1, 2, 0.1));
                let y = t.affine(x, w, b);
                t.relu(y)
            },
            sample(2, 3, 0.3),
        );
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        fd_check(
            |t, x| {
                let c0 = t.column(x, 0);
                let c2 = t.column(x, 2);
                let s = t.stack_cols(&[c2, c0]);
                let r = t.leaf(sample(1, 2, 0.0));
                let rb = t.broadcast_rows(r, 3);
                let m = t.mul(s, rb);
                let d = t.sub(m, s);
                let cat = t.concat_cols(d, x);
                let g = t.gather(cat, vec![2, 0, 0, 1]);
                let a = t.add(g, g);
                t.log_exposure(a, 2.0, 1e-6)
            },
            Tensor::from_vec(3, 3, vec![0.5, 1.0, 2.0, 0.7, 0.2, 1.4, 3.0, 0.1, 0.9]),
        );
    }

    #[test]
    fn backward_without_seed_path_is_none() {
        let mut t = Tape::new();
        let a = t.leaf(sample(1, 2, 0.0));
        let b = t.leaf(sample(1, 2, 1.0));
        let y = t.relu(a);
        let g = t.backward(&[(y, Tensor::from_vec(1, 2, vec![1.0, 1.0]))]);
        assert!(g.get(b).is_none());
        assert!(g.get(a).is_some());
    }
}
