use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Additive logit used for masked softmax slots.
pub const MASK_LOGIT: f64 = -1.0e30;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    SliceCols {
        a: Var,
        start: usize,
    },
    Sum(Var),
    Mean {
        a: Var,
        axis: usize,
    },
    Softmax(Var),
    WeightedSum {
        weights: Var,
        items: Vec<Var>,
    },
    AdditiveEnergy {
        keys: Vec<Var>,
        query: Var,
        v: Var,
        /// `tanh(keys[i] + query)`, key-major.
        act: Vec<f64>,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of operations recorded in execution order.
///
/// Every kernel appends one node; [`Graph::backward`] replays the tape in
/// reverse creation order and accumulates gradients additively into each
/// node that feeds several consumers.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

fn finite(op: &'static str, t: Tensor) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite { op })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c = beta * c + op(a) * op(b)` with row-major storage.
fn gemm(a: &Tensor, ta: bool, b: &Tensor, tb: bool, c: &mut [f64], beta: f64) {
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    let (m, k, rsa, csa) = if ta { (ac, ar, 1, ac) } else { (ar, ac, ac, 1) };
    let (k2, n, rsb, csb) = if tb { (bc, br, 1, bc) } else { (br, bc, bc, 1) };
    debug_assert_eq!(k, k2);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: extents and strides describe exactly the buffers of `a`, `b`
    // and `c`, which do not alias.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data().as_ptr(),
            rsa as isize,
            csa as isize,
            b.data().as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Tensor::zeros(&[rows, cols]))
    }

    /// `op(a) * op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (ar, ac) = self.dims(a)?;
        let (br, bc) = self.dims(b)?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(self.value(a), ta, self.value(b), tb, &mut out, 0.0);
        let out = finite("matmul", Tensor::matrix(m, n, out))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `x * w^T`: rows of `x` mapped through a weight stored as `out x in`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        self.matmul_t(x, false, w, true)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let da = self.dims(a)?;
        let db = self.dims(b)?;
        if da != db {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(da)
    }

    fn zip_with(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (r, c) = self.same_shape(op_name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let out = finite(op_name, Tensor::matrix(r, c, data))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds the `1 x c` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        let (br, bc) = self.dims(b)?;
        if br != 1 || bc != c {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let bias = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(bias).map(|(x, y)| x + y))
            .collect();
        let out = finite("add_row", Tensor::matrix(r, c, data))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::AddRow(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        let data = self.value(a).data().iter().map(|x| x * s).collect();
        let out = finite("scale", Tensor::matrix(r, c, data))?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Scale(a, s), rg))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        let data = self.value(a).data().iter().map(|x| f(*x)).collect();
        let out = finite(name, Tensor::matrix(r, c, data))?;
        let rg = self.rg(a);
        Ok(self.push(out, op, rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Concatenation along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Precondition("concat of zero tensors".into()));
        };
        let (r0, c0) = self.dims(first)?;
        let dims = parts
            .iter()
            .map(|&p| self.dims(p))
            .collect::<Result<Vec<_>>>()?;
        for (&p, &(r, c)) in parts.iter().zip(&dims) {
            let ok = match axis {
                0 => c == c0,
                1 => r == r0,
                _ => false,
            };
            if !ok {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let out = if axis == 0 {
            let rows = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(rows * c0);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::matrix(rows, c0, data)
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for row in 0..r0 {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row_slice(row));
                }
            }
            Tensor::matrix(r0, cols, data)
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.concat(parts, 1)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.concat(parts, 0)
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        if start >= end || end > c {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: self.shape(a).to_vec(),
                rhs: vec![start, end],
            });
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(r * (end - start));
        for row in 0..r {
            data.extend_from_slice(&src.row_slice(row)[start..end]);
        }
        let out = Tensor::matrix(r, end - start, data);
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols { a, start }, rg))
    }

    /// Sum of all entries as a `1 x 1` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        let out = finite("sum", Tensor::scalar(s))?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Sum(a), rg))
    }

    /// Mean over `axis`; axis 0 yields a `1 x c` row, axis 1 an `r x 1` column.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        let src = self.value(a);
        let out = match axis {
            0 => {
                let mut acc = vec![0.0; c];
                for row in 0..r {
                    for (o, x) in acc.iter_mut().zip(src.row_slice(row)) {
                        *o += x;
                    }
                }
                acc.iter_mut().for_each(|x| *x /= r as f64);
                Tensor::matrix(1, c, acc)
            }
            1 => {
                let data = (0..r)
                    .map(|row| src.row_slice(row).iter().sum::<f64>() / c as f64)
                    .collect();
                Tensor::matrix(r, 1, data)
            }
            _ => {
                return Err(Error::Shape {
                    op: "mean",
                    lhs: src.shape().to_vec(),
                    rhs: vec![axis],
                })
            }
        };
        let rg = self.rg(a);
        Ok(self.push(out, Op::Mean { a, axis }, rg))
    }

    /// Row-wise softmax. `mask[r * cols + j] == false` marks slot `j` of row
    /// `r` as padding: it receives [`MASK_LOGIT`] additively and ends up
    /// exactly 0.
    pub fn masked_softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(Error::Shape {
                    op: "masked_softmax",
                    lhs: self.shape(a).to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        let src = self.value(a).data();
        let mut data = vec![0.0; r * c];
        for row in 0..r {
            let logits = &src[row * c..(row + 1) * c];
            let out = &mut data[row * c..(row + 1) * c];
            let keep = |j: usize| mask.is_none_or(|m| m[row * c + j]);
            if !(0..c).any(keep) {
                return Err(Error::Precondition(format!(
                    "softmax row {row} is fully masked"
                )));
            }
            for (j, o) in out.iter_mut().enumerate() {
                *o = if keep(j) {
                    logits[j]
                } else {
                    logits[j] + MASK_LOGIT
                };
            }
            let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for o in out.iter_mut() {
                *o = (*o - max).exp();
                total += *o;
            }
            out.iter_mut().for_each(|o| *o /= total);
        }
        let out = finite("masked_softmax", Tensor::matrix(r, c, data))?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.masked_softmax(a, None)
    }

    /// Per-row convex combination: `out[r] = sum_i weights[r, i] * items[i][r]`.
    pub fn weighted_sum(&mut self, weights: Var, items: &[Var]) -> Result<Var> {
        let (wr, wc) = self.dims(weights)?;
        if wc != items.len() || items.is_empty() {
            return Err(Error::Shape {
                op: "weighted_sum",
                lhs: self.shape(weights).to_vec(),
                rhs: vec![items.len()],
            });
        }
        let (r, d) = self.dims(items[0])?;
        for &it in items {
            if self.dims(it)? != (r, d) || r != wr {
                return Err(Error::Shape {
                    op: "weighted_sum",
                    lhs: self.shape(items[0]).to_vec(),
                    rhs: self.shape(it).to_vec(),
                });
            }
        }
        let w = self.value(weights);
        let mut data = vec![0.0; r * d];
        for row in 0..r {
            let out = &mut data[row * d..(row + 1) * d];
            for (i, &it) in items.iter().enumerate() {
                let wi = w.at(row, i);
                if wi == 0.0 {
                    continue;
                }
                for (o, x) in out.iter_mut().zip(self.value(it).row_slice(row)) {
                    *o += wi * x;
                }
            }
        }
        let out = finite("weighted_sum", Tensor::matrix(r, d, data))?;
        let rg = self.rg(weights) || items.iter().any(|&it| self.rg(it));
        Ok(self.push(
            out,
            Op::WeightedSum {
                weights,
                items: items.to_vec(),
            },
            rg,
        ))
    }

    /// Additive attention energies: `out[r, i] = v . tanh(keys[i][r] + query[r])`
    /// for `B x a` keys and query and a `1 x a` vector `v`.
    pub fn additive_energy(&mut self, keys: &[Var], query: Var, v: Var) -> Result<Var> {
        let (r, a) = self.dims(query)?;
        if keys.is_empty() {
            return Err(Error::Precondition("attention over no keys".into()));
        }
        if self.dims(v)? != (1, a) {
            return Err(Error::Shape {
                op: "additive_energy",
                lhs: vec![1, a],
                rhs: self.shape(v).to_vec(),
            });
        }
        for &k in keys {
            if self.dims(k)? != (r, a) {
                return Err(Error::Shape {
                    op: "additive_energy",
                    lhs: self.shape(query).to_vec(),
                    rhs: self.shape(k).to_vec(),
                });
            }
        }
        let n = keys.len();
        let q = self.value(query).data();
        let vv = self.value(v).data();
        let mut act = vec![0.0; n * r * a];
        let mut out = vec![0.0; r * n];
        for (i, &k) in keys.iter().enumerate() {
            let kd = self.value(k).data();
            let block = &mut act[i * r * a..(i + 1) * r * a];
            for row in 0..r {
                let mut e = 0.0;
                for j in 0..a {
                    let t = (kd[row * a + j] + q[row * a + j]).tanh();
                    block[row * a + j] = t;
                    e += vv[j] * t;
                }
                out[row * n + i] = e;
            }
        }
        let out = finite("additive_energy", Tensor::matrix(r, n, out))?;
        let rg = self.rg(query) || self.rg(v) || keys.iter().any(|&k| self.rg(k));
        Ok(self.push(
            out,
            Op::AdditiveEnergy {
                keys: keys.to_vec(),
                query,
                v,
                act,
            },
            rg,
        ))
    }

    /// Rows of `table` selected by `indices`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (v, e) = self.dims(table)?;
        if indices.is_empty() {
            return Err(Error::Precondition("gather with no indices".into()));
        }
        let src = self.value(table);
        let mut data = Vec::with_capacity(indices.len() * e);
        for &i in indices {
            if i >= v {
                return Err(Error::Range { index: i, size: v });
            }
            data.extend_from_slice(src.row_slice(i));
        }
        let out = Tensor::matrix(indices.len(), e, data);
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. Rows whose target is `None` are padding and contribute
    /// nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (r, c) = self.dims(logits)?;
        if targets.len() != r {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let src = self.value(logits);
        let mut probs = vec![0.0; r * c];
        let mut nll = 0.0;
        for (row, target) in targets.iter().enumerate() {
            let Some(t) = *target else { continue };
            if t >= c {
                return Err(Error::Range { index: t, size: c });
            }
            let x = src.row_slice(row);
            let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (p, v) in probs[row * c..(row + 1) * c].iter_mut().zip(x) {
                *p = (v - lse).exp();
            }
            nll += lse - x[t];
        }
        let out = finite("cross_entropy", Tensor::scalar(nll))?;
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.shape(loss), 1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            propagate(&self.nodes, idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the loss with respect to `v`, or `None` when `v` is
    /// unreachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with unreachable nodes reported as zeros.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut Tensor> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape())))
}

fn add_into(nodes: &[Node], grads: &mut [Option<Tensor>], v: Var, f: impl Fn(usize) -> f64) {
    if let Some(buf) = slot(nodes, grads, v) {
        for (i, x) in buf.data_mut().iter_mut().enumerate() {
            *x += f(i);
        }
    }
}

fn propagate(nodes: &[Node], idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let node = &nodes[idx];
    let out = &node.value;
    let gd = g.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, ta, tb } => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if let Some(buf) = slot(nodes, grads, *a) {
                if *ta {
                    gemm(bv, *tb, g, true, buf.data_mut(), 1.0);
                } else {
                    gemm(g, false, bv, !*tb, buf.data_mut(), 1.0);
                }
            }
            if let Some(buf) = slot(nodes, grads, *b) {
                if *tb {
                    gemm(g, true, av, *ta, buf.data_mut(), 1.0);
                } else {
                    gemm(av, !*ta, g, false, buf.data_mut(), 1.0);
                }
            }
        }
        Op::Add(a, b) => {
            add_into(nodes, grads, *a, |i| gd[i]);
            add_into(nodes, grads, *b, |i| gd[i]);
        }
        Op::Sub(a, b) => {
            add_into(nodes, grads, *a, |i| gd[i]);
            add_into(nodes, grads, *b, |i| -gd[i]);
        }
        Op::AddRow(a, b) => {
            add_into(nodes, grads, *a, |i| gd[i]);
            if let Some(buf) = slot(nodes, grads, *b) {
                let c = buf.len();
                for row in gd.chunks(c) {
                    for (x, y) in buf.data_mut().iter_mut().zip(row) {
                        *x += y;
                    }
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            add_into(nodes, grads, *a, |i| gd[i] * bv[i]);
            add_into(nodes, grads, *b, |i| gd[i] * av[i]);
        }
        Op::Scale(a, s) => add_into(nodes, grads, *a, |i| gd[i] * s),
        Op::Sigmoid(a) => {
            let y = out.data();
            add_into(nodes, grads, *a, |i| gd[i] * y[i] * (1.0 - y[i]));
        }
        Op::Tanh(a) => {
            let y = out.data();
            add_into(nodes, grads, *a, |i| gd[i] * (1.0 - y[i] * y[i]));
        }
        Op::Relu(a) => {
            let y = out.data();
            add_into(nodes, grads, *a, |i| if y[i] > 0.0 { gd[i] } else { 0.0 });
        }
        Op::Concat { parts, axis } => {
            let cols = out.cols();
            let mut offset = 0;
            for p in parts {
                let (pr, pc) = (nodes[p.0].value.rows(), nodes[p.0].value.cols());
                if let Some(buf) = slot(nodes, grads, *p) {
                    let bd = buf.data_mut();
                    if *axis == 0 {
                        let base = offset * cols;
                        for (i, x) in bd.iter_mut().enumerate() {
                            *x += gd[base + i];
                        }
                    } else {
                        for r in 0..pr {
                            for j in 0..pc {
                                bd[r * pc + j] += gd[r * cols + offset + j];
                            }
                        }
                    }
                }
                offset += if *axis == 0 { pr } else { pc };
            }
        }
        Op::SliceCols { a, start } => {
            let w = out.cols();
            if let Some(buf) = slot(nodes, grads, *a) {
                let c = buf.cols();
                let bd = buf.data_mut();
                for r in 0..out.rows() {
                    for j in 0..w {
                        bd[r * c + start + j] += gd[r * w + j];
                    }
                }
            }
        }
        Op::Sum(a) => {
            let s = gd[0];
            add_into(nodes, grads, *a, |_| s);
        }
        Op::Mean { a, axis } => {
            let (r, c) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
            if *axis == 0 {
                add_into(nodes, grads, *a, |i| gd[i % c] / r as f64);
            } else {
                add_into(nodes, grads, *a, |i| gd[i / c] / c as f64);
            }
        }
        Op::Softmax(a) => {
            let c = out.cols();
            let y = out.data();
            if let Some(buf) = slot(nodes, grads, *a) {
                let bd = buf.data_mut();
                for row in 0..out.rows() {
                    let span = row * c..(row + 1) * c;
                    let dot: f64 = y[span.clone()]
                        .iter()
                        .zip(&gd[span.clone()])
                        .map(|(p, q)| p * q)
                        .sum();
                    for j in span {
                        bd[j] += y[j] * (gd[j] - dot);
                    }
                }
            }
        }
        Op::AdditiveEnergy {
            keys,
            query,
            v,
            act,
        } => {
            let (r, n) = (out.rows(), out.cols());
            let vv = nodes[v.0].value.data();
            let a = vv.len();
            let mut dq = vec![0.0; r * a];
            let mut dv = vec![0.0; a];
            for (i, k) in keys.iter().enumerate() {
                let block = &act[i * r * a..(i + 1) * r * a];
                let mut dk = vec![0.0; r * a];
                for row in 0..r {
                    let gi = gd[row * n + i];
                    if gi == 0.0 {
                        continue;
                    }
                    for j in 0..a {
                        let t = block[row * a + j];
                        dv[j] += gi * t;
                        let d = gi * vv[j] * (1.0 - t * t);
                        dk[row * a + j] = d;
                        dq[row * a + j] += d;
                    }
                }
                if let Some(buf) = slot(nodes, grads, *k) {
                    buf.data_mut()
                        .iter_mut()
                        .zip(&dk)
                        .for_each(|(b, d)| *b += d);
                }
            }
            if let Some(buf) = slot(nodes, grads, *query) {
                buf.data_mut()
                    .iter_mut()
                    .zip(&dq)
                    .for_each(|(b, d)| *b += d);
            }
            if let Some(buf) = slot(nodes, grads, *v) {
                buf.data_mut()
                    .iter_mut()
                    .zip(&dv)
                    .for_each(|(b, d)| *b += d);
            }
        }
        Op::WeightedSum { weights, items } => {
            let w = &nodes[weights.0].value;
            let d = out.cols();
            for (i, it) in items.iter().enumerate() {
                if let Some(buf) = slot(nodes, grads, *it) {
                    let bd = buf.data_mut();
                    for row in 0..out.rows() {
                        let wi = w.at(row, i);
                        if wi == 0.0 {
                            continue;
                        }
                        for j in 0..d {
                            bd[row * d + j] += wi * gd[row * d + j];
                        }
                    }
                }
            }
            if nodes[weights.0].requires_grad {
                let k = items.len();
                let mut dw = vec![0.0; out.rows() * k];
                for (i, it) in items.iter().enumerate() {
                    let iv = &nodes[it.0].value;
                    for row in 0..out.rows() {
                        dw[row * k + i] = iv
                            .row_slice(row)
                            .iter()
                            .zip(&gd[row * d..(row + 1) * d])
                            .map(|(x, y)| x * y)
                            .sum();
                    }
                }
                add_into(nodes, grads, *weights, |i| dw[i]);
            }
        }
        Op::Gather { table, indices } => {
            if let Some(buf) = slot(nodes, grads, *table) {
                let e = buf.cols();
                let bd = buf.data_mut();
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..e {
                        bd[i * e + j] += gd[r * e + j];
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let s = gd[0];
            if let Some(buf) = slot(nodes, grads, *logits) {
                let c = buf.cols();
                let bd = buf.data_mut();
                for (row, target) in targets.iter().enumerate() {
                    let Some(t) = *target else { continue };
                    for j in 0..c {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        bd[row * c + j] += s * (probs[row * c + j] - onehot);
                    }
                }
            }
        }
    }
}
