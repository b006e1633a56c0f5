//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its output value and the handles of its
//! inputs. [`Tape::backward`] walks the nodes from the loss back to index 0,
//! each node exactly once. Leaves created with [`Tape::param`] are bound to
//! an index into a caller-owned `[Tensor]` slice, and their gradients are
//! accumulated into those tensors.
//!
//! Matrix-shaped ops (matmul, softmax, layer norm, concat, slice,
//! cross-entropy) work on rank-2 values; elementwise ops accept any rank.

use crate::tensor::{gemm, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf {
        binding: Option<usize>,
        requires_grad: bool,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    AddRow {
        a: Var,
        row: Var,
    },
    Mul(Var, Var),
    Scale(Var, f64),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Gelu(Var),
    Relu(Var),
    Concat {
        parts: Vec<Var>,
        axis: Axis,
    },
    Slice {
        a: Var,
        axis: Axis,
        start: usize,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
}

/// Gradients of the loss with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn rank2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(TensorError::Rank {
            op,
            expected: 2,
            shape: shape.to_vec(),
        }),
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(d, s)| *d += s),
        None => *dst = Some(src.to_vec()),
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf {
                binding: None,
                requires_grad: false,
            },
        )
    }

    /// An unbound leaf; its gradient is only reported through [`Gradients`].
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf {
                binding: None,
                requires_grad: t.requires_grad,
            },
        )
    }

    /// A leaf bound to `params[index]` of the slice later passed to
    /// [`Tape::backward`].
    pub fn param(&mut self, index: usize, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf {
                binding: Some(index),
                requires_grad: t.requires_grad,
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = rank2("matmul", self.shape(a))?;
        let (br, bc) = rank2("matmul", self.shape(b))?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), trans_b, 0.0, &mut out);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, trans_b }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b)))
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = rank2("add_row", self.shape(a))?;
        if self.shape(row) != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row);
        let out = self
            .value(a)
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddRow { a, row }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * k).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, k))
    }

    /// Gathers rows of a `vocab x dim` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, dim) = rank2("embedding", self.shape(table))?;
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    size: vocab,
                });
            }
            out.extend_from_slice(&tv[id * dim..(id + 1) * dim]);
        }
        Ok(self.push(
            vec![ids.len(), dim],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// per-column affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = rank2("layer_norm", self.shape(x))?;
        for p in [gamma, beta] {
            if self.shape(p) != [n] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (xv, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            vec![m, n],
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, false)
    }

    /// Row-wise softmax where entry `(i, j)` with `j > i` is excluded, as in
    /// causal self-attention.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, true)
    }

    fn softmax_impl(&mut self, a: Var, causal: bool) -> Result<Var> {
        let (m, n) = rank2("softmax", self.shape(a))?;
        let av = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let width = if causal { (i + 1).min(n) } else { n };
            let row = &av[i * n..i * n + width];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[i * n..i * n + width];
            let mut z = 0.0;
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - max).exp();
                z += *d;
            }
            dst.iter_mut().for_each(|d| *d /= z);
        }
        Ok(self.push(vec![m, n], out, Op::Softmax(a)))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        self.push(self.shape(a).to_vec(), out, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        self.push(self.shape(a).to_vec(), out, Op::Relu(a))
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat of zero tensors".into()))?;
        let (r0, c0) = rank2("concat", self.shape(first))?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = rank2("concat", self.shape(p))?;
            let ok = match axis {
                Axis::Rows => c == c0,
                Axis::Cols => r == r0,
            };
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            total += if axis == Axis::Rows { r } else { c };
        }
        let (shape, out) = match axis {
            Axis::Rows => {
                let mut out = Vec::with_capacity(total * c0);
                for &p in parts {
                    out.extend_from_slice(self.value(p));
                }
                (vec![total, c0], out)
            }
            Axis::Cols => {
                let mut out = Vec::with_capacity(r0 * total);
                for i in 0..r0 {
                    for &p in parts {
                        let c = self.shape(p)[1];
                        out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
                    }
                }
                (vec![r0, total], out)
            }
        };
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Takes `len` rows or columns starting at `start`.
    pub fn slice(&mut self, a: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        let (r, c) = rank2("slice", self.shape(a))?;
        let extent = if axis == Axis::Rows { r } else { c };
        if start + len > extent {
            return Err(TensorError::IndexOutOfRange {
                op: "slice",
                index: start + len,
                size: extent,
            });
        }
        let av = self.value(a);
        let (shape, out) = match axis {
            Axis::Rows => (vec![len, c], av[start * c..(start + len) * c].to_vec()),
            Axis::Cols => {
                let mut out = Vec::with_capacity(r * len);
                for i in 0..r {
                    out.extend_from_slice(&av[i * c + start..i * c + start + len]);
                }
                (vec![r, len], out)
            }
        };
        Ok(self.push(shape, out, Op::Slice { a, axis, start }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(Vec::new(), vec![s], Op::Sum(a))
    }

    /// Mean over the positions where `mask` is true of
    /// `-log softmax(logits[t])[targets[t]]`.
    pub fn masked_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        let (t, v) = rank2("masked_cross_entropy", self.shape(logits))?;
        if targets.len() != t || mask.len() != t {
            return Err(TensorError::ShapeMismatch {
                op: "masked_cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::EmptyTarget);
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; t * v];
        let mut total = 0.0;
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            let target = targets[i];
            if target >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "masked_cross_entropy",
                    index: target,
                    size: v,
                });
            }
            let row = &lv[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = max + z.ln();
            total += log_z - row[target];
            for (p, &x) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                *p = (x - log_z).exp();
            }
        }
        Ok(self.push(
            Vec::new(),
            vec![total / count as f64],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
        ))
    }

    /// Back-propagates from the scalar `loss`. Gradients of leaves bound via
    /// [`Tape::param`] are added into `params[binding]` when that tensor has
    /// `requires_grad`; repeated calls therefore accumulate.
    pub fn backward(&self, loss: Var, params: &mut [Tensor]) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::Rank {
                op: "backward",
                expected: 0,
                shape: shape.to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf {
                    binding,
                    requires_grad,
                } => {
                    if let Some(b) = binding {
                        let size = params.len();
                        let p = params.get_mut(*b).ok_or(TensorError::IndexOutOfRange {
                            op: "backward",
                            index: *b,
                            size,
                        })?;
                        if p.requires_grad {
                            p.accumulate_grad(&g)?;
                        }
                    }
                    if *requires_grad || binding.is_some() {
                        grads[idx] = Some(g);
                    }
                    continue;
                }
                Op::MatMul { a, b, trans_b } => {
                    let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let n = node.shape[1];
                    let mut da = vec![0.0; m * k];
                    // dA = dC * op(B)^T
                    gemm(m, n, k, &g, false, self.value(*b), !trans_b, 0.0, &mut da);
                    let mut db = vec![0.0; k * n];
                    if *trans_b {
                        // B is n x k: dB = dC^T * A
                        gemm(n, m, k, &g, true, self.value(*a), false, 0.0, &mut db);
                    } else {
                        gemm(k, m, n, self.value(*a), true, &g, false, 0.0, &mut db);
                    }
                    add_into(&mut grads[a.0], &da);
                    add_into(&mut grads[b.0], &db);
                }
                Op::Add(a, b) => {
                    add_into(&mut grads[a.0], &g);
                    add_into(&mut grads[b.0], &g);
                }
                Op::AddRow { a, row } => {
                    let n = node.shape[1];
                    let mut dr = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        dr.iter_mut().zip(chunk).for_each(|(d, s)| *d += s);
                    }
                    add_into(&mut grads[a.0], &g);
                    add_into(&mut grads[row.0], &dr);
                }
                Op::Mul(a, b) => {
                    let da: Vec<f64> = g.iter().zip(self.value(*b)).map(|(g, y)| g * y).collect();
                    let db: Vec<f64> = g.iter().zip(self.value(*a)).map(|(g, x)| g * x).collect();
                    add_into(&mut grads[a.0], &da);
                    add_into(&mut grads[b.0], &db);
                }
                Op::Scale(a, k) => {
                    let da: Vec<f64> = g.iter().map(|g| g * k).collect();
                    add_into(&mut grads[a.0], &da);
                }
                Op::Embedding { table, ids } => {
                    let dim = node.shape[1];
                    let slot = grads[table.0].get_or_insert_with(|| vec![0.0; self.value(*table).len()]);
                    for (i, &id) in ids.iter().enumerate() {
                        slot[id * dim..(id + 1) * dim]
                            .iter_mut()
                            .zip(&g[i * dim..(i + 1) * dim])
                            .for_each(|(d, s)| *d += s);
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let (m, n) = (node.shape[0], node.shape[1]);
                    let gam = self.value(*gamma);
                    let mut dx = vec![0.0; m * n];
                    let mut dg = vec![0.0; n];
                    let mut dbeta = vec![0.0; n];
                    let mut dxhat = vec![0.0; n];
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        let xh = &xhat[i * n..(i + 1) * n];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..n {
                            dg[j] += gr[j] * xh[j];
                            dbeta[j] += gr[j];
                            dxhat[j] = gr[j] * gam[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xh[j];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for j in 0..n {
                            dx[i * n + j] = rstd[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                    add_into(&mut grads[gamma.0], &dg);
                    add_into(&mut grads[beta.0], &dbeta);
                }
                Op::Softmax(a) => {
                    let (m, n) = (node.shape[0], node.shape[1]);
                    let y = &node.value;
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..n {
                            da[i * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    add_into(&mut grads[a.0], &da);
                }
                Op::Gelu(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.value(*a))
                        .map(|(g, &x)| g * gelu_grad(x))
                        .collect();
                    add_into(&mut grads[a.0], &da);
                }
                Op::Relu(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.value(*a))
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    add_into(&mut grads[a.0], &da);
                }
                Op::Concat { parts, axis } => {
                    let (rows, cols) = (node.shape[0], node.shape[1]);
                    match axis {
                        Axis::Rows => {
                            let mut offset = 0;
                            for p in parts {
                                let len = self.value(*p).len();
                                add_into(&mut grads[p.0], &g[offset..offset + len]);
                                offset += len;
                            }
                        }
                        Axis::Cols => {
                            let mut col = 0;
                            for p in parts {
                                let c = self.shape(*p)[1];
                                let mut dp = Vec::with_capacity(rows * c);
                                for i in 0..rows {
                                    dp.extend_from_slice(&g[i * cols + col..i * cols + col + c]);
                                }
                                add_into(&mut grads[p.0], &dp);
                                col += c;
                            }
                        }
                    }
                }
                Op::Slice { a, axis, start } => {
                    let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let slot = grads[a.0].get_or_insert_with(|| vec![0.0; r * c]);
                    match axis {
                        Axis::Rows => {
                            slot[start * c..start * c + g.len()]
                                .iter_mut()
                                .zip(&g)
                                .for_each(|(d, s)| *d += s);
                        }
                        Axis::Cols => {
                            let len = node.shape[1];
                            for i in 0..r {
                                slot[i * c + start..i * c + start + len]
                                    .iter_mut()
                                    .zip(&g[i * len..(i + 1) * len])
                                    .for_each(|(d, s)| *d += s);
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    let da = vec![g[0]; self.value(*a).len()];
                    add_into(&mut grads[a.0], &da);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    mask,
                    probs,
                    count,
                } => {
                    let v = self.shape(*logits)[1];
                    let w = g[0] / *count as f64;
                    let mut dl = vec![0.0; probs.len()];
                    for (i, (&m, &t)) in mask.iter().zip(targets).enumerate() {
                        if !m {
                            continue;
                        }
                        for j in 0..v {
                            dl[i * v + j] = w * probs[i * v + j];
                        }
                        dl[i * v + t] -= w;
                    }
                    add_into(&mut grads[logits.0], &dl);
                }
            }
        }
        Ok(Gradients { grads })
    }
}
