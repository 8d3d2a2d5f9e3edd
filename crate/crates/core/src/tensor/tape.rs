//! The reverse-mode tape: primitives record themselves during the forward
//! pass and `backward` replays them once in reverse topological order.
//!
//! Handles ([`Var`]) are indices into the tape, so tapes and the values on
//! them are confined to one thread; read-only [`Tensor`]s can be shared.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
}

/// Parameterless primitives, for the generic [`Tape::forward_primitive`]
/// entry point. Primitives that need static configuration (convolutions,
/// norms, slices, ...) have dedicated methods instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    AddBias,
    Matmul,
    MatmulNT,
    Sigmoid,
    Tanh,
    Relu,
    Swish,
    Exp,
    Log,
    Softmax,
    LogSoftmax,
    LogSumExp,
    Glu,
    SumAll,
    MeanAll,
    ConcatCols,
    ConcatRows,
    ReverseRows,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddBias(usize, usize),
    Matmul(usize, usize),
    MatmulNT(usize, usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Swish(usize),
    Exp(usize),
    Log(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LogSumExp(usize),
    Glu(usize),
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    DwConv1d {
        x: usize,
        w: usize,
        b: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    BatchNormTrain {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    BatchNormEval {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    SliceCols {
        x: usize,
        from: usize,
    },
    SliceRows {
        x: usize,
        from: usize,
    },
    ConcatCols(usize, usize),
    ConcatRows(Vec<usize>),
    ReverseRows(usize),
    RepeatRowsInterleave {
        x: usize,
        k: usize,
    },
    TileRows {
        x: usize,
        k: usize,
    },
    RelShift(usize),
    Reshape(usize),
    FlattenChw(usize),
    SumAll(usize),
    MeanAll(usize),
    PickPerRow {
        x: usize,
        ids: Vec<usize>,
    },
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    /// Scalar output with a caller-supplied exact gradient w.r.t. `x`.
    /// Used by the alignment losses, whose adjoints come out of their own
    /// forward-backward recursions.
    CustomScalar {
        x: usize,
        grad: Vec<f64>,
    },
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Gradients of a scalar loss with respect to the tape's leaves.
#[derive(Debug, Default)]
pub struct GradientMap {
    by_id: HashMap<usize, Tensor>,
}

impl GradientMap {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_id.get(&v.id)
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }
}

/// Records primitives as they execute; replay with [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            values,
            requires_grad,
            grad: None,
            op,
        });
        Var {
            id: nodes.len() - 1,
        }
    }

    /// Put a plain tensor on the tape as a leaf.
    pub fn leaf(&self, t: &Tensor, requires_grad: bool) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            requires_grad,
            Op::Leaf,
        )
    }

    pub fn leaf_from(&self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::invalid(format!(
                "leaf: shape {:?} wants {} values, got {}",
                shape,
                numel,
                values.len()
            )));
        }
        Ok(self.push(shape, values, requires_grad, Op::Leaf))
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.push(vec![1], vec![v], false, Op::Leaf)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.id].shape.clone()
    }

    pub fn values(&self, v: Var) -> Vec<f64> {
        self.nodes.borrow()[v.id].values.clone()
    }

    pub fn value_scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.id].values[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        Tensor::new(nodes[v.id].shape.clone(), nodes[v.id].values.clone()).expect("node is valid")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.id].requires_grad
    }

    /// Gradient stored on a node by the most recent `backward` call.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.id];
        n.grad
            .as_ref()
            .map(|g| Tensor::new(n.shape.clone(), g.clone()).expect("grad matches shape"))
    }

    fn rg2(&self, a: Var, b: Var) -> bool {
        let nodes = self.nodes.borrow();
        nodes[a.id].requires_grad || nodes[b.id].requires_grad
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (vals, shape) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.id], &nodes[b.id]);
            if na.shape != nb.shape {
                return Err(Error::ShapeMismatch {
                    op: "add",
                    lhs: na.shape.clone(),
                    rhs: nb.shape.clone(),
                });
            }
            let vals: Vec<f64> = na
                .values
                .iter()
                .zip(&nb.values)
                .map(|(x, y)| x + y)
                .collect();
            (vals, na.shape.clone())
        };
        Ok(self.push(shape, vals, self.rg2(a, b), Op::Add(a.id, b.id)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (vals, shape) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.id], &nodes[b.id]);
            if na.shape != nb.shape {
                return Err(Error::ShapeMismatch {
                    op: "sub",
                    lhs: na.shape.clone(),
                    rhs: nb.shape.clone(),
                });
            }
            let vals: Vec<f64> = na
                .values
                .iter()
                .zip(&nb.values)
                .map(|(x, y)| x - y)
                .collect();
            (vals, na.shape.clone())
        };
        Ok(self.push(shape, vals, self.rg2(a, b), Op::Sub(a.id, b.id)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (vals, shape) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.id], &nodes[b.id]);
            if na.shape != nb.shape {
                return Err(Error::ShapeMismatch {
                    op: "mul",
                    lhs: na.shape.clone(),
                    rhs: nb.shape.clone(),
                });
            }
            let vals: Vec<f64> = na
                .values
                .iter()
                .zip(&nb.values)
                .map(|(x, y)| x * y)
                .collect();
            (vals, na.shape.clone())
        };
        Ok(self.push(shape, vals, self.rg2(a, b), Op::Mul(a.id, b.id)))
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        let (vals, shape, rg) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.id];
            (
                nx.values.iter().map(|v| v * c).collect(),
                nx.shape.clone(),
                nx.requires_grad,
            )
        };
        self.push(shape, vals, rg, Op::Scale(x.id, c))
    }

    /// `x` is `[r, c]`, `b` is `[c]`; the bias row is added to every row.
    pub fn add_bias(&self, x: Var, b: Var) -> Result<Var> {
        let (vals, shape) = {
            let nodes = self.nodes.borrow();
            let (nx, nb) = (&nodes[x.id], &nodes[b.id]);
            if nx.shape.len() != 2 || nb.shape.len() != 1 || nx.shape[1] != nb.shape[0] {
                return Err(Error::ShapeMismatch {
                    op: "add_bias",
                    lhs: nx.shape.clone(),
                    rhs: nb.shape.clone(),
                });
            }
            let c = nx.shape[1];
            let mut vals = nx.values.clone();
            for row in vals.chunks_mut(c) {
                for (v, bv) in row.iter_mut().zip(&nb.values) {
                    *v += bv;
                }
            }
            (vals, nx.shape.clone())
        };
        Ok(self.push(shape, vals, self.rg2(x, b), Op::AddBias(x.id, b.id)))
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (vals, shape, rg) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.id];
            (
                nx.values.iter().map(|&v| f(v)).collect(),
                nx.shape.clone(),
                nx.requires_grad,
            )
        };
        self.push(shape, vals, rg, op)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x.id))
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x.id))
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x.id))
    }

    pub fn swish(&self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Swish(x.id))
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x.id))
    }

    pub fn log(&self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x.id))
    }

    // ---- matrix ops ------------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (vals, shape) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.id], &nodes[b.id]);
            if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: na.shape.clone(),
                    rhs: nb.shape.clone(),
                });
            }
            let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
            let mut out = vec![0.0; m * n];
            mm_nn(&na.values, &nb.values, m, k, n, &mut out);
            (out, vec![m, n])
        };
        Ok(self.push(shape, vals, self.rg2(a, b), Op::Matmul(a.id, b.id)))
    }

    /// `a [m,k] × b[n,k]ᵀ -> [m,n]`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let (vals, shape) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.id], &nodes[b.id]);
            if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[1] {
                return Err(Error::ShapeMismatch {
                    op: "matmul_nt",
                    lhs: na.shape.clone(),
                    rhs: nb.shape.clone(),
                });
            }
            let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[0]);
            let mut out = vec![0.0; m * n];
            mm_nt(&na.values, &nb.values, m, k, n, &mut out);
            (out, vec![m, n])
        };
        Ok(self.push(shape, vals, self.rg2(a, b), Op::MatmulNT(a.id, b.id)))
    }

    // ---- row-wise softmax family ----------------------------------------

    fn rows_cols(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.id];
        if n.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: n.shape.clone(),
                rhs: vec![],
            });
        }
        Ok((n.shape[0], n.shape[1]))
    }

    pub fn softmax(&self, x: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(x, "softmax")?;
        let (vals, rg) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.id];
            let mut vals = vec![0.0; r * c];
            for i in 0..r {
                softmax_row(&nx.values[i * c..(i + 1) * c], &mut vals[i * c..(i + 1) * c]);
            }
            (vals, nx.requires_grad)
        };
        Ok(self.push(vec![r, c], vals, rg, Op::Softmax(x.id)))
    }

    pub fn log_softmax(&self, x: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(x, "log_softmax")?;
        let (vals, rg) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.id];
            let mut vals = vec![0.0; r * c];
            for i in 0..r {
                let row = &nx.values[i * c..(i + 1) * c];
                let lse = log_sum_exp(row);
                for j in 0..c {
                    vals[i * c + j] = row[j] - lse;
                }
            }
            (vals, nx.requires_grad)
        };
        Ok(self.push(vec![r, c], vals, rg, Op::LogSoftmax(x.id)))
    }

    /// Row-wise log-sum-exp, `[r,c] -> [r]`.
    pub fn log_sum_exp(&self, x: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(x, "log_sum_exp")?;
        let (vals, rg) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.id];
            let vals = (0..r)
                .map(|i| log_sum_exp(&nx.values[i * c..(i + 1) * c]))
                .collect();
            (vals, nx.requires_grad)
        };
        Ok(self.push(vec![r], vals, rg, Op::LogSumExp(x.id)))
    }

    /// Gated linear unit along the last axis: `x = [a; b]`, out `a ⊙ σ(b)`.
    pub fn glu(&self, x: Var) -> Result<Var> {
        let (r, c2) = self.rows_cols(x, "glu")?;
        if c2 % 2 != 0 {
            return Err(Error::invalid(format!("glu: odd channel count {c2}")));
        }
        let c = c2 / 2;
        let (vals, rg) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.id];
            let mut vals = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    let a = nx.values[i * c2 + j];
                    let b = nx.values[i * c2 + c + j];
                    vals[i * c + j] = a * sigmoid(b);
                }
            }
            (vals, nx.requires_grad)
        };
        Ok(self.push(vec![r, c], vals, rg, Op::Glu(x.id)))
    }

    // ---- convolutions ----------------------------------------------------

    /// 2-D convolution: `x [Cin,H,W]`, `w [Cout,Cin,kh,kw]`, `b [Cout]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (vals, shape, rg) = {
            let nodes = self.nodes.borrow();
            let (nx, nw, nb) = (&nodes[x.id], &nodes[w.id], &nodes[b.id]);
            if nx.shape.len() != 3 || nw.shape.len() != 4 || nx.shape[0] != nw.shape[1] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    lhs: nx.shape.clone(),
                    rhs: nw.shape.clone(),
                });
            }
            let (cin, h, wd) = (nx.shape[0], nx.shape[1], nx.shape[2]);
            let (cout, kh, kw) = (nw.shape[0], nw.shape[2], nw.shape[3]);
            if nb.shape != [cout] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: nb.shape.clone(),
                    rhs: vec![cout],
                });
            }
            if h + 2 * pad < kh || wd + 2 * pad < kw {
                return Err(Error::invalid(format!(
                    "conv2d: input {:?} smaller than kernel {:?} at pad {pad}",
                    nx.shape, nw.shape
                )));
            }
            let ho = (h + 2 * pad - kh) / stride + 1;
            let wo = (wd + 2 * pad - kw) / stride + 1;
            let mut out = vec![0.0; cout * ho * wo];
            for co in 0..cout {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = nb.values[co];
                        for ci in 0..cin {
                            for u in 0..kh {
                                let hh = (i * stride + u) as isize - pad as isize;
                                if hh < 0 || hh >= h as isize {
                                    continue;
                                }
                                for v in 0..kw {
                                    let ww = (j * stride + v) as isize - pad as isize;
                                    if ww < 0 || ww >= wd as isize {
                                        continue;
                                    }
                                    acc += nx.values[ci * h * wd + hh as usize * wd + ww as usize]
                                        * nw.values[((co * cin + ci) * kh + u) * kw + v];
                                }
                            }
                        }
                        out[co * ho * wo + i * wo + j] = acc;
                    }
                }
            }
            let rg = nx.requires_grad || nw.requires_grad || nb.requires_grad;
            (out, vec![cout, ho, wo], rg)
        };
        Ok(self.push(
            shape,
            vals,
            rg,
            Op::Conv2d {
                x: x.id,
                w: w.id,
                b: b.id,
                stride,
                pad,
            },
        ))
    }

    /// Depthwise 1-D convolution over time: `x [T,d]`, `w [d,K]`, `b [d]`,
    /// zero-padded so the output is also `[T,d]`.
    pub fn dw_conv1d(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (vals, shape, rg) = {
            let nodes = self.nodes.borrow();
            let (nx, nw, nb) = (&nodes[x.id], &nodes[w.id], &nodes[b.id]);
            if nx.shape.len() != 2 || nw.shape.len() != 2 || nx.shape[1] != nw.shape[0] {
                return Err(Error::ShapeMismatch {
                    op: "dw_conv1d",
                    lhs: nx.shape.clone(),
                    rhs: nw.shape.clone(),
                });
            }
            let (t, d) = (nx.shape[0], nx.shape[1]);
            let k = nw.shape[1];
            if nb.shape != [d] {
                return Err(Error::ShapeMismatch {
                    op: "dw_conv1d bias",
                    lhs: nb.shape.clone(),
                    rhs: vec![d],
                });
            }
            let left = (k - 1) / 2;
            let mut out = vec![0.0; t * d];
            for ti in 0..t {
                for c in 0..d {
                    let mut acc = nb.values[c];
                    for ki in 0..k {
                        let tt = ti as isize + ki as isize - left as isize;
                        if tt < 0 || tt >= t as isize {
                            continue;
                        }
                        acc += nx.values[tt as usize * d + c] * nw.values[c * k + ki];
                    }
                    out[ti * d + c] = acc;
                }
            }
            let rg = nx.requires_grad || nw.requires_grad || nb.requires_grad;
            (out, vec![t, d], rg)
        };
        Ok(self.push(
            shape,
            vals,
            rg,
            Op::DwConv1d {
                x: x.id,
                w: w.id,
                b: b.id,
            },
        ))
    }

    // ---- normalization ---------------------------------------------------

    /// Layer norm over the last axis of `x [r,c]` with learned `gamma`/`beta [c]`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.rows_cols(x, "layer_norm")?;
        let (vals, rg) = {
            let nodes = self.nodes.borrow();
            let (nx, ng, nb) = (&nodes[x.id], &nodes[gamma.id], &nodes[beta.id]);
            if ng.shape != [c] || nb.shape != [c] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: nx.shape.clone(),
                    rhs: ng.shape.clone(),
                });
            }
            let mut vals = vec![0.0; r * c];
            for i in 0..r {
                let row = &nx.values[i * c..(i + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..c {
                    vals[i * c + j] = (row[j] - mean) * inv * ng.values[j] + nb.values[j];
                }
            }
            let rg = nx.requires_grad || ng.requires_grad || nb.requires_grad;
            (vals, rg)
        };
        Ok(self.push(
            vec![r, c],
            vals,
            rg,
            Op::LayerNorm {
                x: x.id,
                gamma: gamma.id,
                beta: beta.id,
                eps,
            },
        ))
    }

    /// Batch norm over the row axis of `x [r,c]` using batch statistics.
    /// Returns the normalized output plus the observed per-column mean and
    /// (biased) variance so the caller can fold them into running buffers.
    pub fn batch_norm_train(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (r, c) = self.rows_cols(x, "batch_norm")?;
        let (vals, mean, var, rg) = {
            let nodes = self.nodes.borrow();
            let (nx, ng, nb) = (&nodes[x.id], &nodes[gamma.id], &nodes[beta.id]);
            if ng.shape != [c] || nb.shape != [c] {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm",
                    lhs: nx.shape.clone(),
                    rhs: ng.shape.clone(),
                });
            }
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    mean[j] += nx.values[i * c + j];
                }
            }
            for m in mean.iter_mut() {
                *m /= r as f64;
            }
            for i in 0..r {
                for j in 0..c {
                    var[j] += (nx.values[i * c + j] - mean[j]).powi(2);
                }
            }
            for v in var.iter_mut() {
                *v /= r as f64;
            }
            let mut vals = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    let inv = 1.0 / (var[j] + eps).sqrt();
                    vals[i * c + j] =
                        (nx.values[i * c + j] - mean[j]) * inv * ng.values[j] + nb.values[j];
                }
            }
            let rg = nx.requires_grad || ng.requires_grad || nb.requires_grad;
            (vals, mean, var, rg)
        };
        let out = self.push(
            vec![r, c],
            vals,
            rg,
            Op::BatchNormTrain {
                x: x.id,
                gamma: gamma.id,
                beta: beta.id,
                eps,
                mean: mean.clone(),
                var: var.clone(),
            },
        );
        Ok((out, mean, var))
    }

    /// Batch norm in evaluation mode: normalizes with frozen running stats.
    pub fn batch_norm_eval(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Var> {
        let (r, c) = self.rows_cols(x, "batch_norm")?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::invalid(format!(
                "batch_norm: running stats dim {} vs {c}",
                running_mean.len()
            )));
        }
        let (vals, rg) = {
            let nodes = self.nodes.borrow();
            let (nx, ng, nb) = (&nodes[x.id], &nodes[gamma.id], &nodes[beta.id]);
            if ng.shape != [c] || nb.shape != [c] {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm",
                    lhs: nx.shape.clone(),
                    rhs: ng.shape.clone(),
                });
            }
            let mut vals = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    let inv = 1.0 / (running_var[j] + eps).sqrt();
                    vals[i * c + j] =
                        (nx.values[i * c + j] - running_mean[j]) * inv * ng.values[j] + nb.values[j];
                }
            }
            let rg = nx.requires_grad || ng.requires_grad || nb.requires_grad;
            (vals, rg)
        };
        Ok(self.push(
            vec![r, c],
            vals,
            rg,
            Op::BatchNormEval {
                x: x.id,
                gamma: gamma.id,
                beta: beta.id,
                eps,
                mean: running_mean.to_vec(),
                var: running_var.to_vec(),
            },
        ))
    }

    // ---- lookups, shapes, reductions --------------------------------------

    /// Row lookup: `table [V,d]`, ids -> `[len(ids), d]`.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vals, d, rg) = {
            let nodes = self.nodes.borrow();
            let nt = &nodes[table.id];
            if nt.shape.len() != 2 {
                return Err(Error::ShapeMismatch {
                    op: "embedding",
                    lhs: nt.shape.clone(),
                    rhs: vec![],
                });
            }
            let (v, d) = (nt.shape[0], nt.shape[1]);
            if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
                return Err(Error::invalid(format!(
                    "embedding: id {bad} out of range (table has {v} rows)"
                )));
            }
            let mut vals = Vec::with_capacity(ids.len() * d);
            for &i in ids {
                vals.extend_from_slice(&nt.values[i * d..(i + 1) * d]);
            }
            (vals, d, nt.requires_grad)
        };
        Ok(self.push(
            vec![ids.len(), d],
            vals,
            rg,
            Op::Embedding {
                table: table.id,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn slice_cols(&self, x: Var, from: usize, to: usize) -> Result<Var> {
        let (r, c) = self.rows_cols(x, "slice_cols")?;
        if from >= to || to > c {
            return Err(Error::invalid(format!(
                "slice_cols: [{from},{to}) out of 0..{c}"
            )));
        }
        let (vals, rg) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.id];
            let w = to - from;
            let mut vals = Vec::with_capacity(r * w);
            for i in 0..r {
                vals.extend_from_slice(&nx.values[i * c + from..i * c + to]);
            }
            (vals, nx.requires_grad)
        };
        Ok(self.push(
            vec![r, to - from],
            vals,
            rg,
            Op::SliceCols { x: x.id, from },
        ))
    }

    pub fn slice_rows(&self, x: Var, from: usize, to: usize) -> Result<Var> {
        let (r, c) = self.rows_cols(x, "slice_rows")?;
        if from >= to || to > r {
            return Err(Error::invalid(format!(
                "slice_rows: [{from},{to}) out of 0..{r}"
            )));
        }
        let (vals, rg) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.id];
            (
                nx.values[from * c..to * c].to_vec(),
                nx.requires_grad,
            )
        };
        Ok(self.push(
            vec![to - from, c],
            vals,
            rg,
            Op::SliceRows { x: x.id, from },
        ))
    }

    pub fn concat_cols(&self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.rows_cols(a, "concat_cols")?;
        let (rb, cb) = self.rows_cols(b, "concat_cols")?;
        if ra != rb {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: vec![ra, ca],
                rhs: vec![rb, cb],
            });
        }
        let vals = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.id], &nodes[b.id]);
            let mut vals = Vec::with_capacity(ra * (ca + cb));
            for i in 0..ra {
                vals.extend_from_slice(&na.values[i * ca..(i + 1) * ca]);
                vals.extend_from_slice(&nb.values[i * cb..(i + 1) * cb]);
            }
            vals
        };
        Ok(self.push(
            vec![ra, ca + cb],
            vals,
            self.rg2(a, b),
            Op::ConcatCols(a.id, b.id),
        ))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows: no inputs"));
        }
        let (_, c) = self.rows_cols(parts[0], "concat_rows")?;
        let (vals, rows, rg) = {
            let nodes = self.nodes.borrow();
            let mut vals = Vec::new();
            let mut rows = 0;
            let mut rg = false;
            for p in parts {
                let np = &nodes[p.id];
                if np.shape.len() != 2 || np.shape[1] != c {
                    return Err(Error::ShapeMismatch {
                        op: "concat_rows",
                        lhs: np.shape.clone(),
                        rhs: vec![rows, c],
                    });
                }
                rows += np.shape[0];
                rg |= np.requires_grad;
                vals.extend_from_slice(&np.values);
            }
            (vals, rows, rg)
        };
        Ok(self.push(
            vec![rows, c],
            vals,
            rg,
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
        ))
    }

    pub fn reverse_rows(&self, x: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(x, "reverse_rows")?;
        let (vals, rg) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.id];
            let mut vals = Vec::with_capacity(r * c);
            for i in (0..r).rev() {
                vals.extend_from_slice(&nx.values[i * c..(i + 1) * c]);
            }
            (vals, nx.requires_grad)
        };
        Ok(self.push(vec![r, c], vals, rg, Op::ReverseRows(x.id)))
    }

    /// Each row repeated `k` times consecutively: `[r,c] -> [r*k,c]`.
    pub fn repeat_rows_interleave(&self, x: Var, k: usize) -> Result<Var> {
        let (r, c) = self.rows_cols(x, "repeat_rows_interleave")?;
        if k == 0 {
            return Err(Error::invalid("repeat_rows_interleave: k == 0"));
        }
        let (vals, rg) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.id];
            let mut vals = Vec::with_capacity(r * k * c);
            for i in 0..r {
                for _ in 0..k {
                    vals.extend_from_slice(&nx.values[i * c..(i + 1) * c]);
                }
            }
            (vals, nx.requires_grad)
        };
        Ok(self.push(
            vec![r * k, c],
            vals,
            rg,
            Op::RepeatRowsInterleave { x: x.id, k },
        ))
    }

    /// Whole matrix stacked `k` times: `[r,c] -> [r*k,c]`.
    pub fn tile_rows(&self, x: Var, k: usize) -> Result<Var> {
        let (r, c) = self.rows_cols(x, "tile_rows")?;
        if k == 0 {
            return Err(Error::invalid("tile_rows: k == 0"));
        }
        let (vals, rg) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.id];
            let mut vals = Vec::with_capacity(r * k * c);
            for _ in 0..k {
                vals.extend_from_slice(&nx.values);
            }
            (vals, nx.requires_grad)
        };
        Ok(self.push(vec![r * k, c], vals, rg, Op::TileRows { x: x.id, k }))
    }

    /// Relative-position gather: `x [t, 2t-1] -> out [t,t]` with
    /// `out[i,j] = x[i, i-j+t-1]`, i.e. column indexed by clipped distance.
    pub fn rel_shift(&self, x: Var) -> Result<Var> {
        let (t, c) = self.rows_cols(x, "rel_shift")?;
        if c != 2 * t - 1 {
            return Err(Error::ShapeMismatch {
                op: "rel_shift",
                lhs: vec![t, c],
                rhs: vec![t, 2 * t - 1],
            });
        }
        let (vals, rg) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.id];
            let mut vals = vec![0.0; t * t];
            for i in 0..t {
                for j in 0..t {
                    vals[i * t + j] = nx.values[i * c + (i + t - 1 - j)];
                }
            }
            (vals, nx.requires_grad)
        };
        Ok(self.push(vec![t, t], vals, rg, Op::RelShift(x.id)))
    }

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let (vals, rg) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.id];
            let numel: usize = shape.iter().product();
            if numel != nx.values.len() {
                return Err(Error::ShapeMismatch {
                    op: "reshape",
                    lhs: nx.shape.clone(),
                    rhs: shape,
                });
            }
            (nx.values.clone(), nx.requires_grad)
        };
        Ok(self.push(shape, vals, rg, Op::Reshape(x.id)))
    }

    /// `[C,H,W] -> [H, C*W]`: per-`h` frame holds all channels side by side.
    pub fn flatten_chw(&self, x: Var) -> Result<Var> {
        let (vals, shape, rg) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.id];
            if nx.shape.len() != 3 {
                return Err(Error::ShapeMismatch {
                    op: "flatten_chw",
                    lhs: nx.shape.clone(),
                    rhs: vec![],
                });
            }
            let (c, h, w) = (nx.shape[0], nx.shape[1], nx.shape[2]);
            let mut vals = vec![0.0; c * h * w];
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        vals[hi * c * w + ci * w + wi] = nx.values[ci * h * w + hi * w + wi];
                    }
                }
            }
            (vals, vec![h, c * w], nx.requires_grad)
        };
        Ok(self.push(shape, vals, rg, Op::FlattenChw(x.id)))
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let (s, rg) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.id];
            (nx.values.iter().sum::<f64>(), nx.requires_grad)
        };
        self.push(vec![1], vec![s], rg, Op::SumAll(x.id))
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let (s, rg) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.id];
            (
                nx.values.iter().sum::<f64>() / nx.values.len() as f64,
                nx.requires_grad,
            )
        };
        self.push(vec![1], vec![s], rg, Op::MeanAll(x.id))
    }

    /// One element per row: `out[i] = x[i, ids[i]]`.
    pub fn pick_per_row(&self, x: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.rows_cols(x, "pick_per_row")?;
        if ids.len() != r {
            return Err(Error::invalid(format!(
                "pick_per_row: {} ids for {r} rows",
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&j| j >= c) {
            return Err(Error::invalid(format!(
                "pick_per_row: column {bad} out of 0..{c}"
            )));
        }
        let (vals, rg) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.id];
            (
                ids.iter()
                    .enumerate()
                    .map(|(i, &j)| nx.values[i * c + j])
                    .collect(),
                nx.requires_grad,
            )
        };
        Ok(self.push(
            vec![r],
            vals,
            rg,
            Op::PickPerRow {
                x: x.id,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Inverted dropout. `train == false` is the identity (no node recorded).
    pub fn dropout(&self, x: Var, p: f64, train: bool, rng: &mut impl Rng) -> Var {
        if !train || p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let (vals, mask, shape, rg) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.id];
            let mask: Vec<f64> = (0..nx.values.len())
                .map(|_| {
                    if rng.gen::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
                .collect();
            let vals = nx
                .values
                .iter()
                .zip(&mask)
                .map(|(v, m)| v * m)
                .collect();
            (vals, mask, nx.shape.clone(), nx.requires_grad)
        };
        self.push(shape, vals, rg, Op::Dropout { x: x.id, mask })
    }

    /// Scalar node whose gradient w.r.t. `x` is supplied by the caller.
    /// The caller owns the correctness of `grad` (see the loss modules).
    pub fn custom_scalar(&self, x: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        let rg = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.id];
            if grad.len() != nx.values.len() {
                return Err(Error::invalid(format!(
                    "custom_scalar: grad len {} vs input numel {}",
                    grad.len(),
                    nx.values.len()
                )));
            }
            nx.requires_grad
        };
        Ok(self.push(vec![1], vec![value], rg, Op::CustomScalar { x: x.id, grad }))
    }

    /// Generic entry point over the parameterless primitives.
    pub fn forward_primitive(&self, p: Primitive, inputs: &[Var]) -> Result<Var> {
        let need = match p {
            Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::AddBias
            | Primitive::Matmul
            | Primitive::MatmulNT
            | Primitive::ConcatCols => 2,
            Primitive::ConcatRows => inputs.len().max(1),
            _ => 1,
        };
        if inputs.len() != need {
            return Err(Error::invalid(format!(
                "forward_primitive {p:?}: expected {need} inputs, got {}",
                inputs.len()
            )));
        }
        match p {
            Primitive::Add => self.add(inputs[0], inputs[1]),
            Primitive::Sub => self.sub(inputs[0], inputs[1]),
            Primitive::Mul => self.mul(inputs[0], inputs[1]),
            Primitive::AddBias => self.add_bias(inputs[0], inputs[1]),
            Primitive::Matmul => self.matmul(inputs[0], inputs[1]),
            Primitive::MatmulNT => self.matmul_nt(inputs[0], inputs[1]),
            Primitive::Sigmoid => Ok(self.sigmoid(inputs[0])),
            Primitive::Tanh => Ok(self.tanh(inputs[0])),
            Primitive::Relu => Ok(self.relu(inputs[0])),
            Primitive::Swish => Ok(self.swish(inputs[0])),
            Primitive::Exp => Ok(self.exp(inputs[0])),
            Primitive::Log => Ok(self.log(inputs[0])),
            Primitive::Softmax => self.softmax(inputs[0]),
            Primitive::LogSoftmax => self.log_softmax(inputs[0]),
            Primitive::LogSumExp => self.log_sum_exp(inputs[0]),
            Primitive::Glu => self.glu(inputs[0]),
            Primitive::SumAll => Ok(self.sum_all(inputs[0])),
            Primitive::MeanAll => Ok(self.mean_all(inputs[0])),
            Primitive::ConcatCols => self.concat_cols(inputs[0], inputs[1]),
            Primitive::ConcatRows => self.concat_rows(inputs),
            Primitive::ReverseRows => self.reverse_rows(inputs[0]),
        }
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar loss. Returns gradients for every leaf
    /// with `requires_grad` that lies on a path to the loss; gradients are
    /// also stored on the nodes for inspection via [`Tape::grad`].
    pub fn backward(&self, loss: Var) -> Result<GradientMap> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.id].values.len() != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                nodes[loss.id].shape
            )));
        }
        let mut map = GradientMap::default();
        if !nodes[loss.id].requires_grad {
            return Ok(map);
        }

        // Mark which nodes feed the loss through grad-requiring edges.
        let mut reach = vec![false; loss.id + 1];
        reach[loss.id] = true;
        for id in (0..=loss.id).rev() {
            if !reach[id] || !nodes[id].requires_grad {
                continue;
            }
            for input in op_inputs(&nodes[id].op) {
                if nodes[input].requires_grad {
                    reach[input] = true;
                }
            }
        }

        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            if !reach[id] {
                continue;
            }
            let gy = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            accumulate_vjp(&nodes, id, &gy, &mut grads)?;
            grads[id] = Some(gy);
        }

        for id in 0..=loss.id {
            let g = grads[id].take();
            if let Some(g) = g {
                if matches!(nodes[id].op, Op::Leaf) && nodes[id].requires_grad {
                    map.by_id.insert(
                        id,
                        Tensor::new(nodes[id].shape.clone(), g.clone())
                            .expect("grad shape matches"),
                    );
                }
                nodes[id].grad = Some(g);
            } else {
                nodes[id].grad = None;
            }
        }
        Ok(map)
    }
}

fn op_inputs(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::AddBias(a, b)
        | Op::Matmul(a, b)
        | Op::MatmulNT(a, b)
        | Op::ConcatCols(a, b) => vec![*a, *b],
        Op::Scale(x, _)
        | Op::Sigmoid(x)
        | Op::Tanh(x)
        | Op::Relu(x)
        | Op::Swish(x)
        | Op::Exp(x)
        | Op::Log(x)
        | Op::Softmax(x)
        | Op::LogSoftmax(x)
        | Op::LogSumExp(x)
        | Op::Glu(x)
        | Op::ReverseRows(x)
        | Op::RelShift(x)
        | Op::Reshape(x)
        | Op::FlattenChw(x)
        | Op::SumAll(x)
        | Op::MeanAll(x) => vec![*x],
        Op::Conv2d { x, w, b, .. } | Op::DwConv1d { x, w, b } => vec![*x, *w, *b],
        Op::LayerNorm { x, gamma, beta, .. }
        | Op::BatchNormTrain { x, gamma, beta, .. }
        | Op::BatchNormEval { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Embedding { table, .. } => vec![*table],
        Op::SliceCols { x, .. }
        | Op::SliceRows { x, .. }
        | Op::RepeatRowsInterleave { x, .. }
        | Op::TileRows { x, .. }
        | Op::PickPerRow { x, .. }
        | Op::Dropout { x, .. }
        | Op::CustomScalar { x, .. } => vec![*x],
        Op::ConcatRows(parts) => parts.clone(),
    }
}

fn grad_buf<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    if grads[id].is_none() {
        grads[id] = Some(vec![0.0; nodes[id].values.len()]);
    }
    grads[id].as_mut()
}

#[allow(clippy::too_many_lines)]
fn accumulate_vjp(
    nodes: &[Node],
    id: usize,
    gy: &[f64],
    grads: &mut [Option<Vec<f64>>],
) -> Result<()> {
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(ga) = grad_buf(grads, nodes, *a) {
                for (g, u) in ga.iter_mut().zip(gy) {
                    *g += u;
                }
            }
            if let Some(gb) = grad_buf(grads, nodes, *b) {
                for (g, u) in gb.iter_mut().zip(gy) {
                    *g += u;
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = grad_buf(grads, nodes, *a) {
                for (g, u) in ga.iter_mut().zip(gy) {
                    *g += u;
                }
            }
            if let Some(gb) = grad_buf(grads, nodes, *b) {
                for (g, u) in gb.iter_mut().zip(gy) {
                    *g -= u;
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].values, &nodes[*b].values);
            if let Some(ga) = grad_buf(grads, nodes, *a) {
                for i in 0..gy.len() {
                    ga[i] += gy[i] * bv[i];
                }
            }
            if let Some(gb) = grad_buf(grads, nodes, *b) {
                for i in 0..gy.len() {
                    gb[i] += gy[i] * av[i];
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for i in 0..gy.len() {
                    gx[i] += gy[i] * c;
                }
            }
        }
        Op::AddBias(x, b) => {
            let c = nodes[*b].values.len();
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for (g, u) in gx.iter_mut().zip(gy) {
                    *g += u;
                }
            }
            if let Some(gb) = grad_buf(grads, nodes, *b) {
                for (i, u) in gy.iter().enumerate() {
                    gb[i % c] += u;
                }
            }
        }
        Op::Matmul(a, b) => {
            let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let n = nodes[*b].shape[1];
            let (av, bv) = (&nodes[*a].values, &nodes[*b].values);
            if let Some(ga) = grad_buf(grads, nodes, *a) {
                mm_nt(gy, bv, m, n, k, ga);
            }
            if let Some(gb) = grad_buf(grads, nodes, *b) {
                mm_tn(av, gy, m, k, n, gb);
            }
        }
        Op::MatmulNT(a, b) => {
            let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let n = nodes[*b].shape[0];
            let (av, bv) = (&nodes[*a].values, &nodes[*b].values);
            if let Some(ga) = grad_buf(grads, nodes, *a) {
                mm_nn(gy, bv, m, n, k, ga);
            }
            if let Some(gb) = grad_buf(grads, nodes, *b) {
                mm_tn(gy, av, m, n, k, gb);
            }
        }
        Op::Sigmoid(x) => {
            let yv = &nodes[id].values;
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for i in 0..gy.len() {
                    gx[i] += gy[i] * yv[i] * (1.0 - yv[i]);
                }
            }
        }
        Op::Tanh(x) => {
            let yv = &nodes[id].values;
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for i in 0..gy.len() {
                    gx[i] += gy[i] * (1.0 - yv[i] * yv[i]);
                }
            }
        }
        Op::Relu(x) => {
            let xv = &nodes[*x].values;
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for i in 0..gy.len() {
                    if xv[i] > 0.0 {
                        gx[i] += gy[i];
                    }
                }
            }
        }
        Op::Swish(x) => {
            let xv = &nodes[*x].values;
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for i in 0..gy.len() {
                    let s = sigmoid(xv[i]);
                    gx[i] += gy[i] * (s + xv[i] * s * (1.0 - s));
                }
            }
        }
        Op::Exp(x) => {
            let yv = &nodes[id].values;
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for i in 0..gy.len() {
                    gx[i] += gy[i] * yv[i];
                }
            }
        }
        Op::Log(x) => {
            let xv = &nodes[*x].values;
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for i in 0..gy.len() {
                    gx[i] += gy[i] / xv[i];
                }
            }
        }
        Op::Softmax(x) => {
            let yv = &nodes[id].values;
            let c = *nodes[id].shape.last().expect("2-D");
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for (row, (yrow, grow)) in yv.chunks(c).zip(gy.chunks(c)).enumerate() {
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    for j in 0..c {
                        gx[row * c + j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
        }
        Op::LogSoftmax(x) => {
            let yv = &nodes[id].values;
            let c = *nodes[id].shape.last().expect("2-D");
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for (row, (yrow, grow)) in yv.chunks(c).zip(gy.chunks(c)).enumerate() {
                    let gsum: f64 = grow.iter().sum();
                    for j in 0..c {
                        gx[row * c + j] += grow[j] - yrow[j].exp() * gsum;
                    }
                }
            }
        }
        Op::LogSumExp(x) => {
            let xv = &nodes[*x].values;
            let yv = &nodes[id].values;
            let c = nodes[*x].shape[1];
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for i in 0..yv.len() {
                    for j in 0..c {
                        gx[i * c + j] += gy[i] * (xv[i * c + j] - yv[i]).exp();
                    }
                }
            }
        }
        Op::Glu(x) => {
            let xv = &nodes[*x].values;
            let c = nodes[id].shape[1];
            let c2 = 2 * c;
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for i in 0..nodes[id].shape[0] {
                    for j in 0..c {
                        let a = xv[i * c2 + j];
                        let s = sigmoid(xv[i * c2 + c + j]);
                        let u = gy[i * c + j];
                        gx[i * c2 + j] += u * s;
                        gx[i * c2 + c + j] += u * a * s * (1.0 - s);
                    }
                }
            }
        }
        Op::Conv2d {
            x,
            w,
            b,
            stride,
            pad,
        } => {
            let (cin, h, wd) = (
                nodes[*x].shape[0],
                nodes[*x].shape[1],
                nodes[*x].shape[2],
            );
            let (cout, kh, kw) = (
                nodes[*w].shape[0],
                nodes[*w].shape[2],
                nodes[*w].shape[3],
            );
            let (ho, wo) = (nodes[id].shape[1], nodes[id].shape[2]);
            let xv = &nodes[*x].values;
            let wv = &nodes[*w].values;
            // Split borrows: process each input's grad in its own pass.
            if let Some(gb) = grad_buf(grads, nodes, *b) {
                for co in 0..cout {
                    gb[co] += gy[co * ho * wo..(co + 1) * ho * wo].iter().sum::<f64>();
                }
            }
            if nodes[*w].requires_grad || nodes[*x].requires_grad {
                for co in 0..cout {
                    for i in 0..ho {
                        for j in 0..wo {
                            let g = gy[co * ho * wo + i * wo + j];
                            if g == 0.0 {
                                continue;
                            }
                            for ci in 0..cin {
                                for u in 0..kh {
                                    let hh = (i * stride + u) as isize - *pad as isize;
                                    if hh < 0 || hh >= h as isize {
                                        continue;
                                    }
                                    for v in 0..kw {
                                        let ww = (j * stride + v) as isize - *pad as isize;
                                        if ww < 0 || ww >= wd as isize {
                                            continue;
                                        }
                                        let xi = ci * h * wd + hh as usize * wd + ww as usize;
                                        let wi = ((co * cin + ci) * kh + u) * kw + v;
                                        if nodes[*w].requires_grad {
                                            if let Some(gw) = grad_buf(grads, nodes, *w) {
                                                gw[wi] += g * xv[xi];
                                            }
                                        }
                                        if nodes[*x].requires_grad {
                                            if let Some(gx) = grad_buf(grads, nodes, *x) {
                                                gx[xi] += g * wv[wi];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::DwConv1d { x, w, b } => {
            let (t, d) = (nodes[*x].shape[0], nodes[*x].shape[1]);
            let k = nodes[*w].shape[1];
            let left = (k - 1) / 2;
            let xv = &nodes[*x].values;
            let wv = &nodes[*w].values;
            if let Some(gb) = grad_buf(grads, nodes, *b) {
                for ti in 0..t {
                    for c in 0..d {
                        gb[c] += gy[ti * d + c];
                    }
                }
            }
            for ti in 0..t {
                for c in 0..d {
                    let g = gy[ti * d + c];
                    if g == 0.0 {
                        continue;
                    }
                    for ki in 0..k {
                        let tt = ti as isize + ki as isize - left as isize;
                        if tt < 0 || tt >= t as isize {
                            continue;
                        }
                        let xi = tt as usize * d + c;
                        if nodes[*w].requires_grad {
                            if let Some(gw) = grad_buf(grads, nodes, *w) {
                                gw[c * k + ki] += g * xv[xi];
                            }
                        }
                        if nodes[*x].requires_grad {
                            if let Some(gx) = grad_buf(grads, nodes, *x) {
                                gx[xi] += g * wv[c * k + ki];
                            }
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            eps,
        } => {
            let (r, c) = (nodes[id].shape[0], nodes[id].shape[1]);
            let xv = &nodes[*x].values;
            let gv = &nodes[*gamma].values;
            for i in 0..r {
                let row = &xv[i * c..(i + 1) * c];
                let grow = &gy[i * c..(i + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                if nodes[*x].requires_grad {
                    let dxhat: Vec<f64> = (0..c).map(|j| grow[j] * gv[j]).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / c as f64;
                    let mean_dxx = dxhat
                        .iter()
                        .zip(&xhat)
                        .map(|(d, h)| d * h)
                        .sum::<f64>()
                        / c as f64;
                    if let Some(gx) = grad_buf(grads, nodes, *x) {
                        for j in 0..c {
                            gx[i * c + j] += inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxx);
                        }
                    }
                }
                if let Some(gg) = grad_buf(grads, nodes, *gamma) {
                    for j in 0..c {
                        gg[j] += grow[j] * xhat[j];
                    }
                }
                if let Some(gb) = grad_buf(grads, nodes, *beta) {
                    for j in 0..c {
                        gb[j] += grow[j];
                    }
                }
            }
        }
        Op::BatchNormTrain {
            x,
            gamma,
            beta,
            eps,
            mean,
            var,
        } => {
            let (r, c) = (nodes[id].shape[0], nodes[id].shape[1]);
            let xv = &nodes[*x].values;
            let gv = &nodes[*gamma].values;
            for j in 0..c {
                let inv = 1.0 / (var[j] + eps).sqrt();
                let xhat: Vec<f64> = (0..r).map(|i| (xv[i * c + j] - mean[j]) * inv).collect();
                let grow: Vec<f64> = (0..r).map(|i| gy[i * c + j]).collect();
                if nodes[*x].requires_grad {
                    let dxhat: Vec<f64> = grow.iter().map(|g| g * gv[j]).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / r as f64;
                    let mean_dxx = dxhat
                        .iter()
                        .zip(&xhat)
                        .map(|(d, h)| d * h)
                        .sum::<f64>()
                        / r as f64;
                    if let Some(gx) = grad_buf(grads, nodes, *x) {
                        for i in 0..r {
                            gx[i * c + j] += inv * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxx);
                        }
                    }
                }
                if let Some(gg) = grad_buf(grads, nodes, *gamma) {
                    gg[j] += grow.iter().zip(&xhat).map(|(g, h)| g * h).sum::<f64>();
                }
                if let Some(gb) = grad_buf(grads, nodes, *beta) {
                    gb[j] += grow.iter().sum::<f64>();
                }
            }
        }
        Op::BatchNormEval {
            x,
            gamma,
            beta,
            eps,
            mean,
            var,
        } => {
            let (r, c) = (nodes[id].shape[0], nodes[id].shape[1]);
            let xv = &nodes[*x].values;
            let gv = &nodes[*gamma].values;
            for j in 0..c {
                let inv = 1.0 / (var[j] + eps).sqrt();
                for i in 0..r {
                    let g = gy[i * c + j];
                    if let Some(gx) = grad_buf(grads, nodes, *x) {
                        gx[i * c + j] += g * gv[j] * inv;
                    }
                    if let Some(gg) = grad_buf(grads, nodes, *gamma) {
                        gg[j] += g * (xv[i * c + j] - mean[j]) * inv;
                    }
                    if let Some(gb) = grad_buf(grads, nodes, *beta) {
                        gb[j] += g;
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            let d = nodes[id].shape[1];
            if let Some(gt) = grad_buf(grads, nodes, *table) {
                for (row, &tid) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[tid * d + j] += gy[row * d + j];
                    }
                }
            }
        }
        Op::SliceCols { x, from, .. } => {
            let c_in = nodes[*x].shape[1];
            let (r, w) = (nodes[id].shape[0], nodes[id].shape[1]);
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for i in 0..r {
                    for j in 0..w {
                        gx[i * c_in + from + j] += gy[i * w + j];
                    }
                }
            }
        }
        Op::SliceRows { x, from, .. } => {
            let c = nodes[*x].shape[1];
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for (i, u) in gy.iter().enumerate() {
                    gx[from * c + i] += u;
                }
            }
        }
        Op::ConcatCols(a, b) => {
            let (ca, cb) = (nodes[*a].shape[1], nodes[*b].shape[1]);
            let r = nodes[id].shape[0];
            let c = ca + cb;
            if let Some(ga) = grad_buf(grads, nodes, *a) {
                for i in 0..r {
                    for j in 0..ca {
                        ga[i * ca + j] += gy[i * c + j];
                    }
                }
            }
            if let Some(gb) = grad_buf(grads, nodes, *b) {
                for i in 0..r {
                    for j in 0..cb {
                        gb[i * cb + j] += gy[i * c + ca + j];
                    }
                }
            }
        }
        Op::ConcatRows(parts) => {
            let c = nodes[id].shape[1];
            let mut offset = 0;
            for &p in parts {
                let rows = nodes[p].shape[0];
                if let Some(gp) = grad_buf(grads, nodes, p) {
                    for i in 0..rows * c {
                        gp[i] += gy[offset * c + i];
                    }
                }
                offset += rows;
            }
        }
        Op::ReverseRows(x) => {
            let (r, c) = (nodes[id].shape[0], nodes[id].shape[1]);
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for i in 0..r {
                    for j in 0..c {
                        gx[(r - 1 - i) * c + j] += gy[i * c + j];
                    }
                }
            }
        }
        Op::RepeatRowsInterleave { x, k } => {
            let c = nodes[*x].shape[1];
            let r = nodes[*x].shape[0];
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for i in 0..r {
                    for rep in 0..*k {
                        for j in 0..c {
                            gx[i * c + j] += gy[(i * k + rep) * c + j];
                        }
                    }
                }
            }
        }
        Op::TileRows { x, k } => {
            let n = nodes[*x].values.len();
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for rep in 0..*k {
                    for i in 0..n {
                        gx[i] += gy[rep * n + i];
                    }
                }
            }
        }
        Op::RelShift(x) => {
            let t = nodes[id].shape[0];
            let c = 2 * t - 1;
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for i in 0..t {
                    for j in 0..t {
                        gx[i * c + (i + t - 1 - j)] += gy[i * t + j];
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for (g, u) in gx.iter_mut().zip(gy) {
                    *g += u;
                }
            }
        }
        Op::FlattenChw(x) => {
            let (c, h, w) = (
                nodes[*x].shape[0],
                nodes[*x].shape[1],
                nodes[*x].shape[2],
            );
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for ci in 0..c {
                    for hi in 0..h {
                        for wi in 0..w {
                            gx[ci * h * w + hi * w + wi] += gy[hi * c * w + ci * w + wi];
                        }
                    }
                }
            }
        }
        Op::SumAll(x) => {
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for g in gx.iter_mut() {
                    *g += gy[0];
                }
            }
        }
        Op::MeanAll(x) => {
            let n = nodes[*x].values.len() as f64;
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for g in gx.iter_mut() {
                    *g += gy[0] / n;
                }
            }
        }
        Op::PickPerRow { x, ids } => {
            let c = nodes[*x].shape[1];
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for (i, &j) in ids.iter().enumerate() {
                    gx[i * c + j] += gy[i];
                }
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for i in 0..gy.len() {
                    gx[i] += gy[i] * mask[i];
                }
            }
        }
        Op::CustomScalar { x, grad } => {
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for i in 0..grad.len() {
                    gx[i] += gy[0] * grad[i];
                }
            }
        }
    }
    Ok(())
}

// ---- raw kernels -----------------------------------------------------------

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out[m,n] += a[m,k] · b[k,n]`
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for l in 0..k {
                acc += arow[l] * brow[l];
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · b[m,n]`
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[l * n..(l + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Max-subtracted log-sum-exp; `-inf` inputs are absorbing, never NaN.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Two-argument log-sum-exp with the same `-inf` handling.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf2(tape: &Tape, shape: Vec<usize>, vals: Vec<f64>) -> Var {
        tape.leaf_from(shape, vals, true).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let t = Tape::new();
        let a = leaf2(&t, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let i = leaf2(&t, vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let y = t.matmul(a, i).unwrap();
        assert_eq!(t.values(y), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let t = Tape::new();
        let x = leaf2(&t, vec![1, 2], vec![0.0, 0.0]);
        let y = t.softmax(x).unwrap();
        assert_eq!(t.values(y), vec![0.5, 0.5]);
    }

    #[test]
    fn swish_at_zero_is_zero() {
        let t = Tape::new();
        let x = leaf2(&t, vec![1], vec![0.0]);
        let y = t.swish(x);
        assert_eq!(t.values(y), vec![0.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let t = Tape::new();
        let x = leaf2(&t, vec![3], vec![1.0, 2.0, 3.0]);
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum_all(sq);
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_loss_has_empty_gradient_map() {
        let t = Tape::new();
        let c = t.scalar(5.0);
        let loss = t.scale(c, 2.0);
        let grads = t.backward(loss).unwrap();
        assert!(grads.is_empty());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let t = Tape::new();
        let x = leaf2(&t, vec![2], vec![1.0, 2.0]);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn glu_matches_definition_exactly() {
        let t = Tape::new();
        let vals = vec![0.3, -1.2, 2.0, 0.7, -0.4, 1.5];
        let x = leaf2(&t, vec![1, 6], vals.clone());
        let y = t.glu(x).unwrap();
        let got = t.values(y);
        for j in 0..3 {
            assert_eq!(got[j], vals[j] * sigmoid(vals[3 + j]));
        }
    }

    #[test]
    fn shape_mismatch_names_primitive_and_shapes() {
        let t = Tape::new();
        let a = leaf2(&t, vec![2, 3], vec![0.0; 6]);
        let b = leaf2(&t, vec![2, 2], vec![0.0; 4]);
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn grad_absent_off_the_loss_path() {
        let t = Tape::new();
        let x = leaf2(&t, vec![2], vec![1.0, 2.0]);
        let bystander = leaf2(&t, vec![2], vec![3.0, 4.0]);
        let _unused = t.tanh(bystander);
        let loss = t.sum_all(x);
        let grads = t.backward(loss).unwrap();
        assert!(grads.get(x).is_some());
        assert!(grads.get(bystander).is_none());
        assert!(t.grad(bystander).is_none());
    }

    #[test]
    fn log_add_exp_handles_neg_inf() {
        assert_eq!(log_add_exp(f64::NEG_INFINITY, f64::NEG_INFINITY), f64::NEG_INFINITY);
        assert_eq!(log_add_exp(f64::NEG_INFINITY, 1.5), 1.5);
        let v = log_add_exp(0.0, 0.0);
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
