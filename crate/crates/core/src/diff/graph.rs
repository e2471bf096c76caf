//! The tape: eager forward evaluation, reverse-mode backward.

use std::collections::{BTreeMap, HashMap};

use super::special::{normal_inv_cdf, SQRT_2PI_F};
use super::{DiffError, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Sqrt,
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Expr {
    Leaf {
        name: Option<String>,
    },
    Unary {
        kind: UnaryKind,
        input: NodeId,
    },
    Binary {
        kind: BinaryKind,
        lhs: NodeId,
        rhs: NodeId,
    },
    MatMul {
        lhs: NodeId,
        rhs: NodeId,
    },
    Sum {
        input: NodeId,
    },
    Mean {
        input: NodeId,
    },
    Broadcast {
        input: NodeId,
        copies: usize,
    },
    Reshape {
        input: NodeId,
        shape: Vec<usize>,
    },
    Transpose {
        input: NodeId,
    },
    Slice {
        input: NodeId,
        axis: usize,
        start: usize,
        end: usize,
    },
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Inverse {
        input: NodeId,
    },
    LogDet {
        input: NodeId,
    },
    Clamp {
        input: NodeId,
        lo: f64,
        hi: f64,
    },
    Probit {
        input: NodeId,
    },
}

#[derive(Debug, Clone)]
struct Node {
    expr: Expr,
    value: Tensor,
}

/// Dynamic computation graph; nodes are appended in topological order and
/// evaluated eagerly.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    names: BTreeMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Named differentiable leaf.
    pub fn var(&mut self, name: impl Into<String>, value: Tensor) -> Result<NodeId, DiffError> {
        let name = name.into();
        if self.names.contains_key(&name) {
            return Err(DiffError::DuplicateLeaf(name));
        }
        if !value.all_finite() {
            return Err(DiffError::NonFinite { op: "var" });
        }
        let id = NodeId(self.nodes.len());
        self.names.insert(name.clone(), id);
        self.nodes.push(Node {
            expr: Expr::Leaf { name: Some(name) },
            value,
        });
        Ok(id)
    }

    /// Anonymous leaf; carries data, receives no gradient entry.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            expr: Expr::Leaf { name: None },
            value,
        });
        id
    }

    pub fn scalar_const(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Most recently inserted node (the conventional root).
    pub fn last_node(&self) -> Option<NodeId> {
        if self.nodes.is_empty() {
            None
        } else {
            Some(NodeId(self.nodes.len() - 1))
        }
    }

    /// Named leaves and their current values.
    pub fn named_leaves(&self) -> Vec<(String, Tensor)> {
        self.names
            .iter()
            .map(|(name, id)| (name.clone(), self.nodes[id.0].value.clone()))
            .collect()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, expr: Expr) -> Result<NodeId, DiffError> {
        let value = self.eval(&expr)?;
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { expr, value });
        Ok(id)
    }

    // ---- op builders ----------------------------------------------------

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, DiffError> {
        self.push(Expr::Binary {
            kind: BinaryKind::Add,
            lhs,
            rhs,
        })
    }

    pub fn sub(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, DiffError> {
        self.push(Expr::Binary {
            kind: BinaryKind::Sub,
            lhs,
            rhs,
        })
    }

    pub fn mul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, DiffError> {
        self.push(Expr::Binary {
            kind: BinaryKind::Mul,
            lhs,
            rhs,
        })
    }

    pub fn div(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, DiffError> {
        self.push(Expr::Binary {
            kind: BinaryKind::Div,
            lhs,
            rhs,
        })
    }

    pub fn matmul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, DiffError> {
        self.push(Expr::MatMul { lhs, rhs })
    }

    pub fn tanh(&mut self, input: NodeId) -> Result<NodeId, DiffError> {
        self.push(Expr::Unary {
            kind: UnaryKind::Tanh,
            input,
        })
    }

    pub fn sigmoid(&mut self, input: NodeId) -> Result<NodeId, DiffError> {
        self.push(Expr::Unary {
            kind: UnaryKind::Sigmoid,
            input,
        })
    }

    pub fn softplus(&mut self, input: NodeId) -> Result<NodeId, DiffError> {
        self.push(Expr::Unary {
            kind: UnaryKind::Softplus,
            input,
        })
    }

    pub fn exp(&mut self, input: NodeId) -> Result<NodeId, DiffError> {
        self.push(Expr::Unary {
            kind: UnaryKind::Exp,
            input,
        })
    }

    pub fn log(&mut self, input: NodeId) -> Result<NodeId, DiffError> {
        self.push(Expr::Unary {
            kind: UnaryKind::Log,
            input,
        })
    }

    pub fn sqrt(&mut self, input: NodeId) -> Result<NodeId, DiffError> {
        self.push(Expr::Unary {
            kind: UnaryKind::Sqrt,
            input,
        })
    }

    pub fn square(&mut self, input: NodeId) -> Result<NodeId, DiffError> {
        self.push(Expr::Unary {
            kind: UnaryKind::Square,
            input,
        })
    }

    pub fn sum(&mut self, input: NodeId) -> Result<NodeId, DiffError> {
        self.push(Expr::Sum { input })
    }

    pub fn mean(&mut self, input: NodeId) -> Result<NodeId, DiffError> {
        self.push(Expr::Mean { input })
    }

    /// Repeat a tensor along a new leading axis: shape `s` -> `[copies, s...]`.
    pub fn broadcast(&mut self, input: NodeId, copies: usize) -> Result<NodeId, DiffError> {
        self.push(Expr::Broadcast { input, copies })
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId, DiffError> {
        self.push(Expr::Reshape {
            input,
            shape: shape.to_vec(),
        })
    }

    pub fn transpose(&mut self, input: NodeId) -> Result<NodeId, DiffError> {
        self.push(Expr::Transpose { input })
    }

    pub fn slice(
        &mut self,
        input: NodeId,
        axis: usize,
        start: usize,
        end: usize,
    ) -> Result<NodeId, DiffError> {
        self.push(Expr::Slice {
            input,
            axis,
            start,
            end,
        })
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, DiffError> {
        self.push(Expr::Concat {
            parts: parts.to_vec(),
            axis,
        })
    }

    pub fn inverse(&mut self, input: NodeId) -> Result<NodeId, DiffError> {
        self.push(Expr::Inverse { input })
    }

    pub fn logdet(&mut self, input: NodeId) -> Result<NodeId, DiffError> {
        self.push(Expr::LogDet { input })
    }

    pub fn clamp(&mut self, input: NodeId, lo: f64, hi: f64) -> Result<NodeId, DiffError> {
        self.push(Expr::Clamp { input, lo, hi })
    }

    /// Elementwise inverse standard-normal CDF; inputs must lie strictly in (0, 1).
    pub fn probit(&mut self, input: NodeId) -> Result<NodeId, DiffError> {
        self.push(Expr::Probit { input })
    }

    // ---- composite conveniences -----------------------------------------

    /// Multiply by a scalar constant.
    pub fn scale(&mut self, input: NodeId, factor: f64) -> Result<NodeId, DiffError> {
        let c = self.scalar_const(factor);
        self.mul(input, c)
    }

    /// Add a scalar constant.
    pub fn add_scalar(&mut self, input: NodeId, value: f64) -> Result<NodeId, DiffError> {
        let c = self.scalar_const(value);
        self.add(input, c)
    }

    /// Column `t` of a rank-2 node, as a rank-1 node.
    pub fn column(&mut self, input: NodeId, t: usize) -> Result<NodeId, DiffError> {
        let rows = self.shape(input)[0];
        let s = self.slice(input, 1, t, t + 1)?;
        self.reshape(s, &[rows])
    }

    /// Tile a rank-1 node of length `d` into `[d, cols]` (same value down
    /// every column), via an outer product with a ones row.
    pub fn tile_cols(&mut self, input: NodeId, cols: usize) -> Result<NodeId, DiffError> {
        let d = self.shape(input)[0];
        let col = self.reshape(input, &[d, 1])?;
        let ones = self.constant(Tensor::ones(&[1, cols]));
        self.matmul(col, ones)
    }

    /// Column means of a rank-2 node `[n, d]` -> `[d]`.
    pub fn mean_axis0(&mut self, input: NodeId) -> Result<NodeId, DiffError> {
        let (n, d) = {
            let s = self.shape(input);
            if s.len() != 2 {
                return Err(DiffError::ShapeMismatch {
                    op: "mean_axis0",
                    detail: format!("expected rank 2, got {s:?}"),
                });
            }
            (s[0], s[1])
        };
        let w = self.constant(Tensor::filled(&[1, n], 1.0 / n as f64));
        let m = self.matmul(w, input)?;
        self.reshape(m, &[d])
    }

    // ---- forward / backward ---------------------------------------------

    /// Rebind named leaves and re-evaluate the whole tape in insertion
    /// order, returning the root (last node) value. Shapes of rebound
    /// tensors must match the leaves they replace.
    pub fn forward(&mut self, bindings: &HashMap<String, Tensor>) -> Result<Tensor, DiffError> {
        for (name, tensor) in bindings {
            let id = *self
                .names
                .get(name)
                .ok_or_else(|| DiffError::UnknownLeaf(name.clone()))?;
            if self.nodes[id.0].value.shape() != tensor.shape() {
                return Err(DiffError::ShapeMismatch {
                    op: "forward",
                    detail: format!(
                        "leaf `{name}` has shape {:?}, binding has {:?}",
                        self.nodes[id.0].value.shape(),
                        tensor.shape()
                    ),
                });
            }
            if !tensor.all_finite() {
                return Err(DiffError::NonFinite { op: "forward" });
            }
            self.nodes[id.0].value = tensor.clone();
        }
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].expr, Expr::Leaf { .. }) {
                continue;
            }
            let expr = self.nodes[i].expr.clone();
            self.nodes[i].value = self.eval(&expr)?;
        }
        self.nodes
            .last()
            .map(|n| n.value.clone())
            .ok_or(DiffError::InvalidNode)
    }

    /// Reverse-mode gradients of a scalar root with respect to every named
    /// leaf. Leaves not reachable from the root get zero gradients of their
    /// own shape.
    pub fn backward(&self, root: NodeId) -> Result<BTreeMap<String, Tensor>, DiffError> {
        let root_node = self.nodes.get(root.0).ok_or(DiffError::InvalidNode)?;
        if !root_node.value.is_scalar() {
            return Err(DiffError::NonScalarRoot(root_node.value.shape().to_vec()));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for id in (0..=root.0).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            match &self.nodes[id].expr {
                Expr::Leaf { name } => {
                    if name.is_some() {
                        grads[id] = Some(grad); // retained for collection below
                    }
                }
                expr => self.scatter(expr, &self.nodes[id].value, &grad, &mut grads)?,
            }
        }

        let mut out = BTreeMap::new();
        for (name, id) in &self.names {
            let g = if id.0 <= root.0 {
                grads[id.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[id.0].value.shape()))
            } else {
                Tensor::zeros(self.nodes[id.0].value.shape())
            };
            if !g.all_finite() {
                return Err(DiffError::NonFinite { op: "backward" });
            }
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    // ---- evaluation -------------------------------------------------------

    fn eval(&self, expr: &Expr) -> Result<Tensor, DiffError> {
        let out = match expr {
            Expr::Leaf { .. } => unreachable!("leaves are never re-evaluated"),
            Expr::Unary { kind, input } => {
                let x = self.value(*input);
                match kind {
                    UnaryKind::Tanh => x.map(f64::tanh),
                    UnaryKind::Sigmoid => x.map(sigmoid),
                    UnaryKind::Softplus => x.map(softplus),
                    UnaryKind::Exp => x.map(f64::exp),
                    UnaryKind::Log => {
                        if x.data().iter().any(|&v| v <= 0.0) {
                            return Err(DiffError::Domain {
                                op: "log",
                                detail: "inputs must be strictly positive".into(),
                            });
                        }
                        x.map(f64::ln)
                    }
                    UnaryKind::Sqrt => {
                        if x.data().iter().any(|&v| v < 0.0) {
                            return Err(DiffError::Domain {
                                op: "sqrt",
                                detail: "inputs must be nonnegative".into(),
                            });
                        }
                        x.map(f64::sqrt)
                    }
                    UnaryKind::Square => x.map(|v| v * v),
                }
            }
            Expr::Binary { kind, lhs, rhs } => {
                let (l, r) = (self.value(*lhs), self.value(*rhs));
                binary_eval(*kind, l, r)?
            }
            Expr::MatMul { lhs, rhs } => matmul_eval(self.value(*lhs), self.value(*rhs))?,
            Expr::Sum { input } => Tensor::scalar(self.value(*input).data().iter().sum()),
            Expr::Mean { input } => {
                let x = self.value(*input);
                if x.is_empty() {
                    return Err(DiffError::ShapeMismatch {
                        op: "mean",
                        detail: "empty tensor".into(),
                    });
                }
                Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64)
            }
            Expr::Broadcast { input, copies } => {
                let x = self.value(*input);
                let mut shape = Vec::with_capacity(x.rank() + 1);
                shape.push(*copies);
                shape.extend_from_slice(x.shape());
                let mut data = Vec::with_capacity(x.len() * copies);
                for _ in 0..*copies {
                    data.extend_from_slice(x.data());
                }
                Tensor::new(shape, data)?
            }
            Expr::Reshape { input, shape } => {
                let x = self.value(*input);
                if shape.iter().product::<usize>() != x.len() {
                    return Err(DiffError::ShapeMismatch {
                        op: "reshape",
                        detail: format!("{:?} -> {:?}", x.shape(), shape),
                    });
                }
                Tensor::new(shape.clone(), x.data().to_vec())?
            }
            Expr::Transpose { input } => {
                let x = self.value(*input);
                if x.rank() != 2 {
                    return Err(DiffError::ShapeMismatch {
                        op: "transpose",
                        detail: format!("expected rank 2, got {:?}", x.shape()),
                    });
                }
                transpose_raw(x)
            }
            Expr::Slice {
                input,
                axis,
                start,
                end,
            } => slice_eval(self.value(*input), *axis, *start, *end)?,
            Expr::Concat { parts, axis } => {
                let tensors: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
                concat_eval(&tensors, *axis)?
            }
            Expr::Inverse { input } => invert(self.value(*input), "inverse")?,
            Expr::LogDet { input } => {
                let x = self.value(*input);
                Tensor::scalar(logdet(x)?)
            }
            Expr::Clamp { input, lo, hi } => self.value(*input).map(|v| v.clamp(*lo, *hi)),
            Expr::Probit { input } => {
                let x = self.value(*input);
                if x.data().iter().any(|&p| p <= 0.0 || p >= 1.0) {
                    return Err(DiffError::Domain {
                        op: "probit",
                        detail: "inputs must lie strictly in (0, 1)".into(),
                    });
                }
                x.map(normal_inv_cdf)
            }
        };
        if !out.all_finite() {
            return Err(DiffError::NonFinite {
                op: expr_name(expr),
            });
        }
        Ok(out)
    }

    // ---- gradient scatter --------------------------------------------------

    fn scatter(
        &self,
        expr: &Expr,
        out: &Tensor,
        grad: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), DiffError> {
        match expr {
            Expr::Leaf { .. } => {}
            Expr::Unary { kind, input } => {
                let x = self.value(*input);
                let gx = match kind {
                    UnaryKind::Tanh => grad.zip_map(out, |g, y| g * (1.0 - y * y))?,
                    UnaryKind::Sigmoid => grad.zip_map(out, |g, y| g * y * (1.0 - y))?,
                    UnaryKind::Softplus => grad.zip_map(x, |g, v| g * sigmoid(v))?,
                    UnaryKind::Exp => grad.zip_map(out, |g, y| g * y)?,
                    UnaryKind::Log => grad.zip_map(x, |g, v| g / v)?,
                    UnaryKind::Sqrt => grad.zip_map(out, |g, y| g / (2.0 * y))?,
                    UnaryKind::Square => grad.zip_map(x, |g, v| g * 2.0 * v)?,
                };
                accumulate(grads, *input, gx);
            }
            Expr::Binary { kind, lhs, rhs } => {
                let (l, r) = (self.value(*lhs), self.value(*rhs));
                let (gl_full, gr_full) = match kind {
                    BinaryKind::Add => (grad.clone(), grad.clone()),
                    BinaryKind::Sub => (grad.clone(), grad.map(|g| -g)),
                    BinaryKind::Mul => (
                        broadcast_zip(grad, r, |g, b| g * b),
                        broadcast_zip(grad, l, |g, a| g * a),
                    ),
                    BinaryKind::Div => {
                        let gl = broadcast_zip(grad, r, |g, b| g / b);
                        let go = grad.zip_map(out, |g, y| g * y)?;
                        let gr = broadcast_zip(&go, r, |gy, b| -gy / b);
                        (gl, gr)
                    }
                };
                accumulate(grads, *lhs, reduce_to(l.shape(), gl_full));
                accumulate(grads, *rhs, reduce_to(r.shape(), gr_full));
            }
            Expr::MatMul { lhs, rhs } => {
                let (l, r) = (self.value(*lhs), self.value(*rhs));
                if r.rank() == 2 {
                    // [m,k] x [k,n]; grad [m,n]
                    accumulate(grads, *lhs, mm_abt(grad, r));
                    accumulate(grads, *rhs, mm_atb(l, grad));
                } else {
                    // [m,k] x [k]; grad [m]
                    accumulate(grads, *lhs, outer(grad, r));
                    accumulate(grads, *rhs, matvec_t(l, grad));
                }
            }
            Expr::Sum { input } => {
                let x = self.value(*input);
                accumulate(grads, *input, Tensor::filled(x.shape(), grad.item()));
            }
            Expr::Mean { input } => {
                let x = self.value(*input);
                accumulate(
                    grads,
                    *input,
                    Tensor::filled(x.shape(), grad.item() / x.len() as f64),
                );
            }
            Expr::Broadcast { input, copies } => {
                let x = self.value(*input);
                let block = x.len();
                let mut acc = vec![0.0; block];
                for c in 0..*copies {
                    for (i, slot) in acc.iter_mut().enumerate() {
                        *slot += grad.data()[c * block + i];
                    }
                }
                accumulate(grads, *input, Tensor::new(x.shape().to_vec(), acc)?);
            }
            Expr::Reshape { input, .. } => {
                let x = self.value(*input);
                accumulate(
                    grads,
                    *input,
                    Tensor::new(x.shape().to_vec(), grad.data().to_vec())?,
                );
            }
            Expr::Transpose { input } => {
                accumulate(grads, *input, transpose_raw(grad));
            }
            Expr::Slice {
                input, axis, start, ..
            } => {
                let x = self.value(*input);
                let mut gx = Tensor::zeros(x.shape());
                scatter_slice(&mut gx, grad, *axis, *start);
                accumulate(grads, *input, gx);
            }
            Expr::Concat { parts, axis } => {
                let mut offset = 0;
                for part in parts {
                    let p = self.value(*part);
                    let extent = p.shape()[*axis];
                    let gp = slice_eval(grad, *axis, offset, offset + extent)?;
                    offset += extent;
                    accumulate(grads, *part, gp);
                }
            }
            Expr::Inverse { input } => {
                // d(A^-1) -> grad_A = -Y^T G Y^T with Y = A^-1 (the output).
                let yt = transpose_raw(out);
                let gy = mm(&yt, grad)?;
                let ga = mm(&gy, &yt)?.map(|v| -v);
                accumulate(grads, *input, ga);
            }
            Expr::LogDet { input } => {
                let x = self.value(*input);
                let inv = invert(x, "logdet")?;
                accumulate(grads, *input, transpose_raw(&inv).map(|v| v * grad.item()));
            }
            Expr::Clamp { input, lo, hi } => {
                let x = self.value(*input);
                let gx = grad.zip_map(x, |g, v| if v > *lo && v < *hi { g } else { 0.0 })?;
                accumulate(grads, *input, gx);
            }
            Expr::Probit { input } => {
                // d/dp Phi^-1(p) = 1 / phi(z), z the output value.
                let gx = grad.zip_map(out, |g, z| g * SQRT_2PI_F * (0.5 * z * z).exp())?;
                accumulate(grads, *input, gx);
            }
        }
        Ok(())
    }
}

fn expr_name(expr: &Expr) -> &'static str {
    match expr {
        Expr::Leaf { .. } => "leaf",
        Expr::Unary { kind, .. } => match kind {
            UnaryKind::Tanh => "tanh",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Softplus => "softplus",
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Sqrt => "sqrt",
            UnaryKind::Square => "square",
        },
        Expr::Binary { kind, .. } => match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        },
        Expr::MatMul { .. } => "matmul",
        Expr::Sum { .. } => "sum",
        Expr::Mean { .. } => "mean",
        Expr::Broadcast { .. } => "broadcast",
        Expr::Reshape { .. } => "reshape",
        Expr::Transpose { .. } => "transpose",
        Expr::Slice { .. } => "slice",
        Expr::Concat { .. } => "concat",
        Expr::Inverse { .. } => "inverse",
        Expr::LogDet { .. } => "logdet",
        Expr::Clamp { .. } => "clamp",
        Expr::Probit { .. } => "probit",
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

/// log(1 + e^x) with the stable large-x branch.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, t: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => {
            debug_assert_eq!(existing.shape(), t.shape());
            for (a, b) in existing.data_mut().iter_mut().zip(t.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(t),
    }
}

fn binary_eval(kind: BinaryKind, l: &Tensor, r: &Tensor) -> Result<Tensor, DiffError> {
    let f = |a: f64, b: f64| match kind {
        BinaryKind::Add => a + b,
        BinaryKind::Sub => a - b,
        BinaryKind::Mul => a * b,
        BinaryKind::Div => a / b,
    };
    if l.shape() == r.shape() {
        l.zip_map(r, f)
    } else if r.is_scalar() {
        let b = r.item();
        Ok(l.map(|a| f(a, b)))
    } else if l.is_scalar() {
        let a = l.item();
        Ok(r.map(|b| f(a, b)))
    } else {
        Err(DiffError::ShapeMismatch {
            op: "binary",
            detail: format!("{:?} vs {:?}", l.shape(), r.shape()),
        })
    }
}

/// Combine the (out-shaped) gradient with an operand that may be scalar.
fn broadcast_zip(grad: &Tensor, operand: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if operand.shape() == grad.shape() {
        grad.zip_map(operand, f).expect("shapes checked")
    } else {
        let b = operand.item();
        grad.map(|g| f(g, b))
    }
}

/// Sum a full gradient down to a scalar when the operand was broadcast.
fn reduce_to(shape: &[usize], grad: Tensor) -> Tensor {
    if grad.shape() == shape {
        grad
    } else {
        debug_assert!(shape.is_empty());
        Tensor::scalar(grad.data().iter().sum())
    }
}

fn matmul_eval(l: &Tensor, r: &Tensor) -> Result<Tensor, DiffError> {
    match (l.rank(), r.rank()) {
        (2, 2) => {
            if l.shape()[1] != r.shape()[0] {
                return Err(DiffError::ShapeMismatch {
                    op: "matmul",
                    detail: format!("{:?} x {:?}", l.shape(), r.shape()),
                });
            }
            mm(l, r)
        }
        (2, 1) => {
            if l.shape()[1] != r.shape()[0] {
                return Err(DiffError::ShapeMismatch {
                    op: "matmul",
                    detail: format!("{:?} x {:?}", l.shape(), r.shape()),
                });
            }
            Ok(matvec(l, r))
        }
        _ => Err(DiffError::ShapeMismatch {
            op: "matmul",
            detail: format!("unsupported ranks {:?} x {:?}", l.shape(), r.shape()),
        }),
    }
}

pub(crate) fn mm(a: &Tensor, b: &Tensor) -> Result<Tensor, DiffError> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row(i);
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = b.row(p);
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    debug_assert_eq!(k, b.shape()[0]);
    Tensor::new(vec![m, n], out)
}

/// a^T b for rank-2 a, b.
fn mm_atb(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = a.row(i);
        let brow = b.row(i);
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![k, n], out).expect("shape consistent")
}

/// a b^T for rank-2 a, b.
fn mm_abt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let k = b.shape()[0];
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..k {
            let brow = b.row(j);
            let mut s = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            out[i * k + j] = s;
        }
    }
    debug_assert_eq!(n, b.shape()[1]);
    Tensor::new(vec![m, k], out).expect("shape consistent")
}

fn matvec(a: &Tensor, v: &Tensor) -> Tensor {
    let m = a.shape()[0];
    let out = (0..m)
        .map(|i| a.row(i).iter().zip(v.data()).map(|(x, y)| x * y).sum())
        .collect();
    Tensor::from_vec(out)
}

/// a^T v for rank-2 a and rank-1 v of length rows(a).
fn matvec_t(a: &Tensor, v: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![0.0; k];
    for i in 0..m {
        let vi = v.data()[i];
        if vi == 0.0 {
            continue;
        }
        for (o, &av) in out.iter_mut().zip(a.row(i)) {
            *o += vi * av;
        }
    }
    Tensor::from_vec(out)
}

fn outer(u: &Tensor, v: &Tensor) -> Tensor {
    let (m, k) = (u.len(), v.len());
    let mut out = Vec::with_capacity(m * k);
    for &a in u.data() {
        for &b in v.data() {
            out.push(a * b);
        }
    }
    Tensor::new(vec![m, k], out).expect("shape consistent")
}

pub(crate) fn transpose_raw(x: &Tensor) -> Tensor {
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x.at2(i, j);
        }
    }
    Tensor::new(vec![c, r], out).expect("shape consistent")
}

fn slice_eval(x: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor, DiffError> {
    let bad = |detail: String| DiffError::ShapeMismatch {
        op: "slice",
        detail,
    };
    if start >= end {
        return Err(bad(format!("empty range {start}..{end}")));
    }
    match (x.rank(), axis) {
        (1, 0) => {
            if end > x.len() {
                return Err(bad(format!("{start}..{end} out of {}", x.len())));
            }
            Ok(Tensor::from_vec(x.data()[start..end].to_vec()))
        }
        (2, 0) => {
            let (r, c) = (x.shape()[0], x.shape()[1]);
            if end > r {
                return Err(bad(format!("{start}..{end} out of {r} rows")));
            }
            Tensor::new(vec![end - start, c], x.data()[start * c..end * c].to_vec())
        }
        (2, 1) => {
            let (r, c) = (x.shape()[0], x.shape()[1]);
            if end > c {
                return Err(bad(format!("{start}..{end} out of {c} cols")));
            }
            let mut out = Vec::with_capacity(r * (end - start));
            for i in 0..r {
                out.extend_from_slice(&x.row(i)[start..end]);
            }
            Tensor::new(vec![r, end - start], out)
        }
        _ => Err(bad(format!("axis {axis} on rank {}", x.rank()))),
    }
}

fn scatter_slice(gx: &mut Tensor, grad: &Tensor, axis: usize, start: usize) {
    match (gx.rank(), axis) {
        (1, 0) => {
            for (i, &g) in grad.data().iter().enumerate() {
                gx.data_mut()[start + i] += g;
            }
        }
        (2, 0) => {
            let c = gx.shape()[1];
            for (i, &g) in grad.data().iter().enumerate() {
                gx.data_mut()[start * c + i] += g;
            }
        }
        (2, 1) => {
            let (r, gc) = (gx.shape()[0], gx.shape()[1]);
            let sc = grad.shape()[1];
            for i in 0..r {
                for j in 0..sc {
                    gx.data_mut()[i * gc + start + j] += grad.at2(i, j);
                }
            }
        }
        _ => unreachable!("validated at slice construction"),
    }
}

fn concat_eval(parts: &[&Tensor], axis: usize) -> Result<Tensor, DiffError> {
    let bad = |detail: String| DiffError::ShapeMismatch {
        op: "concat",
        detail,
    };
    let first = parts.first().ok_or_else(|| bad("no parts".into()))?;
    match (first.rank(), axis) {
        (1, 0) => {
            let mut data = Vec::new();
            for p in parts {
                if p.rank() != 1 {
                    return Err(bad("mixed ranks".into()));
                }
                data.extend_from_slice(p.data());
            }
            Ok(Tensor::from_vec(data))
        }
        (2, 0) => {
            let c = first.shape()[1];
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                if p.rank() != 2 || p.shape()[1] != c {
                    return Err(bad("column counts differ".into()));
                }
                rows += p.shape()[0];
                data.extend_from_slice(p.data());
            }
            Tensor::new(vec![rows, c], data)
        }
        (2, 1) => {
            let r = first.shape()[0];
            let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
            for p in parts {
                if p.rank() != 2 || p.shape()[0] != r {
                    return Err(bad("row counts differ".into()));
                }
            }
            let mut data = Vec::with_capacity(r * total);
            for i in 0..r {
                for p in parts {
                    data.extend_from_slice(p.row(i));
                }
            }
            Tensor::new(vec![r, total], data)
        }
        _ => Err(bad(format!("axis {axis} on rank {}", first.rank()))),
    }
}

/// Gauss-Jordan inverse with partial pivoting.
pub(crate) fn invert(x: &Tensor, op: &'static str) -> Result<Tensor, DiffError> {
    if x.rank() != 2 || x.shape()[0] != x.shape()[1] {
        return Err(DiffError::ShapeMismatch {
            op: "inverse",
            detail: format!("expected square matrix, got {:?}", x.shape()),
        });
    }
    let n = x.shape()[0];
    let mut a: Vec<f64> = x.data().to_vec();
    let mut inv: Vec<f64> = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let mut pivot = col;
        for r in col + 1..n {
            if a[r * n + col].abs() > a[pivot * n + col].abs() {
                pivot = r;
            }
        }
        let pv = a[pivot * n + col];
        if pv.abs() < 1e-300 {
            return Err(DiffError::Singular(op));
        }
        if pivot != col {
            for j in 0..n {
                a.swap(col * n + j, pivot * n + j);
                inv.swap(col * n + j, pivot * n + j);
            }
        }
        let inv_pv = 1.0 / a[col * n + col];
        for j in 0..n {
            a[col * n + j] *= inv_pv;
            inv[col * n + j] *= inv_pv;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[r * n + col];
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                a[r * n + j] -= f * a[col * n + j];
                inv[r * n + j] -= f * inv[col * n + j];
            }
        }
    }
    Tensor::new(vec![n, n], inv)
}

/// log det(A) via LU with partial pivoting; requires det(A) > 0.
pub(crate) fn logdet(x: &Tensor) -> Result<f64, DiffError> {
    if x.rank() != 2 || x.shape()[0] != x.shape()[1] {
        return Err(DiffError::ShapeMismatch {
            op: "logdet",
            detail: format!("expected square matrix, got {:?}", x.shape()),
        });
    }
    let n = x.shape()[0];
    let mut a: Vec<f64> = x.data().to_vec();
    let mut sign = 1.0f64;
    let mut log_abs = 0.0f64;
    for col in 0..n {
        let mut pivot = col;
        for r in col + 1..n {
            if a[r * n + col].abs() > a[pivot * n + col].abs() {
                pivot = r;
            }
        }
        let pv = a[pivot * n + col];
        if pv.abs() < 1e-300 {
            return Err(DiffError::Singular("logdet"));
        }
        if pivot != col {
            sign = -sign;
            for j in 0..n {
                a.swap(col * n + j, pivot * n + j);
            }
        }
        let d = a[col * n + col];
        sign *= d.signum();
        log_abs += d.abs().ln();
        for r in col + 1..n {
            let f = a[r * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                a[r * n + j] -= f * a[col * n + j];
            }
        }
    }
    if sign <= 0.0 {
        return Err(DiffError::Domain {
            op: "logdet",
            detail: "determinant is not positive".into(),
        });
    }
    Ok(log_abs)
}
