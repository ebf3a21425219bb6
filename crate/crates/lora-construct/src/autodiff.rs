//! Reverse-mode differentiation over a fixed set of matrix primitives.
//!
//! Every value is a matrix; scalars are 1×1. Nodes are appended in evaluation
//! order, so walking the tape backwards is a valid reverse topological order.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::matrix::{softmax_columns, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    Transpose,
    AddBias,
    Relu,
    SoftmaxColumns,
    Mse,
}

impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "matmul" => Primitive::MatMul,
            "add" => Primitive::Add,
            "sub" => Primitive::Sub,
            "transpose" => Primitive::Transpose,
            "add_bias" => Primitive::AddBias,
            "relu" => Primitive::Relu,
            "softmax_columns" => Primitive::SoftmaxColumns,
            "mse" => Primitive::Mse,
            other => return Err(Error::InvalidArgument(format!("unsupported primitive `{other}`"))),
        })
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    AddBias(Var, Var),
    Relu(Var),
    SoftmaxColumns(Var),
    Mse(Var, Var),
    CrossEntropy(Var, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    adj: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Zero matrix of the right shape when `v` does not reach the loss.
    pub fn get(&self, tape: &Tape, v: Var) -> Matrix {
        match &self.adj[v.0] {
            Some(g) => g.clone(),
            None => {
                let val = tape.value(v);
                Matrix::zeros(val.nrows(), val.ncols())
            }
        }
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => *acc += g,
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, m: Matrix) -> Var {
        self.push(Op::Leaf, m)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[(0, 0)]
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Applies a primitive by name-resolved tag; binary primitives take two inputs.
    pub fn apply(&mut self, p: Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = match p {
            Primitive::Transpose | Primitive::Relu | Primitive::SoftmaxColumns => 1,
            _ => 2,
        };
        if inputs.len() != arity {
            return Err(Error::InvalidArgument(format!("{p:?} takes {arity} inputs, got {}", inputs.len())));
        }
        match p {
            Primitive::MatMul => self.matmul(inputs[0], inputs[1]),
            Primitive::Add => self.add(inputs[0], inputs[1]),
            Primitive::Sub => self.sub(inputs[0], inputs[1]),
            Primitive::Transpose => Ok(self.transpose(inputs[0])),
            Primitive::AddBias => self.add_bias(inputs[0], inputs[1]),
            Primitive::Relu => Ok(self.relu(inputs[0])),
            Primitive::SoftmaxColumns => Ok(self.softmax_columns(inputs[0])),
            Primitive::Mse => self.mse(inputs[0], inputs[1]),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((_, ac), (br, _)) = (self.shape(a), self.shape(b));
        if ac != br {
            return Err(Error::dims("matmul", format!("{:?} x {:?}", self.shape(a), self.shape(b))));
        }
        let v = self.value(a) * self.value(b);
        Ok(self.push(Op::MatMul(a, b), v))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dims(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a) + self.value(b);
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a) - self.value(b);
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        self.push(Op::Scale(a, s), v)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    /// Adds the column `bias` (D×1) to every column of `m`.
    pub fn add_bias(&mut self, m: Var, bias: Var) -> Result<Var> {
        let ((mr, _), (br, bc)) = (self.shape(m), self.shape(bias));
        if bc != 1 || br != mr {
            return Err(Error::dims("add_bias", format!("{:?} + {:?}", self.shape(m), self.shape(bias))));
        }
        let mut v = self.value(m).clone();
        let b = self.value(bias).column(0).into_owned();
        for mut col in v.column_iter_mut() {
            col += &b;
        }
        Ok(self.push(Op::AddBias(m, bias), v))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn softmax_columns(&mut self, a: Var) -> Var {
        let v = softmax_columns(self.value(a));
        self.push(Op::SoftmaxColumns(a), v)
    }

    /// Mean of squared entrywise differences, as a 1×1 node.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse", pred, target)?;
        let d = self.value(pred) - self.value(target);
        let v = Matrix::from_element(1, 1, d.norm_squared() / d.len() as f64);
        Ok(self.push(Op::Mse(pred, target), v))
    }

    /// Mean over columns of `-log softmax(column)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if labels.len() != c || labels.iter().any(|&l| l >= r) {
            return Err(Error::dims("cross_entropy", format!("{c} columns of {r} classes, labels {labels:?}")));
        }
        let x = self.value(logits);
        let mut total = 0.0;
        for (j, &y) in labels.iter().enumerate() {
            let col = x.column(j);
            let mx = col.max();
            let lse = mx + col.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - col[y];
        }
        let v = Matrix::from_element(1, 1, total / c as f64);
        Ok(self.push(Op::CrossEntropy(logits, labels), v))
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::dims("backward", format!("loss must be 1x1, got {:?}", self.shape(loss))));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Matrix::from_element(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = &g * self.value(*b).transpose();
                    let gb = self.value(*a).transpose() * &g;
                    accumulate(&mut adj[a.0], ga);
                    accumulate(&mut adj[b.0], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj[a.0], g.clone());
                    accumulate(&mut adj[b.0], g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj[a.0], g.clone());
                    accumulate(&mut adj[b.0], -&g);
                }
                Op::Scale(a, s) => accumulate(&mut adj[a.0], &g * *s),
                Op::Transpose(a) => accumulate(&mut adj[a.0], g.transpose()),
                Op::AddBias(m, b) => {
                    let gb = Matrix::from_fn(g.nrows(), 1, |r, _| g.row(r).sum());
                    accumulate(&mut adj[m.0], g.clone());
                    accumulate(&mut adj[b.0], gb);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let ga = g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                    accumulate(&mut adj[a.0], ga);
                }
                Op::SoftmaxColumns(a) => {
                    let y = &node.value;
                    let mut ga = g.component_mul(y);
                    for j in 0..y.ncols() {
                        let s = ga.column(j).sum();
                        for r in 0..y.nrows() {
                            ga[(r, j)] -= y[(r, j)] * s;
                        }
                    }
                    accumulate(&mut adj[a.0], ga);
                }
                Op::Mse(p, t) => {
                    let d = self.value(*p) - self.value(*t);
                    let gp = d * (2.0 * g[(0, 0)] / node_len(self.value(*p)));
                    accumulate(&mut adj[t.0], -&gp);
                    accumulate(&mut adj[p.0], gp);
                }
                Op::CrossEntropy(x, labels) => {
                    let mut gx = softmax_columns(self.value(*x));
                    for (j, &y) in labels.iter().enumerate() {
                        gx[(y, j)] -= 1.0;
                    }
                    gx *= g[(0, 0)] / labels.len() as f64;
                    accumulate(&mut adj[x.0], gx);
                }
            }
            adj[i] = Some(g);
        }
        Ok(Gradients { adj })
    }
}

fn node_len(m: &Matrix) -> f64 {
    m.len() as f64
}
