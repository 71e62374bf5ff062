//! Minimal reverse-mode differentiation over vector-valued nodes.
//!
//! Every recorded node holds a dense `f64` vector. Trainable tensors live
//! outside the tape and are referenced by [`ParamId`]; the backward pass
//! accumulates their adjoints into a [`Gradients`] buffer.

use crate::simcombine::cosine;
use crate::{Error, Result};

/// Dense row-major matrix; vectors are `n × 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}×{cols} tensor",
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `self · x`, accumulating each row left to right.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|i| {
                let mut acc = 0.0;
                for (w, v) in self.row(i).iter().zip(x) {
                    acc += w * v;
                }
                acc
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatVec(ParamId, Var),
    Add(Var, Var),
    Sum(Vec<Var>),
    Scale(Var, f64),
    /// `a·x + b` elementwise; only the slope is needed backwards.
    Affine(Var, f64),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Square(Var),
    Concat(Vec<Var>),
    Cosine(Var, Var),
}

struct Node {
    op: Op,
    value: Vec<f64>,
}

pub(crate) fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// Records one forward computation against a fixed parameter set.
pub struct Tape<'p> {
    params: &'p [Tensor],
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Tensor]) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn param_tensor(&self, p: ParamId) -> &'p Tensor {
        &self.params[p.0]
    }

    pub fn input(&mut self, value: Vec<f64>) -> Var {
        self.push(Op::Input, value)
    }

    /// A parameter tensor used directly as a vector (biases).
    pub fn param(&mut self, p: ParamId) -> Var {
        let value = self.param_tensor(p).data.clone();
        self.push(Op::Param(p), value)
    }

    pub fn matvec(&mut self, p: ParamId, x: Var) -> Var {
        let w = self.param_tensor(p);
        assert_eq!(w.cols, self.value(x).len(), "matvec shape");
        let value = w.matvec(self.value(x));
        self.push(Op::MatVec(p, x), value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        self.push(Op::Add(a, b), value)
    }

    /// Left-to-right sum of equally sized vectors; `vars` must be non-empty.
    pub fn sum(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "sum of nothing");
        if vars.len() == 1 {
            return vars[0];
        }
        let mut value = self.value(vars[0]).to_vec();
        for &v in &vars[1..] {
            for (acc, x) in value.iter_mut().zip(self.value(v)) {
                *acc += x;
            }
        }
        self.push(Op::Sum(vars.to_vec()), value)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).iter().map(|v| v * c).collect();
        self.push(Op::Scale(x, c), value)
    }

    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        let value = self.value(x).iter().map(|v| a * v + b).collect();
        self.push(Op::Affine(x, a), value)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self
            .value(x)
            .iter()
            .map(|&v| leaky_relu(v, slope))
            .collect();
        self.push(Op::LeakyRelu(x, slope), value)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|v| v.tanh()).collect();
        self.push(Op::Tanh(x), value)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|v| v * v).collect();
        self.push(Op::Square(x), value)
    }

    pub fn concat(&mut self, vars: &[Var]) -> Var {
        let value = vars
            .iter()
            .flat_map(|&v| self.value(v).iter().copied())
            .collect();
        self.push(Op::Concat(vars.to_vec()), value)
    }

    /// Scalar cosine similarity; 0 when either side is the zero vector.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let c = cosine(self.value(a), self.value(b)).expect("cosine operands of equal length");
        self.push(Op::Cosine(a, b), vec![c])
    }

    /// Reverse pass from the scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Tape(
                "loss variable is not on this tape; run the forward pass first".into(),
            ));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Tape(format!(
                "loss must be scalar, has {} entries",
                self.nodes[loss.0].value.len()
            )));
        }
        let mut grads = Gradients::zeros_like(self.params);
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        fn acc(adj: &mut [Option<Vec<f64>>], v: Var, g: impl Iterator<Item = f64>) {
            match &mut adj[v.0] {
                Some(a) => a.iter_mut().zip(g).for_each(|(x, y)| *x += y),
                slot => *slot = Some(g.collect()),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(p) => {
                    grads.tensors[p.0]
                        .data
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(x, y)| *x += y);
                }
                Op::MatVec(p, x) => {
                    let w = self.param_tensor(*p);
                    let xv = &self.nodes[x.0].value;
                    let gw = &mut grads.tensors[p.0].data;
                    let mut gx = vec![0.0; w.cols];
                    for (r, &gr) in g.iter().enumerate() {
                        if gr == 0.0 {
                            continue;
                        }
                        let row = w.row(r);
                        let grow = &mut gw[r * w.cols..(r + 1) * w.cols];
                        for c in 0..w.cols {
                            grow[c] += gr * xv[c];
                            gx[c] += row[c] * gr;
                        }
                    }
                    acc(&mut adj, *x, gx.into_iter());
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g.iter().copied());
                    acc(&mut adj, *b, g.iter().copied());
                }
                Op::Sum(vars) => {
                    for &v in vars {
                        acc(&mut adj, v, g.iter().copied());
                    }
                }
                Op::Scale(x, c) => acc(&mut adj, *x, g.iter().map(|v| v * c)),
                Op::Affine(x, a) => acc(&mut adj, *x, g.iter().map(|v| v * a)),
                Op::LeakyRelu(x, slope) => {
                    let xv = &self.nodes[x.0].value;
                    let d = g
                        .iter()
                        .zip(xv)
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { gv * slope });
                    acc(&mut adj, *x, d);
                }
                Op::Tanh(x) => {
                    let d = g.iter().zip(&node.value).map(|(gv, y)| gv * (1.0 - y * y));
                    acc(&mut adj, *x, d);
                }
                Op::Square(x) => {
                    let xv = &self.nodes[x.0].value;
                    acc(&mut adj, *x, g.iter().zip(xv).map(|(gv, v)| 2.0 * gv * v));
                }
                Op::Concat(vars) => {
                    let mut off = 0;
                    for &v in vars {
                        let n = self.nodes[v.0].value.len();
                        acc(&mut adj, v, g[off..off + n].iter().copied());
                        off += n;
                    }
                }
                Op::Cosine(a, b) => {
                    let (u, v) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if nu > 0.0 && nv > 0.0 {
                        let c = node.value[0];
                        let gc = g[0];
                        let inv = 1.0 / (nu * nv);
                        let du: Vec<f64> = u
                            .iter()
                            .zip(v)
                            .map(|(ui, vi)| gc * (vi * inv - c * ui / (nu * nu)))
                            .collect();
                        let dv: Vec<f64> = u
                            .iter()
                            .zip(v)
                            .map(|(ui, vi)| gc * (ui * inv - c * vi / (nv * nv)))
                            .collect();
                        acc(&mut adj, *a, du.into_iter());
                        acc(&mut adj, *b, dv.into_iter());
                    }
                }
            }
        }
        Ok(grads)
    }
}

/// Adjoints of every parameter tensor, same shapes as the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(params: &[Tensor]) -> Self {
        Gradients {
            tensors: params
                .iter()
                .map(|t| Tensor::zeros(t.rows, t.cols))
                .collect(),
        }
    }

    pub fn get(&self, p: ParamId) -> &Tensor {
        &self.tensors[p.0]
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|x| *x *= c);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tanh_chain_derivative() {
        // y = tanh(w·x) at x = 1, w = 0 → dy/dw = 1
        let params = vec![Tensor::zeros(1, 1)];
        let mut tape = Tape::new(&params);
        let x = tape.input(vec![1.0]);
        let wx = tape.matvec(ParamId(0), x);
        let y = tape.tanh(wx);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(ParamId(0)).data, [1.0]);
    }

    #[test]
    fn unused_parameter_has_zero_gradient() {
        let params = vec![Tensor::identity(2), Tensor::identity(2)];
        let mut tape = Tape::new(&params);
        let x = tape.input(vec![0.3, -0.2]);
        let y = tape.matvec(ParamId(0), x);
        let s = tape.square(y);
        let one = tape.input(vec![0.5, 0.5]);
        let loss = tape.cosine(s, one);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(ParamId(1)).data, [0.0; 4]);
        assert!(g.get(ParamId(0)).data.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn backward_without_forward_is_error() {
        let params = vec![Tensor::zeros(1, 1)];
        let mut other = Tape::new(&params);
        let x = other.input(vec![1.0]);
        let loss = other.tanh(x);
        let empty = Tape::new(&params);
        assert!(matches!(empty.backward(loss), Err(Error::Tape(_))));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let params: Vec<Tensor> = vec![];
        let mut tape = Tape::new(&params);
        let x = tape.input(vec![1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(Error::Tape(_))));
    }

    #[test]
    fn cosine_gradient_matches_finite_difference() {
        let params = vec![Tensor::from_vec(3, 1, vec![0.4, -1.2, 0.7]).unwrap()];
        let other = [0.1, 0.9, -0.3];
        let loss_at = |params: &[Tensor]| {
            let mut tape = Tape::new(params);
            let a = tape.param(ParamId(0));
            let b = tape.input(other.to_vec());
            let c = tape.cosine(a, b);
            let sq = tape.affine(c, 1.0, -1.0);
            let l = tape.square(sq);
            (tape.scalar(l), tape.backward(l).unwrap())
        };
        let (_, g) = loss_at(&params);
        for k in 0..3 {
            let mut p = params.clone();
            p[0].data[k] += 1e-6;
            let (lp, _) = loss_at(&p);
            p[0].data[k] -= 2e-6;
            let (lm, _) = loss_at(&p);
            let num = (lp - lm) / 2e-6;
            assert!(
                (num - g.tensors[0].data[k]).abs() < 1e-7,
                "{k}: {num} vs {}",
                g.tensors[0].data[k]
            );
        }
    }
}
