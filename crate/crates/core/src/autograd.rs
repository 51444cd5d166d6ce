//! Reverse-mode differentiation over dense row-major matrices.
//!
//! Every value on a [`Tape`] is a 2-D `f64` matrix. Token grids are stored as
//! `[tokens, channels]` with tokens in row-major grid order, which is enough to
//! express the encoder, adapters and decoder without a general N-d tensor type.
//!
//! Nodes that do not (transitively) depend on a gradient-requiring leaf are
//! never visited during the backward pass, so frozen weights cost nothing
//! beyond their forward use.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    SpaceToDepth {
        x: Var,
        h: usize,
        w: usize,
    },
    DepthToSpace {
        x: Var,
        h: usize,
        w: usize,
    },
    Upsample {
        x: Var,
        h: usize,
        w: usize,
        factor: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation so that it can be differentiated.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    named: HashMap<String, Var>,
    trainable: Vec<(String, Var)>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Exact GELU, `x * Phi(x)` with the Gaussian CDF.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu_derivative(x: f64) -> f64 {
    normal_cdf(x) + x * (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
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

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is wanted but which is not a named parameter.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A named parameter leaf. Repeated requests for the same name return the
    /// same node, so a parameter used in several places accumulates one
    /// gradient.
    pub fn param(&mut self, name: &str, value: &Matrix, trainable: bool) -> Var {
        if let Some(&v) = self.named.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, trainable);
        self.named.insert(name.to_string(), v);
        if trainable {
            self.trainable.push((name.to_string(), v));
        }
        v
    }

    /// Named trainable leaves, in first-use order.
    pub fn trainable_vars(&self) -> &[(String, Var)] {
        &self.trainable
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.nrows(), "matmul inner dimensions");
        let out = va.dot(vb);
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dim(), vb.dim(), "add shapes");
        let out = va + vb;
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    /// `x + bias` with `bias` of shape `[1, cols]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(bias));
        assert_eq!(vb.nrows(), 1, "bias must be a row vector");
        assert_eq!(vx.ncols(), vb.ncols(), "bias width");
        let out = vx + vb;
        let rg = self.any_grad(&[x, bias]);
        self.push(out, Op::AddRow(x, bias), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x) * c;
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// `x * s` where `s` is a `[1, 1]` node.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        let vs = self.value(s);
        assert_eq!(vs.dim(), (1, 1), "scale_by expects a scalar node");
        let c = vs[[0, 0]];
        let out = self.value(x) * c;
        let rg = self.any_grad(&[x, s]);
        self.push(out, Op::ScaleBy(x, s), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(gelu);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for mut row in out.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - m).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let rg = self.any_grad(&[x]);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    /// Per-row normalization with affine `gamma`, `beta` of shape `[1, cols]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let vx = self.value(x);
        let n = vx.ncols() as f64;
        let mut xhat = vx.clone();
        let mut inv_std = Vec::with_capacity(vx.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.fold(0.0, |a, &v| a + (v - mean) * (v - mean)) / n;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.any_grad(&[x, gamma, beta]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let out = self.value(x).slice(s![.., start..end]).to_owned();
        let rg = self.any_grad(&[x]);
        self.push(out, Op::SliceCols(x, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols row counts");
        let rg = self.any_grad(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).t().to_owned();
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Transpose(x), rg)
    }

    /// Groups each 2x2 neighbourhood of an `h x w` token grid into one token
    /// with 4x the channels (order: top-left, top-right, bottom-left,
    /// bottom-right).
    pub fn space_to_depth(&mut self, x: Var, h: usize, w: usize) -> Var {
        let out = space_to_depth(self.value(x), h, w);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::SpaceToDepth { x, h, w }, rg)
    }

    /// Inverse of [`Tape::space_to_depth`]: an `h x w` grid with `4c`
    /// channels becomes a `2h x 2w` grid with `c` channels.
    pub fn depth_to_space(&mut self, x: Var, h: usize, w: usize) -> Var {
        let out = depth_to_space(self.value(x), h, w);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::DepthToSpace { x, h, w }, rg)
    }

    pub fn upsample_nearest(&mut self, x: Var, h: usize, w: usize, factor: usize) -> Var {
        let out = upsample_nearest(self.value(x), h, w, factor);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Upsample { x, h, w, factor }, rg)
    }

    /// Propagates the seed gradients back through the tape.
    pub fn backward(&self, seeds: &[(Var, Matrix)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            if g.dim() != self.value(*v).dim() {
                return Err(Error::Shape(format!(
                    "seed gradient {:?} for value {:?}",
                    g.dim(),
                    self.value(*v).dim()
                )));
            }
            accumulate(&mut grads, *v, g.clone());
        }
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let rg = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if rg(*a) {
                        accumulate(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if rg(*b) {
                        accumulate(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    if rg(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if rg(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                }
                Op::AddRow(x, b) => {
                    if rg(*b) {
                        accumulate(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if rg(*x) {
                        accumulate(&mut grads, *x, g.clone());
                    }
                }
                Op::Scale(x, c) => {
                    if rg(*x) {
                        accumulate(&mut grads, *x, &g * *c);
                    }
                }
                Op::ScaleBy(x, s) => {
                    if rg(*s) {
                        let ds = (&g * self.value(*x)).sum();
                        accumulate(&mut grads, *s, Array2::from_elem((1, 1), ds));
                    }
                    if rg(*x) {
                        let c = self.value(*s)[[0, 0]];
                        accumulate(&mut grads, *x, &g * c);
                    }
                }
                Op::Gelu(x) => {
                    if rg(*x) {
                        let mut dx = self.value(*x).mapv(gelu_derivative);
                        dx *= &g;
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::SoftmaxRows(x) => {
                    if rg(*x) {
                        let y = &node.value;
                        let mut dx = &g * y;
                        for (mut row, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                            let dot = row.sum();
                            Zip::from(&mut row)
                                .and(&yrow)
                                .for_each(|d, &yv| *d -= yv * dot);
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    if rg(*gamma) {
                        let dg = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *gamma, dg);
                    }
                    if rg(*beta) {
                        accumulate(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if rg(*x) {
                        let dxhat = &g * self.value(*gamma);
                        let n = dxhat.ncols() as f64;
                        let mut dx = Array2::zeros(dxhat.dim());
                        for (r, is) in inv_std.iter().enumerate() {
                            let dr = dxhat.row(r);
                            let xr = xhat.row(r);
                            let sum_d = dr.sum();
                            let sum_dx = dr.dot(&xr);
                            let mut out = dx.row_mut(r);
                            for c in 0..dr.len() {
                                out[c] = is / n * (n * dr[c] - sum_d - xr[c] * sum_dx);
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::SliceCols(x, start) => {
                    if rg(*x) {
                        let src = self.value(*x);
                        let mut dx = Array2::zeros(src.dim());
                        dx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        if rg(*p) {
                            accumulate(
                                &mut grads,
                                *p,
                                g.slice(s![.., offset..offset + w]).to_owned(),
                            );
                        }
                        offset += w;
                    }
                }
                Op::Transpose(x) => {
                    if rg(*x) {
                        accumulate(&mut grads, *x, g.t().to_owned());
                    }
                }
                Op::SpaceToDepth { x, h, w } => {
                    if rg(*x) {
                        accumulate(&mut grads, *x, depth_to_space(&g, h / 2, w / 2));
                    }
                }
                Op::DepthToSpace { x, h, w } => {
                    if rg(*x) {
                        accumulate(&mut grads, *x, space_to_depth(&g, 2 * h, 2 * w));
                    }
                }
                Op::Upsample { x, h, w, factor } => {
                    if rg(*x) {
                        accumulate(&mut grads, *x, downsample_sum(&g, *h, *w, *factor));
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of the seeded outputs with respect to every leaf that required
/// them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of the tape's trainable parameters keyed by name. Parameters
    /// the seeds do not reach get a zero gradient.
    pub fn named(&self, tape: &Tape) -> Vec<(String, Matrix)> {
        tape.trainable_vars()
            .iter()
            .map(|(name, v)| {
                let g = self
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Array2::zeros(tape.value(*v).dim()));
                (name.clone(), g)
            })
            .collect()
    }
}

pub(crate) fn space_to_depth(x: &Matrix, h: usize, w: usize) -> Matrix {
    assert_eq!(x.nrows(), h * w, "token count vs grid");
    assert!(h % 2 == 0 && w % 2 == 0, "grid must be even");
    let c = x.ncols();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array2::zeros((oh * ow, 4 * c));
    for i in 0..oh {
        for j in 0..ow {
            let dst = i * ow + j;
            for (k, (di, dj)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                let src = (2 * i + di) * w + 2 * j + dj;
                out.slice_mut(s![dst, k * c..(k + 1) * c])
                    .assign(&x.row(src));
            }
        }
    }
    out
}

pub(crate) fn depth_to_space(x: &Matrix, h: usize, w: usize) -> Matrix {
    assert_eq!(x.nrows(), h * w, "token count vs grid");
    assert_eq!(x.ncols() % 4, 0, "channels must be divisible by 4");
    let c = x.ncols() / 4;
    let ow = 2 * w;
    let mut out = Array2::zeros((4 * h * w, c));
    for i in 0..h {
        for j in 0..w {
            let src = i * w + j;
            for (k, (di, dj)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                let dst = (2 * i + di) * ow + 2 * j + dj;
                out.row_mut(dst)
                    .assign(&x.slice(s![src, k * c..(k + 1) * c]));
            }
        }
    }
    out
}

pub(crate) fn upsample_nearest(x: &Matrix, h: usize, w: usize, factor: usize) -> Matrix {
    assert_eq!(x.nrows(), h * w, "token count vs grid");
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Array2::zeros((oh * ow, x.ncols()));
    for i in 0..oh {
        for j in 0..ow {
            out.row_mut(i * ow + j)
                .assign(&x.row((i / factor) * w + j / factor));
        }
    }
    out
}

fn downsample_sum(g: &Matrix, h: usize, w: usize, factor: usize) -> Matrix {
    let ow = w * factor;
    let mut out = Array2::zeros((h * w, g.ncols()));
    for i in 0..h * factor {
        for j in 0..ow {
            let mut dst = out.row_mut((i / factor) * w + j / factor);
            dst += &g.row(i * ow + j);
        }
    }
    out
}

/// Average pooling of an `h x w` token grid by `factor` in each direction.
pub fn average_pool(x: &Matrix, h: usize, w: usize, factor: usize) -> Matrix {
    let mut out = downsample_sum(x, h / factor, w / factor, factor);
    out /= (factor * factor) as f64;
    out
}
