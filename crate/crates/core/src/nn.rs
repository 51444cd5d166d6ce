//! Parameter containers shared by the encoder, adapters and decoder.

use ndarray::Array2;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Matrix, Tape, Var};

/// Anything that owns named parameter matrices.
pub trait Parameterized {
    fn parameters(&self) -> Vec<(String, &Matrix)>;
    fn parameters_mut(&mut self) -> Vec<(String, &mut Matrix)>;

    fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|(_, m)| m.len()).sum()
    }
}

/// SHA-256 over names, shapes and little-endian values, in name order.
pub fn parameter_hash(params: &[(String, &Matrix)]) -> String {
    let mut sorted: Vec<_> = params.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut hasher = Sha256::new();
    for (name, m) in sorted {
        hasher.update(name.as_bytes());
        hasher.update((m.nrows() as u64).to_le_bytes());
        hasher.update((m.ncols() as u64).to_le_bytes());
        for v in m.iter() {
            hasher.update(v.to_le_bytes());
        }
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Affine map `x W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Option<Matrix>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Some(Array2::zeros((1, output))),
        }
    }

    /// Uniform fan-in initialization, `U(-1/sqrt(in), 1/sqrt(in))` for both
    /// weight and bias.
    pub fn fan_in_uniform(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((input, output), |_| rng.gen_range(-bound..bound)),
            bias: Some(Array2::from_shape_fn((1, output), |_| {
                rng.gen_range(-bound..bound)
            })),
        }
    }

    /// Glorot-uniform weights and zero bias.
    pub fn xavier(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((input, output), |_| rng.gen_range(-bound..bound)),
            bias: Some(Array2::zeros((1, output))),
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = None;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        let y = x.dot(&self.weight);
        match &self.bias {
            Some(b) => y + b,
            None => y,
        }
    }

    pub fn forward(&self, tape: &mut Tape, prefix: &str, x: Var, trainable: bool) -> Var {
        let w = tape.param(&format!("{prefix}.weight"), &self.weight, trainable);
        let y = tape.matmul(x, w);
        match &self.bias {
            Some(b) => {
                let b = tape.param(&format!("{prefix}.bias"), b, trainable);
                tape.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b));
        }
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((format!("{prefix}.bias"), b));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Matrix,
    pub beta: Matrix,
}

impl LayerNorm {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: Array2::ones((1, width)),
            beta: Array2::zeros((1, width)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, prefix: &str, x: Var, trainable: bool) -> Var {
        let g = tape.param(&format!("{prefix}.gamma"), &self.gamma, trainable);
        let b = tape.param(&format!("{prefix}.beta"), &self.beta, trainable);
        tape.layer_norm(x, g, b)
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        out.push((format!("{prefix}.gamma"), &self.gamma));
        out.push((format!("{prefix}.beta"), &self.beta));
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix)>) {
        out.push((format!("{prefix}.gamma"), &mut self.gamma));
        out.push((format!("{prefix}.beta"), &mut self.beta));
    }
}
