//! Small dense networks with hand-written backpropagation, generic over the
//! float width so gradient tests can run the same arithmetic in f64.

use crate::matrix::Matrix;
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Fully-connected layer; `w` is `(out_dim x in_dim)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<F> {
    pub w: Matrix<F>,
    pub b: Vec<F>,
}

impl<F: Float> Dense<F> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Dense {
            w: Matrix::zeros(out_dim, in_dim),
            b: vec![F::zero(); out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    /// z = W x + b
    pub fn affine(&self, x: &[F]) -> Vec<F> {
        debug_assert_eq!(x.len(), self.in_dim());
        let mut z = self.b.clone();
        for (o, zo) in z.iter_mut().enumerate() {
            let row = self.w.row(o);
            let mut acc = F::zero();
            for (wi, xi) in row.iter().zip(x.iter()) {
                acc = acc + *wi * *xi;
            }
            *zo = *zo + acc;
        }
        z
    }

    pub fn cast<G: Float>(&self) -> Dense<G> {
        Dense {
            w: self.w.cast(),
            b: self
                .b
                .iter()
                .map(|&v| G::from(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }
}

/// Hidden layers with tanh activations followed by a linear output layer.
/// The caller applies its own output nonlinearity (sigmoid or softmax).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<F> {
    pub hidden: Vec<Dense<F>>,
    pub out: Dense<F>,
}

/// Per-instance activations retained for the backward pass: the input, each
/// hidden layer's tanh output, and the linear output.
pub struct MlpTrace<F> {
    pub input: Vec<F>,
    pub hidden: Vec<Vec<F>>,
    pub output: Vec<F>,
}

/// Gradient accumulators with the same shapes as the network.
#[derive(Debug, Clone)]
pub struct MlpGrads<F> {
    pub hidden: Vec<Dense<F>>,
    pub out: Dense<F>,
}

impl<F: Float> Mlp<F> {
    pub fn new_random<R: Rng>(
        in_dim: usize,
        hidden_widths: &[usize],
        out_dim: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite");
        let mut dims = vec![in_dim];
        dims.extend_from_slice(hidden_widths);
        let mut hidden = Vec::with_capacity(hidden_widths.len());
        for w in dims.windows(2) {
            hidden.push(random_dense(w[0], w[1], &normal, rng));
        }
        let out = random_dense(*dims.last().unwrap(), out_dim, &normal, rng);
        Mlp { hidden, out }
    }

    pub fn zeros_like(&self) -> MlpGrads<F> {
        MlpGrads {
            hidden: self
                .hidden
                .iter()
                .map(|l| Dense::zeros(l.in_dim(), l.out_dim()))
                .collect(),
            out: Dense::zeros(self.out.in_dim(), self.out.out_dim()),
        }
    }

    pub fn forward(&self, input: &[F]) -> MlpTrace<F> {
        let mut hidden = Vec::with_capacity(self.hidden.len());
        let mut x = input.to_vec();
        for layer in &self.hidden {
            let h: Vec<F> = layer.affine(&x).into_iter().map(|z| z.tanh()).collect();
            hidden.push(h.clone());
            x = h;
        }
        let output = self.out.affine(&x);
        MlpTrace {
            input: input.to_vec(),
            hidden,
            output,
        }
    }

    /// Accumulate parameter gradients for one instance and return the
    /// gradient with respect to the input. `d_output` is the loss gradient at
    /// the linear output.
    pub fn backward(&self, trace: &MlpTrace<F>, d_output: &[F], grads: &mut MlpGrads<F>) -> Vec<F> {
        let last_h = trace.hidden.last().unwrap_or(&trace.input);
        let mut d_h = accumulate_dense(&self.out, &mut grads.out, last_h, d_output);
        for l in (0..self.hidden.len()).rev() {
            // Through tanh: dz = dh * (1 - h^2).
            let h = &trace.hidden[l];
            let dz: Vec<F> = d_h
                .iter()
                .zip(h.iter())
                .map(|(&dh, &hv)| dh * (F::one() - hv * hv))
                .collect();
            let below = if l == 0 { &trace.input } else { &trace.hidden[l - 1] };
            d_h = accumulate_dense(&self.hidden[l], &mut grads.hidden[l], below, &dz);
        }
        d_h
    }

    pub fn cast<G: Float>(&self) -> Mlp<G> {
        Mlp {
            hidden: self.hidden.iter().map(|l| l.cast()).collect(),
            out: self.out.cast(),
        }
    }

    pub fn tensors(&self) -> Vec<&[F]> {
        let mut out = Vec::new();
        for l in &self.hidden {
            out.push(l.w.data());
            out.push(l.b.as_slice());
        }
        out.push(self.out.w.data());
        out.push(self.out.b.as_slice());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        let mut out = Vec::new();
        for l in &mut self.hidden {
            out.push(l.w.data_mut());
            out.push(l.b.as_mut_slice());
        }
        out.push(self.out.w.data_mut());
        out.push(self.out.b.as_mut_slice());
        out
    }
}

impl<F: Float> MlpGrads<F> {
    pub fn tensors(&self) -> Vec<&[F]> {
        let mut out = Vec::new();
        for l in &self.hidden {
            out.push(l.w.data());
            out.push(l.b.as_slice());
        }
        out.push(self.out.w.data());
        out.push(self.out.b.as_slice());
        out
    }
}

fn random_dense<F: Float, R: Rng>(
    in_dim: usize,
    out_dim: usize,
    normal: &Normal<f64>,
    rng: &mut R,
) -> Dense<F> {
    let mut d = Dense::zeros(in_dim, out_dim);
    for v in d.w.data_mut() {
        *v = F::from(normal.sample(rng)).unwrap();
    }
    // Biases start at zero.
    d
}

/// dW += dz * x^T, db += dz; returns dx = W^T dz.
fn accumulate_dense<F: Float>(
    layer: &Dense<F>,
    grads: &mut Dense<F>,
    x: &[F],
    dz: &[F],
) -> Vec<F> {
    let mut dx = vec![F::zero(); layer.in_dim()];
    for (o, &dzo) in dz.iter().enumerate() {
        grads.b[o] = grads.b[o] + dzo;
        let grow = grads.w.row_mut(o);
        let wrow = layer.w.row(o);
        for i in 0..x.len() {
            grow[i] = grow[i] + dzo * x[i];
            dx[i] = dx[i] + wrow[i] * dzo;
        }
    }
    dx
}

pub fn sigmoid<F: Float>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// ln(1 + e^x) computed without overflow.
pub fn softplus<F: Float>(x: F) -> F {
    if x > F::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn softmax<F: Float>(z: &[F]) -> Vec<F> {
    let max = z.iter().cloned().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum = exps.iter().fold(F::zero(), |a, &b| a + b);
    exps.into_iter().map(|e| e / sum).collect()
}

/// Pull the gradient through a softmax: given y = softmax(z) and dL/dy,
/// dL/dz_i = y_i * (dy_i - sum_j dy_j y_j).
pub fn softmax_backward<F: Float>(y: &[F], dy: &[F]) -> Vec<F> {
    let dot = y
        .iter()
        .zip(dy.iter())
        .fold(F::zero(), |a, (&yi, &di)| a + yi * di);
    y.iter()
        .zip(dy.iter())
        .map(|(&yi, &di)| yi * (di - dot))
        .collect()
}
