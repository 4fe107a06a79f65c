//! Fully connected stacks with ReLU hidden layers and a linear output.

use rand::Rng;

use super::params::{Group, ParamId, ParamStore};
use super::tape::{NodeId, Tape};
use super::tensor::{sc, Scalar, Tensor};

pub struct Mlp {
    pub weights: Vec<ParamId>,
    pub biases: Vec<ParamId>,
    pub dims: Vec<usize>,
}

impl Mlp {
    /// `dims` lists layer widths input-first, e.g. [24, 64, 64, 33].
    /// Weights start Kaiming-uniform (bound sqrt(6/fan_in)), biases at zero.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        group: Group,
        dims: &[usize],
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let w = Tensor::from_fn(fan_out, fan_in, |_, _| sc(rng.gen_range(-bound..bound)));
            weights.push(store.add(&format!("{prefix}.w{l}"), group, w));
            biases.push(store.add(&format!("{prefix}.b{l}"), group, Tensor::zeros(fan_out, 1)));
        }
        Mlp {
            weights,
            biases,
            dims: dims.to_vec(),
        }
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> NodeId {
        let mut h = x;
        for l in 0..self.weights.len() {
            let w = tape.param(store, self.weights[l]);
            let b = tape.param(store, self.biases[l]);
            h = tape.affine(w, h, Some(b));
            if l + 1 < self.weights.len() {
                h = tape.relu(h);
            }
        }
        h
    }

    /// Tape-free forward pass for inference (sampling, full-view rendering).
    pub fn infer<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        let mut h = x.clone();
        for l in 0..self.weights.len() {
            let w = store.value(self.weights[l]);
            let b = store.value(self.biases[l]);
            let mut y = super::kernels::matmul(w, &h, false, false);
            for r in 0..y.rows {
                let bias = b.data[r];
                let last = l + 1 == self.weights.len();
                for e in y.row_mut(r) {
                    *e += bias;
                    if !last && *e < T::zero() {
                        *e = T::zero();
                    }
                }
            }
            h = y;
        }
        h
    }
}
