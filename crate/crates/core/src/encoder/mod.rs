//! Trainable feature extractor: a tanh MLP whose output rows are L2-normalized.

mod checkpoint;
mod optim;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint, CheckpointError};
pub use optim::{warmup_lr, Adam, LrSchedule, OptimError};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::numerics::{Matrix, NumericsError, Tape, Vector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("input dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("encoder needs at least an input and an output width, all >= 1")]
    BadWidths,
    #[error("layer {0} has an all-zero weight matrix")]
    ZeroInit(usize),
    #[error("layer {layer} tensor has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { layer: usize, expected: (usize, usize), found: (usize, usize) },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Weights (`in x out`) and biases (`1 x out`) for each layer, stored flat as
/// `[W0, b0, W1, b1, ...]` so optimizers can walk them uniformly.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    widths: Vec<usize>,
    tensors: Vec<Matrix>,
}

/// Parameter leaves of one forward pass.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<crate::numerics::Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[crate::numerics::Var] {
        &self.vars
    }
}

impl EncoderParams {
    /// Uniform `±1/sqrt(fan_in)` initialization for weights and biases.
    pub fn init(widths: &[usize], seed: u64) -> Result<Self, EncoderError> {
        check_widths(widths)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::with_capacity(2 * (widths.len() - 1));
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
            let b = (0..fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
            tensors.push(Matrix::from_vec(fan_in, fan_out, w).expect("in x out"));
            tensors.push(Matrix::from_vec(1, fan_out, b).expect("1 x out"));
        }
        Self::from_tensors(widths, tensors)
    }

    /// Rejects mismatched shapes and all-zero weight matrices, which would
    /// make every feature the zero vector.
    pub fn from_tensors(widths: &[usize], tensors: Vec<Matrix>) -> Result<Self, EncoderError> {
        check_widths(widths)?;
        if tensors.len() != 2 * (widths.len() - 1) {
            return Err(EncoderError::BadWidths);
        }
        for (layer, pair) in widths.windows(2).enumerate() {
            let (w, b) = (&tensors[2 * layer], &tensors[2 * layer + 1]);
            if w.shape() != (pair[0], pair[1]) {
                return Err(EncoderError::ShapeMismatch { layer, expected: (pair[0], pair[1]), found: w.shape() });
            }
            if b.shape() != (1, pair[1]) {
                return Err(EncoderError::ShapeMismatch { layer, expected: (1, pair[1]), found: b.shape() });
            }
            if w.as_slice().iter().all(|v| *v == 0.0) {
                return Err(EncoderError::ZeroInit(layer));
            }
            if !w.is_finite() || !b.is_finite() {
                return Err(NumericsError::NonFinite("encoder parameters").into());
            }
        }
        Ok(EncoderParams { widths: widths.to_vec(), tensors })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("checked non-empty")
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix] {
        &mut self.tensors
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    /// Records every weight and bias as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams { vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect() }
    }

    /// Forward pass for an `n x D` input node; returns `n x F` unit rows.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        input: crate::numerics::Var,
    ) -> Result<crate::numerics::Var, EncoderError> {
        let cols = tape.value(input).cols();
        if cols != self.input_dim() {
            return Err(EncoderError::DimensionMismatch { expected: self.input_dim(), found: cols });
        }
        let mut h = input;
        for layer in 0..self.num_layers() {
            let z = tape.matmul(h, bound.vars[2 * layer]);
            let z = tape.add_row(z, bound.vars[2 * layer + 1]);
            h = if layer + 1 < self.num_layers() { tape.tanh(z) } else { z };
        }
        Ok(tape.normalize_rows(h)?)
    }

    /// Encodes each row of `inputs`.
    pub fn encode_batch(&self, inputs: &Matrix) -> Result<Matrix, EncoderError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.leaf(inputs.clone());
        let out = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(out).clone())
    }

    pub fn encode(&self, x: &Vector) -> Result<Vector, EncoderError> {
        if x.dim() != self.input_dim() {
            return Err(EncoderError::DimensionMismatch { expected: self.input_dim(), found: x.dim() });
        }
        let m = Matrix::from_vec(1, x.dim(), x.as_slice().to_vec())?;
        Ok(Vector::new(self.encode_batch(&m)?.into_vec())?)
    }
}

fn check_widths(widths: &[usize]) -> Result<(), EncoderError> {
    if widths.len() < 2 || widths.contains(&0) {
        return Err(EncoderError::BadWidths);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn output_shape_and_unit_norm() {
        let params = EncoderParams::init(&[16, 32, 64], 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Vector::new((0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let f = params.encode(&x).unwrap();
        assert_eq!(f.dim(), 64);
        assert!((f.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn wrong_input_dim_rejected() {
        let params = EncoderParams::init(&[4, 3], 1).unwrap();
        assert_eq!(
            params.encode(&Vector::zeros(5)).unwrap_err(),
            EncoderError::DimensionMismatch { expected: 4, found: 5 }
        );
    }

    #[test]
    fn zero_encoder_rejected_and_zero_features_surface() {
        let zeros = vec![Matrix::zeros(3, 2), Matrix::zeros(1, 2)];
        assert_eq!(EncoderParams::from_tensors(&[3, 2], zeros).unwrap_err(), EncoderError::ZeroInit(0));

        let mut params = EncoderParams::init(&[3, 4, 2], 5).unwrap();
        for t in params.tensors_mut() {
            t.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Vector::new(vec![1.0, -2.0, 0.5]).unwrap();
        assert_eq!(params.encode(&x).unwrap_err(), EncoderError::Numerics(NumericsError::ZeroVector));
    }

    #[test]
    fn bad_widths_rejected() {
        assert_eq!(EncoderParams::init(&[8], 0).unwrap_err(), EncoderError::BadWidths);
        assert_eq!(EncoderParams::init(&[8, 0, 4], 0).unwrap_err(), EncoderError::BadWidths);
    }

    #[test]
    fn batch_matches_single() {
        let params = EncoderParams::init(&[5, 7, 3], 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let batch = params.encode_batch(&Matrix::from_rows(&rows).unwrap()).unwrap();
        for (i, r) in rows.iter().enumerate() {
            let single = params.encode(&Vector::new(r.clone()).unwrap()).unwrap();
            assert_eq!(single.as_slice(), batch.row(i));
        }
    }

    /// Weight gradient of a 3-layer net against central differences.
    #[test]
    fn three_layer_gradient_matches_finite_differences() {
        let params = EncoderParams::init(&[6, 8, 7, 5], 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input = Matrix::from_vec(3, 6, (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let probe = Matrix::from_vec(3, 5, (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();

        let loss = |p: &EncoderParams| -> (f64, Vec<Matrix>) {
            let mut tape = Tape::new();
            let bound = p.bind(&mut tape);
            let x = tape.leaf(input.clone());
            let f = p.forward(&mut tape, &bound, x).unwrap();
            let c = tape.leaf(probe.clone());
            let prod = tape.mul(f, c);
            let sq = tape.mul(prod, prod);
            let l = tape.sum(sq);
            let g = tape.backward(l).unwrap();
            (tape.value(l).get(0, 0), bound.vars().iter().map(|v| g.wrt(*v)).collect())
        };
        let (_, analytic) = loss(&params);
        let h = 1e-5;
        for (t, grad) in analytic.iter().enumerate() {
            for i in 0..grad.len() {
                let mut plus = params.clone();
                plus.tensors_mut()[t].as_mut_slice()[i] += h;
                let mut minus = params.clone();
                minus.tensors_mut()[t].as_mut_slice()[i] -= h;
                let numeric = (loss(&plus).0 - loss(&minus).0) / (2.0 * h);
                let a = grad.as_slice()[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(rel <= 1e-4, "tensor {t} entry {i}: {a} vs {numeric}");
            }
        }
    }
}
