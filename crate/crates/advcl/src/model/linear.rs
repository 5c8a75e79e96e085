//! Classifier abstraction used by the evaluation attacks, plus a linear
//! pixel-space baseline whose robustness is analytically computable.

use super::layers::{BnRoute, ForwardCtx};
use super::robust::RobustModel;
use crate::error::Result;
use crate::tensor::{Tape, Var};
use ndarray::{Array1, Array2};

/// Anything that maps a mounted image batch to class logits on a tape.
pub trait DifferentiableClassifier {
    fn logits_tape(&self, tape: &Tape, x: Var) -> Result<Var>;
    fn num_classes(&self) -> usize;

    /// Eval logits as a plain array.
    fn logits(&self, x: &ndarray::Array4<f64>) -> Result<Array2<f64>> {
        let tape = Tape::new();
        let input = tape.constant(x.clone().into_dyn());
        let out = self.logits_tape(&tape, input)?;
        Ok(tape
            .value(out)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned())
    }
}

impl DifferentiableClassifier for RobustModel {
    fn logits_tape(&self, tape: &Tape, x: Var) -> Result<Var> {
        let ctx = ForwardCtx::attack(tape, BnRoute::Normal);
        self.forward_classifier(&ctx, x)
    }

    fn num_classes(&self) -> usize {
        RobustModel::num_classes(self).unwrap_or(0)
    }
}

/// Logits `W · flatten(x) + b` straight from pixels. The binary case has a
/// closed-form robust margin: a sample flips under an ℓ∞ attack of radius
/// ε exactly when its decision margin is below `ε · ‖w₁ − w₀‖₁`.
pub struct LinearPixelClassifier {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearPixelClassifier {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Self {
        assert_eq!(weight.nrows(), bias.len());
        LinearPixelClassifier { weight, bias }
    }

    /// Constant-logit classifier (zero weights); gradients vanish, so
    /// attacks cannot change its predictions.
    pub fn constant(num_classes: usize, dim: usize) -> Self {
        LinearPixelClassifier {
            weight: Array2::zeros((num_classes, dim)),
            bias: Array1::zeros(num_classes),
        }
    }
}

impl DifferentiableClassifier for LinearPixelClassifier {
    fn logits_tape(&self, tape: &Tape, x: Var) -> Result<Var> {
        let flat = tape.flatten_rows(x);
        let w = tape.constant(self.weight.clone().into_dyn());
        let b = tape.constant(self.bias.clone().into_dyn());
        Ok(tape.add_bias(tape.matmul_nt(flat, w), b))
    }

    fn num_classes(&self) -> usize {
        self.weight.nrows()
    }
}
