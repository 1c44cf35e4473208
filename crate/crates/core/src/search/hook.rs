use crate::error::Result;
use crate::tensor::{Tape, Var};

/// Extra term added to the architecture-step loss.
pub trait AlphaRegularizer {
    /// `None` means a zero penalty.
    fn penalty(&self, tape: &mut Tape, alphas: &[Var], epoch: usize) -> Result<Option<Var>>;
}

/// Default hook: no penalty.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoPenalty;

impl AlphaRegularizer for NoPenalty {
    fn penalty(&self, _: &mut Tape, _: &[Var], _: usize) -> Result<Option<Var>> {
        Ok(None)
    }
}

/// `scale · Σ α²` over every architecture vector.
#[derive(Debug, Clone, Copy)]
pub struct L2Penalty(pub f64);

impl AlphaRegularizer for L2Penalty {
    fn penalty(&self, tape: &mut Tape, alphas: &[Var], _: usize) -> Result<Option<Var>> {
        let mut terms = Vec::with_capacity(alphas.len());
        for &a in alphas {
            let sq = tape.mul(a, a)?;
            terms.push(tape.sum(sq)?);
        }
        if terms.is_empty() {
            return Ok(None);
        }
        let s = tape.add_n(&terms)?;
        Ok(Some(tape.mul_const(s, self.0)?))
    }
}

/// A constant penalty; contributes nothing to gradients.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPenalty(pub f64);

impl AlphaRegularizer for ConstantPenalty {
    fn penalty(&self, tape: &mut Tape, _: &[Var], _: usize) -> Result<Option<Var>> {
        let dtype = tape.dtype();
        Ok(Some(tape.constant(crate::tensor::Tensor::scalar(self.0, dtype))?))
    }
}
