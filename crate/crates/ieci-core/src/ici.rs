//! Counterfactual similarity debiasing.
//!
//! The similarity head scores projected phrases against projected regions.
//! A counterfactual branch replaces every phrase representation with one
//! learnable vector `r`, measuring how far a region's score is driven by
//! the region alone (the direct effect). Training consumes the difference:
//! total effect minus direct effect.

use crate::tensor::{NodeId, Result, Tape, Tensor, TensorError};

/// Learnable state of the counterfactual similarity head.
#[derive(Debug, Clone)]
pub struct IciParams {
    /// Counterfactual phrase stand-in, dim `d`. Starts at zero so the
    /// counterfactual branch begins as a uniform guesser.
    pub r: Tensor,
    pub w_phrase: Tensor,
    pub w_region: Tensor,
    /// Score scale; strictly positive.
    pub scale: f64,
}

impl IciParams {
    /// Projections start at the identity so the head begins as a plain
    /// scaled dot product; `r` starts at zero.
    pub fn init(d: usize) -> Self {
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        IciParams {
            r: Tensor::zeros(vec![d]),
            w_phrase: Tensor::new(vec![d, d], eye.clone()).expect("identity shape"),
            w_region: Tensor::new(vec![d, d], eye).expect("identity shape"),
            scale: 1.0 / (d as f64).sqrt(),
        }
    }

    pub fn fields(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("r", &self.r),
            ("w_phrase", &self.w_phrase),
            ("w_region", &self.w_region),
        ]
    }

    pub fn fields_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("r", &mut self.r),
            ("w_phrase", &mut self.w_phrase),
            ("w_region", &mut self.w_region),
        ]
    }

    pub fn bind(&self, tape: &mut Tape) -> IciNodes {
        IciNodes {
            r: tape.param(self.r.clone()),
            w_phrase: tape.param(self.w_phrase.clone()),
            w_region: tape.param(self.w_region.clone()),
            scale: self.scale,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IciNodes {
    pub r: NodeId,
    pub w_phrase: NodeId,
    pub w_region: NodeId,
    pub scale: f64,
}

/// Factual similarities: `[n × m]` scaled dot products of projected
/// phrase and region representations.
pub fn similarity(
    tape: &mut Tape,
    phrase_reps: NodeId,
    region_reps: NodeId,
    head: &IciNodes,
) -> Result<NodeId> {
    let p = tape.matmul(phrase_reps, head.w_phrase)?;
    let r = tape.matmul(region_reps, head.w_region)?;
    let rt = tape.transpose(r)?;
    let scores = tape.matmul(p, rt)?;
    Ok(tape.scale(scores, head.scale))
}

/// Counterfactual similarities: every phrase representation is replaced by
/// the stand-in `r_node` (broadcast to `n` rows), regions stay factual.
/// All rows of the result are identical by construction.
pub fn counterfactual_similarity(
    tape: &mut Tape,
    r_node: NodeId,
    region_reps: NodeId,
    n: usize,
    head: &IciNodes,
) -> Result<NodeId> {
    let stand_in = tape.repeat_row(r_node, n)?;
    similarity(tape, stand_in, region_reps, head)
}

/// Factual effect, counterfactual effect, and their difference.
#[derive(Debug, Clone, Copy)]
pub struct EffectDecomposition {
    pub te: NodeId,
    pub ede: NodeId,
    pub eie: NodeId,
}

/// `eie = te - ede`, elementwise; shapes must match.
pub fn effect_decomposition(
    tape: &mut Tape,
    te: NodeId,
    ede: NodeId,
) -> Result<EffectDecomposition> {
    if tape.value(te).shape() != tape.value(ede).shape() {
        return Err(TensorError::ShapeMismatch {
            op: "effect_decomposition",
            lhs: tape.value(te).shape().to_vec(),
            rhs: tape.value(ede).shape().to_vec(),
        });
    }
    let eie = tape.sub(te, ede)?;
    Ok(EffectDecomposition { te, ede, eie })
}
