//! Deep-supervision objective: one fine BCE term plus `λ` times the sum of
//! the coarse BCE terms.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SaliencyPrediction;

/// Predictions are clamped to `[ε, 1 - ε]` before taking logs.
pub const BCE_EPS: f64 = 1e-7;

/// Mean binary cross-entropy `-[G ln S + (1 - G) ln(1 - S)]` over every element.
pub fn bce(prediction: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if prediction.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "bce prediction {:?} vs ground truth {:?}",
            prediction.dims(),
            gt.dims()
        )));
    }
    let s = prediction.clamp(BCE_EPS as f32, (1.0 - BCE_EPS) as f32)?;
    let pos = (gt * s.log()?)?;
    let neg = ((1.0 - gt)? * (1.0 - &s)?.log()?)?;
    Ok((pos + neg)?.mean_all()?.neg()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Absent when the fine branch is ablated.
    pub fine: Option<f64>,
    /// One term per coarse map, top level first.
    pub coarse: Vec<f64>,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    /// Number of individual BCE terms.
    pub fn terms(&self) -> usize {
        self.coarse.len() + usize::from(self.fine.is_some())
    }
}

pub struct Loss {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
}

/// `L = L_f(S^f, G) + λ Σ_i L_c(S_i^c, G)`.
pub fn total_loss(pred: &SaliencyPrediction, gt: &Tensor, lambda: f64) -> Result<Loss> {
    if pred.fine.is_none() && pred.coarse.is_empty() {
        return Err(Error::Shape("prediction holds no saliency maps".into()));
    }
    let coarse_terms = pred
        .coarse
        .iter()
        .map(|s| bce(s, gt))
        .collect::<Result<Vec<_>>>()?;
    let fine_term = pred.fine.as_ref().map(|f| bce(f, gt)).transpose()?;

    let mut total: Option<Tensor> = fine_term.clone();
    if !coarse_terms.is_empty() {
        let mut sum = coarse_terms[0].clone();
        for t in &coarse_terms[1..] {
            sum = (sum + t)?;
        }
        let weighted = (sum * lambda)?;
        total = Some(match total {
            Some(f) => (f + weighted)?,
            None => weighted,
        });
    }
    let total = total.expect("at least one term");
    let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?) };
    let breakdown = LossBreakdown {
        fine: fine_term.as_ref().map(scalar).transpose()?,
        coarse: coarse_terms.iter().map(scalar).collect::<Result<Vec<_>>>()?,
        total: scalar(&total)?,
        lambda,
    };
    Ok(Loss { total, breakdown })
}
