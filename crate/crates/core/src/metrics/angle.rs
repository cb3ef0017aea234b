use crate::error::{Error, Result};
use crate::trainer::WeightSnapshot;

/// Angle in radians between two flattened weight vectors:
/// `arccos(clamp(v0·vt / (‖v0‖‖vt‖), -1, 1))`.
pub fn angle(v0: &[f64], vt: &[f64]) -> Result<f64> {
    if v0.len() != vt.len() {
        return Err(Error::shape(
            "angle",
            format!("vectors of length {} and {}", v0.len(), vt.len()),
        ));
    }
    let (mut dot, mut n0, mut nt) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in v0.iter().zip(vt) {
        dot += a * b;
        n0 += a * a;
        nt += b * b;
    }
    if !(n0 > 0.0 && nt > 0.0) || !dot.is_finite() || !n0.is_finite() || !nt.is_finite() {
        return Err(Error::Degenerate("angle of a zero-norm or non-finite vector".into()));
    }
    let cos = dot / (n0.sqrt() * nt.sqrt());
    Ok(cos.clamp(-1.0, 1.0).acos())
}

/// Raw prediction-layer angle θ_pred.
pub fn theta_pred(snapshot: &WeightSnapshot) -> Result<f64> {
    angle(&snapshot.pred_weight_0, &snapshot.pred_weight_t)
}

/// Prediction-layer angle score, `-θ_pred`: smaller rotation ranks higher.
pub fn metric_angle_pred(snapshot: &WeightSnapshot) -> Result<f64> {
    theta_pred(snapshot).map(|t| -t)
}

/// Raw feature-layer angle θ_feat (reported as-is).
pub fn metric_angle_feat(snapshot: &WeightSnapshot) -> Result<f64> {
    angle(&snapshot.feat_0, &snapshot.feat_t)
}

/// Loss score, `-final_loss`.
pub fn metric_loss(snapshot: &WeightSnapshot) -> f64 {
    -snapshot.final_loss
}
