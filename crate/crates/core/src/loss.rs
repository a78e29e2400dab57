//! Exponentially weighted L1 sequence loss.

use gmflow_tensor::{Graph, Real, Tensor, Var};

use crate::error::{FlowError, Result};
use crate::types::FlowField;

pub const DEFAULT_GAMMA: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { gamma: DEFAULT_GAMMA }
    }
}

impl LossConfig {
    /// Weight `γ^(N−i)` of prediction `i` (1-based) out of `n`.
    pub fn weight(&self, i: usize, n: usize) -> f64 {
        self.gamma.powi((n - i) as i32)
    }

    fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(FlowError::Loss(format!("gamma must be in (0, 1], got {}", self.gamma)));
        }
        Ok(())
    }
}

/// `Σᵢ γ^(N−i) · mean_valid(|uᵢ − u*| + |vᵢ − v*|)` over `[H, W, 2]`
/// predictions ordered coarse to fine.
pub fn flow_loss_var<T: Real>(
    g: &mut Graph<T>,
    predictions: &[Var],
    gt: &Tensor<T>,
    valid: &[bool],
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    if predictions.is_empty() {
        return Err(FlowError::Loss("no predictions to supervise".into()));
    }
    let s = gt.shape();
    if s.len() != 3 || s[2] != 2 || valid.len() != s[0] * s[1] {
        return Err(FlowError::Loss(format!(
            "ground truth {s:?} and valid mask of {} entries disagree",
            valid.len()
        )));
    }
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return Err(FlowError::Loss("valid mask is empty".into()));
    }
    let mask = Tensor::from_fn(s, |i| if valid[i[0] * s[1] + i[1]] { T::one() } else { T::zero() });
    let mask = g.constant(mask);
    let target = g.constant(gt.clone());
    let n = predictions.len();
    let mut total: Option<Var> = None;
    for (i, &p) in predictions.iter().enumerate() {
        if g.shape(p) != s {
            return Err(FlowError::Loss(format!(
                "prediction {:?} does not match ground truth {s:?}",
                g.shape(p)
            )));
        }
        let d = g.sub(p, target)?;
        let d = g.abs(d);
        let d = g.mul(d, mask)?;
        let d = g.sum(d);
        let term = g.scale(d, T::lit(cfg.weight(i + 1, n) / count as f64));
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.unwrap())
}

pub fn flow_loss<T: Real>(
    predictions: &[FlowField<T>],
    gt: &FlowField<T>,
    valid: &[bool],
    cfg: &LossConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = predictions.iter().map(|p| g.constant(p.data.clone())).collect();
    let loss = flow_loss_var(&mut g, &vars, &gt.data, valid, cfg)?;
    Ok(g.value(loss).item().to_f64().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_increase_towards_the_final_prediction() {
        let c = LossConfig::default();
        assert_eq!(c.weight(2, 2), 1.0);
        assert!((c.weight(1, 2) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn rejects_empty_inputs() {
        let gt = FlowField::<f64>::zeros(2, 2, 1);
        let c = LossConfig::default();
        assert!(flow_loss(&[], &gt, &[true; 4], &c).is_err());
        assert!(matches!(
            flow_loss(&[gt.clone()], &gt, &[false; 4], &c),
            Err(FlowError::Loss(_))
        ));
        assert!(flow_loss(&[gt.clone()], &gt, &[true; 4], &LossConfig { gamma: 0.0 }).is_err());
    }
}
