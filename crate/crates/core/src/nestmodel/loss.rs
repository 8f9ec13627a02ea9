use serde::{Deserialize, Serialize};

use super::{check_len, ForecastBundle, ModelConfig};
use crate::error::{invalid, Result};
use crate::numcore::{huber, pinball, Graph, Var};

/// Mean Huber loss over all elements.
pub fn huber_loss(pred: &[f64], target: &[f64], delta: f64) -> Result<f64> {
    check_len("huber target", target.len(), pred.len())?;
    if !(delta > 0.0) {
        return Err(invalid(format!("huber delta must be > 0, got {delta}")));
    }
    let n = pred.len().max(1) as f64;
    Ok(pred.iter().zip(target).map(|(p, t)| huber(p - t, delta)).sum::<f64>() / n)
}

/// Pinball loss averaged over elements and quantile levels; `preds[q]` is the
/// forecast at level `taus[q]`.
pub fn pinball_loss(preds: &[Vec<f64>], target: &[f64], taus: &[f64]) -> Result<f64> {
    if preds.len() != taus.len() || taus.is_empty() {
        return Err(invalid(format!("{} quantile forecasts for {} levels", preds.len(), taus.len())));
    }
    let mut total = 0.0;
    for (p, &tau) in preds.iter().zip(taus) {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(invalid(format!("quantile level {tau} outside (0,1)")));
        }
        check_len("pinball target", target.len(), p.len())?;
        let n = p.len().max(1) as f64;
        total += p.iter().zip(target).map(|(a, b)| pinball(b - a, tau)).sum::<f64>() / n;
    }
    Ok(total / taus.len() as f64)
}

/// `λ1` weights the next-region term, `λ2` the boundary term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.2,
        }
    }
}

/// Ground truth for one sample, all in the model's (normalised) space.
#[derive(Debug, Clone, Copy)]
pub struct LossTargets<'a> {
    /// `N × P × C`, steps `t+1 .. t+P`.
    pub node: &'a [f64],
    /// `M × P × C`, steps `t+P+1 .. t+2P`.
    pub region_next: &'a [f64],
    /// `M × P × C`, steps `t+1 .. t+P`.
    pub region_current: &'a [f64],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub node: f64,
    pub region: f64,
    pub boundary: f64,
}

impl LossTerms {
    /// Value-level composite loss of a bundle.
    pub fn evaluate(bundle: &ForecastBundle, targets: &LossTargets, cfg: &ModelConfig, w: LossWeights) -> Result<Self> {
        check_weights(w)?;
        let node = huber_loss(&bundle.node, targets.node, cfg.huber_delta)?;
        let region = pinball_loss(&bundle.region, targets.region_next, &cfg.quantiles)?;
        let boundary = pinball_loss(&bundle.boundary, targets.region_current, &cfg.quantiles)?;
        Ok(Self {
            total: node + w.lambda1 * region + w.lambda2 * boundary,
            node,
            region,
            boundary,
        })
    }
}

fn check_weights(w: LossWeights) -> Result<()> {
    if !(w.lambda1 >= 0.0 && w.lambda2 >= 0.0) {
        return Err(invalid(format!("loss weights must be >= 0, got {w:?}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub node: Var,
    pub region: Var,
    pub boundary: Var,
}

fn quantile_term(g: &mut Graph, preds: &[Var], target: &[f64], taus: &[f64]) -> Result<Var> {
    let terms = preds
        .iter()
        .zip(taus)
        .map(|(&p, &tau)| g.pinball(p, target, tau))
        .collect::<Result<Vec<_>>>()?;
    let w = 1.0 / taus.len() as f64;
    g.weighted_sum(&terms.iter().map(|&t| (t, w)).collect::<Vec<_>>())
}

/// `L_x + λ1·L_z + λ2·L_bd` on the tape. `boundary` may come from a different
/// pass than `node`/`region` (training takes it from the zero-guidance pass).
pub fn composite_loss(
    g: &mut Graph,
    cfg: &ModelConfig,
    node: Var,
    region: &[Var],
    boundary: &[Var],
    targets: &LossTargets,
    w: LossWeights,
) -> Result<LossVars> {
    check_weights(w)?;
    let lx = g.huber(node, targets.node, cfg.huber_delta)?;
    let lz = quantile_term(g, region, targets.region_next, &cfg.quantiles)?;
    let lbd = quantile_term(g, boundary, targets.region_current, &cfg.quantiles)?;
    let total = g.weighted_sum(&[(lx, 1.0), (lz, w.lambda1), (lbd, w.lambda2)])?;
    Ok(LossVars {
        total,
        node: lx,
        region: lz,
        boundary: lbd,
    })
}
