//! Ranking hinge on candidate scores, cross-entropy, the combined objective
//! and a finite-difference gradient checker.

use crate::config::high_group_size;
use crate::error::{Error, Result};

/// Probabilities are floored at this value before the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Scores sorted in descending order and split into the top `k_high` and
/// the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct RankSplit {
    /// Candidate indices by descending score; ties keep index order.
    pub order: Vec<usize>,
    pub k_high: usize,
    pub high_mean: f64,
    pub low_mean: f64,
}

impl RankSplit {
    pub fn gap(&self) -> f64 {
        self.high_mean - self.low_mean
    }

    pub fn is_high(&self, rank: usize) -> bool {
        rank < self.k_high
    }
}

pub fn rank_split(alpha: &[f64], gamma: f64) -> Result<RankSplit> {
    let k = alpha.len();
    if k < 2 {
        return Err(Error::Invalid(format!("ranking needs at least 2 candidates, got {k}")));
    }
    let k_high = high_group_size(k, gamma);
    if k_high < 1 || k_high > k - 1 {
        return Err(Error::Invalid(format!(
            "gamma {gamma} with {k} candidates gives a high group of {k_high}; both groups must be nonempty"
        )));
    }
    let mut order: Vec<usize> = (0..k).collect();
    // Stable: equal scores keep ascending index order.
    order.sort_by(|&a, &b| alpha[b].total_cmp(&alpha[a]));
    let high_mean = order[..k_high].iter().map(|&i| alpha[i]).sum::<f64>() / k_high as f64;
    let low_mean = order[k_high..].iter().map(|&i| alpha[i]).sum::<f64>() / (k - k_high) as f64;
    Ok(RankSplit { order, k_high, high_mean, low_mean })
}

/// `max(0, delta - (mean of top group - mean of the rest))`.
pub fn ro_loss(alpha: &[f64], delta: f64, gamma: f64) -> Result<f64> {
    let split = rank_split(alpha, gamma)?;
    Ok((delta - split.gap()).max(0.0))
}

/// Loss value and its (sub)gradient with respect to `alpha`. The hinge has
/// zero slope at the kink and group membership follows [`rank_split`].
pub fn ro_loss_grad(alpha: &[f64], delta: f64, gamma: f64) -> Result<(f64, Vec<f64>)> {
    let split = rank_split(alpha, gamma)?;
    let k = alpha.len();
    let margin = delta - split.gap();
    let mut grad = vec![0.0; k];
    if margin > 0.0 {
        let hi = -1.0 / split.k_high as f64;
        let lo = 1.0 / (k - split.k_high) as f64;
        for (rank, &i) in split.order.iter().enumerate() {
            grad[i] = if split.is_high(rank) { hi } else { lo };
        }
    }
    Ok((margin.max(0.0), grad))
}

fn check_ce(prediction: &[f64], target: &[f64]) -> Result<()> {
    if prediction.len() != target.len() {
        return Err(Error::Shape(format!(
            "prediction has {} classes, label vector {}",
            prediction.len(),
            target.len()
        )));
    }
    Ok(())
}

/// Cross-entropy `-sum_c y_c ln p_c` with `p` floored at [`PROB_FLOOR`];
/// `-ln p_true` for a one-hot target.
pub fn ce_loss(prediction: &[f64], target: &[f64]) -> Result<f64> {
    check_ce(prediction, target)?;
    Ok(prediction.iter().zip(target).filter(|(_, &y)| y != 0.0).map(|(&p, &y)| -y * p.max(PROB_FLOOR).ln()).sum())
}

/// Gradient of [`ce_loss`] with respect to the pre-softmax logits, given the
/// softmax output `prediction` and a target summing to one.
pub fn ce_logit_grad(prediction: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    check_ce(prediction, target)?;
    let mut g = vec![0.0; prediction.len()];
    for (c, &y) in target.iter().enumerate() {
        if y == 0.0 || prediction[c] < PROB_FLOOR {
            continue;
        }
        for (i, gi) in g.iter_mut().enumerate() {
            *gi += y * (prediction[i] - if i == c { 1.0 } else { 0.0 });
        }
    }
    Ok(g)
}

/// Per-sample loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub ce: f64,
    pub ro: f64,
    /// Score gap between the high and low groups.
    pub gap: f64,
}

impl LossTerms {
    pub fn total(&self, lambda: f64) -> f64 {
        self.ce + lambda * self.ro
    }
}

/// One sample's inputs to the combined objective.
#[derive(Debug, Clone, Copy)]
pub struct LossInput<'a> {
    pub prediction: &'a [f64],
    pub target: &'a [f64],
    pub alpha: &'a [f64],
}

/// Batch mean of `ce + lambda * ro`.
pub fn total_loss(batch: &[LossInput<'_>], delta: f64, gamma: f64, lambda: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let mut sum = 0.0;
    for s in batch {
        let ce = ce_loss(s.prediction, s.target)?;
        let ro = ro_loss(s.alpha, delta, gamma)?;
        sum += ce + lambda * ro;
    }
    Ok(sum / batch.len() as f64)
}

/// Largest relative disagreement between the analytic gradient returned by
/// `loss_fn` at `params` and central differences with step `epsilon`:
/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(loss_fn: F, params: &[f64], epsilon: f64) -> f64
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = loss_fn(params);
    assert_eq!(analytic.len(), params.len(), "gradient length");
    let mut p = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let orig = p[i];
        p[i] = orig + epsilon;
        let up = loss_fn(&p).0;
        p[i] = orig - epsilon;
        let down = loss_fn(&p).0;
        p[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}
