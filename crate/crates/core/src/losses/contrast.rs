//! Contrast-based objectives over in-batch pairs and triplets. All three are
//! sums over the tuples they are given.

use ndarray::Array2;

use super::{LossHyper, LossOutput, Reduction, UnitRows};
use crate::error::{Error, Result};
use crate::sampling::{LabeledBatch, TupleIndex};

fn check_index(batch: &LabeledBatch, i: usize) -> Result<()> {
    if i >= batch.len() {
        return Err(Error::domain(format!(
            "tuple index {i} out of range for a batch of {}",
            batch.len()
        )));
    }
    Ok(())
}

fn check_pair(batch: &LabeledBatch, (i, j): (usize, usize), positive: bool) -> Result<()> {
    check_index(batch, i)?;
    check_index(batch, j)?;
    if i == j {
        return Err(Error::domain(format!("pair ({i}, {j}) references the same sample twice")));
    }
    let same = batch.label(i) == batch.label(j);
    if same != positive {
        let kind = if positive { "positive" } else { "negative" };
        return Err(Error::domain(format!("{kind} pair ({i}, {j}) has inconsistent labels")));
    }
    Ok(())
}

pub(crate) fn check_triplet(batch: &LabeledBatch, (a, p, n): (usize, usize, usize)) -> Result<()> {
    for i in [a, p, n] {
        check_index(batch, i)?;
    }
    let ya = batch.label(a);
    if a == p || ya != batch.label(p) || ya == batch.label(n) {
        return Err(Error::domain(format!(
            "invalid triplet ({a}, {p}, {n}): labels ({ya}, {}, {})",
            batch.label(p),
            batch.label(n)
        )));
    }
    Ok(())
}

fn sum_output(value: f64, grad: Array2<f64>) -> LossOutput {
    LossOutput {
        value,
        grad_embeddings: grad,
        grad_centers: None,
        grad_bias: None,
        grad_gamma: None,
        grad_logits: None,
        reduction: Reduction::Sum,
    }
}

/// `Σ_pos (1 − cos θ)² + Σ_neg max(m − (1 − cos θ), 0)²`.
pub fn contrastive_loss(batch: &LabeledBatch, tuples: &TupleIndex, hyper: &LossHyper) -> Result<LossOutput> {
    if !(hyper.margin > 0.0) {
        return Err(Error::domain(format!("contrastive margin must be > 0, got {}", hyper.margin)));
    }
    for &pair in &tuples.positives {
        check_pair(batch, pair, true)?;
    }
    for &pair in &tuples.negatives {
        check_pair(batch, pair, false)?;
    }
    let rows = UnitRows::new(batch.rows(), "embedding row")?;
    let mut value = 0.0;
    let mut grad = Array2::zeros(batch.rows().raw_dim());
    for &(i, j) in &tuples.positives {
        let c = rows.cos(i, j);
        value += (1.0 - c) * (1.0 - c);
        rows.accumulate_pair(i, j, c, -2.0 * (1.0 - c), &mut grad);
    }
    for &(i, j) in &tuples.negatives {
        let c = rows.cos(i, j);
        let h = hyper.margin - (1.0 - c);
        if h > 0.0 {
            value += h * h;
            rows.accumulate_pair(i, j, c, 2.0 * h, &mut grad);
        }
    }
    Ok(sum_output(value, grad))
}

/// `Σ max(cos θ_an − cos θ_ap + m, 0)`.
pub fn triplet_loss_hinge(batch: &LabeledBatch, tuples: &TupleIndex, hyper: &LossHyper) -> Result<LossOutput> {
    if !(hyper.margin >= 0.0) {
        return Err(Error::domain(format!("triplet margin must be >= 0, got {}", hyper.margin)));
    }
    for &t in &tuples.triplets {
        check_triplet(batch, t)?;
    }
    let rows = UnitRows::new(batch.rows(), "embedding row")?;
    let mut value = 0.0;
    let mut grad = Array2::zeros(batch.rows().raw_dim());
    for &(a, p, n) in &tuples.triplets {
        let (c_ap, c_an) = (rows.cos(a, p), rows.cos(a, n));
        let h = c_an - c_ap + hyper.margin;
        if h > 0.0 {
            value += h;
            rows.accumulate_pair(a, n, c_an, 1.0, &mut grad);
            rows.accumulate_pair(a, p, c_ap, -1.0, &mut grad);
        }
    }
    Ok(sum_output(value, grad))
}

/// Logistic function that never evaluates `exp` of a positive argument.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `Σ sigmoid(α·(cos θ_an − cos θ_ap))`, no margin.
pub fn triplet_loss_sigmoid(batch: &LabeledBatch, tuples: &TupleIndex, hyper: &LossHyper) -> Result<LossOutput> {
    if !(hyper.alpha > 0.0) {
        return Err(Error::domain(format!("alpha must be positive, got {}", hyper.alpha)));
    }
    for &t in &tuples.triplets {
        check_triplet(batch, t)?;
    }
    let rows = UnitRows::new(batch.rows(), "embedding row")?;
    let mut value = 0.0;
    let mut grad = Array2::zeros(batch.rows().raw_dim());
    for &(a, p, n) in &tuples.triplets {
        let (c_ap, c_an) = (rows.cos(a, p), rows.cos(a, n));
        let s = sigmoid(hyper.alpha * (c_an - c_ap));
        value += s;
        let slope = hyper.alpha * s * (1.0 - s);
        rows.accumulate_pair(a, n, c_an, slope, &mut grad);
        rows.accumulate_pair(a, p, c_ap, -slope, &mut grad);
    }
    Ok(sum_output(value, grad))
}

/// Per-triplet sigmoid terms, in tuple order.
pub fn triplet_sigmoid_terms(batch: &LabeledBatch, tuples: &TupleIndex, hyper: &LossHyper) -> Result<Vec<f64>> {
    for &t in &tuples.triplets {
        check_triplet(batch, t)?;
    }
    let rows = UnitRows::new(batch.rows(), "embedding row")?;
    Ok(tuples
        .triplets
        .iter()
        .map(|&(a, p, n)| sigmoid(hyper.alpha * (rows.cos(a, n) - rows.cos(a, p))))
        .collect())
}

/// Smallest distance of any hinge argument from its kink, or infinity when
/// the loss has none.
pub fn contrastive_kink_distance(batch: &LabeledBatch, tuples: &TupleIndex, hyper: &LossHyper) -> Result<f64> {
    let rows = UnitRows::new(batch.rows(), "embedding row")?;
    Ok(tuples
        .negatives
        .iter()
        .map(|&(i, j)| (hyper.margin - (1.0 - rows.cos(i, j))).abs())
        .fold(f64::INFINITY, f64::min))
}

pub fn triplet_kink_distance(batch: &LabeledBatch, tuples: &TupleIndex, hyper: &LossHyper) -> Result<f64> {
    let rows = UnitRows::new(batch.rows(), "embedding row")?;
    Ok(tuples
        .triplets
        .iter()
        .map(|&(a, p, n)| (rows.cos(a, n) - rows.cos(a, p) + hyper.margin).abs())
        .fold(f64::INFINITY, f64::min))
}
