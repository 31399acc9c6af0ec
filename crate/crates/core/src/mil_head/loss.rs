//! Scalar loss definitions and their derivatives with respect to probabilities.

/// Probability clamp applied before every logarithm.
pub const EPS: f64 = 1e-7;

#[inline]
fn clamp(p: f64) -> (f64, bool) {
    if p < EPS {
        (EPS, false)
    } else if p > 1.0 - EPS {
        (1.0 - EPS, false)
    } else {
        (p, true)
    }
}

/// Binary cross-entropy summed over classes against a one-hot target.
pub fn bce(p: &[f64], class_id: usize) -> f64 {
    p.iter()
        .enumerate()
        .map(|(k, &raw)| {
            let (p, _) = clamp(raw);
            if k == class_id {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum()
}

pub(crate) fn bce_grad(p: &[f64], class_id: usize) -> Vec<f64> {
    p.iter()
        .enumerate()
        .map(|(k, &raw)| match clamp(raw) {
            (_, false) => 0.0,
            (p, true) if k == class_id => -1.0 / p,
            (p, true) => 1.0 / (1.0 - p),
        })
        .collect()
}

/// Selection loss: mean over objects of the bag-level cross-entropy.
pub fn loss_psm(bags: &[Vec<f64>], classes: &[usize]) -> f64 {
    if bags.is_empty() {
        return 0.0;
    }
    bags.iter().zip(classes).map(|(b, &c)| bce(b, c)).sum::<f64>() / bags.len() as f64
}

/// Binary focal loss summed over classes, no class-balancing weight.
pub fn focal_loss(p: &[f64], class_id: usize, gamma: f64) -> f64 {
    p.iter()
        .enumerate()
        .map(|(k, &raw)| {
            let (p, _) = clamp(raw);
            if k == class_id {
                (1.0 - p).powf(gamma) * -p.ln()
            } else {
                p.powf(gamma) * -(1.0 - p).ln()
            }
        })
        .sum()
}

pub(crate) fn focal_grad(p: &[f64], class_id: usize, gamma: f64) -> Vec<f64> {
    // γ·x^(γ-1) with the γ = 0 case pinned to 0
    let dpow = |x: f64| if gamma == 0.0 { 0.0 } else { gamma * x.powf(gamma - 1.0) };
    p.iter()
        .enumerate()
        .map(|(k, &raw)| match clamp(raw) {
            (_, false) => 0.0,
            (p, true) if k == class_id => dpow(1.0 - p) * p.ln() - (1.0 - p).powf(gamma) / p,
            (p, true) => dpow(p) * -(1.0 - p).ln() + p.powf(gamma) / (1.0 - p),
        })
        .collect()
}

/// Inner product of the one-hot target with a bag score.
pub fn class_weight(bag: &[f64], class_id: usize) -> f64 {
    bag[class_id]
}

/// Positive refinement loss: `(1/N) Σ ⟨c_i, Ŝ_i⟩ · FL(Ŝ*_i, c_i)` where the
/// selection-stage bag scores `Ŝ_i` act as constants.
pub fn loss_pos(prm_bags: &[Vec<f64>], psm_bags: &[Vec<f64>], classes: &[usize], gamma: f64) -> f64 {
    if prm_bags.is_empty() {
        return 0.0;
    }
    prm_bags
        .iter()
        .zip(psm_bags)
        .zip(classes)
        .map(|((prm, psm), &c)| class_weight(psm, c) * focal_loss(prm, c, gamma))
        .sum::<f64>()
        / prm_bags.len() as f64
}

/// `−s² · ln(1 − s)` for one class probability; only the log argument is clamped.
fn neg_term(s: f64) -> f64 {
    let (c, _) = clamp(s);
    -(s * s) * (1.0 - c).ln()
}

pub(crate) fn neg_term_grad(s: f64) -> f64 {
    let (c, inside) = clamp(s);
    let log_part = if inside { s * s / (1.0 - c) } else { 0.0 };
    -2.0 * s * (1.0 - c).ln() + log_part
}

/// Negative suppression loss over classification scores of negatives; 0 when there are none.
pub fn loss_neg(neg_scores: &[Vec<f64>], beta: f64) -> f64 {
    if neg_scores.is_empty() {
        return 0.0;
    }
    beta * neg_scores
        .iter()
        .map(|row| row.iter().map(|&s| neg_term(s)).sum::<f64>())
        .sum::<f64>()
        / neg_scores.len() as f64
}

pub fn loss_prm(l_pos: f64, l_neg: f64, alpha: f64) -> f64 {
    alpha * l_pos + (1.0 - alpha) * l_neg
}
