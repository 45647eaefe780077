//! Evaluation statistics: MAE, rank correlation, ROC/AUC, referral curves,
//! gate thresholds and false-positive mining.

use crate::{Error, Result};

/// Example false-positive thresholds; they depend on model scale.
pub const DEFAULT_FP_LIP_MAX: f64 = 0.6;
pub const DEFAULT_FP_MAE_MIN: f64 = 0.023;
pub const DEFAULT_REFERRAL_STEPS: usize = 101;

/// Mean absolute elementwise difference.
pub fn mae(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("mae over lengths {} and {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    (sab, saa, sbb)
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!("spearman over lengths {} and {}", xs.len(), ys.len())));
    }
    if xs.len() < 3 {
        return Err(Error::Invalid(format!("spearman needs at least 3 pairs, got {}", xs.len())));
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let (sxy, sxx, syy) = pearson(&rx, &ry);
    if sxx == 0.0 {
        return Err(Error::ZeroRankVariance("xs"));
    }
    if syy == 0.0 {
        return Err(Error::ZeroRankVariance("ys"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// `(false-positive rate, true-positive rate)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// ROC of an OOD detector where a higher score means more likely OOD.
pub fn roc_auc(scores_id: &[f64], scores_ood: &[f64]) -> Result<RocCurve> {
    if scores_id.is_empty() || scores_ood.is_empty() {
        return Err(Error::Invalid("ROC needs at least one score per class".into()));
    }
    if scores_id.iter().chain(scores_ood).any(|s| !s.is_finite()) {
        return Err(Error::Invalid("ROC scores must be finite".into()));
    }
    let mut all: Vec<(f64, bool)> = scores_id
        .iter()
        .map(|&s| (s, false))
        .chain(scores_ood.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (neg, pos) = (scores_id.len() as u128, scores_ood.len() as u128);
    let (mut fp, mut tp) = (0u128, 0u128);
    let mut twice_area = 0u128;
    let mut points = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < all.len() {
        let (pfp, ptp) = (fp, tp);
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        twice_area += (fp - pfp) * (tp + ptp);
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    let auc = twice_area as f64 / (2 * neg * pos) as f64;
    debug_assert!(neg * pos > 250_000 || (auc - auc_pair_count(scores_id, scores_ood)).abs() < 1e-12);
    Ok(RocCurve { points, auc })
}

/// Fraction of (id, ood) pairs ordered correctly, ties counted one half.
pub fn auc_pair_count(scores_id: &[f64], scores_ood: &[f64]) -> f64 {
    let mut twice = 0u128;
    for &o in scores_ood {
        for &i in scores_id {
            twice += match o.partial_cmp(&i) {
                Some(std::cmp::Ordering::Greater) => 2,
                Some(std::cmp::Ordering::Equal) => 1,
                _ => 0,
            };
        }
    }
    twice as f64 / (2 * scores_id.len() * scores_ood.len()) as f64
}

/// Trapezoidal area under a list of ROC points.
pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Id,
    Ood,
}

impl Label {
    pub fn name(self) -> &'static str {
        match self {
            Label::Id => "id",
            Label::Ood => "ood",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "id" => Some(Label::Id),
            "ood" => Some(Label::Ood),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub sample_id: u64,
    pub label: Label,
    pub mae: f64,
    pub lipschitz: f64,
    pub variance: f64,
}

impl EvalRecord {
    pub fn validate(&self) -> Result<()> {
        let vals = [self.mae, self.lipschitz, self.variance];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Invalid(format!("record {} has a negative or non-finite field", self.sample_id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferralCurve {
    pub fractions: Vec<f64>,
    pub mean_lip: Vec<f64>,
    pub mean_mae: Vec<f64>,
    /// Largest retained Lipschitz value at each fraction.
    pub retained_max: Vec<f64>,
    pub retained: Vec<usize>,
}

/// Refers the highest-Lipschitz records first and tracks the means of what is
/// left. At least one record is always retained.
pub fn referral_curve(records: &[EvalRecord], steps: usize) -> Result<ReferralCurve> {
    if records.is_empty() {
        return Err(Error::Invalid("referral curve needs records".into()));
    }
    if steps < 2 {
        return Err(Error::Invalid(format!("referral curve needs at least 2 steps, got {steps}")));
    }
    let mut order: Vec<&EvalRecord> = records.iter().collect();
    order.sort_by(|a, b| b.lipschitz.total_cmp(&a.lipschitz));
    let total = order.len();
    // running means over the descending order, built from the tail so that
    // adding a larger value never lowers the mean
    let mut lip_tail = vec![0.0; total + 1];
    let mut mae_tail = vec![0.0; total + 1];
    for i in (0..total).rev() {
        let k = (total - i) as f64;
        lip_tail[i] = lip_tail[i + 1] + (order[i].lipschitz - lip_tail[i + 1]) / k;
        mae_tail[i] = mae_tail[i + 1] + (order[i].mae - mae_tail[i + 1]) / k;
    }
    let mut curve = ReferralCurve {
        fractions: Vec::with_capacity(steps),
        mean_lip: Vec::with_capacity(steps),
        mean_mae: Vec::with_capacity(steps),
        retained_max: Vec::with_capacity(steps),
        retained: Vec::with_capacity(steps),
    };
    for s in 0..steps {
        let f = s as f64 / (steps - 1) as f64;
        let removed = ((f * total as f64).round() as usize).min(total - 1);
        let kept = total - removed;
        curve.fractions.push(f);
        curve.mean_lip.push(lip_tail[removed]);
        curve.mean_mae.push(mae_tail[removed]);
        curve.retained_max.push(order[removed].lipschitz);
        curve.retained.push(kept);
    }
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateThreshold {
    pub gamma: f64,
    pub mae_limit: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateDecision {
    Accept,
    Refer,
}

impl GateThreshold {
    /// `L < gamma` is accepted; anything at or above is referred.
    pub fn decide(&self, lipschitz: f64) -> GateDecision {
        if lipschitz < self.gamma {
            GateDecision::Accept
        } else {
            GateDecision::Refer
        }
    }
}

/// Smallest referral fraction whose retained MAE is within `mae_limit`.
pub fn select_threshold(curve: &ReferralCurve, mae_limit: f64) -> Result<GateThreshold> {
    match curve.mean_mae.iter().position(|&m| m <= mae_limit) {
        Some(i) => Ok(GateThreshold {
            gamma: curve.retained_max[i],
            mae_limit,
            fraction: curve.fractions[i],
        }),
        None => Err(Error::Infeasible {
            limit: mae_limit,
            min_mae: curve.mean_mae.iter().copied().fold(f64::INFINITY, f64::min),
        }),
    }
}

/// Records with `lipschitz < lip_max` and `mae > mae_min`, in input order.
pub fn fp_quadrant(records: &[EvalRecord], lip_max: f64, mae_min: f64) -> Vec<EvalRecord> {
    records
        .iter()
        .filter(|r| r.lipschitz < lip_max && r.mae > mae_min)
        .copied()
        .collect()
}
