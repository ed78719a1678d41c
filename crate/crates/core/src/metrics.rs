//! Segmentation metrics: per-sample IoU, mIoU, oIoU, Precision@threshold.

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// Intersection over union of two binary masks. Both empty counts as a
/// perfect match (1); exactly one empty as a total miss (0).
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::DimMismatch {
            op: "iou",
            lhs: vec![pred.len()],
            rhs: vec![gt.len()],
        });
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub miou: f64,
    pub oiou: f64,
    /// (threshold, fraction of samples with IoU >= threshold)
    pub prec_at: Vec<(f64, f64)>,
    pub n_samples: usize,
}

impl MetricsReport {
    pub fn precision_at(&self, threshold: f64) -> Option<f64> {
        self.prec_at
            .iter()
            .find(|(t, _)| (t - threshold).abs() < 1e-9)
            .map(|&(_, p)| p)
    }
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "n = {}\nmIoU = {:.4}\noIoU = {:.4}",
            self.n_samples, self.miou, self.oiou
        )?;
        for (t, p) in &self.prec_at {
            write!(f, "\nP@{t} = {p:.4}")?;
        }
        Ok(())
    }
}

pub fn compute_metrics(
    preds: &[Vec<bool>],
    gts: &[Vec<bool>],
    thresholds: &[f64],
) -> Result<MetricsReport> {
    if preds.len() != gts.len() {
        return Err(Error::DimMismatch {
            op: "compute_metrics",
            lhs: vec![preds.len()],
            rhs: vec![gts.len()],
        });
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument("compute_metrics: no samples".into()));
    }
    let mut ious = Vec::with_capacity(preds.len());
    let mut total_inter = 0usize;
    let mut total_union = 0usize;
    for (p, g) in preds.iter().zip(gts) {
        ious.push(iou(p, g)?);
        for (&pp, &gg) in p.iter().zip(g) {
            total_inter += (pp && gg) as usize;
            total_union += (pp || gg) as usize;
        }
    }
    let miou = ious.iter().sum::<f64>() / ious.len() as f64;
    let oiou = if total_union == 0 {
        1.0
    } else {
        total_inter as f64 / total_union as f64
    };
    let prec_at = thresholds
        .iter()
        .map(|&t| {
            let hits = ious.iter().filter(|&&v| v >= t).count();
            (t, hits as f64 / ious.len() as f64)
        })
        .collect();
    Ok(MetricsReport {
        miou,
        oiou,
        prec_at,
        n_samples: preds.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn iou_empty_conventions() {
        assert_eq!(iou(&[false; 4], &[false; 4]).unwrap(), 1.0);
        assert_eq!(iou(&[true, false], &[false, false]).unwrap(), 0.0);
        assert_eq!(iou(&[false, true], &[false, true]).unwrap(), 1.0);
        assert!(iou(&[true], &[true, true]).is_err());
    }

    #[test]
    fn perfect_predictions_score_one_everywhere() {
        let gts = vec![vec![true, false, true], vec![false, false, true]];
        let r = compute_metrics(&gts, &gts, &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.oiou, 1.0);
        assert!(r.prec_at.iter().all(|&(_, p)| p == 1.0));
    }

    #[test]
    fn textbook_two_sample_case() {
        // sample 1: I=10, U=10; sample 2: I=0, U=10 (5 pred + 5 gt, disjoint)
        let gt1 = vec![true; 10];
        let pred2 = [vec![true; 5], vec![false; 5]].concat();
        let gt2 = [vec![false; 5], vec![true; 5]].concat();
        let r = compute_metrics(
            &[gt1.clone(), pred2],
            &[gt1, gt2],
            &DEFAULT_THRESHOLDS,
        )
        .unwrap();
        assert_eq!(r.miou, 0.5);
        assert_eq!(r.oiou, 0.5);
        assert_eq!(r.precision_at(0.5), Some(0.5));
        assert_eq!(r.precision_at(0.9), Some(0.5));
    }

    #[test]
    fn precision_thresholds_partition_ious() {
        // IoUs 0.6 and 0.4: P@0.5 = 0.5, P@0.7 = 0
        let pred1 = vec![true, true, true, true, false];
        let gt1 = vec![true, true, true, false, true]; // I=3, U=5
        let pred2 = vec![true, true, true, false, false];
        let gt2 = vec![true, true, false, true, true]; // I=2, U=5
        assert_eq!(iou(&pred1, &gt1).unwrap(), 0.6);
        assert_eq!(iou(&pred2, &gt2).unwrap(), 0.4);
        let r = compute_metrics(&[pred1, pred2], &[gt1, gt2], &[0.5, 0.7]).unwrap();
        assert_eq!(r.precision_at(0.5), Some(0.5));
        assert_eq!(r.precision_at(0.7), Some(0.0));
    }

    #[test]
    fn matches_counting_oracle_on_random_masks() {
        let mut rng = SplitMix64::new(31);
        for _ in 0..100 {
            let n = 8 * 8;
            let pred: Vec<bool> = (0..n).map(|_| rng.below(2) == 1).collect();
            let gt: Vec<bool> = (0..n).map(|_| rng.below(2) == 1).collect();
            let mut inter = 0.0;
            let mut union = 0.0;
            for i in 0..n {
                if pred[i] && gt[i] {
                    inter += 1.0;
                }
                if pred[i] || gt[i] {
                    union += 1.0;
                }
            }
            let want = if union == 0.0 { 1.0 } else { inter / union };
            assert_eq!(iou(&pred, &gt).unwrap(), want);
        }
    }

    #[test]
    fn prec_at_is_monotone_non_increasing() {
        let mut rng = SplitMix64::new(32);
        let preds: Vec<Vec<bool>> = (0..20)
            .map(|_| (0..16).map(|_| rng.below(2) == 1).collect())
            .collect();
        let gts: Vec<Vec<bool>> = (0..20)
            .map(|_| (0..16).map(|_| rng.below(2) == 1).collect())
            .collect();
        let r = compute_metrics(&preds, &gts, &DEFAULT_THRESHOLDS).unwrap();
        for w in r.prec_at.windows(2) {
            assert!(w[0].1 >= w[1].1);
        }
        assert!(r.miou >= 0.0 && r.miou <= 1.0);
        assert!(r.oiou >= 0.0 && r.oiou <= 1.0);
    }
}
