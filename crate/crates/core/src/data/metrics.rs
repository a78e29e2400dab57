//! End-point error statistics.

use gmflow_tensor::Real;
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::types::{FlowField, OcclusionMask};

/// Upper bounds of the motion-magnitude buckets `[0,10)`, `[10,40)`, `[40,∞)`.
pub const BUCKET_EDGES: [f64; 2] = [10.0, 40.0];
pub const OUTLIER_ABS: f64 = 3.0;
pub const OUTLIER_REL: f64 = 0.05;

/// Sums and counts from which every reported metric is derived, so reports
/// over several samples can be merged exactly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsAccumulator {
    pub sum_all: f64,
    pub sum_matched: f64,
    pub sum_unmatched: f64,
    pub sum_buckets: [f64; 3],
    pub n_all: usize,
    pub n_matched: usize,
    pub n_unmatched: usize,
    pub n_buckets: [usize; 3],
    pub n_outliers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub epe_all: f64,
    pub epe_matched: f64,
    pub epe_unmatched: f64,
    pub s0_10: f64,
    pub s10_40: f64,
    pub s40plus: f64,
    /// Percentage of outlier pixels.
    pub f1_all: f64,
    pub n_all: usize,
    pub n_matched: usize,
    pub n_unmatched: usize,
    pub n_buckets: [usize; 3],
}

fn mean(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn bucket(magnitude: f64) -> usize {
    BUCKET_EDGES.iter().take_while(|&&e| magnitude >= e).count()
}

pub fn is_outlier(epe: f64, gt_magnitude: f64) -> bool {
    epe > OUTLIER_ABS && epe > OUTLIER_REL * gt_magnitude
}

impl MetricsAccumulator {
    pub fn add<T: Real>(
        &mut self,
        pred: &FlowField<T>,
        gt: &FlowField<T>,
        occlusion: Option<&OcclusionMask>,
        valid: Option<&[bool]>,
    ) -> Result<()> {
        let (h, w) = (gt.height(), gt.width());
        if pred.data.shape() != gt.data.shape() {
            return Err(FlowError::Metrics(format!(
                "prediction {:?} and ground truth {:?} differ in size",
                pred.data.shape(),
                gt.data.shape()
            )));
        }
        if occlusion.is_some_and(|o| (o.height, o.width) != (h, w)) || valid.is_some_and(|v| v.len() != h * w) {
            return Err(FlowError::Metrics("mask size does not match the flow".into()));
        }
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                if valid.is_some_and(|v| !v[p]) {
                    continue;
                }
                let (pu, pv) = pred.at(y, x);
                let (gu, gv) = gt.at(y, x);
                let (pu, pv, gu, gv) = (
                    pu.to_f64().unwrap(),
                    pv.to_f64().unwrap(),
                    gu.to_f64().unwrap(),
                    gv.to_f64().unwrap(),
                );
                let epe = ((pu - gu).powi(2) + (pv - gv).powi(2)).sqrt();
                let mag = (gu * gu + gv * gv).sqrt();
                self.sum_all += epe;
                self.n_all += 1;
                if occlusion.is_some_and(|o| o.data[p]) {
                    self.sum_unmatched += epe;
                    self.n_unmatched += 1;
                } else {
                    self.sum_matched += epe;
                    self.n_matched += 1;
                }
                let b = bucket(mag);
                self.sum_buckets[b] += epe;
                self.n_buckets[b] += 1;
                self.n_outliers += is_outlier(epe, mag) as usize;
            }
        }
        Ok(())
    }

    pub fn report(&self) -> Result<MetricsReport> {
        if self.n_all == 0 {
            return Err(FlowError::Metrics("no valid pixels".into()));
        }
        Ok(MetricsReport {
            epe_all: mean(self.sum_all, self.n_all),
            epe_matched: mean(self.sum_matched, self.n_matched),
            epe_unmatched: mean(self.sum_unmatched, self.n_unmatched),
            s0_10: mean(self.sum_buckets[0], self.n_buckets[0]),
            s10_40: mean(self.sum_buckets[1], self.n_buckets[1]),
            s40plus: mean(self.sum_buckets[2], self.n_buckets[2]),
            f1_all: 100.0 * self.n_outliers as f64 / self.n_all as f64,
            n_all: self.n_all,
            n_matched: self.n_matched,
            n_unmatched: self.n_unmatched,
            n_buckets: self.n_buckets,
        })
    }
}

/// Metrics of one prediction. Unmatched pixels are those marked in
/// `occlusion`; pixels with `valid[p] == false` are ignored.
pub fn compute_metrics<T: Real>(
    pred: &FlowField<T>,
    gt: &FlowField<T>,
    occlusion: Option<&OcclusionMask>,
    valid: Option<&[bool]>,
) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::default();
    acc.add(pred, gt, occlusion, valid)?;
    acc.report()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bucket_edges_are_half_open() {
        assert_eq!(bucket(0.0), 0);
        assert_eq!(bucket(9.999), 0);
        assert_eq!(bucket(10.0), 1);
        assert_eq!(bucket(40.0), 2);
    }

    #[test]
    fn outlier_needs_both_conditions() {
        assert!(!is_outlier(2.0, 50.0));
        assert!(is_outlier(10.0, 100.0));
        assert!(!is_outlier(4.0, 100.0));
    }

    #[test]
    fn three_four_five() {
        let pred = FlowField::<f64>::constant(1, 1, 3.0, 4.0, 1);
        let gt = FlowField::zeros(1, 1, 1);
        let r = compute_metrics(&pred, &gt, None, None).unwrap();
        assert_eq!(r.epe_all, 5.0);
        assert_eq!(r.s0_10, 5.0);
        assert_eq!(r.n_buckets, [1, 0, 0]);
        assert_eq!(r.epe_unmatched, 0.0);
    }

    #[test]
    fn empty_valid_set_is_an_error() {
        let f = FlowField::<f64>::zeros(1, 2, 1);
        assert!(compute_metrics(&f, &f, None, Some(&[false, false])).is_err());
    }
}
