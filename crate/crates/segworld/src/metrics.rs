//! Mask-overlap metrics and aggregate evaluation reports.
//!
//! Records with no emitted segmentation token score IoU 0 and stay in the
//! mIoU/cIoU denominators, so the overlap metrics and the emission rate are
//! reported over the same record set.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::BinaryMask;
use crate::error::{Error, Result};

/// Per-sample evaluation outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub action: String,
    pub emitted_seg: bool,
    pub iou: f64,
    pub intersection: u64,
    pub union: u64,
}

impl EvalRecord {
    pub fn from_masks(
        sample_id: impl Into<String>,
        action: impl Into<String>,
        pred: &BinaryMask,
        gt: &BinaryMask,
    ) -> Result<Self> {
        let (intersection, union) = intersection_union(pred, gt)?;
        Ok(EvalRecord {
            sample_id: sample_id.into(),
            action: action.into(),
            emitted_seg: true,
            iou: intersection as f64 / union as f64,
            intersection,
            union,
        })
    }

    /// A record for a sample where no valid segmentation token was produced:
    /// IoU 0, intersection 0, and the ground-truth area as the union.
    pub fn non_emission(
        sample_id: impl Into<String>,
        action: impl Into<String>,
        gt: &BinaryMask,
    ) -> Self {
        EvalRecord {
            sample_id: sample_id.into(),
            action: action.into(),
            emitted_seg: false,
            iou: 0.0,
            intersection: 0,
            union: gt.count_ones() as u64,
        }
    }
}

/// Intersection and union cell counts of two same-shaped masks.
pub fn intersection_union(pred: &BinaryMask, gt: &BinaryMask) -> Result<(u64, u64)> {
    if !pred.same_shape(gt) {
        return Err(Error::DimensionMismatch {
            expected_width: gt.width(),
            expected_height: gt.height(),
            actual_width: pred.width(),
            actual_height: pred.height(),
        });
    }
    if gt.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    let mut intersection = 0u64;
    let mut union = 0u64;
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        if p && g {
            intersection += 1;
        }
        if p || g {
            union += 1;
        }
    }
    Ok((intersection, union))
}

/// Intersection-over-union of two masks. The ground truth must be non-empty,
/// so the union is always positive.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (i, u) = intersection_union(pred, gt)?;
    Ok(i as f64 / u as f64)
}

/// Arithmetic mean of per-record IoU; non-emission records contribute 0.
pub fn miou(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    Ok(records.iter().map(|r| r.iou).sum::<f64>() / records.len() as f64)
}

/// Cumulative IoU: summed intersections over summed unions.
pub fn ciou(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let i: u64 = records.iter().map(|r| r.intersection).sum();
    let u: u64 = records.iter().map(|r| r.union).sum();
    if u == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    Ok(i as f64 / u as f64)
}

/// Fraction of records that produced a valid segmentation token.
pub fn seg_emission_rate(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let emitted = records.iter().filter(|r| r.emitted_seg).count();
    Ok(emitted as f64 / records.len() as f64)
}

/// Group records by action and report each group's size and mean IoU.
pub fn per_action_miou(records: &[EvalRecord]) -> Result<BTreeMap<String, (usize, f64)>> {
    if records.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for record in records {
        groups
            .entry(record.action.clone())
            .or_default()
            .push(record.iou);
    }
    Ok(groups
        .into_iter()
        .map(|(action, ious)| {
            let mean = ious.iter().sum::<f64>() / ious.len() as f64;
            (action, (ious.len(), mean))
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerAction {
    pub count: usize,
    pub miou: f64,
}

/// Aggregate report over one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub miou: f64,
    pub ciou: f64,
    pub seg_rate: f64,
    pub per_action: BTreeMap<String, PerAction>,
}

impl MetricsReport {
    pub fn from_records(records: &[EvalRecord]) -> Result<Self> {
        let per_action = per_action_miou(records)?
            .into_iter()
            .map(|(action, (count, miou))| (action, PerAction { count, miou }))
            .collect();
        Ok(MetricsReport {
            miou: miou(records)?,
            ciou: ciou(records)?,
            seg_rate: seg_emission_rate(records)?,
            per_action,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }

    /// CSV rows: the three scalar metrics, then one row per action group.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("key,action,count,value\n");
        out.push_str(&format!("miou,,,{}\n", self.miou));
        out.push_str(&format!("ciou,,,{}\n", self.ciou));
        out.push_str(&format!("seg_rate,,,{}\n", self.seg_rate));
        for (action, entry) in &self.per_action {
            out.push_str(&format!(
                "per_action,{},{},{}\n",
                action, entry.count, entry.miou
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::BinaryMask;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(width: usize, height: usize, bits: &[u8]) -> BinaryMask {
        BinaryMask::new(width, height, bits.iter().map(|&b| b != 0).collect()).unwrap()
    }

    fn record(action: &str, i: u64, u: u64) -> EvalRecord {
        EvalRecord {
            sample_id: "s".into(),
            action: action.into(),
            emitted_seg: true,
            iou: i as f64 / u as f64,
            intersection: i,
            union: u,
        }
    }

    /// Reference IoU: explicit double loop over every cell.
    fn iou_brute_force(pred: &BinaryMask, gt: &BinaryMask) -> f64 {
        let mut i = 0u64;
        let mut u = 0u64;
        for row in 0..gt.height() {
            for col in 0..gt.width() {
                let p = pred.get(row, col);
                let g = gt.get(row, col);
                if p && g {
                    i += 1;
                }
                if p || g {
                    u += 1;
                }
            }
        }
        i as f64 / u as f64
    }

    #[test]
    fn identical_masks_score_one() {
        let m = mask(4, 4, &[1; 16]);
        assert_eq!(iou(&m, &m).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_masks_score_zero() {
        let a = mask(2, 2, &[1, 0, 0, 0]);
        let b = mask(2, 2, &[0, 0, 0, 1]);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn overlapping_rows_score_one_third() {
        // pred = rows {0,1}, gt = rows {1,2} of a 4x4 grid.
        let mut pred_bits = vec![0u8; 16];
        let mut gt_bits = vec![0u8; 16];
        pred_bits[0..8].fill(1);
        gt_bits[4..12].fill(1);
        let pred = mask(4, 4, &pred_bits);
        let gt = mask(4, 4, &gt_bits);
        let (i, u) = intersection_union(&pred, &gt).unwrap();
        assert_eq!((i, u), (4, 12));
        assert!((iou(&pred, &gt).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let a = mask(2, 2, &[1, 0, 0, 0]);
        let b = mask(2, 3, &[1, 0, 0, 0, 0, 0]);
        assert!(matches!(
            iou(&a, &b).unwrap_err(),
            Error::DimensionMismatch { .. }
        ));
    }

    #[test]
    fn empty_ground_truth_rejected() {
        let a = mask(2, 2, &[1, 0, 0, 0]);
        let b = mask(2, 2, &[0, 0, 0, 0]);
        assert!(matches!(
            iou(&a, &b).unwrap_err(),
            Error::EmptyGroundTruth
        ));
    }

    #[test]
    fn iou_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let width = rng.random_range(1..=32);
            let height = rng.random_range(1..=32);
            let gt_bits: Vec<bool> = (0..width * height).map(|_| rng.random_bool(0.5)).collect();
            if !gt_bits.iter().any(|&b| b) {
                continue;
            }
            let pred_bits: Vec<bool> = (0..width * height).map(|_| rng.random_bool(0.5)).collect();
            let gt = BinaryMask::new(width, height, gt_bits).unwrap();
            let pred = BinaryMask::new(width, height, pred_bits).unwrap();
            assert_eq!(iou(&pred, &gt).unwrap(), iou_brute_force(&pred, &gt));
        }
    }

    #[test]
    fn miou_examples() {
        let records = vec![record("a", 1, 1), record("a", 0, 1)];
        assert_eq!(miou(&records).unwrap(), 0.5);
        let thirds = vec![record("a", 1, 3), record("a", 1, 3), record("a", 1, 3)];
        assert!((miou(&thirds).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ciou_examples() {
        // One record I=4,U=12 and one I=12,U=12: ciou = 16/24, miou = (1/3+1)/2.
        let records = vec![record("a", 4, 12), record("a", 12, 12)];
        assert!((ciou(&records).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((miou(&records).unwrap() - 2.0 / 3.0).abs() < 1e-15);

        let balanced = vec![record("a", 1, 10), record("a", 9, 10)];
        assert_eq!(ciou(&balanced).unwrap(), 0.5);
        assert_eq!(miou(&balanced).unwrap(), 0.5);

        let perfect = vec![record("a", 5, 5), record("b", 3, 3)];
        assert_eq!(ciou(&perfect).unwrap(), 1.0);
    }

    #[test]
    fn seg_rate_examples() {
        let all = vec![record("a", 1, 1), record("a", 1, 1)];
        assert_eq!(seg_emission_rate(&all).unwrap(), 1.0);

        let mut partial = vec![record("a", 1, 1)];
        for _ in 0..3 {
            partial.push(EvalRecord::non_emission("s", "a", &mask(2, 2, &[1, 0, 0, 0])));
        }
        assert_eq!(seg_emission_rate(&partial).unwrap(), 0.25);

        // 43% failing to emit leaves a 0.570 emission rate.
        let mut thousand = Vec::new();
        for i in 0..1000 {
            if i < 570 {
                thousand.push(record("a", 1, 1));
            } else {
                thousand.push(EvalRecord::non_emission("s", "a", &mask(2, 2, &[1, 0, 0, 0])));
            }
        }
        assert!((seg_emission_rate(&thousand).unwrap() - 0.570).abs() < 1e-12);
    }

    #[test]
    fn per_action_groups() {
        let records = vec![
            record("hold", 2, 10),
            record("hold", 3, 10),
            record("sit", 8, 10),
        ];
        let groups = per_action_miou(&records).unwrap();
        assert_eq!(groups["hold"], (2, 0.25));
        assert_eq!(groups["sit"], (1, 0.8));

        let single = vec![record("hold", 2, 10), record("hold", 3, 10)];
        let groups = per_action_miou(&single).unwrap();
        assert_eq!(groups["hold"].1, miou(&single).unwrap());
    }

    #[test]
    fn empty_evaluation_rejected() {
        assert!(matches!(miou(&[]).unwrap_err(), Error::EmptyEvaluation));
        assert!(matches!(ciou(&[]).unwrap_err(), Error::EmptyEvaluation));
        assert!(matches!(
            seg_emission_rate(&[]).unwrap_err(),
            Error::EmptyEvaluation
        ));
        assert!(matches!(
            per_action_miou(&[]).unwrap_err(),
            Error::EmptyEvaluation
        ));
    }

    #[test]
    fn replication_leaves_metrics_unchanged() {
        let records = vec![
            record("hold", 2, 10),
            EvalRecord::non_emission("s", "sit", &mask(2, 2, &[1, 1, 0, 0])),
            record("cut", 9, 10),
        ];
        let mut replicated = Vec::new();
        for _ in 0..5 {
            replicated.extend(records.iter().cloned());
        }
        assert!((miou(&records).unwrap() - miou(&replicated).unwrap()).abs() < 1e-15);
        assert!((ciou(&records).unwrap() - ciou(&replicated).unwrap()).abs() < 1e-15);
        assert!(
            (seg_emission_rate(&records).unwrap() - seg_emission_rate(&replicated).unwrap()).abs()
                < 1e-15
        );
    }

    #[test]
    fn equal_unions_make_ciou_equal_miou() {
        let records = vec![record("a", 1, 8), record("b", 3, 8), record("c", 6, 8)];
        assert!((ciou(&records).unwrap() - miou(&records).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn metrics_stay_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let records: Vec<EvalRecord> = (0..200)
            .map(|i| {
                let u = rng.random_range(1..=64u64);
                let inter = rng.random_range(0..=u);
                if rng.random_bool(0.2) {
                    EvalRecord::non_emission(format!("s{i}"), "a", &mask(2, 2, &[1, 0, 0, 0]))
                } else {
                    record("a", inter, u)
                }
            })
            .collect();
        for value in [
            miou(&records).unwrap(),
            ciou(&records).unwrap(),
            seg_emission_rate(&records).unwrap(),
        ] {
            assert!((0.0..=1.0).contains(&value));
        }
    }

    #[test]
    fn report_serialization_keys() {
        let records = vec![record("hold", 2, 10), record("sit", 8, 10)];
        let report = MetricsReport::from_records(&records).unwrap();
        let json = report.to_json();
        for key in ["miou", "ciou", "seg_rate", "per_action"] {
            assert!(json.contains(key), "missing key {key} in {json}");
        }
        let csv = report.to_csv();
        assert!(csv.starts_with("key,action,count,value\n"));
        assert!(csv.contains("per_action,hold,1,"));
        let parsed: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed, report);
    }
}
