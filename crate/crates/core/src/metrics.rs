//! Detection/classification F-scores and the two-sample significance test.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};
use crate::loss::hungarian_raw;
use crate::synth::NucleusInstance;

/// Cost of an out-of-radius pair. Dominates any sum of feasible distances,
/// so the assignment maximizes the number of feasible pairs first and only
/// then minimizes distance.
const BARRED: f64 = 1e9;

/// Matching radius at the paper's 500 px scale, shrunk proportionally.
pub fn default_radius(image_side: usize) -> f64 {
    6.0 * image_side as f64 / 500.0
}

#[derive(Debug, Clone)]
pub struct MatchOutcome {
    /// (pred index, gt index) with distance <= radius.
    pub tp_pairs: Vec<(usize, usize)>,
    /// Unmatched prediction indices.
    pub fp_preds: Vec<usize>,
    /// Unmatched ground-truth indices.
    pub fn_gts: Vec<usize>,
}

/// Hungarian matching on Euclidean distance, pairs farther than `radius`
/// barred. Matched pairs are detection true positives regardless of class;
/// class credit is decided later from the instance labels.
pub fn match_detections(
    preds: &[NucleusInstance],
    gts: &[NucleusInstance],
    radius: f64,
) -> Result<MatchOutcome> {
    if !(radius > 0.0) {
        return Err(Error::Param(format!(
            "matching radius must be positive, got {radius}"
        )));
    }
    let (n, m) = (preds.len(), gts.len());
    let mut cost = vec![0.0; n * m];
    for (i, p) in preds.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let d = (p.x - g.x).hypot(p.y - g.y);
            cost[i * m + j] = if d <= radius { d } else { BARRED };
        }
    }
    let mut matched_pred = vec![false; n];
    let mut matched_gt = vec![false; m];
    let mut tp_pairs = Vec::new();
    for (i, j) in hungarian_raw(&cost, n, m) {
        if cost[i * m + j] < BARRED {
            matched_pred[i] = true;
            matched_gt[j] = true;
            tp_pairs.push((i, j));
        }
    }
    Ok(MatchOutcome {
        tp_pairs,
        fp_preds: (0..n).filter(|&i| !matched_pred[i]).collect(),
        fn_gts: (0..m).filter(|&j| !matched_gt[j]).collect(),
    })
}

/// Per-image counts: detection-level plus one TP/FP/FN triple per class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageTally {
    pub det_tp: usize,
    pub det_fp: usize,
    pub det_fn: usize,
    pub class_tp: Vec<usize>,
    pub class_fp: Vec<usize>,
    pub class_fn: Vec<usize>,
}

impl ImageTally {
    /// Classification credit requires class agreement: a matched pair with
    /// disagreeing labels counts as an FP for the predicted class and an FN
    /// for the true class.
    pub fn from_match(
        preds: &[NucleusInstance],
        gts: &[NucleusInstance],
        outcome: &MatchOutcome,
        classes: usize,
    ) -> Result<ImageTally> {
        let mut t = ImageTally {
            det_tp: outcome.tp_pairs.len(),
            det_fp: outcome.fp_preds.len(),
            det_fn: outcome.fn_gts.len(),
            class_tp: vec![0; classes],
            class_fp: vec![0; classes],
            class_fn: vec![0; classes],
        };
        let check = |inst: &NucleusInstance| -> Result<usize> {
            if inst.class_id == 0 || inst.class_id > classes {
                return Err(Error::Data(format!(
                    "class id {} outside 1..{classes}",
                    inst.class_id
                )));
            }
            Ok(inst.class_id - 1)
        };
        for &(i, j) in &outcome.tp_pairs {
            let (pc, gc) = (check(&preds[i])?, check(&gts[j])?);
            if pc == gc {
                t.class_tp[pc] += 1;
            } else {
                t.class_fp[pc] += 1;
                t.class_fn[gc] += 1;
            }
        }
        for &i in &outcome.fp_preds {
            t.class_fp[check(&preds[i])?] += 1;
        }
        for &j in &outcome.fn_gts {
            t.class_fn[check(&gts[j])?] += 1;
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub det_tp: usize,
    pub det_fp: usize,
    pub det_fn: usize,
    pub class_tp: Vec<usize>,
    pub class_fp: Vec<usize>,
    pub class_fn: Vec<usize>,
    pub f_detection: f64,
    pub f_class: Vec<f64>,
    pub mean_f_class: f64,
    pub per_image_f_detection: Vec<f64>,
}

/// F = 2TP / (2TP + FP + FN), with the empty case defined as 0.
pub fn f_score(tp: usize, fp: usize, fne: usize) -> f64 {
    let denom = 2 * tp + fp + fne;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Dataset-level report: counts are aggregated across images before any
/// F-score is computed; per-image detection F is kept for significance tests.
pub fn f_scores(images: &[ImageTally], classes: usize) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(Error::Param("f_scores wants at least one image".into()));
    }
    let mut r = EvalReport {
        det_tp: 0,
        det_fp: 0,
        det_fn: 0,
        class_tp: vec![0; classes],
        class_fp: vec![0; classes],
        class_fn: vec![0; classes],
        f_detection: 0.0,
        f_class: vec![0.0; classes],
        mean_f_class: 0.0,
        per_image_f_detection: Vec::with_capacity(images.len()),
    };
    for img in images {
        if img.class_tp.len() != classes {
            return Err(Error::Shape(format!(
                "image tally has {} classes, report wants {classes}",
                img.class_tp.len()
            )));
        }
        r.det_tp += img.det_tp;
        r.det_fp += img.det_fp;
        r.det_fn += img.det_fn;
        for k in 0..classes {
            r.class_tp[k] += img.class_tp[k];
            r.class_fp[k] += img.class_fp[k];
            r.class_fn[k] += img.class_fn[k];
        }
        r.per_image_f_detection
            .push(f_score(img.det_tp, img.det_fp, img.det_fn));
    }
    r.f_detection = f_score(r.det_tp, r.det_fp, r.det_fn);
    for k in 0..classes {
        r.f_class[k] = f_score(r.class_tp[k], r.class_fp[k], r.class_fn[k]);
    }
    r.mean_f_class = if classes == 0 {
        0.0
    } else {
        r.f_class.iter().sum::<f64>() / classes as f64
    };
    Ok(r)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: f64,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Two-sided Welch t-test. The samples are unpaired; p comes from the
/// regularized incomplete beta tail of the t distribution.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Stats(format!(
            "t-test wants at least two samples per side, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Stats("non-finite sample value".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    if va == 0.0 && vb == 0.0 {
        return Err(Error::Stats(
            "both samples have zero variance; t statistic is undefined".into(),
        ));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let se2 = va / na + vb / nb;
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    // two-sided tail: p = I_{df/(df+t^2)}(df/2, 1/2)
    let p = beta_reg(df / 2.0, 0.5, df / (df + t * t));
    Ok(TTest { t, p, df })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn inst(x: f64, y: f64, c: usize) -> NucleusInstance {
        NucleusInstance::new(x, y, c)
    }

    #[test]
    fn within_radius_is_a_true_positive() {
        let preds = vec![inst(10.0, 10.0, 1)];
        let gts = vec![inst(10.0, 14.0, 1)];
        let m = match_detections(&preds, &gts, 6.0).unwrap();
        assert_eq!(m.tp_pairs, vec![(0, 0)]);
        assert!(m.fp_preds.is_empty() && m.fn_gts.is_empty());

        let m = match_detections(&preds, &gts, 3.0).unwrap();
        assert!(m.tp_pairs.is_empty());
        assert_eq!(m.fp_preds, vec![0]);
        assert_eq!(m.fn_gts, vec![0]);
    }

    #[test]
    fn one_gt_cannot_absorb_two_preds() {
        let preds = vec![inst(10.0, 10.0, 1), inst(10.0, 11.0, 1)];
        let gts = vec![inst(10.0, 12.0, 1)];
        let m = match_detections(&preds, &gts, 6.0).unwrap();
        assert_eq!(m.tp_pairs.len(), 1);
        assert_eq!(m.fp_preds.len(), 1);
        assert!(m.fn_gts.is_empty());
        // the closer pred wins
        assert_eq!(m.tp_pairs[0], (1, 0));
    }

    #[test]
    fn zero_radius_is_rejected() {
        assert!(matches!(
            match_detections(&[], &[], 0.0),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn swapping_roles_swaps_fp_and_fn() {
        let mut rng = Rng::new(12);
        for _ in 0..20 {
            let preds: Vec<_> = (0..rng.index(8))
                .map(|_| inst(rng.uniform_in(0.0, 64.0), rng.uniform_in(0.0, 64.0), 1))
                .collect();
            let gts: Vec<_> = (0..rng.index(8))
                .map(|_| inst(rng.uniform_in(0.0, 64.0), rng.uniform_in(0.0, 64.0), 1))
                .collect();
            let ab = match_detections(&preds, &gts, 5.0).unwrap();
            let ba = match_detections(&gts, &preds, 5.0).unwrap();
            assert_eq!(ab.tp_pairs.len(), ba.tp_pairs.len());
            assert_eq!(ab.fp_preds.len(), ba.fn_gts.len());
            assert_eq!(ab.fn_gts.len(), ba.fp_preds.len());
        }
    }

    #[test]
    fn matching_a_missed_gt_never_lowers_f() {
        let mut rng = Rng::new(21);
        for _ in 0..20 {
            let gts: Vec<_> = (0..3 + rng.index(5))
                .map(|_| {
                    inst(
                        rng.uniform_in(0.0, 64.0),
                        rng.uniform_in(0.0, 64.0),
                        1 + rng.index(3),
                    )
                })
                .collect();
            let mut preds: Vec<_> = gts
                .iter()
                .take(gts.len() / 2)
                .map(|g| inst(g.x + 1.0, g.y, g.class_id))
                .collect();
            let score = |preds: &[NucleusInstance]| {
                let m = match_detections(preds, &gts, 6.0).unwrap();
                let t = ImageTally::from_match(preds, &gts, &m, 3).unwrap();
                f_scores(&[t], 3).unwrap().f_detection
            };
            let before = score(&preds);
            let m = match_detections(&preds, &gts, 6.0).unwrap();
            if let Some(&j) = m.fn_gts.first() {
                preds.push(inst(gts[j].x, gts[j].y, gts[j].class_id));
                assert!(score(&preds) >= before - 1e-12);
            }
        }
    }

    #[test]
    fn class_disagreement_costs_both_classes() {
        let preds = vec![inst(10.0, 10.0, 2)];
        let gts = vec![inst(10.0, 11.0, 1)];
        let m = match_detections(&preds, &gts, 6.0).unwrap();
        let t = ImageTally::from_match(&preds, &gts, &m, 3).unwrap();
        assert_eq!(t.det_tp, 1);
        assert_eq!(t.class_tp, vec![0, 0, 0]);
        assert_eq!(t.class_fp, vec![0, 1, 0]);
        assert_eq!(t.class_fn, vec![1, 0, 0]);
    }

    #[test]
    fn report_hand_formula() {
        // TP=2, FP=1, FN=1 -> F_d = 2*2 / (4+1+1) = 2/3
        let t = ImageTally {
            det_tp: 2,
            det_fp: 1,
            det_fn: 1,
            class_tp: vec![2],
            class_fp: vec![1],
            class_fn: vec![1],
        };
        let r = f_scores(&[t], 1).unwrap();
        assert!((r.f_detection - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.mean_f_class - 2.0 / 3.0).abs() < 1e-15);

        // zero predictions, nonzero gts -> 0
        let t = ImageTally {
            det_tp: 0,
            det_fp: 0,
            det_fn: 4,
            class_tp: vec![0],
            class_fp: vec![0],
            class_fn: vec![4],
        };
        assert_eq!(f_scores(&[t], 1).unwrap().f_detection, 0.0);
    }

    #[test]
    fn counts_aggregate_before_f() {
        // image A: 1/0/0 (F=1), image B: 1/4/4 (F=1/5); pooled 2/4/4 -> 1/3,
        // which differs from the mean of per-image scores (0.6).
        let a = ImageTally {
            det_tp: 1,
            det_fp: 0,
            det_fn: 0,
            class_tp: vec![1],
            class_fp: vec![0],
            class_fn: vec![0],
        };
        let b = ImageTally {
            det_tp: 1,
            det_fp: 4,
            det_fn: 4,
            class_tp: vec![1],
            class_fp: vec![4],
            class_fn: vec![4],
        };
        let r = f_scores(&[a, b], 1).unwrap();
        assert!((r.f_detection - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.per_image_f_detection.len(), 2);
        assert!((r.per_image_f_detection[0] - 1.0).abs() < 1e-15);
        assert!((r.per_image_f_detection[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn randomized_counts_match_oracle() {
        let mut rng = Rng::new(7);
        for _ in 0..50 {
            let tally = ImageTally {
                det_tp: rng.index(20),
                det_fp: rng.index(20),
                det_fn: rng.index(20),
                class_tp: vec![rng.index(10), rng.index(10)],
                class_fp: vec![rng.index(10), rng.index(10)],
                class_fn: vec![rng.index(10), rng.index(10)],
            };
            let r = f_scores(std::slice::from_ref(&tally), 2).unwrap();
            let oracle = |tp: usize, fp: usize, fne: usize| {
                let (tp, fp, fne) = (tp as f64, fp as f64, fne as f64);
                let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
                let rc = if tp + fne > 0.0 { tp / (tp + fne) } else { 0.0 };
                if p + rc > 0.0 {
                    2.0 * p * rc / (p + rc)
                } else {
                    0.0
                }
            };
            let want = oracle(tally.det_tp, tally.det_fp, tally.det_fn);
            assert!((r.f_detection - want).abs() < 1e-12);
            assert!(r.f_detection >= 0.0 && r.f_detection <= 1.0);
            for k in 0..2 {
                let want = oracle(tally.class_tp[k], tally.class_fp[k], tally.class_fn[k]);
                assert!((r.f_class[k] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_samples_give_t_zero_p_one() {
        let a = [0.3, 0.5, 0.9, 0.4];
        let r = welch_t_test(&a, &a).unwrap();
        assert_eq!(r.t, 0.0);
        assert_eq!(r.p, 1.0);
    }

    #[test]
    fn separated_samples_are_significant() {
        let a = [0.0, 1e-9, -1e-9, 0.0];
        let b = [1.0, 1.0 + 1e-9, 1.0 - 1e-9, 1.0];
        let r = welch_t_test(&a, &b).unwrap();
        assert!(r.p < 1e-6, "p = {}", r.p);
        assert!(r.t < 0.0);
    }

    #[test]
    fn degenerate_variance_is_an_error() {
        let a = [1.0, 1.0, 1.0];
        let b = [2.0, 2.0];
        assert!(matches!(welch_t_test(&a, &b), Err(Error::Stats(_))));
        // one degenerate side is fine
        let b = [2.0, 2.5];
        assert!(welch_t_test(&a, &b).is_ok());
    }

    #[test]
    fn short_samples_are_rejected() {
        assert!(matches!(
            welch_t_test(&[1.0], &[1.0, 2.0]),
            Err(Error::Stats(_))
        ));
    }

    #[test]
    fn p_matches_numerical_integration() {
        // two-sided p by Simpson integration of the t density tail
        fn p_oracle(t: f64, df: f64) -> f64 {
            use statrs::function::gamma::ln_gamma;
            let norm = (ln_gamma((df + 1.0) / 2.0)
                - ln_gamma(df / 2.0)
                - 0.5 * (df * std::f64::consts::PI).ln())
            .exp();
            let pdf = |x: f64| norm * (1.0 + x * x / df).powf(-(df + 1.0) / 2.0);
            let (lo, hi, n) = (0.0, t.abs(), 200_000);
            let h = (hi - lo) / n as f64;
            let mut s = pdf(lo) + pdf(hi);
            for i in 1..n {
                let x = lo + i as f64 * h;
                s += pdf(x) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            let central = s * h / 3.0;
            (1.0 - 2.0 * central).max(0.0)
        }
        let mut rng = Rng::new(99);
        for _ in 0..10 {
            let a: Vec<f64> = (0..5 + rng.index(6)).map(|_| rng.normal(0.0, 1.0)).collect();
            let b: Vec<f64> = (0..5 + rng.index(6)).map(|_| rng.normal(0.4, 1.5)).collect();
            let r = welch_t_test(&a, &b).unwrap();
            let want = p_oracle(r.t, r.df);
            assert!(
                (r.p - want).abs() < 1e-6,
                "p {} vs oracle {want} (t={}, df={})",
                r.p,
                r.t,
                r.df
            );
        }
    }
}
