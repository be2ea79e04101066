//! ROC analysis and background-suppression metrics for score maps.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cube::GroundTruthMap;
use crate::detectors::ScoreMap;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Upper and lower bound on reported ASNPR values, in dB.
pub const ASNPR_CAP_DB: f64 = 80.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    /// Threshold on the min/max normalized map; `+∞` for the `(0, 0)` sentinel.
    pub tau: f64,
    pub pd: f64,
    pub pf: f64,
    pub tp: usize,
    pub fn_: usize,
    pub fp: usize,
    pub tn: usize,
}

/// ROC points ordered by descending threshold, starting at `(0, 0)` and
/// ending at `(1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

fn check_pair<T: Scalar>(score: &ScoreMap<T>, gt: &GroundTruthMap) -> Result<()> {
    if (score.height(), score.width()) != (gt.height(), gt.width()) {
        return Err(Error::ShapeMismatch {
            expected: (gt.height(), gt.width(), 1),
            actual: (score.height(), score.width(), 1),
        });
    }
    if gt.target_count() == 0 || gt.background_count() == 0 {
        return Err(Error::InvalidParameter(
            "ground truth needs at least one target and one background pixel".into(),
        ));
    }
    Ok(())
}

/// Min/max normalization; a constant map becomes all zeros.
fn normalized<T: Scalar>(score: &ScoreMap<T>) -> (Vec<f64>, bool) {
    let s: Vec<f64> = score.scores().iter().map(|v| v.as_f64()).collect();
    let lo = s.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        (s.iter().map(|v| (v - lo) / (hi - lo)).collect(), false)
    } else {
        (vec![0.0; s.len()], true)
    }
}

/// One ROC point per distinct score, pixels with `score ≥ τ` declared positive.
pub fn roc<T: Scalar>(score: &ScoreMap<T>, gt: &GroundTruthMap) -> Result<RocCurve> {
    check_pair(score, gt)?;
    let (norm, _) = normalized(score);
    let raw = score.scores();
    let labels = gt.labels();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| raw[b].partial_cmp(&raw[a]).expect("finite scores"));

    let (targets, background) = (gt.target_count(), gt.background_count());
    let point = |tau: f64, tp: usize, fp: usize| RocPoint {
        tau,
        pd: tp as f64 / targets as f64,
        pf: fp as f64 / background as f64,
        tp,
        fn_: targets - tp,
        fp,
        tn: background - fp,
    };
    let mut points = vec![point(f64::INFINITY, 0, 0)];
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let v = raw[order[i]];
        while i < order.len() && raw[order[i]] == v {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(point(norm[order[i - 1]], tp, fp));
    }
    Ok(RocCurve { points })
}

/// Trapezoidal area under `(P_f, P_d)`.
pub fn auc(curve: &RocCurve) -> f64 {
    curve
        .points
        .windows(2)
        .map(|p| (p[1].pf - p[0].pf) * (p[0].pd + p[1].pd) * 0.5)
        .sum()
}

/// Clips scores at the lower median of the target scores.
pub fn adaptive_truncate<T: Scalar>(score: &ScoreMap<T>, gt: &GroundTruthMap) -> Result<ScoreMap<T>> {
    check_pair(score, gt)?;
    let mut target: Vec<T> = score
        .scores()
        .iter()
        .zip(gt.labels())
        .filter(|(_, &l)| l)
        .map(|(&s, _)| s)
        .collect();
    target.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let clip = target[(target.len() - 1) / 2];
    score.map(|v| v.min(clip))
}

/// Fraction of `sorted` (ascending) that is `≥ tau`.
fn rate_at(sorted: &[f64], tau: f64) -> f64 {
    (sorted.len() - sorted.partition_point(|&v| v < tau)) as f64 / sorted.len() as f64
}

/// Areas under `(τ, P_d)` and `(τ, P_f)` on the normalized map. A constant
/// map gives `(0, 0)`.
pub fn threshold_aucs<T: Scalar>(score: &ScoreMap<T>, gt: &GroundTruthMap) -> Result<(f64, f64)> {
    check_pair(score, gt)?;
    let (norm, constant) = normalized(score);
    if constant {
        return Ok((0.0, 0.0));
    }
    let mut target = Vec::new();
    let mut background = Vec::new();
    for (&v, &l) in norm.iter().zip(gt.labels()) {
        if l {
            target.push(v);
        } else {
            background.push(v);
        }
    }
    let by_value = |a: &f64, b: &f64| a.partial_cmp(b).expect("finite scores");
    target.sort_by(by_value);
    background.sort_by(by_value);

    let mut taus = norm.clone();
    taus.push(0.0);
    taus.push(1.0);
    taus.sort_by(by_value);
    taus.dedup();

    let (mut d, mut f) = (0.0, 0.0);
    for pair in taus.windows(2) {
        let width = pair[1] - pair[0];
        d += width * 0.5 * (rate_at(&target, pair[0]) + rate_at(&target, pair[1]));
        f += width * 0.5 * (rate_at(&background, pair[0]) + rate_at(&background, pair[1]));
    }
    Ok((d, f))
}

/// `10·log10(AUC_dτ / AUC_fτ)` on the adaptively truncated map, capped at
/// ±[`ASNPR_CAP_DB`]. A map that is constant after truncation gives 0 dB.
pub fn asnpr_db<T: Scalar>(score: &ScoreMap<T>, gt: &GroundTruthMap) -> Result<f64> {
    let clipped = adaptive_truncate(score, gt)?;
    let (d, f) = threshold_aucs(&clipped, gt)?;
    if d == 0.0 && f == 0.0 {
        return Ok(0.0);
    }
    if f == 0.0 {
        return Ok(ASNPR_CAP_DB);
    }
    if d == 0.0 {
        return Ok(-ASNPR_CAP_DB);
    }
    Ok((10.0 * (d / f).log10()).clamp(-ASNPR_CAP_DB, ASNPR_CAP_DB))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene_id: String,
    pub auc: f64,
    pub auc_d_tau: f64,
    pub auc_f_tau: f64,
    pub asnpr_db: f64,
    pub seconds: f64,
}

/// All metrics for one scene; `seconds` is the detector's wall-clock time.
pub fn scene_metrics<T: Scalar>(
    scene_id: &str,
    score: &ScoreMap<T>,
    gt: &GroundTruthMap,
    seconds: f64,
) -> Result<SceneMetrics> {
    let (auc_d_tau, auc_f_tau) = threshold_aucs(score, gt)?;
    Ok(SceneMetrics {
        scene_id: scene_id.to_string(),
        auc: auc(&roc(score, gt)?),
        auc_d_tau,
        auc_f_tau,
        asnpr_db: asnpr_db(score, gt)?,
        seconds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub scenes: Vec<SceneMetrics>,
    pub mauc: f64,
    pub masnpr_db: f64,
    pub mean_seconds: f64,
}

/// Sum of sorted values, so the result does not depend on input order.
fn sorted_mean(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len() as f64;
    v.into_iter().sum::<f64>() / n
}

pub fn summarize(results: &[SceneMetrics]) -> Result<BenchmarkSummary> {
    if results.is_empty() {
        return Err(Error::InvalidParameter("no scenes to summarize".into()));
    }
    let mean = |f: fn(&SceneMetrics) -> f64| sorted_mean(results.iter().map(f).collect());
    Ok(BenchmarkSummary {
        scenes: results.to_vec(),
        mauc: mean(|m| m.auc),
        masnpr_db: mean(|m| m.asnpr_db),
        mean_seconds: mean(|m| m.seconds),
    })
}

pub const METRICS_HEADER: &str = "scene_id,auc,auc_d_tau,auc_f_tau,asnpr_db,seconds";

/// Per-scene rows followed by a `MEAN` row.
pub fn metrics_csv(summary: &BenchmarkSummary) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in &summary.scenes {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            m.scene_id, m.auc, m.auc_d_tau, m.auc_f_tau, m.asnpr_db, m.seconds
        );
    }
    let mean = |f: fn(&SceneMetrics) -> f64| sorted_mean(summary.scenes.iter().map(f).collect());
    let _ = writeln!(
        out,
        "MEAN,{},{},{},{},{}",
        summary.mauc,
        mean(|m| m.auc_d_tau),
        mean(|m| m.auc_f_tau),
        summary.masnpr_db,
        summary.mean_seconds
    );
    out
}

pub fn write_metrics_csv(summary: &BenchmarkSummary, path: &Path) -> Result<()> {
    std::fs::write(path, metrics_csv(summary))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: &[f64]) -> ScoreMap<f64> {
        ScoreMap::new(1, v.len(), v.to_vec()).unwrap()
    }

    fn truth(l: &[bool]) -> GroundTruthMap {
        GroundTruthMap::new(1, l.len(), l.to_vec()).unwrap()
    }

    #[test]
    fn perfect_detector() {
        let s = map(&[1.0, 0.0, 0.0, 0.0]);
        let g = truth(&[true, false, false, false]);
        let c = roc(&s, &g).unwrap();
        let pts: Vec<(f64, f64)> = c.points.iter().map(|p| (p.pf, p.pd)).collect();
        assert_eq!(pts, vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);
        assert_eq!(auc(&c), 1.0);
        assert_eq!(threshold_aucs(&s, &g).unwrap(), (1.0, 0.5));
    }

    #[test]
    fn all_equal_conventions() {
        let s = map(&[0.3; 5]);
        let g = truth(&[false, true, false, false, false]);
        assert_eq!(auc(&roc(&s, &g).unwrap()), 0.5);
        assert_eq!(threshold_aucs(&s, &g).unwrap(), (0.0, 0.0));
        assert_eq!(asnpr_db(&s, &g).unwrap(), 0.0);
    }

    #[test]
    fn truncation_uses_lower_median() {
        let s = map(&[0.2, 0.6, 1.0, 0.9, 0.1, 0.0, 0.3]);
        let g = truth(&[true, true, true, false, false, false, false]);
        let t = adaptive_truncate(&s, &g).unwrap();
        assert_eq!(t.scores(), &[0.2, 0.6, 0.6, 0.6, 0.1, 0.0, 0.3]);
        let s = map(&[0.2, 0.6, 0.5, 0.1, 0.0]);
        let g = truth(&[true, true, false, false, false]);
        assert_eq!(adaptive_truncate(&s, &g).unwrap().scores(), &[0.2, 0.2, 0.2, 0.1, 0.0]);
    }

    #[test]
    fn summary_means() {
        let m = |id: &str, auc: f64| SceneMetrics {
            scene_id: id.into(),
            auc,
            auc_d_tau: 0.5,
            auc_f_tau: 0.1,
            asnpr_db: 7.0,
            seconds: 0.01,
        };
        let s = summarize(&[m("a", 1.0), m("b", 0.9)]).unwrap();
        assert!((s.mauc - 0.95).abs() < 1e-15);
        let csv = metrics_csv(&s);
        assert!(csv.starts_with(METRICS_HEADER));
        assert!(csv.lines().last().unwrap().starts_with("MEAN,"));
        assert!(summarize(&[]).is_err());
    }
}
