//! Pixel-level precision–recall curves and average precision.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, IoContext, Result};

/// Precision and recall at each distinct score, highest first.
#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub auprc: f64,
    pub prevalence: f64,
}

/// Builds the curve by sorting once and sweeping tie groups.
///
/// Predicting positive for `score >= t`, each distinct score is one operating
/// point; `auprc = Σ (R_k − R_{k−1}) · P_k` with `R_0 = 0`.
pub fn pr_curve(scores: &[f32], labels: &[u8]) -> Result<PrCurve> {
    if scores.len() != labels.len() {
        return Err(Error::DimMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFiniteScore(i));
    }
    let positives = labels.iter().filter(|&&l| l != 0).count();
    let n = labels.len();
    if positives == 0 || positives == n {
        return Err(Error::DegenerateLabels);
    }

    let mut order: Vec<u32> = (0..n as u32).collect();
    order.sort_unstable_by(|&a, &b| scores[b as usize].total_cmp(&scores[a as usize]));

    let total_pos = positives as f64;
    let mut curve = PrCurve {
        thresholds: Vec::new(),
        precision: Vec::new(),
        recall: Vec::new(),
        auprc: 0.0,
        prevalence: total_pos / n as f64,
    };
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < n {
        let s = scores[order[i] as usize];
        while i < n && scores[order[i] as usize] == s {
            tp += (labels[order[i] as usize] != 0) as usize;
            seen += 1;
            i += 1;
        }
        let p = tp as f64 / seen as f64;
        let r = tp as f64 / total_pos;
        curve.auprc += (r - prev_recall) * p;
        prev_recall = r;
        curve.thresholds.push(s as f64);
        curve.precision.push(p);
        curve.recall.push(r);
    }
    curve.auprc = curve.auprc.clamp(0.0, 1.0);
    Ok(curve)
}

/// Pools every test pixel across chips into one curve.
pub fn evaluate_chips<S, M>(scores: &[S], masks: &[M]) -> Result<PrCurve>
where
    S: AsRef<[f32]>,
    M: AsRef<[u8]>,
{
    if scores.is_empty() {
        return Err(Error::TooFew("no chips to evaluate".into()));
    }
    if scores.len() != masks.len() {
        return Err(Error::DimMismatch(format!(
            "{} score maps vs {} masks",
            scores.len(),
            masks.len()
        )));
    }
    let s: Vec<f32> = scores.iter().flat_map(|x| x.as_ref().iter().copied()).collect();
    let m: Vec<u8> = masks.iter().flat_map(|x| x.as_ref().iter().copied()).collect();
    pr_curve(&s, &m)
}

/// Writes `threshold,precision,recall` rows followed by a `# auprc=…,prevalence=…` line.
pub fn write_curve_csv(curve: &PrCurve, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["threshold", "precision", "recall"])?;
    for i in 0..curve.thresholds.len() {
        w.write_record([
            curve.thresholds[i].to_string(),
            curve.precision[i].to_string(),
            curve.recall[i].to_string(),
        ])?;
    }
    let mut f = w.into_inner().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e.into_error(),
    })?;
    writeln!(f, "# auprc={},prevalence={}", curve.auprc, curve.prevalence).at(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_worked_example() {
        let c = pr_curve(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0]).unwrap();
        assert!((c.auprc - (0.5 + 2.0 / 3.0 * 0.5)).abs() < 1e-12);
        assert_eq!(c.thresholds.len(), 4);
        assert_eq!(c.recall, vec![0.5, 0.5, 1.0, 1.0]);
    }

    #[test]
    fn constant_scores_equal_prevalence() {
        let labels: Vec<u8> = (0..100).map(|i| (i < 9) as u8).collect();
        let c = pr_curve(&vec![0.3; 100], &labels).unwrap();
        assert_eq!(c.thresholds.len(), 1);
        assert_eq!(c.auprc, 0.09);
        assert_eq!(c.prevalence, 0.09);
    }

    #[test]
    fn perfect_separation() {
        let labels = [0u8, 1, 0, 1, 1];
        let scores: Vec<f32> = labels.iter().map(|&l| l as f32).collect();
        assert_eq!(pr_curve(&scores, &labels).unwrap().auprc, 1.0);
    }

    #[test]
    fn errors() {
        assert!(matches!(pr_curve(&[0.1, 0.2], &[1, 1]), Err(Error::DegenerateLabels)));
        assert!(matches!(pr_curve(&[0.1, 0.2], &[0, 0]), Err(Error::DegenerateLabels)));
        assert!(matches!(pr_curve(&[0.1, f32::NAN], &[0, 1]), Err(Error::NonFiniteScore(1))));
        let empty: [&[f32]; 0] = [];
        let none: [&[u8]; 0] = [];
        assert!(evaluate_chips(&empty, &none).is_err());
    }

    #[test]
    fn pooling_concatenates_chips() {
        let s = [vec![0.9f32, 0.8], vec![0.7, 0.6]];
        let m = [vec![1u8, 0], vec![1, 0]];
        let c = evaluate_chips(&s, &m).unwrap();
        assert!((c.auprc - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn csv_layout() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("m.csv");
        let c = pr_curve(&[0.9, 0.1], &[1, 0]).unwrap();
        write_curve_csv(&c, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "threshold,precision,recall");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("# auprc=1,prevalence=0.5"));
    }
}
