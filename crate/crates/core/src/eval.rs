//! Confusion-matrix metrics, ROC curves, AUC and comparison tables.

use std::cmp::Ordering;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::annotations::Label;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// The same counts with the other class taken as positive.
    pub fn swapped(&self) -> Self {
        ConfusionMatrix {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
        }
    }
}

pub fn confusion(preds: &[Label], truths: &[Label], positive: Label) -> Result<ConfusionMatrix> {
    if preds.len() != truths.len() {
        return Err(Error::shape(format!("{} predictions", truths.len()), preds.len()));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in preds.iter().zip(truths) {
        match (p == positive, t == positive) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, true) => cm.fn_ += 1,
            (false, false) => cm.tn += 1,
        }
    }
    Ok(cm)
}

/// Precision, recall, F1 and accuracy. `None` marks a 0/0 ratio.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub accuracy: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn prf_accuracy(cm: &ConfusionMatrix) -> Metrics {
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let recall = ratio(cm.tp, cm.tp + cm.fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    Metrics {
        precision,
        recall,
        f1,
        accuracy: ratio(cm.tp + cm.tn, cm.total()),
    }
}

/// How per-class precision, recall and F1 are reported.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Averaging {
    /// The positive (malignant) class only.
    #[default]
    Positive,
    /// Unweighted mean over both classes; undefined if either class is.
    Macro,
}

impl FromStr for Averaging {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positive" => Ok(Averaging::Positive),
            "macro" => Ok(Averaging::Macro),
            other => Err(Error::InvalidArgument(format!("unknown averaging `{other}`"))),
        }
    }
}

impl fmt::Display for Averaging {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Averaging::Positive => "positive",
            Averaging::Macro => "macro",
        })
    }
}

pub fn metrics_with(cm: &ConfusionMatrix, averaging: Averaging) -> Metrics {
    let pos = prf_accuracy(cm);
    match averaging {
        Averaging::Positive => pos,
        Averaging::Macro => {
            let neg = prf_accuracy(&cm.swapped());
            let mean = |a: Option<f64>, b: Option<f64>| Some((a? + b?) / 2.0);
            Metrics {
                precision: mean(pos.precision, neg.precision),
                recall: mean(pos.recall, neg.recall),
                f1: mean(pos.f1, neg.f1),
                accuracy: pos.accuracy,
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    /// Scores `>= threshold` are called positive; the first point uses +inf.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

fn check_scores(scores: &[f64], truths: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != truths.len() {
        return Err(Error::shape(format!("{} scores", truths.len()), scores.len()));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::InvalidArgument(format!("score {s} is not a number")));
    }
    let pos = truths.iter().filter(|&&t| t).count();
    let neg = truths.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    Ok((pos, neg))
}

/// Operating points over every distinct score, highest first. Tied scores
/// move together, and the curve runs from (0,0) to (1,1).
pub fn roc_points(scores: &[f64], truths: &[bool]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = check_scores(scores, truths)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if truths[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(points)
}

/// Trapezoidal area under a curve sorted by fpr.
pub fn area(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

pub fn auc(scores: &[f64], truths: &[bool]) -> Result<f64> {
    Ok(area(&roc_points(scores, truths)?))
}

pub fn roc_to_csv(points: &[RocPoint]) -> String {
    let mut s = String::from("threshold,fpr,tpr\n");
    for p in points {
        let _ = writeln!(s, "{},{:.8},{:.8}", p.threshold, p.fpr, p.tpr);
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocSummary {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// ROC over the pooled pixels of all maps, with mask pixels as truth.
pub fn pixel_roc(prob_maps: &[&[f32]], masks: &[&[u8]]) -> Result<RocSummary> {
    if prob_maps.len() != masks.len() {
        return Err(Error::shape(format!("{} masks", prob_maps.len()), masks.len()));
    }
    let mut scores = Vec::new();
    let mut truths = Vec::new();
    for (p, m) in prob_maps.iter().zip(masks) {
        if p.len() != m.len() {
            return Err(Error::shape(format!("{} mask pixels", p.len()), m.len()));
        }
        scores.extend(p.iter().map(|&v| f64::from(v)));
        truths.extend(m.iter().map(|&v| v > 0));
    }
    if !truths.iter().any(|&t| t) {
        return Err(Error::SingleClass);
    }
    let points = roc_points(&scores, &truths)?;
    Ok(RocSummary { auc: area(&points), points })
}

/// Scored predictions of one network on a labeled evaluation set.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkResult {
    pub name: String,
    /// Identifies the data split the network was trained and tested on.
    pub split_fingerprint: String,
    pub truths: Vec<Label>,
    /// Malignant-class probabilities; `>= 0.5` predicts malignant.
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub name: String,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
    pub roc: Vec<RocPoint>,
    pub auc: Option<f64>,
}

pub fn evaluate_scores(name: &str, truths: &[Label], scores: &[f64], averaging: Averaging) -> Result<EvalReport> {
    let preds: Vec<Label> = scores
        .iter()
        .map(|&s| if s >= 0.5 { Label::Malignant } else { Label::Benign })
        .collect();
    let cm = confusion(&preds, truths, Label::Malignant)?;
    let binary: Vec<bool> = truths.iter().map(|l| l.is_malignant()).collect();
    let (roc, auc) = match roc_points(scores, &binary) {
        Ok(points) => (points.clone(), Some(area(&points))),
        Err(Error::SingleClass) => (Vec::new(), None),
        Err(e) => return Err(e),
    };
    Ok(EvalReport {
        name: name.to_string(),
        confusion: cm,
        metrics: metrics_with(&cm, averaging),
        roc,
        auc,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonReport {
    pub rows: Vec<EvalReport>,
}

/// One report row per network. All networks must share a split and the
/// evaluation items.
pub fn compare_networks(results: &[NetworkResult], averaging: Averaging) -> Result<ComparisonReport> {
    let first = results.first().ok_or_else(|| Error::Empty("no networks to compare".into()))?;
    for r in results {
        if r.split_fingerprint != first.split_fingerprint {
            return Err(Error::InvalidArgument(format!(
                "`{}` was evaluated on split {} but `{}` on {}; refusing to compare",
                r.name, r.split_fingerprint, first.name, first.split_fingerprint
            )));
        }
        if r.truths != first.truths {
            return Err(Error::InvalidArgument(format!(
                "`{}` and `{}` were scored on different items",
                r.name, first.name
            )));
        }
    }
    let rows = results
        .iter()
        .map(|r| evaluate_scores(&r.name, &r.truths, &r.scores, averaging))
        .collect::<Result<_>>()?;
    Ok(ComparisonReport { rows })
}

struct Cell(Option<f64>);

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(v) => write!(f, "{v:.4}"),
            None => f.write_str("NA"),
        }
    }
}

impl ComparisonReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("network,precision,recall,f1,accuracy,auc,tp,fp,fn,tn\n");
        for r in &self.rows {
            let m = &r.metrics;
            let c = &r.confusion;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.name,
                Cell(m.precision),
                Cell(m.recall),
                Cell(m.f1),
                Cell(m.accuracy),
                Cell(r.auc),
                c.tp,
                c.fp,
                c.fn_,
                c.tn
            );
        }
        s
    }

    /// Aligned plain-text table, values in percent.
    pub fn to_text(&self) -> String {
        let pct = |v: Option<f64>| v.map(|v| format!("{:.2}", 100.0 * v)).unwrap_or_else(|| "NA".into());
        let header = ["Network", "Precision", "Recall", "F1 Score", "Accuracy"];
        let body: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                let m = &r.metrics;
                [r.name.clone(), pct(m.precision), pct(m.recall), pct(m.f1), pct(m.accuracy)]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &body {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut s = String::new();
        let line = |s: &mut String, cells: [&str; 5]| {
            let _ = write!(s, "{:<w$}", cells[0], w = widths[0]);
            for (c, w) in cells[1..].iter().zip(&widths[1..]) {
                let _ = write!(s, "  {c:>w$}");
            }
            s.push('\n');
        };
        line(&mut s, header);
        let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
        line(&mut s, [&rule[0], &rule[1], &rule[2], &rule[3], &rule[4]]);
        for row in &body {
            line(&mut s, [&row[0], &row[1], &row[2], &row[3], &row[4]]);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// P(score+ > score-) + P(tie) / 2 by comparing every pair.
    fn rank_statistic(scores: &[f64], truths: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &ti) in truths.iter().enumerate() {
            for (j, &tj) in truths.iter().enumerate() {
                if ti && !tj {
                    den += 1.0;
                    num += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        Ordering::Greater => 1.0,
                        Ordering::Equal => 0.5,
                        Ordering::Less => 0.0,
                    };
                }
            }
        }
        num / den
    }

    fn labels(bits: &[bool]) -> Vec<Label> {
        bits.iter().map(|&b| if b { Label::Malignant } else { Label::Benign }).collect()
    }

    #[test]
    fn confusion_examples() {
        let t = labels(&[true; 5]);
        let cm = confusion(&t, &t, Label::Malignant).unwrap();
        assert_eq!((cm.fp, cm.fn_, cm.tp), (0, 0, 5));
        let truths = labels(&[true, false, true, false]);
        let preds = labels(&[false, true, false, true]);
        let cm = confusion(&preds, &truths, Label::Malignant).unwrap();
        assert_eq!((cm.tp, cm.tn), (0, 0));
        assert!(confusion(&preds[..3], &truths, Label::Malignant).is_err());

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let p: Vec<bool> = (0..50).map(|_| rng.gen()).collect();
        let t: Vec<bool> = (0..50).map(|_| rng.gen()).collect();
        let cm = confusion(&labels(&p), &labels(&t), Label::Malignant).unwrap();
        let mut o = [0usize; 4];
        for i in 0..50 {
            o[(usize::from(!p[i]) << 1) | usize::from(!t[i])] += 1;
        }
        assert_eq!([cm.tp, cm.fp, cm.fn_, cm.tn], o);
        assert_eq!(cm.total(), 50);
    }

    #[test]
    fn metric_examples() {
        let m = prf_accuracy(&ConfusionMatrix { tp: 48, tn: 48, fp: 1, fn_: 1 });
        assert!((m.accuracy.unwrap() - 96.0 / 98.0).abs() < 1e-12);
        assert!((m.accuracy.unwrap() - 0.9796).abs() < 5e-5);
        assert_eq!(m.precision, m.recall);
        assert_eq!(m.f1, m.precision);
        let m = prf_accuracy(&ConfusionMatrix { tn: 10, ..Default::default() });
        assert_eq!(m.accuracy, Some(1.0));
        assert_eq!((m.precision, m.recall, m.f1), (None, None, None));
        let cm = ConfusionMatrix { tp: 3, fp: 1, fn_: 2, tn: 4 };
        let mac = metrics_with(&cm, Averaging::Macro);
        assert!((mac.precision.unwrap() - (0.75 + 4.0 / 6.0) / 2.0).abs() < 1e-12);
        assert!((mac.recall.unwrap() - (0.6 + 0.8) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn roc_examples() {
        let pts = roc_points(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert!(pts.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(), 1.0);
        let pts = roc_points(&[0.3; 6], &[true, false, true, false, false, true]).unwrap();
        let xy: Vec<(f64, f64)> = pts.iter().map(|p| (p.fpr, p.tpr)).collect();
        assert_eq!(xy, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(area(&pts), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(Error::SingleClass)));
        assert!(auc(&[f64::NAN, 0.2], &[true, false]).is_err());
        let csv = roc_to_csv(&pts);
        assert!(csv.starts_with("threshold,fpr,tpr\ninf,0.00000000,0.00000000\n"));
    }

    #[test]
    fn roc_matches_threshold_scan() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(30);
        let scores: Vec<f64> = (0..30).map(|_| f64::from(rng.gen_range(0u8..12)) / 11.0).collect();
        let mut truths: Vec<bool> = (0..30).map(|_| rng.gen()).collect();
        truths[0] = true;
        truths[1] = false;
        let pos = truths.iter().filter(|&&t| t).count() as f64;
        let neg = 30.0 - pos;
        for p in roc_points(&scores, &truths).unwrap() {
            let tp = (0..30).filter(|&i| truths[i] && scores[i] >= p.threshold).count() as f64;
            let fp = (0..30).filter(|&i| !truths[i] && scores[i] >= p.threshold).count() as f64;
            assert_eq!((p.tpr, p.fpr), (tp / pos, fp / neg));
        }
    }

    #[test]
    fn pixel_roc_examples() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mask: Vec<u8> = (0..64).map(|_| rng.gen_bool(0.2) as u8).collect();
        let exact: Vec<f32> = mask.iter().map(|&m| f32::from(m)).collect();
        assert_eq!(pixel_roc(&[&exact], &[&mask]).unwrap().auc, 1.0);
        assert_eq!(pixel_roc(&[&[0.4f32; 64]], &[&mask]).unwrap().auc, 0.5);
        let noisy: Vec<f32> = (0..64).map(|_| rng.gen()).collect();
        let flat_s: Vec<f64> = noisy.iter().map(|&v| f64::from(v)).collect();
        let flat_t: Vec<bool> = mask.iter().map(|&m| m > 0).collect();
        let got = pixel_roc(&[&noisy[..32], &noisy[32..]], &[&mask[..32], &mask[32..]]).unwrap();
        assert!((got.auc - rank_statistic(&flat_s, &flat_t)).abs() < 1e-12);
        assert!(matches!(pixel_roc(&[&exact], &[&[0u8; 64]]), Err(Error::SingleClass)));
    }

    #[test]
    fn comparison_report() {
        let truths = labels(&[true, false, true, false, true]);
        let row = |name: &str, fp: &str, scores: Vec<f64>| NetworkResult {
            name: name.into(),
            split_fingerprint: fp.into(),
            truths: truths.clone(),
            scores,
        };
        let a = row("proposed", "s1", vec![0.9, 0.1, 0.8, 0.3, 0.7]);
        let b = row("baseline", "s1", vec![0.6, 0.7, 0.4, 0.2, 0.9]);
        let rep = compare_networks(&[a.clone(), b, a.clone()], Averaging::Positive).unwrap();
        assert_eq!(rep.rows.len(), 3);
        assert_eq!(rep.rows[0].metrics, rep.rows[2].metrics);
        assert_eq!(rep.rows[0].metrics.accuracy, Some(1.0));
        for r in &rep.rows {
            for v in [r.metrics.precision, r.metrics.recall, r.metrics.f1, r.metrics.accuracy] {
                assert!((0.0..=1.0).contains(&v.unwrap()));
            }
        }
        let text = rep.to_text();
        assert_eq!(text.lines().count(), 5);
        let widths: Vec<usize> = text.lines().map(str::len).collect();
        assert!(widths.iter().all(|&w| w == widths[0]), "{text}");
        assert!(rep.to_csv().starts_with("network,precision,recall,f1,accuracy,auc"));
        let other = row("other", "s2", vec![0.5; 5]);
        assert!(compare_networks(&[a, other], Averaging::Positive).is_err());
    }

    proptest! {
        #[test]
        fn auc_equals_rank_statistic(
            pairs in prop::collection::vec((0u8..20, any::<bool>()), 2..100),
        ) {
            let scores: Vec<f64> = pairs.iter().map(|p| f64::from(p.0) / 19.0).collect();
            let mut truths: Vec<bool> = pairs.iter().map(|p| p.1).collect();
            truths[0] = true;
            truths[1] = false;
            let a = auc(&scores, &truths).unwrap();
            prop_assert!((a - rank_statistic(&scores, &truths)).abs() <= 1e-9);
            // monotone transforms and label flips
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert!((auc(&warped, &truths).unwrap() - a).abs() <= 1e-12);
            let flipped: Vec<bool> = truths.iter().map(|t| !t).collect();
            prop_assert!((auc(&scores, &flipped).unwrap() - (1.0 - a)).abs() <= 1e-9);
            let pts = roc_points(&scores, &truths).unwrap();
            prop_assert!(pts.windows(2).all(|w| w[0].fpr <= w[1].fpr && w[0].tpr <= w[1].tpr));
            let last = pts.last().unwrap();
            prop_assert_eq!((pts[0].fpr, pts[0].tpr, last.fpr, last.tpr), (0.0, 0.0, 1.0, 1.0));
        }

        #[test]
        fn accuracy_bounds(tp in 0usize..20, fp in 0usize..20, fn_ in 0usize..20, tn in 0usize..20) {
            let cm = ConfusionMatrix { tp, fp, fn_, tn };
            let m = prf_accuracy(&cm);
            if let Some(a) = m.accuracy {
                prop_assert!((0.0..=1.0).contains(&a));
                prop_assert_eq!(a == 1.0, fp == 0 && fn_ == 0);
            }
        }
    }
}
