//! Recognition metrics: confusion matrix, per-class precision/recall/F1,
//! per-image set metrics with mean/median aggregation, and reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// `counts[t][p]` = samples of true class `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: Vec<String>) -> Self {
        let n = classes.len();
        ConfusionMatrix {
            classes,
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn true_positives(&self, i: usize) -> u64 {
        self.counts[i][i]
    }

    pub fn false_positives(&self, i: usize) -> u64 {
        self.counts.iter().map(|row| row[i]).sum::<u64>() - self.counts[i][i]
    }

    pub fn false_negatives(&self, i: usize) -> u64 {
        self.counts[i].iter().sum::<u64>() - self.counts[i][i]
    }

    /// `true,pred,count` for every non-zero cell, row-major.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("true,pred,count\n");
        for (t, row) in self.counts.iter().enumerate() {
            for (p, &c) in row.iter().enumerate() {
                if c > 0 {
                    writeln!(s, "{},{},{}", self.classes[t], self.classes[p], c).unwrap();
                }
            }
        }
        s
    }
}

/// Tallies `(true, predicted)` label pairs.
pub fn confusion<S: AsRef<str>>(pairs: &[(S, S)], classes: &[String]) -> Result<ConfusionMatrix> {
    let index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    if index.len() != classes.len() {
        return Err(Error::Config("duplicate class names".into()));
    }
    let lookup = |l: &str| index.get(l).copied().ok_or_else(|| Error::UnknownClass(l.to_string()));
    let mut cm = ConfusionMatrix::zeros(classes.to_vec());
    for (t, p) in pairs {
        let (t, p) = (lookup(t.as_ref())?, lookup(p.as_ref())?);
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetricsReport {
    pub classes: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

impl ClassMetricsReport {
    pub fn get(&self, class: &str) -> Option<&ClassMetrics> {
        self.classes.iter().find(|c| c.class == class)
    }

    /// `class,precision,recall,f1` rows followed by the macro averages and
    /// overall accuracy.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,precision,recall,f1\n");
        for c in &self.classes {
            writeln!(s, "{},{:.6},{:.6},{:.6}", c.class, c.precision, c.recall, c.f1).unwrap();
        }
        writeln!(s, "macro_average,{:.6},{:.6},{:.6}", self.macro_precision, self.macro_recall, self.macro_f1).unwrap();
        writeln!(s, "accuracy,{:.6},,", self.accuracy).unwrap();
        s
    }
}

/// Accuracy and per-class precision, recall and F1, with 0/0 taken as 0.
pub fn class_metrics(cm: &ConfusionMatrix) -> Result<ClassMetricsReport> {
    let total = cm.total();
    if cm.classes.is_empty() || total == 0 {
        return Err(Error::Empty("confusion matrix"));
    }
    let n = cm.classes.len();
    let classes: Vec<ClassMetrics> = (0..n)
        .map(|i| {
            let tp = cm.true_positives(i);
            let precision = ratio(tp, tp + cm.false_positives(i));
            let recall = ratio(tp, tp + cm.false_negatives(i));
            ClassMetrics {
                class: cm.classes[i].clone(),
                precision,
                recall,
                f1: f1_score(precision, recall),
            }
        })
        .collect();
    let avg = |f: fn(&ClassMetrics) -> f64| classes.iter().map(f).sum::<f64>() / n as f64;
    Ok(ClassMetricsReport {
        accuracy: ratio((0..n).map(|i| cm.true_positives(i)).sum(), total),
        macro_precision: avg(|c| c.precision),
        macro_recall: avg(|c| c.recall),
        macro_f1: avg(|c| c.f1),
        classes,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SetMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1 of a predicted label set against the truth.
/// Two empty sets score 1; otherwise 0/0 is 0.
pub fn set_metrics<S: AsRef<str>, T: AsRef<str>>(pred: &[S], truth: &[T]) -> SetMetrics {
    let pred: BTreeSet<&str> = pred.iter().map(|s| s.as_ref()).collect();
    let truth: BTreeSet<&str> = truth.iter().map(|s| s.as_ref()).collect();
    if pred.is_empty() && truth.is_empty() {
        return SetMetrics {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        };
    }
    let hit = pred.intersection(&truth).count() as u64;
    let precision = ratio(hit, pred.len() as u64);
    let recall = ratio(hit, truth.len() as u64);
    SetMetrics {
        precision,
        recall,
        f1: f1_score(precision, recall),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub average: SetMetrics,
    pub median: SetMetrics,
}

impl Aggregate {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("statistic,precision,recall,f1\n");
        for (name, m) in [("average", self.average), ("median", self.median)] {
            writeln!(s, "{name},{:.6},{:.6},{:.6}", m.precision, m.recall, m.f1).unwrap();
        }
        s
    }
}

/// Median; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Mean and median of each per-image metric.
pub fn aggregate(per_image: &[SetMetrics]) -> Result<Aggregate> {
    if per_image.is_empty() {
        return Err(Error::Empty("per-image metrics"));
    }
    let column = |f: fn(&SetMetrics) -> f64| per_image.iter().map(f).collect::<Vec<_>>();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (p, r, f) = (column(|m| m.precision), column(|m| m.recall), column(|m| m.f1));
    Ok(Aggregate {
        average: SetMetrics {
            precision: mean(&p),
            recall: mean(&r),
            f1: mean(&f),
        },
        median: SetMetrics {
            precision: median(&p).unwrap(),
            recall: median(&r).unwrap(),
            f1: median(&f).unwrap(),
        },
    })
}

/// Classes with F1 strictly below `threshold`, lowest F1 first.
pub fn low_f1_classes(r: &ClassMetricsReport, threshold: f64) -> Vec<ClassMetrics> {
    let mut low: Vec<ClassMetrics> = r.classes.iter().filter(|c| c.f1 < threshold).cloned().collect();
    low.sort_by(|a, b| a.f1.total_cmp(&b.f1).then_with(|| a.class.cmp(&b.class)));
    low
}

/// Mean recall over a subset of classes.
pub fn subset_mean_recall<S: AsRef<str>>(r: &ClassMetricsReport, subset: &[S]) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::Empty("class subset"));
    }
    let mut sum = 0.0;
    for name in subset {
        let name = name.as_ref();
        sum += r.get(name).ok_or_else(|| Error::UnknownClass(name.to_string()))?.recall;
    }
    Ok(sum / subset.len() as f64)
}

/// Parses `<local-name> <external-name>` lines. Blank lines and `#`
/// comments are skipped; the external name may contain spaces.
pub fn parse_class_mapping(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.splitn(2, char::is_whitespace);
        match (parts.next(), parts.next().map(str::trim)) {
            (Some(local), Some(ext)) if !ext.is_empty() => out.push((local.to_string(), ext.to_string())),
            _ => return Err(Error::Config(format!("class mapping line {}: expected `<local> <external>`", n + 1))),
        }
    }
    Ok(out)
}
