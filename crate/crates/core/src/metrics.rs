//! Grading and detection metrics over ISUP grades.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grade::{IsupGrade, ISUP_CLASSES};

/// Counts over (true grade, predicted grade); rows are the truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; ISUP_CLASSES]; ISUP_CLASSES],
}

impl ConfusionMatrix {
    pub fn from_pairs(truth: &[IsupGrade], predicted: &[IsupGrade]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Parameter(format!(
                "{} true grades vs {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut cm = ConfusionMatrix::default();
        for (t, p) in truth.iter().zip(predicted) {
            cm.counts[t.index()][p.index()] += 1;
        }
        Ok(cm)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_totals(&self) -> [u64; ISUP_CLASSES] {
        let mut out = [0; ISUP_CLASSES];
        for (i, row) in self.counts.iter().enumerate() {
            out[i] = row.iter().sum();
        }
        out
    }

    pub fn col_totals(&self) -> [u64; ISUP_CLASSES] {
        let mut out = [0; ISUP_CLASSES];
        for row in &self.counts {
            for (j, &v) in row.iter().enumerate() {
                out[j] += v;
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut t = ConfusionMatrix::default();
        for i in 0..ISUP_CLASSES {
            for j in 0..ISUP_CLASSES {
                t.counts[j][i] = self.counts[i][j];
            }
        }
        t
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\pred");
        for j in 0..ISUP_CLASSES {
            s.push_str(&format!(",{j}"));
        }
        s.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            s.push_str(&i.to_string());
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Quadratic disagreement weights `((i - j) / (k - 1))^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KappaWeights {
    pub w: [[f64; ISUP_CLASSES]; ISUP_CLASSES],
}

impl KappaWeights {
    pub fn quadratic() -> Self {
        let k = ISUP_CLASSES as f64;
        let mut w = [[0.0; ISUP_CLASSES]; ISUP_CLASSES];
        for (i, row) in w.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let d = (i as f64 - j as f64) / (k - 1.0);
                *v = d * d;
            }
        }
        KappaWeights { w }
    }
}

/// Cohen's quadratic weighted kappa.
///
/// The expected matrix is the outer product of the two marginal histograms
/// scaled to the observed total. Two constant raters agreeing give 1; two
/// constant raters disagreeing have no chance-corrected meaning and error.
pub fn quadratic_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.total();
    if n == 0 {
        return Err(Error::UndefinedMetric("kappa of an empty confusion matrix".into()));
    }
    let rows = cm.row_totals();
    let cols = cm.col_totals();
    let single = |m: &[u64; ISUP_CLASSES]| {
        let nz: Vec<usize> = (0..ISUP_CLASSES).filter(|&i| m[i] > 0).collect();
        (nz.len() == 1).then(|| nz[0])
    };
    if let (Some(a), Some(b)) = (single(&rows), single(&cols)) {
        if a == b {
            return Ok(1.0);
        }
        return Err(Error::UndefinedMetric(format!(
            "both raters are constant but disagree (all true = {a}, all predicted = {b})"
        )));
    }
    let w = KappaWeights::quadratic().w;
    let nf = n as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..ISUP_CLASSES {
        for j in 0..ISUP_CLASSES {
            num += w[i][j] * cm.counts[i][j] as f64;
            den += w[i][j] * rows[i] as f64 * cols[j] as f64 / nf;
        }
    }
    if den == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - num / den)
}

/// Binary AUC from the Mann-Whitney rank statistic with mid-ranks for ties.
pub fn roc_auc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::Parameter("labels and scores differ in length".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs both positive and negative samples".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    let rank_sum: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(&l, _)| l)
        .map(|(_, &r)| r)
        .sum();
    let np = n_pos as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub accuracy: f64,
    pub f1: f64,
    pub auc: f64,
}

/// Cancer-vs-benign metrics; positives are grades >= 1 and a score above 0.5
/// counts as a positive call.
pub fn detection_metrics(truth: &[IsupGrade], malignancy_scores: &[f64]) -> Result<DetectionMetrics> {
    if truth.is_empty() {
        return Err(Error::Parameter("no samples to evaluate".into()));
    }
    let labels: Vec<bool> = truth.iter().map(|g| g.is_cancer()).collect();
    let auc = roc_auc(&labels, malignancy_scores)?;
    let (mut tp, mut fp, mut fn_, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for (&l, &s) in labels.iter().zip(malignancy_scores) {
        let p = s > 0.5;
        match (l, p) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            _ => {}
        }
        if l == p {
            correct += 1;
        }
    }
    let f1 = if 2 * tp + fp + fn_ == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    };
    Ok(DetectionMetrics {
        accuracy: correct as f64 / labels.len() as f64,
        f1,
        auc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradingReport {
    pub n: usize,
    pub confusion: ConfusionMatrix,
    /// `None` when kappa is undefined (constant disagreeing raters).
    pub kappa: Option<f64>,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub mean_abs_error: f64,
    /// Predictions at least two grades away from the truth.
    pub severe_errors: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

pub fn grading_report(truth: &[IsupGrade], predicted: &[IsupGrade]) -> Result<GradingReport> {
    if truth.is_empty() {
        return Err(Error::Parameter("no slides to grade".into()));
    }
    let confusion = ConfusionMatrix::from_pairs(truth, predicted)?;
    let mut warnings = Vec::new();
    let kappa = match quadratic_kappa(&confusion) {
        Ok(k) => Some(k),
        Err(e) => {
            warnings.push(e.to_string());
            None
        }
    };
    let n = truth.len();
    let correct = (0..ISUP_CLASSES).map(|i| confusion.counts[i][i]).sum::<u64>();
    let rows = confusion.row_totals();
    let cols = confusion.col_totals();
    let mut f1_sum = 0.0;
    for c in 0..ISUP_CLASSES {
        let tp = confusion.counts[c][c];
        let denom = rows[c] + cols[c];
        if denom == 0 {
            warnings.push(format!("grade {c} absent from truth and predictions; F1 set to 0"));
            continue;
        }
        f1_sum += 2.0 * tp as f64 / denom as f64;
    }
    let diffs: Vec<u8> = truth
        .iter()
        .zip(predicted)
        .map(|(t, p)| t.value().abs_diff(p.value()))
        .collect();
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(GradingReport {
        n,
        confusion,
        kappa,
        accuracy: correct as f64 / n as f64,
        macro_f1: f1_sum / ISUP_CLASSES as f64,
        mean_abs_error: diffs.iter().map(|&d| d as f64).sum::<f64>() / n as f64,
        severe_errors: diffs.iter().filter(|&&d| d >= 2).count(),
        warnings,
    })
}
