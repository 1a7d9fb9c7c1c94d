//! Training loops, cross-validation and evaluation metrics.

mod cls;
mod seg;

pub use cls::{
    evaluate_classifier, kfold_split, run_cross_validation, train_classifier, ClsTrainConfig,
    CvSummary, EpochEval, FoldReport,
};
pub use seg::{segmentation_accuracy, train_segmentation, SegTrainConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cell classes, in the fixed output-unit order used everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellClass {
    Excitatory = 0,
    Glial = 1,
    Inhibitory = 2,
}

impl CellClass {
    pub const ALL: [CellClass; 3] = [CellClass::Excitatory, CellClass::Glial, CellClass::Inhibitory];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<CellClass> {
        CellClass::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Contract(format!("class index {i} out of range")))
    }

    pub fn name(self) -> &'static str {
        match self {
            CellClass::Excitatory => "Excitatory",
            CellClass::Glial => "Glial",
            CellClass::Inhibitory => "Inhibitory",
        }
    }

    pub fn parse(s: &str) -> Result<CellClass> {
        CellClass::ALL
            .iter()
            .copied()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Format(format!("unknown cell class {s:?}")))
    }
}

impl std::fmt::Display for CellClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// 3×3 count matrix, rows = true class, columns = predicted class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[usize; 3]; 3],
}

impl ConfusionMatrix {
    pub fn from_pairs(truths: &[CellClass], preds: &[CellClass]) -> Result<ConfusionMatrix> {
        if truths.is_empty() {
            return Err(Error::Contract("confusion matrix of empty prediction list".into()));
        }
        if truths.len() != preds.len() {
            return Err(Error::Contract(format!(
                "confusion matrix needs equal lengths, got {} truths and {} predictions",
                truths.len(),
                preds.len()
            )));
        }
        let mut m = ConfusionMatrix::default();
        for (t, p) in truths.iter().zip(preds.iter()) {
            m.counts[t.index()][p.index()] += 1;
        }
        Ok(m)
    }

    pub fn record(&mut self, truth: CellClass, pred: CellClass) {
        self.counts[truth.index()][pred.index()] += 1;
    }

    pub fn add(&mut self, other: &ConfusionMatrix) {
        for r in 0..3 {
            for c in 0..3 {
                self.counts[r][c] += other.counts[r][c];
            }
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, class: CellClass) -> usize {
        self.counts[class.index()].iter().sum()
    }

    pub fn trace(&self) -> usize {
        (0..3).map(|i| self.counts[i][i]).sum()
    }

    /// diagonal / row sum, in percent; 0 rows give NaN-free 0.
    pub fn sensitivity(&self, class: CellClass) -> f64 {
        let row = self.row_sum(class);
        if row == 0 {
            return 0.0;
        }
        self.counts[class.index()][class.index()] as f64 / row as f64 * 100.0
    }

    /// true negatives / (true negatives + false positives), in percent.
    pub fn specificity(&self, class: CellClass) -> f64 {
        let i = class.index();
        let col: usize = (0..3).map(|r| self.counts[r][i]).sum();
        let fp = col - self.counts[i][i];
        let neg = self.total() - self.row_sum(class);
        if neg == 0 {
            return 0.0;
        }
        (neg - fp) as f64 / neg as f64 * 100.0
    }

    /// trace / total, in percent.
    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            return 0.0;
        }
        self.trace() as f64 / self.total() as f64 * 100.0
    }
}

/// Matrix plus the derived per-class sensitivities and overall accuracy.
pub fn confusion_and_metrics(
    truths: &[CellClass],
    preds: &[CellClass],
) -> Result<(ConfusionMatrix, [f64; 3], f64)> {
    let m = ConfusionMatrix::from_pairs(truths, preds)?;
    let sens = [
        m.sensitivity(CellClass::Excitatory),
        m.sensitivity(CellClass::Glial),
        m.sensitivity(CellClass::Inhibitory),
    ];
    let acc = m.accuracy();
    Ok((m, sens, acc))
}

/// Smallest 1-based epoch e with max(curve[e..]) − curve[e] < epsilon;
/// falls back to the final epoch.
pub fn saturation_epoch(curve: &[f64], epsilon: f64) -> Result<usize> {
    if curve.is_empty() {
        return Err(Error::Contract("saturation_epoch of empty curve".into()));
    }
    for (i, &v) in curve.iter().enumerate() {
        let later_max = curve[i..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if later_max - v < epsilon {
            return Ok(i + 1);
        }
    }
    Ok(curve.len())
}

pub const REPORT_HEADER: &str =
    "method,mean_saturation_accuracy,mean_best_accuracy,std_best_accuracy,saturation_epoch";

/// Renders summaries as CSV and as an aligned text table, accuracies to
/// three decimals.
pub fn report_tables(summaries: &[CvSummary]) -> (String, String) {
    let mut csv = String::from(REPORT_HEADER);
    csv.push('\n');
    for s in summaries {
        csv.push_str(&format!(
            "{},{:.3},{:.3},{:.3},{}\n",
            s.method, s.mean_saturation_accuracy, s.mean_best_accuracy, s.std_best_accuracy,
            s.saturation_epoch
        ));
    }
    let mut text = format!(
        "{:<28} {:>12} {:>12} {:>8} {:>10}\n",
        "Method", "Sat. Acc.", "Best Acc.", "Std", "Sat.Epoch"
    );
    for s in summaries {
        text.push_str(&format!(
            "{:<28} {:>12.3} {:>12.3} {:>8.3} {:>10}\n",
            s.method, s.mean_saturation_accuracy, s.mean_best_accuracy, s.std_best_accuracy,
            s.saturation_epoch
        ));
    }
    (csv, text)
}

/// Parses the CSV that `report_tables` emits (round-trip support).
pub fn parse_report_csv(csv: &str) -> Result<Vec<CvSummary>> {
    let mut lines = csv.lines();
    match lines.next() {
        Some(h) if h == REPORT_HEADER => {}
        _ => return Err(Error::Format("bad report CSV header".into())),
    }
    let mut out = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(Error::Format(format!("bad report CSV row {line:?}")));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Format(format!("bad report number {s:?}")))
        };
        out.push(CvSummary {
            method: cols[0].to_string(),
            mean_saturation_accuracy: num(cols[1])?,
            mean_best_accuracy: num(cols[2])?,
            std_best_accuracy: num(cols[3])?,
            saturation_epoch: cols[4]
                .parse()
                .map_err(|_| Error::Format(format!("bad epoch {:?}", cols[4])))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
