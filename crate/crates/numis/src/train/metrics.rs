//! Per-concept evaluation statistics.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Metrics with a zero denominator are reported as `None`, never as 0.
    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> Option<f64> {
        let (p, r) = (self.precision()?, self.recall()?);
        if p + r == 0.0 {
            None
        } else {
            Some(2.0 * p * r / (p + r))
        }
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

/// Evaluation result for one concept.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptEval {
    pub concept: String,
    pub confusion: ConfusionMatrix,
}

/// Per-concept confusion matrices from thresholded predictions.
///
/// `predictions` and `actuals` are per-sample vectors of per-concept flags.
pub fn evaluate_predictions(
    concepts: &[String],
    predictions: &[Vec<bool>],
    actuals: &[Vec<bool>],
) -> Vec<ConceptEval> {
    let mut out: Vec<ConceptEval> = concepts
        .iter()
        .map(|c| ConceptEval { concept: c.clone(), confusion: ConfusionMatrix::default() })
        .collect();
    for (pred, act) in predictions.iter().zip(actuals) {
        for (c, eval) in out.iter_mut().enumerate() {
            eval.confusion.record(pred[c], act[c]);
        }
    }
    out
}

/// Header for the per-epoch statistics log.
pub const CSV_HEADER: &str = "epoch,split,loss,concept,acc,prec,rec,f1,tp,fp,tn,fn";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{:.4}", x)).unwrap_or_default()
}

/// One row per concept; undefined metrics are left empty.
pub fn csv_rows(epoch: usize, split: &str, loss: f32, evals: &[ConceptEval]) -> String {
    let mut s = String::new();
    if evals.is_empty() {
        s.push_str(&format!("{},{},{:.6},,,,,,,,,\n", epoch, split, loss));
        return s;
    }
    for e in evals {
        let m = &e.confusion;
        s.push_str(&format!(
            "{},{},{:.6},{},{},{},{},{},{},{},{},{}\n",
            epoch,
            split,
            loss,
            e.concept,
            fmt_opt(m.accuracy()),
            fmt_opt(m.precision()),
            fmt_opt(m.recall()),
            fmt_opt(m.f1()),
            m.tp,
            m.fp,
            m.tn,
            m.fn_
        ));
    }
    s
}
