//! Per-task precision, recall and F1, their mean (F1-final), and report
//! formatting.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, LabelVector, Tag};
use crate::error::{Error, Result};
use crate::network::{HeadMode, Model, TaskLogits};
use crate::numerics::Float;

/// Positive iff `logit[1] > logit[0]` (two-logit) or `sigmoid > 0.5`
/// (one-logit). Inactive tasks stay negative.
pub fn predict_labels(logits: &TaskLogits) -> LabelVector {
    let mut out = LabelVector::default();
    for (k, &tag) in logits.tasks.iter().enumerate() {
        let v = logits.task(k);
        let positive = match logits.mode {
            HeadMode::TwoLogit => v[1] > v[0],
            HeadMode::OneLogit => 1.0 / (1.0 + (-v[0]).exp()) > 0.5,
        };
        out.set(tag, positive);
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Counts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn merge(&mut self, other: &Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

/// Confusion counts for each active task, in task order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tasks: Vec<Tag>,
    pub counts: Vec<Counts>,
}

impl ConfusionCounts {
    pub fn new(tasks: &[Tag]) -> Self {
        Self {
            tasks: tasks.to_vec(),
            counts: vec![Counts::default(); tasks.len()],
        }
    }

    pub fn add(&mut self, pred: &LabelVector, reference: &LabelVector) {
        for (c, &t) in self.counts.iter_mut().zip(&self.tasks) {
            c.add(pred.get(t), reference.get(t));
        }
    }

    pub fn merge(&mut self, other: &ConfusionCounts) -> Result<()> {
        if self.tasks != other.tasks {
            return Err(Error::Contract("merging confusion counts over different tasks".into()));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| a.merge(b));
        Ok(())
    }

    pub fn get(&self, tag: Tag) -> Option<&Counts> {
        self.tasks.iter().position(|&t| t == tag).map(|k| &self.counts[k])
    }

    /// Counts summed over tasks.
    pub fn pooled(&self) -> Counts {
        let mut total = Counts::default();
        self.counts.iter().for_each(|c| total.merge(c));
        total
    }
}

pub fn accumulate_confusion(tasks: &[Tag], preds: &[LabelVector], refs: &[LabelVector]) -> Result<ConfusionCounts> {
    if preds.len() != refs.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} references",
            preds.len(),
            refs.len()
        )));
    }
    let mut c = ConfusionCounts::new(tasks);
    preds.iter().zip(refs).for_each(|(p, r)| c.add(p, r));
    Ok(c)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall and F1 of one task; every zero denominator gives 0.
pub fn score(c: &Counts) -> TaskScore {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    TaskScore { precision, recall, f1 }
}

pub fn f1_scores(c: &ConfusionCounts) -> Vec<TaskScore> {
    c.counts.iter().map(score).collect()
}

/// Arithmetic mean of per-task F1.
pub fn f1_final(per_task: &[f64]) -> Result<f64> {
    if per_task.is_empty() {
        return Err(Error::Contract("f1_final of an empty task list".into()));
    }
    Ok(per_task.iter().sum::<f64>() / per_task.len() as f64)
}

/// Anything that maps an example to a label prediction.
pub trait Classifier: Sync {
    fn tasks(&self) -> &[Tag];
    fn predict(&self, example: &Example) -> Result<LabelVector>;
    /// Short identifier of the configuration that produced the predictions.
    fn fingerprint(&self) -> String {
        String::new()
    }
}

impl<T: Float> Classifier for Model<T> {
    fn tasks(&self) -> &[Tag] {
        &self.config.task_subset
    }

    fn predict(&self, example: &Example) -> Result<LabelVector> {
        Ok(predict_labels(&self.forward(&example.features, false, 0)?))
    }

    fn fingerprint(&self) -> String {
        config_fingerprint(&self.config)
    }
}

/// FNV-1a over the JSON form of `value`, as 16 hex digits.
pub fn config_fingerprint<S: Serialize>(value: &S) -> String {
    let text = serde_json::to_string(value).unwrap_or_default();
    let hash = text
        .bytes()
        .fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3));
    format!("{hash:016x}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: Vec<Tag>,
    pub scores: Vec<TaskScore>,
    pub f1_final: f64,
    /// F1 over counts pooled across tasks.
    pub micro_f1: f64,
    pub num_clips: usize,
    pub fingerprint: String,
    pub counts: ConfusionCounts,
}

impl EvalReport {
    pub fn from_counts(counts: ConfusionCounts, fingerprint: impl Into<String>) -> Result<Self> {
        let scores = f1_scores(&counts);
        let f1s: Vec<f64> = scores.iter().map(|s| s.f1).collect();
        Ok(Self {
            tasks: counts.tasks.clone(),
            f1_final: f1_final(&f1s)?,
            micro_f1: score(&counts.pooled()).f1,
            num_clips: counts.counts.first().map_or(0, |c| c.total() as usize),
            fingerprint: fingerprint.into(),
            scores,
            counts,
        })
    }

    /// F1 of `tag`, or `None` if the task was inactive.
    pub fn f1(&self, tag: Tag) -> Option<f64> {
        self.tasks.iter().position(|&t| t == tag).map(|k| self.scores[k].f1)
    }

    /// Per-task F1 in canonical column order.
    pub fn columns(&self) -> [Option<f64>; 5] {
        Tag::ALL.map(|t| self.f1(t))
    }

    /// Aligned table: one F1 row plus precision and recall rows.
    pub fn table(&self, label: &str) -> String {
        let mut out = table_header(label.len().max(9));
        let width = label.len().max(9);
        out.push_str(&table_row(label, width, &self.columns(), Some(self.f1_final)));
        let pick = |f: fn(&TaskScore) -> f64| {
            Tag::ALL.map(|t| self.tasks.iter().position(|&x| x == t).map(|k| f(&self.scores[k])))
        };
        out.push_str(&table_row("precision", width, &pick(|s| s.precision), None));
        out.push_str(&table_row("recall", width, &pick(|s| s.recall), None));
        let _ = writeln!(out, "clips: {}  micro-F1: {:.2}", self.num_clips, 100.0 * self.micro_f1);
        out
    }

    pub fn json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Header for rows printed by [`table_row`].
pub fn table_header(label_width: usize) -> String {
    let mut s = format!("{:<label_width$}", "");
    for t in Tag::ALL {
        let _ = write!(s, " {:>7}", t.marker());
    }
    s.push_str("  F1-final\n");
    s
}

/// One row of percentages to two decimals; inactive tasks print `---`.
pub fn table_row(label: &str, label_width: usize, columns: &[Option<f64>; 5], final_score: Option<f64>) -> String {
    let mut s = format!("{label:<label_width$}");
    for c in columns {
        match c {
            Some(v) => {
                let _ = write!(s, " {:>7.2}", 100.0 * v);
            }
            None => {
                let _ = write!(s, " {:>7}", "---");
            }
        }
    }
    if let Some(f) = final_score {
        let _ = write!(s, "  {:>8.2}", 100.0 * f);
    }
    s.push('\n');
    s
}

/// Predicts every example (in parallel, order preserved) and scores
/// against the stored labels.
pub fn evaluate<C: Classifier + ?Sized>(model: &C, data: &[Example], tasks: &[Tag]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    if let Some(t) = tasks.iter().find(|t| !model.tasks().contains(t)) {
        return Err(Error::Contract(format!("model has no head for task {t}")));
    }
    let preds = data
        .par_iter()
        .map(|ex| model.predict(ex).map_err(|e| e.in_clip(&ex.id)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<LabelVector> = data.iter().map(|e| e.labels).collect();
    let counts = accumulate_confusion(tasks, &preds, &refs)?;
    EvalReport::from_counts(counts, model.fingerprint())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::FeatureMatrix;

    fn logits(mode: HeadMode, values: Vec<f64>) -> TaskLogits {
        let n = values.len() / mode.width();
        TaskLogits::new(Tag::ALL[..n].to_vec(), mode, values).unwrap()
    }

    #[test]
    fn prediction_rules() {
        assert!(predict_labels(&logits(HeadMode::TwoLogit, vec![0.2, 0.9])).get(Tag::Prolongation));
        assert!(!predict_labels(&logits(HeadMode::TwoLogit, vec![0.5, 0.5])).get(Tag::Prolongation));
        assert!(!predict_labels(&logits(HeadMode::OneLogit, vec![0.0])).get(Tag::Prolongation));
        assert!(predict_labels(&logits(HeadMode::OneLogit, vec![1e-9])).get(Tag::Prolongation));
    }

    #[test]
    fn f1_arithmetic() {
        let perfect = score(&Counts { tp: 5, ..Default::default() });
        assert_eq!(perfect.f1, 1.0);
        let s = score(&Counts { tp: 3, fp: 1, fn_: 1, tn: 0 });
        assert_eq!((s.precision, s.recall, s.f1), (0.75, 0.75, 0.75));
        assert_eq!(score(&Counts::default()).f1, 0.0);
        assert_eq!(f1_final(&[0.4]).unwrap(), 0.4);
        assert!(f1_final(&[]).is_err());
    }

    #[test]
    fn confusion_extremes() {
        let refs: Vec<LabelVector> = (0..8u8)
            .map(|i| LabelVector::from_bits([i & 1, (i >> 1) & 1, (i >> 2) & 1, 1, 0]))
            .collect();
        let same = accumulate_confusion(&Tag::ALL, &refs, &refs).unwrap();
        assert!(same.counts.iter().all(|c| c.fp == 0 && c.fn_ == 0));
        let flipped: Vec<LabelVector> = refs.iter().map(|r| LabelVector(r.0.map(|b| !b))).collect();
        let c = accumulate_confusion(&Tag::ALL, &flipped, &refs).unwrap();
        assert!(c.counts.iter().all(|c| c.tp == 0 && c.tn == 0));
        assert!(accumulate_confusion(&Tag::ALL, &refs[..2], &refs).is_err());
    }

    struct Oracle;
    impl Classifier for Oracle {
        fn tasks(&self) -> &[Tag] {
            &Tag::ALL
        }
        fn predict(&self, ex: &Example) -> Result<LabelVector> {
            Ok(ex.labels)
        }
    }

    struct AlwaysNegative;
    impl Classifier for AlwaysNegative {
        fn tasks(&self) -> &[Tag] {
            &Tag::ALL
        }
        fn predict(&self, _: &Example) -> Result<LabelVector> {
            Ok(LabelVector::default())
        }
    }

    fn example(i: usize, bits: [u8; 5]) -> Example {
        Example {
            id: format!("e{i}"),
            speaker_id: "s".into(),
            features: FeatureMatrix::new(vec![0.0; 80], 1, 80).unwrap(),
            labels: LabelVector::from_bits(bits),
        }
    }

    #[test]
    fn evaluate_with_reference_models() {
        let data: Vec<Example> = (0..6)
            .map(|i| example(i, [(i % 2) as u8, 1, (i % 3 == 0) as u8, 0, 1]))
            .map(|mut e| {
                if e.id == "e1" {
                    e.labels.set(Tag::WordRepetition, true);
                }
                e
            })
            .collect();
        let r = evaluate(&Oracle, &data, &Tag::ALL).unwrap();
        assert_eq!(r.f1_final, 1.0);
        assert_eq!(r.num_clips, 6);
        assert_eq!(r, evaluate(&Oracle, &data, &Tag::ALL).unwrap());

        let negatives: Vec<Example> = (0..4).map(|i| example(i, [0; 5])).collect();
        let r = evaluate(&AlwaysNegative, &negatives, &Tag::ALL).unwrap();
        assert_eq!(r.f1_final, 0.0);
        assert!(evaluate(&Oracle, &[], &Tag::ALL).is_err());
    }

    #[test]
    fn table_marks_inactive_tasks() {
        let counts = ConfusionCounts {
            tasks: vec![Tag::Block],
            counts: vec![Counts { tp: 1, fp: 0, fn_: 0, tn: 1 }],
        };
        let r = EvalReport::from_counts(counts, "x").unwrap();
        let table = r.table("single");
        let row = table.lines().nth(1).unwrap();
        assert_eq!(row.matches("---").count(), 4);
        assert!(row.contains("100.00"));
        assert!(table.lines().next().unwrap().contains("[]"));
        let parsed: EvalReport = serde_json::from_str(&r.json_line()).unwrap();
        assert_eq!(parsed, r);
    }
}
