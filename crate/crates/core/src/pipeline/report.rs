//! Accuracy and confusion reports.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::Condition;

/// One classified recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    /// Reference label (empty when unknown).
    pub label: String,
    pub condition: String,
    pub predicted: String,
    /// Backend scores in the bundle's label order.
    pub scores: Vec<f64>,
}

/// Accuracy and confusion matrix (rows: reference, columns: predicted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub total: u64,
    pub correct: u64,
    pub accuracy: f64,
    pub confusion: Vec<Vec<u64>>,
}

impl ConditionReport {
    fn empty(n_labels: usize) -> Self {
        Self {
            total: 0,
            correct: 0,
            accuracy: 0.0,
            confusion: vec![vec![0; n_labels]; n_labels],
        }
    }

    fn add(&mut self, truth: usize, predicted: usize) {
        self.confusion[truth][predicted] += 1;
        self.total += 1;
        if truth == predicted {
            self.correct += 1;
        }
    }

    fn finish(&mut self) {
        let trace: u64 = (0..self.confusion.len()).map(|i| self.confusion[i][i]).sum();
        let total: u64 = self.confusion.iter().flatten().sum();
        debug_assert_eq!(trace, self.correct);
        debug_assert_eq!(total, self.total);
        self.accuracy = if total == 0 { 0.0 } else { trace as f64 / total as f64 };
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub labels: Vec<String>,
    pub pooled: ConditionReport,
    /// Keyed by condition tag.
    pub conditions: BTreeMap<String, ConditionReport>,
}

impl EvalReport {
    /// Builds a report. Predictions whose reference or predicted label is
    /// not in `labels` are an error.
    pub fn from_predictions(labels: &[String], preds: &[Prediction]) -> Result<Self, String> {
        let index = |l: &str| {
            labels
                .iter()
                .position(|x| x == l)
                .ok_or_else(|| format!("label {l:?} is not in the model's label set"))
        };
        let mut pooled = ConditionReport::empty(labels.len());
        let mut conditions: BTreeMap<String, ConditionReport> = BTreeMap::new();
        for p in preds {
            let t = index(&p.label)?;
            let q = index(&p.predicted)?;
            pooled.add(t, q);
            conditions
                .entry(p.condition.clone())
                .or_insert_with(|| ConditionReport::empty(labels.len()))
                .add(t, q);
        }
        pooled.finish();
        conditions.values_mut().for_each(ConditionReport::finish);
        Ok(Self {
            labels: labels.to_vec(),
            pooled,
            conditions,
        })
    }

    pub fn accuracy(&self, condition: &str) -> Option<f64> {
        self.conditions.get(condition).map(|c| c.accuracy)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Condition tags ordered clean first, then by ascending SBR; unknown
    /// tags last in lexicographic order.
    pub fn condition_order(&self) -> Vec<&str> {
        let mut tags: Vec<&str> = self.conditions.keys().map(String::as_str).collect();
        let key = |t: &str| match t.parse::<Condition>() {
            Ok(Condition::NoSpeech) => (0, 0.0),
            Ok(Condition::Sbr(db)) => (1, db),
            Err(_) => (2, 0.0),
        };
        tags.sort_by(|a, b| {
            let (ka, kb) = (key(a), key(b));
            ka.0.cmp(&kb.0).then(ka.1.total_cmp(&kb.1)).then(a.cmp(b))
        });
        tags
    }

    /// Human-readable accuracy table followed by the pooled confusion matrix.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let tag_w = self
            .conditions
            .keys()
            .map(String::len)
            .chain([9])
            .max()
            .unwrap_or(9);
        let _ = writeln!(out, "{:<tag_w$}  {:>8}  {:>7}", "condition", "accuracy", "n");
        for tag in self.condition_order() {
            let c = &self.conditions[tag];
            let _ = writeln!(out, "{:<tag_w$}  {:>7.1}%  {:>7}", tag, 100.0 * c.accuracy, c.total);
        }
        let _ = writeln!(
            out,
            "{:<tag_w$}  {:>7.1}%  {:>7}",
            "pooled",
            100.0 * self.pooled.accuracy,
            self.pooled.total
        );
        let lab_w = self.labels.iter().map(String::len).max().unwrap_or(1).max(6);
        let _ = writeln!(out);
        let _ = write!(out, "{:<lab_w$}", "ref\\hyp");
        for l in &self.labels {
            let _ = write!(out, " {:>w$}", l, w = l.len().max(5));
        }
        let _ = writeln!(out);
        for (i, l) in self.labels.iter().enumerate() {
            let _ = write!(out, "{:<lab_w$}", l);
            for (j, h) in self.labels.iter().enumerate() {
                let _ = write!(out, " {:>w$}", self.pooled.confusion[i][j], w = h.len().max(5));
            }
            let _ = writeln!(out);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(label: &str, predicted: &str, cond: &str) -> Prediction {
        Prediction {
            id: format!("{label}-{predicted}-{cond}"),
            label: label.into(),
            condition: cond.into(),
            predicted: predicted.into(),
            scores: vec![],
        }
    }

    fn labels() -> Vec<String> {
        vec!["a".into(), "b".into(), "c".into()]
    }

    #[test]
    fn perfect_predictions() {
        let preds: Vec<_> = ["a", "b", "c", "a"].iter().map(|l| pred(l, l, "clean")).collect();
        let r = EvalReport::from_predictions(&labels(), &preds).unwrap();
        assert_eq!(r.pooled.accuracy, 1.0);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(r.pooled.confusion[i][j], 0);
                }
            }
        }
        assert_eq!(r.pooled.confusion[0][0], 2);
    }

    #[test]
    fn conditions_are_grouped_disjointly() {
        let preds = vec![
            pred("a", "a", "clean"),
            pred("b", "a", "sbr+20"),
            pred("c", "c", "sbr+20"),
            pred("a", "b", "clean"),
        ];
        let r = EvalReport::from_predictions(&labels(), &preds).unwrap();
        assert_eq!(r.conditions.len(), 2);
        assert_eq!(r.conditions["clean"].total, 2);
        assert_eq!(r.conditions["sbr+20"].total, 2);
        assert_eq!(r.pooled.total, 4);
        assert_eq!(r.accuracy("clean"), Some(0.5));
        for c in r.conditions.values().chain([&r.pooled]) {
            let trace: u64 = (0..3).map(|i| c.confusion[i][i]).sum();
            let total: u64 = c.confusion.iter().flatten().sum();
            assert_eq!(c.accuracy, trace as f64 / total as f64);
        }
        let rows: Vec<u64> = r.pooled.confusion.iter().map(|r| r.iter().sum()).collect();
        assert_eq!(rows, vec![2, 1, 1]);
    }

    #[test]
    fn fifteen_class_shape() {
        let labels: Vec<String> = (0..15).map(|i| format!("scene{i:02}")).collect();
        let preds: Vec<_> = labels
            .iter()
            .flat_map(|l| (0..26).map(move |_| pred(l, l, "clean")))
            .collect();
        let r = EvalReport::from_predictions(&labels, &preds).unwrap();
        assert_eq!(r.pooled.confusion.len(), 15);
        assert!(r.pooled.confusion.iter().all(|row| row.len() == 15));
        assert_eq!(r.pooled.total, 390);
    }

    #[test]
    fn unknown_label_is_an_error() {
        assert!(EvalReport::from_predictions(&labels(), &[pred("z", "a", "clean")]).is_err());
    }

    #[test]
    fn json_and_table() {
        let preds = vec![pred("a", "a", "sbr+5"), pred("b", "b", "clean"), pred("c", "a", "sbr-5")];
        let r = EvalReport::from_predictions(&labels(), &preds).unwrap();
        assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r);
        assert_eq!(r.condition_order(), vec!["clean", "sbr-5", "sbr+5"]);
        let t = r.to_table();
        assert!(t.contains("pooled"));
        assert!(t.find("clean").unwrap() < t.find("sbr-5").unwrap());
    }
}
