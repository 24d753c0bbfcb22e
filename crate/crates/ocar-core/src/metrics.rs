//! Continual evaluation: the per-task accuracy matrix over time and the
//! scalar metrics derived from it (final accuracy, average anytime accuracy,
//! worst-case accuracy, forgetting), cumulative loss tracking for the convex
//! experiment, and linear probing of frozen features.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{to_batch, BatchTargets, Example};
use crate::linalg::Matrix;
use crate::nn::{softmax_rows, Network};

/// Accuracy on each encountered task's eval set, one row per evaluation step.
/// Rows are ragged: row t has one entry per task encountered by step t.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub rows: Vec<EvalRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    /// Global training step at which the evaluation ran.
    pub step: usize,
    /// Accuracy per encountered task, task order fixed.
    pub acc: Vec<f64>,
}

impl AccuracyMatrix {
    /// Append an evaluation row. Evaluating an empty set of tasks appends
    /// nothing, so all metrics are invariant under it.
    pub fn push_row(&mut self, step: usize, acc: Vec<f64>) {
        if !acc.is_empty() {
            self.rows.push(EvalRow { step, acc });
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.last().map_or(0, |r| r.acc.len())
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Classification accuracy of the network on one eval set.
pub fn accuracy(net: &Network, eval: &[Example]) -> f64 {
    assert!(!eval.is_empty(), "empty eval set");
    let (inputs, targets) = to_batch(eval);
    let outputs = net.forward(&inputs).expect("eval shapes match").outputs;
    let labels = match targets {
        BatchTargets::Classes(l) => l,
        BatchTargets::Values(_) => panic!("accuracy needs class targets"),
    };
    let mut correct = 0usize;
    for (b, &label) in labels.iter().enumerate() {
        let row = outputs.row(b);
        let pred = argmax(row);
        if pred == label {
            correct += 1;
        }
    }
    correct as f64 / labels.len() as f64
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Accuracy on every encountered task's eval set at this point in training.
pub fn evaluate(net: &Network, eval_sets: &[&[Example]]) -> Vec<f64> {
    eval_sets.iter().map(|set| accuracy(net, set)).collect()
}

/// Mean over tasks of the last row: the end-of-stream snapshot accuracy.
pub fn final_acc(mat: &AccuracyMatrix) -> f64 {
    let last = mat.rows.last().expect("empty accuracy matrix");
    last.acc.iter().sum::<f64>() / last.acc.len() as f64
}

/// Average anytime accuracy: mean over evaluation steps of the mean accuracy
/// over tasks encountered by that step.
pub fn aaa(mat: &AccuracyMatrix) -> f64 {
    assert!(!mat.is_empty(), "empty accuracy matrix");
    let per_step: f64 = mat
        .rows
        .iter()
        .map(|r| r.acc.iter().sum::<f64>() / r.acc.len() as f64)
        .sum();
    per_step / mat.rows.len() as f64
}

/// Worst-case accuracy: mean over evaluation steps of the minimum accuracy
/// among all tasks encountered by that step (current task included). The
/// full matrix is always persisted, so alternative definitions can be
/// recomputed post hoc.
pub fn wc_acc(mat: &AccuracyMatrix) -> f64 {
    assert!(!mat.is_empty(), "empty accuracy matrix");
    let per_step: f64 = mat
        .rows
        .iter()
        .map(|r| r.acc.iter().cloned().fold(f64::INFINITY, f64::min))
        .sum();
    per_step / mat.rows.len() as f64
}

/// Peak-minus-final accuracy on the first task.
pub fn forgetting_task1(mat: &AccuracyMatrix) -> f64 {
    let series: Vec<f64> = mat.rows.iter().map(|r| r.acc[0]).collect();
    assert!(series.len() >= 2, "task 1 must be evaluated at least twice");
    let peak = series.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    peak - series.last().unwrap()
}

/// Running sums of per-batch loss (plasticity) and full-history loss
/// (stability), with the per-step series kept for plotting.
#[derive(Debug, Clone, Default, Serialize)]
pub struct CumulativeLossTrack {
    pub lp: f64,
    pub ls: f64,
    pub lp_series: Vec<f64>,
    pub ls_series: Vec<f64>,
}

impl CumulativeLossTrack {
    /// Add one step: the loss experienced on the incoming batch and the loss
    /// over all previously seen data (measured after the update).
    pub fn track(&mut self, batch_loss: f64, full_history_loss: f64) {
        self.lp += batch_loss;
        self.ls += full_history_loss;
        self.lp_series.push(self.lp);
        self.ls_series.push(self.ls);
    }
}

/// Train a fresh linear softmax classifier on frozen penultimate features.
///
/// Full-batch gradient descent with a fixed budget (200 epochs, early stop on
/// plateau); returns accuracy on the eval features.
pub fn linear_probe(net: &Network, train: &[Example], eval: &[Example], seed: u64) -> f64 {
    assert!(net.layers.len() >= 2, "probing needs a feature extractor");
    let (train_x, train_t) = to_batch(train);
    let (eval_x, eval_t) = to_batch(eval);
    let train_feats = net.penultimate_features(&train_x).expect("shapes match");
    let eval_feats = net.penultimate_features(&eval_x).expect("shapes match");
    let train_labels = match train_t {
        BatchTargets::Classes(l) => l,
        _ => panic!("probe needs class targets"),
    };
    let eval_labels = match eval_t {
        BatchTargets::Classes(l) => l,
        _ => panic!("probe needs class targets"),
    };
    let num_classes = train_labels
        .iter()
        .chain(eval_labels.iter())
        .copied()
        .max()
        .unwrap()
        + 1;
    let (w, b) = train_softmax_head(
        &train_feats,
        &train_labels,
        num_classes,
        seed,
        200,
        0.5,
    );
    // eval accuracy with the probe head
    let mut correct = 0usize;
    for i in 0..eval_feats.rows {
        let row = eval_feats.row(i);
        let mut best = 0;
        let mut best_z = f64::NEG_INFINITY;
        for c in 0..num_classes {
            let z: f64 = w.row(c).iter().zip(row).map(|(a, x)| a * x).sum::<f64>() + b[c];
            if z > best_z {
                best_z = z;
                best = c;
            }
        }
        if best == eval_labels[i] {
            correct += 1;
        }
    }
    correct as f64 / eval_labels.len() as f64
}

/// Full-batch softmax regression on a feature matrix.
pub(crate) fn train_softmax_head(
    feats: &Matrix,
    labels: &[usize],
    num_classes: usize,
    seed: u64,
    max_epochs: usize,
    lr: f64,
) -> (Matrix, Vec<f64>) {
    let dim = feats.cols;
    let n = feats.rows as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = (1.0 / dim.max(1) as f64).sqrt();
    let mut w = Matrix::zeros(num_classes, dim);
    for v in w.data.iter_mut() {
        *v = rng.gen_range(-std..std);
    }
    let mut b = vec![0.0f64; num_classes];
    let mut prev_loss = f64::INFINITY;
    let mut plateau = 0;
    for _ in 0..max_epochs {
        // logits = feats·wᵀ + b
        let mut logits = Matrix::zeros(feats.rows, num_classes);
        for i in 0..feats.rows {
            let row = feats.row(i);
            for c in 0..num_classes {
                logits[(i, c)] =
                    w.row(c).iter().zip(row).map(|(a, x)| a * x).sum::<f64>() + b[c];
            }
        }
        let probs = softmax_rows(&logits);
        let mut loss = 0.0;
        let mut wgrad = Matrix::zeros(num_classes, dim);
        let mut bgrad = vec![0.0f64; num_classes];
        for i in 0..feats.rows {
            loss -= probs[(i, labels[i])].max(f64::MIN_POSITIVE).ln();
            let row = feats.row(i);
            for c in 0..num_classes {
                let d = probs[(i, c)] - if c == labels[i] { 1.0 } else { 0.0 };
                bgrad[c] += d;
                let wrow = wgrad.row_mut(c);
                for (gj, xj) in wrow.iter_mut().zip(row) {
                    *gj += d * xj;
                }
            }
        }
        loss /= n;
        for (wv, gv) in w.data.iter_mut().zip(&wgrad.data) {
            *wv -= lr * gv / n;
        }
        for (bv, gv) in b.iter_mut().zip(&bgrad) {
            *bv -= lr * gv / n;
        }
        if prev_loss - loss < 1e-9 {
            plateau += 1;
            if plateau >= 10 {
                break;
            }
        } else {
            plateau = 0;
        }
        prev_loss = loss;
    }
    (w, b)
}

/// Scalar metric summary persisted per run. Accuracy metrics are absent for
/// regression streams, loss metrics for streams that do not track them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSummary {
    pub acc: Option<f64>,
    pub aaa: Option<f64>,
    pub wc_acc: Option<f64>,
    pub forgetting_task1: Option<f64>,
    pub probed_acc: Option<f64>,
    pub lp_final: Option<f64>,
    pub ls_final: Option<f64>,
}

/// Write the accuracy matrix as CSV: one row per eval step, columns padded
/// for not-yet-encountered tasks.
pub fn write_accuracy_csv(mat: &AccuracyMatrix, path: &Path) -> std::io::Result<()> {
    let n_tasks = mat.rows.iter().map(|r| r.acc.len()).max().unwrap_or(0);
    let mut f = std::fs::File::create(path)?;
    let header: Vec<String> = std::iter::once("step".to_string())
        .chain((0..n_tasks).map(|i| format!("task_{i}")))
        .collect();
    writeln!(f, "{}", header.join(","))?;
    for row in &mat.rows {
        let mut cells = vec![row.step.to_string()];
        for i in 0..n_tasks {
            cells.push(row.acc.get(i).map_or(String::new(), |v| format!("{v}")));
        }
        writeln!(f, "{}", cells.join(","))?;
    }
    Ok(())
}
