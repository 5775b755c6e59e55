//! (γ, C) grid search by stratified k-fold cross-validation.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{train_svm, SvmConfig};
use crate::error::{Error, Result};
use crate::kernel::SampleMatrix;
use crate::label::Label;

pub const DEFAULT_GAMMAS: [f64; 6] = [0.1, 0.3, 1.0, 3.0, 10.0, 30.0];
pub const DEFAULT_CS: [f64; 5] = [0.1, 0.3, 1.0, 3.0, 10.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub gamma: f64,
    pub c: f64,
    pub fold: usize,
    pub balanced_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearch {
    pub gamma: f64,
    pub c: f64,
    pub mean_balanced_accuracy: f64,
    pub table: Vec<GridCell>,
}

/// Fold id per sample: each class is dealt round-robin over the folds in
/// input order, so every fold gets ⌊n_c/k⌋ or ⌈n_c/k⌉ samples of class c.
pub fn stratified_folds(labels: &[Label], folds: usize) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::Argument(format!("need at least 2 folds, got {folds}")));
    }
    let mut next = [0usize; 2];
    let assignment: Vec<usize> = labels
        .iter()
        .map(|l| {
            let c = usize::from(l.is_positive());
            let f = next[c] % folds;
            next[c] += 1;
            f
        })
        .collect();
    if next[0] < folds || next[1] < folds {
        return Err(Error::Stratification(format!(
            "{folds} folds need at least {folds} samples per class, got {} control and {} pneumonia",
            next[0], next[1]
        )));
    }
    Ok(assignment)
}

fn balanced_accuracy(pred: &[Label], truth: &[Label]) -> f64 {
    let mut hit = [0usize; 2];
    let mut tot = [0usize; 2];
    for (p, t) in pred.iter().zip(truth) {
        let c = usize::from(t.is_positive());
        tot[c] += 1;
        hit[c] += usize::from(p == t);
    }
    0.5 * (hit[0] as f64 / tot[0] as f64 + hit[1] as f64 / tot[1] as f64)
}

/// Picks the pair with the best mean balanced accuracy; ties go to the
/// smaller C, then the smaller γ.
pub fn grid_search(x: &SampleMatrix, labels: &[Label], gammas: &[f64], cs: &[f64], folds: usize, base: &SvmConfig) -> Result<GridSearch> {
    if gammas.is_empty() || cs.is_empty() {
        return Err(Error::Argument("grid must have at least one gamma and one C".into()));
    }
    if x.rows() != labels.len() {
        return Err(Error::Size {
            expected: labels.len(),
            found: x.rows(),
        });
    }
    let fold_of = stratified_folds(labels, folds)?;
    let mut table = Vec::new();
    let mut best: Option<(f64, f64, f64)> = None;
    let mut pairs: Vec<(f64, f64)> = cs.iter().flat_map(|&c| gammas.iter().map(move |&g| (g, c))).collect();
    pairs.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)));
    for (gamma, c) in pairs {
        let cfg = SvmConfig { gamma, c, ..*base };
        let mut sum = 0.0;
        for fold in 0..folds {
            let train: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] != fold).collect();
            let test: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] == fold).collect();
            let train_y: Vec<Label> = train.iter().map(|&i| labels[i]).collect();
            let model = train_svm(&x.select(&train), &train_y, &cfg)?;
            let pred: Vec<Label> = test.iter().map(|&i| model.predict(x.row(i))).collect::<Result<_>>()?;
            let truth: Vec<Label> = test.iter().map(|&i| labels[i]).collect();
            let bal = balanced_accuracy(&pred, &truth);
            sum += bal;
            table.push(GridCell {
                gamma,
                c,
                fold,
                balanced_accuracy: bal,
            });
        }
        let mean = sum / folds as f64;
        if best.is_none_or(|(_, _, m)| mean > m) {
            best = Some((gamma, c, mean));
        }
    }
    let (gamma, c, mean_balanced_accuracy) = best.expect("grid is non-empty");
    Ok(GridSearch {
        gamma,
        c,
        mean_balanced_accuracy,
        table,
    })
}

pub fn write_grid_csv(table: &[GridCell], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "gamma,C,fold,balanced_accuracy")?;
    for r in table {
        writeln!(out, "{},{},{},{}", r.gamma, r.c, r.fold, r.balanced_accuracy)?;
    }
    Ok(())
}
