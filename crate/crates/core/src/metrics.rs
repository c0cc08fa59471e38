//! Continual-learning metrics over the task-wise accuracy matrix.
//!
//! `T[i][j]` is the accuracy (percent) on task `j` after training task `i`,
//! defined for `j <= i`. Task indices in the public functions are 1-based
//! where they name a training stage (`stability(T, t)`), matching how the
//! quantities are usually reported.

use std::fmt::Write as _;

use crate::error::{Result, SparcError};

/// Lower-triangular accuracy matrix. A matrix may start at a later stage
/// (`first_stage > 0`), e.g. a jointly trained model evaluated once after
/// all tasks; its rows are still "after task i" rows of length `i + 1`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AccuracyMatrix {
    first_stage: usize,
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// A matrix holding only the row after the final task.
    pub fn single_stage(row: Vec<f64>) -> Result<Self> {
        if row.is_empty() {
            return Err(SparcError::Validation("empty accuracy row".into()));
        }
        let mut m = AccuracyMatrix {
            first_stage: row.len() - 1,
            rows: Vec::new(),
        };
        m.push_row(row)?;
        Ok(m)
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let first_stage = rows.first().map_or(0, |r| r.len().saturating_sub(1));
        let mut m = AccuracyMatrix {
            first_stage,
            rows: Vec::new(),
        };
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    /// Append the row for the next stage; it must cover every task so far.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let expected = self.first_stage + self.rows.len() + 1;
        if row.len() != expected {
            return Err(SparcError::Validation(format!(
                "row for stage {expected} must have {expected} entries, got {}",
                row.len()
            )));
        }
        if let Some(bad) = row.iter().find(|v| !(0.0..=100.0).contains(*v)) {
            return Err(SparcError::Validation(format!("accuracy {bad} outside [0, 100]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn first_stage(&self) -> usize {
        self.first_stage
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn num_tasks(&self) -> usize {
        self.first_stage + self.rows.len()
    }

    /// `T[i][j]`, 0-based stage and task.
    pub fn get(&self, stage: usize, task: usize) -> Option<f64> {
        let r = stage.checked_sub(self.first_stage)?;
        self.rows.get(r)?.get(task).copied()
    }

    pub fn last_row(&self) -> Option<&[f64]> {
        self.rows.last().map(|r| r.as_slice())
    }

    fn require_complete(&self, what: &str) -> Result<()> {
        if self.rows.is_empty() {
            return Err(SparcError::Validation(format!("{what}: empty accuracy matrix")));
        }
        if self.first_stage != 0 {
            return Err(SparcError::Validation(format!(
                "{what} needs every stage, matrix starts at stage {}",
                self.first_stage + 1
            )));
        }
        Ok(())
    }

    pub fn diagonal(&self) -> Result<Vec<f64>> {
        self.require_complete("diagonal")?;
        Ok(self.rows.iter().enumerate().map(|(i, r)| r[i]).collect())
    }

    /// CSV with `after_task_i` rows and `on_task_j` columns; cells above the
    /// diagonal are empty.
    pub fn to_csv(&self) -> String {
        let n = self.num_tasks();
        let mut s = String::from("stage");
        for j in 1..=n {
            let _ = write!(s, ",on_task_{j}");
        }
        s.push('\n');
        for (r, row) in self.rows.iter().enumerate() {
            let _ = write!(s, "after_task_{}", self.first_stage + r + 1);
            for j in 0..n {
                match row.get(j) {
                    Some(v) => {
                        let _ = write!(s, ",{v}");
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| SparcError::Validation("empty CSV".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.first() != Some(&"stage")
            || cols[1..]
                .iter()
                .enumerate()
                .any(|(j, c)| *c != format!("on_task_{}", j + 1))
        {
            return Err(SparcError::Validation(format!("bad accuracy-matrix header: {header}")));
        }
        let mut rows = Vec::new();
        for line in lines {
            let cells: Vec<&str> = line.split(',').collect();
            let row: Vec<f64> = cells[1..]
                .iter()
                .filter(|c| !c.is_empty())
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| SparcError::Validation(format!("bad cell in `{line}`: {e}")))?;
            rows.push(row);
        }
        Self::from_rows(rows)
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// `A_T`: mean of the last row.
pub fn final_accuracy(t: &AccuracyMatrix) -> Result<f64> {
    t.last_row()
        .map(mean)
        .ok_or_else(|| SparcError::Validation("empty accuracy matrix".into()))
}

/// Mean over stages of each stage's row mean.
pub fn average_incremental_accuracy(t: &AccuracyMatrix) -> Result<f64> {
    t.require_complete("average incremental accuracy")?;
    Ok(mean(&t.rows.iter().map(|r| mean(r)).collect::<Vec<_>>()))
}

/// Mean decline from each earlier task's initial (diagonal) accuracy to its
/// final accuracy. Negative under backward transfer.
pub fn forgetting(t: &AccuracyMatrix) -> Result<f64> {
    t.require_complete("forgetting")?;
    let n = t.num_tasks();
    if n < 2 {
        return Err(SparcError::Validation("forgetting needs at least 2 tasks".into()));
    }
    let last = &t.rows[n - 1];
    let declines: Vec<f64> = (0..n - 1).map(|j| t.rows[j][j] - last[j]).collect();
    Ok(mean(&declines))
}

/// Mean accuracy on tasks `1..t-1` after training task `t` (1-based).
pub fn stability(m: &AccuracyMatrix, t: usize) -> Result<f64> {
    if t < 2 || t > m.num_tasks() {
        return Err(SparcError::Validation(format!(
            "stability needs 2 <= t <= {}, got {t}",
            m.num_tasks()
        )));
    }
    let row = m
        .rows
        .get(t - 1 - m.first_stage)
        .ok_or_else(|| SparcError::Validation(format!("stage {t} not in matrix")))?;
    Ok(mean(&row[..t - 1]))
}

/// Mean of the diagonal over tasks `1..=t` (accuracy when first learned).
pub fn plasticity(m: &AccuracyMatrix, t: usize) -> Result<f64> {
    let diag = m.diagonal()?;
    if t == 0 || t > diag.len() {
        return Err(SparcError::Validation(format!(
            "plasticity needs 1 <= t <= {}, got {t}",
            diag.len()
        )));
    }
    Ok(mean(&diag[..t]))
}

/// Harmonic mean `2SP / (S + P)`; zero when `S + P = 0`.
pub fn tradeoff(s: f64, p: f64) -> f64 {
    if s + p == 0.0 {
        0.0
    } else {
        2.0 * s * p / (s + p)
    }
}

/// Stability after each stage `t = 2..=T`.
pub fn stability_trace(m: &AccuracyMatrix) -> Result<Vec<f64>> {
    (2..=m.num_tasks()).map(|t| stability(m, t)).collect()
}

/// Fraction of predictions attributed to each task.
pub fn task_probabilities(predicted_tasks: &[usize], num_tasks: usize) -> Result<Vec<f64>> {
    if predicted_tasks.is_empty() {
        return Err(SparcError::Validation("no predictions".into()));
    }
    let mut counts = vec![0usize; num_tasks];
    for &p in predicted_tasks {
        *counts
            .get_mut(p)
            .ok_or_else(|| SparcError::Validation(format!("prediction for task {p} of {num_tasks}")))? += 1;
    }
    Ok(counts
        .iter()
        .map(|c| *c as f64 / predicted_tasks.len() as f64)
        .collect())
}

/// Task-recency diagnostics: how predictions distribute over tasks, and
/// head weight magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasProfile {
    pub probabilities: Vec<f64>,
    pub head_norms: Vec<f64>,
}

/// Final-stage summary of one accuracy matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixSummary {
    pub final_accuracy: f64,
    pub average_incremental: Option<f64>,
    pub forgetting: Option<f64>,
    pub stability: Option<f64>,
    pub plasticity: Option<f64>,
    pub tradeoff: Option<f64>,
}

impl MatrixSummary {
    pub fn compute(m: &AccuracyMatrix) -> Result<Self> {
        let n = m.num_tasks();
        let complete = m.first_stage == 0;
        let stab = (complete && n >= 2).then(|| stability(m, n)).transpose()?;
        let plas = complete.then(|| plasticity(m, n)).transpose()?;
        Ok(MatrixSummary {
            final_accuracy: final_accuracy(m)?,
            average_incremental: complete.then(|| average_incremental_accuracy(m)).transpose()?,
            forgetting: (complete && n >= 2).then(|| forgetting(m)).transpose()?,
            stability: stab,
            plasticity: plas,
            tradeoff: stab.zip(plas).map(|(s, p)| tradeoff(s, p)),
        })
    }

    /// `key = value` lines with the given key prefix; absent values are
    /// written as `na`.
    pub fn write_kv(&self, prefix: &str, out: &mut String) {
        let fmt = |v: Option<f64>| v.map_or("na".to_string(), |x| x.to_string());
        let _ = writeln!(out, "{prefix}final_accuracy = {}", self.final_accuracy);
        let _ = writeln!(
            out,
            "{prefix}average_incremental_accuracy = {}",
            fmt(self.average_incremental)
        );
        let _ = writeln!(out, "{prefix}forgetting = {}", fmt(self.forgetting));
        let _ = writeln!(out, "{prefix}stability = {}", fmt(self.stability));
        let _ = writeln!(out, "{prefix}plasticity = {}", fmt(self.plasticity));
        let _ = writeln!(out, "{prefix}tradeoff = {}", fmt(self.tradeoff));
    }
}
