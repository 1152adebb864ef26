use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::plan::{Stage, TrainPlan};
use super::stages::{distill_layer, Activations, RunControl};
use crate::model::Model;
use crate::tensor::Scalar;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchCell {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub tokens: u64,
    pub train_mse: f64,
    pub val_mse: f64,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub layer: usize,
    pub cells: Vec<SearchCell>,
}

/// Index of the lowest validation MSE; ties go to the lower learning rate,
/// then the lower batch size. NaN never wins.
pub fn select_cell(cells: &[(f64, usize, f64)]) -> Option<usize> {
    let key = |&(lr, batch, val): &(f64, usize, f64)| {
        (if val.is_nan() { f64::INFINITY } else { val }, lr, batch)
    };
    (0..cells.len()).min_by(|&a, &b| {
        let (va, la, ba) = key(&cells[a]);
        let (vb, lb, bb) = key(&cells[b]);
        va.total_cmp(&vb)
            .then(la.total_cmp(&lb))
            .then(ba.cmp(&bb))
            .then(a.cmp(&b))
    })
}

impl SearchReport {
    pub fn selected(&self) -> &SearchCell {
        self.cells
            .iter()
            .find(|c| c.selected)
            .expect("a cell is always selected")
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("Distillation search, layer {}\n\n", self.layer);
        s.push_str("| lr | batch | steps | train MSE | val MSE | selected |\n");
        s.push_str("|---:|---:|---:|---:|---:|:---:|\n");
        for c in &self.cells {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {:.6} | {:.6} | {} |",
                c.lr,
                c.batch_size,
                c.steps,
                c.train_mse,
                c.val_mse,
                if c.selected { "*" } else { "" }
            );
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
        for c in &self.cells {
            w.serialize(c).map_err(|e| Error::Data(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Distills `layer` (the last one when `None`) once per `(lr, batch)` cell
/// from the same starting student under `plan`, measuring MSE on the
/// training samples and the validation set afterwards.
pub fn hyperparam_search<F: Scalar>(
    teacher: &Model<F>,
    student: &Model<F>,
    train: &Activations<'_, F>,
    val: &Activations<'_, F>,
    layer: Option<usize>,
    grid: &[(f64, usize)],
    plan: &TrainPlan,
) -> Result<SearchReport> {
    if grid.is_empty() {
        return Err(Error::config("search grid is empty"));
    }
    let layer = layer.unwrap_or(student.n_layers().saturating_sub(1));
    train.check(teacher, &[layer])?;
    val.check(teacher, &[layer])?;
    let mut cells = Vec::with_capacity(grid.len());
    for &(lr, batch_size) in grid {
        let mut cell_plan = plan.clone();
        cell_plan.stage = Stage::Pkt;
        cell_plan.schedule.max_lr = lr;
        cell_plan.batch_size = batch_size;
        cell_plan.checkpoint_every = None;
        cell_plan.validate()?;
        let mut s = student.clone();
        let mut ctl = RunControl::new();
        let (report, _) = distill_layer(&mut s, train, Some(val), layer, &cell_plan, &mut ctl)?;
        cells.push(SearchCell {
            lr,
            batch_size,
            steps: report.steps,
            tokens: report.tokens,
            train_mse: super::stages::layer_val_mse(&s, train, layer)?,
            val_mse: report.val_mse_end.unwrap_or(f64::NAN),
            selected: false,
        });
    }
    let keys: Vec<_> = cells
        .iter()
        .map(|c| (c.lr, c.batch_size, c.val_mse))
        .collect();
    let best = select_cell(&keys).expect("non-empty grid");
    cells[best].selected = true;
    Ok(SearchReport { layer, cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tie_break() {
        let cells = [
            (2e-3, 30, 0.5),
            (1e-3, 60, 0.5),
            (1e-3, 30, 0.5),
            (5e-4, 10, 0.7),
        ];
        assert_eq!(select_cell(&cells), Some(2));
        let cells = [(1e-3, 60, f64::NAN), (1e-2, 60, 3.0)];
        assert_eq!(select_cell(&cells), Some(1));
        assert_eq!(select_cell(&[]), None);
    }
}
