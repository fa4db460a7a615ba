use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fit, FitReport, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::hcl::HclModel;
use crate::tensor::Element;

pub const LR_RANGE: (f64, f64) = (1e-5, 1e-1);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub lr_values: Vec<f64>,
    pub lambda_sets: Vec<Vec<f64>>,
}

impl Default for GridSpec {
    /// Decades spanning the lr search space; no λ sets (callers supply them
    /// once the head count is known).
    fn default() -> Self {
        Self {
            lr_values: vec![1e-4, 1e-3, 1e-2, 1e-1],
            lambda_sets: Vec::new(),
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lr_values.is_empty() || self.lambda_sets.is_empty() {
            return Err(Error::arg("grid needs at least one lr and one lambda set"));
        }
        if let Some(lr) = self.lr_values.iter().find(|&&lr| !(LR_RANGE.0..=LR_RANGE.1).contains(&lr)) {
            return Err(Error::arg(format!("lr {lr} outside [{}, {}]", LR_RANGE.0, LR_RANGE.1)));
        }
        if let Some(l) = self.lambda_sets.iter().flatten().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return Err(Error::arg(format!("lambda {l} is not a non-negative number")));
        }
        Ok(())
    }

    /// Cells in grid order: lr-major, then lambda set.
    pub fn cells(&self) -> Vec<(f64, Vec<f64>)> {
        self.lr_values
            .iter()
            .flat_map(|&lr| self.lambda_sets.iter().map(move |l| (lr, l.clone())))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellOutcome {
    Finished {
        val_accuracy: f64,
        val_loss: f64,
        report: FitReport,
    },
    Diverged {
        epoch: usize,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub lr: f64,
    pub lambdas: Vec<f64>,
    pub outcome: CellOutcome,
}

impl GridCell {
    fn key(&self) -> Option<(f64, f64, f64)> {
        match self.outcome {
            CellOutcome::Finished {
                val_accuracy, val_loss, ..
            } => Some((val_accuracy, val_loss, self.lr)),
            CellOutcome::Diverged { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridReport {
    /// In grid order.
    pub cells: Vec<GridCell>,
    /// Indices into `cells`, best first; diverged cells last in grid order.
    pub ranking: Vec<usize>,
}

impl GridReport {
    pub fn best(&self) -> Option<&GridCell> {
        self.ranking.first().map(|&i| &self.cells[i]).filter(|c| c.key().is_some())
    }

    pub const CSV_HEADER: &'static str = "rank,lr,lambdas,status,val_accuracy,val_loss,best_epoch,epochs";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for (rank, &i) in self.ranking.iter().enumerate() {
            let c = &self.cells[i];
            let lambdas = c.lambdas.iter().map(f64::to_string).collect::<Vec<_>>().join(";");
            let tail = match &c.outcome {
                CellOutcome::Finished {
                    val_accuracy,
                    val_loss,
                    report,
                } => format!("ok,{val_accuracy},{val_loss},{},{}", report.best_epoch, report.rows.len()),
                CellOutcome::Diverged { epoch, .. } => format!("diverged,,,,{epoch}"),
            };
            out.push_str(&format!("{},{},{lambdas},{tail}\n", rank + 1, c.lr));
        }
        out
    }
}

/// One fit per (lr, λ) cell, in parallel, all from the base seed. Cells are
/// ranked by validation accuracy of the restored best-epoch model, then lower
/// validation loss, then lower lr. Divergence is recorded per cell.
pub fn grid_search<T, F>(
    grid: &GridSpec,
    build: F,
    train: &Dataset,
    val: &Dataset,
    base: &TrainConfig,
) -> Result<GridReport>
where
    T: Element,
    F: Fn(&TrainConfig) -> Result<HclModel<T>> + Sync,
{
    grid.validate()?;
    let cells: Vec<Result<GridCell>> = grid
        .cells()
        .into_par_iter()
        .map(|(lr, lambdas)| {
            let cfg = TrainConfig {
                lr,
                lambdas: Some(lambdas.clone()),
                ..base.clone()
            };
            let model = build(&cfg)?;
            let outcome = match fit(model, train, val, &cfg) {
                Ok((_, report)) => {
                    let best = &report.rows[report.best_epoch - 1];
                    CellOutcome::Finished {
                        val_accuracy: best.val_accuracy,
                        val_loss: best.val_loss,
                        report,
                    }
                }
                Err(Error::Divergence { epoch, reason }) => CellOutcome::Diverged { epoch, reason },
                Err(e) => return Err(e),
            };
            Ok(GridCell { lr, lambdas, outcome })
        })
        .collect();
    let cells = cells.into_iter().collect::<Result<Vec<_>>>()?;
    let mut ranking: Vec<usize> = (0..cells.len()).collect();
    ranking.sort_by(|&a, &b| match (cells[a].key(), cells[b].key()) {
        (Some(x), Some(y)) => y
            .0
            .total_cmp(&x.0)
            .then(x.1.total_cmp(&y.1))
            .then(x.2.total_cmp(&y.2))
            .then(a.cmp(&b)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.cmp(&b),
    });
    Ok(GridReport { cells, ranking })
}
