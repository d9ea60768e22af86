//! Disaggregation metrics: NDE, on/off precision and recall, energy
//! assignment error.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{FhmmError, Result};
use crate::model::{FhmmModel, StateSequence};

fn check_shape(truth: &[Vec<f64>], estimate: &[Vec<f64>]) -> Result<()> {
    if truth.len() != estimate.len() || truth.iter().zip(estimate).any(|(a, b)| a.len() != b.len())
    {
        return Err(FhmmError::Dimension(format!(
            "truth has {} rows, estimate {}; row widths must agree",
            truth.len(),
            estimate.len()
        )));
    }
    Ok(())
}

/// `sqrt(Σ (y − ŷ)² / Σ y²)` over all steps and appliances.
pub fn nde(truth: &[Vec<f64>], estimate: &[Vec<f64>]) -> Result<f64> {
    check_shape(truth, estimate)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in truth.iter().zip(estimate) {
        for (&y, &yh) in a.iter().zip(b) {
            num += (y - yh) * (y - yh);
            den += y * y;
        }
    }
    if den == 0.0 {
        return Err(FhmmError::Undefined("NDE of an all-zero truth".into()));
    }
    Ok((num / den).sqrt())
}

/// On/off detection scores of one appliance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-appliance precision and recall of the "on" indicator, where a state
/// is on when its power level is positive. `0/0` counts as 1.
pub fn precision_recall(
    truth: &StateSequence,
    estimate: &StateSequence,
    model: &FhmmModel,
) -> Result<Vec<PrecisionRecall>> {
    let num_states = model.num_states();
    truth.check(&num_states)?;
    estimate.check(&num_states)?;
    if truth.len() != estimate.len() {
        return Err(FhmmError::Dimension(format!(
            "truth has {} steps, estimate {}",
            truth.len(),
            estimate.len()
        )));
    }
    Ok(model
        .appliances
        .iter()
        .enumerate()
        .map(|(i, app)| {
            let on = |s: usize| app.power_levels[s] > 0.0;
            let (mut tp, mut fp, mut fneg) = (0, 0, 0);
            for t in 0..truth.len() {
                match (on(truth.get(t, i)), on(estimate.get(t, i))) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (true, false) => fneg += 1,
                    (false, false) => {}
                }
            }
            PrecisionRecall {
                precision: ratio(tp, tp + fp),
                recall: ratio(tp, tp + fneg),
            }
        })
        .collect())
}

/// Mean, population standard deviation and median.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std_dev: f64,
    pub median: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: f64::NAN,
                std_dev: f64::NAN,
                median: f64::NAN,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len().is_multiple_of(2) {
            0.5 * (sorted[mid - 1] + sorted[mid])
        } else {
            sorted[mid]
        };
        Self {
            mean,
            std_dev: var.sqrt(),
            median,
        }
    }
}

/// Energy assignment error in percent of total true energy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyError {
    /// `|Σ_t ŷ_{t,i} − Σ_t y_{t,i}| / Σ_{t,j} y_{t,j} · 100`.
    pub errors: Vec<f64>,
    /// `Σ_t y_{t,i} / Σ_{t,j} y_{t,j} · 100`.
    pub shares: Vec<f64>,
    pub summary: Summary,
}

pub fn energy_error(truth: &[Vec<f64>], estimate: &[Vec<f64>]) -> Result<EnergyError> {
    check_shape(truth, estimate)?;
    let m = truth.first().map_or(0, Vec::len);
    let mut true_energy = vec![0.0; m];
    let mut est_energy = vec![0.0; m];
    for (a, b) in truth.iter().zip(estimate) {
        for i in 0..m {
            true_energy[i] += a[i];
            est_energy[i] += b[i];
        }
    }
    let total: f64 = true_energy.iter().sum();
    if total == 0.0 {
        return Err(FhmmError::Undefined(
            "energy error with zero total energy".into(),
        ));
    }
    let errors: Vec<f64> = true_energy
        .iter()
        .zip(&est_energy)
        .map(|(t, e)| (e - t).abs() / total * 100.0)
        .collect();
    let shares = true_energy.iter().map(|t| t / total * 100.0).collect();
    Ok(EnergyError {
        summary: Summary::of(&errors),
        errors,
        shares,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApplianceReport {
    /// 1-based appliance number.
    pub appliance: usize,
    pub precision: f64,
    pub recall: f64,
    pub energy_share: f64,
    pub energy_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub nde: f64,
    pub appliances: Vec<ApplianceReport>,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub energy_error: Summary,
}

/// Scores an estimate against per-appliance truth in watts and states.
pub fn evaluate(
    model: &FhmmModel,
    truth_states: &StateSequence,
    truth_watts: &[Vec<f64>],
    estimate_states: &StateSequence,
) -> Result<EvalReport> {
    let estimate_watts = estimate_states.reconstruct(model);
    let nde = nde(truth_watts, &estimate_watts)?;
    let pr = precision_recall(truth_states, estimate_states, model)?;
    let energy = energy_error(truth_watts, &estimate_watts)?;
    let appliances: Vec<ApplianceReport> = pr
        .iter()
        .enumerate()
        .map(|(i, p)| ApplianceReport {
            appliance: i + 1,
            precision: p.precision,
            recall: p.recall,
            energy_share: energy.shares[i],
            energy_error: energy.errors[i],
        })
        .collect();
    let m = appliances.len() as f64;
    Ok(EvalReport {
        nde,
        mean_precision: pr.iter().map(|p| p.precision).sum::<f64>() / m,
        mean_recall: pr.iter().map(|p| p.recall).sum::<f64>() / m,
        appliances,
        energy_error: energy.summary,
    })
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<10} {:>10} {:>10} {:>14} {:>14}",
            "appliance", "precision", "recall", "energy share", "energy error"
        )?;
        for a in &self.appliances {
            writeln!(
                f,
                "{:<10} {:>9.2}% {:>9.2}% {:>13.2}% {:>13.2}%",
                a.appliance,
                a.precision * 100.0,
                a.recall * 100.0,
                a.energy_share,
                a.energy_error
            )?;
        }
        writeln!(
            f,
            "{:<10} {:>9.2}% {:>9.2}%",
            "average",
            self.mean_precision * 100.0,
            self.mean_recall * 100.0
        )?;
        writeln!(
            f,
            "energy error: mean {:.2}%  std {:.2}%  median {:.2}%",
            self.energy_error.mean, self.energy_error.std_dev, self.energy_error.median
        )?;
        writeln!(f, "NDE: {:.4}", self.nde)
    }
}

/// One point of a plot series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub metric: String,
    pub x: f64,
    pub y: f64,
}

/// Writes `metric,x,y` rows.
pub fn write_plot_csv<W: Write>(points: &[PlotPoint], out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    for p in points {
        writer
            .serialize(p)
            .map_err(|e| FhmmError::InvalidInput(format!("plot csv: {e}")))?;
    }
    writer
        .flush()
        .map_err(|e| FhmmError::InvalidInput(format!("plot csv: {e}")))
}
