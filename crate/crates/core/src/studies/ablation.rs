use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lens::LensProfile;
use crate::model::decode::{greedy_accuracy, is_correct, DecodeMode};
use crate::model::task::MultimodalSequence;
use crate::model::tuned::ModelPair;
use crate::replay::{apply_and_decode, replay_with_profile, ReplayConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub tau: f64,
    pub alpha: f64,
    pub accuracy: Option<f64>,
    /// Accuracy minus the unreplayed tuned accuracy.
    pub delta: Option<f64>,
    /// Set when optimization diverged for some task in this cell.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub baseline: f64,
    pub taus: Vec<f64>,
    pub alphas: Vec<f64>,
    /// Row-major over `taus × alphas`.
    pub cells: Vec<AblationCell>,
}

impl AblationReport {
    pub fn cell(&self, tau_index: usize, alpha_index: usize) -> &AblationCell {
        &self.cells[tau_index * self.alphas.len() + alpha_index]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("tau,alpha,accuracy,delta,error\n");
        for c in &self.cells {
            let opt = |v: Option<f64>| v.map(|v| format!("{v}")).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                c.tau,
                c.alpha,
                opt(c.accuracy),
                opt(c.delta),
                c.error.as_deref().unwrap_or("").replace(',', ";")
            ));
        }
        s
    }
}

/// Greedy accuracy of replay on `tasks` for every `(tau, alpha)`, other
/// settings taken from `base_config`. A cell whose optimization fails
/// numerically records the error instead of aborting the grid.
pub fn ablation_grid(
    pair: &ModelPair,
    tasks: &[MultimodalSequence],
    taus: &[f64],
    alphas: &[f64],
    base_config: &ReplayConfig,
) -> Result<AblationReport> {
    if tasks.is_empty() || taus.is_empty() || alphas.is_empty() {
        return Err(Error::contract("ablation grid needs tasks, taus and alphas"));
    }
    let baseline = greedy_accuracy(&pair.tuned, tasks)?;
    let profiles = tasks
        .iter()
        .map(|t| LensProfile::of_sequence(&pair.base, t))
        .collect::<Result<Vec<_>>>()?;

    let mut cells = Vec::with_capacity(taus.len() * alphas.len());
    for &tau in taus {
        for &alpha in alphas {
            let config = ReplayConfig {
                tau,
                alpha,
                ..base_config.clone()
            };
            config.validate(pair.tuned.config.layers)?;
            let run = || -> Result<f64> {
                let mut hits = 0usize;
                for (seq, profile) in tasks.iter().zip(&profiles) {
                    let answer = seq.answer.as_deref().unwrap_or_default();
                    let state = replay_with_profile(&pair.tuned, seq, profile, &config)?;
                    let out = apply_and_decode(&pair.tuned, seq, &state.x, DecodeMode::Greedy, answer.len())?;
                    if is_correct(&out, answer) {
                        hits += 1;
                    }
                }
                Ok(hits as f64 / tasks.len() as f64)
            };
            let cell = match run() {
                Ok(acc) => AblationCell {
                    tau,
                    alpha,
                    accuracy: Some(acc),
                    delta: Some(acc - baseline),
                    error: None,
                },
                Err(e @ Error::NonFinite { .. }) => AblationCell {
                    tau,
                    alpha,
                    accuracy: None,
                    delta: None,
                    error: Some(e.to_string()),
                },
                Err(e) => return Err(e),
            };
            cells.push(cell);
        }
    }
    Ok(AblationReport {
        baseline,
        taus: taus.to_vec(),
        alphas: alphas.to_vec(),
        cells,
    })
}
