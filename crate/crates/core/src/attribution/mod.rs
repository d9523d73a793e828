//! Correlational localization: per-layer activation distances between the
//! tuned and base models, scalar linear probes of the margin, and sparse
//! LASSO attribution of causal effects to layers.

use serde::{Deserialize, Serialize};

use crate::data::{PreferenceDataset, PreferencePair};
use crate::error::{Error, Result};
use crate::model::{forward, Parameters};
use crate::numerics::{lasso_cv, mean, standardize, CvOptions, CvReport, LassoObjective, Matrix};
use crate::patching::CausalEffectRecord;

/// Which hidden state stands for `h_ℓ` of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenConvention {
    /// Final-token state of prompt+chosen.
    #[default]
    FinalTokenChosen,
    /// Average of the final-token states of prompt+chosen and prompt+rejected.
    FinalTokenMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    /// `pairs x layers`.
    pub values: Matrix,
    pub pair_ids: Vec<String>,
    pub convention: TokenConvention,
}

impl DistanceMatrix {
    pub fn n_layers(&self) -> usize {
        self.values.cols()
    }
}

fn final_states(params: &Parameters, pair: &PreferencePair, conv: TokenConvention) -> Result<Vec<Vec<f64>>> {
    let last = |seq| -> Result<Vec<Vec<f64>>> {
        let trace = forward(params, &seq, None)?.trace;
        Ok(trace
            .layers
            .iter()
            .map(|m| m.row(m.rows() - 1).to_vec())
            .collect())
    };
    let chosen = last(pair.prompt.concat(&pair.chosen))?;
    match conv {
        TokenConvention::FinalTokenChosen => Ok(chosen),
        TokenConvention::FinalTokenMean => {
            let rejected = last(pair.prompt.concat(&pair.rejected))?;
            Ok(chosen
                .iter()
                .zip(&rejected)
                .map(|(c, r)| c.iter().zip(r).map(|(a, b)| 0.5 * (a + b)).collect())
                .collect())
        }
    }
}

/// `‖h_ℓ(tuned) - h_ℓ(base)‖₂` for every layer.
pub fn activation_distance(base: &Parameters, tuned: &Parameters, pair: &PreferencePair, conv: TokenConvention) -> Result<Vec<f64>> {
    if !base.config().same_shape(tuned.config()) {
        return Err(Error::InvalidArgument("base and tuned models have different configurations".into()));
    }
    let hb = final_states(base, pair, conv)?;
    let ht = final_states(tuned, pair, conv)?;
    Ok(hb
        .iter()
        .zip(&ht)
        .map(|(b, t)| b.iter().zip(t).map(|(x, y)| (y - x) * (y - x)).sum::<f64>().sqrt())
        .collect())
}

pub fn distance_matrix(base: &Parameters, tuned: &Parameters, ds: &PreferenceDataset, conv: TokenConvention) -> Result<DistanceMatrix> {
    let rows = ds
        .pairs()
        .iter()
        .map(|p| activation_distance(base, tuned, p, conv))
        .collect::<Result<Vec<_>>>()?;
    let n_layers = base.config().n_layers;
    Ok(DistanceMatrix {
        values: Matrix::from_rows(n_layers, rows.iter().map(|r| r.as_slice()))?,
        pair_ids: (0..ds.len()).map(|i| format!("pair-{i}")).collect(),
        convention: conv,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeFit {
    pub layer: usize,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Set when the distances had no variance; slope is then 0.
    pub degenerate: bool,
}

/// Ordinary least squares of `margins` on scalar `distances`.
pub fn probe_fit(layer: usize, distances: &[f64], margins: &[f64]) -> Result<ProbeFit> {
    let n = distances.len();
    if n != margins.len() {
        return Err(Error::Shape(format!("{n} distances but {} margins", margins.len())));
    }
    if n < 3 {
        return Err(Error::InvalidArgument(format!("probe needs at least 3 pairs, got {n}")));
    }
    if let Some(i) = distances.iter().chain(margins).position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "probe input", index: i % n });
    }
    let (mx, my) = (mean(distances), mean(margins));
    let sxx: f64 = distances.iter().map(|x| (x - mx) * (x - mx)).sum();
    let syy: f64 = margins.iter().map(|y| (y - my) * (y - my)).sum();
    let sxy: f64 = distances.iter().zip(margins).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx <= f64::EPSILON * (1.0 + mx * mx) * n as f64 {
        return Ok(ProbeFit {
            layer,
            slope: 0.0,
            intercept: my,
            r_squared: 0.0,
            degenerate: true,
        });
    }
    let slope = sxy / sxx;
    let r_squared = if syy > 0.0 { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) } else { 0.0 };
    Ok(ProbeFit {
        layer,
        slope,
        intercept: my - slope * mx,
        r_squared,
        degenerate: false,
    })
}

/// How the regression target is built from the patching records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetMode {
    /// One row per pair; target is the pair's effect at the sweep's peak layer.
    #[default]
    PeakLayer,
    /// One row per (pair, layer); features are distances expanded by layer
    /// indicators.
    Stacked,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributionResult {
    /// Standardized-space coefficient per layer.
    pub coefficients: Vec<f64>,
    /// Coefficients on the raw distance scale.
    pub raw_coefficients: Vec<f64>,
    /// Intercept on the raw scale.
    pub raw_intercept: f64,
    pub chosen_lambda: f64,
    pub cv_report: CvReport,
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
    pub target_mean: f64,
    pub target: TargetMode,
    /// Layer whose effects formed the target in peak-layer mode.
    pub target_layer: Option<usize>,
}

impl AttributionResult {
    /// Layer with the largest absolute coefficient; `None` if all are zero.
    /// Ties go to the lower layer.
    pub fn top_layer(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (l, c) in self.coefficients.iter().enumerate() {
            let a = c.abs();
            if a > 0.0 && best.is_none_or(|(_, b)| a > b) {
                best = Some((l, a));
            }
        }
        best.map(|b| b.0)
    }
}

/// Sparse regression of per-pair causal effects on z-scored per-layer
/// distances, penalty chosen by cross-validation.
pub fn lasso_attribution(dm: &DistanceMatrix, effects: &[f64], seed: u64) -> Result<AttributionResult> {
    lasso_attribution_with(dm, effects, seed, LassoObjective::Normalized, TargetMode::PeakLayer, None)
}

fn lasso_attribution_with(
    dm: &DistanceMatrix,
    effects: &[f64],
    seed: u64,
    objective: LassoObjective,
    target: TargetMode,
    target_layer: Option<usize>,
) -> Result<AttributionResult> {
    let x = &dm.values;
    if effects.len() != x.rows() {
        return Err(Error::Shape(format!("{} effects for {} pairs", effects.len(), x.rows())));
    }
    let opts = CvOptions {
        seed,
        objective,
        ..CvOptions::default()
    };
    if x.rows() < 2 * opts.folds {
        return Err(Error::InvalidArgument(format!(
            "attribution needs at least {} samples, got {}",
            2 * opts.folds,
            x.rows()
        )));
    }
    let st = standardize(x)?;
    let target_mean = mean(effects);
    let y: Vec<f64> = effects.iter().map(|e| e - target_mean).collect();
    let (cv_report, sol) = lasso_cv(&st.z, &y, &opts)?;
    let raw: Vec<f64> = sol
        .weights
        .iter()
        .zip(&st.stds)
        .zip(&st.zero_variance)
        .map(|((w, s), &flat)| if flat { 0.0 } else { w / s })
        .collect();
    let raw_intercept = target_mean + sol.intercept - raw.iter().zip(&st.means).map(|(w, m)| w * m).sum::<f64>();
    Ok(AttributionResult {
        coefficients: sol.weights,
        raw_coefficients: raw,
        raw_intercept,
        chosen_lambda: cv_report.chosen_lambda,
        cv_report,
        feature_means: st.means,
        feature_stds: st.stds,
        target_mean,
        target,
        target_layer,
    })
}

/// Builds the target from a layer sweep and runs the attribution.
pub fn attribute_sweep(
    dm: &DistanceMatrix,
    sweep: &[CausalEffectRecord],
    mode: TargetMode,
    objective: LassoObjective,
    seed: u64,
) -> Result<AttributionResult> {
    if sweep.len() != dm.n_layers() {
        return Err(Error::Shape(format!("{} sweep records for {} layers", sweep.len(), dm.n_layers())));
    }
    match mode {
        TargetMode::PeakLayer => {
            let peak = crate::patching::peak_layer(sweep)
                .ok_or_else(|| Error::InvalidArgument("empty sweep".into()))?;
            lasso_attribution_with(dm, &sweep[peak].per_pair_effects, seed, objective, mode, Some(peak))
        }
        TargetMode::Stacked => {
            let (n, l) = (dm.values.rows(), dm.n_layers());
            let x = Matrix::from_fn(n * l, l, |r, c| if r % l == c { dm.values.get(r / l, c) } else { 0.0 });
            let y: Vec<f64> = (0..n * l).map(|r| sweep[r % l].per_pair_effects[r / l]).collect();
            let stacked = DistanceMatrix {
                values: x,
                pair_ids: (0..n * l).map(|r| format!("{}@{}", dm.pair_ids[r / l], r % l)).collect(),
                convention: dm.convention,
            };
            lasso_attribution_with(&stacked, &y, seed, objective, mode, None)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_line_gives_unit_r2() {
        let x = [0.5, 1.0, 2.0, 3.5, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v - 1.0).collect();
        let f = probe_fit(0, &x, &y).unwrap();
        assert!((f.r_squared - 1.0).abs() < 1e-10);
        assert!((f.slope - 3.0).abs() < 1e-12);
    }

    #[test]
    fn constant_margins_give_zero_slope() {
        let f = probe_fit(2, &[1.0, 2.0, 3.0], &[4.0, 4.0, 4.0]).unwrap();
        assert_eq!(f.slope, 0.0);
        assert_eq!(f.r_squared, 0.0);
    }

    #[test]
    fn flat_distances_flagged() {
        let f = probe_fit(0, &[2.0, 2.0, 2.0, 2.0], &[1.0, 3.0, 2.0, 0.0]).unwrap();
        assert!(f.degenerate);
        assert_eq!(f.slope, 0.0);
    }

    #[test]
    fn too_few_pairs_rejected() {
        assert!(probe_fit(0, &[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn top_layer_skips_zeros() {
        let dm = DistanceMatrix {
            values: Matrix::from_fn(12, 3, |r, c| ((r * 7 + c * 3) % 5) as f64 + c as f64),
            pair_ids: vec![String::new(); 12],
            convention: TokenConvention::default(),
        };
        let mut res = lasso_attribution(&dm, &[0.0; 12], 0).unwrap();
        assert_eq!(res.top_layer(), None);
        res.coefficients = vec![0.0, -0.4, 0.4];
        assert_eq!(res.top_layer(), Some(1));
    }
}
