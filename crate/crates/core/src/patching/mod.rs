//! Causal experiments on a base/tuned model pair: residual-stream patching
//! sweeps, direction and control studies, α-interpolation, source variants
//! and low-rank patching.
//!
//! The causal effect of a patch on one pair is
//! `Δlog p(target, patched) - Δlog p(target, unpatched)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{PreferenceDataset, PreferencePair};
use crate::error::{Error, Result};
use crate::model::{delta_log_p, forward, log_prob_completion, ActivationTrace, PatchAction, PatchPlan, Parameters};
use crate::numerics::{mean, std_error, svd, truncate_reconstruct, variance_captured, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerSelection {
    AllSweep,
    #[serde(untagged)]
    Layer(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// Tuned activations patched into the base model.
    TunedToBase,
    BaseToTuned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceVariant {
    Chosen,
    Rejected,
    Contrastive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Control {
    None,
    Identity,
    RandomGaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub layer: LayerSelection,
    pub direction: Direction,
    pub alpha: f64,
    pub source_variant: SourceVariant,
    pub control: Control,
    pub rank: Option<usize>,
    pub seed: u64,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            layer: LayerSelection::AllSweep,
            direction: Direction::TunedToBase,
            alpha: 1.0,
            source_variant: SourceVariant::Chosen,
            control: Control::None,
            rank: None,
            seed: 0,
        }
    }
}

impl PatchSpec {
    pub fn at_layer(layer: usize) -> Self {
        Self {
            layer: LayerSelection::Layer(layer),
            ..Self::default()
        }
    }

    fn with_layer(&self, layer: usize) -> Self {
        Self {
            layer: LayerSelection::Layer(layer),
            ..self.clone()
        }
    }

    pub fn validate(&self, n_layers: usize, d_model: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if let LayerSelection::Layer(l) = self.layer {
            if l >= n_layers {
                return Err(Error::InvalidArgument(format!("layer {l} but model has {n_layers} layers")));
            }
        }
        if let Some(k) = self.rank {
            if k == 0 || k > d_model {
                return Err(Error::InvalidArgument(format!("rank {k} outside [1, {d_model}]")));
            }
            if self.source_variant != SourceVariant::Chosen {
                return Err(Error::InvalidArgument("rank patching uses the chosen source variant only".into()));
            }
        }
        if self.control != Control::None && (self.rank.is_some() || self.source_variant != SourceVariant::Chosen) {
            return Err(Error::InvalidArgument(
                "a control excludes rank and non-default source variants".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalEffectRecord {
    pub layer: usize,
    pub mean_effect: f64,
    pub std_error: f64,
    pub per_pair_effects: Vec<f64>,
    pub spec: PatchSpec,
}

impl CausalEffectRecord {
    fn new(layer: usize, per_pair_effects: Vec<f64>, spec: PatchSpec) -> Self {
        Self {
            layer,
            mean_effect: mean(&per_pair_effects),
            std_error: std_error(&per_pair_effects),
            per_pair_effects,
            spec,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankResult {
    pub layer: usize,
    pub rank: usize,
    pub approx_mean: f64,
    pub full_mean: f64,
    /// `approx_mean / full_mean`; NaN when the full effect is zero.
    pub effect_ratio: f64,
    pub variance_captured: f64,
    pub per_pair_effects: Vec<f64>,
}

/// Residual traces of one model on prompt+chosen and prompt+rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTraces {
    pub chosen: ActivationTrace,
    pub rejected: ActivationTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairTraces {
    pub base: RunTraces,
    pub tuned: RunTraces,
}

fn check_shared(base: &Parameters, tuned: &Parameters) -> Result<()> {
    if !base.config().same_shape(tuned.config()) {
        return Err(Error::InvalidArgument("base and tuned models have different configurations".into()));
    }
    Ok(())
}

fn run_traces(params: &Parameters, pair: &PreferencePair) -> Result<RunTraces> {
    Ok(RunTraces {
        chosen: forward(params, &pair.prompt.concat(&pair.chosen), None)?.trace,
        rejected: forward(params, &pair.prompt.concat(&pair.rejected), None)?.trace,
    })
}

pub fn capture_pair_traces(base: &Parameters, tuned: &Parameters, pair: &PreferencePair) -> Result<PairTraces> {
    check_shared(base, tuned)?;
    Ok(PairTraces {
        base: run_traces(base, pair)?,
        tuned: run_traces(tuned, pair)?,
    })
}

/// Target-length matrix whose first rows are copied from `src`, plus the
/// positions that received a row.
fn align_rows(src: &Matrix, len: usize) -> (Matrix, Vec<usize>) {
    let n = src.rows().min(len);
    let mut out = Matrix::zeros(len, src.cols());
    for t in 0..n {
        out.row_mut(t).copy_from_slice(src.row(t));
    }
    (out, (0..n).collect())
}

fn gaussian_like(reference: &Matrix, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    let data = reference.data();
    let mu = mean(data);
    let sd = (data.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / data.len() as f64).sqrt();
    let normal = Normal::new(mu, sd).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Matrix::new(
        reference.rows(),
        reference.cols(),
        (0..data.len()).map(|_| normal.sample(rng)).collect(),
    )
}

/// Per-pair context shared by every spec evaluated on that pair.
struct PairContext<'a> {
    pair: &'a PreferencePair,
    index: usize,
    traces: PairTraces,
    unpatched: [f64; 2],
}

impl<'a> PairContext<'a> {
    fn new(base: &Parameters, tuned: &Parameters, pair: &'a PreferencePair, index: usize) -> Result<Self> {
        Ok(Self {
            pair,
            index,
            traces: capture_pair_traces(base, tuned, pair)?,
            unpatched: [delta_log_p(base, pair, None)?, delta_log_p(tuned, pair, None)?],
        })
    }

    fn target_source(&self, d: Direction) -> (&RunTraces, &RunTraces, f64) {
        match d {
            Direction::TunedToBase => (&self.traces.base, &self.traces.tuned, self.unpatched[0]),
            Direction::BaseToTuned => (&self.traces.tuned, &self.traces.base, self.unpatched[1]),
        }
    }

    /// Patch plans for the (chosen, rejected) runs. `low_rank` overrides the
    /// source states of the two runs.
    fn plans(&self, spec: &PatchSpec, layer: usize, low_rank: Option<(&Matrix, &Matrix)>) -> Result<(PatchPlan, PatchPlan)> {
        let (target, source, _) = self.target_source(spec.direction);
        let (tc, tr) = (target.chosen.layer(layer), target.rejected.layer(layer));
        let a = spec.alpha;
        let plans = match spec.control {
            Control::Identity => (
                PatchPlan::replace(layer, tc.clone()).with_alpha(a),
                PatchPlan::replace(layer, tr.clone()).with_alpha(a),
            ),
            Control::RandomGaussian => {
                let run_seed = |run: u64| {
                    spec.seed
                        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                        .wrapping_add((self.index as u64) << 20)
                        .wrapping_add((layer as u64) << 2)
                        .wrapping_add(run)
                };
                let nc = gaussian_like(tc, &mut ChaCha8Rng::seed_from_u64(run_seed(0)))?;
                let nr = gaussian_like(tr, &mut ChaCha8Rng::seed_from_u64(run_seed(1)))?;
                (PatchPlan::replace(layer, nc).with_alpha(a), PatchPlan::replace(layer, nr).with_alpha(a))
            }
            Control::None => {
                let (sc, sr) = match low_rank {
                    Some((c, r)) => (c, r),
                    None => (source.chosen.layer(layer), source.rejected.layer(layer)),
                };
                match spec.source_variant {
                    SourceVariant::Chosen => (
                        PatchPlan::replace(layer, sc.clone()).with_alpha(a),
                        PatchPlan::replace(layer, sr.clone()).with_alpha(a),
                    ),
                    SourceVariant::Rejected => {
                        let (m, pos) = align_rows(sr, tc.rows());
                        (
                            PatchPlan::replace(layer, m).with_alpha(a).with_positions(pos),
                            PatchPlan::replace(layer, sr.clone()).with_alpha(a),
                        )
                    }
                    SourceVariant::Contrastive => {
                        let n = sc.rows().min(sr.rows());
                        let mut diff = Matrix::zeros(n, sc.cols());
                        for t in 0..n {
                            for ((d, x), y) in diff.row_mut(t).iter_mut().zip(sc.row(t)).zip(sr.row(t)) {
                                *d = x - y;
                            }
                        }
                        let (mc, pc) = align_rows(&diff, tc.rows());
                        let (mr, pr) = align_rows(&diff, tr.rows());
                        let add = |m, p| PatchPlan {
                            layer,
                            action: PatchAction::Add(m),
                            alpha: a,
                            positions: Some(p),
                        };
                        (add(mc, pc), add(mr, pr))
                    }
                }
            }
        };
        Ok(plans)
    }

    fn effect(&self, base: &Parameters, tuned: &Parameters, spec: &PatchSpec, layer: usize, low_rank: Option<(&Matrix, &Matrix)>) -> Result<f64> {
        if spec.alpha == 0.0 {
            return Ok(0.0);
        }
        let (model, unpatched) = match spec.direction {
            Direction::TunedToBase => (base, self.unpatched[0]),
            Direction::BaseToTuned => (tuned, self.unpatched[1]),
        };
        let (pc, pr) = self.plans(spec, layer, low_rank)?;
        let p = self.pair;
        let patched = log_prob_completion(model, &p.prompt, &p.chosen, Some(&pc))?
            - log_prob_completion(model, &p.prompt, &p.rejected, Some(&pr))?;
        Ok(patched - unpatched)
    }
}

fn contexts<'a>(base: &Parameters, tuned: &Parameters, ds: &'a PreferenceDataset) -> Result<Vec<PairContext<'a>>> {
    check_shared(base, tuned)?;
    if ds.is_empty() {
        return Err(Error::Dataset("no pairs to patch".into()));
    }
    ds.check_fits(base.config())?;
    ds.pairs().iter().enumerate().map(|(i, p)| PairContext::new(base, tuned, p, i)).collect()
}

/// Causal effect of one patch on one pair. A `rank` in the spec builds the
/// low-rank basis from this pair's own tuned activations.
pub fn patch_effect(base: &Parameters, tuned: &Parameters, pair: &PreferencePair, spec: &PatchSpec) -> Result<f64> {
    check_shared(base, tuned)?;
    let c = base.config();
    spec.validate(c.n_layers, c.d_model)?;
    let layer = match spec.layer {
        LayerSelection::Layer(l) => l,
        LayerSelection::AllSweep => {
            return Err(Error::InvalidArgument("patch_effect needs a single layer".into()));
        }
    };
    let ctx = PairContext::new(base, tuned, pair, 0)?;
    match spec.rank {
        None => ctx.effect(base, tuned, spec, layer, None),
        Some(k) => {
            let lr = LowRankSource::build(std::slice::from_ref(&ctx), spec.direction, layer, true)?;
            let (c, r) = lr.reconstruct(k)?.remove(0);
            ctx.effect(base, tuned, spec, layer, Some((&c, &r)))
        }
    }
}

fn sweep_contexts(base: &Parameters, tuned: &Parameters, ctxs: &[PairContext<'_>], template: &PatchSpec) -> Result<Vec<CausalEffectRecord>> {
    let c = base.config();
    template.validate(c.n_layers, c.d_model)?;
    if template.rank.is_some() {
        return Err(Error::InvalidArgument("use low_rank_study for rank-limited patches".into()));
    }
    let layers: Vec<usize> = match template.layer {
        LayerSelection::AllSweep => (0..c.n_layers).collect(),
        LayerSelection::Layer(l) => vec![l],
    };
    layers
        .into_iter()
        .map(|l| {
            let spec = template.with_layer(l);
            let effects = ctxs.iter().map(|x| x.effect(base, tuned, &spec, l, None)).collect::<Result<Vec<_>>>()?;
            Ok(CausalEffectRecord::new(l, effects, spec))
        })
        .collect()
}

/// One record per layer (or one record for a fixed-layer template), in
/// dataset pair order.
pub fn layer_sweep(base: &Parameters, tuned: &Parameters, ds: &PreferenceDataset, template: &PatchSpec) -> Result<Vec<CausalEffectRecord>> {
    let ctxs = contexts(base, tuned, ds)?;
    sweep_contexts(base, tuned, &ctxs, template)
}

/// Layer with the largest mean effect; ties go to the lower layer.
pub fn peak_layer(records: &[CausalEffectRecord]) -> Option<usize> {
    argmax_lowest(records.iter().map(|r| (r.layer, r.mean_effect)))
}

fn argmax_lowest(items: impl Iterator<Item = (usize, f64)>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (l, v) in items {
        match best {
            Some((bl, bv)) if v < bv || (v == bv && l > bl) => {}
            _ => best = Some((l, v)),
        }
    }
    best.map(|b| b.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionStudy {
    pub tuned_to_base: Vec<CausalEffectRecord>,
    pub base_to_tuned: Vec<CausalEffectRecord>,
    /// Per layer: effect(tuned→base) - effect(base→tuned).
    pub asymmetry: Vec<f64>,
    pub max_asymmetry_layer: usize,
}

pub fn direction_study(base: &Parameters, tuned: &Parameters, ds: &PreferenceDataset) -> Result<DirectionStudy> {
    let ctxs = contexts(base, tuned, ds)?;
    let fwd = sweep_contexts(base, tuned, &ctxs, &PatchSpec::default())?;
    let rev = sweep_contexts(
        base,
        tuned,
        &ctxs,
        &PatchSpec {
            direction: Direction::BaseToTuned,
            ..PatchSpec::default()
        },
    )?;
    let asymmetry: Vec<f64> = fwd.iter().zip(&rev).map(|(a, b)| a.mean_effect - b.mean_effect).collect();
    let max_asymmetry_layer = argmax_lowest(asymmetry.iter().copied().enumerate()).unwrap_or(0);
    Ok(DirectionStudy {
        tuned_to_base: fwd,
        base_to_tuned: rev,
        asymmetry,
        max_asymmetry_layer,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlStudy {
    pub treatment: Vec<CausalEffectRecord>,
    pub identity: Vec<CausalEffectRecord>,
    pub random: Vec<CausalEffectRecord>,
}

pub fn control_study(base: &Parameters, tuned: &Parameters, ds: &PreferenceDataset, seed: u64) -> Result<ControlStudy> {
    let ctxs = contexts(base, tuned, ds)?;
    let with = |control| PatchSpec {
        control,
        seed,
        ..PatchSpec::default()
    };
    Ok(ControlStudy {
        treatment: sweep_contexts(base, tuned, &ctxs, &with(Control::None))?,
        identity: sweep_contexts(base, tuned, &ctxs, &with(Control::Identity))?,
        random: sweep_contexts(base, tuned, &ctxs, &with(Control::RandomGaussian))?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaStudy {
    /// Sorted, de-duplicated mixing coefficients.
    pub alphas: Vec<f64>,
    /// `curves[l][i]`: record for layer `l` at `alphas[i]`.
    pub curves: Vec<Vec<CausalEffectRecord>>,
    pub warnings: Vec<String>,
}

pub fn alpha_study(base: &Parameters, tuned: &Parameters, ds: &PreferenceDataset, alphas: &[f64]) -> Result<AlphaStudy> {
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::InvalidArgument(format!("alpha {a} outside [0, 1]")));
    }
    if !alphas.contains(&0.0) || !alphas.contains(&1.0) {
        return Err(Error::InvalidArgument("alphas must include 0 and 1".into()));
    }
    let mut sorted = alphas.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut warnings = Vec::new();
    if sorted.len() < alphas.len() {
        warnings.push(format!(
            "dropped {} duplicate alpha value(s)",
            alphas.len() - sorted.len()
        ));
    }
    let ctxs = contexts(base, tuned, ds)?;
    let mut by_alpha = Vec::with_capacity(sorted.len());
    for &a in &sorted {
        let spec = PatchSpec {
            alpha: a,
            ..PatchSpec::default()
        };
        by_alpha.push(sweep_contexts(base, tuned, &ctxs, &spec)?);
    }
    let n_layers = base.config().n_layers;
    let curves = (0..n_layers)
        .map(|l| by_alpha.iter().map(|sweep| sweep[l].clone()).collect())
        .collect();
    Ok(AlphaStudy {
        alphas: sorted,
        curves,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantStudy {
    pub chosen: Vec<CausalEffectRecord>,
    pub rejected: Vec<CausalEffectRecord>,
    pub contrastive: Vec<CausalEffectRecord>,
}

pub fn source_variant_study(base: &Parameters, tuned: &Parameters, ds: &PreferenceDataset) -> Result<VariantStudy> {
    let ctxs = contexts(base, tuned, ds)?;
    let with = |source_variant| PatchSpec {
        source_variant,
        ..PatchSpec::default()
    };
    Ok(VariantStudy {
        chosen: sweep_contexts(base, tuned, &ctxs, &with(SourceVariant::Chosen))?,
        rejected: sweep_contexts(base, tuned, &ctxs, &with(SourceVariant::Rejected))?,
        contrastive: sweep_contexts(base, tuned, &ctxs, &with(SourceVariant::Contrastive))?,
    })
}

/// Source activations of one layer stacked over every token of both runs of
/// every pair, with their SVD.
struct LowRankSource {
    /// Row count of each (pair, run) block, in stacking order.
    blocks: Vec<usize>,
    means: Vec<f64>,
    factors: crate::numerics::SvdFactors,
}

impl LowRankSource {
    fn build(ctxs: &[PairContext<'_>], direction: Direction, layer: usize, center: bool) -> Result<Self> {
        let mut mats = Vec::with_capacity(2 * ctxs.len());
        for ctx in ctxs {
            let (_, source, _) = ctx.target_source(direction);
            mats.push(source.chosen.layer(layer));
            mats.push(source.rejected.layer(layer));
        }
        let blocks = mats.iter().map(|m| m.rows()).collect();
        let d = mats[0].cols();
        let mut h = Matrix::from_rows(d, mats.iter().flat_map(|m| (0..m.rows()).map(move |t| m.row(t))))?;
        let mut means = vec![0.0; d];
        if center {
            for t in 0..h.rows() {
                for (m, v) in means.iter_mut().zip(h.row(t)) {
                    *m += v;
                }
            }
            let n = h.rows() as f64;
            means.iter_mut().for_each(|m| *m /= n);
            for t in 0..h.rows() {
                for (v, m) in h.row_mut(t).iter_mut().zip(&means) {
                    *v -= m;
                }
            }
        }
        Ok(Self {
            blocks,
            means,
            factors: svd(&h)?,
        })
    }

    fn effective_rank(&self, k: usize) -> usize {
        k.min(self.factors.rank_bound())
    }

    fn variance_captured(&self, k: usize) -> Result<f64> {
        variance_captured(&self.factors, self.effective_rank(k))
    }

    /// Rank-k reconstruction routed back to (chosen, rejected) blocks per pair.
    fn reconstruct(&self, k: usize) -> Result<Vec<(Matrix, Matrix)>> {
        let approx = truncate_reconstruct(&self.factors, self.effective_rank(k))?;
        let d = approx.cols();
        let mut start = 0;
        let mut mats = Vec::with_capacity(self.blocks.len());
        for &n in &self.blocks {
            mats.push(Matrix::from_fn(n, d, |t, j| approx.get(start + t, j) + self.means[j]));
            start += n;
        }
        let mut out = Vec::with_capacity(mats.len() / 2);
        let mut it = mats.into_iter();
        while let (Some(c), Some(r)) = (it.next(), it.next()) {
            out.push((c, r));
        }
        Ok(out)
    }
}

/// Rank-k patching of the tuned activations at `layer` into the base.
/// `center` subtracts the column means before the SVD and restores them
/// after truncation.
pub fn low_rank_study(
    base: &Parameters,
    tuned: &Parameters,
    ds: &PreferenceDataset,
    layer: usize,
    ranks: &[usize],
    center: bool,
) -> Result<Vec<LowRankResult>> {
    let c = base.config();
    if layer >= c.n_layers {
        return Err(Error::InvalidArgument(format!("layer {layer} but model has {} layers", c.n_layers)));
    }
    if let Some(k) = ranks.iter().find(|&&k| k == 0 || k > c.d_model) {
        return Err(Error::InvalidArgument(format!("rank {k} outside [1, {}]", c.d_model)));
    }
    let ctxs = contexts(base, tuned, ds)?;
    let spec = PatchSpec::at_layer(layer);
    let full: Vec<f64> = ctxs.iter().map(|x| x.effect(base, tuned, &spec, layer, None)).collect::<Result<_>>()?;
    let full_mean = mean(&full);
    let source = LowRankSource::build(&ctxs, Direction::TunedToBase, layer, center)?;
    ranks
        .iter()
        .map(|&k| {
            let recon = source.reconstruct(k)?;
            let effects: Vec<f64> = ctxs
                .iter()
                .zip(&recon)
                .map(|(x, (mc, mr))| x.effect(base, tuned, &spec, layer, Some((mc, mr))))
                .collect::<Result<_>>()?;
            let approx_mean = mean(&effects);
            Ok(LowRankResult {
                layer,
                rank: k,
                approx_mean,
                full_mean,
                effect_ratio: if full_mean != 0.0 { approx_mean / full_mean } else { f64::NAN },
                variance_captured: source.variance_captured(k)?,
                per_pair_effects: effects,
            })
        })
        .collect()
}
