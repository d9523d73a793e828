use crate::attribution::{attribute_sweep, distance_matrix, probe_fit, AttributionResult, DistanceMatrix};
use crate::data::PreferenceDataset;
use crate::error::Result;
use crate::model::{delta_log_p, Parameters};
use crate::patching::{
    alpha_study, control_study, direction_study, layer_sweep, low_rank_study, peak_layer, source_variant_study,
    CausalEffectRecord, PatchSpec,
};
use crate::report::{fmt_num, BarChart, LineChart, LineSeries, Series, Table};

use super::{RunConfig, Study};

pub fn title(s: Study) -> &'static str {
    match s {
        Study::Sweep => "Layer sweep (tuned into base)",
        Study::Direction => "Patch direction",
        Study::Controls => "Controls",
        Study::Alpha => "Dose-response",
        Study::Variants => "Source variants",
        Study::Lowrank => "Low-rank patching",
        Study::Attribute => "Distances, probes and LASSO attribution",
        Study::All => "All studies",
    }
}

/// Files produced by one study, relative to the output directory.
#[derive(Debug, Default)]
pub struct StudyOutcome {
    pub files: Vec<(String, Vec<u8>)>,
    pub warnings: Vec<String>,
}

impl StudyOutcome {
    fn add(&mut self, rel: String, bytes: Vec<u8>) {
        self.files.push((rel, bytes));
    }

    fn table(&mut self, rel: String, t: &Table) -> Result<()> {
        self.add(rel, t.to_csv()?);
        Ok(())
    }

    fn json<T: serde::Serialize>(&mut self, rel: String, v: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(v)?;
        bytes.push(b'\n');
        self.add(rel, bytes);
        Ok(())
    }
}

pub(super) struct StudyContext<'a> {
    base: &'a Parameters,
    tuned: &'a Parameters,
    ds: &'a PreferenceDataset,
    cfg: &'a RunConfig,
    sweep: Option<Vec<CausalEffectRecord>>,
}

fn layers(n: usize) -> Vec<String> {
    (0..n).map(|l| l.to_string()).collect()
}

fn bars(title: &str, y_label: &str, n_layers: usize, series: Vec<(&str, Vec<f64>)>) -> Vec<u8> {
    BarChart {
        title: title.into(),
        x_label: "layer".into(),
        y_label: y_label.into(),
        categories: layers(n_layers),
        series: series
            .into_iter()
            .map(|(n, v)| Series {
                name: n.into(),
                values: v,
            })
            .collect(),
    }
    .render()
    .into_bytes()
}

fn means(r: &[CausalEffectRecord]) -> Vec<f64> {
    r.iter().map(|x| x.mean_effect).collect()
}

/// `layer` plus `<name>` and `<name>_se` columns for each named sweep.
fn sweep_columns(named: &[(&str, &[CausalEffectRecord])]) -> Table {
    let mut header = vec!["layer".to_string()];
    for (n, _) in named {
        header.push((*n).to_string());
        header.push(format!("{n}_se"));
    }
    let mut t = Table::new(header);
    for l in 0..named[0].1.len() {
        let mut row = vec![l.to_string()];
        for (_, recs) in named {
            row.push(fmt_num(recs[l].mean_effect));
            row.push(fmt_num(recs[l].std_error));
        }
        t.push(row);
    }
    t
}

fn per_pair_table(records: &[CausalEffectRecord]) -> Table {
    let mut header = vec!["pair".to_string()];
    header.extend(records.iter().map(|r| format!("layer_{}", r.layer)));
    let mut t = Table::new(header);
    let n = records.first().map_or(0, |r| r.per_pair_effects.len());
    for i in 0..n {
        let mut row = vec![i.to_string()];
        row.extend(records.iter().map(|r| fmt_num(r.per_pair_effects[i])));
        t.push(row);
    }
    t
}

impl<'a> StudyContext<'a> {
    pub fn new(base: &'a Parameters, tuned: &'a Parameters, ds: &'a PreferenceDataset, cfg: &'a RunConfig) -> Self {
        Self {
            base,
            tuned,
            ds,
            cfg,
            sweep: None,
        }
    }

    fn n_layers(&self) -> usize {
        self.base.config().n_layers
    }

    fn sweep(&mut self) -> Result<&[CausalEffectRecord]> {
        if self.sweep.is_none() {
            self.sweep = Some(layer_sweep(self.base, self.tuned, self.ds, &PatchSpec::default())?);
        }
        Ok(self.sweep.as_deref().expect("just computed"))
    }

    pub fn run(&mut self, s: Study) -> Result<StudyOutcome> {
        let mut o = StudyOutcome::default();
        let nl = self.n_layers();
        let (b, t, ds) = (self.base, self.tuned, self.ds);
        match s {
            Study::Sweep => {
                let sweep = self.sweep()?.to_vec();
                let mut tab = sweep_columns(&[("mean_effect", &sweep)]);
                tab.header[2] = "std_error".into();
                o.table("studies/sweep.csv".into(), &tab)?;
                o.table("studies/sweep_pairs.csv".into(), &per_pair_table(&sweep))?;
                o.add(
                    "studies/sweep.svg".into(),
                    bars("Mean causal effect per layer (tuned into base)", "effect (nats)", nl, vec![("mean_effect", means(&sweep))]),
                );
                o.json("studies/sweep.json".into(), &serde_json::json!({
                    "peak_layer": peak_layer(&sweep),
                    "n_pairs": ds.len(),
                    "records": sweep,
                }))?;
            }
            Study::Direction => {
                let d = direction_study(b, t, ds)?;
                let mut tab = sweep_columns(&[("tuned_to_base", &d.tuned_to_base), ("base_to_tuned", &d.base_to_tuned)]);
                tab.header.push("asymmetry".into());
                for (row, a) in tab.rows.iter_mut().zip(&d.asymmetry) {
                    row.push(fmt_num(*a));
                }
                o.table("studies/direction.csv".into(), &tab)?;
                o.add(
                    "studies/direction.svg".into(),
                    bars(
                        "Patch direction",
                        "effect (nats)",
                        nl,
                        vec![("tuned_to_base", means(&d.tuned_to_base)), ("base_to_tuned", means(&d.base_to_tuned))],
                    ),
                );
                o.json("studies/direction.json".into(), &d)?;
            }
            Study::Controls => {
                let c = control_study(b, t, ds, self.cfg.seed)?;
                let tab = sweep_columns(&[("treatment", &c.treatment), ("identity", &c.identity), ("random", &c.random)]);
                o.table("studies/controls.csv".into(), &tab)?;
                o.add(
                    "studies/controls.svg".into(),
                    bars(
                        "Treatment against controls",
                        "effect (nats)",
                        nl,
                        vec![
                            ("treatment", means(&c.treatment)),
                            ("identity", means(&c.identity)),
                            ("random", means(&c.random)),
                        ],
                    ),
                );
                o.json("studies/controls.json".into(), &c)?;
            }
            Study::Alpha => {
                let a = alpha_study(b, t, ds, &self.cfg.analysis.alphas)?;
                o.warnings.extend(a.warnings.iter().cloned());
                let mut tab = Table::new(["layer", "alpha", "mean_effect", "std_error"]);
                for (l, curve) in a.curves.iter().enumerate() {
                    for (alpha, r) in a.alphas.iter().zip(curve) {
                        tab.push(vec![l.to_string(), alpha.to_string(), fmt_num(r.mean_effect), fmt_num(r.std_error)]);
                    }
                }
                o.table("studies/alpha.csv".into(), &tab)?;
                let chart = LineChart {
                    title: "Effect against mixing coefficient".into(),
                    x_label: "alpha".into(),
                    y_label: "effect (nats)".into(),
                    series: a
                        .curves
                        .iter()
                        .enumerate()
                        .map(|(l, c)| LineSeries {
                            name: format!("layer {l}"),
                            xs: a.alphas.clone(),
                            ys: c.iter().map(|r| r.mean_effect).collect(),
                        })
                        .collect(),
                };
                o.add("studies/alpha.svg".into(), chart.render().into_bytes());
                o.json("studies/alpha.json".into(), &a)?;
            }
            Study::Variants => {
                let v = source_variant_study(b, t, ds)?;
                let tab = sweep_columns(&[("chosen", &v.chosen), ("rejected", &v.rejected), ("contrastive", &v.contrastive)]);
                o.table("studies/variants.csv".into(), &tab)?;
                o.add(
                    "studies/variants.svg".into(),
                    bars(
                        "Source variants",
                        "effect (nats)",
                        nl,
                        vec![
                            ("chosen", means(&v.chosen)),
                            ("rejected", means(&v.rejected)),
                            ("contrastive", means(&v.contrastive)),
                        ],
                    ),
                );
                o.json("studies/variants.json".into(), &v)?;
            }
            Study::Lowrank => {
                let layer = match self.cfg.analysis.low_rank_layer {
                    Some(l) => l,
                    None => peak_layer(self.sweep()?).unwrap_or(0),
                };
                let ranks = self.cfg.analysis.ranks_for(b.config().d_model);
                let res = low_rank_study(b, t, ds, layer, &ranks, self.cfg.analysis.center)?;
                let mut tab = Table::new(["layer", "rank", "approx_mean", "full_mean", "effect_ratio", "variance_captured"]);
                for r in &res {
                    tab.push(vec![
                        r.layer.to_string(),
                        r.rank.to_string(),
                        fmt_num(r.approx_mean),
                        fmt_num(r.full_mean),
                        fmt_num(r.effect_ratio),
                        fmt_num(r.variance_captured),
                    ]);
                }
                o.table("studies/lowrank.csv".into(), &tab)?;
                let xs: Vec<f64> = res.iter().map(|r| r.rank as f64).collect();
                let chart = LineChart {
                    title: format!("Rank-k patching at layer {layer}"),
                    x_label: "rank k".into(),
                    y_label: "fraction".into(),
                    series: vec![
                        LineSeries {
                            name: "effect_ratio".into(),
                            xs: xs.clone(),
                            ys: res.iter().map(|r| r.effect_ratio).collect(),
                        },
                        LineSeries {
                            name: "variance_captured".into(),
                            xs,
                            ys: res.iter().map(|r| r.variance_captured).collect(),
                        },
                    ],
                };
                o.add("studies/lowrank.svg".into(), chart.render().into_bytes());
                o.json("studies/lowrank.json".into(), &serde_json::json!({
                    "layer": layer,
                    "centered": self.cfg.analysis.center,
                    "results": res,
                }))?;
            }
            Study::Attribute => {
                let a = &self.cfg.analysis;
                let dm = distance_matrix(b, t, ds, a.token_convention)?;
                let sweep = self.sweep()?.to_vec();
                let res = attribute_sweep(&dm, &sweep, a.target_mode, a.objective, self.cfg.seed)?;
                let margins: Vec<f64> = ds
                    .pairs()
                    .iter()
                    .map(|p| delta_log_p(t, p, None))
                    .collect::<Result<_>>()?;
                attribution_outputs(&mut o, &dm, &res, &margins)?;
            }
            Study::All => {
                return Err(crate::error::Error::InvalidArgument("expand study selection before running".into()));
            }
        }
        Ok(o)
    }
}

fn attribution_outputs(o: &mut StudyOutcome, dm: &DistanceMatrix, res: &AttributionResult, margins: &[f64]) -> Result<()> {
    let nl = dm.n_layers();
    let mut header = vec!["quantity".to_string()];
    header.extend((0..nl).map(|l| format!("layer_{l}")));
    let mut coef = Table::new(header.clone());
    let row = |name: &str, v: &[f64]| {
        let mut r = vec![name.to_string()];
        r.extend(v.iter().map(|x| fmt_num(*x)));
        r
    };
    coef.push(row("standardized", &res.coefficients));
    coef.push(row("raw", &res.raw_coefficients));
    o.table("studies/attribution.csv".into(), &coef)?;
    o.add(
        "studies/attribution.svg".into(),
        bars("LASSO coefficients (standardized)", "coefficient", nl, vec![("standardized", res.coefficients.clone())]),
    );

    let mut cv = Table::new(["lambda", "mean_cv_error", "nonzero"]);
    for ((l, e), nz) in res
        .cv_report
        .lambda_grid
        .iter()
        .zip(&res.cv_report.mean_cv_error)
        .zip(&res.cv_report.path_nonzero)
    {
        cv.push(vec![format!("{l:e}"), fmt_num(*e), nz.to_string()]);
    }
    o.table("studies/attribution_cv.csv".into(), &cv)?;
    o.json("studies/attribution.json".into(), res)?;

    let mut dist = Table::new({
        let mut h = vec!["pair".to_string()];
        h.extend((0..nl).map(|l| format!("layer_{l}")));
        h
    });
    for (i, id) in dm.pair_ids.iter().enumerate() {
        let mut r = vec![id.clone()];
        r.extend(dm.values.row(i).iter().map(|x| fmt_num(*x)));
        dist.push(r);
    }
    o.table("studies/distances.csv".into(), &dist)?;

    let mut probes = Table::new(["layer", "slope", "intercept", "r_squared", "degenerate"]);
    let mut r2 = Vec::with_capacity(nl);
    for l in 0..nl {
        let p = probe_fit(l, &dm.values.col(l), margins)?;
        r2.push(p.r_squared);
        probes.push(vec![
            l.to_string(),
            fmt_num(p.slope),
            fmt_num(p.intercept),
            fmt_num(p.r_squared),
            p.degenerate.to_string(),
        ]);
    }
    o.table("studies/probes.csv".into(), &probes)?;
    o.add(
        "studies/probes.svg".into(),
        bars("Probe fit of tuned margin on activation distance", "r squared", nl, vec![("r_squared", r2)]),
    );
    o.json("studies/attribution_meta.json".into(), &serde_json::json!({
        "token_convention": dm.convention,
        "target": res.target,
        "target_layer": res.target_layer,
        "probe_margin": "per-pair delta log p of the tuned model",
        "top_layer": res.top_layer(),
    }))?;
    Ok(())
}
