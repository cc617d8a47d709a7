//! Metrics, grouped reports, ablation and sensitivity tables, and exports of
//! attention weights and retrieval decisions.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SampleKey, SiteYearSample, Split};
use crate::error::{RaciError, Result};
use crate::predictor::{Context, Diagnostics, Mode, Model, ModelKind, RaciConfig, Variant};
use crate::retrieval::RetrievalPool;
use crate::training::{train_epochs, init_run, FrozenContext, RunState, TrainConfig};

/// Root mean squared error over observed positions.
pub fn rmse(pred: &[f64], obs: &[f64], mask: &[bool]) -> Result<f64> {
    let (sse, n) = masked_sse(pred, obs, mask)?;
    if n == 0 {
        return Err(RaciError::UndefinedMetric("RMSE over an empty mask".into()));
    }
    Ok((sse / n as f64).sqrt())
}

fn masked_sse(pred: &[f64], obs: &[f64], mask: &[bool]) -> Result<(f64, usize)> {
    if pred.len() != obs.len() || obs.len() != mask.len() {
        return Err(RaciError::Shape("pred, obs and mask lengths differ".into()));
    }
    let mut acc = 0.0;
    let mut n = 0;
    for t in 0..pred.len() {
        if mask[t] {
            let d = pred[t] - obs[t];
            acc += d * d;
            n += 1;
        }
    }
    Ok((acc, n))
}

/// One site-year (or any series) belonging to a site.
#[derive(Debug, Clone, Copy)]
pub struct SiteSeries<'a> {
    pub site_id: &'a str,
    pub pred: &'a [f64],
    pub obs: &'a [f64],
    pub mask: &'a [bool],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct R2 {
    pub r2: f64,
    pub ss_res: f64,
    pub ss_tot: f64,
    pub sites_used: usize,
    /// Sites left out for zero variance over their observed positions.
    pub sites_skipped: usize,
}

/// `1 - sum_i sum_t (y - yhat)^2 / sum_i sum_t (y - ybar_i)^2`, with `ybar_i`
/// each site's own mean over observed positions. Series of one site are pooled.
pub fn within_site_r2(series: &[SiteSeries<'_>]) -> Result<R2> {
    let mut by_site: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for s in series {
        if s.pred.len() != s.obs.len() || s.obs.len() != s.mask.len() {
            return Err(RaciError::Shape(format!("series of {} has mismatched lengths", s.site_id)));
        }
        let e = by_site.entry(s.site_id).or_default();
        for t in 0..s.obs.len() {
            if s.mask[t] {
                e.push((s.obs[t], s.pred[t]));
            }
        }
    }
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    let mut used = 0;
    let mut skipped = 0;
    for pts in by_site.values() {
        if pts.is_empty() {
            skipped += 1;
            continue;
        }
        let mean = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
        let tot: f64 = pts.iter().map(|p| (p.0 - mean).powi(2)).sum();
        if tot == 0.0 {
            skipped += 1;
            continue;
        }
        ss_tot += tot;
        ss_res += pts.iter().map(|p| (p.0 - p.1).powi(2)).sum::<f64>();
        used += 1;
    }
    if used == 0 {
        return Err(RaciError::UndefinedMetric(
            "within-site R2: no site has nonzero variance".into(),
        ));
    }
    Ok(R2 {
        r2: 1.0 - ss_res / ss_tot,
        ss_res,
        ss_tot,
        sites_used: used,
        sites_skipped: skipped,
    })
}

/// Pearson correlation; a constant series yields `(0, true)`.
pub fn pearson(a: &[f64], b: &[f64]) -> (f64, bool) {
    let n = a.len().min(b.len());
    if n == 0 {
        return (0.0, true);
    }
    let ma = a[..n].iter().sum::<f64>() / n as f64;
    let mb = b[..n].iter().sum::<f64>() / n as f64;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for i in 0..n {
        let (x, y) = (a[i] - ma, b[i] - mb);
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    if saa == 0.0 || sbb == 0.0 {
        return (0.0, true);
    }
    ((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0), false)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupBy {
    None,
    Region,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group: String,
    pub n_samples: usize,
    pub n_obs: usize,
    pub sse: f64,
    pub rmse: f64,
    /// `None` when every site of the group has zero variance.
    pub r2: Option<f64>,
    pub sites_skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: Split,
    pub kind: ModelKind,
    pub config: RaciConfig,
    pub fingerprint: String,
    pub overall: GroupMetrics,
    pub groups: Vec<GroupMetrics>,
    pub fallback_rate: f64,
}

/// Predictions of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePrediction {
    pub key: SampleKey,
    pub pred: Vec<f64>,
    pub fallback: Option<bool>,
}

fn group_metrics(name: &str, samples: &[(&SiteYearSample, &[f64])]) -> Result<GroupMetrics> {
    let mut sse = 0.0;
    let mut n_obs = 0;
    for (s, p) in samples {
        let (e, n) = masked_sse(p, &s.y, &s.mask)?;
        sse += e;
        n_obs += n;
    }
    if n_obs == 0 {
        return Err(RaciError::UndefinedMetric(format!("group {name} has no observed positions")));
    }
    let series: Vec<SiteSeries<'_>> = samples
        .iter()
        .map(|(s, p)| SiteSeries {
            site_id: &s.site_id,
            pred: p,
            obs: &s.y,
            mask: &s.mask,
        })
        .collect();
    let (r2, skipped) = match within_site_r2(&series) {
        Ok(r) => (Some(r.r2), r.sites_skipped),
        Err(RaciError::UndefinedMetric(_)) => {
            let sites: BTreeSet<&str> = samples.iter().map(|(s, _)| s.site_id.as_str()).collect();
            (None, sites.len())
        }
        Err(e) => return Err(e),
    };
    Ok(GroupMetrics {
        group: name.to_string(),
        n_samples: samples.len(),
        n_obs,
        sse,
        rmse: (sse / n_obs as f64).sqrt(),
        r2,
        sites_skipped: skipped,
    })
}

/// Metrics over `preds`, overall and per group.
pub fn metrics_for(
    model: &Model,
    ds: &Dataset,
    split: Split,
    preds: &[SamplePrediction],
    group_by: GroupBy,
) -> Result<MetricsReport> {
    let pairs: Vec<(&SiteYearSample, &[f64])> = preds
        .iter()
        .map(|p| (ds.sample(&p.key).expect("predicted key"), p.pred.as_slice()))
        .filter(|(s, _)| s.observed() > 0)
        .collect();
    let overall = group_metrics("all", &pairs)?;
    let mut groups = Vec::new();
    if group_by == GroupBy::Region {
        let mut by: BTreeMap<String, Vec<(&SiteYearSample, &[f64])>> = BTreeMap::new();
        for &(s, p) in &pairs {
            let tag = ds
                .sites
                .get(&s.site_id)
                .and_then(|m| m.region_tag.clone())
                .unwrap_or_else(|| "untagged".into());
            by.entry(tag).or_default().push((s, p));
        }
        for (g, v) in &by {
            groups.push(group_metrics(g, v)?);
        }
    }
    let flags: Vec<bool> = preds.iter().filter_map(|p| p.fallback).collect();
    Ok(MetricsReport {
        split,
        kind: model.kind,
        config: model.config.clone(),
        fingerprint: model.fingerprint(),
        overall,
        groups,
        fallback_rate: if flags.is_empty() {
            0.0
        } else {
            flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64
        },
    })
}

fn split_years(ds: &Dataset, split: Split) -> Vec<i32> {
    let ys: BTreeSet<i32> = ds.splits.get(split).iter().map(|k| k.year).collect();
    ys.into_iter().collect()
}

/// Eval-mode predictions for every sample of `split` under a frozen context,
/// which must have been built from the model's current parameters.
pub fn predict_split(model: &Model, ds: &Dataset, split: Split, frozen: &FrozenContext) -> Result<Vec<SamplePrediction>> {
    if model.needs_pool() {
        frozen.pool.ensure_current(&model.fingerprint())?;
    }
    let samples = ds.split_samples(split)?;
    if samples.is_empty() {
        return Err(RaciError::Precondition(format!("{} split is empty", split.name())));
    }
    let ctx = frozen.ctx();
    samples
        .iter()
        .map(|s| {
            let mut tape = crate::tape::Tape::new();
            let f = model.forward_tape(&mut tape, s, &ctx, &mut Mode::Eval)?;
            Ok(SamplePrediction {
                key: s.key(),
                pred: tape.value(f.pred).to_vec(),
                fallback: f.report.map(|r| r.fallback),
            })
        })
        .collect()
}

/// Rebuild the pool from the model's parameters and evaluate `split`.
pub fn evaluate(
    model: &Model,
    ds: &Dataset,
    split: Split,
    pool_ds: &Dataset,
    group_by: GroupBy,
) -> Result<(MetricsReport, Vec<SamplePrediction>)> {
    let frozen = FrozenContext::build(model, ds, pool_ds, &split_years(ds, split))?;
    let preds = predict_split(model, ds, split, &frozen)?;
    Ok((metrics_for(model, ds, split, &preds, group_by)?, preds))
}

/// Evaluate with a caller-supplied pool (the neighbor cache is rebuilt).
pub fn evaluate_with_pool(
    model: &Model,
    ds: &Dataset,
    split: Split,
    pool: RetrievalPool,
    group_by: GroupBy,
) -> Result<(MetricsReport, Vec<SamplePrediction>)> {
    let mut frozen = FrozenContext::build(model, ds, ds, &split_years(ds, split))?;
    frozen.pool = pool;
    let preds = predict_split(model, ds, split, &frozen)?;
    Ok((metrics_for(model, ds, split, &preds, group_by)?, preds))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub rmse: f64,
    pub r2: Option<f64>,
}

/// Train one run per configuration and evaluate it on the test split.
pub fn train_and_evaluate(
    ds: &Dataset,
    kind: ModelKind,
    config: RaciConfig,
    train: TrainConfig,
) -> Result<(RunState, MetricsReport)> {
    let mut state = init_run(ds, kind, config, train)?;
    train_epochs(&mut state, ds, ds, None)?;
    let (report, _) = evaluate(&state.model, ds, Split::Test, ds, GroupBy::None)?;
    Ok((state, report))
}

/// Full, -Temporal, -Monthly, -Yearly and -Both from one seed and train config.
pub fn ablation_suite(ds: &Dataset, base: &RaciConfig, train: &TrainConfig) -> Result<Vec<AblationRow>> {
    Variant::ALL
        .into_iter()
        .map(|v| {
            let (_, rep) = train_and_evaluate(ds, ModelKind::Raci, base.with_variant(v), train.clone())?;
            Ok(AblationRow {
                variant: v,
                rmse: rep.overall.rmse,
                r2: rep.overall.r2,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// `tau` or `k_pca`.
    pub knob: String,
    pub value: f64,
    pub rmse: f64,
    pub r2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub tau: Vec<SweepRow>,
    pub k_pca: Vec<SweepRow>,
}

/// Vary `tau` with `k_pca` at its base value, then `k_pca` with `tau` at its
/// base value. Identical settings share one run.
pub fn sensitivity_sweep(
    ds: &Dataset,
    base: &RaciConfig,
    train: &TrainConfig,
    taus: &[f64],
    k_pcas: &[usize],
) -> Result<SweepTable> {
    let mut cache: BTreeMap<(u64, usize), (f64, Option<f64>)> = BTreeMap::new();
    let mut run = |tau: f64, k: usize| -> Result<(f64, Option<f64>)> {
        if let Some(&r) = cache.get(&(tau.to_bits(), k)) {
            return Ok(r);
        }
        let cfg = RaciConfig {
            tau,
            k_pca: k,
            ..base.clone()
        };
        let (_, rep) = train_and_evaluate(ds, ModelKind::Raci, cfg, train.clone())?;
        let r = (rep.overall.rmse, rep.overall.r2);
        cache.insert((tau.to_bits(), k), r);
        Ok(r)
    };
    let mut table = SweepTable {
        tau: Vec::new(),
        k_pca: Vec::new(),
    };
    for &t in taus {
        let (rmse, r2) = run(t, base.k_pca)?;
        table.tau.push(SweepRow {
            knob: "tau".into(),
            value: t,
            rmse,
            r2,
        });
    }
    for &k in k_pcas {
        let (rmse, r2) = run(base.tau, k)?;
        table.k_pca.push(SweepRow {
            knob: "k_pca".into(),
            value: k as f64,
            rmse,
            r2,
        });
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverCorrelation {
    pub driver: String,
    pub r: f64,
    /// Set when either series is constant (then `r = 0`).
    pub constant: bool,
}

/// Attention and gate records of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionExport {
    pub key: SampleKey,
    pub diagnostics: Diagnostics,
    /// Daily aggregation weight of every day, concatenated over months.
    pub alpha_daily: Vec<f64>,
    pub correlations: Vec<DriverCorrelation>,
}

pub fn export_attention(model: &Model, ds: &Dataset, s: &SiteYearSample, ctx: &Context<'_>) -> Result<AttentionExport> {
    let (_, diag) = model.forward(s, ctx, &mut Mode::Eval)?;
    let diag = diag.ok_or_else(|| RaciError::Precondition("attention export needs a RACI model".into()))?;
    let alpha_daily: Vec<f64> = diag.embedding.alpha_d2m.iter().flatten().copied().collect();
    let correlations = ds
        .feature_names
        .daily
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let (r, constant) = pearson(&alpha_daily, &s.x_daily.column(j));
            DriverCorrelation {
                driver: name.clone(),
                r,
                constant,
            }
        })
        .collect();
    Ok(AttentionExport {
        key: s.key(),
        diagnostics: diag,
        alpha_daily,
        correlations,
    })
}
