//! Masked-loss optimization, gradient checking, fine-tuning and MC dropout.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SampleKey, SiteYearSample, Split};
use crate::error::{RaciError, Result};
use crate::params::{Grads, ParamStore};
use crate::predictor::{Context, Mode, Model, ModelKind, NeighborCache, RaciConfig, Standardizer};
use crate::retrieval::{build_neighbor_index, NeighborIndex, RetrievalPool, RetrievalReport};
use crate::rng;
use crate::tape::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::eps")]
    pub eps: f64,
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

mod defaults {
    pub fn lr() -> f64 {
        0.001
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn eps() -> f64 {
        1e-8
    }
}

impl TrainConfig {
    pub fn new(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            epochs,
            lr: defaults::lr(),
            batch_size: defaults::batch_size(),
            seed,
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            eps: defaults::eps(),
            grad_clip: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(RaciError::Config(format!("lr = {} must be finite and >= 0", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(RaciError::Config("batch_size must be >= 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(RaciError::Config("grad_clip must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Mean squared error over observed positions.
pub fn masked_mse(pred: &[f64], y: &[f64], mask: &[bool]) -> Result<f64> {
    if pred.len() != y.len() || y.len() != mask.len() {
        return Err(RaciError::Shape("pred, y and mask lengths differ".into()));
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    for t in 0..pred.len() {
        if mask[t] {
            let d = pred[t] - y[t];
            acc += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(RaciError::DegenerateBatch);
    }
    Ok(acc / n as f64)
}

/// Adaptive-moment optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(p: &ParamStore) -> Self {
        let z = p.zero_grads().data;
        AdamState {
            t: 0,
            m: z.clone(),
            v: z,
        }
    }

    pub fn step(&mut self, p: &mut ParamStore, g: &Grads, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (k, id) in p.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let data = p.data_mut(id);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, &gi) in g.data[k].iter().enumerate() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean of the batch losses.
    pub loss: f64,
    /// Fraction of training forwards whose yearly retrieval fell back.
    pub fallback_rate: f64,
    pub pool_fingerprint: String,
}

/// Everything needed to continue a run exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    pub model: Model,
    pub adam: AdamState,
    pub train: TrainConfig,
    /// Epochs completed.
    pub epoch: usize,
    pub history: Vec<EpochLog>,
    pub pool_fingerprint: Option<String>,
}

/// Receives every retrieval report produced during training.
pub type RetrievalObserver<'a> = dyn FnMut(usize, &RetrievalReport) + 'a;

/// Fresh model with inputs standardized on the train split of `ds`.
pub fn init_run(ds: &Dataset, kind: ModelKind, config: RaciConfig, train: TrainConfig) -> Result<RunState> {
    train.validate()?;
    let samples = ds.split_samples(Split::Train)?;
    let scaler = Standardizer::fit(&samples, ds.dims());
    let model = Model::new(kind, config, ds.dims(), ds.calendar.clone(), scaler, train.seed)?;
    let adam = AdamState::new(&model.params);
    Ok(RunState {
        model,
        adam,
        train,
        epoch: 0,
        history: Vec::new(),
        pool_fingerprint: None,
    })
}

fn check_trainable(ds: &Dataset, pool_ds: &Dataset) -> Result<()> {
    if ds.splits.train.is_empty() {
        return Err(RaciError::Precondition("train split is empty".into()));
    }
    if pool_ds.splits.auxiliary.is_empty() {
        return Err(RaciError::Precondition("auxiliary split is empty".into()));
    }
    let observed: usize = ds.split_samples(Split::Train)?.iter().map(|s| s.observed()).sum();
    if observed == 0 {
        return Err(RaciError::Precondition("train split has no observed targets".into()));
    }
    Ok(())
}

pub fn neighbor_index_for(model: &Model, ds: &Dataset) -> Result<Option<NeighborIndex>> {
    if model.needs_neighbors() && ds.sites.len() >= 2 {
        Ok(Some(build_neighbor_index(&ds.sites, model.config.k_neighbors)?))
    } else {
        Ok(None)
    }
}

fn split_years(ds: &Dataset, split: Split) -> Vec<i32> {
    let ys: BTreeSet<i32> = ds.splits.get(split).iter().map(|k| k.year).collect();
    ys.into_iter().collect()
}

/// Run epochs until `state.train.epochs` have been completed. `pool_ds` supplies
/// the auxiliary split for retrieval (normally `ds` itself).
pub fn train_epochs(
    state: &mut RunState,
    ds: &Dataset,
    pool_ds: &Dataset,
    observer: Option<&mut RetrievalObserver<'_>>,
) -> Result<()> {
    state.train.validate()?;
    check_trainable(ds, pool_ds)?;
    let mut observer = observer;
    let index = neighbor_index_for(&state.model, ds)?;
    let years = split_years(ds, Split::Train);
    let train = ds.split_samples(Split::Train)?;
    let keys: Vec<SampleKey> = train.iter().filter(|s| s.observed() > 0).map(|s| s.key()).collect();
    let mut tape = Tape::new();
    while state.epoch < state.train.epochs {
        let epoch = state.epoch;
        let cfg = state.train.clone();
        let model = &mut state.model;
        let fingerprint = model.fingerprint();
        let pool = model.pool_for(pool_ds)?;
        let cache = model.neighbor_cache(ds, &years)?;
        let mut order = keys.clone();
        order.shuffle(&mut rng::stream(cfg.seed, "shuffle", "", &[epoch as i64]));
        let mut batch_losses = Vec::new();
        let mut fallbacks = 0usize;
        let mut retrievals = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch: Vec<&SiteYearSample> = chunk.iter().map(|k| ds.sample(k).expect("train key")).collect();
            batch.sort_by_key(|s| s.key());
            let n_obs: usize = batch.iter().map(|s| s.observed()).sum();
            let ctx = Context {
                pool: Some(&pool),
                neighbors: index.as_ref(),
                cache: Some(&cache),
            };
            let mut grads = model.params.zero_grads();
            let mut sse = 0.0;
            for s in &batch {
                let mut r = rng::stream(cfg.seed, "dropout", &s.site_id, &[epoch as i64, s.year as i64]);
                let (v, report) = model.sse_and_grad(
                    &mut tape,
                    s,
                    &ctx,
                    &mut Mode::Stochastic(&mut r),
                    1.0 / n_obs as f64,
                    &mut grads,
                )?;
                sse += v;
                if let Some(rep) = report {
                    retrievals += 1;
                    fallbacks += rep.fallback as usize;
                    if let Some(obs) = observer.as_deref_mut() {
                        obs(epoch, &rep);
                    }
                }
            }
            check_finite(&model.params, &grads)?;
            if let Some(c) = cfg.grad_clip {
                let n = grads.global_norm();
                if n > c {
                    grads.scale(c / n);
                }
            }
            state.adam.step(&mut model.params, &grads, &cfg);
            batch_losses.push(sse / n_obs as f64);
        }
        let loss = batch_losses.iter().sum::<f64>() / batch_losses.len().max(1) as f64;
        state.history.push(EpochLog {
            epoch,
            loss,
            fallback_rate: if retrievals == 0 {
                0.0
            } else {
                fallbacks as f64 / retrievals as f64
            },
            pool_fingerprint: fingerprint.clone(),
        });
        state.pool_fingerprint = Some(fingerprint);
        state.epoch += 1;
    }
    Ok(())
}

fn check_finite(p: &ParamStore, g: &Grads) -> Result<()> {
    for id in p.ids() {
        if g.get(id).iter().any(|v| !v.is_finite()) {
            return Err(RaciError::NonFiniteGradient(p.tensor(id).name.clone()));
        }
    }
    Ok(())
}

/// Train from scratch on `ds` for `train.epochs` epochs.
pub fn train(ds: &Dataset, kind: ModelKind, config: RaciConfig, train: TrainConfig) -> Result<RunState> {
    let mut state = init_run(ds, kind, config, train)?;
    train_epochs(&mut state, ds, ds, None)?;
    Ok(state)
}

/// Continue optimizing a trained run on `ds` for `extra_epochs`, keeping the
/// optimizer state and retrieving from `pool_ds`'s auxiliary split.
pub fn fine_tune(
    mut state: RunState,
    ds: &Dataset,
    pool_ds: &Dataset,
    extra_epochs: usize,
    observer: Option<&mut RetrievalObserver<'_>>,
) -> Result<RunState> {
    let md = state.model.dims;
    let dd = ds.dims();
    for (block, a, b) in [
        ("daily", md.daily, dd.daily),
        ("monthly", md.monthly, dd.monthly),
        ("yearly", md.yearly, dd.yearly),
        ("static", md.static_, dd.static_),
    ] {
        if a != b {
            return Err(RaciError::Shape(format!(
                "{block} block: checkpoint has {a} features, dataset has {b}"
            )));
        }
    }
    if state.model.calendar != ds.calendar {
        return Err(RaciError::Shape("calendar differs from the checkpoint".into()));
    }
    state.train.epochs = state.epoch + extra_epochs;
    train_epochs(&mut state, ds, pool_ds, observer)?;
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub n_checked: usize,
    /// Largest relative error per tensor.
    pub per_tensor: Vec<(String, f64)>,
}

/// Relative error `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Batch loss `sum SSE / sum observed` in eval mode.
pub fn batch_loss(model: &Model, batch: &[&SiteYearSample], ctx: &Context<'_>) -> Result<f64> {
    let n_obs: usize = batch.iter().map(|s| s.observed()).sum();
    if n_obs == 0 {
        return Err(RaciError::DegenerateBatch);
    }
    let mut sse = 0.0;
    for s in batch {
        let pred = model.predict(s, ctx, &mut Mode::Eval)?;
        for t in 0..pred.len() {
            if s.mask[t] {
                let d = pred[t] - s.y[t];
                sse += d * d;
            }
        }
    }
    Ok(sse / n_obs as f64)
}

fn batch_predictions(model: &Model, batch: &[&SiteYearSample], ctx: &Context<'_>) -> Result<Vec<Vec<f64>>> {
    batch.iter().map(|s| model.predict(s, ctx, &mut Mode::Eval)).collect()
}

/// `L(up) - L(dn)` summed per day as `(a - b)(a + b - 2y)`, which avoids
/// cancelling two nearly equal totals.
fn loss_difference(batch: &[&SiteYearSample], up: &[Vec<f64>], dn: &[Vec<f64>], n_obs: usize) -> f64 {
    let mut acc = 0.0;
    for ((s, a), b) in batch.iter().zip(up).zip(dn) {
        for t in 0..a.len() {
            if s.mask[t] {
                acc += (a[t] - b[t]) * (a[t] + b[t] - 2.0 * s.y[t]);
            }
        }
    }
    acc / n_obs as f64
}

/// Analytic gradients of the batch loss against central differences, with
/// dropout off and the pool and neighbor cache frozen.
pub fn grad_check(model: &Model, batch: &[&SiteYearSample], ctx: &Context<'_>, step: f64) -> Result<GradCheckReport> {
    let n_obs: usize = batch.iter().map(|s| s.observed()).sum();
    if n_obs == 0 {
        return Err(RaciError::DegenerateBatch);
    }
    let mut tape = Tape::new();
    let mut grads = model.params.zero_grads();
    for s in batch {
        model.sse_and_grad(&mut tape, s, ctx, &mut Mode::Eval, 1.0 / n_obs as f64, &mut grads)?;
    }
    check_finite(&model.params, &grads)?;
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        n_checked: 0,
        per_tensor: Vec::new(),
    };
    for id in model.params.ids() {
        let name = model.params.tensor(id).name.clone();
        let mut worst = 0.0f64;
        for i in 0..model.params.data(id).len() {
            let orig = model.params.data(id)[i];
            probe.params.data_mut(id)[i] = orig + step;
            let up = batch_predictions(&probe, batch, ctx)?;
            probe.params.data_mut(id)[i] = orig - step;
            let dn = batch_predictions(&probe, batch, ctx)?;
            probe.params.data_mut(id)[i] = orig;
            let fd = loss_difference(batch, &up, &dn, n_obs) / (2.0 * step);
            let e = rel_error(grads.get(id)[i], fd);
            worst = worst.max(e);
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
            report.n_checked += 1;
        }
        report.per_tensor.push((name, worst));
    }
    Ok(report)
}

/// Frozen retrieval inputs for evaluating a model on `ds`.
pub struct FrozenContext {
    pub pool: RetrievalPool,
    pub index: Option<NeighborIndex>,
    pub cache: NeighborCache,
}

impl FrozenContext {
    /// Pool from `pool_ds`'s auxiliary split and neighbor states for `years` of `ds`.
    pub fn build(model: &Model, ds: &Dataset, pool_ds: &Dataset, years: &[i32]) -> Result<Self> {
        Ok(FrozenContext {
            pool: model.pool_for(pool_ds)?,
            index: neighbor_index_for(model, ds)?,
            cache: model.neighbor_cache(ds, years)?,
        })
    }

    pub fn ctx(&self) -> Context<'_> {
        Context {
            pool: Some(&self.pool),
            neighbors: self.index.as_ref(),
            cache: Some(&self.cache),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McPrediction {
    pub mean: Vec<f64>,
    /// Sample (n - 1) standard deviation per day.
    pub std: Vec<f64>,
    /// `mean(std) / mean(|mean|)`; 0 when the mean prediction is identically 0.
    pub spread_ratio: f64,
}

/// Per-day mean and sample standard deviation over `passes` stochastic forwards.
pub fn mc_summary(passes: &[Vec<f64>]) -> Result<McPrediction> {
    let t = passes.len();
    if t < 2 {
        return Err(RaciError::Precondition("MC dropout needs at least 2 passes".into()));
    }
    let days = passes[0].len();
    // Welford updates: identical passes keep the mean exact and the spread at 0
    let mut mean = passes[0].clone();
    let mut std = vec![0.0; days];
    for (k, p) in passes.iter().enumerate().skip(1) {
        for ((m, s), v) in mean.iter_mut().zip(std.iter_mut()).zip(p) {
            let delta = v - *m;
            *m += delta / (k + 1) as f64;
            *s += delta * (v - *m);
        }
    }
    std.iter_mut().for_each(|s| *s = (*s / (t - 1) as f64).sqrt());
    let mean_std = std.iter().sum::<f64>() / days.max(1) as f64;
    let mean_abs = mean.iter().map(|m| m.abs()).sum::<f64>() / days.max(1) as f64;
    Ok(McPrediction {
        spread_ratio: if mean_abs > 0.0 { mean_std / mean_abs } else { 0.0 },
        mean,
        std,
    })
}

/// MC dropout with dropout probability `p` over `passes` forwards.
pub fn mc_dropout_predict(
    model: &Model,
    s: &SiteYearSample,
    ctx: &Context<'_>,
    p: f64,
    passes: usize,
    seed: u64,
) -> Result<McPrediction> {
    let mut m = model.clone();
    m.config.dropout_p = p;
    m.config.validate()?;
    let outs = (0..passes)
        .map(|i| {
            let mut r = rng::stream(seed, "mc_dropout", &s.site_id, &[s.year as i64, i as i64]);
            m.predict(s, ctx, &mut Mode::Stochastic(&mut r))
        })
        .collect::<Result<Vec<_>>>()?;
    mc_summary(&outs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{build_benchmark, GeneratorConfig};

    #[test]
    fn masked_mse_cases() {
        assert_eq!(masked_mse(&[1.0, 2.0], &[1.0, 2.0], &[true, true]).unwrap(), 0.0);
        assert_eq!(masked_mse(&[0.0, 0.0], &[3.0, 4.0], &[true, true]).unwrap(), 12.5);
        assert_eq!(masked_mse(&[0.0, 9.0], &[3.0, 0.0], &[true, false]).unwrap(), 9.0);
        assert!(matches!(masked_mse(&[0.0], &[0.0], &[false]), Err(RaciError::DegenerateBatch)));
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = ParamStore::new();
        p.add("w", &[3], vec![0.5, -1.0, 2.0]).unwrap();
        let before = p.clone();
        let mut a = AdamState::new(&p);
        let g = p.zero_grads();
        a.step(&mut p, &g, &TrainConfig::new(1, 0));
        assert_eq!(p, before);
    }

    #[test]
    fn two_pass_std_convention() {
        let r = mc_summary(&[vec![1.0, 5.0], vec![3.0, 5.0]]).unwrap();
        assert_eq!(r.mean, vec![2.0, 5.0]);
        assert_eq!(r.std, vec![2.0f64.sqrt(), 0.0]);
        assert!(mc_summary(&[vec![1.0]]).is_err());
    }

    #[test]
    fn identical_passes_have_exactly_zero_spread() {
        // 0.1 * 50 / 50 != 0.1 in floating point, so a summed mean would leak
        let passes = vec![vec![0.1, -7.3, 1e-9]; 50];
        let r = mc_summary(&passes).unwrap();
        assert_eq!(r.mean, passes[0]);
        assert!(r.std.iter().all(|&s| s == 0.0));
        assert_eq!(r.spread_ratio, 0.0);
    }

    fn tiny() -> (Dataset, RaciConfig) {
        let ds = build_benchmark(&GeneratorConfig::tiny(11)).unwrap();
        let cfg = RaciConfig {
            h: 4,
            lstm_layers: 2,
            k_pca: 1,
            ..Default::default()
        };
        (ds, cfg)
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (ds, mut cfg) = tiny();
        cfg.dropout_p = 0.0;
        let mut tc = TrainConfig::new(3, 5);
        tc.lr = 0.0;
        let init = init_run(&ds, ModelKind::Raci, cfg.clone(), tc.clone()).unwrap();
        let run = train(&ds, ModelKind::Raci, cfg, tc).unwrap();
        assert_eq!(run.model.params, init.model.params);
        let first = &run.history[0];
        assert!(first.loss > 0.0);
        assert!(run.history.iter().all(|h| h.loss == first.loss && h.pool_fingerprint == first.pool_fingerprint));
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let (ds, cfg) = tiny();
        let full = train(&ds, ModelKind::Raci, cfg.clone(), TrainConfig::new(4, 9)).unwrap();
        let mut part = init_run(&ds, ModelKind::Raci, cfg, TrainConfig::new(2, 9)).unwrap();
        train_epochs(&mut part, &ds, &ds, None).unwrap();
        let resumed = fine_tune(part, &ds, &ds, 2, None).unwrap();
        assert_eq!(resumed.model.params, full.model.params);
        assert_eq!(resumed.history, full.history);
    }

    #[test]
    fn empty_auxiliary_split_is_rejected() {
        let (mut ds, cfg) = tiny();
        ds.splits.auxiliary.clear();
        assert!(train(&ds, ModelKind::Raci, cfg, TrainConfig::new(1, 0)).is_err());
    }
}
