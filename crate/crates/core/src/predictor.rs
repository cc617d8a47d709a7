//! Full forward pass: encoders, temporal hierarchy, spatial contexts and the
//! stacked LSTM head; the ablation variants and the plain LSTM baseline.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{replicate_for_baseline, CalendarSpec, Dataset, FeatureDims, Matrix, SampleKey, SiteYearSample, Split};
use crate::encoders::EncoderParams;
use crate::error::{RaciError, Result};
use crate::params::{Grads, ParamId, ParamStore};
use crate::retrieval::{
    fuse_monthly_context, monthly_context_tape, retrieve_yearly_tape, MonthlyContextParams, NeighborIndex, PoolInput,
    RetrievalPool, RetrievalReport,
};
use crate::rng::{self, Rng};
use crate::tape::{Tape, Var};
use crate::temporal::{aggregate, propagate_m2d, propagate_y2m, AttnParams, HierarchicalEmbedding, TemporalParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RaciConfig {
    pub h: usize,
    pub lstm_layers: usize,
    pub dropout_p: f64,
    pub k_neighbors: usize,
    pub k_pca: usize,
    pub tau: f64,
    pub use_temporal: bool,
    pub use_monthly_ctx: bool,
    pub use_yearly_ctx: bool,
}

impl Default for RaciConfig {
    fn default() -> Self {
        RaciConfig {
            h: 32,
            lstm_layers: 3,
            dropout_p: 0.1,
            k_neighbors: 8,
            k_pca: 4,
            tau: 0.99,
            use_temporal: true,
            use_monthly_ctx: true,
            use_yearly_ctx: true,
        }
    }
}

impl RaciConfig {
    /// Width-4, dropout-free configuration for gradient checks on the tiny
    /// generator preset (whose pool has two entries, hence one PCA axis).
    pub fn toy() -> Self {
        RaciConfig {
            h: 4,
            dropout_p: 0.0,
            k_pca: 1,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.lstm_layers == 0 {
            return Err(RaciError::Config("h and lstm_layers must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(RaciError::Config(format!("dropout_p = {} outside [0, 1)", self.dropout_p)));
        }
        if !(self.tau > -1.0 && self.tau <= 1.0) {
            return Err(RaciError::Config(format!("tau = {} outside (-1, 1]", self.tau)));
        }
        if self.k_neighbors == 0 || self.k_pca == 0 {
            return Err(RaciError::Config("k_neighbors and k_pca must be >= 1".into()));
        }
        Ok(())
    }

    pub fn with_variant(&self, v: Variant) -> RaciConfig {
        let (t, m, y) = match v {
            Variant::Full => (true, true, true),
            Variant::NoTemporal => (false, true, true),
            Variant::NoMonthly => (true, false, true),
            Variant::NoYearly => (true, true, false),
            Variant::NoBoth => (true, false, false),
        };
        RaciConfig {
            use_temporal: t,
            use_monthly_ctx: m,
            use_yearly_ctx: y,
            ..self.clone()
        }
    }
}

/// Ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    Full,
    NoTemporal,
    NoMonthly,
    NoYearly,
    NoBoth,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoTemporal,
        Variant::NoMonthly,
        Variant::NoYearly,
        Variant::NoBoth,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "Full",
            Variant::NoTemporal => "-Temporal",
            Variant::NoMonthly => "-Monthly",
            Variant::NoYearly => "-Yearly",
            Variant::NoBoth => "-Both",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = RaciError;
    /// Accepts the label ("-Yearly") and dash-free spellings ("no-yearly", "yearly").
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let bare = lower.trim_start_matches('-').trim_start_matches("no-");
        Variant::ALL
            .into_iter()
            .find(|v| v.label().to_ascii_lowercase().trim_start_matches('-') == bare)
            .ok_or_else(|| RaciError::Config(format!("unknown variant {s}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Raci,
    Baseline,
}

/// Per-column `(mean, std)` of each input block, fitted on a training split;
/// targets are scaled by `y_scale` only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub daily: Vec<(f64, f64)>,
    pub monthly: Vec<(f64, f64)>,
    pub regime: Vec<(f64, f64)>,
    pub y_scale: f64,
}

fn column_stats(rows: &[&[f64]], cols: usize) -> Vec<(f64, f64)> {
    (0..cols)
        .map(|j| {
            let n = rows.len() as f64;
            if rows.is_empty() {
                return (0.0, 1.0);
            }
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            (mean, if sd > 0.0 { sd } else { 1.0 })
        })
        .collect()
}

impl Standardizer {
    pub fn identity(dims: FeatureDims) -> Self {
        Standardizer {
            daily: vec![(0.0, 1.0); dims.daily],
            monthly: vec![(0.0, 1.0); dims.monthly],
            regime: vec![(0.0, 1.0); dims.regime()],
            y_scale: 1.0,
        }
    }

    pub fn fit(samples: &[&SiteYearSample], dims: FeatureDims) -> Self {
        let daily: Vec<&[f64]> = samples
            .iter()
            .flat_map(|s| (0..s.x_daily.rows).map(move |t| s.x_daily.row(t)))
            .collect();
        let monthly: Vec<&[f64]> = samples
            .iter()
            .flat_map(|s| (0..s.x_monthly.rows).map(move |m| s.x_monthly.row(m)))
            .collect();
        let regime_vecs: Vec<Vec<f64>> = samples.iter().map(|s| s.regime_vector()).collect();
        let regime: Vec<&[f64]> = regime_vecs.iter().map(|v| v.as_slice()).collect();
        let ys: Vec<f64> = samples
            .iter()
            .flat_map(|s| s.y.iter().zip(&s.mask).filter(|(_, &m)| m).map(|(v, _)| *v))
            .collect();
        let y_scale = if ys.is_empty() {
            1.0
        } else {
            let n = ys.len() as f64;
            let mean = ys.iter().sum::<f64>() / n;
            let sd = (ys.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        };
        Standardizer {
            daily: column_stats(&daily, dims.daily),
            monthly: column_stats(&monthly, dims.monthly),
            regime: column_stats(&regime, dims.regime()),
            y_scale,
        }
    }

    fn scale_matrix(m: &Matrix, stats: &[(f64, f64)]) -> Matrix {
        let mut out = m.clone();
        for i in 0..m.rows {
            for (v, &(mu, sd)) in out.row_mut(i).iter_mut().zip(stats) {
                *v = (*v - mu) / sd;
            }
        }
        out
    }

    /// Standardized copy of the feature blocks (targets untouched).
    pub fn apply(&self, s: &SiteYearSample) -> SiteYearSample {
        let dy = s.x_yearly.len();
        let scale = |v: &[f64], stats: &[(f64, f64)]| -> Vec<f64> {
            v.iter().zip(stats).map(|(x, &(mu, sd))| (x - mu) / sd).collect()
        };
        SiteYearSample {
            site_id: s.site_id.clone(),
            year: s.year,
            x_daily: Self::scale_matrix(&s.x_daily, &self.daily),
            x_monthly: Self::scale_matrix(&s.x_monthly, &self.monthly),
            x_yearly: scale(&s.x_yearly, &self.regime[..dy]),
            x_static: scale(&s.x_static, &self.regime[dy..]),
            y: s.y.clone(),
            mask: s.mask.clone(),
        }
    }
}

/// Stacked LSTM with gates `[input, forget, output, candidate]` and an affine readout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LstmHead {
    /// `(W (4h, in + h), b (4h))` per layer.
    pub layers: Vec<(ParamId, ParamId)>,
    pub readout_w: ParamId,
    pub readout_b: ParamId,
    pub h: usize,
    pub d_in: usize,
}

impl LstmHead {
    pub fn init(p: &mut ParamStore, d_in: usize, h: usize, n_layers: usize, rng: &mut Rng) -> Self {
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let inp = if l == 0 { d_in } else { h };
            let w = p.add_uniform(&format!("lstm.{l}.w"), &[4 * h, inp + h], h, rng);
            let b = p.add_uniform(&format!("lstm.{l}.b"), &[4 * h], h, rng);
            layers.push((w, b));
        }
        LstmHead {
            layers,
            readout_w: p.add_uniform("readout.w", &[1, h], h, rng),
            readout_b: p.add_uniform("readout.b", &[1], h, rng),
            h,
            d_in,
        }
    }

    pub fn bind(p: &ParamStore, n_layers: usize) -> Result<Self> {
        let get = |name: String| {
            p.id(&name).ok_or(RaciError::Load {
                file: "parameters".into(),
                msg: format!("missing tensor {name}"),
            })
        };
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            layers.push((get(format!("lstm.{l}.w"))?, get(format!("lstm.{l}.b"))?));
        }
        let readout_w = get("readout.w".into())?;
        let h = p.tensor(readout_w).shape[1];
        let w0 = &p.tensor(layers[0].0).shape;
        if w0[0] != 4 * h || w0[1] < h {
            return Err(RaciError::Shape("lstm.0.w has an inconsistent shape".into()));
        }
        Ok(LstmHead {
            d_in: w0[1] - h,
            layers,
            readout_w,
            readout_b: get("readout.b".into())?,
            h,
        })
    }

    /// Per-day outputs for a `days x d_in` input sequence.
    pub fn run(&self, tape: &mut Tape, p: &ParamStore, x: Var, days: usize, mode: &mut Mode<'_>, dropout_p: f64) -> Var {
        let h = self.h;
        let mut input = x;
        let mut width = self.d_in;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let mut h_prev = tape.zeros(h);
            let mut c_prev: Option<Var> = None;
            let mut outs = Vec::with_capacity(days);
            for t in 0..days {
                let gates = tape.affine2(p, w, Some(b), input.row(t, width), h_prev);
                let hc = tape.lstm_cell(gates, c_prev);
                h_prev = hc.row(0, h);
                c_prev = Some(hc.row(1, h));
                outs.push(h_prev);
            }
            let mut seq = tape.stack(outs);
            if l + 1 < self.layers.len() {
                seq = dropout(tape, seq, mode, dropout_p);
            }
            input = seq;
            width = h;
        }
        tape.row_affine(p, self.readout_w, Some(self.readout_b), input, days)
    }
}

/// `Eval` disables dropout; `Stochastic` draws dropout masks from the given stream.
pub enum Mode<'r> {
    Eval,
    Stochastic(&'r mut Rng),
}

/// Zero each entry with probability `p`, scale survivors by `1 / (1 - p)`.
pub fn dropout(tape: &mut Tape, x: Var, mode: &mut Mode<'_>, p: f64) -> Var {
    match mode {
        Mode::Stochastic(rng) if p > 0.0 => {
            let keep = 1.0 / (1.0 - p);
            let mask: Vec<f64> = (0..x.len)
                .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
                .collect();
            let m = tape.constant(&mask);
            tape.mul(x, m)
        }
        _ => x,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RaciParams {
    pub enc: EncoderParams,
    pub temporal: TemporalParams,
    pub mctx: MonthlyContextParams,
    pub yret: AttnParams,
    pub head: LstmHead,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelParams {
    Raci(RaciParams),
    Baseline(LstmHead),
}

/// Refined monthly states of neighbor samples, frozen for one epoch or evaluation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NeighborCache {
    pub states: BTreeMap<SampleKey, Matrix>,
}

/// Frozen inputs a forward pass reads besides the sample itself.
#[derive(Clone, Copy, Default)]
pub struct Context<'a> {
    pub pool: Option<&'a RetrievalPool>,
    pub neighbors: Option<&'a NeighborIndex>,
    pub cache: Option<&'a NeighborCache>,
}

/// Tape handles of one RACI forward pass.
#[derive(Debug, Clone)]
struct Handles {
    h_daily: Var,
    h_monthly: Var,
    h_yearly: Var,
    h_monthly_tilde: Var,
    h_monthly_eff: Var,
    h_daily_tilde: Var,
    alpha_d2m: Option<Var>,
    alpha_m2y: Option<Var>,
    beta_y2m: Var,
    beta_m2d: Var,
    c_yearly: Option<Var>,
    c_monthly: Option<Var>,
    gate_mctx: Option<Var>,
}

pub struct TapeForward {
    pub pred: Var,
    pub report: Option<RetrievalReport>,
    handles: Option<Handles>,
}

/// Everything a forward pass exposes for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub embedding: HierarchicalEmbedding,
    pub retrieval: Option<RetrievalReport>,
    /// Per-day yearly context fed to the head (zeros on fallback).
    pub c_yearly: Vec<f64>,
    pub c_monthly: Option<Matrix>,
    pub gate_mctx: Option<Vec<f64>>,
}

/// A RACI or baseline network with its parameters and input scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub config: RaciConfig,
    pub dims: FeatureDims,
    pub calendar: CalendarSpec,
    pub scaler: Standardizer,
    pub params: ParamStore,
    pub ids: ModelParams,
}

impl Model {
    pub fn new(
        kind: ModelKind,
        config: RaciConfig,
        dims: FeatureDims,
        calendar: CalendarSpec,
        scaler: Standardizer,
        seed: u64,
    ) -> Result<Model> {
        config.validate()?;
        let mut p = ParamStore::new();
        let mut r = rng::stream(seed, "init", "", &[]);
        let h = config.h;
        let ids = match kind {
            ModelKind::Raci => {
                let enc = EncoderParams::init(&mut p, dims.daily, dims.monthly, dims.regime(), h, &mut r);
                let temporal = TemporalParams::init(&mut p, h, &mut r);
                let mctx = MonthlyContextParams::init(&mut p, h, &mut r);
                let yret = AttnParams::init(&mut p, "attn.yret", h, &mut r);
                let head = LstmHead::init(&mut p, h + 1, h, config.lstm_layers, &mut r);
                ModelParams::Raci(RaciParams {
                    enc,
                    temporal,
                    mctx,
                    yret,
                    head,
                })
            }
            ModelKind::Baseline => {
                ModelParams::Baseline(LstmHead::init(&mut p, dims.baseline(), h, config.lstm_layers, &mut r))
            }
        };
        Ok(Model {
            kind,
            config,
            dims,
            calendar,
            scaler,
            params: p,
            ids,
        })
    }

    /// Reassemble from stored parameters.
    pub fn from_parts(
        kind: ModelKind,
        config: RaciConfig,
        dims: FeatureDims,
        calendar: CalendarSpec,
        scaler: Standardizer,
        params: ParamStore,
    ) -> Result<Model> {
        config.validate()?;
        let ids = match kind {
            ModelKind::Raci => ModelParams::Raci(RaciParams {
                enc: EncoderParams::bind(&params)?,
                temporal: TemporalParams::bind(&params)?,
                mctx: MonthlyContextParams::bind(&params)?,
                yret: AttnParams::bind(&params, "attn.yret")?,
                head: LstmHead::bind(&params, config.lstm_layers)?,
            }),
            ModelKind::Baseline => ModelParams::Baseline(LstmHead::bind(&params, config.lstm_layers)?),
        };
        let m = Model {
            kind,
            config,
            dims,
            calendar,
            scaler,
            params,
            ids,
        };
        m.check_param_dims()?;
        Ok(m)
    }

    fn check_param_dims(&self) -> Result<()> {
        let bad = |block: &str, want: usize, got: usize| {
            RaciError::Shape(format!("{block} block: parameters expect {want} features, data has {got}"))
        };
        match &self.ids {
            ModelParams::Raci(r) => {
                if r.enc.h != self.config.h {
                    return Err(RaciError::Shape("encoder width differs from config.h".into()));
                }
                if r.enc.daily.d_in != self.dims.daily {
                    return Err(bad("daily", r.enc.daily.d_in, self.dims.daily));
                }
                if r.enc.monthly.d_in != self.dims.monthly {
                    return Err(bad("monthly", r.enc.monthly.d_in, self.dims.monthly));
                }
                if r.enc.regime.d_in != self.dims.regime() {
                    return Err(bad("yearly+static", r.enc.regime.d_in, self.dims.regime()));
                }
            }
            ModelParams::Baseline(head) => {
                if head.d_in != self.dims.baseline() {
                    return Err(bad("replicated", head.d_in, self.dims.baseline()));
                }
            }
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    pub fn raci(&self) -> Option<&RaciParams> {
        match &self.ids {
            ModelParams::Raci(r) => Some(r),
            ModelParams::Baseline(_) => None,
        }
    }

    /// Whether forwards read a retrieval pool.
    pub fn needs_pool(&self) -> bool {
        self.kind == ModelKind::Raci && self.config.use_yearly_ctx
    }

    pub fn needs_neighbors(&self) -> bool {
        self.kind == ModelKind::Raci && self.config.use_monthly_ctx
    }

    pub fn check_sample(&self, s: &SiteYearSample) -> Result<()> {
        let d = self.calendar.days_per_year;
        let m = self.calendar.month_lengths.len();
        let ok = s.x_daily.rows == d
            && s.x_daily.cols == self.dims.daily
            && s.x_monthly.rows == m
            && s.x_monthly.cols == self.dims.monthly
            && s.x_yearly.len() == self.dims.yearly
            && s.x_static.len() == self.dims.static_
            && s.y.len() == d
            && s.mask.len() == d;
        if ok {
            Ok(())
        } else {
            Err(RaciError::Shape(format!("sample {} does not match the model's dimensions", s.key())))
        }
    }

    fn encode(
        &self,
        tape: &mut Tape,
        r: &RaciParams,
        s: &SiteYearSample,
        mode: &mut Mode<'_>,
    ) -> (Var, Var, crate::temporal::Aggregated) {
        let p = &self.params;
        let cal = &self.calendar;
        let z = self.scaler.apply(s);
        let xd = tape.constant(&z.x_daily.data);
        let xm = tape.constant(&z.x_monthly.data);
        let xr = tape.constant(&z.regime_vector());
        let hd = r.enc.daily.apply(tape, p, xd, cal.days_per_year);
        let hd = dropout(tape, hd, mode, self.config.dropout_p);
        let pm = r.enc.monthly.apply(tape, p, xm, cal.month_lengths.len());
        let pm = dropout(tape, pm, mode, self.config.dropout_p);
        let pr = r.enc.regime.apply(tape, p, xr, 1);
        let pr = dropout(tape, pr, mode, self.config.dropout_p);
        let agg = aggregate(tape, p, &r.temporal, hd, pm, pr, cal, self.config.use_temporal);
        (hd, pm, agg)
    }

    /// Yearly embedding in eval mode (what the pool stores).
    pub fn yearly_embedding(&self, s: &SiteYearSample) -> Result<Vec<f64>> {
        self.check_sample(s)?;
        let r = self.raci().ok_or_else(|| RaciError::Precondition("baseline has no embeddings".into()))?;
        let mut tape = Tape::new();
        let (_, _, agg) = self.encode(&mut tape, r, s, &mut Mode::Eval);
        Ok(tape.value(agg.h_yearly).to_vec())
    }

    /// Refined monthly state without spatial context, in eval mode.
    pub fn refined_monthly(&self, s: &SiteYearSample) -> Result<Matrix> {
        self.check_sample(s)?;
        let r = self.raci().ok_or_else(|| RaciError::Precondition("baseline has no embeddings".into()))?;
        let mut tape = Tape::new();
        let (_, _, agg) = self.encode(&mut tape, r, s, &mut Mode::Eval);
        let months = self.calendar.month_lengths.len();
        let (hmt, _) = propagate_y2m(
            &mut tape,
            &self.params,
            &r.temporal,
            agg.h_yearly,
            agg.h_monthly,
            months,
            self.config.use_temporal,
        );
        Matrix::from_vec(months, self.config.h, tape.value(hmt).to_vec())
    }

    /// Retrieval pool from the auxiliary split of `ds` under the current parameters.
    pub fn build_pool(&self, ds: &Dataset) -> Result<RetrievalPool> {
        let aux = ds.split_samples(Split::Auxiliary)?;
        let inputs = aux
            .iter()
            .map(|s| {
                Ok(PoolInput {
                    key: s.key(),
                    h_yearly: self.yearly_embedding(s)?,
                    y: s.y.clone(),
                    mask: s.mask.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        RetrievalPool::fit(
            inputs,
            self.calendar.days_per_year,
            self.config.k_pca,
            self.config.tau,
            self.fingerprint(),
        )
    }

    /// Pool if this model reads one, otherwise an empty pool.
    pub fn pool_for(&self, ds: &Dataset) -> Result<RetrievalPool> {
        if self.needs_pool() {
            self.build_pool(ds)
        } else {
            Ok(RetrievalPool::empty(self.calendar.days_per_year, self.config.tau, self.fingerprint()))
        }
    }

    /// Refined monthly states of every sample in `ds` from the given years.
    pub fn neighbor_cache(&self, ds: &Dataset, years: &[i32]) -> Result<NeighborCache> {
        let mut states = BTreeMap::new();
        if self.needs_neighbors() {
            for s in &ds.samples {
                if years.contains(&s.year) {
                    states.insert(s.key(), self.refined_monthly(s)?);
                }
            }
        }
        Ok(NeighborCache { states })
    }

    /// Build the forward graph for one sample on `tape`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        s: &SiteYearSample,
        ctx: &Context<'_>,
        mode: &mut Mode<'_>,
    ) -> Result<TapeForward> {
        self.check_sample(s)?;
        let p = &self.params;
        let cal = &self.calendar;
        let days = cal.days_per_year;
        let r = match &self.ids {
            ModelParams::Baseline(head) => {
                let z = self.scaler.apply(s);
                let xb = replicate_for_baseline(&z, cal)?;
                let x = tape.constant(&xb.data);
                let raw = head.run(tape, p, x, days, mode, self.config.dropout_p);
                let pred = tape.scale_const(raw, self.scaler.y_scale);
                return Ok(TapeForward {
                    pred,
                    report: None,
                    handles: None,
                });
            }
            ModelParams::Raci(r) => r,
        };
        let months = cal.month_lengths.len();
        let cfg = &self.config;
        let (hd, _, agg) = self.encode(tape, r, s, mode);

        let key = s.key();
        let (c_yearly, report) = match (cfg.use_yearly_ctx, ctx.pool) {
            (true, Some(pool)) => {
                let (c, rep) = retrieve_yearly_tape(tape, p, &r.yret, pool, agg.h_yearly, &key);
                (c, Some(rep))
            }
            _ => (None, None),
        };

        let (hmt, beta_y2m) = propagate_y2m(tape, p, &r.temporal, agg.h_yearly, agg.h_monthly, months, cfg.use_temporal);

        let mut h_eff = hmt;
        let mut c_monthly = None;
        let mut gate_mctx = None;
        if cfg.use_monthly_ctx {
            if let (Some(index), Some(cache)) = (ctx.neighbors, ctx.cache) {
                let nbrs: Vec<&Matrix> = index
                    .neighbors(&s.site_id)
                    .iter()
                    .filter_map(|(id, _)| cache.states.get(&SampleKey::new(id.clone(), s.year)))
                    .collect();
                if let Some(cm) = monthly_context_tape(tape, p, &r.mctx, hmt, &nbrs, months) {
                    let (fused, g) = fuse_monthly_context(tape, p, &r.mctx, hmt, cm, months);
                    h_eff = fused;
                    c_monthly = Some(cm);
                    gate_mctx = Some(g);
                }
            }
        }

        let (hdt, beta_m2d) = propagate_m2d(tape, p, &r.temporal, h_eff, hd, cal, cfg.use_temporal);
        let cy = match c_yearly {
            Some(c) => c,
            None => tape.zeros(days),
        };
        let x0 = tape.concat(hdt, cy, days, false);
        let raw = r.head.run(tape, p, x0, days, mode, cfg.dropout_p);
        let pred = tape.scale_const(raw, self.scaler.y_scale);
        Ok(TapeForward {
            pred,
            report,
            handles: Some(Handles {
                h_daily: hd,
                h_monthly: agg.h_monthly,
                h_yearly: agg.h_yearly,
                h_monthly_tilde: hmt,
                h_monthly_eff: h_eff,
                h_daily_tilde: hdt,
                alpha_d2m: agg.alpha_d2m,
                alpha_m2y: agg.alpha_m2y,
                beta_y2m,
                beta_m2d,
                c_yearly,
                c_monthly,
                gate_mctx,
            }),
        })
    }

    fn diagnostics(&self, tape: &Tape, f: &TapeForward) -> Option<Diagnostics> {
        let hs = f.handles.as_ref()?;
        let h = self.config.h;
        let cal = &self.calendar;
        let days = cal.days_per_year;
        let months = cal.month_lengths.len();
        let mat = |v: Var, rows: usize| Matrix::from_vec(rows, h, tape.value(v).to_vec()).expect("handle shape");
        let alpha_d2m = match hs.alpha_d2m {
            Some(a) => {
                let w = tape.value(a);
                cal.month_ranges().into_iter().map(|r| w[r].to_vec()).collect()
            }
            None => cal.month_lengths.iter().map(|&n| vec![1.0 / n as f64; n]).collect(),
        };
        let alpha_m2y = hs
            .alpha_m2y
            .map_or_else(|| vec![1.0 / months as f64; months], |a| tape.value(a).to_vec());
        Some(Diagnostics {
            embedding: HierarchicalEmbedding {
                h_daily: mat(hs.h_daily, days),
                h_monthly: mat(hs.h_monthly, months),
                h_yearly: tape.value(hs.h_yearly).to_vec(),
                h_monthly_tilde: mat(hs.h_monthly_tilde, months),
                h_monthly_effective: mat(hs.h_monthly_eff, months),
                h_daily_tilde: mat(hs.h_daily_tilde, days),
                alpha_m2y,
                alpha_d2m,
                beta_y2m: tape.value(hs.beta_y2m).to_vec(),
                beta_m2d: tape.value(hs.beta_m2d).to_vec(),
            },
            retrieval: f.report.clone(),
            c_yearly: hs.c_yearly.map_or_else(|| vec![0.0; days], |c| tape.value(c).to_vec()),
            c_monthly: hs.c_monthly.map(|c| mat(c, months)),
            gate_mctx: hs.gate_mctx.map(|g| tape.value(g).to_vec()),
        })
    }

    /// Predictions and (for RACI) diagnostics for one sample.
    pub fn forward(&self, s: &SiteYearSample, ctx: &Context<'_>, mode: &mut Mode<'_>) -> Result<(Vec<f64>, Option<Diagnostics>)> {
        let mut tape = Tape::new();
        let f = self.forward_tape(&mut tape, s, ctx, mode)?;
        Ok((tape.value(f.pred).to_vec(), self.diagnostics(&tape, &f)))
    }

    /// Predictions only.
    pub fn predict(&self, s: &SiteYearSample, ctx: &Context<'_>, mode: &mut Mode<'_>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let f = self.forward_tape(&mut tape, s, ctx, mode)?;
        Ok(tape.value(f.pred).to_vec())
    }

    /// Masked sum of squared errors; gradients scaled by `grad_scale` are added to `grads`.
    pub fn sse_and_grad(
        &self,
        tape: &mut Tape,
        s: &SiteYearSample,
        ctx: &Context<'_>,
        mode: &mut Mode<'_>,
        grad_scale: f64,
        grads: &mut Grads,
    ) -> Result<(f64, Option<RetrievalReport>)> {
        tape.clear();
        let f = self.forward_tape(tape, s, ctx, mode)?;
        let y = tape.constant(&s.y);
        let m = tape.constant(&s.mask_f64());
        let sse = tape.masked_sse(f.pred, y, m);
        let v = tape.scalar(sse);
        tape.backward(sse, grad_scale, &self.params, grads);
        Ok((v, f.report))
    }
}
