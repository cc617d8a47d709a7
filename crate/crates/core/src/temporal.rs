//! Fine-to-coarse attention aggregation and gated coarse-to-fine propagation.

use serde::{Deserialize, Serialize};

use crate::data::{CalendarSpec, Matrix};
use crate::encoders::Mlp;
use crate::error::{RaciError, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};

/// Single-head query/key projections, both `h x h`, no bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub h: usize,
}

impl AttnParams {
    pub fn init(p: &mut ParamStore, prefix: &str, h: usize, rng: &mut Rng) -> Self {
        AttnParams {
            wq: p.add_uniform(&format!("{prefix}.wq"), &[h, h], h, rng),
            wk: p.add_uniform(&format!("{prefix}.wk"), &[h, h], h, rng),
            h,
        }
    }

    pub fn bind(p: &ParamStore, prefix: &str) -> Result<Self> {
        let get = |s: &str| {
            let name = format!("{prefix}.{s}");
            p.id(&name).ok_or_else(|| RaciError::Load {
                file: "parameters".into(),
                msg: format!("missing tensor {name}"),
            })
        };
        let (wq, wk) = (get("wq")?, get("wk")?);
        let h = p.tensor(wq).shape[0];
        if p.tensor(wq).shape != [h, h] || p.tensor(wk).shape != [h, h] {
            return Err(RaciError::Shape(format!("{prefix}: projections must be square")));
        }
        Ok(AttnParams { wq, wk, h })
    }

    /// Project one query row and `n` key rows.
    pub fn project(&self, tape: &mut Tape, p: &ParamStore, q: Var, keys: Var, n: usize) -> (Var, Var) {
        let qp = tape.row_affine(p, self.wq, None, q, 1);
        let kp = tape.row_affine(p, self.wk, None, keys, n);
        (qp, kp)
    }
}

/// Scaled dot-product attention given projected query/keys; returns `(context, weights)`.
/// The context mixes the unprojected `values`.
pub fn attend_projected(tape: &mut Tape, qp: Var, kp: Var, values: Var, h: usize) -> (Var, Var) {
    let s = tape.row_dots(qp, kp, (h as f64).sqrt());
    let w = tape.softmax(s);
    let ctx = tape.weighted_rows(w, values);
    (ctx, w)
}

/// Blocks of the temporal hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TemporalParams {
    pub d2m: AttnParams,
    pub m2y: AttnParams,
    /// Gate network `2h -> h -> 1` for yearly-to-monthly propagation.
    pub y2m: Mlp,
    /// Gate network for monthly-to-daily propagation.
    pub m2d: Mlp,
}

impl TemporalParams {
    pub fn init(p: &mut ParamStore, h: usize, rng: &mut Rng) -> Self {
        TemporalParams {
            d2m: AttnParams::init(p, "attn.d2m", h, rng),
            m2y: AttnParams::init(p, "attn.m2y", h, rng),
            y2m: Mlp::init(p, "gate.y2m", 2 * h, h, 1, rng),
            m2d: Mlp::init(p, "gate.m2d", 2 * h, h, 1, rng),
        }
    }

    pub fn bind(p: &ParamStore) -> Result<Self> {
        Ok(TemporalParams {
            d2m: AttnParams::bind(p, "attn.d2m")?,
            m2y: AttnParams::bind(p, "attn.m2y")?,
            y2m: Mlp::bind(p, "gate.y2m")?,
            m2d: Mlp::bind(p, "gate.m2d")?,
        })
    }
}

/// Tape handles produced by fine-to-coarse aggregation.
#[derive(Debug, Clone, Copy)]
pub struct Aggregated {
    /// months x h
    pub h_monthly: Var,
    pub h_yearly: Var,
    /// Per-day weights, one softmax group per month (absent when averaging).
    pub alpha_d2m: Option<Var>,
    pub alpha_m2y: Option<Var>,
}

/// Daily-to-monthly then monthly-to-yearly aggregation. With `attention = false`
/// both stages use unweighted means (the residual terms are kept).
pub fn aggregate(
    tape: &mut Tape,
    p: &ParamStore,
    tp: &TemporalParams,
    h_daily: Var,
    phi_m: Var,
    phi_r: Var,
    calendar: &CalendarSpec,
    attention: bool,
) -> Aggregated {
    let h = tp.d2m.h;
    let months = calendar.month_lengths.len();
    let ranges = calendar.month_ranges();
    let mut ctxs = Vec::with_capacity(months);
    let mut alphas = Vec::with_capacity(months);
    if attention {
        let qp = tape.row_affine(p, tp.d2m.wq, None, phi_m, months);
        let kp = tape.row_affine(p, tp.d2m.wk, None, h_daily, calendar.days_per_year);
        for (m, r) in ranges.iter().enumerate() {
            let (ctx, w) = attend_projected(
                tape,
                qp.row(m, h),
                kp.rows(r.start, r.len(), h),
                h_daily.rows(r.start, r.len(), h),
                h,
            );
            ctxs.push(ctx);
            alphas.push(w);
        }
    } else {
        for r in &ranges {
            ctxs.push(tape.mean_rows(h_daily.rows(r.start, r.len(), h), r.len()));
        }
    }
    let ctx = tape.stack(ctxs);
    let h_monthly = tape.add(ctx, phi_m);
    let (ctx_y, alpha_m2y) = if attention {
        let (qp, kp) = tp.m2y.project(tape, p, phi_r, h_monthly, months);
        let (c, w) = attend_projected(tape, qp, kp, h_monthly, h);
        (c, Some(w))
    } else {
        (tape.mean_rows(h_monthly, months), None)
    };
    let h_yearly = tape.add(ctx_y, phi_r);
    let alpha_d2m = attention.then(|| tape.stack(alphas));
    Aggregated {
        h_monthly,
        h_yearly,
        alpha_d2m,
        alpha_m2y,
    }
}

/// `base_i + beta_i * coarse` with `beta = softplus(gate([coarse; base_i]))`,
/// or `beta = 1` when `gated = false`. Returns `(refined, beta)`.
fn gated_add(
    tape: &mut Tape,
    p: &ParamStore,
    gate: &Mlp,
    coarse: Var,
    base: Var,
    rows: usize,
    bcast: bool,
    gated: bool,
) -> (Var, Var) {
    let beta = if gated {
        let x = tape.concat(coarse, base, rows, bcast);
        let pre = gate.apply(tape, p, x, rows);
        tape.softplus(pre)
    } else {
        tape.constant(&vec![1.0; rows])
    };
    (tape.row_scale_add(base, beta, coarse, bcast), beta)
}

pub fn propagate_y2m(
    tape: &mut Tape,
    p: &ParamStore,
    tp: &TemporalParams,
    h_yearly: Var,
    h_monthly: Var,
    months: usize,
    gated: bool,
) -> (Var, Var) {
    gated_add(tape, p, &tp.y2m, h_yearly, h_monthly, months, true, gated)
}

pub fn propagate_m2d(
    tape: &mut Tape,
    p: &ParamStore,
    tp: &TemporalParams,
    h_monthly_eff: Var,
    h_daily: Var,
    calendar: &CalendarSpec,
    gated: bool,
) -> (Var, Var) {
    let h = tp.d2m.h;
    let expanded = tape.gather(h_monthly_eff, h, calendar.day_months());
    gated_add(tape, p, &tp.m2d, expanded, h_daily, calendar.days_per_year, false, gated)
}

/// Per-sample embeddings at the three scales plus attention and gate records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalEmbedding {
    pub h_daily: Matrix,
    pub h_monthly: Matrix,
    pub h_yearly: Vec<f64>,
    pub h_monthly_tilde: Matrix,
    /// Monthly state after spatial context fusion.
    pub h_monthly_effective: Matrix,
    pub h_daily_tilde: Matrix,
    pub alpha_m2y: Vec<f64>,
    /// One weight group per month.
    pub alpha_d2m: Vec<Vec<f64>>,
    pub beta_y2m: Vec<f64>,
    pub beta_m2d: Vec<f64>,
}

fn check_width(m: &Matrix, h: usize, what: &str) -> Result<()> {
    if m.cols != h {
        return Err(RaciError::Shape(format!("{what} has {} columns, expected {h}", m.cols)));
    }
    Ok(())
}

/// Attention of `query` over the rows of `keys`.
pub fn attend(p: &ParamStore, a: &AttnParams, query: &[f64], keys: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
    if keys.rows == 0 {
        return Err(RaciError::EmptyKeys);
    }
    if query.len() != a.h {
        return Err(RaciError::Shape(format!("query length {} != {}", query.len(), a.h)));
    }
    check_width(keys, a.h, "keys")?;
    let mut tape = Tape::new();
    let q = tape.constant(query);
    let k = tape.constant(&keys.data);
    let (qp, kp) = a.project(&mut tape, p, q, k, keys.rows);
    let (ctx, w) = attend_projected(&mut tape, qp, kp, k, a.h);
    Ok((tape.value(ctx).to_vec(), tape.value(w).to_vec()))
}

fn split_groups(w: &[f64], calendar: &CalendarSpec) -> Vec<Vec<f64>> {
    calendar.month_ranges().into_iter().map(|r| w[r].to_vec()).collect()
}

/// Monthly embeddings `attend(phi_M[m], days of m) + phi_M[m]` and per-month weights.
pub fn aggregate_daily_to_monthly(
    p: &ParamStore,
    tp: &TemporalParams,
    h_daily: &Matrix,
    phi_monthly: &Matrix,
    calendar: &CalendarSpec,
) -> Result<(Matrix, Vec<Vec<f64>>)> {
    let h = tp.d2m.h;
    check_width(h_daily, h, "h_daily")?;
    check_width(phi_monthly, h, "monthly embedding")?;
    if h_daily.rows != calendar.days_per_year || phi_monthly.rows != calendar.month_lengths.len() {
        return Err(RaciError::Shape("embedding rows do not match the calendar".into()));
    }
    let mut tape = Tape::new();
    let hd = tape.constant(&h_daily.data);
    let pm = tape.constant(&phi_monthly.data);
    let zero = tape.zeros(h);
    let agg = aggregate(&mut tape, p, tp, hd, pm, zero, calendar, true);
    let hm = Matrix::from_vec(phi_monthly.rows, h, tape.value(agg.h_monthly).to_vec())?;
    let alpha = split_groups(tape.value(agg.alpha_d2m.expect("attention on")), calendar);
    Ok((hm, alpha))
}

/// `h_yearly = sum_m alpha_m h_monthly[m] + phi_R` and the weights.
pub fn aggregate_monthly_to_yearly(
    p: &ParamStore,
    tp: &TemporalParams,
    h_monthly: &Matrix,
    phi_regime: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let h = tp.m2y.h;
    check_width(h_monthly, h, "h_monthly")?;
    let mut tape = Tape::new();
    let hm = tape.constant(&h_monthly.data);
    let pr = tape.constant(phi_regime);
    let (qp, kp) = tp.m2y.project(&mut tape, p, pr, hm, h_monthly.rows);
    let (ctx, w) = attend_projected(&mut tape, qp, kp, hm, h);
    let hy = tape.add(ctx, pr);
    Ok((tape.value(hy).to_vec(), tape.value(w).to_vec()))
}

pub fn propagate_yearly_to_monthly(
    p: &ParamStore,
    tp: &TemporalParams,
    h_yearly: &[f64],
    h_monthly: &Matrix,
) -> Result<(Matrix, Vec<f64>)> {
    let h = tp.y2m.d_in / 2;
    check_width(h_monthly, h, "h_monthly")?;
    let mut tape = Tape::new();
    let hy = tape.constant(h_yearly);
    let hm = tape.constant(&h_monthly.data);
    let (out, beta) = propagate_y2m(&mut tape, p, tp, hy, hm, h_monthly.rows, true);
    Ok((
        Matrix::from_vec(h_monthly.rows, h, tape.value(out).to_vec())?,
        tape.value(beta).to_vec(),
    ))
}

pub fn propagate_monthly_to_daily(
    p: &ParamStore,
    tp: &TemporalParams,
    h_monthly_eff: &Matrix,
    h_daily: &Matrix,
    calendar: &CalendarSpec,
) -> Result<(Matrix, Vec<f64>)> {
    let h = tp.m2d.d_in / 2;
    check_width(h_monthly_eff, h, "monthly state")?;
    check_width(h_daily, h, "h_daily")?;
    if h_daily.rows != calendar.days_per_year || h_monthly_eff.rows != calendar.month_lengths.len() {
        return Err(RaciError::Shape("embedding rows do not match the calendar".into()));
    }
    let mut tape = Tape::new();
    let hm = tape.constant(&h_monthly_eff.data);
    let hd = tape.constant(&h_daily.data);
    let (out, beta) = propagate_m2d(&mut tape, p, tp, hm, hd, calendar, true);
    Ok((
        Matrix::from_vec(h_daily.rows, h, tape.value(out).to_vec())?,
        tape.value(beta).to_vec(),
    ))
}
