//! Spatial context: geographic k-NN monthly context and threshold-filtered
//! yearly retrieval over a frozen auxiliary pool.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{Matrix, SampleKey, SiteMeta, Split};
use crate::encoders::Mlp;
use crate::error::{RaciError, Result};
use crate::params::ParamStore;
use crate::temporal::AttnParams;
use crate::tape::{Tape, Var};

pub const EARTH_RADIUS_KM: f64 = 6371.0;
pub const TRAJECTORY_EPS: f64 = 1e-6;

/// Great-circle distance in km.
pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.clamp(0.0, 1.0).sqrt().asin()
}

/// k nearest sites by great-circle distance, self excluded, ties by site id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborIndex {
    pub k: usize,
    pub lists: BTreeMap<String, Vec<(String, f64)>>,
}

impl NeighborIndex {
    pub fn neighbors(&self, site_id: &str) -> &[(String, f64)] {
        self.lists.get(site_id).map_or(&[], |v| v.as_slice())
    }
}

pub fn build_neighbor_index(sites: &BTreeMap<String, SiteMeta>, k: usize) -> Result<NeighborIndex> {
    if sites.len() < 2 {
        return Err(RaciError::Precondition("neighbor index needs at least 2 sites".into()));
    }
    if k == 0 {
        return Err(RaciError::Config("k_neighbors must be positive".into()));
    }
    let mut lists = BTreeMap::new();
    for (id, s) in sites {
        let mut d: Vec<(String, f64)> = sites
            .iter()
            .filter(|(o, _)| *o != id)
            .map(|(o, m)| (o.clone(), haversine_km(s.lat, s.lon, m.lat, m.lon)))
            .collect();
        d.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0)));
        d.truncate(k);
        lists.insert(id.clone(), d);
    }
    Ok(NeighborIndex { k, lists })
}

/// Monthly context attention and its fusion gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MonthlyContextParams {
    pub attn: AttnParams,
    pub gate: Mlp,
}

impl MonthlyContextParams {
    pub fn init(p: &mut ParamStore, h: usize, rng: &mut crate::rng::Rng) -> Self {
        MonthlyContextParams {
            attn: AttnParams::init(p, "attn.mctx", h, rng),
            gate: Mlp::init(p, "gate.mctx", 2 * h, h, 1, rng),
        }
    }

    pub fn bind(p: &ParamStore) -> Result<Self> {
        Ok(MonthlyContextParams {
            attn: AttnParams::bind(p, "attn.mctx")?,
            gate: Mlp::bind(p, "gate.mctx")?,
        })
    }
}

/// `C^(M)` for every month: attention of the target's month-`m` state over the
/// neighbors' month-`m` states (constants). `None` when there are no neighbors.
pub fn monthly_context_tape(
    tape: &mut Tape,
    p: &ParamStore,
    mp: &MonthlyContextParams,
    query: Var,
    neighbors: &[&Matrix],
    months: usize,
) -> Option<Var> {
    if neighbors.is_empty() {
        return None;
    }
    let h = mp.attn.h;
    let n = neighbors.len();
    let qp = tape.row_affine(p, mp.attn.wq, None, query, months);
    let mut ctxs = Vec::with_capacity(months);
    let mut keys = Vec::with_capacity(n * h);
    for m in 0..months {
        keys.clear();
        for nb in neighbors {
            keys.extend_from_slice(nb.row(m));
        }
        let k = tape.constant(&keys);
        let kp = tape.row_affine(p, mp.attn.wk, None, k, n);
        let (ctx, _) = crate::temporal::attend_projected(tape, qp.row(m, h), kp, k, h);
        ctxs.push(ctx);
    }
    Some(tape.stack(ctxs))
}

/// `h_eff = h_tilde + g * C^(M)` with `g = softplus(gate([C^(M); h_tilde]))`.
pub fn fuse_monthly_context(
    tape: &mut Tape,
    p: &ParamStore,
    mp: &MonthlyContextParams,
    h_tilde: Var,
    ctx: Var,
    months: usize,
) -> (Var, Var) {
    let x = tape.concat(ctx, h_tilde, months, false);
    let pre = mp.gate.apply(tape, p, x, months);
    let g = tape.softplus(pre);
    (tape.row_scale_add(h_tilde, g, ctx, false), g)
}

/// Single-month context; zero when `neighbor_rows` is empty.
pub fn monthly_context(p: &ParamStore, mp: &MonthlyContextParams, target: &[f64], neighbor_rows: &Matrix) -> Result<Vec<f64>> {
    if neighbor_rows.rows == 0 {
        return Ok(vec![0.0; target.len()]);
    }
    crate::temporal::attend(p, &mp.attn, target, neighbor_rows).map(|(c, _)| c)
}

/// `y / (mean |y| over observed days + eps)`, zero on masked days; `None` when nothing is observed.
pub fn normalize_trajectory(y: &[f64], mask: &[bool]) -> Option<Vec<f64>> {
    let mut acc = 0.0;
    let mut n = 0usize;
    for (v, &m) in y.iter().zip(mask) {
        if m {
            acc += v.abs();
            n += 1;
        }
    }
    if n == 0 {
        return None;
    }
    let scale = acc / n as f64 + TRAJECTORY_EPS;
    Some(y.iter().zip(mask).map(|(v, &m)| if m { v / scale } else { 0.0 }).collect())
}

/// Principal axes of a set of embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `h x k`, orthonormal columns.
    pub components: Matrix,
    /// Eigenvalues of the scatter matrix for the kept axes, descending.
    pub variances: Vec<f64>,
    pub total_variance: f64,
}

impl Pca {
    /// Fit on the rows of `x` (`n x h`).
    pub fn fit(x: &Matrix, k: usize) -> Result<Pca> {
        let (n, h) = (x.rows, x.cols);
        if k == 0 || k > h.min(n) {
            return Err(RaciError::Config(format!(
                "k_pca = {k} must be in [1, min(h = {h}, entries = {n})]"
            )));
        }
        let mut mean = vec![0.0; h];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centered = DMatrix::from_fn(n, h, |i, j| x.get(i, j) - mean[j]);
        let scatter = centered.transpose() * &centered;
        let eig = SymmetricEigen::new(scatter);
        let mut order: Vec<usize> = (0..h).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .partial_cmp(&eig.eigenvalues[a])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut components = Matrix::zeros(h, k);
        let mut variances = Vec::with_capacity(k);
        for (c, &idx) in order.iter().take(k).enumerate() {
            let col = eig.eigenvectors.column(idx);
            let mut pivot = 0;
            for j in 1..h {
                if col[j].abs() > col[pivot].abs() {
                    pivot = j;
                }
            }
            let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
            for j in 0..h {
                components.row_mut(j)[c] = sign * col[j];
            }
            variances.push(eig.eigenvalues[idx].max(0.0));
        }
        let total_variance = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
        Ok(Pca {
            mean,
            components,
            variances,
            total_variance,
        })
    }

    pub fn k(&self) -> usize {
        self.components.cols
    }

    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.k()];
        for (j, (&x, &m)) in v.iter().zip(&self.mean).enumerate() {
            let c = x - m;
            for (o, w) in out.iter_mut().zip(self.components.row(j)) {
                *o += w * c;
            }
        }
        out
    }

    /// Fraction of the total scatter captured by the kept axes.
    pub fn explained_ratio(&self) -> f64 {
        if self.total_variance <= 0.0 {
            return 1.0;
        }
        self.variances.iter().sum::<f64>() / self.total_variance
    }
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub key: SampleKey,
    pub h_yearly: Vec<f64>,
    pub trajectory: Vec<f64>,
    pub projected: Vec<f64>,
}

/// Frozen auxiliary embeddings, their PCA and normalized trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalPool {
    pub entries: Vec<PoolEntry>,
    pub pca: Option<Pca>,
    pub tau: f64,
    pub days: usize,
    pub split: Split,
    /// Parameter fingerprint the embeddings were computed under.
    pub fingerprint: String,
    /// Auxiliary samples left out for having no observed days.
    pub excluded: Vec<SampleKey>,
}

/// Raw material for one pool entry.
#[derive(Debug, Clone)]
pub struct PoolInput {
    pub key: SampleKey,
    pub h_yearly: Vec<f64>,
    pub y: Vec<f64>,
    pub mask: Vec<bool>,
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > -1.0 && tau <= 1.0 {
        Ok(())
    } else {
        Err(RaciError::Config(format!("tau = {tau} outside (-1, 1]")))
    }
}

impl RetrievalPool {
    /// Fit the PCA and normalize trajectories; inputs are sorted by key first.
    pub fn fit(mut inputs: Vec<PoolInput>, days: usize, k_pca: usize, tau: f64, fingerprint: String) -> Result<Self> {
        check_tau(tau)?;
        if inputs.is_empty() {
            return Err(RaciError::Precondition("auxiliary split is empty".into()));
        }
        inputs.sort_by(|a, b| a.key.cmp(&b.key));
        let mut kept = Vec::new();
        let mut excluded = Vec::new();
        for inp in inputs {
            match normalize_trajectory(&inp.y, &inp.mask) {
                Some(t) => kept.push((inp.key, inp.h_yearly, t)),
                None => excluded.push(inp.key),
            }
        }
        if kept.is_empty() {
            return Err(RaciError::Precondition("no auxiliary sample has observed days".into()));
        }
        let h = kept[0].1.len();
        let rows: Vec<Vec<f64>> = kept.iter().map(|k| k.1.clone()).collect();
        let pca = Pca::fit(&Matrix::from_rows(&rows)?, k_pca)?;
        let entries = kept
            .into_iter()
            .map(|(key, h_yearly, trajectory)| {
                debug_assert_eq!(h_yearly.len(), h);
                PoolEntry {
                    projected: pca.project(&h_yearly),
                    key,
                    h_yearly,
                    trajectory,
                }
            })
            .collect();
        Ok(RetrievalPool {
            entries,
            pca: Some(pca),
            tau,
            days,
            split: Split::Auxiliary,
            fingerprint,
            excluded,
        })
    }

    /// A pool with no entries: every query falls back.
    pub fn empty(days: usize, tau: f64, fingerprint: String) -> Self {
        RetrievalPool {
            entries: Vec::new(),
            pca: None,
            tau,
            days,
            split: Split::Auxiliary,
            fingerprint,
            excluded: Vec::new(),
        }
    }

    pub fn ensure_current(&self, fingerprint: &str) -> Result<()> {
        if self.fingerprint == fingerprint {
            Ok(())
        } else {
            Err(RaciError::StalePool {
                built: self.fingerprint.clone(),
                current: fingerprint.to_string(),
            })
        }
    }

    /// Similarities to every entry and the thresholded candidate set (weights unset).
    pub fn screen(&self, h_yearly: &[f64], target: &SampleKey) -> RetrievalReport {
        let mut similarities = Vec::with_capacity(self.entries.len());
        let mut candidates = Vec::new();
        if let Some(pca) = &self.pca {
            let q = pca.project(h_yearly);
            for (i, e) in self.entries.iter().enumerate() {
                let s = cosine(&q, &e.projected);
                similarities.push(s);
                if e.key == *target || e.key.year == target.year {
                    continue;
                }
                if s > self.tau {
                    candidates.push(Candidate {
                        entry: i,
                        key: e.key.clone(),
                        similarity: s,
                        weight: 0.0,
                    });
                }
            }
        }
        RetrievalReport {
            target: target.clone(),
            fallback: candidates.is_empty(),
            similarities,
            candidates,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Index into the pool entries.
    pub entry: usize,
    pub key: SampleKey,
    pub similarity: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub target: SampleKey,
    /// Aligned with the pool entries.
    pub similarities: Vec<f64>,
    pub candidates: Vec<Candidate>,
    pub fallback: bool,
}

/// `C^(Y)` on the tape (`None` on fallback) with its report. Attention uses the
/// full embeddings of the candidates as keys and their trajectories as values.
pub fn retrieve_yearly_tape(
    tape: &mut Tape,
    p: &ParamStore,
    a: &AttnParams,
    pool: &RetrievalPool,
    h_yearly: Var,
    target: &SampleKey,
) -> (Option<Var>, RetrievalReport) {
    let mut report = pool.screen(tape.value(h_yearly), target);
    if report.fallback {
        return (None, report);
    }
    let n = report.candidates.len();
    let mut keys = Vec::with_capacity(n * a.h);
    let mut trajs = Vec::with_capacity(n * pool.days);
    for c in &report.candidates {
        let e = &pool.entries[c.entry];
        keys.extend_from_slice(&e.h_yearly);
        trajs.extend_from_slice(&e.trajectory);
    }
    let k = tape.constant(&keys);
    let t = tape.constant(&trajs);
    let (qp, kp) = a.project(tape, p, h_yearly, k, n);
    let s = tape.row_dots(qp, kp, (a.h as f64).sqrt());
    let w = tape.softmax(s);
    let ctx = tape.weighted_rows(w, t);
    for (c, &wi) in report.candidates.iter_mut().zip(tape.value(w)) {
        c.weight = wi;
    }
    (Some(ctx), report)
}

pub fn retrieve_yearly(
    p: &ParamStore,
    a: &AttnParams,
    pool: &RetrievalPool,
    h_yearly: &[f64],
    target: &SampleKey,
) -> Result<(Vec<f64>, RetrievalReport)> {
    if h_yearly.len() != a.h {
        return Err(RaciError::Shape(format!("h_yearly length {} != {}", h_yearly.len(), a.h)));
    }
    let mut tape = Tape::new();
    let q = tape.constant(h_yearly);
    let (ctx, report) = retrieve_yearly_tape(&mut tape, p, a, pool, q, target);
    let c = ctx.map_or_else(|| vec![0.0; pool.days], |v| tape.value(v).to_vec());
    Ok((c, report))
}
