//! Process-informed synthetic benchmark generator.
//!
//! Daily flux follows a multiplicative production model
//! `y = M_G0 * f_pH * f_MST(T, W) * f_RX(W) * f_SOM(SOM)`, with a single-layer
//! water bucket, a monthly soil-organic-matter pool fed by a seasonal NPP proxy,
//! spatially smooth meteorological drivers and a mosaic of regimes.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{
    validate_dataset, CalendarSpec, Dataset, FeatureNames, Matrix, SampleKey, SiteMeta, SiteYearSample, Splits,
};
use crate::error::{RaciError, Result};
use crate::rng::{self, Rng};

/// Conditioners of one regime plus the shapes of its response functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeParams {
    pub m_g0: f64,
    pub ph: f64,
    pub ph_opt: f64,
    pub sigma_ph: f64,
    pub q10: f64,
    /// degC
    pub t_ref: f64,
    pub w_thr: f64,
    pub kappa: f64,
    pub k_s: f64,
    pub som_decay: f64,
    /// Peak monthly NPP of the seasonal proxy.
    pub npp_scale: f64,
    /// Phase shift (months) of the NPP proxy.
    pub npp_phase: f64,
}

impl Default for RegimeParams {
    fn default() -> Self {
        RegimeParams {
            m_g0: 1.0,
            ph: 6.2,
            ph_opt: 6.2,
            sigma_ph: 1.5,
            q10: 2.0,
            t_ref: 10.0,
            w_thr: 0.5,
            kappa: 10.0,
            k_s: 1.0,
            som_decay: 0.8,
            npp_scale: 2.0,
            npp_phase: -2.0,
        }
    }
}

impl RegimeParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.m_g0 > 0.0
            && self.sigma_ph > 0.0
            && self.som_decay > 0.0
            && self.som_decay < 1.0
            && (0.0..=1.0).contains(&self.w_thr)
            && (3.0..=9.0).contains(&self.ph)
            && self.k_s > 0.0;
        if ok {
            Ok(())
        } else {
            Err(RaciError::Config(format!("invalid regime parameters {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResponseFactors {
    pub f_mst: f64,
    pub f_rx: f64,
    pub f_som: f64,
    pub f_ph: f64,
}

/// Temperature-moisture, redox, substrate and pH factors.
pub fn response_functions(t: f64, w: f64, som: f64, regime: &RegimeParams) -> Result<ResponseFactors> {
    if !(t.is_finite() && w.is_finite() && som.is_finite()) {
        return Err(RaciError::Precondition("non-finite response input".into()));
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(RaciError::Precondition(format!("moisture {w} outside [0, 1]")));
    }
    if som < 0.0 {
        return Err(RaciError::Precondition(format!("negative substrate {som}")));
    }
    let f_mst = regime.q10.powf((t - regime.t_ref) / 10.0) * w;
    let f_rx = 1.0 / (1.0 + (-regime.kappa * (w - regime.w_thr)).exp());
    let f_som = som / (som + regime.k_s);
    let dph = regime.ph - regime.ph_opt;
    let f_ph = (-(dph * dph) / (2.0 * regime.sigma_ph * regime.sigma_ph)).exp();
    Ok(ResponseFactors {
        f_mst,
        f_rx,
        f_som,
        f_ph,
    })
}

/// Drivers of one site-year.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteYearDrivers {
    /// degC per day
    pub temp: Vec<f64>,
    /// mm per day
    pub precip: Vec<f64>,
    /// Monthly NPP, 12 values.
    pub npp: Vec<f64>,
    /// Bucket moisture before day 0.
    pub w_init: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    /// Moisture gained per mm of precipitation.
    pub a: f64,
    /// Moisture lost per day.
    pub b: f64,
}

impl Default for Bucket {
    fn default() -> Self {
        Bucket { a: 0.1, b: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedYear {
    pub y: Vec<f64>,
    pub w: Vec<f64>,
    pub som: Vec<f64>,
}

/// Periodic steady state of the monthly substrate pool for a repeating NPP cycle.
pub fn som_cycle(npp: &[f64], decay: f64) -> Vec<f64> {
    let n = npp.len();
    // SOM_{-1} = sum_m decay^(n-1-m) (1-decay) NPP_m / (1 - decay^n)
    let mut acc = 0.0;
    for (m, &v) in npp.iter().enumerate() {
        acc += decay.powi((n - 1 - m) as i32) * (1.0 - decay) * v;
    }
    let mut prev = acc / (1.0 - decay.powi(n as i32));
    npp.iter()
        .map(|&v| {
            prev = decay * prev + (1.0 - decay) * v;
            prev
        })
        .collect()
}

/// Simulate daily flux for one site-year. `noise_std = 0` makes the output a
/// deterministic function of the drivers and regime.
pub fn simulate_site_year(
    drivers: &SiteYearDrivers,
    regime: &RegimeParams,
    calendar: &CalendarSpec,
    bucket: Bucket,
    noise_std: f64,
    rng: &mut Rng,
) -> Result<SimulatedYear> {
    let days = calendar.days_per_year;
    if drivers.temp.len() != days || drivers.precip.len() != days {
        return Err(RaciError::Precondition(format!(
            "driver series must have {days} days"
        )));
    }
    if drivers.npp.len() != calendar.month_lengths.len() {
        return Err(RaciError::Precondition("npp needs one value per month".into()));
    }
    let som = som_cycle(&drivers.npp, regime.som_decay);
    let months = calendar.day_months();
    let mut w_prev = drivers.w_init;
    let mut y = Vec::with_capacity(days);
    let mut w = Vec::with_capacity(days);
    for t in 0..days {
        let wt = (w_prev + bucket.a * drivers.precip[t] - bucket.b).clamp(0.0, 1.0);
        let f = response_functions(drivers.temp[t], wt, som[months[t]], regime)?;
        let clean = regime.m_g0 * f.f_ph * f.f_mst * f.f_rx * f.f_som;
        let noise = if noise_std > 0.0 {
            noise_std * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        y.push(clean + noise);
        w.push(wt);
        w_prev = wt;
    }
    Ok(SimulatedYear { y, w, som })
}

/// Seasonal NPP proxy `scale * max(0, sin(2 pi (m + phase) / 12))`.
pub fn npp_proxy(regime: &RegimeParams, scale_jitter: f64) -> Vec<f64> {
    (0..12)
        .map(|m| {
            let s = (2.0 * PI * (m as f64 + regime.npp_phase) / 12.0).sin();
            regime.npp_scale * scale_jitter * s.max(0.0)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegimeLayout {
    Checkerboard,
    Voronoi,
}

/// Benchmark geometry, regime design and split rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub rows: usize,
    pub cols: usize,
    pub lat0: f64,
    pub lon0: f64,
    pub dlat: f64,
    pub dlon: f64,
    pub n_regimes: usize,
    pub regime_layout: RegimeLayout,
    pub first_year: i32,
    pub last_year: i32,
    pub train_years: Vec<i32>,
    pub aux_year: i32,
    pub test_years: Vec<i32>,
    /// Gaussian smoothing length of driver anomalies, in grid cells.
    pub smoothness: f64,
    pub noise_std: f64,
    pub seed: u64,
    pub calendar: CalendarSpec,
    pub bucket: Bucket,
    pub w_init: f64,
    /// Template for every regime; `m_g0` and `ph` are overridden per regime.
    pub base_regime: RegimeParams,
    /// Ratio of `m_g0` between the last and first regime.
    pub m_g0_ratio: f64,
    /// pH difference between the last and first regime.
    pub ph_offset: f64,
    pub temp_anomaly_std: f64,
    pub temp_ar: f64,
    /// Precipitation intensity at the west and east edges (mm per unit excess).
    pub precip_west: f64,
    pub precip_east: f64,
    /// degC per year
    pub warming: f64,
    /// Relative standard deviation of the per site-year NPP scale.
    pub npp_jitter: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            rows: 8,
            cols: 8,
            lat0: 30.0,
            lon0: -100.0,
            dlat: 2.0,
            dlon: 2.0,
            n_regimes: 2,
            regime_layout: RegimeLayout::Checkerboard,
            first_year: 2000,
            last_year: 2007,
            train_years: (2000..=2004).collect(),
            aux_year: 2005,
            test_years: vec![2006, 2007],
            smoothness: 2.0,
            noise_std: 0.05,
            seed: 0,
            calendar: CalendarSpec::default(),
            bucket: Bucket::default(),
            w_init: 0.5,
            base_regime: RegimeParams::default(),
            m_g0_ratio: 3.0,
            ph_offset: 1.0,
            temp_anomaly_std: 3.0,
            temp_ar: 0.7,
            precip_west: 2.0,
            precip_east: 4.0,
            warming: 0.05,
            npp_jitter: 0.1,
        }
    }
}

impl GeneratorConfig {
    /// Two-site, 24-day configuration used by gradient checks.
    pub fn tiny(seed: u64) -> Self {
        GeneratorConfig {
            rows: 1,
            cols: 2,
            first_year: 2000,
            last_year: 2002,
            train_years: vec![2000, 2001],
            aux_year: 2002,
            test_years: vec![],
            calendar: CalendarSpec::uniform(2),
            seed,
            ..Default::default()
        }
    }

    pub fn n_sites(&self) -> usize {
        self.rows * self.cols
    }

    pub fn validate(&self) -> Result<()> {
        self.calendar.validate()?;
        if self.rows == 0 || self.cols == 0 {
            return Err(RaciError::Config("empty grid".into()));
        }
        if self.n_regimes == 0 {
            return Err(RaciError::Config("n_regimes must be positive".into()));
        }
        if self.train_years.is_empty() {
            return Err(RaciError::Config("no train years".into()));
        }
        let in_range = |y: i32| y >= self.first_year && y <= self.last_year;
        let all: Vec<i32> = self
            .train_years
            .iter()
            .chain(&self.test_years)
            .copied()
            .chain([self.aux_year])
            .collect();
        if let Some(y) = all.iter().find(|&&y| !in_range(y)) {
            return Err(RaciError::Config(format!("year {y} outside the generated range")));
        }
        let mut sorted = all.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != all.len() {
            return Err(RaciError::Config("train/auxiliary/test years overlap".into()));
        }
        if self.noise_std < 0.0 || self.smoothness <= 0.0 {
            return Err(RaciError::Config("noise_std must be >= 0 and smoothness > 0".into()));
        }
        for r in self.regime_table() {
            r.validate()?;
        }
        Ok(())
    }

    /// One parameter record per regime; regimes are spread evenly between the
    /// base `m_g0`/pH and `m_g0 * m_g0_ratio` / `ph + ph_offset`.
    pub fn regime_table(&self) -> Vec<RegimeParams> {
        (0..self.n_regimes)
            .map(|k| {
                let frac = if self.n_regimes > 1 {
                    k as f64 / (self.n_regimes - 1) as f64
                } else {
                    0.0
                };
                RegimeParams {
                    m_g0: self.base_regime.m_g0 * self.m_g0_ratio.powf(frac),
                    ph: self.base_regime.ph + self.ph_offset * frac,
                    ..self.base_regime.clone()
                }
            })
            .collect()
    }

    pub fn site_id(&self, r: usize, c: usize) -> String {
        format!("r{r:02}c{c:02}")
    }

    /// Regime index of every grid cell, row-major.
    pub fn regime_map(&self) -> Vec<usize> {
        let n = self.n_sites();
        match self.regime_layout {
            RegimeLayout::Checkerboard => (0..n)
                .map(|i| (i / self.cols + i % self.cols) % self.n_regimes)
                .collect(),
            RegimeLayout::Voronoi => {
                let mut rng = rng::stream(self.seed, "voronoi", "", &[]);
                let centers: Vec<(f64, f64)> = (0..3 * self.n_regimes)
                    .map(|_| {
                        (
                            rng.gen_range(0.0..self.rows as f64),
                            rng.gen_range(0.0..self.cols as f64),
                        )
                    })
                    .collect();
                (0..n)
                    .map(|i| {
                        let (r, c) = ((i / self.cols) as f64 + 0.5, (i % self.cols) as f64 + 0.5);
                        let mut best = (f64::INFINITY, 0);
                        for (k, &(cr, cc)) in centers.iter().enumerate() {
                            let d = (r - cr).powi(2) + (c - cc).powi(2);
                            if d < best.0 {
                                best = (d, k);
                            }
                        }
                        best.1 % self.n_regimes
                    })
                    .collect()
            }
        }
    }

    pub fn feature_names(&self) -> FeatureNames {
        let mut static_ = vec!["ph".to_string()];
        static_.extend((0..self.n_regimes).map(|k| format!("regime_{k}")));
        FeatureNames {
            daily: vec!["temperature".into(), "precipitation".into()],
            monthly: vec!["npp".into()],
            yearly: vec!["year_trend".into()],
            static_,
        }
    }
}

/// Row-normalized Gaussian smoothing weights between grid cells, scaled so a
/// smoothed unit-variance white field keeps unit variance.
fn smoothing_kernel(cfg: &GeneratorConfig) -> Vec<Vec<(usize, f64)>> {
    let n = cfg.n_sites();
    let l2 = 2.0 * cfg.smoothness * cfg.smoothness;
    (0..n)
        .map(|i| {
            let (ri, ci) = ((i / cfg.cols) as f64, (i % cfg.cols) as f64);
            let mut ws: Vec<(usize, f64)> = (0..n)
                .filter_map(|j| {
                    let (rj, cj) = ((j / cfg.cols) as f64, (j % cfg.cols) as f64);
                    let d2 = (ri - rj).powi(2) + (ci - cj).powi(2);
                    let w = (-d2 / l2).exp();
                    (w > 1e-8).then_some((j, w))
                })
                .collect();
            let norm = ws.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
            ws.iter_mut().for_each(|(_, w)| *w /= norm);
            ws
        })
        .collect()
}

fn smooth_fields(cfg: &GeneratorConfig, kernel: &[Vec<(usize, f64)>], purpose: &str, year: i32) -> Vec<Vec<f64>> {
    let days = cfg.calendar.days_per_year;
    let white: Vec<Vec<f64>> = (0..cfg.n_sites())
        .map(|i| {
            let id = cfg.site_id(i / cfg.cols, i % cfg.cols);
            let mut r = rng::stream(cfg.seed, purpose, &id, &[year as i64]);
            (0..days).map(|_| r.sample::<f64, _>(StandardNormal)).collect()
        })
        .collect();
    kernel
        .iter()
        .map(|ws| {
            (0..days)
                .map(|t| ws.iter().map(|&(j, w)| w * white[j][t]).sum())
                .collect()
        })
        .collect()
}

/// Daily temperature and precipitation of every grid cell for one year.
pub fn driver_fields(cfg: &GeneratorConfig, year: i32) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let kernel = smoothing_kernel(cfg);
    let days = cfg.calendar.days_per_year;
    let dpy = days as f64;
    let temp_noise = smooth_fields(cfg, &kernel, "temperature", year);
    let precip_noise = smooth_fields(cfg, &kernel, "precipitation", year);
    let rho = cfg.temp_ar;
    let innov = (1.0 - rho * rho).sqrt();
    let cold_day = dpy * 15.0 / 365.0;
    let mut temps = Vec::with_capacity(cfg.n_sites());
    let mut precs = Vec::with_capacity(cfg.n_sites());
    for i in 0..cfg.n_sites() {
        let (r, c) = (i / cfg.cols, i % cfg.cols);
        let lat = (cfg.lat0 + r as f64 * cfg.dlat).abs();
        let mean = 28.0 - 0.5 * lat + cfg.warming * (year - cfg.first_year) as f64;
        let amp = 4.0 + 0.25 * lat;
        let mut anom = temp_noise[i][0];
        let mut temp = Vec::with_capacity(days);
        for t in 0..days {
            if t > 0 {
                anom = rho * anom + innov * temp_noise[i][t];
            }
            let season = -(2.0 * PI * (t as f64 - cold_day) / dpy).cos();
            temp.push(mean + amp * season + cfg.temp_anomaly_std * anom);
        }
        let frac = if cfg.cols > 1 {
            c as f64 / (cfg.cols - 1) as f64
        } else {
            0.0
        };
        let intensity = cfg.precip_west + (cfg.precip_east - cfg.precip_west) * frac;
        let precip = precip_noise[i].iter().map(|z| intensity * (z - 0.5).max(0.0)).collect();
        temps.push(temp);
        precs.push(precip);
    }
    (temps, precs)
}

fn region_tag(cfg: &GeneratorConfig, r: usize, c: usize) -> String {
    let ns = if 2 * r < cfg.rows { "S" } else { "N" };
    let we = if 2 * c < cfg.cols { "W" } else { "E" };
    format!("{ns}{we}")
}

/// Generate a complete dataset with train/auxiliary/test splits by year.
pub fn build_benchmark(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let regimes = cfg.regime_table();
    let layout = cfg.regime_map();
    let cal = &cfg.calendar;
    let mut sites = BTreeMap::new();
    for i in 0..cfg.n_sites() {
        let (r, c) = (i / cfg.cols, i % cfg.cols);
        let id = cfg.site_id(r, c);
        sites.insert(
            id.clone(),
            SiteMeta {
                site_id: id,
                lat: cfg.lat0 + r as f64 * cfg.dlat,
                lon: cfg.lon0 + c as f64 * cfg.dlon,
                region_tag: Some(region_tag(cfg, r, c)),
            },
        );
    }
    let span = (cfg.last_year - cfg.first_year).max(1) as f64;
    let mut years: Vec<i32> = cfg
        .train_years
        .iter()
        .chain(&cfg.test_years)
        .copied()
        .chain([cfg.aux_year])
        .collect();
    years.sort_unstable();
    let mut samples = Vec::new();
    for &year in &years {
        let (temps, precs) = driver_fields(cfg, year);
        for i in 0..cfg.n_sites() {
            let (r, c) = (i / cfg.cols, i % cfg.cols);
            let id = cfg.site_id(r, c);
            let k = layout[i];
            let regime = &regimes[k];
            let jitter = {
                let mut jr = rng::stream(cfg.seed, "npp", &id, &[year as i64]);
                1.0 + cfg.npp_jitter * jr.sample::<f64, _>(StandardNormal)
            };
            let drivers = SiteYearDrivers {
                temp: temps[i].clone(),
                precip: precs[i].clone(),
                npp: npp_proxy(regime, jitter.max(0.0)),
                w_init: cfg.w_init,
            };
            let mut noise_rng = rng::stream(cfg.seed, "observation", &id, &[year as i64]);
            let sim = simulate_site_year(&drivers, regime, cal, cfg.bucket, cfg.noise_std, &mut noise_rng)?;
            let mut daily = Vec::with_capacity(cal.days_per_year * 2);
            for t in 0..cal.days_per_year {
                daily.push(drivers.temp[t]);
                daily.push(drivers.precip[t]);
            }
            let mut x_static = vec![regime.ph];
            x_static.extend((0..cfg.n_regimes).map(|j| if j == k { 1.0 } else { 0.0 }));
            samples.push(SiteYearSample {
                site_id: id,
                year,
                x_daily: Matrix::from_vec(cal.days_per_year, 2, daily)?,
                x_monthly: Matrix::from_vec(12, 1, drivers.npp)?,
                x_yearly: vec![(year - cfg.first_year) as f64 / span],
                x_static,
                y: sim.y,
                mask: vec![true; cal.days_per_year],
            });
        }
    }
    let keys_for = |ys: &[i32]| -> Vec<SampleKey> {
        let mut out = Vec::new();
        for &y in ys {
            for id in sites.keys() {
                out.push(SampleKey::new(id.clone(), y));
            }
        }
        out
    };
    let splits = Splits {
        train: keys_for(&cfg.train_years),
        auxiliary: keys_for(&[cfg.aux_year]),
        test: keys_for(&cfg.test_years),
    };
    let ds = Dataset::new(sites, samples, splits, cal.clone(), cfg.feature_names());
    let violations = validate_dataset(&ds);
    if let Some(v) = violations.first() {
        return Err(RaciError::Dataset(format!("generator produced an invalid dataset: {v}")));
    }
    Ok(ds)
}

/// Noise-free targets regenerated from a stored sample's drivers and regime one-hot.
pub fn resimulate(sample: &SiteYearSample, cfg: &GeneratorConfig) -> Result<Vec<f64>> {
    let regimes = cfg.regime_table();
    let onehot = &sample.x_static[1..];
    let k = onehot
        .iter()
        .position(|&v| v == 1.0)
        .ok_or_else(|| RaciError::Precondition("sample has no regime one-hot".into()))?;
    let drivers = SiteYearDrivers {
        temp: sample.x_daily.column(0),
        precip: sample.x_daily.column(1),
        npp: sample.x_monthly.column(0),
        w_init: cfg.w_init,
    };
    let mut unused = rng::stream(0, "unused", "", &[]);
    Ok(simulate_site_year(&drivers, &regimes[k], &cfg.calendar, cfg.bucket, 0.0, &mut unused)?.y)
}
