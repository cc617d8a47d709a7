//! Dataset directories, checkpoints and CSV artifacts.
//!
//! A dataset directory holds `manifest.json` plus four keyed CSV tables:
//! `sites.csv` (site_id, lat, lon, region_tag, static features),
//! `daily.csv` (site_id, year, day, daily features, target, mask),
//! `monthly.csv` (site_id, year, month, monthly features) and
//! `yearly.csv` (site_id, year, yearly features). Floats are written with 17
//! significant digits so a save/load cycle is a bitwise identity.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{CalendarSpec, Dataset, FeatureDims, FeatureNames, Matrix, SampleKey, SiteMeta, SiteYearSample, Splits};
use crate::error::{RaciError, Result};
use crate::evaluation::{AblationRow, AttentionExport, SweepTable};
use crate::params::{ParamStore, Tensor};
use crate::predictor::{Model, ModelKind, RaciConfig, Standardizer};
use crate::retrieval::RetrievalReport;
use crate::training::{AdamState, EpochLog, RunState, TrainConfig};

pub const DATASET_FORMAT: &str = "raci-dataset/1";
pub const CHECKPOINT_FORMAT: &str = "raci-checkpoint/1";
/// Generator behind every random stream, recorded in manifests.
pub const RNG_SCHEME: &str = "ChaCha8, stream key = SHA-256(seed, purpose, site_id, indices)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub rng: String,
    pub calendar: CalendarSpec,
    pub dims: FeatureDims,
    pub feature_names: FeatureNames,
    pub splits: Splits,
    /// Site-year keys in storage order.
    pub samples: Vec<SampleKey>,
}

/// Scientific notation with 17 significant digits; parses back to the same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn load_err(file: &Path, msg: impl Into<String>) -> RaciError {
    RaciError::Load {
        file: file.display().to_string(),
        msg: msg.into(),
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let f = File::create(path).map_err(|e| RaciError::io(path, e))?;
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(f))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    let f = File::open(path).map_err(|e| RaciError::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(f))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let f = File::create(path).map_err(|e| RaciError::io(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, v)?;
    w.write_all(b"\n").map_err(|e| RaciError::io(path, e))?;
    w.flush().map_err(|e| RaciError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| RaciError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| load_err(path, e.to_string()))
}

pub fn save_json<T: Serialize>(path: impl AsRef<Path>, v: &T) -> Result<()> {
    write_json(path.as_ref(), v)
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    read_json(path.as_ref())
}

fn flush(w: &mut csv::Writer<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| RaciError::io(path, e))
}

pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| RaciError::io(dir, e))?;
    let names = &ds.feature_names;

    let mut statics: BTreeMap<&str, &[f64]> = BTreeMap::new();
    for s in &ds.samples {
        match statics.get(s.site_id.as_str()) {
            Some(prev) if *prev != s.x_static.as_slice() => {
                return Err(RaciError::Dataset(format!("site {} has year-varying static features", s.site_id)));
            }
            _ => {
                statics.insert(&s.site_id, &s.x_static);
            }
        }
    }

    let path = dir.join("sites.csv");
    let mut w = csv_writer(&path)?;
    let mut header = vec!["site_id".to_string(), "lat".into(), "lon".into(), "region_tag".into()];
    header.extend(names.static_.iter().cloned());
    w.write_record(&header)?;
    for (id, meta) in &ds.sites {
        let mut row = vec![id.clone(), fmt_f64(meta.lat), fmt_f64(meta.lon), meta.region_tag.clone().unwrap_or_default()];
        match statics.get(id.as_str()) {
            Some(v) => row.extend(v.iter().map(|&x| fmt_f64(x))),
            None => row.extend(std::iter::repeat_n(String::new(), names.static_.len())),
        }
        w.write_record(&row)?;
    }
    flush(&mut w, &path)?;

    let path = dir.join("daily.csv");
    let mut w = csv_writer(&path)?;
    let mut header = vec!["site_id".to_string(), "year".into(), "day".into()];
    header.extend(names.daily.iter().cloned());
    header.extend(["target".into(), "mask".into()]);
    w.write_record(&header)?;
    for s in &ds.samples {
        for d in 0..s.y.len() {
            let mut row = vec![s.site_id.clone(), s.year.to_string(), d.to_string()];
            row.extend(s.x_daily.row(d).iter().map(|&x| fmt_f64(x)));
            row.push(fmt_f64(s.y[d]));
            row.push(if s.mask[d] { "1" } else { "0" }.into());
            w.write_record(&row)?;
        }
    }
    flush(&mut w, &path)?;

    let path = dir.join("monthly.csv");
    let mut w = csv_writer(&path)?;
    let mut header = vec!["site_id".to_string(), "year".into(), "month".into()];
    header.extend(names.monthly.iter().cloned());
    w.write_record(&header)?;
    for s in &ds.samples {
        for m in 0..s.x_monthly.rows {
            let mut row = vec![s.site_id.clone(), s.year.to_string(), m.to_string()];
            row.extend(s.x_monthly.row(m).iter().map(|&x| fmt_f64(x)));
            w.write_record(&row)?;
        }
    }
    flush(&mut w, &path)?;

    let path = dir.join("yearly.csv");
    let mut w = csv_writer(&path)?;
    let mut header = vec!["site_id".to_string(), "year".into()];
    header.extend(names.yearly.iter().cloned());
    w.write_record(&header)?;
    for s in &ds.samples {
        let mut row = vec![s.site_id.clone(), s.year.to_string()];
        row.extend(s.x_yearly.iter().map(|&x| fmt_f64(x)));
        w.write_record(&row)?;
    }
    flush(&mut w, &path)?;

    let manifest = Manifest {
        format: DATASET_FORMAT.into(),
        rng: RNG_SCHEME.into(),
        calendar: ds.calendar.clone(),
        dims: ds.dims(),
        feature_names: ds.feature_names.clone(),
        splits: ds.splits.clone(),
        samples: ds.samples.iter().map(|s| s.key()).collect(),
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

/// Reads one table, checking the header against `expected` and handing every
/// row (with its 1-based line number) to `f`.
fn read_table(path: &Path, expected: &[String], mut f: impl FnMut(usize, &csv::StringRecord) -> Result<()>) -> Result<()> {
    let mut r = csv_reader(path)?;
    let header = r.headers().map_err(|e| load_err(path, e.to_string()))?.clone();
    if header.len() != expected.len() {
        return Err(load_err(
            path,
            format!("header has {} columns, manifest implies {}", header.len(), expected.len()),
        ));
    }
    for (i, (got, want)) in header.iter().zip(expected).enumerate() {
        if got != want {
            return Err(load_err(path, format!("column {i} is `{got}`, expected `{want}`")));
        }
    }
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| load_err(path, format!("row {line}: {e}")))?;
        f(line, &rec).map_err(|e| match e {
            RaciError::Load { .. } => e,
            other => load_err(path, format!("row {line}: {other}")),
        })?;
    }
    Ok(())
}

fn parse_f64(path: &Path, line: usize, col: &str, s: &str) -> Result<f64> {
    s.parse().map_err(|_| load_err(path, format!("row {line}: column {col}: `{s}` is not a number")))
}

fn parse_int<T: std::str::FromStr>(path: &Path, line: usize, col: &str, s: &str) -> Result<T> {
    s.parse().map_err(|_| load_err(path, format!("row {line}: column {col}: `{s}` is not an integer")))
}

struct Partial {
    daily: Vec<Option<(Vec<f64>, f64, bool)>>,
    monthly: Vec<Option<Vec<f64>>>,
    yearly: Option<Vec<f64>>,
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mpath = dir.join("manifest.json");
    let manifest: Manifest = read_json(&mpath)?;
    if manifest.format != DATASET_FORMAT {
        return Err(load_err(&mpath, format!("unsupported format `{}`", manifest.format)));
    }
    manifest.calendar.validate().map_err(|e| load_err(&mpath, e.to_string()))?;
    let names = &manifest.feature_names;
    let dims = manifest.dims;
    let declared = names.dims();
    for (what, n, d) in [
        ("daily", declared.daily, dims.daily),
        ("monthly", declared.monthly, dims.monthly),
        ("yearly", declared.yearly, dims.yearly),
        ("static", declared.static_, dims.static_),
    ] {
        if n != d {
            return Err(load_err(&mpath, format!("{what} dimension {d} but {n} feature names")));
        }
    }
    let days = manifest.calendar.days_per_year;
    let months = manifest.calendar.month_lengths.len();

    let mut partial: BTreeMap<SampleKey, Partial> = BTreeMap::new();
    for k in &manifest.samples {
        let fresh = Partial {
            daily: vec![None; days],
            monthly: vec![None; months],
            yearly: None,
        };
        if partial.insert(k.clone(), fresh).is_some() {
            return Err(load_err(&mpath, format!("sample {k} listed twice")));
        }
    }

    let key_of = |path: &Path, line: usize, rec: &csv::StringRecord| -> Result<SampleKey> {
        let year = parse_int(path, line, "year", &rec[1])?;
        Ok(SampleKey::new(&rec[0], year))
    };

    let mut sites = BTreeMap::new();
    let mut statics: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let path = dir.join("sites.csv");
    let mut header = vec!["site_id".to_string(), "lat".into(), "lon".into(), "region_tag".into()];
    header.extend(names.static_.iter().cloned());
    read_table(&path, &header, |line, rec| {
        let id = rec[0].to_string();
        let meta = SiteMeta {
            site_id: id.clone(),
            lat: parse_f64(&path, line, "lat", &rec[1])?,
            lon: parse_f64(&path, line, "lon", &rec[2])?,
            region_tag: (!rec[3].is_empty()).then(|| rec[3].to_string()),
        };
        // blank static cells mark a site without samples
        let blank = dims.static_ > 0 && rec.iter().skip(4).all(|c| c.is_empty());
        if !blank {
            let v = (4..rec.len())
                .map(|j| parse_f64(&path, line, &header[j], &rec[j]))
                .collect::<Result<Vec<_>>>()?;
            statics.insert(id.clone(), v);
        }
        if sites.insert(id.clone(), meta).is_some() {
            return Err(load_err(&path, format!("row {line}: site {id} listed twice")));
        }
        Ok(())
    })?;

    let path = dir.join("daily.csv");
    let mut header = vec!["site_id".to_string(), "year".into(), "day".into()];
    header.extend(names.daily.iter().cloned());
    header.extend(["target".into(), "mask".into()]);
    read_table(&path, &header, |line, rec| {
        let key = key_of(&path, line, rec)?;
        let day: usize = parse_int(&path, line, "day", &rec[2])?;
        let p = partial
            .get_mut(&key)
            .ok_or_else(|| load_err(&path, format!("row {line}: sample {key} is not in the manifest")))?;
        if day >= days {
            return Err(load_err(&path, format!("row {line}: day {day} outside the {days}-day calendar")));
        }
        let x = (0..dims.daily)
            .map(|j| parse_f64(&path, line, &names.daily[j], &rec[3 + j]))
            .collect::<Result<Vec<_>>>()?;
        let y = parse_f64(&path, line, "target", &rec[3 + dims.daily])?;
        let mask = match &rec[4 + dims.daily] {
            "1" => true,
            "0" => false,
            other => return Err(load_err(&path, format!("row {line}: mask `{other}` is not 0 or 1"))),
        };
        if p.daily[day].replace((x, y, mask)).is_some() {
            return Err(load_err(&path, format!("row {line}: duplicate day {day} for {key}")));
        }
        Ok(())
    })?;

    let path = dir.join("monthly.csv");
    let mut header = vec!["site_id".to_string(), "year".into(), "month".into()];
    header.extend(names.monthly.iter().cloned());
    read_table(&path, &header, |line, rec| {
        let key = key_of(&path, line, rec)?;
        let month: usize = parse_int(&path, line, "month", &rec[2])?;
        let p = partial
            .get_mut(&key)
            .ok_or_else(|| load_err(&path, format!("row {line}: sample {key} is not in the manifest")))?;
        if month >= months {
            return Err(load_err(&path, format!("row {line}: month {month} outside the calendar")));
        }
        let x = (0..dims.monthly)
            .map(|j| parse_f64(&path, line, &names.monthly[j], &rec[3 + j]))
            .collect::<Result<Vec<_>>>()?;
        if p.monthly[month].replace(x).is_some() {
            return Err(load_err(&path, format!("row {line}: duplicate month {month} for {key}")));
        }
        Ok(())
    })?;

    let path = dir.join("yearly.csv");
    let mut header = vec!["site_id".to_string(), "year".into()];
    header.extend(names.yearly.iter().cloned());
    read_table(&path, &header, |line, rec| {
        let key = key_of(&path, line, rec)?;
        let p = partial
            .get_mut(&key)
            .ok_or_else(|| load_err(&path, format!("row {line}: sample {key} is not in the manifest")))?;
        let x = (0..dims.yearly)
            .map(|j| parse_f64(&path, line, &names.yearly[j], &rec[2 + j]))
            .collect::<Result<Vec<_>>>()?;
        if p.yearly.replace(x).is_some() {
            return Err(load_err(&path, format!("row {line}: duplicate row for {key}")));
        }
        Ok(())
    })?;

    let mut samples = Vec::with_capacity(manifest.samples.len());
    for key in &manifest.samples {
        let p = partial.remove(key).expect("manifest key");
        let mut xd = Vec::with_capacity(days * dims.daily);
        let mut y = Vec::with_capacity(days);
        let mut mask = Vec::with_capacity(days);
        for (d, row) in p.daily.into_iter().enumerate() {
            let (x, v, m) = row.ok_or_else(|| load_err(&dir.join("daily.csv"), format!("{key} has no row for day {d}")))?;
            xd.extend(x);
            y.push(v);
            mask.push(m);
        }
        let mut xm = Vec::with_capacity(months * dims.monthly);
        for (m, row) in p.monthly.into_iter().enumerate() {
            xm.extend(row.ok_or_else(|| load_err(&dir.join("monthly.csv"), format!("{key} has no row for month {m}")))?);
        }
        let x_yearly = p
            .yearly
            .ok_or_else(|| load_err(&dir.join("yearly.csv"), format!("{key} has no row")))?;
        let x_static = statics
            .get(&key.site_id)
            .cloned()
            .ok_or_else(|| load_err(&dir.join("sites.csv"), format!("site {} of {key} is missing", key.site_id)))?;
        samples.push(SiteYearSample {
            site_id: key.site_id.clone(),
            year: key.year,
            x_daily: Matrix::from_vec(days, dims.daily, xd)?,
            x_monthly: Matrix::from_vec(months, dims.monthly, xm)?,
            x_yearly,
            x_static,
            y,
            mask,
        });
    }

    for split in crate::data::Split::ALL {
        for k in manifest.splits.get(split) {
            if !manifest.samples.contains(k) {
                return Err(load_err(&mpath, format!("{} split lists {k}, which has no sample", split.name())));
            }
        }
    }

    Ok(Dataset::new(sites, samples, manifest.splits, manifest.calendar, manifest.feature_names))
}

/// Everything a training run is configured by. The copy written into a run
/// directory has every default filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_kind")]
    pub kind: ModelKind,
    #[serde(default)]
    pub model: RaciConfig,
    pub train: TrainConfig,
}

fn default_kind() -> ModelKind {
    ModelKind::Raci
}

/// Serialized run: model, optimizer and bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub kind: ModelKind,
    pub config: RaciConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub fingerprint: String,
    pub dims: FeatureDims,
    pub calendar: CalendarSpec,
    pub scaler: Standardizer,
    pub tensors: Vec<Tensor>,
    pub adam: AdamState,
    pub epoch: usize,
    pub history: Vec<EpochLog>,
    pub pool_fingerprint: Option<String>,
}

impl Checkpoint {
    pub fn from_run(state: &RunState) -> Self {
        let m = &state.model;
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            kind: m.kind,
            config: m.config.clone(),
            train: state.train.clone(),
            seed: state.train.seed,
            fingerprint: m.fingerprint(),
            dims: m.dims,
            calendar: m.calendar.clone(),
            scaler: m.scaler.clone(),
            tensors: m.params.tensors().to_vec(),
            adam: state.adam.clone(),
            epoch: state.epoch,
            history: state.history.clone(),
            pool_fingerprint: state.pool_fingerprint.clone(),
        }
    }

    pub fn into_run(self) -> Result<RunState> {
        let params = ParamStore::from_tensors(self.tensors)?;
        let model = Model::from_parts(self.kind, self.config, self.dims, self.calendar, self.scaler, params)?;
        if model.fingerprint() != self.fingerprint {
            return Err(RaciError::Precondition(format!(
                "checkpoint fingerprint {} does not match its parameters ({})",
                self.fingerprint,
                model.fingerprint()
            )));
        }
        let shapes_ok = self.adam.m.len() == model.params.tensors().len()
            && self.adam.m.iter().zip(&self.adam.v).zip(model.params.tensors()).all(|((m, v), t)| m.len() == t.data.len() && v.len() == t.data.len());
        if !shapes_ok {
            return Err(RaciError::Shape("optimizer state does not match the parameters".into()));
        }
        Ok(RunState {
            model,
            adam: self.adam,
            train: self.train,
            epoch: self.epoch,
            history: self.history,
            pool_fingerprint: self.pool_fingerprint,
        })
    }
}

pub fn save_checkpoint(state: &RunState, path: impl AsRef<Path>) -> Result<()> {
    write_json(path.as_ref(), &Checkpoint::from_run(state))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<RunState> {
    let path = path.as_ref();
    let c: Checkpoint = read_json(path)?;
    if c.format != CHECKPOINT_FORMAT {
        return Err(load_err(path, format!("unsupported format `{}`", c.format)));
    }
    c.into_run().map_err(|e| load_err(path, e.to_string()))
}

pub fn write_loss_history(history: &[EpochLog], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    w.write_record(["epoch", "loss", "fallback_rate", "pool_fingerprint"])?;
    for e in history {
        w.write_record([e.epoch.to_string(), fmt_f64(e.loss), fmt_f64(e.fallback_rate), e.pool_fingerprint.clone()])?;
    }
    flush(&mut w, path)
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn write_ablation_csv(rows: &[AblationRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    w.write_record(["variant", "rmse", "r2"])?;
    for r in rows {
        w.write_record([r.variant.label().to_string(), fmt_f64(r.rmse), opt(r.r2)])?;
    }
    flush(&mut w, path)
}

pub fn write_sweep_csv(t: &SweepTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    w.write_record(["table", "value", "rmse", "r2"])?;
    for r in t.tau.iter().chain(&t.k_pca) {
        w.write_record([r.knob.clone(), r.value.to_string(), fmt_f64(r.rmse), opt(r.r2)])?;
    }
    flush(&mut w, path)
}

/// One row per (target, pool entry) pair.
pub fn write_retrieval_csv<'a>(
    reports: impl IntoIterator<Item = &'a RetrievalReport>,
    pool_keys: &[SampleKey],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    w.write_record([
        "target_site",
        "target_year",
        "entry_site",
        "entry_year",
        "similarity",
        "selected",
        "weight",
        "fallback",
    ])?;
    for r in reports {
        for (i, k) in pool_keys.iter().enumerate() {
            let cand = r.candidates.iter().find(|c| c.entry == i);
            w.write_record([
                r.target.site_id.clone(),
                r.target.year.to_string(),
                k.site_id.clone(),
                k.year.to_string(),
                r.similarities.get(i).map(|&s| fmt_f64(s)).unwrap_or_default(),
                (cand.is_some() as u8).to_string(),
                cand.map(|c| fmt_f64(c.weight)).unwrap_or_else(|| fmt_f64(0.0)),
                (r.fallback as u8).to_string(),
            ])?;
        }
    }
    flush(&mut w, path)
}

/// Writes `<stem>_daily.csv`, `<stem>_monthly.csv` and `<stem>_correlations.csv`.
pub fn write_attention(export: &AttentionExport, calendar: &CalendarSpec, dir: impl AsRef<Path>, stem: &str) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let emb = &export.diagnostics.embedding;
    let months = calendar.day_months();

    let p1 = dir.join(format!("{stem}_daily.csv"));
    let mut w = csv_writer(&p1)?;
    w.write_record(["day", "month", "alpha_d2m", "beta_m2d"])?;
    for (d, &m) in months.iter().enumerate() {
        w.write_record([
            d.to_string(),
            m.to_string(),
            export.alpha_daily.get(d).map(|&a| fmt_f64(a)).unwrap_or_default(),
            fmt_f64(emb.beta_m2d[d]),
        ])?;
    }
    flush(&mut w, &p1)?;

    let p2 = dir.join(format!("{stem}_monthly.csv"));
    let mut w = csv_writer(&p2)?;
    w.write_record(["month", "alpha_m2y", "beta_y2m"])?;
    for m in 0..calendar.month_lengths.len() {
        w.write_record([
            m.to_string(),
            emb.alpha_m2y.get(m).map(|&a| fmt_f64(a)).unwrap_or_default(),
            fmt_f64(emb.beta_y2m[m]),
        ])?;
    }
    flush(&mut w, &p2)?;

    let p3 = dir.join(format!("{stem}_correlations.csv"));
    let mut w = csv_writer(&p3)?;
    w.write_record(["driver", "pearson_r", "constant"])?;
    for c in &export.correlations {
        w.write_record([c.driver.clone(), fmt_f64(c.r), (c.constant as u8).to_string()])?;
    }
    flush(&mut w, &p3)?;
    Ok(vec![p1, p2, p3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{build_benchmark, GeneratorConfig};

    #[test]
    fn f64_text_round_trips_bitwise() {
        for v in [0.1, -1.0 / 3.0, 1e-300, f64::MAX, 5e-324, 123456.789e10] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }

    #[test]
    fn dataset_round_trip() {
        let ds = build_benchmark(&GeneratorConfig::tiny(5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn dimension_mismatch_names_the_table() {
        let ds = build_benchmark(&GeneratorConfig::tiny(5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let mpath = dir.path().join("manifest.json");
        let mut m: Manifest = load_json(&mpath).unwrap();
        m.dims.daily = 3;
        m.feature_names.daily.push("extra".into());
        save_json(&mpath, &m).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("daily.csv"), "{err}");
    }

    #[test]
    fn bad_cell_names_file_and_row() {
        let ds = build_benchmark(&GeneratorConfig::tiny(5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let p = dir.path().join("yearly.csv");
        let text = fs::read_to_string(&p).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[2] = lines[2].rsplit_once(',').map(|(a, _)| format!("{a},oops")).unwrap();
        fs::write(&p, lines.join("\n") + "\n").unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("yearly.csv") && err.contains("row 3"), "{err}");
    }

    #[test]
    fn split_key_without_sample_is_rejected() {
        let ds = build_benchmark(&GeneratorConfig::tiny(5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let mpath = dir.path().join("manifest.json");
        let mut m: Manifest = load_json(&mpath).unwrap();
        m.splits.test.push(SampleKey::new("ghost", 1999));
        save_json(&mpath, &m).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("ghost"), "{err}");
    }

    #[test]
    fn empty_auxiliary_split_loads() {
        let mut ds = build_benchmark(&GeneratorConfig::tiny(5)).unwrap();
        ds.splits.auxiliary.clear();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        assert!(load_dataset(dir.path()).unwrap().splits.auxiliary.is_empty());
    }
}
