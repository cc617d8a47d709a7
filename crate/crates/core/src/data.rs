//! Site-year data model, calendar binning, splits and validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{RaciError, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(RaciError::Shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(RaciError::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteMeta {
    pub site_id: String,
    pub lat: f64,
    pub lon: f64,
    pub region_tag: Option<String>,
}

/// Year layout: `days_per_year` days binned into 12 consecutive months.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalendarSpec {
    pub days_per_year: usize,
    pub month_lengths: Vec<usize>,
}

impl Default for CalendarSpec {
    fn default() -> Self {
        CalendarSpec {
            days_per_year: 365,
            month_lengths: vec![31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31],
        }
    }
}

impl CalendarSpec {
    /// Twelve months of `days_per_month` days each.
    pub fn uniform(days_per_month: usize) -> Self {
        CalendarSpec {
            days_per_year: 12 * days_per_month,
            month_lengths: vec![days_per_month; 12],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.month_lengths.len() != 12 {
            return Err(RaciError::Config(format!(
                "calendar needs 12 months, got {}",
                self.month_lengths.len()
            )));
        }
        if self.month_lengths.contains(&0) {
            return Err(RaciError::Config("calendar month of length 0".into()));
        }
        let total: usize = self.month_lengths.iter().sum();
        if total != self.days_per_year || self.days_per_year == 0 {
            return Err(RaciError::Config(format!(
                "month lengths sum to {total}, days_per_year is {}",
                self.days_per_year
            )));
        }
        Ok(())
    }

    /// Day range `[start, end)` of every month.
    pub fn month_ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.month_lengths
            .iter()
            .map(|&len| {
                let r = start..start + len;
                start += len;
                r
            })
            .collect()
    }

    /// Month index of every day of the year.
    pub fn day_months(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.days_per_year);
        for (m, &len) in self.month_lengths.iter().enumerate() {
            out.extend(std::iter::repeat_n(m, len));
        }
        out
    }
}

/// Month bin of a day of the year.
pub fn month_of_day(day: usize, calendar: &CalendarSpec) -> Result<usize> {
    if day >= calendar.days_per_year {
        return Err(RaciError::Range(format!(
            "day {day} outside [0, {})",
            calendar.days_per_year
        )));
    }
    let mut end = 0;
    for (m, &len) in calendar.month_lengths.iter().enumerate() {
        end += len;
        if day < end {
            return Ok(m);
        }
    }
    Err(RaciError::Range(format!(
        "day {day} beyond the calendar's month bins"
    )))
}

/// `(site_id, year)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleKey {
    pub site_id: String,
    pub year: i32,
}

impl SampleKey {
    pub fn new(site_id: impl Into<String>, year: i32) -> Self {
        SampleKey {
            site_id: site_id.into(),
            year,
        }
    }
}

impl fmt::Display for SampleKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.site_id, self.year)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteYearSample {
    pub site_id: String,
    pub year: i32,
    /// days_per_year x d_D
    pub x_daily: Matrix,
    /// 12 x d_M
    pub x_monthly: Matrix,
    pub x_yearly: Vec<f64>,
    pub x_static: Vec<f64>,
    pub y: Vec<f64>,
    pub mask: Vec<bool>,
}

impl SiteYearSample {
    pub fn key(&self) -> SampleKey {
        SampleKey::new(self.site_id.clone(), self.year)
    }

    /// `[x_yearly; x_static]`.
    pub fn regime_vector(&self) -> Vec<f64> {
        let mut v = self.x_yearly.clone();
        v.extend_from_slice(&self.x_static);
        v
    }

    pub fn observed(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn mask_f64(&self) -> Vec<f64> {
        self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Auxiliary,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Auxiliary, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Auxiliary => "auxiliary",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = RaciError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "auxiliary" | "aux" => Ok(Split::Auxiliary),
            "test" => Ok(Split::Test),
            other => Err(RaciError::Config(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<SampleKey>,
    pub auxiliary: Vec<SampleKey>,
    pub test: Vec<SampleKey>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[SampleKey] {
        match split {
            Split::Train => &self.train,
            Split::Auxiliary => &self.auxiliary,
            Split::Test => &self.test,
        }
    }
}

/// Column names per feature block.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureNames {
    pub daily: Vec<String>,
    pub monthly: Vec<String>,
    pub yearly: Vec<String>,
    #[serde(rename = "static")]
    pub static_: Vec<String>,
}

impl FeatureNames {
    pub fn dims(&self) -> FeatureDims {
        FeatureDims {
            daily: self.daily.len(),
            monthly: self.monthly.len(),
            yearly: self.yearly.len(),
            static_: self.static_.len(),
        }
    }

    /// Column order of [`replicate_for_baseline`].
    pub fn baseline_columns(&self) -> Vec<String> {
        self.daily
            .iter()
            .chain(&self.monthly)
            .chain(&self.yearly)
            .chain(&self.static_)
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub daily: usize,
    pub monthly: usize,
    pub yearly: usize,
    #[serde(rename = "static")]
    pub static_: usize,
}

impl FeatureDims {
    pub fn regime(&self) -> usize {
        self.yearly + self.static_
    }

    pub fn baseline(&self) -> usize {
        self.daily + self.monthly + self.yearly + self.static_
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sites: BTreeMap<String, SiteMeta>,
    pub samples: Vec<SiteYearSample>,
    pub splits: Splits,
    pub calendar: CalendarSpec,
    pub feature_names: FeatureNames,
    index: BTreeMap<SampleKey, usize>,
}

impl Dataset {
    pub fn new(
        sites: BTreeMap<String, SiteMeta>,
        samples: Vec<SiteYearSample>,
        splits: Splits,
        calendar: CalendarSpec,
        feature_names: FeatureNames,
    ) -> Self {
        let index = samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.key(), i))
            .collect();
        Dataset {
            sites,
            samples,
            splits,
            calendar,
            feature_names,
            index,
        }
    }

    pub fn sample(&self, key: &SampleKey) -> Option<&SiteYearSample> {
        self.index.get(key).map(|&i| &self.samples[i])
    }

    pub fn get(&self, site_id: &str, year: i32) -> Option<&SiteYearSample> {
        self.sample(&SampleKey::new(site_id, year))
    }

    pub fn dims(&self) -> FeatureDims {
        self.feature_names.dims()
    }

    /// Samples of a split, sorted by key. Missing keys are an error.
    pub fn split_samples(&self, split: Split) -> Result<Vec<&SiteYearSample>> {
        let mut keys: Vec<&SampleKey> = self.splits.get(split).iter().collect();
        keys.sort();
        keys.into_iter()
            .map(|k| {
                self.sample(k).ok_or_else(|| {
                    RaciError::Dataset(format!("{} split key {k} has no sample", split.name()))
                })
            })
            .collect()
    }

    pub fn split_of(&self, key: &SampleKey) -> Option<Split> {
        Split::ALL
            .into_iter()
            .find(|&s| self.splits.get(s).contains(key))
    }

    /// Subset restricted to the given sites (splits filtered accordingly).
    pub fn restrict_sites(&self, site_ids: &[&str]) -> Dataset {
        let keep: BTreeSet<&str> = site_ids.iter().copied().collect();
        let sites = self
            .sites
            .iter()
            .filter(|(k, _)| keep.contains(k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let samples = self
            .samples
            .iter()
            .filter(|s| keep.contains(s.site_id.as_str()))
            .cloned()
            .collect();
        let filt = |v: &[SampleKey]| -> Vec<SampleKey> {
            v.iter()
                .filter(|k| keep.contains(k.site_id.as_str()))
                .cloned()
                .collect()
        };
        let splits = Splits {
            train: filt(&self.splits.train),
            auxiliary: filt(&self.splits.auxiliary),
            test: filt(&self.splits.test),
        };
        Dataset::new(
            sites,
            samples,
            splits,
            self.calendar.clone(),
            self.feature_names.clone(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    SplitOverlap,
    MissingSample,
    NonFinite,
    MaskLength,
    ShapeMismatch,
    Calendar,
    SiteBounds,
    UnknownSite,
    DuplicateSample,
}

impl ViolationKind {
    pub fn label(self) -> &'static str {
        match self {
            ViolationKind::SplitOverlap => "split overlap",
            ViolationKind::MissingSample => "missing sample",
            ViolationKind::NonFinite => "non-finite",
            ViolationKind::MaskLength => "mask/length mismatch",
            ViolationKind::ShapeMismatch => "shape mismatch",
            ViolationKind::Calendar => "calendar",
            ViolationKind::SiteBounds => "site bounds",
            ViolationKind::UnknownSite => "unknown site",
            ViolationKind::DuplicateSample => "duplicate sample",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub key: Option<SampleKey>,
    pub field: String,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.key {
            Some(k) => write!(f, "{} at {k} [{}]: {}", self.kind.label(), self.field, self.detail),
            None => write!(f, "{} [{}]: {}", self.kind.label(), self.field, self.detail),
        }
    }
}

/// Every invariant violation of `ds`. An empty list means the dataset is valid.
pub fn validate_dataset(ds: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |kind, key: Option<&SampleKey>, field: &str, detail: String| {
        out.push(Violation {
            kind,
            key: key.cloned(),
            field: field.to_string(),
            detail,
        })
    };

    if let Err(e) = ds.calendar.validate() {
        push(ViolationKind::Calendar, None, "calendar", e.to_string());
    }

    for site in ds.sites.values() {
        let ok = (-90.0..=90.0).contains(&site.lat) && (-180.0..=180.0).contains(&site.lon);
        if !ok {
            push(
                ViolationKind::SiteBounds,
                None,
                "sites",
                format!("site {} at ({}, {})", site.site_id, site.lat, site.lon),
            );
        }
    }

    let dims = ds.dims();
    let days = ds.calendar.days_per_year;
    let mut seen = BTreeSet::new();
    for s in &ds.samples {
        let key = s.key();
        if !seen.insert(key.clone()) {
            push(ViolationKind::DuplicateSample, Some(&key), "samples", "key appears twice".into());
        }
        if !ds.sites.contains_key(&s.site_id) {
            push(ViolationKind::UnknownSite, Some(&key), "site_id", "no site record".into());
        }
        let shapes = [
            ("x_daily", s.x_daily.rows, days, s.x_daily.cols, dims.daily),
            ("x_monthly", s.x_monthly.rows, 12, s.x_monthly.cols, dims.monthly),
        ];
        for (field, r, er, c, ec) in shapes {
            if r != er || c != ec {
                push(
                    ViolationKind::ShapeMismatch,
                    Some(&key),
                    field,
                    format!("{r}x{c}, expected {er}x{ec}"),
                );
            }
        }
        if s.x_yearly.len() != dims.yearly {
            push(ViolationKind::ShapeMismatch, Some(&key), "x_yearly", format!("length {}", s.x_yearly.len()));
        }
        if s.x_static.len() != dims.static_ {
            push(ViolationKind::ShapeMismatch, Some(&key), "x_static", format!("length {}", s.x_static.len()));
        }
        if s.y.len() != days {
            push(ViolationKind::MaskLength, Some(&key), "y", format!("length {}, expected {days}", s.y.len()));
        }
        if s.mask.len() != days {
            push(ViolationKind::MaskLength, Some(&key), "mask", format!("length {}, expected {days}", s.mask.len()));
        }
        let blocks: [(&str, &[f64]); 4] = [
            ("x_daily", &s.x_daily.data),
            ("x_monthly", &s.x_monthly.data),
            ("x_yearly", &s.x_yearly),
            ("x_static", &s.x_static),
        ];
        for (field, values) in blocks {
            if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
                push(ViolationKind::NonFinite, Some(&key), field, format!("value at flat index {pos}"));
            }
        }
        let bad_y = s
            .y
            .iter()
            .zip(&s.mask)
            .position(|(v, &m)| m && !v.is_finite());
        if let Some(t) = bad_y {
            push(ViolationKind::NonFinite, Some(&key), "y", format!("observed day {t}"));
        }
    }

    for split in Split::ALL {
        for k in ds.splits.get(split) {
            if ds.sample(k).is_none() {
                push(ViolationKind::MissingSample, Some(k), split.name(), "split key has no sample".into());
            }
        }
    }
    let pairs = [
        (Split::Train, Split::Auxiliary),
        (Split::Train, Split::Test),
        (Split::Auxiliary, Split::Test),
    ];
    for (a, b) in pairs {
        let other: BTreeSet<&SampleKey> = ds.splits.get(b).iter().collect();
        for k in ds.splits.get(a) {
            if other.contains(k) {
                push(
                    ViolationKind::SplitOverlap,
                    Some(k),
                    "splits",
                    format!("key in both {} and {}", a.name(), b.name()),
                );
            }
        }
    }
    out
}

/// Daily input matrix for baselines: row `t` is
/// `[x_daily[t], x_monthly[month(t)], x_yearly, x_static]`.
pub fn replicate_for_baseline(sample: &SiteYearSample, calendar: &CalendarSpec) -> Result<Matrix> {
    if sample.x_daily.rows != calendar.days_per_year
        || sample.x_monthly.rows != calendar.month_lengths.len()
    {
        return Err(RaciError::Shape(format!(
            "sample {} blocks do not match the calendar",
            sample.key()
        )));
    }
    let width = sample.x_daily.cols + sample.x_monthly.cols + sample.x_yearly.len() + sample.x_static.len();
    let months = calendar.day_months();
    let mut data = Vec::with_capacity(calendar.days_per_year * width);
    for (t, &m) in months.iter().enumerate() {
        data.extend_from_slice(sample.x_daily.row(t));
        data.extend_from_slice(sample.x_monthly.row(m));
        data.extend_from_slice(&sample.x_yearly);
        data.extend_from_slice(&sample.x_static);
    }
    Matrix::from_vec(calendar.days_per_year, width, data)
}
