//! Grid rasters, wall-to-wall prediction, risk zonation and the synthetic
//! landscape generator.
//!
//! Rasters use a plain-text format modelled on ESRI ASCII grids: six header
//! lines (`ncols`, `nrows`, `xllcorner`, `yllcorner`, `cellsize`,
//! `NODATA_value`) followed by `nrows` rows of values, north row first.
//! Areas assume a projected equal-area grid in meters.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{DataError, Dataset, FeatureSchema, Sample, Stratum, CANONICAL_FEATURES};
use crate::forest::{Forest, ForestError};
use crate::seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("line {line}: {message}")]
    Header { line: usize, message: String },
    #[error("line {line}: bad cell value `{token}`")]
    Cell { line: usize, token: String },
    #[error("line {line}: expected {expected} cells, found {found}")]
    CellCount { line: usize, expected: usize, found: usize },
    #[error("invalid raster: {0}")]
    InvalidRaster(String),
    #[error("layers are not aligned: {0}")]
    Misaligned(String),
    #[error("stack has no layer for feature `{0}`")]
    MissingLayer(String),
    #[error("cutoffs must satisfy 0 <= c1 < c2 <= 1, got ({0}, {1})")]
    InvalidCutoffs(f64, f64),
    #[error("district value {0} is not an integer id")]
    DistrictId(f64),
    #[error("invalid synthetic parameters: {0}")]
    InvalidParams(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRaster {
    pub ncols: usize,
    pub nrows: usize,
    pub xllcorner: f64,
    pub yllcorner: f64,
    pub cellsize: f64,
    pub nodata_value: f64,
    /// Row-major, north row first.
    pub cells: Vec<f64>,
}

pub const DEFAULT_NODATA: f64 = -9999.0;

const HEADER_KEYS: [&str; 6] = ["ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "NODATA_value"];

impl GridRaster {
    pub fn new(
        ncols: usize,
        nrows: usize,
        xllcorner: f64,
        yllcorner: f64,
        cellsize: f64,
        nodata_value: f64,
        cells: Vec<f64>,
    ) -> Result<Self, GeoError> {
        if ncols == 0 || nrows == 0 {
            return Err(GeoError::InvalidRaster("zero-sized grid".into()));
        }
        if !(cellsize > 0.0 && cellsize.is_finite()) {
            return Err(GeoError::InvalidRaster(format!("cellsize {cellsize} must be positive")));
        }
        if !(xllcorner.is_finite() && yllcorner.is_finite()) {
            return Err(GeoError::InvalidRaster("non-finite corner".into()));
        }
        if cells.len() != ncols * nrows {
            return Err(GeoError::InvalidRaster(format!(
                "{} cells for a {nrows}x{ncols} grid",
                cells.len()
            )));
        }
        Ok(Self {
            ncols,
            nrows,
            xllcorner,
            yllcorner,
            cellsize,
            nodata_value,
            cells,
        })
    }

    /// A raster with the same geometry and every cell set to `value`.
    pub fn filled_like(&self, value: f64) -> Self {
        Self {
            cells: vec![value; self.cells.len()],
            ..self.clone()
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.cells[row * self.ncols + col]
    }

    pub fn is_nodata(&self, v: f64) -> bool {
        v == self.nodata_value || v.is_nan()
    }

    pub fn same_geometry(&self, other: &GridRaster) -> bool {
        self.ncols == other.ncols
            && self.nrows == other.nrows
            && self.xllcorner == other.xllcorner
            && self.yllcorner == other.yllcorner
            && self.cellsize == other.cellsize
    }

    /// Projected coordinates of a cell centre.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let x = self.xllcorner + (col as f64 + 0.5) * self.cellsize;
        let y = self.yllcorner + ((self.nrows - row) as f64 - 0.5) * self.cellsize;
        (x, y)
    }

    /// Row and column of the cell containing `(x, y)`, if inside the grid.
    pub fn cell_at(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = ((x - self.xllcorner) / self.cellsize).floor();
        let r_up = ((y - self.yllcorner) / self.cellsize).floor();
        if c < 0.0 || r_up < 0.0 || c >= self.ncols as f64 || r_up >= self.nrows as f64 {
            return None;
        }
        Some((self.nrows - 1 - r_up as usize, c as usize))
    }

    pub fn valid_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.cells.iter().copied().filter(|&v| !self.is_nodata(v))
    }
}

pub fn read_ascii_grid(text: &str) -> Result<GridRaster, GeoError> {
    let mut lines = text.lines().enumerate();
    let mut header = [0.0f64; 6];
    for (k, key) in HEADER_KEYS.iter().enumerate() {
        let (i, line) = lines.next().ok_or(GeoError::Header {
            line: k + 1,
            message: format!("missing `{key}`"),
        })?;
        let bad = |message: String| GeoError::Header { line: i + 1, message };
        let mut parts = line.split_whitespace();
        let name = parts.next().unwrap_or("");
        if !name.eq_ignore_ascii_case(key) {
            return Err(bad(format!("expected `{key}`, found `{name}`")));
        }
        let value = parts.next().ok_or_else(|| bad(format!("`{key}` has no value")))?;
        header[k] = value
            .parse()
            .map_err(|_| bad(format!("`{key}` value `{value}` is not a number")))?;
        if parts.next().is_some() {
            return Err(bad(format!("trailing text after `{key}`")));
        }
    }
    let count = |v: f64, key: &str| -> Result<usize, GeoError> {
        if v >= 1.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(GeoError::Header {
                line: if key == "ncols" { 1 } else { 2 },
                message: format!("`{key}` must be a positive integer"),
            })
        }
    };
    let ncols = count(header[0], "ncols")?;
    let nrows = count(header[1], "nrows")?;
    let expected = ncols * nrows;
    let mut cells = Vec::with_capacity(expected);
    let mut last_line = HEADER_KEYS.len();
    for (i, line) in lines {
        for token in line.split_whitespace() {
            last_line = i + 1;
            let v: f64 = token.parse().map_err(|_| GeoError::Cell {
                line: i + 1,
                token: token.to_string(),
            })?;
            cells.push(v);
            if cells.len() > expected {
                return Err(GeoError::CellCount {
                    line: i + 1,
                    expected,
                    found: cells.len(),
                });
            }
        }
    }
    if cells.len() != expected {
        return Err(GeoError::CellCount {
            line: last_line,
            expected,
            found: cells.len(),
        });
    }
    GridRaster::new(ncols, nrows, header[2], header[3], header[4], header[5], cells)
}

pub fn write_ascii_grid(g: &GridRaster) -> String {
    let mut o = String::new();
    let _ = writeln!(o, "ncols {}", g.ncols);
    let _ = writeln!(o, "nrows {}", g.nrows);
    let _ = writeln!(o, "xllcorner {}", g.xllcorner);
    let _ = writeln!(o, "yllcorner {}", g.yllcorner);
    let _ = writeln!(o, "cellsize {}", g.cellsize);
    let _ = writeln!(o, "NODATA_value {}", g.nodata_value);
    for row in g.cells.chunks(g.ncols) {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        o.push_str(&cells.join(" "));
        o.push('\n');
    }
    o
}

fn io_err(path: &Path, e: std::io::Error) -> GeoError {
    GeoError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub fn read_grid_file(path: &Path) -> Result<GridRaster, GeoError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    read_ascii_grid(&text).map_err(|e| GeoError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn write_grid_file(path: &Path, g: &GridRaster) -> Result<(), GeoError> {
    std::fs::write(path, write_ascii_grid(g)).map_err(|e| io_err(path, e))
}

/// Named feature layers plus optional district-id and stratum layers, all
/// sharing one geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterStack {
    layers: Vec<(String, GridRaster)>,
    district: Option<GridRaster>,
    stratum: Option<GridRaster>,
}

pub const DISTRICT_LAYER: &str = "district";
pub const STRATUM_LAYER: &str = "stratum";

impl RasterStack {
    pub fn new(
        layers: Vec<(String, GridRaster)>,
        district: Option<GridRaster>,
        stratum: Option<GridRaster>,
    ) -> Result<Self, GeoError> {
        let first = match layers.first() {
            Some((_, g)) => g,
            None => return Err(GeoError::InvalidRaster("stack has no layers".into())),
        };
        let named = layers
            .iter()
            .map(|(n, g)| (n.as_str(), g))
            .chain(district.iter().map(|g| (DISTRICT_LAYER, g)))
            .chain(stratum.iter().map(|g| (STRATUM_LAYER, g)));
        for (name, g) in named {
            if !g.same_geometry(first) {
                return Err(GeoError::Misaligned(format!(
                    "layer `{name}` differs from `{}`",
                    layers[0].0
                )));
            }
        }
        Ok(Self {
            layers,
            district,
            stratum,
        })
    }

    pub fn layers(&self) -> &[(String, GridRaster)] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&GridRaster> {
        self.layers.iter().find(|(n, _)| n == name).map(|(_, g)| g)
    }

    pub fn district(&self) -> Option<&GridRaster> {
        self.district.as_ref()
    }

    pub fn stratum(&self) -> Option<&GridRaster> {
        self.stratum.as_ref()
    }

    /// Geometry shared by all layers.
    pub fn template(&self) -> &GridRaster {
        &self.layers[0].1
    }

    /// Writes `<name>.asc` per layer plus `district.asc` / `stratum.asc`.
    pub fn write_dir(&self, dir: &Path) -> Result<Vec<String>, GeoError> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let mut written = Vec::new();
        let all = self
            .layers
            .iter()
            .map(|(n, g)| (n.as_str(), g))
            .chain(self.district.iter().map(|g| (DISTRICT_LAYER, g)))
            .chain(self.stratum.iter().map(|g| (STRATUM_LAYER, g)));
        for (name, g) in all {
            let file = format!("{name}.asc");
            write_grid_file(&dir.join(&file), g)?;
            written.push(file);
        }
        Ok(written)
    }

    /// Reads the layers named by `schema` from `dir`; district and stratum
    /// layers are picked up when present.
    pub fn read_dir(dir: &Path, schema: &FeatureSchema) -> Result<Self, GeoError> {
        let mut layers = Vec::new();
        for name in schema.names() {
            let path = dir.join(format!("{name}.asc"));
            if !path.exists() {
                return Err(GeoError::MissingLayer(name.to_string()));
            }
            layers.push((name.to_string(), read_grid_file(&path)?));
        }
        let optional = |name: &str| -> Result<Option<GridRaster>, GeoError> {
            let path = dir.join(format!("{name}.asc"));
            if path.exists() {
                read_grid_file(&path).map(Some)
            } else {
                Ok(None)
            }
        };
        Self::new(layers, optional(DISTRICT_LAYER)?, optional(STRATUM_LAYER)?)
    }
}

/// Forest probability per cell; nodata in any feature layer the model uses
/// gives nodata out.
pub fn predict_raster(f: &Forest, stack: &RasterStack) -> Result<GridRaster, GeoError> {
    let layers: Vec<&GridRaster> = f
        .schema()
        .names()
        .map(|n| stack.layer(n).ok_or_else(|| GeoError::MissingLayer(n.to_string())))
        .collect::<Result<_, _>>()?;
    let t = stack.template();
    let mut out = t.filled_like(t.nodata_value);
    out.cells
        .par_chunks_mut(t.ncols)
        .enumerate()
        .try_for_each(|(r, row)| -> Result<(), ForestError> {
            let mut x = vec![0.0; layers.len()];
            for (c, cell) in row.iter_mut().enumerate() {
                let i = r * t.ncols + c;
                let mut missing = false;
                for (k, g) in layers.iter().enumerate() {
                    x[k] = g.cells[i];
                    missing |= g.is_nodata(x[k]);
                }
                if !missing {
                    *cell = f.predict_proba(&x)?;
                }
            }
            Ok(())
        })?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskMap {
    pub probability: GridRaster,
    /// Values 1, 2, 3 or the probability raster's nodata value.
    pub classes: GridRaster,
    pub cutoffs: (f64, f64),
}

pub const DEFAULT_CUTOFFS: (f64, f64) = (1.0 / 3.0, 2.0 / 3.0);

fn check_cutoffs((c1, c2): (f64, f64)) -> Result<(), GeoError> {
    if 0.0 <= c1 && c1 < c2 && c2 <= 1.0 {
        Ok(())
    } else {
        Err(GeoError::InvalidCutoffs(c1, c2))
    }
}

/// Class 1 if `p < c1`, 2 if `c1 <= p < c2`, 3 if `p >= c2`.
pub fn risk_class(p: f64, (c1, c2): (f64, f64)) -> u8 {
    if p < c1 {
        1
    } else if p < c2 {
        2
    } else {
        3
    }
}

pub fn classify_risk(p: &GridRaster, cutoffs: (f64, f64)) -> Result<RiskMap, GeoError> {
    check_cutoffs(cutoffs)?;
    let mut classes = p.clone();
    for v in &mut classes.cells {
        if !p.is_nodata(*v) {
            *v = f64::from(risk_class(*v, cutoffs));
        }
    }
    Ok(RiskMap {
        probability: p.clone(),
        classes,
        cutoffs,
    })
}

/// Cutoffs at the `q1` and `q2` quantiles (linear interpolation) of the
/// valid probabilities.
pub fn quantile_cutoffs(p: &GridRaster, (q1, q2): (f64, f64)) -> Result<(f64, f64), GeoError> {
    check_cutoffs((q1, q2))?;
    let mut v: Vec<f64> = p.valid_values().collect();
    if v.is_empty() {
        return Err(GeoError::InvalidRaster("no valid cells".into()));
    }
    v.sort_by(f64::total_cmp);
    let q = |q: f64| {
        let h = (v.len() - 1) as f64 * q;
        let lo = h.floor() as usize;
        let hi = (lo + 1).min(v.len() - 1);
        v[lo] + (h - lo as f64) * (v[hi] - v[lo])
    };
    Ok((q(q1), q(q2)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistrictAreaRow {
    pub district_id: i64,
    pub class: u8,
    pub area_km2: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistrictAreaTable {
    pub rows: Vec<DistrictAreaRow>,
}

impl DistrictAreaTable {
    pub fn to_csv(&self) -> String {
        let mut o = String::from("district_id,class,area_km2,fraction\n");
        for r in &self.rows {
            let _ = writeln!(o, "{},{},{},{}", r.district_id, r.class, r.area_km2, r.fraction);
        }
        o
    }

    pub fn total_area_km2(&self) -> f64 {
        self.rows.iter().map(|r| r.area_km2).sum()
    }
}

/// Class areas per district. Districts without any classified cell are
/// omitted; every listed district has one row per class.
pub fn district_area_table(rm: &RiskMap, districts: &GridRaster) -> Result<DistrictAreaTable, GeoError> {
    if !rm.classes.same_geometry(districts) {
        return Err(GeoError::Misaligned("district raster differs from risk map".into()));
    }
    let mut counts: BTreeMap<i64, [u64; 3]> = BTreeMap::new();
    for (&c, &d) in rm.classes.cells.iter().zip(&districts.cells) {
        if rm.classes.is_nodata(c) || districts.is_nodata(d) {
            continue;
        }
        if d.fract() != 0.0 || !d.is_finite() {
            return Err(GeoError::DistrictId(d));
        }
        let class = c as usize;
        if !(1..=3).contains(&class) || c.fract() != 0.0 {
            return Err(GeoError::InvalidRaster(format!("class value {c}")));
        }
        counts.entry(d as i64).or_default()[class - 1] += 1;
    }
    let cell_km2 = rm.classes.cellsize * rm.classes.cellsize / 1e6;
    let mut rows = Vec::new();
    for (district_id, c) in counts {
        let total: u64 = c.iter().sum();
        for (k, &n) in c.iter().enumerate() {
            rows.push(DistrictAreaRow {
                district_id,
                class: k as u8 + 1,
                area_km2: n as f64 * cell_km2,
                fraction: n as f64 / total as f64,
            });
        }
    }
    Ok(DistrictAreaTable { rows })
}

/// Settings of the synthetic landscape. Coefficients follow the canonical
/// feature order; zero coefficients mark noise features.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub nrows: usize,
    pub ncols: usize,
    pub cellsize: f64,
    /// Half-width of the box filter applied to white noise.
    pub smoothing_radius: usize,
    pub beta: Vec<f64>,
    pub intercept: f64,
    pub n_samples: usize,
    /// Regions are a `region_blocks × region_blocks` partition of the grid.
    pub region_blocks: usize,
    /// Region `k` has every feature shifted by `shift · (k − mean k)`.
    pub shift: f64,
    pub years: Vec<i32>,
    pub seed: u64,
}

/// Default coefficients by canonical feature name. `aspect` and
/// `pop_density` carry no signal.
pub const DEFAULT_BETA: [(&str, f64); 11] = [
    ("ndvi", -0.8),
    ("evi", 0.6),
    ("vci", -0.6),
    ("lst", 1.0),
    ("elevation", -0.7),
    ("slope", 0.7),
    ("aspect", 0.0),
    ("soil_moisture", -0.8),
    ("soc", 1.2),
    ("tree_cover", 1.4),
    ("pop_density", 0.0),
];

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            nrows: 64,
            ncols: 64,
            cellsize: 1000.0,
            smoothing_radius: 2,
            beta: DEFAULT_BETA.iter().map(|b| b.1).collect(),
            intercept: 0.0,
            n_samples: 4000,
            region_blocks: 2,
            shift: 0.0,
            years: vec![2024, 2025],
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<(), GeoError> {
        let bad = |m: String| Err(GeoError::InvalidParams(m));
        if self.nrows < 2 || self.ncols < 2 {
            return bad(format!("grid {}x{} is degenerate", self.nrows, self.ncols));
        }
        if self.beta.len() != CANONICAL_FEATURES.len() {
            return bad(format!(
                "{} coefficients for {} features",
                self.beta.len(),
                CANONICAL_FEATURES.len()
            ));
        }
        if !self.beta.iter().chain([&self.intercept, &self.shift, &self.cellsize]).all(|v| v.is_finite()) {
            return bad("non-finite coefficient".into());
        }
        if self.region_blocks == 0 || self.region_blocks > self.nrows.min(self.ncols) {
            return bad(format!("{} region blocks do not fit the grid", self.region_blocks));
        }
        if self.n_samples == 0 {
            return bad("n_samples must be positive".into());
        }
        if self.years.is_empty() {
            return bad("no years".into());
        }
        if self.cellsize <= 0.0 {
            return bad("cellsize must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Landscape {
    pub stack: RasterStack,
    pub truth: GridRaster,
    pub samples: Dataset,
}

pub fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Box filter of half-width `r` along one axis, averaging over the cells
/// that fall inside the grid.
fn box_blur(v: &[f64], nrows: usize, ncols: usize, r: usize, horizontal: bool) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for row in 0..nrows {
        for col in 0..ncols {
            let (pos, len) = if horizontal { (col, ncols) } else { (row, nrows) };
            let lo = pos.saturating_sub(r);
            let hi = (pos + r).min(len - 1);
            let mut s = 0.0;
            for k in lo..=hi {
                s += if horizontal { v[row * ncols + k] } else { v[k * ncols + col] };
            }
            out[row * ncols + col] = s / (hi - lo + 1) as f64;
        }
    }
    out
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    for x in v {
        *x = if sd > 0.0 { (*x - mean) / sd } else { 0.0 };
    }
}

/// Region index of a cell under the `blocks × blocks` layout.
fn region_of(row: usize, col: usize, p: &SynthParams) -> usize {
    let br = row * p.region_blocks / p.nrows;
    let bc = col * p.region_blocks / p.ncols;
    br * p.region_blocks + bc
}

/// Seeded landscape: smoothed, standardized noise per canonical feature,
/// truth `logistic(intercept + β·x)`, and Bernoulli labels at sampled cells
/// (distinct cells while the grid is large enough).
pub fn synth_landscape(p: &SynthParams) -> Result<Landscape, GeoError> {
    p.validate()?;
    let (nr, nc) = (p.nrows, p.ncols);
    let n = nr * nc;
    let template = GridRaster::new(nc, nr, 0.0, 0.0, p.cellsize, DEFAULT_NODATA, vec![0.0; n])?;
    let n_regions = p.region_blocks * p.region_blocks;
    let centre = (n_regions - 1) as f64 / 2.0;
    let region: Vec<usize> = (0..n).map(|i| region_of(i / nc, i % nc, p)).collect();

    let layers: Vec<Vec<f64>> = (0..CANONICAL_FEATURES.len())
        .map(|j| {
            let mut rng = seed::stream(p.seed, "synth-feature", j as u64);
            let white: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let mut v = box_blur(&white, nr, nc, p.smoothing_radius, true);
            v = box_blur(&v, nr, nc, p.smoothing_radius, false);
            standardize(&mut v);
            for (x, &k) in v.iter_mut().zip(&region) {
                *x += p.shift * (k as f64 - centre);
            }
            v
        })
        .collect();

    let truth: Vec<f64> = (0..n)
        .map(|i| {
            let z: f64 = p.intercept + layers.iter().zip(&p.beta).map(|(l, b)| b * l[i]).sum::<f64>();
            logistic(z)
        })
        .collect();
    let tree_cover = CANONICAL_FEATURES.iter().position(|f| f.0 == "tree_cover").expect("canonical");
    let stratum: Vec<f64> = layers[tree_cover]
        .iter()
        .map(|&t| if t > 0.0 { 42.0 } else { 71.0 })
        .collect();

    let mut rng = seed::stream(p.seed, "synth-sample", 0);
    let cells: Vec<usize> = if p.n_samples <= n {
        let mut c = index::sample(&mut rng, n, p.n_samples).into_vec();
        c.sort_unstable();
        c
    } else {
        (0..p.n_samples).map(|_| rng.random_range(0..n)).collect()
    };
    let samples = cells
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let (x, y) = template.cell_center(i / nc, i % nc);
            let year = p.years[rng.random_range(0..p.years.len())];
            let label = u8::from(rng.random_bool(truth[i]));
            Sample {
                id: format!("s{k:05}"),
                lon: x,
                lat: y,
                region_id: format!("R{}", region[i]),
                district_id: region[i].to_string(),
                stratum: Stratum::from_nlcd(stratum[i] as u16).expect("42 or 71"),
                year,
                label,
                values: layers.iter().map(|l| l[i]).collect(),
            }
        })
        .collect();

    let grid = |cells: Vec<f64>| GridRaster {
        cells,
        ..template.clone()
    };
    let stack = RasterStack::new(
        CANONICAL_FEATURES
            .iter()
            .zip(layers)
            .map(|((name, _), l)| (name.to_string(), grid(l)))
            .collect(),
        Some(grid(region.iter().map(|&k| k as f64).collect())),
        Some(grid(stratum)),
    )?;
    Ok(Landscape {
        stack,
        truth: grid(truth),
        samples: Dataset::new(FeatureSchema::canonical(), samples)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::{ForestParams, Node, Tree};
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest, ProptestConfig, Strategy};

    fn grid(ncols: usize, nrows: usize, cellsize: f64, cells: Vec<f64>) -> GridRaster {
        GridRaster::new(ncols, nrows, 0.0, 0.0, cellsize, DEFAULT_NODATA, cells).unwrap()
    }

    fn stump(threshold: f64, left: f64, right: f64) -> Forest {
        let t = Tree::from_nodes(
            vec![
                Node::Split { feature: 0, threshold, left: 1, right: 2, cover: 4 },
                Node::Leaf { value: left, cover: 2 },
                Node::Leaf { value: right, cover: 2 },
            ],
            2,
        )
        .unwrap();
        Forest::from_trees(
            vec![t],
            ForestParams { n_trees: 1, ..ForestParams::defaults(2) },
            FeatureSchema::from_names(&["a", "b"]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn ascii_round_trip() {
        let g = GridRaster::new(2, 2, 500.5, -20.0, 30.0, -9999.0, vec![0.1, -9999.0, 1e-17, 3.0]).unwrap();
        let text = write_ascii_grid(&g);
        assert!(text.starts_with("ncols 2\nnrows 2\nxllcorner 500.5\nyllcorner -20\ncellsize 30\nNODATA_value -9999\n"));
        assert!(text.contains("0.1 -9999\n"));
        assert_eq!(read_ascii_grid(&text).unwrap(), g);

        let short = "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\n1 2\n3\n";
        assert_eq!(
            read_ascii_grid(short).unwrap_err(),
            GeoError::CellCount { line: 8, expected: 4, found: 3 }
        );
        let swapped = "nrows 2\nncols 2\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\n1 2\n3 4\n";
        assert!(matches!(read_ascii_grid(swapped), Err(GeoError::Header { line: 1, .. })));
        let junk = "ncols 1\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\nx\n";
        assert!(matches!(read_ascii_grid(junk), Err(GeoError::Cell { line: 7, .. })));
        let zero = "ncols 1\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 0\nNODATA_value -9999\n1\n";
        assert!(matches!(read_ascii_grid(zero), Err(GeoError::InvalidRaster(_))));
    }

    #[test]
    fn prediction_cases() {
        let f = stump(0.5, 0.2, 0.9);
        let a = grid(2, 2, 1.0, vec![0.0, 1.0, 0.5, DEFAULT_NODATA]);
        let b = grid(2, 2, 1.0, vec![7.0; 4]);
        let stack = RasterStack::new(vec![("a".into(), a), ("b".into(), b.clone())], None, None).unwrap();
        let p = predict_raster(&f, &stack).unwrap();
        assert_eq!(p.cells, vec![0.2, 0.9, 0.2, DEFAULT_NODATA]);

        let c = grid(2, 2, 1.0, vec![3.0; 4]);
        let constant = RasterStack::new(vec![("a".into(), c), ("b".into(), b.clone())], None, None).unwrap();
        assert_eq!(predict_raster(&f, &constant).unwrap().cells, vec![0.9; 4]);

        let missing = RasterStack::new(vec![("b".into(), b.clone())], None, None).unwrap();
        assert_eq!(predict_raster(&f, &missing).unwrap_err(), GeoError::MissingLayer("a".into()));
        let shifted = GridRaster { xllcorner: 1.0, ..b.clone() };
        assert!(matches!(
            RasterStack::new(vec![("a".into(), b), ("b".into(), shifted)], None, None),
            Err(GeoError::Misaligned(_))
        ));
    }

    #[test]
    fn classification_cases() {
        let p = grid(4, 1, 1.0, vec![0.2, 0.5, 0.9, DEFAULT_NODATA]);
        let rm = classify_risk(&p, DEFAULT_CUTOFFS).unwrap();
        assert_eq!(rm.classes.cells, vec![1.0, 2.0, 3.0, DEFAULT_NODATA]);
        assert_eq!(risk_class(2.0 / 3.0, DEFAULT_CUTOFFS), 3);
        assert_eq!(risk_class(0.4, (0.4, 0.8)), 2);
        let none = grid(2, 1, 1.0, vec![DEFAULT_NODATA; 2]);
        assert_eq!(classify_risk(&none, DEFAULT_CUTOFFS).unwrap().classes.cells, none.cells);
        assert!(classify_risk(&p, (0.5, 0.5)).is_err());
        assert!(classify_risk(&p, (-0.1, 0.5)).is_err());

        let q = grid(5, 1, 1.0, vec![0.1, 0.2, 0.3, 0.4, 0.5]);
        let (c1, c2) = quantile_cutoffs(&q, (0.25, 0.75)).unwrap();
        assert!((c1 - 0.2).abs() < 1e-15 && (c2 - 0.4).abs() < 1e-15);
    }

    #[test]
    fn area_table_fixture() {
        let p = grid(2, 2, 1000.0, vec![0.9, 0.8, 0.5, 0.1]);
        let rm = classify_risk(&p, DEFAULT_CUTOFFS).unwrap();
        assert_eq!(rm.classes.cells, vec![3.0, 3.0, 2.0, 1.0]);
        let t = district_area_table(&rm, &grid(2, 2, 1000.0, vec![7.0; 4])).unwrap();
        let got: Vec<(i64, u8, f64, f64)> = t.rows.iter().map(|r| (r.district_id, r.class, r.area_km2, r.fraction)).collect();
        assert_eq!(got, vec![(7, 1, 1.0, 0.25), (7, 2, 1.0, 0.25), (7, 3, 2.0, 0.5)]);
        assert_eq!(
            t.to_csv(),
            "district_id,class,area_km2,fraction\n7,1,1,0.25\n7,2,1,0.25\n7,3,2,0.5\n"
        );

        let d = grid(2, 2, 1000.0, vec![1.0, 2.0, 1.0, 2.0]);
        let masked = GridRaster { cells: vec![0.9, DEFAULT_NODATA, 0.5, DEFAULT_NODATA], ..p };
        let t = district_area_table(&classify_risk(&masked, DEFAULT_CUTOFFS).unwrap(), &d).unwrap();
        assert!(t.rows.iter().all(|r| r.district_id == 1));
        assert!(district_area_table(&rm, &grid(2, 2, 1000.0, vec![1.5; 4])).is_err());
        assert!(district_area_table(&rm, &grid(2, 2, 500.0, vec![1.0; 4])).is_err());
    }

    #[test]
    fn synth_cases() {
        let small = SynthParams { nrows: 24, ncols: 20, n_samples: 300, seed: 11, ..Default::default() };
        let a = synth_landscape(&small).unwrap();
        assert_eq!(a, synth_landscape(&small).unwrap());
        assert_eq!(a.samples.len(), 300);
        assert_eq!(a.stack.layers().len(), 11);
        let regions: std::collections::BTreeSet<&str> = a.samples.samples().iter().map(|s| s.region_id.as_str()).collect();
        assert_eq!(regions.len(), 4);
        for (_, g) in a.stack.layers() {
            assert_eq!(read_ascii_grid(&write_ascii_grid(g)).unwrap(), *g);
        }

        let flat = SynthParams { beta: vec![0.0; 11], intercept: 0.0, ..small.clone() };
        assert!(synth_landscape(&flat).unwrap().truth.cells.iter().all(|&p| p == 0.5));

        for s in a.samples.samples() {
            let (r, c) = a.truth.cell_at(s.lon, s.lat).unwrap();
            assert_eq!(a.truth.cell_center(r, c), (s.lon, s.lat));
        }
        assert_eq!(a.truth.cell_at(-1.0, 0.0), None);

        let lst = a.stack.layer("lst").unwrap();
        assert!(pearson(&lst.cells, &a.truth.cells) > 0.0);

        assert!(synth_landscape(&SynthParams { nrows: 1, ..small.clone() }).is_err());
        assert!(synth_landscape(&SynthParams { beta: vec![1.0], ..small }).is_err());
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn area_fractions_sum_to_one(
            (ncols, nrows, cells) in (1usize..8, 1usize..8).prop_flat_map(|(c, r)| {
                (prop::strategy::Just(c), prop::strategy::Just(r),
                 prop::collection::vec((prop::option::weighted(0.8, 0.0f64..=1.0), 0u8..3), c * r))
            }),
            cellsize in 10.0f64..2000.0,
        ) {
            let p = GridRaster::new(ncols, nrows, 0.0, 0.0, cellsize, DEFAULT_NODATA,
                cells.iter().map(|c| c.0.unwrap_or(DEFAULT_NODATA)).collect()).unwrap();
            let d = GridRaster { cells: cells.iter().map(|c| f64::from(c.1)).collect(), ..p.clone() };
            let rm = classify_risk(&p, DEFAULT_CUTOFFS).unwrap();
            let t = district_area_table(&rm, &d).unwrap();
            let mut by_district: BTreeMap<i64, f64> = BTreeMap::new();
            for r in &t.rows {
                *by_district.entry(r.district_id).or_default() += r.fraction;
            }
            for s in by_district.values() {
                prop_assert!((s - 1.0).abs() <= 1e-9);
            }
            let valid = p.valid_values().count() as f64;
            prop_assert!((t.total_area_km2() - valid * cellsize * cellsize / 1e6).abs() <= 1e-9 * valid.max(1.0) * cellsize * cellsize / 1e6);
            prop_assert_eq!(read_ascii_grid(&write_ascii_grid(&p)).unwrap(), p);
        }
    }
}
