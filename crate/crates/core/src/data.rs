//! Samples, datasets and their delimited-text exchange format.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::seed;

/// Metadata columns every samples file must carry, in canonical order.
pub const METADATA_COLUMNS: [&str; 8] = [
    "id",
    "lon",
    "lat",
    "region_id",
    "district_id",
    "stratum",
    "year",
    "label",
];

/// Canonical predictor names and units, in canonical order.
pub const CANONICAL_FEATURES: [(&str, &str); 11] = [
    ("ndvi", "unitless"),
    ("evi", "unitless"),
    ("vci", "unitless"),
    ("lst", "K"),
    ("elevation", "m"),
    ("slope", "degrees"),
    ("aspect", "degrees"),
    ("soil_moisture", "volumetric fraction"),
    ("soc", "g/kg"),
    ("tree_cover", "percent"),
    ("pop_density", "persons/km2"),
];

/// Aspect value used for flat terrain.
pub const FLAT_ASPECT: f64 = -1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("feature schema must contain at least one feature")]
    EmptySchema,
    #[error("duplicate feature name `{0}`")]
    DuplicateFeature(String),
    #[error("missing mandatory column `{0}`")]
    MissingColumn(String),
    #[error("duplicate column `{0}` in header")]
    DuplicateColumn(String),
    #[error("row {row}, column `{column}`: {message}")]
    Cell {
        row: usize,
        column: String,
        message: String,
    },
    #[error("row {row}: expected {expected} fields, found {found}")]
    FieldCount {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("csv: {0}")]
    Csv(String),
    #[error("sample `{id}`: {message}")]
    InvalidSample { id: String, message: String },
    #[error("dataset is empty")]
    Empty,
    #[error("datasets do not share a feature schema")]
    SchemaMismatch,
    #[error("insufficient absence candidates: need {needed}, have {available}")]
    InsufficientCandidates { needed: usize, available: usize },
    #[error("unknown stratum `{0}`")]
    UnknownStratum(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Feature {
    pub name: String,
    pub unit: String,
}

/// Ordered, uniquely named predictor list shared by a dataset and any model
/// trained on it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FeatureSchema {
    features: Vec<Feature>,
}

impl FeatureSchema {
    pub fn new(features: Vec<Feature>) -> Result<Self, DataError> {
        if features.is_empty() {
            return Err(DataError::EmptySchema);
        }
        let mut seen = HashSet::new();
        for f in &features {
            if !seen.insert(f.name.as_str()) {
                return Err(DataError::DuplicateFeature(f.name.clone()));
            }
        }
        Ok(Self { features })
    }

    /// Builds a schema from names; canonical names get their canonical unit.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self, DataError> {
        Self::new(
            names
                .iter()
                .map(|n| Feature {
                    name: n.as_ref().to_string(),
                    unit: canonical_unit(n.as_ref()).unwrap_or("").to_string(),
                })
                .collect(),
        )
    }

    /// The eleven predictors of the wildfire model.
    pub fn canonical() -> Self {
        let names: Vec<&str> = CANONICAL_FEATURES.iter().map(|(n, _)| *n).collect();
        Self::from_names(&names).expect("canonical schema is valid")
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.features.iter().map(|f| f.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn name(&self, i: usize) -> &str {
        &self.features[i].name
    }

    /// Short digest of the ordered feature names.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for f in &self.features {
            h.update(f.name.as_bytes());
            h.update([0u8]);
        }
        hex::encode(&h.finalize()[..8])
    }
}

pub fn canonical_unit(name: &str) -> Option<&'static str> {
    CANONICAL_FEATURES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, u)| *u)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stratum {
    Forest,
    Grassland,
}

impl Stratum {
    /// NLCD 41/42/43 are forest, 71 is grassland; every other code is rejected.
    pub fn from_nlcd(code: u16) -> Option<Stratum> {
        match code {
            41..=43 => Some(Stratum::Forest),
            71 => Some(Stratum::Grassland),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stratum::Forest => "forest",
            Stratum::Grassland => "grassland",
        }
    }
}

impl fmt::Display for Stratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stratum {
    type Err = DataError;

    /// Accepts `forest` / `grassland` (any case) or an NLCD class code.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("forest") {
            return Ok(Stratum::Forest);
        }
        if t.eq_ignore_ascii_case("grassland") {
            return Ok(Stratum::Grassland);
        }
        t.parse::<u16>()
            .ok()
            .and_then(Stratum::from_nlcd)
            .ok_or_else(|| DataError::UnknownStratum(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub lon: f64,
    pub lat: f64,
    pub region_id: String,
    pub district_id: String,
    pub stratum: Stratum,
    pub year: i32,
    /// 1 = fire, 0 = absence.
    pub label: u8,
    pub values: Vec<f64>,
}

impl Sample {
    fn check(&self, schema: &FeatureSchema) -> Result<(), DataError> {
        let bad = |message: String| DataError::InvalidSample {
            id: self.id.clone(),
            message,
        };
        if self.values.len() != schema.len() {
            return Err(bad(format!(
                "{} values for a schema of {} features",
                self.values.len(),
                schema.len()
            )));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(bad(format!("non-finite value for `{}`", schema.name(i))));
        }
        if self.label > 1 {
            return Err(bad(format!("label {} outside {{0,1}}", self.label)));
        }
        if self.year <= 0 {
            return Err(bad(format!("year {} must be positive", self.year)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    schema: FeatureSchema,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(schema: FeatureSchema, samples: Vec<Sample>) -> Result<Self, DataError> {
        for s in &samples {
            s.check(&schema)?;
        }
        Ok(Self { schema, samples })
    }

    pub fn empty(schema: FeatureSchema) -> Self {
        Self {
            schema,
            samples: Vec::new(),
        }
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn positives(&self) -> usize {
        self.samples.iter().filter(|s| s.label == 1).count()
    }

    /// Subset of the samples for which `keep` holds, order preserved.
    pub fn filter<F: FnMut(&Sample) -> bool>(&self, mut keep: F) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
        }
    }

    /// The same samples restricted to the features of `schema`, in its order.
    pub fn project(&self, schema: &FeatureSchema) -> Result<Dataset, DataError> {
        let idx: Vec<usize> = schema
            .names()
            .map(|n| {
                self.schema
                    .index_of(n)
                    .ok_or_else(|| DataError::MissingColumn(n.to_string()))
            })
            .collect::<Result<_, _>>()?;
        Ok(Dataset {
            schema: schema.clone(),
            samples: self
                .samples
                .iter()
                .map(|s| Sample {
                    values: idx.iter().map(|&i| s.values[i]).collect(),
                    ..s.clone()
                })
                .collect(),
        })
    }

    /// Same samples with every label complemented.
    pub fn with_flipped_labels(&self) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            samples: self
                .samples
                .iter()
                .map(|s| Sample {
                    label: 1 - s.label,
                    ..s.clone()
                })
                .collect(),
        }
    }
}

/// Fraction of label-1 samples.
pub fn positive_rate(d: &Dataset) -> Result<f64, DataError> {
    if d.is_empty() {
        return Err(DataError::Empty);
    }
    Ok(d.positives() as f64 / d.len() as f64)
}

pub fn stratify(d: &Dataset, stratum: Stratum) -> Dataset {
    d.filter(|s| s.stratum == stratum)
}

/// Presence samples followed by exactly as many absence candidates drawn
/// uniformly without replacement. Candidates keep their input order.
pub fn balanced_absence_sample(
    presence: &Dataset,
    candidates: &Dataset,
    seed: u64,
) -> Result<Dataset, DataError> {
    if presence.schema != candidates.schema {
        return Err(DataError::SchemaMismatch);
    }
    if let Some(s) = presence.samples.iter().find(|s| s.label != 1) {
        return Err(DataError::InvalidSample {
            id: s.id.clone(),
            message: "presence set contains an absence label".into(),
        });
    }
    if let Some(s) = candidates.samples.iter().find(|s| s.label != 0) {
        return Err(DataError::InvalidSample {
            id: s.id.clone(),
            message: "absence candidate carries a fire label".into(),
        });
    }
    let needed = presence.len();
    if candidates.len() < needed {
        return Err(DataError::InsufficientCandidates {
            needed,
            available: candidates.len(),
        });
    }
    let mut rng = seed::stream(seed, "absence-sample", 0);
    let mut chosen = index::sample(&mut rng, candidates.len(), needed).into_vec();
    chosen.sort_unstable();

    let mut samples = presence.samples.clone();
    samples.extend(chosen.into_iter().map(|i| candidates.samples[i].clone()));
    Ok(Dataset {
        schema: presence.schema.clone(),
        samples,
    })
}

fn cell_err(row: usize, column: &str, message: impl Into<String>) -> DataError {
    DataError::Cell {
        row,
        column: column.to_string(),
        message: message.into(),
    }
}

fn parse_f64_cell(raw: &str, row: usize, column: &str) -> Result<f64, DataError> {
    let t = raw.trim();
    if t.is_empty() {
        return Err(cell_err(row, column, "missing value"));
    }
    let v: f64 = t
        .parse()
        .map_err(|_| cell_err(row, column, format!("`{t}` is not a number")))?;
    if !v.is_finite() {
        return Err(cell_err(row, column, format!("`{t}` is not finite")));
    }
    Ok(v)
}

/// Parses a samples table. Mandatory metadata columns may appear anywhere in
/// the header; every other column is a feature, in header order.
///
/// Rows are numbered from 1 with the header as row 1, so a reported row
/// matches the line number of a file without embedded newlines.
pub fn parse_samples_csv(text: &str) -> Result<Dataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| DataError::Csv(e.to_string()))?,
        None => return Err(DataError::MissingColumn(METADATA_COLUMNS[0].into())),
    };
    let header: Vec<String> = header.iter().map(|h| h.trim().to_string()).collect();
    let mut seen = HashSet::new();
    for h in &header {
        if !seen.insert(h.as_str()) {
            return Err(DataError::DuplicateColumn(h.clone()));
        }
    }
    let mut meta_idx = [0usize; 8];
    for (k, name) in METADATA_COLUMNS.iter().enumerate() {
        meta_idx[k] = header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn((*name).to_string()))?;
    }
    let feature_cols: Vec<usize> = (0..header.len())
        .filter(|i| !meta_idx.contains(i))
        .collect();
    let schema = FeatureSchema::from_names(
        &feature_cols
            .iter()
            .map(|&i| header[i].as_str())
            .collect::<Vec<_>>(),
    )?;
    let [c_id, c_lon, c_lat, c_region, c_district, c_stratum, c_year, c_label] = meta_idx;

    let mut samples = Vec::new();
    for (k, rec) in records.enumerate() {
        let row = k + 2;
        let rec = rec.map_err(|e| DataError::Csv(e.to_string()))?;
        if rec.len() == 1 && rec.get(0).is_some_and(|c| c.trim().is_empty()) {
            continue;
        }
        if rec.len() != header.len() {
            return Err(DataError::FieldCount {
                row,
                expected: header.len(),
                found: rec.len(),
            });
        }
        let field = |i: usize| rec.get(i).unwrap_or("");
        let label_raw = field(c_label).trim();
        let label = match label_raw {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(cell_err(
                    row,
                    "label",
                    format!("`{other}` is not a label in {{0,1}}"),
                ))
            }
        };
        let year: i32 = field(c_year)
            .trim()
            .parse()
            .map_err(|_| cell_err(row, "year", format!("`{}` is not an integer", field(c_year))))?;
        if year <= 0 {
            return Err(cell_err(row, "year", "year must be positive"));
        }
        let stratum: Stratum = field(c_stratum).parse().map_err(|_| {
            cell_err(
                row,
                "stratum",
                format!("unknown stratum `{}`", field(c_stratum)),
            )
        })?;
        let values = feature_cols
            .iter()
            .map(|&i| parse_f64_cell(field(i), row, &header[i]))
            .collect::<Result<Vec<_>, _>>()?;
        samples.push(Sample {
            id: field(c_id).trim().to_string(),
            lon: parse_f64_cell(field(c_lon), row, "lon")?,
            lat: parse_f64_cell(field(c_lat), row, "lat")?,
            region_id: field(c_region).trim().to_string(),
            district_id: field(c_district).trim().to_string(),
            stratum,
            year,
            label,
            values,
        });
    }
    Dataset::new(schema, samples)
}

/// Writes the canonical column layout: metadata columns then features.
/// Reals use the shortest representation that parses back exactly.
pub fn write_samples_csv(d: &Dataset) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let header: Vec<&str> = METADATA_COLUMNS
        .iter()
        .copied()
        .chain(d.schema.names())
        .collect();
    w.write_record(&header).expect("in-memory write");
    for s in &d.samples {
        let mut rec = vec![
            s.id.clone(),
            s.lon.to_string(),
            s.lat.to_string(),
            s.region_id.clone(),
            s.district_id.clone(),
            s.stratum.to_string(),
            s.year.to_string(),
            s.label.to_string(),
        ];
        rec.extend(s.values.iter().map(|v| v.to_string()));
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 output")
}
