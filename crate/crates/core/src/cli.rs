//! The `firerisk` command-line front end.
//!
//! Every subcommand accepts the same option set, which can also be given in a
//! TOML file via `--config` (keys are the flag names without dashes, e.g.
//! `max-depth = 8`). Flags override the file. Each run writes its outputs
//! plus a `manifest.json` into `--out-dir`.
//!
//! Exit codes: 0 success, 1 computation failure, 2 usage or input failure.
//! Failures are reported on stderr as one JSON object.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::data::{self, Dataset, Stratum};
use crate::forest::{self, Forest, ForestParams};
use crate::geodata::{self, RasterStack, SynthParams};
use crate::metrics::{self, BootstrapConfig, EvalConfig};
use crate::shap::{self, ForcePlot};
use crate::validation::{self, ModelMode, SplitPlan, ValidationConfig};
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "firerisk", version, about = "Wildfire susceptibility modelling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a random forest on a samples CSV.
    Train(Options),
    /// Score a labelled dataset (or a label,score CSV) and write a metric report.
    Evaluate(Options),
    /// Spatial-transfer or temporal-split validation.
    Validate(Options),
    /// Shapley importance, beeswarm and force-plot exports.
    Explain(Options),
    /// Predict over a raster stack, classify risk and tabulate district areas.
    Zonate(Options),
    /// Generate a synthetic landscape and sampled dataset.
    Synth(Options),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Evaluate(_) => "evaluate",
            Command::Validate(_) => "validate",
            Command::Explain(_) => "explain",
            Command::Zonate(_) => "zonate",
            Command::Synth(_) => "synth",
        }
    }

    fn options(&self) -> &Options {
        match self {
            Command::Train(o)
            | Command::Evaluate(o)
            | Command::Validate(o)
            | Command::Explain(o)
            | Command::Zonate(o)
            | Command::Synth(o) => o,
        }
    }
}

/// Options shared by all subcommands; unset values fall back to the config
/// file and then to built-in defaults.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct Options {
    /// TOML file with default option values.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Samples CSV, label/score CSV (evaluate) or raster stack directory (zonate).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Forest JSON file.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub trees: Option<usize>,
    #[arg(long)]
    pub max_depth: Option<usize>,
    #[arg(long)]
    pub mtry: Option<usize>,
    #[arg(long)]
    pub min_leaf: Option<usize>,
    /// Train every tree on all rows instead of a bootstrap sample.
    #[arg(long)]
    pub no_bagging: bool,
    /// Classification threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// `c1,c2` probability cutoffs or `quantile:q1,q2`.
    #[arg(long)]
    pub cutoffs: Option<String>,
    /// Reliability bins.
    #[arg(long)]
    pub bins: Option<usize>,
    /// Bootstrap resamples; 0 disables intervals.
    #[arg(long)]
    pub bootstrap: Option<usize>,
    /// Bootstrap interval level.
    #[arg(long)]
    pub level: Option<f64>,
    /// `logo` or `train=A,B;test=C` folds separated by `|`.
    #[arg(long)]
    pub plan: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub train_years: Option<Vec<i32>>,
    #[arg(long, value_delimiter = ',')]
    pub test_years: Option<Vec<i32>>,
    /// Keep only samples of this stratum (`forest`, `grassland` or an NLCD code).
    #[arg(long)]
    pub stratum: Option<String>,
    /// Validate with one model shared by all folds.
    #[arg(long)]
    pub shared_model: bool,
    /// Sample to decompose in the force-plot export (default: first sample).
    #[arg(long)]
    pub sample_id: Option<String>,
    /// Explain at most this many samples (the first ones).
    #[arg(long)]
    pub limit: Option<usize>,
    /// Synthetic grid side length.
    #[arg(long)]
    pub grid: Option<usize>,
    /// Synthetic sample count.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Synthetic region blocks per side.
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Synthetic covariate shift between regions.
    #[arg(long)]
    pub shift: Option<f64>,
}

macro_rules! overlay {
    ($flags:expr, $file:expr, [$($opt:ident),*], [$($flag:ident),*]) => {
        Options {
            config: $flags.config.clone(),
            $($opt: $flags.$opt.clone().or($file.$opt),)*
            $($flag: $flags.$flag || $file.$flag,)*
        }
    };
}

impl Options {
    /// Flags over file values.
    pub fn overlay(&self, file: Options) -> Options {
        overlay!(
            self,
            file,
            [
                input, model, out_dir, seed, threads, trees, max_depth, mtry, min_leaf, threshold, cutoffs, bins,
                bootstrap, level, plan, train_years, test_years, stratum, sample_id, limit, grid, samples, blocks,
                shift
            ],
            [no_bagging, shared_model]
        )
    }

    fn resolve(&self) -> Result<Options> {
        match &self.config {
            None => Ok(self.clone()),
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let file: Options = toml::from_str(&text).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?;
                Ok(self.overlay(file))
            }
        }
    }

    fn need<'a, T>(&self, v: &'a Option<T>, flag: &str) -> Result<&'a T> {
        v.as_ref().ok_or_else(|| Error::Usage(format!("missing --{flag}")))
    }

    fn out_dir(&self) -> Result<&Path> {
        Ok(self.need(&self.out_dir, "out-dir")?.as_path())
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn forest_params(&self, n_features: usize) -> ForestParams {
        let d = ForestParams::defaults(n_features);
        ForestParams {
            n_trees: self.trees.unwrap_or(d.n_trees),
            max_depth: self.max_depth.unwrap_or(d.max_depth),
            min_samples_leaf: self.min_leaf.unwrap_or(d.min_samples_leaf),
            mtry: self.mtry.unwrap_or(d.mtry),
            bootstrap: !self.no_bagging,
            seed: self.seed(),
        }
    }

    fn eval_config(&self) -> EvalConfig {
        let d = EvalConfig::default();
        let resamples = self.bootstrap.unwrap_or(BootstrapConfig::default().resamples);
        EvalConfig {
            threshold: self.threshold.unwrap_or(d.threshold),
            n_bins: self.bins.unwrap_or(d.n_bins),
            bootstrap: (resamples > 0).then(|| BootstrapConfig {
                resamples,
                level: self.level.unwrap_or(BootstrapConfig::default().level),
                seed: crate::seed::derive_seed(self.seed(), "bootstrap", 0),
                threshold: self.threshold.unwrap_or(d.threshold),
            }),
            ..d
        }
    }
}

/// Outputs, digests and bookkeeping collected while a command runs.
struct Run {
    command: &'static str,
    out_dir: PathBuf,
    config: Value,
    inputs: Vec<(String, String)>,
    outputs: Vec<String>,
    extra: BTreeMap<String, Value>,
    warnings: Vec<String>,
}

impl Run {
    fn new(command: &'static str, out_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        Ok(Self {
            command,
            out_dir: out_dir.to_path_buf(),
            config: Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
            extra: BTreeMap::new(),
            warnings: Vec::new(),
        })
    }

    fn read(&mut self, path: &Path) -> Result<String> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.inputs.push((path.display().to_string(), hex::encode(Sha256::digest(&bytes))));
        String::from_utf8(bytes).map_err(|_| Error::Io {
            path: path.display().to_string(),
            message: "not valid UTF-8".into(),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.out_dir.join(name);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn warn(&mut self, message: String) {
        log::warn!("{message}");
        self.warnings.push(message);
    }

    fn finish(self, started: Instant) -> Result<()> {
        let manifest = json!({
            "tool": "firerisk",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "config": self.config,
            "inputs": self.inputs.iter().map(|(p, d)| json!({"path": p, "sha256": d})).collect::<Vec<_>>(),
            "details": self.extra,
            "warnings": self.warnings,
            "outputs": self.outputs,
            "elapsed_ms": started.elapsed().as_millis() as u64,
        });
        let path = self.out_dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

fn load_samples(run: &mut Run, o: &Options) -> Result<Dataset> {
    let path = o.need(&o.input, "input")?;
    let d = data::parse_samples_csv(&run.read(path)?)?;
    match &o.stratum {
        None => Ok(d),
        Some(s) => {
            let stratum: Stratum = s.parse()?;
            Ok(data::stratify(&d, stratum))
        }
    }
}

fn load_model(run: &mut Run, o: &Options) -> Result<Forest> {
    let path = o.need(&o.model, "model")?;
    Ok(Forest::from_json(&run.read(path)?)?)
}

fn params_json(p: &ForestParams) -> Value {
    serde_json::to_value(p).expect("params serialize")
}

fn eval_json(c: &EvalConfig) -> Value {
    json!({
        "threshold": c.threshold,
        "bins": c.n_bins,
        "k_grid": c.k_grid,
        "bootstrap": c.bootstrap.as_ref().map(|b| json!({"resamples": b.resamples, "level": b.level, "seed": b.seed})),
        "interval_metrics": c.interval_metrics.iter().map(|m| m.name()).collect::<Vec<_>>(),
    })
}

fn cmd_train(o: &Options, run: &mut Run) -> Result<()> {
    let d = load_samples(run, o)?;
    let params = o.forest_params(d.schema().len());
    run.config = json!({"input": o.input, "stratum": o.stratum, "forest": params_json(&params)});
    run.extra.insert("samples".into(), json!(d.len()));
    run.extra.insert("positives".into(), json!(d.positives()));
    run.extra.insert("schema_fingerprint".into(), json!(d.schema().fingerprint()));
    let f = forest::train_forest(&d, &params)?;
    run.write("forest.json", &f.to_json())
}

/// `label,score` rows, header required.
fn parse_scores_csv(text: &str) -> Result<(Vec<u8>, Vec<f64>)> {
    let bad = |m: String| Error::Usage(format!("scores file: {m}"));
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    let col = |name: &str| header.iter().position(|h| h == name).ok_or_else(|| bad(format!("missing column `{name}`")));
    let (li, si) = (col("label")?, col("score")?);
    let (mut labels, mut scores) = (Vec::new(), Vec::new());
    for (k, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let row = k + 2;
        labels.push(
            rec.get(li)
                .and_then(|v| v.trim().parse().ok())
                .filter(|&l: &u8| l <= 1)
                .ok_or_else(|| bad(format!("row {row}: label must be 0 or 1")))?,
        );
        scores.push(
            rec.get(si)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| bad(format!("row {row}: bad score")))?,
        );
    }
    Ok((labels, scores))
}

fn cmd_evaluate(o: &Options, run: &mut Run) -> Result<()> {
    let cfg = o.eval_config();
    let (labels, scores) = match &o.model {
        Some(_) => {
            let f = load_model(run, o)?;
            let d = load_samples(run, o)?.project(f.schema())?;
            (d.labels(), f.predict_dataset(&d)?)
        }
        None => parse_scores_csv(&run.read(o.need(&o.input, "input")?)?)?,
    };
    run.config = json!({"input": o.input, "model": o.model, "stratum": o.stratum, "eval": eval_json(&cfg)});
    let report = metrics::evaluate(&labels, &scores, &cfg)?;
    for w in &report.warnings {
        run.warn(w.clone());
    }
    run.write("report.txt", &report.to_text())
}

fn cmd_validate(o: &Options, run: &mut Run) -> Result<()> {
    let d = load_samples(run, o)?;
    let params = o.forest_params(d.schema().len());
    let plan = match (&o.plan, &o.train_years, &o.test_years) {
        (Some(spec), None, None) => {
            let mut regions: Vec<String> = d.samples().iter().map(|s| s.region_id.clone()).collect();
            regions.sort();
            regions.dedup();
            SplitPlan::parse_spatial(spec, &regions)?
        }
        (None, Some(tr), Some(te)) => SplitPlan::temporal(tr, te),
        _ => {
            return Err(Error::Usage(
                "give either --plan or both --train-years and --test-years".into(),
            ))
        }
    };
    let cfg = ValidationConfig {
        eval: o.eval_config(),
        mode: if o.shared_model { ModelMode::Shared } else { ModelMode::Retrain },
    };
    run.config = json!({
        "input": o.input,
        "stratum": o.stratum,
        "plan": plan.to_string(),
        "mode": format!("{:?}", cfg.mode).to_lowercase(),
        "forest": params_json(&params),
        "eval": eval_json(&cfg.eval),
    });
    let result = validation::run_validation(&d, &plan, &params, &cfg)?;
    let folds: Vec<Value> = result
        .folds
        .iter()
        .map(|f| {
            json!({
                "fold": f.fold,
                "train": f.train_size,
                "test": f.test_size,
                "dropped": f.dropped,
                "model_seed": f.model_seed,
            })
        })
        .collect();
    run.extra.insert("folds".into(), Value::Array(folds));
    for f in &result.folds {
        for w in &f.report.warnings {
            run.warn(format!("fold {}: {w}", f.fold));
        }
        run.write(&format!("fold_{}.txt", f.fold), &f.report.to_text())?;
    }
    run.write("aggregate.txt", &result.aggregate.to_text())
}

/// False for gaps above tolerance and for NaN.
fn efficient(gap: f64) -> bool {
    gap.abs() <= 1e-9
}

fn cmd_explain(o: &Options, run: &mut Run) -> Result<()> {
    let f = load_model(run, o)?;
    let mut d = load_samples(run, o)?.project(f.schema())?;
    if let Some(limit) = o.limit {
        let mut k = 0;
        d = d.filter(|_| {
            k += 1;
            k <= limit
        });
    }
    run.config = json!({"input": o.input, "model": o.model, "stratum": o.stratum, "limit": o.limit, "sample_id": o.sample_id});
    let ex = shap::explain_dataset(&f, &d)?;
    if let Some((i, e)) = ex
        .iter()
        .enumerate()
        .find(|(_, e)| !efficient(e.efficiency_gap()))
    {
        return Err(Error::Check(format!(
            "efficiency check failed for sample `{}` (gap {})",
            d.samples()[i].id,
            e.efficiency_gap()
        )));
    }
    let names: Vec<String> = f.schema().names().map(str::to_string).collect();
    let table = shap::importance_from_explanations(&names, &ex)?;
    run.write("importance.csv", &table.to_csv())?;
    let bees = shap::beeswarm_from_explanations(&f, &d, &ex);
    run.write("beeswarm.csv", &shap::beeswarm_to_csv(&bees))?;
    let idx = match &o.sample_id {
        None => 0,
        Some(id) => d
            .samples()
            .iter()
            .position(|s| &s.id == id)
            .ok_or_else(|| Error::Usage(format!("sample `{id}` not found")))?,
    };
    let force = ForcePlot::from_explanation(&names, &ex[idx]);
    run.write("force.csv", &force.to_csv(&d.samples()[idx].id))?;
    run.extra.insert("explained".into(), json!(d.len()));
    Ok(())
}

enum CutoffMode {
    Fixed(f64, f64),
    Quantile(f64, f64),
}

fn parse_cutoffs(s: &str) -> Result<CutoffMode> {
    let bad = || Error::Usage(format!("bad --cutoffs `{s}`"));
    let (quantile, list) = match s.strip_prefix("quantile:") {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let (a, b) = list.split_once(',').ok_or_else(bad)?;
    let a: f64 = a.trim().parse().map_err(|_| bad())?;
    let b: f64 = b.trim().parse().map_err(|_| bad())?;
    Ok(if quantile { CutoffMode::Quantile(a, b) } else { CutoffMode::Fixed(a, b) })
}

fn cmd_zonate(o: &Options, run: &mut Run) -> Result<()> {
    let f = load_model(run, o)?;
    let dir = o.need(&o.input, "input")?;
    let stack = RasterStack::read_dir(dir, f.schema())?;
    for (name, _) in stack.layers() {
        run.read(&dir.join(format!("{name}.asc")))?;
    }
    let mode = match &o.cutoffs {
        Some(c) => parse_cutoffs(c)?,
        None => CutoffMode::Fixed(geodata::DEFAULT_CUTOFFS.0, geodata::DEFAULT_CUTOFFS.1),
    };
    let p = geodata::predict_raster(&f, &stack)?;
    let cutoffs = match mode {
        CutoffMode::Fixed(a, b) => (a, b),
        CutoffMode::Quantile(a, b) => geodata::quantile_cutoffs(&p, (a, b))?,
    };
    run.config = json!({"input": o.input, "model": o.model, "cutoffs": o.cutoffs, "resolved_cutoffs": [cutoffs.0, cutoffs.1]});
    let rm = geodata::classify_risk(&p, cutoffs)?;
    run.write("probability.asc", &geodata::write_ascii_grid(&rm.probability))?;
    run.write("classes.asc", &geodata::write_ascii_grid(&rm.classes))?;
    match stack.district() {
        Some(d) => {
            run.read(&dir.join(format!("{}.asc", geodata::DISTRICT_LAYER)))?;
            let table = geodata::district_area_table(&rm, d)?;
            run.write("district_areas.csv", &table.to_csv())?;
        }
        None => run.warn("stack has no district layer; area table skipped".into()),
    }
    Ok(())
}

fn cmd_synth(o: &Options, run: &mut Run) -> Result<()> {
    let d = SynthParams::default();
    let p = SynthParams {
        nrows: o.grid.unwrap_or(d.nrows),
        ncols: o.grid.unwrap_or(d.ncols),
        n_samples: o.samples.unwrap_or(d.n_samples),
        region_blocks: o.blocks.unwrap_or(d.region_blocks),
        shift: o.shift.unwrap_or(d.shift),
        seed: o.seed(),
        ..d
    };
    run.config = json!({
        "grid": [p.nrows, p.ncols],
        "cellsize": p.cellsize,
        "smoothing_radius": p.smoothing_radius,
        "beta": data::CANONICAL_FEATURES.iter().zip(&p.beta).map(|((n, _), b)| (n.to_string(), *b)).collect::<BTreeMap<_, _>>(),
        "intercept": p.intercept,
        "samples": p.n_samples,
        "blocks": p.region_blocks,
        "shift": p.shift,
        "years": p.years,
        "seed": p.seed,
    });
    let l = geodata::synth_landscape(&p)?;
    for file in l.stack.write_dir(&run.out_dir.join("stack"))? {
        run.outputs.push(format!("stack/{file}"));
    }
    run.write("truth.asc", &geodata::write_ascii_grid(&l.truth))?;
    run.write("samples.csv", &data::write_samples_csv(&l.samples))?;
    Ok(())
}

fn execute(cmd: &Command) -> Result<()> {
    let started = Instant::now();
    let o = cmd.options().resolve()?;
    let mut run = Run::new(cmd.name(), o.out_dir()?)?;
    let mut work = || match cmd {
        Command::Train(_) => cmd_train(&o, &mut run),
        Command::Evaluate(_) => cmd_evaluate(&o, &mut run),
        Command::Validate(_) => cmd_validate(&o, &mut run),
        Command::Explain(_) => cmd_explain(&o, &mut run),
        Command::Zonate(_) => cmd_zonate(&o, &mut run),
        Command::Synth(_) => cmd_synth(&o, &mut run),
    };
    match o.threads {
        Some(0) => return Err(Error::Usage("--threads must be positive".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Usage(e.to_string()))?
            .install(work)?,
        None => work()?,
    }
    run.finish(started)
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            let record = json!({
                "error": {"kind": e.kind(), "message": e.to_string(), "exit_code": code}
            });
            eprintln!("{record}");
            code
        }
    }
}
