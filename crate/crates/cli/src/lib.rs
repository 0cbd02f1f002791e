//! `obsdiff` command line: model and calibration generation, pruning,
//! evaluation and inspection of `.obsd` containers.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use obs_diff::evaluate::{divergence_csv, sparsity_report, trajectory_divergence, EvalReport};
use obs_diff::obs::parse_pattern;
use obs_diff::pipeline::{ExportMode, DEFAULT_CALIBRATION_SIZE};
use obs_diff::structured::HeadBlockMode;
use obs_diff::{
    gen_calibration, gen_eval_set, init_model, run_pipeline, CalibrationSet, Container, Error, ModelConfig,
    PipelineConfig, SparsitySpec, ToyModel, WeightScheme,
};
use obs_diff::baselines::Method;
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Parser)]
#[command(name = "obsdiff", version, about = "One-shot OBS pruning for iterative denoisers")]
pub struct Cli {
    /// Worker threads for the parallel kernels (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a randomly initialised toy model.
    GenModel(GenModelArgs),
    /// Write a calibration (or evaluation) set matching a model's shapes.
    GenCalib(GenCalibArgs),
    /// Prune a model and write the pruned model plus a JSON report.
    Prune(Box<PruneArgs>),
    /// Trajectory divergence of a pruned model against its dense original.
    Eval(EvalArgs),
    /// Describe a container; for models, print the sparsity audit.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct GenModelArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, env = "OBSD_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 128)]
    pub ffn_dim: usize,
    #[arg(long, default_value_t = 2)]
    pub blocks: usize,
    #[arg(long, default_value_t = 8)]
    pub latent_tokens: usize,
    #[arg(long, default_value_t = 4)]
    pub cond_tokens: usize,
    #[arg(long, default_value_t = 8)]
    pub steps: usize,
}

#[derive(Debug, Args)]
pub struct GenCalibArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CALIBRATION_SIZE)]
    pub samples: usize,
    #[arg(long, env = "OBSD_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Draw from the evaluation seed domain instead.
    #[arg(long)]
    pub eval: bool,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON report path (default: stdout).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// JSON file with pipeline settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Target ratio for unstructured, ffn and heads patterns.
    #[arg(long)]
    pub sparsity: Option<f64>,
    /// unstructured | N:M | ffn | heads
    #[arg(long)]
    pub pattern: Option<String>,
    #[arg(long)]
    pub packages: Option<usize>,
    #[arg(long, value_parser = parse_from_str::<WeightScheme>)]
    pub weighting: Option<WeightScheme>,
    #[arg(long)]
    pub alpha_min: Option<f64>,
    #[arg(long)]
    pub alpha_max: Option<f64>,
    #[arg(long)]
    pub damp: Option<f64>,
    #[arg(long)]
    pub block_size: Option<usize>,
    #[arg(long)]
    pub rrf_k: Option<usize>,
    /// obs | wanda | magnitude
    #[arg(long, value_parser = parse_from_str::<Method>)]
    pub method: Option<Method>,
    /// masked | shrunk
    #[arg(long, value_parser = parse_kebab::<ExportMode>)]
    pub export: Option<ExportMode>,
    /// Comma list of block indices, `first`, `last`, or `none`.
    #[arg(long)]
    pub exclude_blocks: Option<String>,
    /// submatrix | inverse-block
    #[arg(long, value_parser = parse_kebab::<HeadBlockMode>)]
    pub head_block: Option<HeadBlockMode>,
    /// Also write the per-layer Hessians and their damped inverses.
    #[arg(long)]
    pub export_hessians: Option<PathBuf>,
    /// Keep wall-clock timings in the report (makes it non-reproducible).
    #[arg(long)]
    pub timings: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dense: PathBuf,
    #[arg(long)]
    pub pruned: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub samples: usize,
    #[arg(long, env = "OBSD_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Per-sample divergences as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Spec to audit against, `unstructured:0.5`, `2:4`, ...; defaults to
    /// the one recorded in the pruned model.
    #[arg(long)]
    pub spec: Option<String>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
    #[arg(long)]
    pub spec: Option<String>,
}

fn parse_from_str<T: std::str::FromStr<Err = Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_kebab<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(Value::String(s.into())).map_err(|_| format!("invalid value `{s}`"))
}

fn bad_config(msg: impl std::fmt::Display) -> Error {
    Error::BadConfig(msg.to_string())
}

fn load_model(path: &Path) -> Result<ToyModel> {
    ToyModel::from_container(&Container::load(path)?)
}

fn load_calib(path: &Path) -> Result<CalibrationSet> {
    CalibrationSet::from_container(&Container::load(path)?)
}

fn write_json(path: Option<&Path>, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(bad_config)? + "\n";
    match path {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn parse_blocks(list: &str, blocks: usize) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let b = match item {
            "none" => continue,
            "first" => 0,
            "last" => blocks.saturating_sub(1),
            n => n.parse().map_err(|_| bad_config(format!("bad block `{n}` in --exclude-blocks")))?,
        };
        if !out.contains(&b) {
            out.push(b);
        }
    }
    out.sort_unstable();
    Ok(out)
}

fn spec_parts(spec: &SparsitySpec) -> (String, f64) {
    match *spec {
        SparsitySpec::Unstructured { ratio } => ("unstructured".into(), ratio),
        SparsitySpec::SemiStructured { n, m } => (format!("{n}:{m}"), 0.5),
        SparsitySpec::FfnNeurons { ratio } => ("ffn".into(), ratio),
        SparsitySpec::Heads { ratio } => ("heads".into(), ratio),
    }
}

/// Defaults, then the `--config` file, then explicit flags.
pub fn effective_config(args: &PruneArgs, model: &ToyModel) -> Result<PipelineConfig> {
    let mut config = PipelineConfig::default();
    if let Some(path) = &args.config {
        let file: Value = serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| bad_config(format!("{}: {e}", path.display())))?;
        let Value::Object(file) = file else {
            return Err(bad_config("config file must hold a JSON object"));
        };
        let mut base = serde_json::to_value(&config).map_err(bad_config)?;
        let obj = base.as_object_mut().expect("struct serializes to an object");
        for (k, v) in file {
            if !obj.contains_key(&k) {
                return Err(bad_config(format!("unknown config key `{k}`")));
            }
            obj.insert(k, v);
        }
        config = serde_json::from_value(base).map_err(|e| bad_config(format!("config file: {e}")))?;
    }
    if args.pattern.is_some() || args.sparsity.is_some() {
        let (pattern, ratio) = spec_parts(&config.spec);
        let pattern = args.pattern.clone().unwrap_or(pattern);
        config.spec = parse_pattern(&pattern, args.sparsity.unwrap_or(ratio))?;
    }
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = args.$flag.clone() { config.$field = v; })*
        };
    }
    set!(packages => num_packages, weighting => weighting, alpha_min => alpha_min, alpha_max => alpha_max,
         damp => damp, block_size => block_size, rrf_k => rrf_k, method => method, export => export,
         head_block => head_block);
    if let Some(list) = &args.exclude_blocks {
        config.exclude_blocks = parse_blocks(list, model.blocks.len())?;
    }
    config.keep_hessians = args.export_hessians.is_some();
    Ok(config)
}

fn strip_timings(report: &mut Value) {
    if let Some(obj) = report.as_object_mut() {
        obj.remove("total_seconds");
        if let Some(Value::Array(pkgs)) = obj.get_mut("packages") {
            for p in pkgs.iter_mut().filter_map(Value::as_object_mut) {
                p.remove("collect_seconds");
                p.remove("prune_seconds");
            }
        }
    }
}

fn gen_model(a: &GenModelArgs) -> Result<()> {
    let config = ModelConfig {
        hidden_dim: a.hidden_dim,
        num_heads: a.heads,
        ffn_dim: a.ffn_dim,
        num_blocks: a.blocks,
        latent_tokens: a.latent_tokens,
        cond_tokens: a.cond_tokens,
        num_steps: a.steps,
        seed: a.seed,
    };
    let model = init_model(config)?;
    model.to_container(json!({}))?.save(&a.out)?;
    println!("wrote {} ({} parameters)", a.out.display(), model.parameter_count());
    Ok(())
}

fn gen_calib(a: &GenCalibArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let set = if a.eval {
        gen_eval_set(&model.config, a.seed, a.samples)?
    } else {
        gen_calibration(&model.config, a.seed, a.samples)?
    };
    set.to_container()?.save(&a.out)?;
    println!("wrote {} ({} samples)", a.out.display(), set.len());
    Ok(())
}

fn prune(a: &PruneArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let calib = load_calib(&a.calib)?;
    let config = effective_config(a, &model)?;
    let out = run_pipeline(&model, &calib, &config)?;
    let provenance = json!({
        "pipeline": config,
        "source_fingerprint": format!("{:016x}", model.fingerprint()),
        "calibration_seed": calib.seed,
        "calibration_samples": calib.len(),
    });
    out.model.to_container(provenance.clone())?.save(&a.out)?;
    if let Some(path) = &a.export_hessians {
        out.hessian_container()?.save(path)?;
    }
    let mut report = serde_json::to_value(&out.report).map_err(bad_config)?;
    if !a.timings {
        strip_timings(&mut report);
    }
    report["inputs"] = provenance;
    write_json(a.report.as_deref(), &report)?;
    if a.report.is_some() {
        println!(
            "pruned {} layers to {:.4} sparsity ({}), {} calibration passes",
            out.report.layers.len(),
            out.report.target_sparsity,
            config.spec,
            out.report.calibration_passes
        );
    }
    Ok(())
}

fn recorded_spec(c: &Container) -> Option<SparsitySpec> {
    let meta = c.metadata_json().ok()?;
    serde_json::from_value(meta.get("pipeline")?.get("spec")?.clone()).ok()
}

fn eval(a: &EvalArgs) -> Result<()> {
    let dense = load_model(&a.dense)?;
    let pruned_c = Container::load(&a.pruned)?;
    let pruned = ToyModel::from_container(&pruned_c)?;
    let spec = match &a.spec {
        Some(s) => Some(s.parse::<SparsitySpec>()?),
        None => recorded_spec(&pruned_c),
    };
    let set = gen_eval_set(&dense.config, a.seed, a.samples)?;
    let divergence = trajectory_divergence(&dense, &pruned, &set)?;
    if let Some(path) = &a.csv {
        fs::write(path, divergence_csv(&divergence))?;
    }
    let report = EvalReport {
        sparsity: sparsity_report(&pruned, spec.as_ref()),
        divergence,
        eval_seed: a.seed,
        eval_samples: a.samples,
        config: json!({ "model": dense.config, "spec": spec }),
    };
    write_json(a.report.as_deref(), &serde_json::to_value(&report).map_err(bad_config)?)
}

fn inspect(a: &InspectArgs) -> Result<()> {
    let c = Container::load(&a.path)?;
    let meta = Value::Object(c.metadata_json()?);
    let records: Vec<Value> = c
        .records
        .iter()
        .map(|r| json!({ "name": r.name, "dtype": format!("{:?}", r.data.dtype()).to_lowercase(), "shape": r.shape }))
        .collect();
    let mut out = json!({ "version": c.version, "metadata": meta, "records": records });
    if meta["kind"] == "model" {
        let model = ToyModel::from_container(&c)?;
        let spec = match &a.spec {
            Some(s) => Some(s.parse::<SparsitySpec>()?),
            None => recorded_spec(&c),
        };
        out["parameters"] = json!(model.parameter_count());
        out["audit"] = serde_json::to_value(sparsity_report(&model, spec.as_ref())).map_err(bad_config)?;
    }
    write_json(None, &out)
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenModel(a) => gen_model(a),
        Command::GenCalib(a) => gen_calib(a),
        Command::Prune(a) => prune(a),
        Command::Eval(a) => eval(a),
        Command::Inspect(a) => inspect(a),
    }
}

/// Machine-readable failure line written to stderr.
pub fn error_line(e: &Error) -> String {
    json!({ "error": e.kind(), "layer": e.layer(), "message": e.to_string() }).to_string()
}

/// Parses `argv` (including the program name) and runs it. Returns the
/// process exit code: 0 on success, 2 for usage errors, 1 otherwise.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(&cli)),
            Err(e) => Err(bad_config(format!("thread pool: {e}"))),
        },
        None => dispatch(&cli),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            1
        }
    }
}
