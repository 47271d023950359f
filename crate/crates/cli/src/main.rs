//! `sgen`: dataset generation, training, sampling, predictor training and
//! evaluation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::Value;

use sgen_core::dataset::{load_dataset, save_dataset, Split};
use sgen_core::metrics::{evaluate, EmdMode, MetricConfig, StructurePredictor};
use sgen_core::par::worker_count;
use sgen_core::pipeline::{load_generator, sample_shapes, save_samples, train, StructureSpec, TrainConfig};
use sgen_core::ply::decode_ply;
use sgen_core::predictor::{AdjacencyPredictor, PredictorConfig};
use sgen_core::structure::adjacency_from_edges;
use sgen_core::synth::{make_dataset, GeneratorConfig};
use sgen_core::Error;

#[derive(Parser)]
#[command(name = "sgen", version, about = "Structure-controlled point cloud generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic chair dataset.
    Dataset(DatasetArgs),
    /// Train the generator.
    Train(TrainArgs),
    /// Sample shapes for one structure.
    Sample(SampleArgs),
    /// Train the adjacency predictor on a frozen encoder.
    Predictor(PredictorArgs),
    /// Compare generated shapes with reference shapes.
    Eval(EvalArgs),
}

#[derive(clap::Args)]
struct DatasetArgs {
    /// JSON generator config; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    count_per_code: Option<usize>,
    /// Comma-separated structure codes.
    #[arg(long, value_delimiter = ',')]
    codes: Option<Vec<String>>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    test_fraction: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    All,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    log_every: Option<usize>,
    /// Train encoder and denoiser first, then the flow.
    #[arg(long)]
    staged: bool,
    #[arg(long)]
    train_points: Option<usize>,
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    /// Start from the larger model sizes and schedule.
    #[arg(long)]
    paper_scale: bool,
}

#[derive(clap::Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Catalog code such as `Ch_13`.
    #[arg(long, conflicts_with_all = ["existence", "edges"])]
    structure: Option<String>,
    /// Explicit existence flags, e.g. `1,1,1,0`.
    #[arg(long, value_delimiter = ',', requires = "edges")]
    existence: Option<Vec<u8>>,
    /// Explicit edges, e.g. `0-1,1-2`.
    #[arg(long, value_delimiter = ',')]
    edges: Option<Vec<String>>,
    /// PLY whose `part` column gives the segmentation.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    count: usize,
    #[arg(long, default_value_t = 512)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct PredictorArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fail instead of warning when held-out accuracy misses the gate.
    #[arg(long)]
    strict: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmdArg {
    Auto,
    Exact,
    Sinkhorn,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    gen: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    predictor: Option<PathBuf>,
    /// Require structure consistency scores.
    #[arg(long)]
    sca: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    emd_mode: Option<EmdArg>,
    /// Thin clouds to at most this many points before EMD; 0 keeps all.
    #[arg(long)]
    emd_max_points: Option<usize>,
    #[arg(long)]
    jsd_resolution: Option<usize>,
    /// Fail when the predictor was saved below its accuracy gate.
    #[arg(long)]
    strict: bool,
}

/// Reads a JSON config (or `{}`), then overlays the given flag values.
fn load_config<T: serde::de::DeserializeOwned>(path: Option<&Path>, overrides: Vec<(&str, Option<Value>)>) -> Result<T> {
    let mut v: Value = match path {
        Some(p) => serde_json::from_slice(&std::fs::read(p).with_context(|| format!("reading {}", p.display()))?).map_err(Error::from)?,
        None => Value::Object(Default::default()),
    };
    let obj = v.as_object_mut().ok_or_else(|| Error::InvalidConfig("config must be a JSON object".into()))?;
    for (k, val) in overrides {
        if let Some(val) = val {
            obj.insert(k.to_string(), val);
        }
    }
    Ok(serde_json::from_value(v).map_err(|e| Error::InvalidConfig(e.to_string()))?)
}

fn opt<T: Into<Value>>(x: Option<T>) -> Option<Value> {
    x.map(Into::into)
}

fn cmd_dataset(a: DatasetArgs) -> Result<()> {
    let cfg: GeneratorConfig = load_config(
        a.config.as_deref(),
        vec![
            ("n", opt(a.n)),
            ("count_per_code", opt(a.count_per_code)),
            ("codes", opt(a.codes)),
            ("noise_sigma", opt(a.noise_sigma)),
            ("seed", opt(a.seed)),
            ("test_fraction", opt(a.test_fraction)),
        ],
    )?;
    let (manifest, records) = make_dataset(&cfg)?;
    save_dataset(&a.out, &manifest, &records)?;
    println!("wrote {} shapes ({} train, {} test) to {}", records.len(), manifest.count(Split::Train), manifest.count(Split::Test), a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut base = serde_json::to_value(if a.paper_scale { TrainConfig::paper_scale() } else { TrainConfig::default() })?;
    if let Some(p) = &a.config {
        let file: Value = serde_json::from_slice(&std::fs::read(p).with_context(|| format!("reading {}", p.display()))?).map_err(Error::from)?;
        merge(&mut base, file);
    }
    let split = a.split.map(|s| match s {
        SplitArg::Train => "train",
        SplitArg::All => "all",
    });
    let overrides = vec![
        ("lambda", opt(a.lambda)),
        ("batch_size", opt(a.batch_size)),
        ("lr", opt(a.lr)),
        ("iterations", opt(a.iterations)),
        ("seed", opt(a.seed)),
        ("checkpoint_every", opt(a.checkpoint_every)),
        ("log_every", opt(a.log_every)),
        ("staged", a.staged.then_some(Value::Bool(true))),
        ("train_points", opt(a.train_points)),
        ("split", opt(split)),
    ];
    for (k, v) in overrides {
        if let Some(v) = v {
            base[k] = v;
        }
    }
    let cfg: TrainConfig = serde_json::from_value(base).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let cfg = TrainConfig { model: cfg.model.clone().resolved(), ..cfg };
    let ds = load_dataset(&a.data).map_err(|e| match e {
        Error::Io(io) => Error::DatasetInvalid(format!("{}: {io}", a.data.display())),
        other => other,
    })?;
    std::fs::create_dir_all(&a.out)?;
    let run = train(&cfg, &ds, Some(&a.out), |step, v| eprintln!("step {step:>6}  total {:.5}  prior {:.4}  diff {:.5}", v.total, v.prior, v.diffusion))?;
    println!("trained {} steps in {:.1}s; checkpoint {}", cfg.iterations, run.manifest.wall_clock_secs, a.out.join("last.sgck").display());
    Ok(())
}

/// Recursively overlays `patch` onto `base`.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

fn parse_edges(m: usize, edges: &[String]) -> Result<Vec<bool>> {
    let mut out = Vec::with_capacity(edges.len());
    for e in edges.iter().filter(|e| !e.is_empty()) {
        let (j, k) = e.split_once('-').ok_or_else(|| Error::InvalidConfig(format!("edge `{e}` is not of the form j-k")))?;
        let parse = |s: &str| s.trim().parse::<usize>().map_err(|_| Error::InvalidConfig(format!("bad part index in `{e}`")));
        let (j, k) = (parse(j)?, parse(k)?);
        if j >= m || k >= m {
            bail!(Error::InvalidConfig(format!("edge `{e}` refers to a part outside 0..{m}")));
        }
        out.push((j, k));
    }
    Ok(adjacency_from_edges(m, &out))
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let (model, store) = load_generator(&a.ckpt)?;
    let mut spec = match (&a.structure, &a.existence) {
        (Some(code), _) => StructureSpec::from_code(code)?,
        (None, Some(v)) => {
            let existence: Vec<bool> = v.iter().map(|&b| b != 0).collect();
            let adjacency = parse_edges(existence.len(), a.edges.as_deref().unwrap_or_default())?;
            StructureSpec { existence, adjacency, labels: None }
        }
        (None, None) => bail!(Error::InvalidConfig("give --structure or --existence with --edges".into())),
    };
    if let Some(p) = &a.labels {
        let (_, labels) = decode_ply(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?;
        spec.labels = Some(labels);
    }
    let recs = sample_shapes(&model, &store, &spec, a.count, a.points, a.seed, worker_count())?;
    save_samples(&a.out, &recs)?;
    println!("wrote {} `{}` shapes to {}", recs.len(), spec.code(), a.out.display());
    Ok(())
}

fn cmd_predictor(a: PredictorArgs) -> Result<()> {
    let cfg: PredictorConfig =
        load_config(a.config.as_deref(), vec![("iterations", opt(a.iterations)), ("hidden", opt(a.hidden)), ("lr", opt(a.lr)), ("seed", opt(a.seed))])?;
    let ds = load_dataset(&a.data)?;
    let (model, store) = load_generator(&a.ckpt)?;
    let (train_set, test_set) = (ds.split(Split::Train), ds.split(Split::Test));
    let pred = AdjacencyPredictor::train(&model.sgn, &store, &train_set, &test_set, &cfg)?;
    pred.save(&a.out)?;
    let r = pred.report;
    println!("train accuracy {:.4}, held-out accuracy {:.4} (gate {})", r.train_accuracy, r.heldout_accuracy, r.gate);
    if let Err(e) = r.check_gate() {
        if a.strict {
            return Err(e.into());
        }
        eprintln!("warning: {e}");
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let emd_mode = a.emd_mode.map(|m| match m {
        EmdArg::Auto => EmdMode::Auto,
        EmdArg::Exact => EmdMode::Exact,
        EmdArg::Sinkhorn => EmdMode::Sinkhorn,
    });
    let emd_max = a.emd_max_points.map(|k| if k == 0 { Value::Null } else { k.into() });
    let cfg: MetricConfig = load_config(
        a.config.as_deref(),
        vec![("emd_mode", emd_mode.map(|m| serde_json::to_value(m).expect("enum serializes"))), ("emd_max_points", emd_max), ("jsd_resolution", opt(a.jsd_resolution))],
    )?;
    let predictor = match &a.predictor {
        Some(p) => Some(AdjacencyPredictor::load(p)?),
        None if a.sca => bail!(Error::PredictorRequired),
        None => None,
    };
    if let (Some(p), true) = (&predictor, a.strict) {
        p.report.check_gate()?;
    }
    let gen = load_dataset(&a.gen)?;
    let reference = load_dataset(&a.reference)?;
    let g: Vec<_> = gen.records.iter().collect();
    let r: Vec<_> = reference.records.iter().collect();
    let report = evaluate(&g, &r, predictor.as_ref().map(|p| p as &dyn StructurePredictor), &cfg)?;
    report.save(&a.out)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain().find_map(|e| e.downcast_ref::<Error>()).map_or(2, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Dataset(a) => cmd_dataset(a),
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Predictor(a) => cmd_predictor(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
