use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ovmr::checkpoint::{read_checkpoint, write_checkpoint, Provenance};
use ovmr::data::{
    encode_dataset, generate_dataset, hex, read_features, sha256_hex, EpisodeInput, Split,
};
use ovmr::ood_boundary::QueryLabel;
use ovmr::train::{evaluate, recalibrate, train, RunConfig, Stage};
use ovmr::{Error, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "ovmr", version, about = "Open-set video moment retrieval")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; unspecified fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides both the run seed and the generator seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Joint,
    TwoStage,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset and its JSON manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset, log epochs as JSON lines, write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        stage: Option<StageArg>,
        /// Also write the epoch log here.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset's test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-query predictions as JSON lines.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Classify one query and, if accepted, ground it.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON episode with query_id, video, words and sentence.
        #[arg(long, conflicts_with_all = ["data", "query"])]
        episode: Option<PathBuf>,
        #[arg(long, requires = "query")]
        data: Option<PathBuf>,
        #[arg(long, requires = "data")]
        query: Option<u32>,
    },
    /// Recompute the boundary from a dataset's ID training queries.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common, fallback: Option<&Provenance>) -> Result<RunConfig> {
    let mut cfg = match (&common.config, fallback) {
        (Some(path), _) => RunConfig::from_json(&std::fs::read_to_string(path)?)?,
        (None, Some(prov)) => stored_config(prov)?,
        (None, None) => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.data.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stored_config(prov: &Provenance) -> Result<RunConfig> {
    let v: serde_json::Value = serde_json::from_str(&prov.json)?;
    match v.get("config") {
        Some(c) => {
            let cfg: RunConfig = serde_json::from_value(c.clone())?;
            cfg.validate()?;
            Ok(cfg)
        }
        None => Ok(RunConfig::default()),
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

fn gen_data(common: &Common, out: &Path) -> Result<()> {
    let cfg = load_config(common, None)?;
    let ds = generate_dataset(&cfg.data)?;
    let bytes = encode_dataset(&ds)?;
    std::fs::write(out, &bytes)?;
    let count = |split, label| ds.of_split(split).filter(|e| e.label == label).count();
    let manifest = json!({
        "format": "OVMRDATA",
        "seed": ds.seed,
        "config_hash": ds.config_hash_hex(),
        "config": cfg.data,
        "sha256": sha256_hex(&bytes),
        "episodes": ds.episodes.len(),
        "train": { "id": count(Split::Train, QueryLabel::Id), "ood": count(Split::Train, QueryLabel::Ood) },
        "test": { "id": count(Split::Test, QueryLabel::Id), "ood": count(Split::Test, QueryLabel::Ood) },
    });
    write_json(&manifest_path(out), &manifest)?;
    println!("{}", manifest);
    Ok(())
}

fn train_cmd(
    common: &Common,
    data: &Path,
    out: &Path,
    stage: Option<StageArg>,
    log: Option<&Path>,
) -> Result<()> {
    let mut cfg = load_config(common, None)?;
    if let Some(stage) = stage {
        cfg.stage = match stage {
            StageArg::Joint => Stage::Joint,
            StageArg::TwoStage => Stage::TwoStage,
        };
    }
    let ds = read_features(data)?;
    let mut sink = log.map(File::create).transpose()?.map(BufWriter::new);
    let stdout = io::stdout();
    let mut failed: Option<io::Error> = None;
    let outcome = train(&cfg, &ds, &mut |entry| {
        let line = serde_json::to_string(entry).expect("log entry serializes");
        let mut res = writeln!(stdout.lock(), "{line}");
        if let Some(f) = sink.as_mut() {
            res = res.and_then(|_| writeln!(f, "{line}"));
        }
        if let Err(e) = res {
            failed.get_or_insert(e);
        }
    })?;
    if let Some(e) = failed {
        return Err(e.into());
    }
    if let Some(mut f) = sink {
        f.flush()?;
    }
    write_checkpoint(out, &outcome.model, &outcome.provenance)?;
    eprintln!(
        "wrote {} (best epochs {:?}, b_id {:.4})",
        out.display(),
        outcome.best_epochs,
        outcome.model.calibration.b_id
    );
    Ok(())
}

fn eval_cmd(
    common: &Common,
    checkpoint: &Path,
    data: &Path,
    out: Option<&Path>,
    predictions: Option<&Path>,
) -> Result<()> {
    let (model, prov) = read_checkpoint(checkpoint)?;
    let cfg = load_config(common, Some(&prov))?;
    let ds = read_features(data)?;
    let (report, preds) = evaluate(&model, &ds, &cfg)?;
    print!("{}", report.to_table());
    if let Some(path) = out {
        let mut v = serde_json::to_value(&report)?;
        v["checkpoint_config_hash"] = json!(hex(&prov.config_hash));
        v["checkpoint_seed"] = json!(prov.seed);
        v["data_config_hash"] = json!(ds.config_hash_hex());
        v["data_seed"] = json!(ds.seed);
        write_json(path, &v)?;
    }
    if let Some(path) = predictions {
        let mut f = BufWriter::new(File::create(path)?);
        for p in &preds {
            writeln!(f, "{}", serde_json::to_string(p)?)?;
        }
        f.flush()?;
    }
    Ok(())
}

fn detect_cmd(
    common: &Common,
    checkpoint: &Path,
    episode: Option<&Path>,
    data: Option<&Path>,
    query: Option<u32>,
) -> Result<()> {
    let (model, prov) = read_checkpoint(checkpoint)?;
    let cfg = load_config(common, Some(&prov))?;
    let ep = match (episode, data, query) {
        (Some(path), _, _) => EpisodeInput::parse(&std::fs::read_to_string(path)?)?,
        (None, Some(data), Some(q)) => read_features(data)?
            .episodes
            .into_iter()
            .find(|e| e.query_id == q)
            .ok_or_else(|| Error::Contract(format!("no query {q} in {}", data.display())))?,
        _ => {
            return Err(Error::Config {
                field: "episode".into(),
                msg: "pass --episode, or --data with --query".into(),
            })
        }
    };
    let props = cfg.proposals(ep.frames())?;
    let pred = model.predict(&ep, &props, cfg.nms_n, cfg.nms_iou)?;
    println!("{}", serde_json::to_string(&pred)?);
    Ok(())
}

fn calibrate_cmd(common: &Common, checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let (mut model, prov) = read_checkpoint(checkpoint)?;
    let cfg = load_config(common, Some(&prov))?;
    let ds = read_features(data)?;
    let cal = recalibrate(&mut model, &ds, &cfg)?;
    write_checkpoint(out, &model, &prov)?;
    println!("{}", serde_json::to_string(&cal)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { common, out } => gen_data(&common, &out),
        Cmd::Train {
            common,
            data,
            out,
            stage,
            log,
        } => train_cmd(&common, &data, &out, stage, log.as_deref()),
        Cmd::Eval {
            common,
            checkpoint,
            data,
            out,
            predictions,
        } => eval_cmd(
            &common,
            &checkpoint,
            &data,
            out.as_deref(),
            predictions.as_deref(),
        ),
        Cmd::Detect {
            common,
            checkpoint,
            episode,
            data,
            query,
        } => detect_cmd(
            &common,
            &checkpoint,
            episode.as_deref(),
            data.as_deref(),
            query,
        ),
        Cmd::Calibrate {
            common,
            checkpoint,
            data,
            out,
        } => calibrate_cmd(&common, &checkpoint, &data, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
