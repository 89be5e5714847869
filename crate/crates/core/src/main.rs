use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use nes::autograd::{grad_check, random_probe, ProbeKind};
use nes::checkpoint;
use nes::config::ExperimentConfig;
use nes::cost::{network_counts, plan_from_multiplier, report_csv, ArchConfig};
use nes::model::argmax;
use nes::tensor::Rng;
use nes::train::{load_dataset, train};
use nes::NesError;

#[derive(Parser)]
#[command(name = "nes", version, about = "Train, inspect and cost epitome-compressed networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file, or the name of a bundled config.
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Emit CSV instead of JSON.
    #[arg(long)]
    csv: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train an experiment and write a frozen checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Override the configured number of steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Write the per-step metrics log (JSON lines) here.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Drop the index learners before saving.
        #[arg(long)]
        strip_learners: bool,
    },
    /// Run learner-free inference of a checkpoint over an experiment's dataset.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate at most this many samples.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Write the full weight tensor of one epitome layer of a checkpoint.
    Expand {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Position among the checkpoint's epitome layers.
        #[arg(long, default_value_t = 0)]
        layer: usize,
    },
    /// Parameter and MAdd report for an architecture.
    Cost {
        #[command(flatten)]
        common: Common,
        /// Plan bottleneck epitomes from this width multiplier.
        #[arg(long)]
        multiplier: Option<f64>,
    },
    /// Finite-difference gradient check on random epitome layers.
    CheckGrad {
        #[command(flatten)]
        common: Common,
        /// Number of random layer configurations.
        #[arg(long, default_value_t = 24)]
        configs: usize,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-5)]
        tol_epitome: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol_learner: f64,
        /// Minimum distance of every start from the interpolation grid.
        #[arg(long, default_value_t = 1e-3)]
        min_kink: f64,
    },
}

enum Failure {
    Validation(String),
    Internal(String),
}

impl From<NesError> for Failure {
    fn from(e: NesError) -> Self {
        match e {
            NesError::State(_) | NesError::NonFinite(_) => Failure::Internal(e.to_string()),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

type CliResult = Result<String, Failure>;

fn read_text(arg: &str) -> Result<Option<String>, Failure> {
    let p = Path::new(arg);
    if p.exists() {
        std::fs::read_to_string(p)
            .map(Some)
            .map_err(|e| Failure::Validation(format!("{arg}: {e}")))
    } else {
        Ok(None)
    }
}

fn experiment(common: &Common) -> Result<ExperimentConfig, Failure> {
    let arg = common
        .config
        .as_deref()
        .ok_or_else(|| Failure::Validation("--config is required".into()))?;
    let mut cfg = match read_text(arg)? {
        Some(text) => ExperimentConfig::from_toml(&text)?,
        None => ExperimentConfig::bundled(arg)?,
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn architecture(common: &Common) -> Result<ArchConfig, Failure> {
    let arg = common.config.as_deref().unwrap_or("mobilenetv2");
    Ok(match read_text(arg)? {
        Some(text) => ArchConfig::from_toml(&text)?,
        None => ArchConfig::bundled(arg)?,
    })
}

fn pretty(v: &Value) -> String {
    serde_json::to_string_pretty(v).expect("json values serialize")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, bytes).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
}

fn csv_rows(header: &[&str], rows: Vec<Vec<String>>) -> Result<String, Failure> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let internal = |e: csv::Error| Failure::Internal(e.to_string());
    w.write_record(header).map_err(internal)?;
    for r in rows {
        w.write_record(&r).map_err(internal)?;
    }
    let bytes = w.into_inner().map_err(|e| Failure::Internal(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Failure::Internal(e.to_string()))
}

fn cmd_train(common: &Common, steps: Option<usize>, metrics: Option<&Path>, strip: bool) -> CliResult {
    let mut cfg = experiment(common)?;
    if let Some(s) = steps {
        cfg.steps = s;
    }
    let mut outcome = train(&cfg)?;
    if strip {
        outcome.model.strip_learners();
    }
    if let Some(p) = &common.out {
        write_file(p, &checkpoint::to_bytes(&outcome.model))?;
    }
    if let Some(p) = metrics {
        write_file(p, outcome.metrics_jsonl().as_bytes())?;
    }
    let layers: Vec<Value> = outcome
        .model
        .epitome_layers()
        .map(|e| {
            json!({
                "weight": e.plan.weight.as_array(),
                "epitome": e.plan.epitome.as_array(),
                "stored_numbers": e.stored_numbers(),
                "param_ratio": e.plan.weight.numel() as f64 / e.stored_numbers() as f64,
            })
        })
        .collect();
    let last = outcome.metrics.last();
    if common.csv {
        let rows = outcome
            .metrics
            .iter()
            .map(|m| vec![m.step.to_string(), m.loss.to_string(), m.accuracy.to_string()])
            .collect();
        return csv_rows(&["step", "loss", "accuracy"], rows);
    }
    Ok(pretty(&json!({
        "seed": cfg.seed,
        "steps": cfg.steps,
        "final_loss": last.map(|m| m.loss),
        "final_batch_accuracy": last.map(|m| m.accuracy),
        "audit": outcome.audit,
        "layers": layers,
        "checkpoint": common.out.as_ref().map(|p| p.display().to_string()),
    })))
}

fn cmd_infer(common: &Common, ckpt: &Path, limit: Option<usize>) -> CliResult {
    let model = checkpoint::load(ckpt)?;
    let cfg = experiment(common)?;
    let data = load_dataset(&cfg.dataset, cfg.seed)?;
    let n = limit.map_or(data.len(), |l| l.min(data.len()));
    let mut correct = 0;
    let mut rows = Vec::with_capacity(n);
    let mut madd: Option<Vec<Value>> = None;
    for i in 0..n {
        let (out, reports) = model.infer(&data.inputs[i])?;
        let pred = argmax(&out);
        correct += usize::from(pred == data.labels[i]);
        rows.push(vec![i.to_string(), data.labels[i].to_string(), pred.to_string()]);
        if madd.is_none() {
            madd = Some(
                reports
                    .iter()
                    .map(|r| serde_json::from_str(&r.to_json()).expect("report json"))
                    .collect(),
            );
        }
    }
    if common.csv {
        return csv_rows(&["sample", "label", "prediction"], rows);
    }
    Ok(pretty(&json!({
        "samples": n,
        "accuracy": if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        "learners_present": model.epitome_layers().any(|e| e.learner.is_some()),
        "madd_per_sample": madd.unwrap_or_default(),
    })))
}

fn cmd_expand(common: &Common, ckpt: &Path, layer: usize) -> CliResult {
    let model = checkpoint::load(ckpt)?;
    let count = model.epitome_layers().count();
    let e = model
        .epitome_layers()
        .nth(layer)
        .ok_or_else(|| Failure::Validation(format!("layer {layer} out of range: checkpoint has {count} epitome layers")))?;
    let w = e.expanded(&e.map.indices())?;
    let body = if common.csv {
        let shape = w.shape().to_vec();
        let strides = w.strides();
        let rows = w
            .data()
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let mut r: Vec<String> = shape
                    .iter()
                    .zip(&strides)
                    .map(|(&d, &s)| ((k / s) % d).to_string())
                    .collect();
                r.push(v.to_string());
                r
            })
            .collect();
        csv_rows(&["w", "h", "c_in", "c_out", "value"], rows)?
    } else {
        pretty(&json!({
            "layer": layer,
            "kind": format!("{:?}", e.kind).to_lowercase(),
            "shape": w.shape(),
            "indices": e.map.entries(),
            "values": w.data(),
        }))
    };
    match &common.out {
        Some(p) => {
            write_file(p, body.as_bytes())?;
            Ok(pretty(&json!({ "layer": layer, "shape": w.shape(), "written": p.display().to_string() })))
        }
        None => Ok(body),
    }
}

fn cmd_cost(common: &Common, multiplier: Option<f64>) -> CliResult {
    let base = architecture(common)?;
    let (cfg, notes) = match multiplier {
        Some(c) => plan_from_multiplier(&base, c)?,
        None => (base, Vec::new()),
    };
    let report = network_counts(&cfg)?;
    let body = if common.csv {
        report_csv(&report)?
    } else {
        pretty(&json!({ "report": report, "notes": notes }))
    };
    if let Some(p) = &common.out {
        write_file(p, body.as_bytes())?;
    }
    Ok(body)
}

fn cmd_check_grad(
    common: &Common,
    configs: usize,
    epsilon: f64,
    tols: [f64; 2],
    min_kink: f64,
) -> Result<(String, bool), Failure> {
    let mut rng = Rng::new(common.seed.unwrap_or(0));
    let mut results = Vec::with_capacity(configs);
    let mut rows = Vec::new();
    let mut all = true;
    for i in 0..configs {
        let kind = ProbeKind::ALL[i % 3];
        let learner = (i / 3) % 2 == 1;
        let mut probe = random_probe(&mut rng, kind, learner, min_kink)?;
        let report = grad_check(&mut probe, epsilon, &tols)?;
        all &= report.passed();
        for g in &report.groups {
            rows.push(vec![
                i.to_string(),
                format!("{kind:?}").to_lowercase(),
                g.name.clone(),
                g.max_rel_error.to_string(),
                g.passed.to_string(),
            ]);
        }
        results.push(json!({
            "config": i,
            "kind": kind,
            "weight": probe.plan.weight.as_array(),
            "epitome": probe.plan.epitome.as_array(),
            "kink_distance": probe.kink_distance()?,
            "passed": report.passed(),
            "groups": report.groups,
        }));
    }
    let body = if common.csv {
        csv_rows(&["config", "kind", "group", "max_rel_error", "passed"], rows)?
    } else {
        pretty(&json!({
            "epsilon": epsilon,
            "tolerances": { "epitome": tols[0], "second_group": tols[1] },
            "passed": all,
            "configs": results,
        }))
    };
    Ok((body, all))
}

fn run(cli: Cli) -> Result<(String, bool), Failure> {
    let ok = |s: String| (s, true);
    match cli.command {
        Command::Train {
            common,
            steps,
            metrics,
            strip_learners,
        } => cmd_train(&common, steps, metrics.as_deref(), strip_learners).map(ok),
        Command::Infer {
            common,
            checkpoint,
            limit,
        } => cmd_infer(&common, &checkpoint, limit).map(ok),
        Command::Expand {
            common,
            checkpoint,
            layer,
        } => cmd_expand(&common, &checkpoint, layer).map(ok),
        Command::Cost { common, multiplier } => cmd_cost(&common, multiplier).map(ok),
        Command::CheckGrad {
            common,
            configs,
            epsilon,
            tol_epitome,
            tol_learner,
            min_kink,
        } => cmd_check_grad(&common, configs, epsilon, [tol_epitome, tol_learner], min_kink),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok((body, passed)) => {
            let mut out = std::io::stdout().lock();
            let _ = writeln!(out, "{}", body.trim_end());
            if passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(m)) => {
            eprintln!("internal error: {m}");
            ExitCode::from(2)
        }
    }
}
