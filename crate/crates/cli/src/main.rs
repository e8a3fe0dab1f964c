//! Command-line front end: data generation, training, evaluation and the
//! numerical oracles.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 invalid input/config/format,
//! 3 numerical failure (including a failed oracle check).

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use isdml::augment::jensen_sweep;
use isdml::bound_audit::{audit_pairs, summarize, write_csv};
use isdml::config::TrainConfig;
use isdml::data::{generate, lodo_split, DomainDataset, GenSpec};
use isdml::gradcheck::{run_suite, CheckKind};
use isdml::model::ModelParams;
use isdml::trainer::{
    ablation_grid, ablation_summary, evaluate, extract_features, sensitivity_sweep, train,
    write_ablation_csv, write_sweep_csv, Variant, DEFAULT_ALPHAS,
};
use isdml::Error;

#[derive(Parser)]
#[command(name = "isdml", version, about = "Metric learning on augmented logits for domain generalization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic multi-domain benchmark.
    GenData {
        /// Comma-separated overrides, e.g. "classes=5,domains=4,per_class=100,size=32,seed=0".
        #[arg(long, default_value = "")]
        spec: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on all domains but one and save a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        target_domain: usize,
        /// key = value config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra key=value overrides applied after the config file.
        #[arg(long = "set")]
        set: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch metrics CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Classifier accuracy of a checkpoint, on one domain or all data.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        domain: Option<usize>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checked instances per gradient.
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Compare the closed-form augmented loss with Monte-Carlo sampling.
    McOracle {
        /// Fixed λ; drawn from [0, 2] per instance when omitted.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check the feature/logit distance bound on a checkpoint's features.
    AuditBound {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        domain: Option<usize>,
        /// Audit the metric head ("dml") or the classifier ("classifier").
        #[arg(long, default_value = "dml")]
        head: String,
        /// Use at most this many samples (the first ones).
        #[arg(long, default_value_t = 500)]
        max_samples: usize,
        /// Per-pair CSV report.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train the five ablation variants.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Held-out domain; with --all-targets every domain is held out in turn.
        #[arg(long, default_value_t = 0)]
        target_domain: usize,
        #[arg(long)]
        all_targets: bool,
        /// Number of seeds (seed, seed+1, ...) for --all-targets.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        set: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train once per α and report accuracies.
    SweepAlpha {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        target_domain: usize,
        /// Comma-separated α values.
        #[arg(long)]
        alphas: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        set: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure carrying the process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io(_) => 1,
            Error::Numerical(_) => 3,
            Error::InvalidInput(_) | Error::Format(_) | Error::Config(_) => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Error::Io(e).into()
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: msg.into(),
    }
}

fn numerical(msg: impl Into<String>) -> Failure {
    Failure {
        code: 3,
        message: msg.into(),
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cmd: Command) -> CliResult {
    match cmd {
        Command::GenData { spec, out } => gen_data(&spec, &out),
        Command::Train {
            data,
            target_domain,
            config,
            set,
            out,
            log,
        } => {
            let cfg = load_config(config.as_deref(), &set)?;
            let ds = DomainDataset::load(&data)?;
            let split = lodo_split(&ds, target_domain)?;
            let (params, metrics) = train(&split, &cfg)?;
            params.save(&out)?;
            if let Some(path) = log {
                metrics.write_csv(BufWriter::new(File::create(path)?))?;
            }
            let last = metrics.last().expect("at least one epoch");
            println!(
                "source_acc={:.4} target_acc={:.4} final_loss={:.6}",
                last.source_acc, last.target_acc, last.total
            );
            Ok(())
        }
        Command::Eval { ckpt, data, domain } => {
            let params = ModelParams::load(&ckpt)?;
            let ds = select_domain(DomainDataset::load(&data)?, domain)?;
            println!("accuracy={:.6} samples={}", evaluate(&params, &ds)?, ds.len());
            Ok(())
        }
        Command::Gradcheck { seed, instances } => gradcheck(seed, instances),
        Command::McOracle {
            lambda,
            samples,
            instances,
            seed,
        } => mc_oracle(lambda, samples, instances, seed),
        Command::AuditBound {
            ckpt,
            data,
            domain,
            head,
            max_samples,
            csv,
        } => audit_bound(&ckpt, &data, domain, &head, max_samples, csv.as_deref()),
        Command::Ablate {
            data,
            target_domain,
            all_targets,
            seeds,
            config,
            set,
            out,
        } => {
            let cfg = load_config(config.as_deref(), &set)?;
            let ds = DomainDataset::load(&data)?;
            if all_targets {
                let seeds: Vec<u64> = (0..seeds.max(1)).map(|s| cfg.seed + s).collect();
                let targets: Vec<usize> = (0..ds.num_domains()).collect();
                let summary = ablation_summary(&ds, &cfg, &Variant::ALL, &seeds, &targets)?;
                let mut w = output(out.as_deref())?;
                writeln!(w, "variant,mean_target_acc,runs")?;
                for v in Variant::ALL {
                    let mean = summary.mean_target_acc(v).expect("variant was run");
                    writeln!(w, "{v},{mean},{}", seeds.len() * targets.len())?;
                }
                w.flush()?;
            } else {
                let split = lodo_split(&ds, target_domain)?;
                let rows = ablation_grid(&split, &cfg)?;
                let mut w = output(out.as_deref())?;
                write_ablation_csv(&rows, &mut w)?;
                w.flush()?;
            }
            Ok(())
        }
        Command::SweepAlpha {
            data,
            target_domain,
            alphas,
            config,
            set,
            out,
        } => {
            let cfg = load_config(config.as_deref(), &set)?;
            let alphas = match alphas {
                Some(s) => s
                    .split(',')
                    .map(|a| a.trim().parse::<f64>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| invalid(format!("cannot parse alphas '{s}'")))?,
                None => DEFAULT_ALPHAS.to_vec(),
            };
            let ds = DomainDataset::load(&data)?;
            let split = lodo_split(&ds, target_domain)?;
            let rows = sensitivity_sweep(&split, &cfg, &alphas)?;
            let mut w = output(out.as_deref())?;
            write_sweep_csv(&rows, &mut w)?;
            w.flush()?;
            Ok(())
        }
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig, Failure> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| invalid(format!("override '{kv}' is not key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_gen_spec(text: &str) -> Result<GenSpec, Failure> {
    let mut spec = GenSpec::default();
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| invalid(format!("spec item '{item}' is not key=value")))?;
        let num = |v: &str| {
            v.trim()
                .parse::<u64>()
                .map_err(|_| invalid(format!("invalid number '{v}' for {k}")))
        };
        match k.trim() {
            "classes" => spec.num_classes = num(v)? as usize,
            "domains" => spec.num_domains = num(v)? as usize,
            "per_class" => spec.per_class_per_domain = num(v)? as usize,
            "size" => spec.image_size = num(v)? as usize,
            "seed" => spec.seed = num(v)?,
            other => return Err(invalid(format!("unknown spec key '{other}'"))),
        }
    }
    Ok(spec)
}

fn gen_data(spec: &str, out: &Path) -> CliResult {
    let spec = parse_gen_spec(spec)?;
    let ds = generate(&spec)?;
    ds.save(out)?;
    println!(
        "wrote {} samples ({} classes, {} domains, {}x{}) to {}",
        ds.len(),
        ds.num_classes(),
        ds.num_domains(),
        spec.image_size,
        spec.image_size,
        out.display()
    );
    Ok(())
}

fn select_domain(ds: DomainDataset, domain: Option<usize>) -> Result<DomainDataset, Failure> {
    match domain {
        None => Ok(ds),
        Some(k) => Ok(lodo_split(&ds, k)?.target),
    }
}

fn gradcheck(seed: u64, instances: usize) -> CliResult {
    let report = run_suite(seed, instances)?;
    for kind in CheckKind::ALL {
        let skipped = report
            .skipped
            .iter()
            .find(|(k, _)| *k == kind)
            .map_or(0, |s| s.1);
        let ok = report.records.iter().filter(|r| r.kind == kind).all(|r| r.passed());
        println!(
            "{:<20} checked={:<4} skipped={:<4} max_rel_err={:.3e} tol={:.0e} {}",
            kind.name(),
            report.count(kind),
            skipped,
            report.max_error(kind),
            kind.tolerance(),
            if ok { "PASS" } else { "FAIL" }
        );
    }
    if report.all_passed() {
        Ok(())
    } else {
        Err(numerical("gradient check failed"))
    }
}

fn mc_oracle(lambda: Option<f64>, samples: usize, instances: usize, seed: u64) -> CliResult {
    if let Some(l) = lambda {
        if !(l >= 0.0 && l.is_finite()) {
            return Err(invalid(format!("lambda must be >= 0, got {l}")));
        }
    }
    let cases = jensen_sweep(seed, instances, samples, lambda)?;
    println!("instance,d,C,lambda,closed_form,mc_mean,mc_std_err,holds");
    let mut failures = 0;
    for (i, c) in cases.iter().enumerate() {
        let holds = c.holds(3.0);
        failures += usize::from(!holds);
        println!(
            "{i},{},{},{},{},{},{},{holds}",
            c.dim, c.classes, c.lambda, c.closed_form, c.estimate.mean, c.estimate.std_err
        );
    }
    if failures == 0 {
        Ok(())
    } else {
        Err(numerical(format!("{failures} instances exceed the closed-form bound")))
    }
}

fn audit_bound(
    ckpt: &Path,
    data: &Path,
    domain: Option<usize>,
    head: &str,
    max_samples: usize,
    csv: Option<&Path>,
) -> CliResult {
    let params = ModelParams::load(ckpt)?;
    let ds = select_domain(DomainDataset::load(data)?, domain)?;
    let w = match head {
        "dml" => &params.dml_head.weight,
        "classifier" => &params.classifier.weight,
        other => return Err(invalid(format!("unknown head '{other}'"))),
    };
    let n = ds.len().min(max_samples);
    let idx: Vec<usize> = (0..n).collect();
    let features = extract_features(&params, &ds.images().select_rows(&idx))?;
    let reports = audit_pairs(&features, w)?;
    if let Some(path) = csv {
        let mut f = BufWriter::new(File::create(path)?);
        write_csv(&reports, &mut f)?;
        f.flush()?;
    }
    let s = summarize(&reports);
    println!(
        "pairs={} fraction_satisfied={} mean_slack={:.6e} residual={:.6e} c={:.6e}",
        s.pairs, s.fraction_satisfied, s.mean_slack, s.residual, s.c
    );
    if s.fraction_satisfied == 1.0 {
        Ok(())
    } else {
        Err(numerical("distance bound violated"))
    }
}
