//! The `skelgnn` command line: `train`, `eval`, `gradcheck`, `graph` and
//! `synth`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
//! Every command checks its inputs before it writes anything.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use clap::{Parser, Subcommand};

use crate::checkpoint::{checkpoint_to_string, load_checkpoint_standalone};
use crate::config::{resolve, validate_metrics, RunConfig};
use crate::data::{load_dataset, save_dataset, synthesize_dataset, PoseSample, SyntheticRigSpec};
use crate::error::TrainError;
use crate::gradsuite::{gradient_suite, GRADIENT_TOLERANCE};
use crate::metrics::{EvalReport, MetricsConfig};
use crate::model::build_model;
use crate::skeleton::{compute_hop_partition, SkeletonTopology, H36M_PRESET};
use crate::train::{evaluate_model, fit, EpochRecord, Prepared, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "skelgnn",
    version,
    about = "Skeletal graph networks for 2D-to-3D pose lifting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model from a run configuration.
    Train {
        config: PathBuf,
        /// Dotted overrides such as `training.epochs=1`.
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Where to write the JSON report.
        #[arg(long)]
        report: PathBuf,
        /// Also write the error histogram as text.
        #[arg(long)]
        histogram: Option<PathBuf>,
        /// Run configuration supplying metrics and evaluation settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Disable test-time flip averaging.
        #[arg(long)]
        no_flip: bool,
    },
    /// Finite-difference gradient checks of every layer and a small model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds starting at `--seed`.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Print hop distances and per-hop rings of a topology.
    Graph {
        #[arg(long, default_value = H36M_PRESET)]
        topology: String,
        /// Largest hop listed; defaults to the graph diameter.
        #[arg(long)]
        max_hop: Option<usize>,
    },
    /// Write a synthetic pose dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Rig spec file (TOML, or JSON by extension); defaults from the topology otherwise.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value = H36M_PRESET)]
        topology: String,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 50)]
        frames_per_seq: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// 2D noise standard deviation in pixels.
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        outlier_prob: Option<f64>,
    },
}

/// A failure and the exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

fn usage(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Usage(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Runtime(e.into())
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Diagnostics go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let mut out = std::io::stdout().lock();
    match dispatch(cli.command, &mut out) {
        Ok(code) => code,
        Err(e) => {
            let (CliError::Usage(err) | CliError::Runtime(err)) = &e;
            eprintln!("error: {err:#}");
            e.code()
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32, CliError> {
    match cmd {
        Command::Train { config, overrides } => cmd_train(&config, &overrides, out).map(|()| EXIT_OK),
        Command::Eval {
            checkpoint,
            data,
            report,
            histogram,
            config,
            no_flip,
        } => cmd_eval(
            &checkpoint,
            &data,
            &report,
            histogram.as_deref(),
            config.as_deref(),
            no_flip,
            out,
        )
        .map(|()| EXIT_OK),
        Command::Gradcheck { seed, seeds } => cmd_gradcheck(seed, seeds, out),
        Command::Graph { topology, max_hop } => cmd_graph(&topology, max_hop, out).map(|()| EXIT_OK),
        Command::Synth {
            out: path,
            spec,
            topology,
            samples,
            frames_per_seq,
            seed,
            noise,
            outlier_prob,
        } => {
            let opts = SynthArgs {
                spec,
                topology,
                samples,
                frames_per_seq,
                seed,
                noise,
                outlier_prob,
            };
            cmd_synth(&path, &opts, out).map(|()| EXIT_OK)
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(runtime)
}

fn report_json(report: &EvalReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

/// Trains per the config at `config_path` with `overrides` applied.
///
/// The output directory receives `config.toml` (the effective config),
/// `log.jsonl` (one record per epoch, echoed to `out`), periodic
/// `checkpoints/epoch_NNNN.json`, `checkpoint_best.json` (lowest evaluation
/// MPJPE), `checkpoint_last.json`, and `report.json` plus `histogram.txt`
/// for the best model on the test set (the training set without one).
pub fn cmd_train(config_path: &Path, overrides: &[String], out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = RunConfig::load(config_path, overrides).map_err(usage)?;
    let run = resolve(cfg, config_path).map_err(usage)?;
    let n = run.topology.num_nodes();
    let train = load_dataset(&run.train, n)
        .with_context(|| format!("loading {}", run.train.display()))
        .map_err(usage)?;
    let test = match &run.test {
        Some(p) => Some(
            load_dataset(p, n)
                .with_context(|| format!("loading {}", p.display()))
                .map_err(usage)?,
        ),
        None => None,
    };
    if train.is_empty() {
        return Err(usage(anyhow::anyhow!(
            "training data {} holds no samples",
            run.train.display()
        )));
    }
    for (samples, path) in std::iter::once((&train, &run.train)).chain(test.as_ref().zip(run.test.as_ref())) {
        if let Some(s) = samples.iter().find(|s| s.joints_3d.is_none()) {
            return Err(usage(anyhow::anyhow!(
                "{}: sample {}/{} has no 3D ground truth",
                path.display(),
                s.seq,
                s.frame
            )));
        }
    }
    let mut model = build_model(&run.config.model, &run.topology).map_err(usage)?;

    let dir = &run.output_dir;
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)
        .with_context(|| format!("creating {}", ckpt_dir.display()))
        .map_err(runtime)?;
    write_file(&dir.join("config.toml"), &run.config.to_toml())?;
    let log_path = dir.join("log.jsonl");
    let mut log = BufWriter::new(
        File::create(&log_path)
            .with_context(|| format!("creating {}", log_path.display()))
            .map_err(runtime)?,
    );

    let every = run.config.output.checkpoint_every;
    let mut best: Option<(f64, String)> = None;
    let mut on_epoch = |rec: &EpochRecord, m: &crate::model::Model| -> Result<(), TrainError> {
        let line = serde_json::to_string(rec).expect("record serializes");
        let io = |e: std::io::Error, p: &Path| {
            TrainError::Model(crate::error::ModelError::IoFailure {
                path: p.to_path_buf(),
                source: e,
            })
        };
        writeln!(log, "{line}")
            .and_then(|()| log.flush())
            .map_err(|e| io(e, &log_path))?;
        writeln!(out, "{line}").map_err(|e| io(e, Path::new("<stdout>")))?;
        let text = checkpoint_to_string(m);
        if every > 0 && (rec.epoch + 1).is_multiple_of(every) {
            let p = ckpt_dir.join(format!("epoch_{:04}.json", rec.epoch + 1));
            fs::write(&p, &text).map_err(|e| io(e, &p))?;
        }
        if best.as_ref().is_none_or(|(b, _)| rec.mpjpe < *b) {
            let p = dir.join("checkpoint_best.json");
            fs::write(&p, &text).map_err(|e| io(e, &p))?;
            best = Some((rec.mpjpe, text));
        }
        Ok(())
    };
    fit(&mut model, &train, test.as_deref(), &run.config.training, &mut on_epoch).map_err(runtime)?;
    write_file(&dir.join("checkpoint_last.json"), &checkpoint_to_string(&model))?;

    let best_model = match &best {
        Some((_, text)) => crate::checkpoint::checkpoint_from_str(text).map_err(runtime)?,
        None => model,
    };
    let scored: &[PoseSample] = test.as_deref().unwrap_or(&train);
    let report = score(&best_model, scored, &run.config.training, &run.config.metrics)?;
    write_file(&dir.join("report.json"), &report_json(&report))?;
    write_file(&dir.join("histogram.txt"), &report.histogram_table())?;
    Ok(())
}

fn score(
    model: &crate::model::Model,
    samples: &[PoseSample],
    training: &TrainConfig,
    metrics: &MetricsConfig,
) -> Result<EvalReport, CliError> {
    let data = Prepared::new(samples, &model.topology, model.config.temporal_frames).map_err(runtime)?;
    evaluate_model(model, &data, training.flip_augment, training.eval_batch_size, metrics).map_err(runtime)
}

/// Evaluates a checkpoint. Metrics thresholds, flip averaging and batch size
/// come from `config` when given.
pub fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    report_path: &Path,
    histogram: Option<&Path>,
    config: Option<&Path>,
    no_flip: bool,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let (mut training, metrics) = match config {
        Some(p) => {
            let c = RunConfig::load(p, &[]).map_err(usage)?;
            (c.training, c.metrics)
        }
        None => (TrainConfig::default(), MetricsConfig::default()),
    };
    validate_metrics(&metrics).map_err(usage)?;
    training.validate().map_err(usage)?;
    if no_flip {
        training.flip_augment = false;
    }
    let model = load_checkpoint_standalone(checkpoint).map_err(usage)?;
    let samples = load_dataset(data, model.num_nodes())
        .with_context(|| format!("loading {}", data.display()))
        .map_err(usage)?;
    if samples.is_empty() {
        return Err(usage(anyhow::anyhow!("{} holds no samples", data.display())));
    }
    if samples.iter().any(|s| s.joints_3d.is_none()) {
        return Err(usage(anyhow::anyhow!(
            "{}: every sample needs 3D ground truth",
            data.display()
        )));
    }
    let report = score(&model, &samples, &training, &metrics)?;
    write_file(report_path, &report_json(&report))?;
    if let Some(h) = histogram {
        write_file(h, &report.histogram_table())?;
    }
    let mut text = format!(
        "samples {}\nmpjpe {:.4}\npa_mpjpe {:.4}\npck@{} {:.4}\nauc {:.4}\n",
        report.num_samples, report.mpjpe_mean, report.pa_mpjpe_mean, report.pck_threshold, report.pck, report.auc
    );
    for h in &report.hardest {
        let _ = writeln!(text, "hardest {:.0}% ({} samples) {:.4}", h.p * 100.0, h.count, h.mean);
    }
    out.write_all(text.as_bytes()).map_err(runtime)?;
    Ok(())
}

/// Runs the gradient suite on `seeds` seeds from `seed` and prints the
/// largest relative error per component. Returns 0 iff all pass.
pub fn cmd_gradcheck(seed: u64, seeds: u64, out: &mut dyn Write) -> Result<i32, CliError> {
    if seeds == 0 {
        return Err(usage(anyhow::anyhow!("--seeds must be at least 1")));
    }
    let mut worst: Vec<(&'static str, f64, usize)> = Vec::new();
    for s in seed..seed + seeds {
        for c in gradient_suite(s).map_err(runtime)? {
            match worst.iter_mut().find(|w| w.0 == c.name) {
                Some(w) => {
                    w.1 = w.1.max(c.report.max_rel_error);
                    w.2 += c.report.coords_checked;
                }
                None => worst.push((c.name, c.report.max_rel_error, c.report.coords_checked)),
            }
        }
    }
    let mut text = String::new();
    let mut ok = true;
    for (name, err, coords) in &worst {
        let pass = *err < GRADIENT_TOLERANCE;
        ok &= pass;
        let _ = writeln!(
            text,
            "{name:<18} max_rel_error {err:.3e} coords {coords:>5} {}",
            if pass { "ok" } else { "FAIL" }
        );
    }
    let _ = writeln!(text, "tolerance {GRADIENT_TOLERANCE:e}, seeds {seed}..{}", seed + seeds);
    out.write_all(text.as_bytes()).map_err(runtime)?;
    Ok(if ok { EXIT_OK } else { EXIT_RUNTIME })
}

/// Prints the hop-distance matrix and, per joint, the members of every ring
/// up to `max_hop`.
pub fn cmd_graph(topology: &str, max_hop: Option<usize>, out: &mut dyn Write) -> Result<(), CliError> {
    let topo = SkeletonTopology::from_preset_or_path(topology).map_err(usage)?;
    let full = compute_hop_partition(&topo, 1).map_err(usage)?;
    let max_hop = max_hop.unwrap_or(full.diameter().max(1));
    let hops = compute_hop_partition(&topo, max_hop).map_err(usage)?;
    let n = topo.num_nodes();
    let mut text = format!("nodes {n} edges {} diameter {}\n", topo.edges().len(), hops.diameter());
    text.push_str("hop distances\n   ");
    for j in 0..n {
        let _ = write!(text, "{j:>3}");
    }
    text.push('\n');
    for i in 0..n {
        let _ = write!(text, "{i:>3}");
        for j in 0..n {
            let _ = write!(text, "{:>3}", hops.dist(i, j));
        }
        text.push('\n');
    }
    text.push_str("rings\n");
    for i in 0..n {
        let _ = writeln!(text, "{i} {}", topo.joint_name(i));
        for k in 1..=max_hop {
            let members: Vec<String> = hops.ring(k).row(i).iter().map(usize::to_string).collect();
            let _ = writeln!(text, "  hop {k}: {}", members.join(" "));
        }
    }
    out.write_all(text.as_bytes()).map_err(runtime)?;
    Ok(())
}

/// Options of the `synth` command.
#[derive(Clone, Debug)]
pub struct SynthArgs {
    pub spec: Option<PathBuf>,
    pub topology: String,
    pub samples: usize,
    pub frames_per_seq: usize,
    pub seed: Option<u64>,
    pub noise: Option<f64>,
    pub outlier_prob: Option<f64>,
}

fn load_rig_spec(path: &Path) -> anyhow::Result<SyntheticRigSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    } else {
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Writes a synthetic dataset and prints summary statistics.
pub fn cmd_synth(path: &Path, args: &SynthArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut spec = match &args.spec {
        Some(p) => load_rig_spec(p).map_err(usage)?,
        None => {
            let topo = SkeletonTopology::from_preset_or_path(&args.topology).map_err(usage)?;
            SyntheticRigSpec::default_for(&topo, args.seed.unwrap_or(0))
        }
    };
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    if let Some(v) = args.noise {
        spec.noise_std_2d = v;
    }
    if let Some(v) = args.outlier_prob {
        spec.outlier_prob = v;
    }
    if args.samples == 0 || args.frames_per_seq == 0 {
        return Err(usage(anyhow::anyhow!(
            "--samples and --frames-per-seq must be positive"
        )));
    }
    spec.validate().map_err(usage)?;
    let samples = synthesize_dataset(&spec, args.samples, args.frames_per_seq).map_err(usage)?;
    save_dataset(path, &samples).map_err(runtime)?;
    out.write_all(synth_summary(&spec, &samples).as_bytes())
        .map_err(runtime)?;
    Ok(())
}

fn synth_summary(spec: &SyntheticRigSpec, samples: &[PoseSample]) -> String {
    let seqs: std::collections::BTreeSet<&str> = samples.iter().map(|s| s.seq.as_str()).collect();
    let mut actions: std::collections::BTreeMap<&str, usize> = std::collections::BTreeMap::new();
    for s in samples {
        *actions.entry(s.action.as_deref().unwrap_or("-")).or_default() += 1;
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    let mut extent = 0.0;
    for s in samples {
        for p in &s.joints_2d {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        if let Some(j3) = &s.joints_3d {
            extent += j3
                .iter()
                .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
                .fold(0.0, f64::max);
        }
    }
    let mut text = format!(
        "samples {}\nsequences {}\njoints {}\nmean_bone_length {:.3}\n",
        samples.len(),
        seqs.len(),
        spec.topology.num_nodes(),
        spec.mean_bone_length()
    );
    let _ = writeln!(
        text,
        "x_range {:.2} {:.2}\ny_range {:.2} {:.2}",
        lo[0], hi[0], lo[1], hi[1]
    );
    let _ = writeln!(
        text,
        "mean_max_joint_radius {:.3}",
        extent / samples.len().max(1) as f64
    );
    for (a, c) in actions {
        let _ = writeln!(text, "action {a} {c}");
    }
    text
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn graph_listing_has_rings() {
        let mut buf = Vec::new();
        cmd_graph(H36M_PRESET, Some(2), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("nodes 17 edges 16 diameter 8\n"));
        assert!(
            text.contains("14 right_shoulder\n  hop 1: 8 15\n  hop 2: 7 9 11 16\n"),
            "{text}"
        );
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["skelgnn", "frobnicate"]), EXIT_USAGE);
        assert_eq!(
            run(["skelgnn", "graph", "--topology", "/no/such/file.toml"]),
            EXIT_USAGE
        );
        assert_eq!(run(["skelgnn", "gradcheck", "--seeds", "0"]), EXIT_USAGE);
    }
}
