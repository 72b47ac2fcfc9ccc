//! Subcommand implementations.

use crate::checkpoint::Checkpoint;
use crate::config::{resolve_seed, RunConfig};
use crate::{write_atomic, UsageError};
use aga_core::analysis::{
    backward_analysis, delta_summary, forward_analysis, gate_trace, guidance_comparison,
    robustness_sweep, AnalysisReport, BackwardConfig, BackwardInstance, BackwardReport,
    ForwardProbe, ForwardRow, Provenance, ReportKind, ReportPayload,
};
use aga_core::data::{generate_dataset, EmbeddingFile, TaskSpec, TrainEpisode};
use aga_core::metrics::{accuracy, mean_top_k_recall};
use aga_core::model::{AgaModel, GuidanceMode};
use aga_core::train::{collect_records, train, train_resume, OptimizerState};
use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(
    name = "aga",
    version,
    about = "Action-guided attention: data generation, training, evaluation, and analyses"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset and write it as an embedding file.
    GenerateData(GenerateDataArgs),
    /// Train a model, checkpointing every epoch.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Evaluate(EvaluateArgs),
    /// Train and evaluate across a parameter grid.
    Sweep(SweepArgs),
    /// Post-training analyses.
    Analyze(AnalyzeArgs),
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData(a) => cmd_generate_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Analyze(a) => cmd_analyze(a),
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!(UsageError(format!("{what} not found: {}", path.display())));
    }
    Ok(())
}

fn load_dataset(path: &Path, expect_d_backbone: usize, t_a: usize) -> Result<Vec<TrainEpisode>> {
    require_file(path, "data file")?;
    let file = EmbeddingFile::load(path)
        .map_err(|e| UsageError(format!("data file {}: {e}", path.display())))?;
    if file.d_backbone != expect_d_backbone {
        bail!(UsageError(format!(
            "data file {} has d_backbone {}, model expects {}",
            path.display(),
            file.d_backbone,
            expect_d_backbone
        )));
    }
    Ok(file.into_train_episodes(t_a))
}

// ── generate-data ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BuiltinTask {
    /// Anchor/successor pairs with dwell 4 and a background class.
    Default,
    /// Short-dwell variant whose queue holds several stale anchors.
    HistoryStress,
}

#[derive(Args, Debug)]
pub struct GenerateDataArgs {
    /// Task description file (TOML). Mutually exclusive with --task.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Built-in task layout.
    #[arg(long, value_enum, default_value = "default", conflicts_with = "spec")]
    pub task: BuiltinTask,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub episodes: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn cmd_generate_data(args: GenerateDataArgs) -> Result<()> {
    if args.episodes == 0 {
        bail!(UsageError("--episodes must be at least 1".into()));
    }
    let seed = resolve_seed(args.seed, None);
    let spec = match &args.spec {
        Some(path) => {
            require_file(path, "task spec")?;
            let text = std::fs::read_to_string(path)?;
            let mut spec: TaskSpec = toml::from_str(&text)
                .map_err(|e| UsageError(format!("task spec {}: {e}", path.display())))?;
            if args.seed.is_some() {
                spec.seed = seed;
            }
            spec
        }
        None => match args.task {
            BuiltinTask::Default => TaskSpec::desk_default(seed),
            BuiltinTask::HistoryStress => TaskSpec::history_stress(seed),
        },
    };
    spec.validate().map_err(|e| UsageError(e.to_string()))?;
    let episodes = generate_dataset(&spec, args.episodes, 0)?;
    let file = EmbeddingFile::from_synthetic(&episodes, spec.d_backbone());
    write_atomic(&args.out, &file.encode()?)?;
    println!(
        "wrote {} episodes ({} frames each, d_backbone {}) to {}",
        args.episodes,
        spec.t,
        spec.d_backbone(),
        args.out.display()
    );
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────────

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Resume from a checkpoint (its config snapshot takes precedence).
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

pub fn cmd_train(args: TrainArgs) -> Result<()> {
    require_file(&args.config, "config file")?;
    let (run_config, resume_from) = match &args.resume {
        Some(ckpt_path) => {
            require_file(ckpt_path, "checkpoint")?;
            let ckpt = Checkpoint::load(ckpt_path)?;
            (ckpt.run_config.clone(), Some(ckpt))
        }
        None => {
            let cfg = RunConfig::load(&args.config)?;
            let seed = resolve_seed(args.seed, Some(cfg.seed));
            (cfg.with_seed(seed), None)
        }
    };

    let data = load_dataset(&args.data, run_config.model.d_backbone, run_config.model.t_a)?;
    let eval_data = match &args.eval_data {
        Some(p) => Some(load_dataset(p, run_config.model.d_backbone, run_config.model.t_a)?),
        None => None,
    };

    std::fs::create_dir_all(&args.out)?;
    let report_path = args.out.join("report.tsv");
    let mut report_lines = String::from("epoch\tloss\tlr\ttop1_acc\ttop5_acc\tmt5r\n");

    let (mut model, mut opt, start_epoch) = match &resume_from {
        Some(ckpt) => {
            let model = ckpt.build_model()?;
            let opt = ckpt
                .optimizer_state()
                .unwrap_or_else(|| OptimizerState::new(&model));
            (model, opt, ckpt.next_epoch)
        }
        None => {
            let model = AgaModel::new(run_config.model.clone(), run_config.seed)?;
            let opt = OptimizerState::new(&model);
            (model, opt, 0)
        }
    };

    let out_dir = args.out.clone();
    let rc = run_config.clone();
    let report = train_resume(
        &mut model,
        &mut opt,
        start_epoch,
        &data,
        eval_data.as_deref(),
        &run_config.train,
        &mut |record, model, opt| {
            let line = format!(
                "{}\t{:.6}\t{:.3e}\t{:.3}\t{:.3}\t{:.3}",
                record.epoch,
                record.mean_loss,
                record.lr,
                record.metrics.top1_acc,
                record.metrics.top5_acc,
                record.metrics.mt5r
            );
            println!("epoch {line}");
            writeln!(report_lines, "{line}").ok();
            let ckpt = Checkpoint::from_model(&rc, model, Some(opt), record.epoch + 1);
            ckpt.save(&out_dir.join(format!("checkpoint_epoch_{:03}.agac", record.epoch)))
                .map_err(|e| aga_core::AgaError::invalid("checkpoint write", e.to_string()))?;
            std::fs::write(out_dir.join("report.tsv"), report_lines.as_bytes())
                .map_err(aga_core::AgaError::Io)?;
            Ok(())
        },
    )?;

    let final_ckpt = Checkpoint::from_model(&run_config, &model, Some(&opt), run_config.train.epochs);
    final_ckpt.save(&args.out.join("final.agac"))?;
    std::fs::write(&report_path, report_lines.as_bytes())?;
    if let (Some(first), Some(last)) = (report.epochs.first(), report.epochs.last()) {
        println!(
            "done: loss {:.4} -> {:.4}, final mt5r {:.2}",
            first.mean_loss, last.mean_loss, last.metrics.mt5r
        );
    }
    println!("final checkpoint: {}", args.out.join("final.agac").display());
    Ok(())
}

// ── evaluate ────────────────────────────────────────────────────────────

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated k values.
    #[arg(long, default_value = "1,5")]
    pub topk: String,
    /// Score only the final targeted timestep of each episode.
    #[arg(long)]
    pub final_only: bool,
}

pub fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    require_file(&args.checkpoint, "checkpoint")?;
    let ks = parse_usize_list(&args.topk)?;
    if ks.is_empty() {
        bail!(UsageError("--topk must list at least one k".into()));
    }
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = ckpt.build_model()?;
    let data = load_dataset(&args.data, model.cfg.d_backbone, model.cfg.t_a)?;
    let records = collect_records(&model, &data, args.final_only)?;
    println!("records={}", records.len());
    for k in ks {
        println!(
            "top{k}_acc={:.3} mt{k}r={:.3}",
            accuracy(&records, k),
            mean_top_k_recall(&records, k)
        );
    }
    Ok(())
}

// ── sweep ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    Alpha,
    Queue,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub param: SweepParam,
    /// Comma-separated parameter values.
    #[arg(long)]
    pub values: String,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Comma-separated seeds; the median over seeds is reported per value.
    #[arg(long, default_value = "1")]
    pub seeds: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_sweep(args: SweepArgs) -> Result<()> {
    require_file(&args.config, "config file")?;
    let base = RunConfig::load(&args.config)?;
    let values: Vec<f64> = parse_f64_list(&args.values)?;
    if values.is_empty() {
        bail!(UsageError("--values must list at least one value".into()));
    }
    let seeds = parse_u64_list(&args.seeds)?;
    if seeds.is_empty() {
        bail!(UsageError("--seeds must list at least one seed".into()));
    }

    let data = load_dataset(&args.data, base.model.d_backbone, base.model.t_a)?;
    let eval_data = match &args.eval_data {
        Some(p) => Some(load_dataset(p, base.model.d_backbone, base.model.t_a)?),
        None => None,
    };
    let eval_ref: &[TrainEpisode] = eval_data.as_deref().unwrap_or(&data);

    let mut tsv = String::from("param\tvalue\tseed\ttop1_acc\ttop5_acc\tmt5r\n");
    println!("param\tvalue\tmedian_mt5r\tper_seed");
    for &value in &values {
        let mut per_seed = Vec::new();
        for &seed in &seeds {
            let mut cfg = base.clone().with_seed(seed);
            match args.param {
                SweepParam::Alpha => {
                    if !(0.0..=1.0).contains(&value) {
                        bail!(UsageError(format!("alpha {value} outside [0, 1]")));
                    }
                    cfg.model.alpha = value;
                }
                SweepParam::Queue => {
                    if value < 1.0 || value.fract() != 0.0 {
                        bail!(UsageError(format!("queue length {value} must be a positive integer")));
                    }
                    cfg.model.queue_len = value as usize;
                }
            }
            let mut model = AgaModel::new(cfg.model.clone(), seed)?;
            train(&mut model, &data, Some(eval_ref), &cfg.train, &mut |_, _, _| Ok(()))?;
            let records = collect_records(&model, eval_ref, cfg.eval_final_only)?;
            let m = aga_core::train::summarize(&records);
            writeln!(
                tsv,
                "{:?}\t{value}\t{seed}\t{:.3}\t{:.3}\t{:.3}",
                args.param, m.top1_acc, m.top5_acc, m.mt5r
            )
            .ok();
            per_seed.push(m.mt5r);
        }
        let median = median_of(&mut per_seed.clone());
        println!(
            "{:?}\t{value}\t{median:.3}\t{}",
            args.param,
            per_seed
                .iter()
                .map(|v| format!("{v:.2}"))
                .collect::<Vec<_>>()
                .join(",")
        );
    }
    if let Some(out) = &args.out {
        write_atomic(out, tsv.as_bytes())?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn median_of(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[values.len() / 2]
}

// ── analyze ─────────────────────────────────────────────────────────────

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[command(subcommand)]
    pub kind: AnalyzeKind,
}

#[derive(Subcommand, Debug)]
pub enum AnalyzeKind {
    /// Head-averaged attention weights for hypothetical histories.
    Forward(ForwardArgs),
    /// Counterfactual gradient descent on stored past predictions.
    Backward(BackwardArgs),
    /// Mean gate value per timestep of one episode.
    GateTrace(GateTraceArgs),
    /// Metric degradation as stored guides are randomized.
    Robustness(RobustnessArgs),
    /// Metric comparison across guidance signal modes.
    Guidance(GuidanceArgs),
}

pub fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    match args.kind {
        AnalyzeKind::Forward(a) => cmd_analyze_forward(a),
        AnalyzeKind::Backward(a) => cmd_analyze_backward(a),
        AnalyzeKind::GateTrace(a) => cmd_analyze_gate_trace(a),
        AnalyzeKind::Robustness(a) => cmd_analyze_robustness(a),
        AnalyzeKind::Guidance(a) => cmd_analyze_guidance(a),
    }
}

fn provenance(ckpt: &Checkpoint) -> Result<Provenance> {
    Ok(Provenance {
        config: serde_json::to_string(&ckpt.run_config)?,
        checkpoint_hash: ckpt.content_hash()?,
    })
}

fn write_report(out: Option<&PathBuf>, report: &AnalysisReport) -> Result<()> {
    if let Some(path) = out {
        write_atomic(path, serde_json::to_string_pretty(report)?.as_bytes())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn load_names(path: Option<&PathBuf>) -> Result<Option<Vec<String>>> {
    match path {
        None => Ok(None),
        Some(p) => {
            require_file(p, "names file")?;
            let names = std::fs::read_to_string(p)?
                .lines()
                .map(|l| l.trim().to_string())
                .collect();
            Ok(Some(names))
        }
    }
}

fn class_label(names: Option<&Vec<String>>, idx: usize) -> String {
    names
        .and_then(|n| n.get(idx).cloned())
        .unwrap_or_else(|| idx.to_string())
}

#[derive(Args, Debug)]
pub struct ForwardArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Probe file: one `queries | candidates` row per line, comma-separated
    /// class indices, `#` comments allowed.
    #[arg(long)]
    pub probe: PathBuf,
    #[arg(long)]
    pub names: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_probe_file(path: &Path) -> Result<Vec<ForwardProbe>> {
    require_file(path, "probe file")?;
    let text = std::fs::read_to_string(path)?;
    let mut probes = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (q, c) = line.split_once('|').ok_or_else(|| {
            UsageError(format!(
                "probe file line {}: expected 'queries | candidates'",
                lineno + 1
            ))
        })?;
        probes.push(ForwardProbe {
            query_actions: parse_usize_list(q)?,
            candidate_actions: parse_usize_list(c)?,
        });
    }
    if probes.is_empty() {
        bail!(UsageError("probe file contains no probes".into()));
    }
    Ok(probes)
}

pub fn cmd_analyze_forward(args: ForwardArgs) -> Result<()> {
    require_file(&args.checkpoint, "checkpoint")?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = ckpt.build_model()?;
    let names = load_names(args.names.as_ref())?;
    let probes = parse_probe_file(&args.probe)?;
    let mut rows = Vec::new();
    for probe in &probes {
        let weights = forward_analysis(&model, probe)?;
        let rendered: Vec<String> = probe
            .candidate_actions
            .iter()
            .zip(&weights)
            .map(|(&c, w)| format!("{}={w:.4}", class_label(names.as_ref(), c)))
            .collect();
        println!(
            "query [{}] -> {}",
            probe
                .query_actions
                .iter()
                .map(|&q| class_label(names.as_ref(), q))
                .collect::<Vec<_>>()
                .join(","),
            rendered.join(" ")
        );
        rows.push(ForwardRow {
            query_actions: probe.query_actions.clone(),
            candidate_actions: probe.candidate_actions.clone(),
            weights,
        });
    }
    let report = AnalysisReport {
        kind: ReportKind::Forward,
        payload: ReportPayload::Forward(rows),
        provenance: provenance(&ckpt)?,
    };
    write_report(args.out.as_ref(), &report)
}

#[derive(Args, Debug)]
pub struct BackwardArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Episode index within the data file.
    #[arg(long, default_value = "0")]
    pub episode: usize,
    /// Analyzed timestep; defaults to the last frame.
    #[arg(long)]
    pub step: Option<usize>,
    /// Counterfactual target class.
    #[arg(long)]
    pub target: usize,
    #[arg(long, default_value = "1e2")]
    pub eta: f64,
    #[arg(long, default_value = "1e-6")]
    pub eps: f64,
    #[arg(long, default_value = "5000")]
    pub iter: usize,
    #[arg(long)]
    pub names: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the loss trace as x/y columns.
    #[arg(long)]
    pub plot_data: Option<PathBuf>,
}

pub fn cmd_analyze_backward(args: BackwardArgs) -> Result<()> {
    require_file(&args.checkpoint, "checkpoint")?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = ckpt.build_model()?;
    let data = load_dataset(&args.data, model.cfg.d_backbone, model.cfg.t_a)?;
    let episode = data
        .get(args.episode)
        .ok_or_else(|| UsageError(format!("episode {} out of range ({} episodes)", args.episode, data.len())))?;
    let t = args.step.unwrap_or(episode.features.len().saturating_sub(1));
    let names = load_names(args.names.as_ref())?;

    let cfg = BackwardConfig {
        eta: args.eta,
        eps: args.eps,
        max_iter: args.iter,
        target: args.target,
    };
    let instance = BackwardInstance::capture(&model, episode, t)?;
    let result = backward_analysis(&model, &instance, &cfg)?;
    let report_body = BackwardReport::new(&instance, &cfg, &result);

    println!(
        "target {} at t={t}: loss {:.6} -> {:.6} in {} steps ({:?})",
        class_label(names.as_ref(), args.target),
        report_body.initial_loss,
        report_body.final_loss,
        report_body.steps_taken,
        report_body.stopped
    );
    println!(
        "original top-1 {} -> optimized top-1 {}",
        class_label(names.as_ref(), report_body.original_top1),
        class_label(names.as_ref(), report_body.final_top1)
    );
    for row in delta_summary(&result.delta, 3) {
        let fmt = |list: &[(usize, f64)]| {
            list.iter()
                .map(|&(c, v)| format!("{}{:+.3}", class_label(names.as_ref(), c), v))
                .collect::<Vec<_>>()
                .join(" ")
        };
        println!(
            "entry {}: promoted {} | suppressed {}",
            row.entry,
            fmt(&row.promoted),
            fmt(&row.suppressed)
        );
    }

    if let Some(plot) = &args.plot_data {
        let mut tsv = String::from("iteration\tloss\n");
        for (i, l) in result.trace.iter().enumerate() {
            writeln!(tsv, "{i}\t{l:.12}").ok();
        }
        write_atomic(plot, tsv.as_bytes())?;
    }
    let report = AnalysisReport {
        kind: ReportKind::Backward,
        payload: ReportPayload::Backward(report_body),
        provenance: provenance(&ckpt)?,
    };
    write_report(args.out.as_ref(), &report)
}

#[derive(Args, Debug)]
pub struct GateTraceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "0")]
    pub episode: usize,
    #[arg(long)]
    pub names: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub plot_data: Option<PathBuf>,
}

pub fn cmd_analyze_gate_trace(args: GateTraceArgs) -> Result<()> {
    require_file(&args.checkpoint, "checkpoint")?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = ckpt.build_model()?;
    let data = load_dataset(&args.data, model.cfg.d_backbone, model.cfg.t_a)?;
    let episode = data
        .get(args.episode)
        .ok_or_else(|| UsageError(format!("episode {} out of range ({} episodes)", args.episode, data.len())))?;
    let names = load_names(args.names.as_ref())?;
    let trace = gate_trace(&model, episode)?;
    println!("t\taction\tmean_gate");
    for p in &trace {
        let action = p
            .action
            .map(|a| class_label(names.as_ref(), a))
            .unwrap_or_else(|| "-".into());
        println!("{}\t{}\t{:.4}", p.t, action, p.mean_gate);
    }
    if let Some(plot) = &args.plot_data {
        let mut tsv = String::from("t\tmean_gate\n");
        for p in &trace {
            writeln!(tsv, "{}\t{:.6}", p.t, p.mean_gate).ok();
        }
        write_atomic(plot, tsv.as_bytes())?;
    }
    let report = AnalysisReport {
        kind: ReportKind::GateTrace,
        payload: ReportPayload::GateTrace(trace),
        provenance: provenance(&ckpt)?,
    };
    write_report(args.out.as_ref(), &report)
}

#[derive(Args, Debug)]
pub struct RobustnessArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Cap on the number of episodes evaluated per level.
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub plot_data: Option<PathBuf>,
}

pub fn cmd_analyze_robustness(args: RobustnessArgs) -> Result<()> {
    require_file(&args.checkpoint, "checkpoint")?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = ckpt.build_model()?;
    let mut data = load_dataset(&args.data, model.cfg.d_backbone, model.cfg.t_a)?;
    if let Some(cap) = args.episodes {
        if cap == 0 {
            bail!(UsageError("--episodes must be at least 1".into()));
        }
        data.truncate(cap);
    }
    let seed = resolve_seed(args.seed, Some(ckpt.run_config.seed));
    let rows = robustness_sweep(&model, &data, seed)?;
    println!("k\tmt5r");
    for r in &rows {
        println!("{}\t{:.3}", r.k, r.mt5r);
    }
    if let Some(plot) = &args.plot_data {
        let mut tsv = String::from("k\tmt5r\n");
        for r in &rows {
            writeln!(tsv, "{}\t{:.6}", r.k, r.mt5r).ok();
        }
        write_atomic(plot, tsv.as_bytes())?;
    }
    let report = AnalysisReport {
        kind: ReportKind::Robustness,
        payload: ReportPayload::Robustness(rows),
        provenance: provenance(&ckpt)?,
    };
    write_report(args.out.as_ref(), &report)
}

#[derive(Args, Debug)]
pub struct GuidanceArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Comma-separated train:infer mode pairs; modes are full, top1, gt.
    #[arg(long, default_value = "full:full,top1:top1,gt:gt")]
    pub modes: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<GuidanceMode> {
    match s.trim() {
        "full" => Ok(GuidanceMode::SelfPredFull),
        "top1" => Ok(GuidanceMode::SelfPredTop1Onehot),
        "gt" => Ok(GuidanceMode::GroundTruthOnehot),
        other => bail!(UsageError(format!(
            "unknown guidance mode '{other}' (expected full, top1, or gt)"
        ))),
    }
}

pub fn cmd_analyze_guidance(args: GuidanceArgs) -> Result<()> {
    require_file(&args.config, "config file")?;
    let base = RunConfig::load(&args.config)?;
    let seed = resolve_seed(args.seed, Some(base.seed));
    let base = base.with_seed(seed);
    let data = load_dataset(&args.data, base.model.d_backbone, base.model.t_a)?;
    let eval_data = match &args.eval_data {
        Some(p) => load_dataset(p, base.model.d_backbone, base.model.t_a)?,
        None => data.clone(),
    };
    let mut pairs = Vec::new();
    for pair in args.modes.split(',') {
        let (t, i) = pair
            .split_once(':')
            .ok_or_else(|| UsageError(format!("mode pair '{pair}' must be train:infer")))?;
        pairs.push((parse_mode(t)?, parse_mode(i)?));
    }
    if pairs.is_empty() {
        bail!(UsageError("--modes must list at least one pair".into()));
    }
    let rows = guidance_comparison(&base.model, &base.train, seed, &data, &eval_data, &pairs)?;
    println!("train\tinfer\ttop1_acc\ttop5_acc\tmt5r");
    for r in &rows {
        println!(
            "{:?}\t{:?}\t{:.3}\t{:.3}\t{:.3}",
            r.train_mode, r.infer_mode, r.metrics.top1_acc, r.metrics.top5_acc, r.metrics.mt5r
        );
    }
    let report = AnalysisReport {
        kind: ReportKind::Guidance,
        payload: ReportPayload::Guidance(rows),
        provenance: Provenance {
            config: serde_json::to_string(&base)?,
            checkpoint_hash: String::new(),
        },
    };
    write_report(args.out.as_ref(), &report)
}

// ── small parsers ───────────────────────────────────────────────────────

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim())
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse()
                .map_err(|_| UsageError(format!("'{p}' is not a nonnegative integer")).into())
        })
        .collect()
}

fn parse_u64_list(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|p| p.trim())
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse()
                .map_err(|_| UsageError(format!("'{p}' is not a nonnegative integer")).into())
        })
        .collect()
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| p.trim())
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse()
                .map_err(|_| UsageError(format!("'{p}' is not a number")).into())
        })
        .collect()
}
