//! The `motionflow` command line.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use motionflow_core::cycle_compensator::CompensatorConfig;
use motionflow_core::flow_estimator::{estimate_flow, EstimatorConfig};
use motionflow_core::losses::CycleLossWeights;
use motionflow_core::metrics::segmentation_score;
use motionflow_core::propagation::{PropagatedPair, Provenance, TrainingSet};
use motionflow_core::synth::{ground_truth_flow, render_sequence, SceneSpec};
use motionflow_core::LabelMask;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::io;
use crate::manifest::{format_index, Dataset, Manifest};
use crate::parallel;

pub const FRAME_PATTERN: &str = "frame_%05d.png";
pub const MASK_PATTERN: &str = "mask_%05d.png";
pub const FLOW_PATTERN: &str = "flow_%05d.mflo";

#[derive(Debug, Parser)]
#[command(name = "motionflow", version, about = "Dense frame-label pairs from sparsely labeled video")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic scene with masks, flows and a manifest.
    Synth {
        /// Scene description (JSON).
        spec: PathBuf,
        /// Created if missing.
        out_dir: PathBuf,
        /// Seed of the per-frame sensor noise.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Unlabeled frames between labeled ones in the written manifest.
        #[arg(long, default_value_t = 4)]
        interval: usize,
    },
    /// Estimate the flow from frame T to frame T+1 and write it as MFLO.
    EstimateFlow {
        /// Dataset manifest (JSON).
        manifest: PathBuf,
        /// Index of the first frame of the pair.
        t: usize,
        /// Output flow file.
        out: PathBuf,
        #[command(flatten)]
        estimator: EstimatorArgs,
    },
    /// Build the labeled, relabeled and compensated training sets.
    Rearrange {
        /// Dataset manifest (JSON).
        manifest: PathBuf,
        /// Receives `labeled/`, `relabeled/`, `compensated/` and `index.json`.
        out_dir: PathBuf,
        #[command(flatten)]
        estimator: EstimatorArgs,
        #[command(flatten)]
        compensator: CompensatorArgs,
        /// Longest propagation chain; defaults to the label interval.
        #[arg(long)]
        k: Option<usize>,
        /// Worker threads (falls back to MOTIONFLOW_THREADS, then all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Score predicted masks against ground truth and print JSON.
    Evaluate {
        /// Directory of predicted 8-bit label PNGs.
        pred_dir: PathBuf,
        /// Directory of ground-truth PNGs with matching names.
        gt_dir: PathBuf,
        /// Label ids run from 0 (background) to `num_classes - 1`.
        #[arg(long)]
        num_classes: usize,
        /// Only files whose names start with this prefix are compared.
        #[arg(long, default_value = "mask_")]
        prefix: String,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct EstimatorArgs {
    /// Pyramid levels of the flow estimator.
    #[arg(long)]
    pub levels: Option<usize>,
    /// Iterations per pyramid level.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Initial descent step.
    #[arg(long)]
    pub step: Option<f64>,
    /// Weight of the photometric L1 term.
    #[arg(long)]
    pub lambda1: Option<f64>,
    /// Weight of the perceptual term.
    #[arg(long)]
    pub lambdap: Option<f64>,
    /// Weight of the flow smoothness term.
    #[arg(long)]
    pub lambdas: Option<f64>,
}

impl EstimatorArgs {
    pub fn apply(&self, mut cfg: EstimatorConfig) -> EstimatorConfig {
        if let Some(v) = self.levels {
            cfg.pyramid_levels = v;
        }
        if let Some(v) = self.iters {
            cfg.iters_per_level = v;
        }
        if let Some(v) = self.step {
            cfg.step_size = v;
        }
        if let Some(v) = self.lambda1 {
            cfg.weights.l1 = v;
        }
        if let Some(v) = self.lambdap {
            cfg.weights.perceptual = v;
        }
        if let Some(v) = self.lambdas {
            cfg.weights.smoothness = v;
        }
        cfg
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct CompensatorArgs {
    /// Cycle weights as `start,intermediate,end,perceptual`.
    #[arg(long, value_parser = parse_cycle_lambdas)]
    pub cycle_lambdas: Option<CycleLossWeights>,
    /// Iterations of the cycle refinement.
    #[arg(long)]
    pub cycle_iters: Option<usize>,
}

impl CompensatorArgs {
    pub fn apply(&self, mut cfg: CompensatorConfig) -> CompensatorConfig {
        if let Some(w) = self.cycle_lambdas {
            cfg.weights = w;
        }
        if let Some(v) = self.cycle_iters {
            cfg.iters = v;
        }
        cfg
    }
}

fn parse_cycle_lambdas(s: &str) -> Result<CycleLossWeights, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [start, intermediate, end, perceptual] => Ok(CycleLossWeights { start, intermediate, end, perceptual }),
        _ => Err(format!("expected 4 comma-separated weights, got {}", parts.len())),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let target: &mut dyn Write = if e.use_stderr() { stderr } else { stdout };
            let _ = write!(target, "{}", e.render());
            return code;
        }
    };
    match run(cli.command, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command, out: &mut dyn Write) -> CliResult<()> {
    match command {
        Command::Synth { spec, out_dir, seed, interval } => cmd_synth(&spec, &out_dir, seed, interval, out),
        Command::EstimateFlow { manifest, t, out: path, estimator } => {
            cmd_estimate_flow(&manifest, t, &path, &estimator, out)
        }
        Command::Rearrange { manifest, out_dir, estimator, compensator, k, threads } => {
            let threads = parallel::thread_count(threads)?;
            cmd_rearrange(&manifest, &out_dir, &estimator, &compensator, k, threads, out)
        }
        Command::Evaluate { pred_dir, gt_dir, num_classes, prefix } => {
            cmd_evaluate(&pred_dir, &gt_dir, num_classes, &prefix, out)
        }
    }
}

fn emit(out: &mut dyn Write, text: std::fmt::Arguments<'_>) -> CliResult<()> {
    out.write_fmt(text).map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

pub fn cmd_synth(spec_path: &Path, out_dir: &Path, seed: u64, interval: usize, out: &mut dyn Write) -> CliResult<()> {
    let spec: SceneSpec = io::read_json(spec_path)?;
    let (frames, masks) = render_sequence(&spec, seed)?;
    io::create_dir(out_dir)?;
    for (t, (frame, mask)) in frames.iter().zip(&masks).enumerate() {
        io::write_frame(&out_dir.join(format_index(FRAME_PATTERN, t)?), frame)?;
        io::write_mask(&out_dir.join(format_index(MASK_PATTERN, t)?), mask)?;
    }
    for t in 0..frames.len().saturating_sub(1) {
        io::write_flow(&out_dir.join(format_index(FLOW_PATTERN, t)?), &ground_truth_flow(&spec, t)?)?;
    }
    let manifest = Manifest {
        directory: PathBuf::from("."),
        frame_pattern: FRAME_PATTERN.into(),
        label_pattern: MASK_PATTERN.into(),
        num_frames: frames.len(),
        labeled: (0..frames.len()).step_by(interval + 1).collect(),
        interval,
        num_classes: spec.num_classes(),
        ground_truth_pattern: Some(MASK_PATTERN.into()),
        estimator: None,
        compensator: None,
    };
    io::write_json(&out_dir.join("manifest.json"), &manifest)?;
    io::write_json(&out_dir.join("scene.json"), &spec)?;
    emit(out, format_args!("wrote {} frames to {}\n", frames.len(), out_dir.display()))
}

pub fn cmd_estimate_flow(
    manifest: &Path,
    t: usize,
    out_path: &Path,
    args: &EstimatorArgs,
    out: &mut dyn Write,
) -> CliResult<()> {
    let data = Dataset::load(manifest)?;
    let cfg = args.apply(data.manifest.estimator.unwrap_or_default());
    let (src, dst) = (data.frame(t)?, data.frame(t + 1)?);
    let est = estimate_flow(&src, &dst, &cfg)?;
    io::write_flow(out_path, &est.flow)?;
    let n = est.flow.u().len() as f64;
    emit(
        out,
        format_args!(
            "mean flow ({:.4}, {:.4}), final loss {:.6}\n",
            est.flow.u().iter().sum::<f64>() / n,
            est.flow.v().iter().sum::<f64>() / n,
            est.final_loss
        ),
    )
}

#[derive(Debug, Serialize)]
struct IndexEntry {
    set: &'static str,
    provenance: Provenance,
    source_index: usize,
    target_time: f64,
    k: i32,
    frame: String,
    mask: String,
}

#[derive(Debug, Serialize)]
struct Index {
    num_labeled: usize,
    num_relabeled: usize,
    num_compensated: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    relabeled_mean_iou: Option<f64>,
    pairs: Vec<IndexEntry>,
}

fn write_pairs(out_dir: &Path, set: &'static str, pairs: &[PropagatedPair]) -> CliResult<Vec<IndexEntry>> {
    let dir = out_dir.join(set);
    io::create_dir(&dir)?;
    pairs
        .iter()
        .map(|p| {
            let stem = match p.provenance {
                Provenance::Compensated => format!("{:05}_mid", p.source_index),
                _ => format!("{:05}", p.target_time as usize),
            };
            let frame = format!("{set}/frame_{stem}.png");
            let mask = format!("{set}/mask_{stem}.png");
            io::write_frame(&out_dir.join(&frame), &p.frame)?;
            io::write_mask(&out_dir.join(&mask), &p.label)?;
            Ok(IndexEntry {
                set,
                provenance: p.provenance,
                source_index: p.source_index,
                target_time: p.target_time,
                k: p.step,
                frame,
                mask,
            })
        })
        .collect()
}

/// Mean IoU of the relabeled masks against ground truth, overall and per
/// propagation distance.
pub fn relabel_scores(
    relabeled: &[PropagatedPair],
    gt: &[LabelMask],
    num_classes: usize,
) -> CliResult<(f64, BTreeMap<u32, f64>)> {
    let mut by_k: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    let mut total = 0.0;
    for p in relabeled {
        let iou = segmentation_score(&p.label, &gt[p.target_time as usize], num_classes)?.mean_iou;
        total += iou;
        let e = by_k.entry(p.step.unsigned_abs()).or_insert((0.0, 0));
        e.0 += iou;
        e.1 += 1;
    }
    let mean = if relabeled.is_empty() { 1.0 } else { total / relabeled.len() as f64 };
    Ok((mean, by_k.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()))
}

pub fn cmd_rearrange(
    manifest: &Path,
    out_dir: &Path,
    est: &EstimatorArgs,
    comp: &CompensatorArgs,
    k: Option<usize>,
    threads: usize,
    out: &mut dyn Write,
) -> CliResult<()> {
    let data = Dataset::load(manifest)?;
    let seq = data.sequence()?;
    let gt = data.ground_truth()?;
    let cfg = est.apply(data.manifest.estimator.unwrap_or_default());
    let ccfg = comp.apply(data.manifest.compensator.unwrap_or_default());
    let pool = parallel::pool(threads)?;
    let TrainingSet { labeled, relabeled, compensated } =
        parallel::rearrange(&pool, &seq, &cfg, &ccfg, k.unwrap_or(seq.interval()))?;

    io::create_dir(out_dir)?;
    let mut pairs = write_pairs(out_dir, "labeled", &labeled)?;
    pairs.extend(write_pairs(out_dir, "relabeled", &relabeled)?);
    pairs.extend(write_pairs(out_dir, "compensated", &compensated)?);
    let scores = gt.map(|gt| relabel_scores(&relabeled, &gt, seq.num_classes())).transpose()?;
    let index = Index {
        num_labeled: labeled.len(),
        num_relabeled: relabeled.len(),
        num_compensated: compensated.len(),
        relabeled_mean_iou: scores.as_ref().map(|s| s.0),
        pairs,
    };
    io::write_json(&out_dir.join("index.json"), &index)?;

    emit(out, format_args!("N = {}, M = {}, |D_C| = {}\n", labeled.len(), relabeled.len(), compensated.len()))?;
    if let Some((mean, by_k)) = scores {
        let per_k: Vec<String> = by_k.iter().map(|(k, v)| format!("|k|={k}: {v:.4}")).collect();
        emit(out, format_args!("D_R mean IoU vs ground truth: {mean:.4} ({})\n", per_k.join(", ")))?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct ClassScore {
    iou: f64,
    dice: f64,
}

#[derive(Debug, Serialize)]
struct Evaluation {
    files: usize,
    per_class: BTreeMap<u8, ClassScore>,
    mean_iou: f64,
    mean_dice: f64,
}

fn mask_files(dir: &Path, prefix: &str) -> CliResult<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let name = entry.map_err(|e| CliError::io(dir, e))?.file_name().to_string_lossy().into_owned();
        if name.starts_with(prefix) && name.ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Masks stacked top to bottom, so one score covers every file.
fn stack(masks: &[LabelMask]) -> CliResult<LabelMask> {
    let w = masks[0].width();
    if masks.iter().any(|m| m.width() != w) {
        return Err(CliError::input("masks differ in width"));
    }
    let ids: Vec<u8> = masks.iter().flat_map(|m| m.ids().iter().copied()).collect();
    let h = masks.iter().map(LabelMask::height).sum();
    Ok(LabelMask::new(h, w, ids)?)
}

/// Scores every `prefix*.png` of `pred_dir` against the file of the same
/// name in `gt_dir`, pooling pixels over all files.
pub fn cmd_evaluate(pred_dir: &Path, gt_dir: &Path, num_classes: usize, prefix: &str, out: &mut dyn Write) -> CliResult<()> {
    let names = mask_files(pred_dir, prefix)?;
    if names.is_empty() {
        return Err(CliError::input(format!("no {prefix}*.png files in {}", pred_dir.display())));
    }
    let mut pred = Vec::with_capacity(names.len());
    let mut gt = Vec::with_capacity(names.len());
    for name in &names {
        let p = io::read_mask(&pred_dir.join(name))?;
        let g = io::read_mask(&gt_dir.join(name))?;
        if !p.same_dims(&g) {
            return Err(CliError::input(format!("{name}: prediction and ground truth differ in size")));
        }
        pred.push(p);
        gt.push(g);
    }
    let score = segmentation_score(&stack(&pred)?, &stack(&gt)?, num_classes)?;
    let per_class = score
        .per_class_iou
        .iter()
        .map(|(&c, &iou)| (c, ClassScore { iou, dice: score.per_class_dice[&c] }))
        .collect();
    let report = Evaluation { files: names.len(), per_class, mean_iou: score.mean_iou, mean_dice: score.mean_dice };
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    emit(out, format_args!("{text}\n"))
}
