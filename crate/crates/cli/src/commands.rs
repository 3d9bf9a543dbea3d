use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{ArgGroup, Args};
use panofocus::evaluation::{evaluate, EvalReport, FramePrediction};
use panofocus::focuser::{run_focuser, DetectorAdapter, FocusCounts, RegionErrorPolicy};
use panofocus::geometry::{BBox, FrameSpec};
use panofocus::io::{
    detections_to_jsonl, features_to_jsonl, find_frame_image, load_annotations, load_config, load_detections, load_image,
    load_predictions, load_weights, predictions_to_jsonl, write_file, Annotations, Detections, FeatureRecord, RunConfig,
};
use panofocus::prototyper::{check_model, fixture, BppModel, GradCheck, LossSettings, FIXTURE_INIT_STD, FIXTURE_SEED};
use panofocus::recognition::{annotation_input, recognize_frame, FrameInput, Mode};
use panofocus::render::{classify, render_svg, BoxOrigin};
use rayon::prelude::*;

use crate::specs::{parse_dims, DetectorSpec, WeightsSpec};
use crate::{Cli, Command, GlobalArgs};

/// An internal invariant was violated; exits with status 2.
#[derive(Debug)]
pub struct Internal(pub String);

impl fmt::Display for Internal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Internal {}

pub fn run(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::Focus(a) => cmd_focus(&cli.global, a),
        Command::Forward(a) => cmd_forward(&cli.global, a),
        Command::Gradcheck(a) => cmd_gradcheck(&cli.global, a),
        Command::Eval(a) => cmd_eval(&cli.global, a),
        Command::Render(a) => cmd_render(&cli.global, a),
        Command::Pipeline(a) => cmd_pipeline(&cli.global, a),
    }
}

/// Defaults, then the config file, then `--set`, then dedicated flags.
fn config(global: &GlobalArgs, flags: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut overrides = Vec::new();
    for s in &global.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got '{s}'"))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    for (k, v) in flags {
        if let Some(v) = v {
            overrides.push((k.to_string(), v.clone()));
        }
    }
    Ok(load_config(global.config.as_deref(), &overrides)?)
}

fn images_dir(flag: &Option<PathBuf>, cfg: &RunConfig) -> Option<PathBuf> {
    flag.clone().or_else(|| cfg.images_dir.clone())
}

#[derive(Debug, Clone, Args)]
pub struct FocusArgs {
    /// Original detections, one JSON object per frame.
    #[arg(long)]
    pub detections: PathBuf,
    /// Directory holding `<frame_id>.png` or `.jpg` frames.
    #[arg(long)]
    pub images_dir: Option<PathBuf>,
    /// Region detector: `file:PATH` or `cmd:TEMPLATE`.
    #[arg(long)]
    pub detector: DetectorSpec,
    /// Fused detections output.
    #[arg(long)]
    pub out: PathBuf,
    /// Report failing regions as warnings instead of failing.
    #[arg(long)]
    pub skip_region_errors: bool,
    /// Run the command detector one region at a time.
    #[arg(long)]
    pub serial_detector: bool,
}

fn frame_spec(image_path: Option<&Path>, cfg: &RunConfig) -> Result<FrameSpec> {
    match image_path {
        Some(p) => {
            let (w, h) = image::image_dimensions(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(FrameSpec::new(w as f64, h as f64)?)
        }
        None => Ok(cfg.frame),
    }
}

struct FocusResult {
    fused: Detections,
    counts: Vec<(String, FocusCounts)>,
}

fn focus_frames(
    detections: &Detections,
    images: Option<&Path>,
    detector: &dyn DetectorAdapter,
    cfg: &RunConfig,
    policy: RegionErrorPolicy,
) -> Result<FocusResult> {
    let frames: Vec<(&String, &Vec<BBox>)> = detections.iter().collect();
    let one = |&(frame_id, boxes): &(&String, &Vec<BBox>)| -> Result<(Vec<BBox>, FocusCounts)> {
        let path = images.and_then(|d| find_frame_image(d, frame_id));
        let spec = frame_spec(path.as_deref(), cfg)?;
        let image = match (&path, detector.needs_image() && !boxes.is_empty()) {
            (Some(p), true) => Some(load_image(p)?),
            _ => None,
        };
        let out = run_focuser(frame_id, image.as_ref(), boxes, detector, &cfg.focuser, &spec, policy)
            .with_context(|| format!("frame {frame_id}"))?;
        for e in &out.skipped {
            eprintln!("warning: {e}");
        }
        Ok((out.fused, out.counts))
    };
    let results: Vec<Result<(Vec<BBox>, FocusCounts)>> = if detector.is_serial() {
        frames.iter().map(one).collect()
    } else {
        frames.par_iter().map(one).collect()
    };
    let mut fused = Detections::new();
    let mut counts = Vec::new();
    for ((frame_id, _), r) in frames.iter().zip(results) {
        let (boxes, c) = r?;
        fused.insert((*frame_id).clone(), boxes);
        counts.push(((*frame_id).clone(), c));
    }
    Ok(FocusResult { fused, counts })
}

fn print_counts(counts: &[(String, FocusCounts)]) {
    for (frame, c) in counts {
        println!(
            "{frame}: original={} extended={} regions={} fine={} fused={}",
            c.original, c.extended, c.regions, c.fine, c.fused
        );
    }
}

fn policy(skip: bool) -> RegionErrorPolicy {
    if skip {
        RegionErrorPolicy::Skip
    } else {
        RegionErrorPolicy::Fail
    }
}

fn cmd_focus(global: &GlobalArgs, a: &FocusArgs) -> Result<u8> {
    let cfg = config(global, &[])?;
    let detections = load_detections(&a.detections)?;
    let detector = a.detector.build(a.serial_detector)?;
    let images = images_dir(&a.images_dir, &cfg);
    let r = focus_frames(&detections, images.as_deref(), detector.as_ref(), &cfg, policy(a.skip_region_errors))?;
    write_file(&a.out, &detections_to_jsonl(&r.fused))?;
    print_counts(&r.counts);
    Ok(0)
}

#[derive(Debug, Clone, Args)]
#[command(group(ArgGroup::new("input").required(true).args(["annotations", "detections"])))]
#[command(group(ArgGroup::new("mode").args(["eval_mode", "train_mode"])))]
pub struct ForwardArgs {
    /// Ground-truth boxes and memberships.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Detections; groups are proposed from box centres.
    #[arg(long)]
    pub detections: Option<PathBuf>,
    #[arg(long)]
    pub images_dir: Option<PathBuf>,
    /// `seed:N` or a weights file. Defaults to `seed:<weight_seed>`.
    #[arg(long)]
    pub weights: Option<WeightsSpec>,
    /// No Gumbel noise (default).
    #[arg(long)]
    pub eval_mode: bool,
    /// Seeded Gumbel noise on prototype logits.
    #[arg(long)]
    pub train_mode: bool,
    /// Feature dump output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Predictions output.
    #[arg(long)]
    pub out_pred: Option<PathBuf>,
}

/// A frame with everything needed to locate its image.
struct FrameJob {
    frame_id: String,
    boxes: Vec<BBox>,
    groups: Option<Vec<Vec<usize>>>,
    image: Option<PathBuf>,
}

fn model(weights: &Option<WeightsSpec>, cfg: &RunConfig) -> Result<BppModel> {
    let spec = weights.clone().unwrap_or(WeightsSpec::Seed(cfg.weight_seed));
    spec.load(cfg.dims).context("loading weights")
}

fn forward_frames(jobs: &[FrameJob], model: &BppModel, cfg: &RunConfig, mode: Mode) -> Result<(Vec<FramePrediction>, Vec<FeatureRecord>)> {
    let results: Vec<Result<(FramePrediction, FeatureRecord)>> = jobs
        .par_iter()
        .enumerate()
        .map(|(index, job)| {
            let image = match (&job.image, job.boxes.is_empty()) {
                (Some(p), false) => Some(load_image(p)?),
                _ => None,
            };
            let input = FrameInput {
                frame_id: &job.frame_id,
                index,
                boxes: &job.boxes,
                groups: job.groups.clone(),
                image: image.as_ref(),
            };
            Ok(recognize_frame(&input, model, cfg, mode)?)
        })
        .collect();
    let mut preds = Vec::with_capacity(jobs.len());
    let mut feats = Vec::with_capacity(jobs.len());
    for r in results {
        let (p, f) = r?;
        preds.push(p);
        feats.push(f);
    }
    Ok((preds, feats))
}

fn detection_jobs(detections: &Detections, images: Option<&Path>) -> Vec<FrameJob> {
    detections
        .iter()
        .map(|(frame_id, boxes)| FrameJob {
            frame_id: frame_id.clone(),
            boxes: boxes.clone(),
            groups: None,
            image: images.and_then(|d| find_frame_image(d, frame_id)),
        })
        .collect()
}

fn annotation_jobs(annotations: &Annotations, base: &Path, images: Option<&Path>) -> Vec<FrameJob> {
    annotations
        .values()
        .map(|a| {
            let (boxes, groups) = annotation_input(a);
            let image = match &a.image_path {
                Some(p) => Some(base.join(p)),
                None => images.and_then(|d| find_frame_image(d, &a.frame_id)),
            };
            FrameJob {
                frame_id: a.frame_id.clone(),
                boxes,
                groups: Some(groups),
                image,
            }
        })
        .collect()
}

fn cmd_forward(global: &GlobalArgs, a: &ForwardArgs) -> Result<u8> {
    let cfg = config(global, &[])?;
    let images = images_dir(&a.images_dir, &cfg);
    let jobs = match (&a.annotations, &a.detections) {
        (Some(p), _) => {
            let ann = load_annotations(p, &cfg.labels())?;
            annotation_jobs(&ann, p.parent().unwrap_or(Path::new(".")), images.as_deref())
        }
        (None, Some(p)) => detection_jobs(&load_detections(p)?, images.as_deref()),
        (None, None) => bail!("one of --annotations or --detections is required"),
    };
    let model = model(&a.weights, &cfg)?;
    let mode = if a.train_mode { Mode::Train } else { Mode::Eval };
    let (preds, feats) = forward_frames(&jobs, &model, &cfg, mode)?;
    if let Some(p) = &a.out {
        write_file(p, &features_to_jsonl(&feats))?;
    }
    if let Some(p) = &a.out_pred {
        write_file(p, &predictions_to_jsonl(&preds))?;
    }
    for p in &preds {
        println!(
            "{}: individuals={} groups={} global={:?}",
            p.frame_id,
            p.individuals.len(),
            p.groups.len(),
            p.global
        );
    }
    Ok(0)
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// Seed of the model and the synthetic sample.
    #[arg(long, default_value_t = FIXTURE_SEED)]
    pub seed: u64,
    /// Architecture overrides, e.g. `d=8` or `d=8,heads=2`.
    #[arg(long, default_value = "d=8")]
    pub dims: String,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub epsilon: f64,
    /// Init std of the seeded model.
    #[arg(long, default_value_t = FIXTURE_INIT_STD)]
    pub init_std: f64,
    /// Check these weights instead of a seeded model.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Pass threshold on the maximum relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub threshold: f64,
    /// Machine-readable report.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

fn print_gradcheck(report: &GradCheck, threshold: f64) {
    println!("{:<32} {:>9} {:>12} {:>12}  status", "matrix", "shape", "max rel err", "max |grad|");
    for m in &report.matrices {
        let status = if m.max_rel_error < threshold { "ok" } else { "FAIL" };
        println!(
            "{:<32} {:>9} {:>12.3e} {:>12.3e}  {status}",
            m.name,
            format!("{}x{}", m.shape.0, m.shape.1),
            m.max_rel_error,
            m.max_abs_gradient
        );
    }
    println!(
        "loss total={:.6} recognition={:.6} detection={:.6} lambda={} epsilon={:e}",
        report.loss.total, report.loss.recognition.total, report.loss.detection.total, report.loss.lambda, report.epsilon
    );
    println!("max relative error {:.3e} (threshold {threshold:e})", report.max_rel_error());
}

fn cmd_gradcheck(global: &GlobalArgs, a: &GradcheckArgs) -> Result<u8> {
    let cfg = config(global, &[])?;
    if !(a.epsilon.is_finite() && a.epsilon > 0.0) {
        bail!("--epsilon must be positive, got {}", a.epsilon);
    }
    if !(1e-7..=1e-3).contains(&a.epsilon) {
        eprintln!("warning: epsilon {:e} is outside [1e-7, 1e-3]; expect degraded agreement", a.epsilon);
    }
    let dims = parse_dims(&a.dims, cfg.dims)?;
    let (mut model, sample) = fixture(dims, a.seed, a.init_std)?;
    if let Some(p) = &a.weights {
        model = load_weights(p, dims)?;
    }
    let settings = LossSettings {
        lambda: cfg.lambda,
        lambda_reg: cfg.lambda_reg,
        ..Default::default()
    };
    let report = check_model(&model, &sample, &settings, a.epsilon)?;
    print_gradcheck(&report, a.threshold);
    if let Some(p) = &a.json {
        write_file(p, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    }
    if report.passed(a.threshold) {
        Ok(0)
    } else {
        Err(Internal(format!(
            "gradient check failed: max relative error {:.3e} >= {:e}",
            report.max_rel_error(),
            a.threshold
        ))
        .into())
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Predictions, one JSON object per frame.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth annotations.
    #[arg(long)]
    pub gt: PathBuf,
    /// Individual matching IoU threshold.
    #[arg(long)]
    pub iou: Option<f64>,
    /// Group member-set IoU threshold.
    #[arg(long)]
    pub member_iou: Option<f64>,
    /// JSON report output.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

fn report_json(report: &EvalReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)? + "\n")
}

fn cmd_eval(global: &GlobalArgs, a: &EvalArgs) -> Result<u8> {
    let cfg = config(
        global,
        &[
            ("eval_iou", a.iou.map(|v| v.to_string())),
            ("member_iou", a.member_iou.map(|v| v.to_string())),
        ],
    )?;
    let gt = load_annotations(&a.gt, &cfg.labels())?;
    let preds = load_predictions(&a.pred, &cfg.labels())?;
    let gts: Vec<_> = gt.into_values().collect();
    let report = evaluate(&preds, &gts, &cfg.eval)?;
    print!("{}", report.to_text());
    if let Some(p) = &a.json {
        write_file(p, &report_json(&report)?)?;
    }
    Ok(0)
}

#[derive(Debug, Clone, Args)]
#[command(group(ArgGroup::new("boxes").required(true).args(["detections", "pred"])))]
pub struct RenderArgs {
    /// Detections to draw.
    #[arg(long)]
    pub detections: Option<PathBuf>,
    /// Predictions whose individual boxes are drawn.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Original detections; matching boxes are drawn gray, others red.
    #[arg(long)]
    pub original: Option<PathBuf>,
    #[arg(long)]
    pub images_dir: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn file_stem(frame_id: &str) -> String {
    frame_id.replace(['/', '\\'], "_")
}

fn cmd_render(global: &GlobalArgs, a: &RenderArgs) -> Result<u8> {
    let cfg = config(global, &[])?;
    let frames: Vec<(String, Vec<BBox>)> = match (&a.detections, &a.pred) {
        (Some(p), _) => load_detections(p)?.into_iter().collect(),
        (None, Some(p)) => load_predictions(p, &cfg.labels())?
            .into_iter()
            .map(|f| (f.frame_id, f.individuals.into_iter().map(|i| i.bbox).collect()))
            .collect(),
        (None, None) => bail!("one of --detections or --pred is required"),
    };
    let original = a.original.as_deref().map(load_detections).transpose()?;
    let images = images_dir(&a.images_dir, &cfg);
    for (frame_id, boxes) in &frames {
        let path = images.as_deref().and_then(|d| find_frame_image(d, frame_id));
        let (w, h) = match &path {
            Some(p) => image::image_dimensions(p).with_context(|| format!("reading {}", p.display()))?,
            None => (cfg.frame.width.ceil() as u32, cfg.frame.height.ceil() as u32),
        };
        let styled = match &original {
            Some(o) => classify(boxes, o.get(frame_id).map(Vec::as_slice).unwrap_or(&[])),
            None => boxes.iter().map(|b| (*b, BoxOrigin::Original)).collect(),
        };
        let href = path.as_ref().map(|p| p.display().to_string());
        let svg = render_svg(w, h, href.as_deref(), &styled);
        write_file(&a.out_dir.join(format!("{}.svg", file_stem(frame_id))), &svg)?;
    }
    println!("rendered {} frames to {}", frames.len(), a.out_dir.display());
    Ok(0)
}

#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long)]
    pub images_dir: Option<PathBuf>,
    #[arg(long)]
    pub detector: DetectorSpec,
    /// Ground-truth annotations for the final evaluation.
    #[arg(long)]
    pub gt: PathBuf,
    /// Directory receiving every artifact.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// `seed:N` or a weights file. Defaults to `seed:<weight_seed>`.
    #[arg(long)]
    pub weights: Option<WeightsSpec>,
    #[arg(long)]
    pub skip_region_errors: bool,
    #[arg(long)]
    pub serial_detector: bool,
    /// Validate every input without running or writing anything.
    #[arg(long)]
    pub dry_run: bool,
}

fn cmd_pipeline(global: &GlobalArgs, a: &PipelineArgs) -> Result<u8> {
    let cfg = config(global, &[]).context("config")?;
    let detections = load_detections(&a.detections).context("focus stage: loading detections")?;
    let gt = load_annotations(&a.gt, &cfg.labels()).context("eval stage: loading ground truth")?;
    let model = model(&a.weights, &cfg).context("forward stage")?;
    let images = images_dir(&a.images_dir, &cfg);
    if let Some(frame) = detections.keys().find(|f| !gt.contains_key(*f)) {
        bail!("eval stage: frame {frame} has detections but no ground truth");
    }
    if a.dry_run {
        a.detector.check().context("focus stage")?;
        if let Some(dir) = &images {
            for frame in detections.keys() {
                let p = find_frame_image(dir, frame).ok_or_else(|| anyhow!("focus stage: no image for frame {frame} in {}", dir.display()))?;
                image::image_dimensions(&p).with_context(|| format!("focus stage: reading {}", p.display()))?;
            }
        }
        println!(
            "dry run: {} frames, {} ground-truth frames, {} weight matrices; inputs are valid",
            detections.len(),
            gt.len(),
            model.named().len()
        );
        return Ok(0);
    }

    let detector = a.detector.build(a.serial_detector).context("focus stage")?;
    let focused = focus_frames(&detections, images.as_deref(), detector.as_ref(), &cfg, policy(a.skip_region_errors))
        .context("focus stage")?;
    write_file(&a.out_dir.join("detections.jsonl"), &detections_to_jsonl(&focused.fused))?;
    print_counts(&focused.counts);

    let jobs = detection_jobs(&focused.fused, images.as_deref());
    let (preds, feats) = forward_frames(&jobs, &model, &cfg, Mode::Eval).context("forward stage")?;
    write_file(&a.out_dir.join("features.jsonl"), &features_to_jsonl(&feats))?;
    write_file(&a.out_dir.join("predictions.jsonl"), &predictions_to_jsonl(&preds))?;

    let gts: Vec<_> = gt.into_values().collect();
    let report = evaluate(&preds, &gts, &cfg.eval).context("eval stage")?;
    write_file(&a.out_dir.join("eval.json"), &report_json(&report)?)?;
    print!("{}", report.to_text());
    Ok(0)
}
