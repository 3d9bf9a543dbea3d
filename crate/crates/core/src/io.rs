//! File formats, run configuration and image access.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{EvalConfig, FrameAnnotation, FramePrediction};
use crate::focuser::FocuserConfig;
use crate::geometry::{BBox, FrameSpec};
use crate::prototyper::{BppModel, Hierarchy, Matrix, ModelDims, PrototypeError};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: {context}: {message}")]
    Invalid { path: PathBuf, context: String, message: String },
    #[error("{path}:{line}: unknown configuration key '{key}'")]
    UnknownKey { path: PathBuf, line: usize, key: String },
    #[error("configuration key '{key}': {message}")]
    Value { key: String, message: String },
    #[error("cannot load image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Weights { path: PathBuf, source: PrototypeError },
}

type Result<T> = std::result::Result<T, IoError>;

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| IoError::Read {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `contents` to `path`, creating parent directories.
pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    let wrap = |source| IoError::Write {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(wrap)?;
    }
    fs::write(path, contents).map_err(wrap)
}

fn invalid(path: &Path, context: impl Into<String>, message: impl ToString) -> IoError {
    IoError::Invalid {
        path: path.to_path_buf(),
        context: context.into(),
        message: message.to_string(),
    }
}

/// Parses a JSON-lines document; blank lines are skipped. Returns each record
/// with its 1-based line number.
fn parse_jsonl<T: DeserializeOwned>(path: &Path, text: &str) -> Result<Vec<(usize, T)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| IoError::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push((n + 1, rec));
    }
    Ok(out)
}

fn to_jsonl<T: Serialize>(records: impl IntoIterator<Item = T>) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(&r).expect("serialisable record"));
        s.push('\n');
    }
    s
}

/// One line of `detections.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub frame_id: String,
    pub boxes: Vec<BBox>,
}

/// Detections per frame in file order.
pub type Detections = IndexMap<String, Vec<BBox>>;

pub fn parse_detections(path: &Path, text: &str) -> Result<Detections> {
    let mut out = Detections::new();
    for (line, rec) in parse_jsonl::<DetectionRecord>(path, text)? {
        for (i, b) in rec.boxes.iter().enumerate() {
            b.validate().map_err(|e| IoError::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("boxes[{i}]: {e}"),
            })?;
        }
        if out.insert(rec.frame_id.clone(), rec.boxes).is_some() {
            return Err(IoError::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("duplicate frame_id {}", rec.frame_id),
            });
        }
    }
    Ok(out)
}

pub fn load_detections(path: &Path) -> Result<Detections> {
    parse_detections(path, &read(path)?)
}

pub fn detections_to_jsonl(detections: &Detections) -> String {
    to_jsonl(detections.iter().map(|(frame_id, boxes)| DetectionRecord {
        frame_id: frame_id.clone(),
        boxes: boxes.clone(),
    }))
}

pub fn save_detections(path: &Path, detections: &Detections) -> Result<()> {
    write_file(path, &detections_to_jsonl(detections))
}

/// Sizes of the three label spaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelSpace {
    pub actions: usize,
    pub group_activities: usize,
    pub global_activities: usize,
}

impl Default for LabelSpace {
    fn default() -> Self {
        Self::from(&ModelDims::default())
    }
}

impl From<&ModelDims> for LabelSpace {
    fn from(d: &ModelDims) -> Self {
        Self {
            actions: d.num_actions,
            group_activities: d.num_group_activities,
            global_activities: d.num_global_activities,
        }
    }
}

fn check_labels(labels: &[usize], classes: usize) -> std::result::Result<(), String> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(l) => Err(format!("label {l} is outside 0..{classes}")),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationsFile {
    pub frames: Vec<FrameAnnotation>,
}

/// Checks identities, memberships, boxes and label ranges of one frame.
pub fn validate_annotation(frame: &FrameAnnotation, labels: &LabelSpace) -> std::result::Result<(), String> {
    let mut ids = HashSet::new();
    for (i, ind) in frame.individuals.iter().enumerate() {
        if !ids.insert(ind.id) {
            return Err(format!("duplicate identity {}", ind.id));
        }
        ind.bbox.validate().map_err(|e| format!("individuals[{i}].box: {e}"))?;
        check_labels(&ind.actions, labels.actions).map_err(|e| format!("individuals[{i}].actions: {e}"))?;
    }
    let mut grouped = HashSet::new();
    for (g, group) in frame.groups.iter().enumerate() {
        if group.members.is_empty() {
            return Err(format!("groups[{g}] has no members"));
        }
        for m in &group.members {
            if !ids.contains(m) {
                return Err(format!("groups[{g}].members: identity {m} is not an individual of this frame"));
            }
            if !grouped.insert(*m) {
                return Err(format!("groups[{g}].members: identity {m} belongs to more than one group"));
            }
        }
        check_labels(&group.activities, labels.group_activities).map_err(|e| format!("groups[{g}].activities: {e}"))?;
    }
    check_labels(&frame.global, labels.global_activities).map_err(|e| format!("global: {e}"))
}

/// Ground truth per frame in file order.
pub type Annotations = IndexMap<String, FrameAnnotation>;

pub fn parse_annotations(path: &Path, text: &str, labels: &LabelSpace) -> Result<Annotations> {
    let file: AnnotationsFile = serde_json::from_str(text).map_err(|e| IoError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let mut out = Annotations::new();
    for frame in file.frames {
        validate_annotation(&frame, labels).map_err(|m| invalid(path, format!("frame {}", frame.frame_id), m))?;
        if out.contains_key(&frame.frame_id) {
            return Err(invalid(path, format!("frame {}", frame.frame_id), "duplicate frame_id"));
        }
        out.insert(frame.frame_id.clone(), frame);
    }
    Ok(out)
}

pub fn load_annotations(path: &Path, labels: &LabelSpace) -> Result<Annotations> {
    parse_annotations(path, &read(path)?, labels)
}

pub fn annotations_to_json(annotations: &Annotations) -> String {
    let file = AnnotationsFile {
        frames: annotations.values().cloned().collect(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("serialisable annotations");
    s.push('\n');
    s
}

/// Checks boxes, member indices and label ranges of a prediction.
pub fn validate_prediction(p: &FramePrediction, labels: &LabelSpace) -> std::result::Result<(), String> {
    for (i, ind) in p.individuals.iter().enumerate() {
        ind.bbox.validate().map_err(|e| format!("individuals[{i}].box: {e}"))?;
        check_labels(&ind.actions, labels.actions).map_err(|e| format!("individuals[{i}].actions: {e}"))?;
    }
    for (g, group) in p.groups.iter().enumerate() {
        if let Some(m) = group.members.iter().find(|&&m| m >= p.individuals.len()) {
            return Err(format!("groups[{g}].members: index {m} is out of range"));
        }
        check_labels(&group.activities, labels.group_activities).map_err(|e| format!("groups[{g}].activities: {e}"))?;
    }
    check_labels(&p.global, labels.global_activities).map_err(|e| format!("global: {e}"))
}

pub fn parse_predictions(path: &Path, text: &str, labels: &LabelSpace) -> Result<Vec<FramePrediction>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, p) in parse_jsonl::<FramePrediction>(path, text)? {
        let fail = |message: String| IoError::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        validate_prediction(&p, labels).map_err(fail)?;
        if !seen.insert(p.frame_id.clone()) {
            return Err(fail(format!("duplicate frame_id {}", p.frame_id)));
        }
        out.push(p);
    }
    Ok(out)
}

pub fn load_predictions(path: &Path, labels: &LabelSpace) -> Result<Vec<FramePrediction>> {
    parse_predictions(path, &read(path)?, labels)
}

pub fn predictions_to_jsonl(preds: &[FramePrediction]) -> String {
    to_jsonl(preds)
}

pub fn save_predictions(path: &Path, preds: &[FramePrediction]) -> Result<()> {
    write_file(path, &predictions_to_jsonl(preds))
}

/// One named matrix in `weights.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightEntry {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

pub fn weights_to_json(model: &BppModel) -> String {
    let map: BTreeMap<String, WeightEntry> = model
        .named()
        .into_iter()
        .map(|(name, m)| {
            let shape = [m.rows(), m.cols()];
            (name, WeightEntry { shape, data: m.into_vec() })
        })
        .collect();
    let mut s = serde_json::to_string(&map).expect("serialisable weights");
    s.push('\n');
    s
}

pub fn save_weights(path: &Path, model: &BppModel) -> Result<()> {
    write_file(path, &weights_to_json(model))
}

/// Parses `weights.json` and checks it against the architecture given by
/// `dims`: every parameter present exactly once with its expected shape and
/// finite values.
pub fn parse_weights(path: &Path, text: &str, dims: ModelDims) -> Result<BppModel> {
    let map: BTreeMap<String, WeightEntry> = serde_json::from_str(text).map_err(|e| IoError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let wrap = |source| IoError::Weights {
        path: path.to_path_buf(),
        source,
    };
    let mut model = BppModel::seeded(dims, 0).map_err(wrap)?;
    let expected: HashSet<String> = model.named().into_iter().map(|(n, _)| n).collect();
    if let Some(unknown) = map.keys().find(|k| !expected.contains(*k)) {
        return Err(wrap(PrototypeError::UnknownParameter(unknown.clone())));
    }
    for name in &expected {
        let entry = map
            .get(name)
            .ok_or_else(|| invalid(path, name.clone(), "parameter is missing"))?;
        let [r, c] = entry.shape;
        if entry.data.len() != r * c {
            return Err(invalid(
                path,
                name.clone(),
                format!("shape {r}x{c} needs {} values, found {}", r * c, entry.data.len()),
            ));
        }
        model.set(name, Matrix::from_vec(r, c, entry.data.clone())).map_err(wrap)?;
    }
    model.validate().map_err(wrap)?;
    Ok(model)
}

pub fn load_weights(path: &Path, dims: ModelDims) -> Result<BppModel> {
    parse_weights(path, &read(path)?, dims)
}

/// One line of the feature dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureRecord {
    pub frame_id: String,
    pub individual: Vec<Vec<f64>>,
    pub group: Vec<Vec<f64>>,
    pub global: Vec<f64>,
}

impl FeatureRecord {
    pub fn from_hierarchy(frame_id: &str, h: &Hierarchy) -> Self {
        Self {
            frame_id: frame_id.to_string(),
            individual: h.individual.to_rows(),
            group: h.group.to_rows(),
            global: h.global.row(0).to_vec(),
        }
    }
}

pub fn features_to_jsonl(records: &[FeatureRecord]) -> String {
    to_jsonl(records)
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|e| IoError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// `dir/<frame_id>.png`, `.jpg` or `.jpeg`, whichever exists first.
pub fn find_frame_image(dir: &Path, frame_id: &str) -> Option<PathBuf> {
    ["png", "jpg", "jpeg"]
        .iter()
        .map(|ext| dir.join(format!("{frame_id}.{ext}")))
        .find(|p| p.is_file())
}

/// Every tunable of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub focuser: FocuserConfig,
    pub dims: ModelDims,
    /// Weight of the detection loss in the total loss.
    pub lambda: f64,
    /// Weight of the IoU term in the detection loss.
    pub lambda_reg: f64,
    pub weight_seed: u64,
    pub gumbel_seed: u64,
    pub gumbel_scale: f64,
    pub projection_seed: u64,
    pub patch_size: u32,
    /// Centre distance in pixels below which individuals are linked into a
    /// group.
    pub group_threshold: f64,
    /// Sigmoid probability at or above which a label is predicted.
    pub prediction_threshold: f64,
    pub eval: EvalConfig,
    /// Frame size used when no image is available.
    pub frame: FrameSpec,
    pub images_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            focuser: FocuserConfig::default(),
            dims: ModelDims::default(),
            lambda: 1e-3,
            lambda_reg: 5.0,
            weight_seed: 0,
            gumbel_seed: 0,
            gumbel_scale: 1.0,
            projection_seed: 0,
            patch_size: 16,
            group_threshold: 100.0,
            prediction_threshold: 0.5,
            eval: EvalConfig::default(),
            frame: FrameSpec::PANORAMIC,
            images_dir: None,
            out_dir: None,
        }
    }
}

/// Accepted configuration keys, in documentation order.
pub const CONFIG_KEYS: &[&str] = &[
    "theta",
    "beta1",
    "beta2",
    "nms_iou",
    "min_merge_count",
    "min_region_size",
    "dim",
    "heads",
    "prototypes",
    "max_tokens",
    "mlp_ratio",
    "num_actions",
    "num_group_activities",
    "num_global_activities",
    "lambda",
    "lambda_reg",
    "weight_seed",
    "gumbel_seed",
    "gumbel_scale",
    "projection_seed",
    "patch_size",
    "group_threshold",
    "prediction_threshold",
    "eval_iou",
    "member_iou",
    "frame_width",
    "frame_height",
    "images_dir",
    "out_dir",
];

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| IoError::Value {
        key: key.to_string(),
        message: format!("cannot parse '{value}': {e}"),
    })
}

impl RunConfig {
    /// Sets one key from its textual value. Range checks happen in
    /// [`RunConfig::validate`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "theta" => self.focuser.theta = parse_value(key, value)?,
            "beta1" => self.focuser.beta1 = parse_value(key, value)?,
            "beta2" => self.focuser.beta2 = parse_value(key, value)?,
            "nms_iou" => self.focuser.nms_iou = parse_value(key, value)?,
            "min_merge_count" => self.focuser.min_merge_count = parse_value(key, value)?,
            "min_region_size" => self.focuser.min_region_size = parse_value(key, value)?,
            "dim" => self.dims.dim = parse_value(key, value)?,
            "heads" => self.dims.heads = parse_value(key, value)?,
            "prototypes" => self.dims.prototypes = parse_value(key, value)?,
            "max_tokens" => self.dims.max_tokens = parse_value(key, value)?,
            "mlp_ratio" => self.dims.mlp_ratio = parse_value(key, value)?,
            "num_actions" => self.dims.num_actions = parse_value(key, value)?,
            "num_group_activities" => self.dims.num_group_activities = parse_value(key, value)?,
            "num_global_activities" => self.dims.num_global_activities = parse_value(key, value)?,
            "lambda" => self.lambda = parse_value(key, value)?,
            "lambda_reg" => self.lambda_reg = parse_value(key, value)?,
            "weight_seed" => self.weight_seed = parse_value(key, value)?,
            "gumbel_seed" => self.gumbel_seed = parse_value(key, value)?,
            "gumbel_scale" => self.gumbel_scale = parse_value(key, value)?,
            "projection_seed" => self.projection_seed = parse_value(key, value)?,
            "patch_size" => self.patch_size = parse_value(key, value)?,
            "group_threshold" => self.group_threshold = parse_value(key, value)?,
            "prediction_threshold" => self.prediction_threshold = parse_value(key, value)?,
            "eval_iou" => self.eval.iou_threshold = parse_value(key, value)?,
            "member_iou" => self.eval.member_iou_threshold = parse_value(key, value)?,
            "frame_width" => self.frame.width = parse_value(key, value)?,
            "frame_height" => self.frame.height = parse_value(key, value)?,
            "images_dir" => self.images_dir = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            _ => {
                return Err(IoError::Value {
                    key: key.to_string(),
                    message: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| {
            Err(IoError::Value {
                key: key.to_string(),
                message: message.to_string(),
            })
        };
        let f = &self.focuser;
        if !(f.theta.is_finite() && f.theta > 0.0) {
            return bad("theta", "must be > 0");
        }
        if !(f.beta1.is_finite() && f.beta1 >= 1.0) {
            return bad("beta1", "must be >= 1");
        }
        if !(f.beta2.is_finite() && f.beta2 >= 1.0) {
            return bad("beta2", "must be >= 1");
        }
        if !(f.nms_iou > 0.0 && f.nms_iou < 1.0) {
            return bad("nms_iou", "must lie in (0, 1)");
        }
        if f.min_merge_count < 1 {
            return bad("min_merge_count", "must be >= 1");
        }
        if !(f.min_region_size.is_finite() && f.min_region_size >= 0.0) {
            return bad("min_region_size", "must be >= 0");
        }
        self.dims.validate().map_err(|e| IoError::Value {
            key: "dim".into(),
            message: e.to_string(),
        })?;
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda", "must be >= 0");
        }
        if !(self.lambda_reg.is_finite() && self.lambda_reg >= 0.0) {
            return bad("lambda_reg", "must be >= 0");
        }
        if !(self.gumbel_scale.is_finite() && self.gumbel_scale >= 0.0) {
            return bad("gumbel_scale", "must be >= 0");
        }
        if self.patch_size == 0 {
            return bad("patch_size", "must be >= 1");
        }
        if !(self.group_threshold.is_finite() && self.group_threshold > 0.0) {
            return bad("group_threshold", "must be > 0");
        }
        if !(self.prediction_threshold > 0.0 && self.prediction_threshold < 1.0) {
            return bad("prediction_threshold", "must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.eval.iou_threshold) {
            return bad("eval_iou", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.eval.member_iou_threshold) {
            return bad("member_iou", "must lie in [0, 1)");
        }
        if FrameSpec::new(self.frame.width, self.frame.height).is_err() {
            return bad("frame_width", "frame size must be positive");
        }
        Ok(())
    }

    /// Canonical `key = value` text holding every key.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let f = &self.focuser;
        put("theta", f.theta.to_string());
        put("beta1", f.beta1.to_string());
        put("beta2", f.beta2.to_string());
        put("nms_iou", f.nms_iou.to_string());
        put("min_merge_count", f.min_merge_count.to_string());
        put("min_region_size", f.min_region_size.to_string());
        let d = &self.dims;
        put("dim", d.dim.to_string());
        put("heads", d.heads.to_string());
        put("prototypes", d.prototypes.to_string());
        put("max_tokens", d.max_tokens.to_string());
        put("mlp_ratio", d.mlp_ratio.to_string());
        put("num_actions", d.num_actions.to_string());
        put("num_group_activities", d.num_group_activities.to_string());
        put("num_global_activities", d.num_global_activities.to_string());
        put("lambda", self.lambda.to_string());
        put("lambda_reg", self.lambda_reg.to_string());
        put("weight_seed", self.weight_seed.to_string());
        put("gumbel_seed", self.gumbel_seed.to_string());
        put("gumbel_scale", self.gumbel_scale.to_string());
        put("projection_seed", self.projection_seed.to_string());
        put("patch_size", self.patch_size.to_string());
        put("group_threshold", self.group_threshold.to_string());
        put("prediction_threshold", self.prediction_threshold.to_string());
        put("eval_iou", self.eval.iou_threshold.to_string());
        put("member_iou", self.eval.member_iou_threshold.to_string());
        put("frame_width", self.frame.width.to_string());
        put("frame_height", self.frame.height.to_string());
        if let Some(p) = &self.images_dir {
            put("images_dir", p.display().to_string());
        }
        if let Some(p) = &self.out_dir {
            put("out_dir", p.display().to_string());
        }
        s
    }

    pub fn labels(&self) -> LabelSpace {
        LabelSpace::from(&self.dims)
    }
}

/// Parses `key = value` lines. `#` starts a comment; blank lines are
/// ignored. Returns `(line, key, value)` triples.
pub fn parse_config_text(path: &Path, text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| IoError::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: format!("expected 'key = value', found '{line}'"),
        })?;
        let key = k.trim().to_string();
        if !CONFIG_KEYS.contains(&key.as_str()) {
            return Err(IoError::UnknownKey {
                path: path.to_path_buf(),
                line: n + 1,
                key,
            });
        }
        out.push((n + 1, key, v.trim().to_string()));
    }
    Ok(out)
}

/// Defaults, then the file (when given), then `overrides`, each later source
/// taking precedence. The result is range-checked.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = path {
        for (line, key, value) in parse_config_text(path, &read(path)?)? {
            cfg.set(&key, &value).map_err(|e| IoError::Parse {
                path: path.to_path_buf(),
                line,
                message: e.to_string(),
            })?;
        }
    }
    for (key, value) in overrides {
        cfg.set(key, value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{AnnotatedGroup, AnnotatedIndividual};

    fn p() -> PathBuf {
        PathBuf::from("test.jsonl")
    }

    #[test]
    fn detections_schema_example() {
        let text = r#"{"frame_id":"f1","boxes":[{"x":0,"y":0,"w":10,"h":10,"score":0.9}]}"#;
        let d = parse_detections(&p(), text).unwrap();
        assert_eq!(d["f1"], vec![BBox::scored(0., 0., 10., 10., 0.9).unwrap()]);
        assert!(parse_detections(&p(), "").unwrap().is_empty());
    }

    #[test]
    fn detection_errors_name_line_and_field() {
        let text = "\n{\"frame_id\":\"f1\",\"boxes\":[{\"x\":0,\"y\":0,\"w\":10,\"h\":10,\"score\":1.5}]}";
        let e = parse_detections(&p(), text).unwrap_err().to_string();
        assert!(e.contains(":2:") && e.contains("score"), "{e}");
        let e = parse_detections(&p(), r#"{"frame_id":"f1","boxes":[{"x":0,"y":0,"w":-1,"h":10}]}"#).unwrap_err();
        assert!(e.to_string().contains("w=-1"), "{e}");
        let e = parse_detections(&p(), "not json").unwrap_err();
        assert!(matches!(e, IoError::Parse { line: 1, .. }));
        let e = parse_detections(&p(), r#"{"frame_id":"f1","boxes":[],"extra":1}"#).unwrap_err();
        assert!(e.to_string().contains("extra"), "{e}");
    }

    #[test]
    fn detections_round_trip() {
        let text = r#"{"frame_id":"b","boxes":[{"x":1.5,"y":0.0,"w":10.0,"h":10.0,"score":0.25}]}
{"frame_id":"a","boxes":[]}
"#;
        let d = parse_detections(&p(), text).unwrap();
        assert_eq!(detections_to_jsonl(&d), text);
    }

    fn frame() -> FrameAnnotation {
        FrameAnnotation {
            frame_id: "f".into(),
            image_path: None,
            individuals: vec![AnnotatedIndividual {
                id: 1,
                bbox: BBox::new(0., 0., 5., 5.).unwrap(),
                actions: vec![3],
            }],
            groups: vec![AnnotatedGroup { members: vec![1], activities: vec![0] }],
            global: vec![2],
        }
    }

    #[test]
    fn annotation_validation() {
        let labels = LabelSpace::default();
        assert!(validate_annotation(&frame(), &labels).is_ok());
        let mut f = frame();
        f.groups[0].members.push(9);
        assert!(validate_annotation(&f, &labels).unwrap_err().contains("identity 9"));
        let mut f = frame();
        f.individuals.push(f.individuals[0].clone());
        assert!(validate_annotation(&f, &labels).unwrap_err().contains("duplicate identity"));
        let mut f = frame();
        f.global = vec![7];
        assert!(validate_annotation(&f, &labels).is_err());
    }

    #[test]
    fn annotations_round_trip() {
        let mut a = Annotations::new();
        a.insert("f".into(), frame());
        let text = annotations_to_json(&a);
        let back = parse_annotations(&p(), &text, &LabelSpace::default()).unwrap();
        assert_eq!(back, a);
        assert_eq!(annotations_to_json(&back), text);
    }

    #[test]
    fn predictions_round_trip_and_validation() {
        let pred = FramePrediction::from_annotation(&frame());
        let text = predictions_to_jsonl(std::slice::from_ref(&pred));
        let back = parse_predictions(&p(), &text, &LabelSpace::default()).unwrap();
        assert_eq!(back, vec![pred.clone()]);
        let mut bad = pred;
        bad.groups[0].members = vec![4];
        let text = predictions_to_jsonl(&[bad]);
        assert!(parse_predictions(&p(), &text, &LabelSpace::default()).is_err());
    }

    #[test]
    fn weights_round_trip_and_checks() {
        let dims = ModelDims { dim: 8, max_tokens: 4, ..Default::default() };
        let model = BppModel::seeded(dims, 3).unwrap();
        let text = weights_to_json(&model);
        let back = parse_weights(&p(), &text, dims).unwrap();
        assert_eq!(back, model);
        assert_eq!(weights_to_json(&back), text);

        let other = ModelDims { dim: 16, ..dims };
        assert!(parse_weights(&p(), &text, other).is_err());
        let nan = text.replacen("0.", "NaN", 1);
        assert!(matches!(parse_weights(&p(), &nan, dims), Err(IoError::Parse { .. })));
        let missing = text.replace("\"detection.bias\"", "\"detection.extra\"");
        assert!(parse_weights(&p(), &missing, dims).is_err());
    }

    #[test]
    fn config_defaults_and_precedence() {
        let cfg = load_config(None, &[]).unwrap();
        assert_eq!(cfg.focuser.theta, 48.0);
        assert_eq!((cfg.focuser.beta1, cfg.focuser.beta2), (1.5, 1.8));
        assert_eq!(cfg.lambda, 1e-3);
        assert_eq!(cfg.lambda_reg, 5.0);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(&path, "# comment\nnms_iou = 0.6  # trailing\n\nlambda=0.01\n").unwrap();
        let cfg = load_config(Some(&path), &[]).unwrap();
        assert_eq!(cfg.focuser.nms_iou, 0.6);
        assert_eq!(cfg.lambda, 0.01);
        let cfg = load_config(Some(&path), &[("nms_iou".into(), "0.7".into())]).unwrap();
        assert_eq!(cfg.focuser.nms_iou, 0.7);
    }

    #[test]
    fn config_errors() {
        assert!(load_config(None, &[("theta".into(), "-1".into())]).is_err());
        assert!(load_config(None, &[("theta".into(), "abc".into())]).is_err());
        assert!(load_config(None, &[("bogus".into(), "1".into())]).is_err());
        let e = parse_config_text(&p(), "theta = 4\nbogus = 1\n").unwrap_err();
        assert!(matches!(e, IoError::UnknownKey { line: 2, .. }));
        assert!(parse_config_text(&p(), "theta 4").is_err());
        assert!(load_config(Some(Path::new("/nonexistent/run.conf")), &[]).is_err());
    }

    #[test]
    fn config_text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("images_dir", "imgs").unwrap();
        let text = cfg.to_text();
        let mut back = RunConfig::default();
        for (_, k, v) in parse_config_text(&p(), &text).unwrap() {
            back.set(&k, &v).unwrap();
        }
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), text);
    }
}
