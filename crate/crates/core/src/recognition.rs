//! Frame-level recognition: crop embedding, grouping, the bidirectional
//! encoder and thresholded multi-label decisions.

use image::RgbImage;
use thiserror::Error;

use crate::evaluation::{FrameAnnotation, FramePrediction, PredictedGroup, PredictedIndividual};
use crate::featurizer::{embed_individual, fit_to_token_budget, propose_groups, FeaturizerError};
use crate::geometry::{clip_box, BBox, FrameSpec, GeometryError};
use crate::io::{FeatureRecord, RunConfig};
use crate::prototyper::{forward_bipropagate, recognition_heads, sigmoid, BppModel, GumbelMode, Matrix, PrototypeError};

#[derive(Debug, Error)]
pub enum RecognitionError {
    #[error("frame {0}: an image is required to embed individuals")]
    MissingImage(String),
    #[error("frame {frame}: individual {index}: {source}")]
    Geometry {
        frame: String,
        index: usize,
        source: GeometryError,
    },
    #[error("frame {frame}: {source}")]
    Featurizer { frame: String, source: FeaturizerError },
    #[error("frame {frame}: {source}")]
    Model { frame: String, source: PrototypeError },
}

/// Whether the prototype logits are perturbed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Eval,
    Train,
}

/// One frame to recognise.
#[derive(Debug, Clone)]
pub struct FrameInput<'a> {
    pub frame_id: &'a str,
    /// Position of the frame in its sequence; seeds the frame's noise.
    pub index: usize,
    pub boxes: &'a [BBox],
    /// Group memberships as indices into `boxes`; proposed from box centres
    /// when absent.
    pub groups: Option<Vec<Vec<usize>>>,
    pub image: Option<&'a RgbImage>,
}

/// Patch tokens of every box, cropped from `image`.
pub fn individual_tokens(frame_id: &str, image: &RgbImage, boxes: &[BBox], cfg: &RunConfig) -> Result<Vec<Matrix>, RecognitionError> {
    let spec = FrameSpec {
        width: image.width() as f64,
        height: image.height() as f64,
    };
    boxes
        .iter()
        .enumerate()
        .map(|(index, b)| {
            let c = clip_box(b, &spec).map_err(|source| RecognitionError::Geometry {
                frame: frame_id.to_string(),
                index,
                source,
            })?;
            let x = (c.x.floor() as u32).min(image.width() - 1);
            let y = (c.y.floor() as u32).min(image.height() - 1);
            let w = ((c.right().ceil() as u32).min(image.width()) - x).max(1);
            let h = ((c.bottom().ceil() as u32).min(image.height()) - y).max(1);
            let crop = image::imageops::crop_imm(image, x, y, w, h).to_image();
            let crop = fit_to_token_budget(&crop, cfg.patch_size, cfg.dims.max_tokens);
            embed_individual(&crop, cfg.patch_size, cfg.dims.dim, cfg.projection_seed, index)
                .map(|e| e.tokens)
                .map_err(|source| RecognitionError::Featurizer {
                    frame: frame_id.to_string(),
                    source,
                })
        })
        .collect()
}

fn decide(logits: &[f64], threshold: f64) -> Vec<usize> {
    logits
        .iter()
        .enumerate()
        .filter(|(_, &l)| sigmoid(l) >= threshold)
        .map(|(i, _)| i)
        .collect()
}

/// Noise settings for frame `index`.
pub fn gumbel_for(mode: Mode, cfg: &RunConfig, index: usize) -> GumbelMode {
    match mode {
        Mode::Eval => GumbelMode::Disabled,
        Mode::Train => GumbelMode::Seeded {
            seed: cfg.gumbel_seed.wrapping_add(index as u64),
            scale: cfg.gumbel_scale,
        },
    }
}

/// Runs the encoder and heads on one frame.
pub fn recognize_frame(
    input: &FrameInput<'_>,
    model: &BppModel,
    cfg: &RunConfig,
    mode: Mode,
) -> Result<(FramePrediction, FeatureRecord), RecognitionError> {
    let frame = input.frame_id.to_string();
    let patches = if input.boxes.is_empty() {
        Vec::new()
    } else {
        let image = input.image.ok_or_else(|| RecognitionError::MissingImage(frame.clone()))?;
        individual_tokens(input.frame_id, image, input.boxes, cfg)?
    };
    let groups = match &input.groups {
        Some(g) => g.clone(),
        None if input.boxes.is_empty() => Vec::new(),
        None => propose_groups(input.boxes, cfg.group_threshold)
            .map_err(|source| RecognitionError::Featurizer {
                frame: frame.clone(),
                source,
            })?
            .into_iter()
            .map(|g| g.member_indices)
            .collect(),
    };
    let model_err = |source| RecognitionError::Model {
        frame: frame.clone(),
        source,
    };
    let hierarchy = forward_bipropagate(&patches, &groups, model, gumbel_for(mode, cfg, input.index)).map_err(model_err)?;
    let logits = recognition_heads(&hierarchy, model).map_err(model_err)?;
    let t = cfg.prediction_threshold;
    let prediction = FramePrediction {
        frame_id: frame.clone(),
        individuals: input
            .boxes
            .iter()
            .enumerate()
            .map(|(q, b)| PredictedIndividual {
                bbox: *b,
                actions: decide(logits.individual.row(q), t),
            })
            .collect(),
        groups: groups
            .iter()
            .enumerate()
            .map(|(l, members)| PredictedGroup {
                members: members.clone(),
                activities: decide(logits.group.row(l), t),
            })
            .collect(),
        global: decide(logits.global.row(0), t),
    };
    Ok((prediction, FeatureRecord::from_hierarchy(input.frame_id, &hierarchy)))
}

/// Boxes and ground-truth memberships (as indices) of an annotated frame.
pub fn annotation_input(a: &FrameAnnotation) -> (Vec<BBox>, Vec<Vec<usize>>) {
    let boxes: Vec<BBox> = a.individuals.iter().map(|i| i.bbox).collect();
    let index = |id: &u64| a.individuals.iter().position(|i| i.id == *id).expect("validated membership");
    let mut groups: Vec<Vec<usize>> = a.groups.iter().map(|g| g.members.iter().map(index).collect()).collect();
    // Individuals outside every annotated group form singleton groups.
    let mut covered = vec![false; boxes.len()];
    for g in &groups {
        for &m in g {
            covered[m] = true;
        }
    }
    groups.extend((0..boxes.len()).filter(|&q| !covered[q]).map(|q| vec![q]));
    (boxes, groups)
}
