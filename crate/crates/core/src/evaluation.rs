//! Individual, group and global precision/recall/F1 and the overall score.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, BBox};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("prediction for frame {0} has no ground truth")]
    UnknownFrame(String),
    #[error("frame {0} has more than one prediction")]
    DuplicateFrame(String),
    #[error("frame {frame}: group {group} references prediction {member}, which does not exist")]
    BadMember { frame: String, group: usize, member: usize },
    #[error("frame {frame}: group {group} references identity {id}, which does not exist")]
    UnknownIdentity { frame: String, group: usize, id: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatedIndividual {
    pub id: u64,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub actions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatedGroup {
    pub members: Vec<u64>,
    pub activities: Vec<usize>,
}

/// Ground truth for one frame. Labels are class indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameAnnotation {
    pub frame_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    pub individuals: Vec<AnnotatedIndividual>,
    pub groups: Vec<AnnotatedGroup>,
    pub global: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictedIndividual {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub actions: Vec<usize>,
}

/// `members` index into the frame's predicted individuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictedGroup {
    pub members: Vec<usize>,
    pub activities: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FramePrediction {
    pub frame_id: String,
    pub individuals: Vec<PredictedIndividual>,
    pub groups: Vec<PredictedGroup>,
    pub global: Vec<usize>,
}

impl FramePrediction {
    pub fn empty(frame_id: impl Into<String>) -> Self {
        Self {
            frame_id: frame_id.into(),
            individuals: Vec::new(),
            groups: Vec::new(),
            global: Vec::new(),
        }
    }

    /// The prediction that reproduces `gt` exactly.
    pub fn from_annotation(gt: &FrameAnnotation) -> Self {
        let index: BTreeMap<u64, usize> = gt.individuals.iter().enumerate().map(|(i, a)| (a.id, i)).collect();
        Self {
            frame_id: gt.frame_id.clone(),
            individuals: gt
                .individuals
                .iter()
                .map(|a| PredictedIndividual {
                    bbox: a.bbox.with_score(Some(1.0)),
                    actions: a.actions.clone(),
                })
                .collect(),
            groups: gt
                .groups
                .iter()
                .map(|g| PredictedGroup {
                    members: g.members.iter().filter_map(|id| index.get(id).copied()).collect(),
                    activities: g.activities.clone(),
                })
                .collect(),
            global: gt.global.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub member_iou_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.3,
            member_iou_threshold: 0.3,
        }
    }
}

/// Precision, recall and their harmonic mean.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub p: f64,
    pub r: f64,
    pub f: f64,
}

impl Prf {
    pub fn new(p: f64, r: f64) -> Self {
        Self { p, r, f: f1(p, r) }
    }
}

/// `2PR/(P+R)`, or 0 when `P + R = 0`.
pub fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Overlap-normalised precision and recall of two label sets; empty
/// denominators give 0.
pub fn label_overlap(pred: &[usize], gt: &[usize]) -> (f64, f64) {
    let p: BTreeSet<usize> = pred.iter().copied().collect();
    let g: BTreeSet<usize> = gt.iter().copied().collect();
    let inter = p.intersection(&g).count() as f64;
    let ratio = |n: usize| if n == 0 { 0.0 } else { inter / n as f64 };
    (ratio(p.len()), ratio(g.len()))
}

/// Greedy one-to-one matching in descending IoU; only pairs with
/// `IoU > threshold` qualify. Ties prefer the higher-scored prediction, then
/// lexicographic prediction box order, then lower indices.
pub fn match_individuals(pred: &[BBox], gt: &[BBox], threshold: f64) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (p, pb) in pred.iter().enumerate() {
        for (t, tb) in gt.iter().enumerate() {
            let v = iou(pb, tb);
            if v > threshold {
                pairs.push((v, p, t));
            }
        }
    }
    pairs.sort_by(|a, b| {
        let (pa, pb) = (&pred[a.1], &pred[b.1]);
        b.0.total_cmp(&a.0)
            .then(pb.score.unwrap_or(0.0).total_cmp(&pa.score.unwrap_or(0.0)))
            .then(pa.lex_cmp(pb))
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    greedy(pairs.into_iter().map(|(_, p, t)| (p, t)), pred.len(), gt.len())
}

fn greedy(order: impl Iterator<Item = (usize, usize)>, np: usize, nt: usize) -> Vec<(usize, usize)> {
    let mut used_p = vec![false; np];
    let mut used_t = vec![false; nt];
    let mut out = Vec::new();
    for (p, t) in order {
        if !used_p[p] && !used_t[t] {
            used_p[p] = true;
            used_t[t] = true;
            out.push((p, t));
        }
    }
    out
}

/// Set-overlap scoring over matched pairs, normalised by the number of
/// predictions and of ground-truth entities.
pub fn score_matched(pred: &[Vec<usize>], gt: &[Vec<usize>], matching: &[(usize, usize)]) -> Prf {
    let (mut sp, mut sr) = (0.0, 0.0);
    for &(p, t) in matching {
        let (cp, cr) = label_overlap(&pred[p], &gt[t]);
        sp += cp;
        sr += cr;
    }
    let norm = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Prf::new(norm(sp, pred.len()), norm(sr, gt.len()))
}

pub fn score_individual(pred: &[Vec<usize>], gt: &[Vec<usize>], matching: &[(usize, usize)]) -> Prf {
    score_matched(pred, gt, matching)
}

pub fn score_group(pred: &[Vec<usize>], gt: &[Vec<usize>], matching: &[(usize, usize)]) -> Prf {
    score_matched(pred, gt, matching)
}

/// Member-set IoU of a predicted group (members are prediction indices)
/// against a ground-truth group (members are ground-truth indices).
/// Unmatched predicted members count only in the union.
pub fn member_iou(pred_members: &[usize], gt_members: &[usize], matching: &[(usize, usize)]) -> f64 {
    let to_gt: BTreeMap<usize, usize> = matching.iter().copied().collect();
    let pred: BTreeSet<usize> = pred_members.iter().copied().collect();
    let gt: BTreeSet<usize> = gt_members.iter().copied().collect();
    let mut mapped = BTreeSet::new();
    let mut unmatched = 0;
    for p in &pred {
        match to_gt.get(p) {
            Some(&t) => {
                mapped.insert(t);
            }
            None => unmatched += 1,
        }
    }
    let inter = mapped.intersection(&gt).count();
    let union = mapped.union(&gt).count() + unmatched;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Greedy matching of groups in descending member IoU, `> threshold`.
pub fn match_groups(
    pred: &[Vec<usize>],
    gt: &[Vec<usize>],
    individual_matching: &[(usize, usize)],
    threshold: f64,
) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (p, pm) in pred.iter().enumerate() {
        for (t, tm) in gt.iter().enumerate() {
            let v = member_iou(pm, tm, individual_matching);
            if v > threshold {
                pairs.push((v, p, t));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    greedy(pairs.into_iter().map(|(_, p, t)| (p, t)), pred.len(), gt.len())
}

pub fn score_global(pred: &[usize], gt: &[usize]) -> Prf {
    let (p, r) = label_overlap(pred, gt);
    Prf::new(p, r)
}

/// Mean of the three F scores.
pub fn overall(f_i: f64, f_p: f64, f_g: f64) -> f64 {
    (f_i + f_p + f_g) / 3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub frame_id: String,
    pub individual: Prf,
    pub group: Prf,
    pub global: Prf,
}

fn check_prediction(pred: &FramePrediction) -> Result<(), EvalError> {
    for (g, group) in pred.groups.iter().enumerate() {
        if let Some(&m) = group.members.iter().find(|&&m| m >= pred.individuals.len()) {
            return Err(EvalError::BadMember {
                frame: pred.frame_id.clone(),
                group: g,
                member: m,
            });
        }
    }
    Ok(())
}

/// Scores one frame.
pub fn evaluate_frame(pred: &FramePrediction, gt: &FrameAnnotation, cfg: &EvalConfig) -> Result<FrameScore, EvalError> {
    check_prediction(pred)?;
    let pred_boxes: Vec<BBox> = pred.individuals.iter().map(|i| i.bbox).collect();
    let gt_boxes: Vec<BBox> = gt.individuals.iter().map(|i| i.bbox).collect();
    let ind_matching = match_individuals(&pred_boxes, &gt_boxes, cfg.iou_threshold);
    let pred_actions: Vec<Vec<usize>> = pred.individuals.iter().map(|i| i.actions.clone()).collect();
    let gt_actions: Vec<Vec<usize>> = gt.individuals.iter().map(|i| i.actions.clone()).collect();
    let individual = score_individual(&pred_actions, &gt_actions, &ind_matching);

    let index: BTreeMap<u64, usize> = gt.individuals.iter().enumerate().map(|(i, a)| (a.id, i)).collect();
    let gt_members = gt
        .groups
        .iter()
        .enumerate()
        .map(|(g, group)| {
            group
                .members
                .iter()
                .map(|id| {
                    index.get(id).copied().ok_or(EvalError::UnknownIdentity {
                        frame: gt.frame_id.clone(),
                        group: g,
                        id: *id,
                    })
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let pred_members: Vec<Vec<usize>> = pred.groups.iter().map(|g| g.members.clone()).collect();
    let group_matching = match_groups(&pred_members, &gt_members, &ind_matching, cfg.member_iou_threshold);
    let pred_acts: Vec<Vec<usize>> = pred.groups.iter().map(|g| g.activities.clone()).collect();
    let gt_acts: Vec<Vec<usize>> = gt.groups.iter().map(|g| g.activities.clone()).collect();
    let group = score_group(&pred_acts, &gt_acts, &group_matching);

    Ok(FrameScore {
        frame_id: gt.frame_id.clone(),
        individual,
        group,
        global: score_global(&pred.global, &gt.global),
    })
}

/// Aggregate report. Precision and recall are averaged over frames and F is
/// computed from the averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub p_i: f64,
    pub r_i: f64,
    pub f_i: f64,
    pub p_p: f64,
    pub r_p: f64,
    pub f_p: f64,
    pub p_g: f64,
    pub r_g: f64,
    pub f_g: f64,
    pub f_a: f64,
    /// How per-frame scores are aggregated.
    pub averaging: String,
    pub frames: Vec<FrameScore>,
}

pub const AVERAGING: &str = "per-frame precision and recall, uniform mean over frames";

impl EvalReport {
    pub fn from_frames(frames: Vec<FrameScore>) -> Self {
        let n = frames.len();
        let mean = |f: &dyn Fn(&FrameScore) -> f64| if n == 0 { 0.0 } else { frames.iter().map(f).sum::<f64>() / n as f64 };
        let i = Prf::new(mean(&|s| s.individual.p), mean(&|s| s.individual.r));
        let p = Prf::new(mean(&|s| s.group.p), mean(&|s| s.group.r));
        let g = Prf::new(mean(&|s| s.global.p), mean(&|s| s.global.r));
        Self {
            p_i: i.p,
            r_i: i.r,
            f_i: i.f,
            p_p: p.p,
            r_p: p.r,
            f_p: p.f,
            p_g: g.p,
            r_g: g.r,
            f_g: g.f,
            f_a: overall(i.f, p.f, g.f),
            averaging: AVERAGING.to_string(),
            frames,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>8} {:>8} {:>8}", "level", "P", "R", "F");
        for (name, p, r, f) in [
            ("individual", self.p_i, self.r_i, self.f_i),
            ("group", self.p_p, self.r_p, self.f_p),
            ("global", self.p_g, self.r_g, self.f_g),
        ] {
            let _ = writeln!(s, "{name:<12} {p:>8.4} {r:>8.4} {f:>8.4}");
        }
        let _ = writeln!(s, "{:<12} {:>26.4}", "overall", self.f_a);
        let _ = writeln!(s, "frames: {} ({})", self.frames.len(), self.averaging);
        s
    }
}

/// Scores every ground-truth frame, treating a missing prediction as empty.
/// Frames are reported in ground-truth order.
pub fn evaluate(preds: &[FramePrediction], gts: &[FrameAnnotation], cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    let known: HashSet<&str> = gts.iter().map(|g| g.frame_id.as_str()).collect();
    let mut by_id: BTreeMap<&str, &FramePrediction> = BTreeMap::new();
    for p in preds {
        if !known.contains(p.frame_id.as_str()) {
            return Err(EvalError::UnknownFrame(p.frame_id.clone()));
        }
        if by_id.insert(&p.frame_id, p).is_some() {
            return Err(EvalError::DuplicateFrame(p.frame_id.clone()));
        }
    }
    let frames = gts
        .par_iter()
        .map(|gt| match by_id.get(gt.frame_id.as_str()) {
            Some(p) => evaluate_frame(p, gt, cfg),
            None => evaluate_frame(&FramePrediction::empty(gt.frame_id.clone()), gt, cfg),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EvalReport::from_frames(frames))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn individual_matching_examples() {
        let a = bx(0., 0., 10., 10.);
        assert_eq!(match_individuals(&[a], &[a], 0.3), vec![(0, 0)]);
        assert!(match_individuals(&[a], &[bx(50., 0., 10., 10.)], 0.3).is_empty());
        // IoU .9 and .5 against one ground truth.
        let gt = bx(0., 0., 100., 10.);
        let p9 = bx(0., 0., 90., 10.);
        let p5 = bx(0., 0., 50., 10.);
        assert_eq!(match_individuals(&[p5, p9], &[gt], 0.3), vec![(1, 0)]);
    }

    #[test]
    fn threshold_is_strict() {
        // IoU exactly 0.3 is excluded.
        let gt = bx(0., 0., 10., 10.);
        let p = bx(0., 0., 3., 10.);
        assert!((iou(&p, &gt) - 0.3).abs() < 1e-15);
        assert!(match_individuals(&[p], &[gt], 0.3).is_empty());
    }

    #[test]
    fn individual_scoring_examples() {
        let s = score_individual(&[vec![1]], &[vec![1]], &[(0, 0)]);
        assert_eq!((s.p, s.r, s.f), (1.0, 1.0, 1.0));
        let s = score_individual(&[vec![1]], &[vec![1]], &[]);
        assert_eq!((s.p, s.r, s.f), (0.0, 0.0, 0.0));
        let s = score_individual(&[vec![1, 2]], &[vec![1]], &[(0, 0)]);
        assert_eq!((s.p, s.r), (0.5, 1.0));
        assert!((s.f - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn member_iou_examples() {
        let identity = [(0, 0), (1, 1), (2, 2), (3, 3)];
        assert_eq!(member_iou(&[0, 1], &[0, 1], &identity), 1.0);
        assert!((member_iou(&[0, 1], &[0, 1, 2], &identity) - 2.0 / 3.0).abs() < 1e-15);
        // Predicted member 0 unmatched.
        assert_eq!(member_iou(&[0], &[1, 2, 3], &[(1, 1), (2, 2), (3, 3)]), 0.0);
        assert_eq!(match_groups(&[vec![0]], &[vec![1, 2, 3]], &[], 0.3), vec![]);
        assert_eq!(match_groups(&[vec![0, 1]], &[vec![0, 1, 2]], &identity, 0.3), vec![(0, 0)]);
    }

    #[test]
    fn group_scoring_examples() {
        let s = score_group(&[vec![3]], &[vec![3]], &[(0, 0)]);
        assert_eq!((s.p, s.r, s.f), (1.0, 1.0, 1.0));
        let s = score_group(&[vec![3]], &[vec![4]], &[(0, 0)]);
        assert_eq!(s.f, 0.0);
        let s = score_group(&[vec![3], vec![5]], &[vec![3]], &[(0, 0)]);
        assert_eq!(s.p, 0.5);
    }

    #[test]
    fn global_examples() {
        let s = score_global(&[1, 2], &[1, 2]);
        assert_eq!((s.p, s.r, s.f), (1.0, 1.0, 1.0));
        let s = score_global(&[], &[1]);
        assert_eq!((s.p, s.r, s.f), (0.0, 0.0, 0.0));
        let s = score_global(&[0, 1], &[1, 2]);
        assert_eq!((s.p, s.r, s.f), (0.5, 0.5, 0.5));
    }

    #[test]
    fn overall_examples() {
        assert!((overall(0.6, 0.3, 0.9) - 0.6).abs() < 1e-15);
        assert_eq!(overall(1.0, 1.0, 1.0), 1.0);
        assert!((overall(0.545, 0.267, 0.471) - 0.4277).abs() < 5e-5);
    }

    fn frame() -> FrameAnnotation {
        FrameAnnotation {
            frame_id: "f1".into(),
            image_path: None,
            individuals: vec![
                AnnotatedIndividual { id: 7, bbox: bx(0., 0., 10., 20.), actions: vec![0, 3] },
                AnnotatedIndividual { id: 9, bbox: bx(30., 0., 10., 20.), actions: vec![1] },
            ],
            groups: vec![AnnotatedGroup { members: vec![7, 9], activities: vec![2] }],
            global: vec![4],
        }
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let gt = frame();
        let report = evaluate(&[FramePrediction::from_annotation(&gt)], &[gt], &EvalConfig::default()).unwrap();
        for v in [report.p_i, report.r_i, report.f_i, report.p_p, report.r_p, report.f_p, report.p_g, report.r_g, report.f_g, report.f_a] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn missing_prediction_scores_zero_recall() {
        let report = evaluate(&[], &[frame()], &EvalConfig::default()).unwrap();
        assert_eq!((report.r_i, report.r_p, report.r_g), (0.0, 0.0, 0.0));
    }

    #[test]
    fn unknown_and_invalid_predictions() {
        let gt = frame();
        assert_eq!(
            evaluate(&[FramePrediction::empty("nope")], std::slice::from_ref(&gt), &EvalConfig::default()),
            Err(EvalError::UnknownFrame("nope".into()))
        );
        let mut p = FramePrediction::from_annotation(&gt);
        p.groups[0].members.push(5);
        assert!(matches!(evaluate(&[p], &[gt], &EvalConfig::default()), Err(EvalError::BadMember { .. })));
    }

    #[test]
    fn json_keys() {
        let report = evaluate(&[], &[frame()], &EvalConfig::default()).unwrap();
        let v = serde_json::to_value(&report).unwrap();
        for k in ["p_i", "r_i", "f_i", "p_p", "r_p", "f_p", "p_g", "r_g", "f_g", "f_a", "frames"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert!(report.to_text().contains("overall"));
    }
}
