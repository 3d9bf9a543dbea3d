//! Recognition, detection and combined objectives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::bpp::{forward_graph, group_of, heads_graph, RecognitionLogits};
use super::matrix::Matrix;
use super::tape::{Graph, Var};
use super::weights::{BppModel, LinearParams, ModelDims, ModelVars};
use super::{GumbelMode, GumbelSampler, PrototypeError};
use crate::geometry::{iou, BBox};

/// Multi-hot targets matching [`RecognitionLogits`].
#[derive(Debug, Clone, PartialEq)]
pub struct RecognitionTargets {
    pub individual: Matrix,
    pub group: Matrix,
    pub global: Matrix,
    /// `Q×Q` same-group indicator (diagonal is 1).
    pub membership: Matrix,
}

impl RecognitionTargets {
    /// Builds multi-hot targets from label indices and a group partition.
    pub fn from_labels(
        dims: &ModelDims,
        actions: &[Vec<usize>],
        group_activities: &[Vec<usize>],
        global: &[usize],
        groups: &[Vec<usize>],
    ) -> Result<Self, PrototypeError> {
        let multi_hot = |labels: &[Vec<usize>], classes: usize| -> Result<Matrix, PrototypeError> {
            let mut m = Matrix::zeros(labels.len(), classes);
            for (r, ls) in labels.iter().enumerate() {
                for &l in ls {
                    if l >= classes {
                        return Err(PrototypeError::Dimension(format!("label {l} outside {classes} classes")));
                    }
                    m.set(r, l, 1.0);
                }
            }
            Ok(m)
        };
        if group_activities.len() != groups.len() {
            return Err(PrototypeError::Dimension("one activity set per group is required".into()));
        }
        let owner = group_of(actions.len(), groups)?;
        let q = actions.len();
        let mut membership = Matrix::zeros(q, q);
        for a in 0..q {
            for b in 0..q {
                if owner[a] == owner[b] {
                    membership.set(a, b, 1.0);
                }
            }
        }
        Ok(Self {
            individual: multi_hot(actions, dims.num_actions)?,
            group: multi_hot(group_activities, dims.num_group_activities)?,
            global: multi_hot(&[global.to_vec()], dims.num_global_activities)?,
            membership,
        })
    }
}

/// Recognition loss components: individual, group, global and group
/// detection (membership affinity).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RecognitionLoss {
    pub individual: f64,
    pub group: f64,
    pub global: f64,
    pub membership: f64,
    pub total: f64,
}

/// Detection loss components and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetectionLoss {
    pub regression: f64,
    pub objectness: f64,
    pub classification: f64,
    pub lambda_reg: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossReport {
    pub detection: DetectionLoss,
    pub recognition: RecognitionLoss,
    pub lambda: f64,
    pub total: f64,
}

/// `l_rec + lambda * l_det`.
pub fn total_loss(l_rec: f64, l_det: f64, lambda: f64) -> f64 {
    l_rec + lambda * l_det
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    /// Weight of the detection loss in the total.
    pub lambda: f64,
    /// Weight of the IoU regression term inside the detection loss.
    pub lambda_reg: f64,
    pub gumbel: GumbelMode,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            lambda_reg: 5.0,
            gumbel: GumbelMode::Disabled,
        }
    }
}

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).get(0, 0)
}

pub(crate) struct RecognitionVars {
    pub individual: Var,
    pub group: Var,
    pub global: Var,
    pub membership: Var,
    pub total: Var,
}

fn check_shape(what: &str, logits: (usize, usize), targets: (usize, usize)) -> Result<(), PrototypeError> {
    if logits != targets {
        return Err(PrototypeError::Dimension(format!(
            "{what} logits are {logits:?} but targets are {targets:?}"
        )));
    }
    Ok(())
}

pub(crate) fn recognition_graph(
    g: &mut Graph,
    logits: (Var, Var, Var, Var),
    t: &RecognitionTargets,
) -> Result<RecognitionVars, PrototypeError> {
    let (li, lg, lgl, la) = logits;
    check_shape("individual", g.shape(li), t.individual.shape())?;
    check_shape("group", g.shape(lg), t.group.shape())?;
    check_shape("global", g.shape(lgl), t.global.shape())?;
    check_shape("affinity", g.shape(la), t.membership.shape())?;
    let individual = g.bce_with_logits(li, t.individual.clone());
    let group = g.bce_with_logits(lg, t.group.clone());
    let global = g.bce_with_logits(lgl, t.global.clone());
    let membership = g.bce_with_logits(la, t.membership.clone());
    let s1 = g.add(individual, group);
    let s2 = g.add(global, membership);
    let total = g.add(s1, s2);
    Ok(RecognitionVars {
        individual,
        group,
        global,
        membership,
        total,
    })
}

fn recognition_report(g: &Graph, v: &RecognitionVars) -> RecognitionLoss {
    RecognitionLoss {
        individual: scalar(g, v.individual),
        group: scalar(g, v.group),
        global: scalar(g, v.global),
        membership: scalar(g, v.membership),
        total: scalar(g, v.total),
    }
}

/// Mean binary cross-entropy at each level plus the membership term.
pub fn recognition_loss(logits: &RecognitionLogits, targets: &RecognitionTargets) -> Result<RecognitionLoss, PrototypeError> {
    let mut g = Graph::new();
    let vars = (
        g.leaf(logits.individual.clone()),
        g.leaf(logits.group.clone()),
        g.leaf(logits.global.clone()),
        g.leaf(logits.affinity.clone()),
    );
    let r = recognition_graph(&mut g, vars, targets)?;
    Ok(recognition_report(&g, &r))
}

/// A scored box prediction with raw objectness and person-class logits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionPrediction {
    pub bbox: BBox,
    pub objectness: f64,
    pub class_logit: f64,
}

/// Greedy one-to-one assignment by descending IoU. Only overlapping pairs are
/// assigned; ties go to the lower prediction index, then the lower ground
/// truth index.
pub fn assign_greedy(pred: &[BBox], gt: &[BBox]) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (p, pb) in pred.iter().enumerate() {
        for (t, tb) in gt.iter().enumerate() {
            let v = iou(pb, tb);
            if v > 0.0 {
                pairs.push((v, p, t));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; pred.len()];
    let mut used_t = vec![false; gt.len()];
    let mut out = Vec::new();
    for (_, p, t) in pairs {
        if !used_p[p] && !used_t[t] {
            used_p[p] = true;
            used_t[t] = true;
            out.push((p, t));
        }
    }
    out
}

pub(crate) struct DetectionVars {
    pub regression: Var,
    pub objectness: Var,
    pub classification: Var,
    pub total: Var,
}

/// `boxes` is `n×4` `(x, y, w, h)`, `objectness` and `class` are `n×1` logits.
pub(crate) fn detection_graph(
    g: &mut Graph,
    boxes: Var,
    objectness: Var,
    class: Var,
    gt: &[BBox],
    lambda_reg: f64,
) -> DetectionVars {
    let n = g.shape(boxes).0;
    let zero = |g: &mut Graph| g.leaf(Matrix::zeros(1, 1));
    let pred: Vec<BBox> = (0..n)
        .map(|r| {
            let row = g.value(boxes).row(r);
            BBox {
                x: row[0],
                y: row[1],
                w: row[2],
                h: row[3],
                score: None,
            }
        })
        .collect();
    let matches = assign_greedy(&pred, gt);

    let regression;
    let classification;
    if matches.is_empty() {
        regression = zero(g);
        classification = zero(g);
    } else {
        let rows: Vec<Var> = matches.iter().map(|&(p, _)| g.slice_rows(boxes, p, 1)).collect();
        let matched = g.concat_rows(&rows);
        let targets = Matrix::from_rows(&matches.iter().map(|&(_, t)| vec![gt[t].x, gt[t].y, gt[t].w, gt[t].h]).collect::<Vec<_>>());
        let per_pair = g.iou_loss(matched, targets);
        regression = g.mean(per_pair);
        let cls_rows: Vec<Var> = matches.iter().map(|&(p, _)| g.slice_rows(class, p, 1)).collect();
        let cls = g.concat_rows(&cls_rows);
        classification = g.bce_with_logits(cls, Matrix::filled(matches.len(), 1, 1.0));
    }
    let objectness = if n == 0 {
        zero(g)
    } else {
        let mut indicator = Matrix::zeros(n, 1);
        for &(p, _) in &matches {
            indicator.set(p, 0, 1.0);
        }
        g.bce_with_logits(objectness, indicator)
    };
    let weighted = g.scale(regression, lambda_reg);
    let s = g.add(weighted, objectness);
    let total = g.add(s, classification);
    DetectionVars {
        regression,
        objectness,
        classification,
        total,
    }
}

fn detection_report(g: &Graph, v: &DetectionVars, lambda_reg: f64) -> DetectionLoss {
    DetectionLoss {
        regression: scalar(g, v.regression),
        objectness: scalar(g, v.objectness),
        classification: scalar(g, v.classification),
        lambda_reg,
        total: scalar(g, v.total),
    }
}

/// IoU regression, objectness and classification terms with greedy
/// assignment; `total = lambda_reg * regression + objectness + classification`.
pub fn detection_loss(pred: &[DetectionPrediction], gt: &[BBox], lambda_reg: f64) -> DetectionLoss {
    let mut g = Graph::new();
    let n = pred.len();
    let boxes = g.leaf(Matrix::from_vec(n, 4, pred.iter().flat_map(|p| [p.bbox.x, p.bbox.y, p.bbox.w, p.bbox.h]).collect()));
    let obj = g.leaf(Matrix::from_vec(n, 1, pred.iter().map(|p| p.objectness).collect()));
    let cls = g.leaf(Matrix::from_vec(n, 1, pred.iter().map(|p| p.class_logit).collect()));
    let v = detection_graph(&mut g, boxes, obj, cls, gt, lambda_reg);
    detection_report(&g, &v, lambda_reg)
}

/// Anchor boxes with per-anchor features and the ground truth they should
/// regress to. The detection head predicts `(dx, dy, dw, dh)` offsets
/// relative to each anchor plus objectness and class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSample {
    pub anchors: Vec<BBox>,
    /// `anchors.len() × d`.
    pub features: Matrix,
    pub ground_truth: Vec<BBox>,
}

/// Everything needed to evaluate the combined objective on one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub patches: Vec<Matrix>,
    pub groups: Vec<Vec<usize>>,
    pub targets: RecognitionTargets,
    pub detection: DetectionSample,
}

impl TrainingSample {
    /// Seeded random tokens, labels and detection targets. Individual `q`
    /// gets `tokens[q]` patch tokens; its anchor sits at `x = 40q` and its
    /// ground-truth box is a jittered copy of the anchor.
    pub fn synthetic(dims: &ModelDims, seed: u64, tokens: &[usize], groups: &[Vec<usize>]) -> Result<Self, PrototypeError> {
        let d = dims.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patches = tokens
            .iter()
            .map(|&n| Matrix::from_vec(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        let labels = |count: usize, classes: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<usize>> {
            (0..count)
                .map(|_| {
                    let mut ls = vec![rng.gen_range(0..classes)];
                    if rng.gen_bool(0.5) {
                        let extra = rng.gen_range(0..classes);
                        if !ls.contains(&extra) {
                            ls.push(extra);
                        }
                    }
                    ls
                })
                .collect()
        };
        let actions = labels(tokens.len(), dims.num_actions, &mut rng);
        let activities = labels(groups.len(), dims.num_group_activities, &mut rng);
        let global = labels(1, dims.num_global_activities, &mut rng).remove(0);
        let targets = RecognitionTargets::from_labels(dims, &actions, &activities, &global, groups)?;

        let q = tokens.len();
        let anchors: Vec<BBox> = (0..q)
            .map(|i| BBox {
                x: 40.0 * i as f64,
                y: 10.0,
                w: 20.0,
                h: 40.0,
                score: None,
            })
            .collect();
        let ground_truth = anchors
            .iter()
            .map(|a| BBox {
                x: a.x + rng.gen_range(-4.0..4.0),
                y: a.y + rng.gen_range(-4.0..4.0),
                w: a.w * rng.gen_range(0.8..1.25),
                h: a.h * rng.gen_range(0.8..1.25),
                score: None,
            })
            .collect();
        let features = Matrix::from_vec(q, d, (0..q * d).map(|_| rng.gen_range(-1.0..1.0)).collect());
        Ok(Self {
            patches,
            groups: groups.to_vec(),
            targets,
            detection: DetectionSample {
                anchors,
                features,
                ground_truth,
            },
        })
    }
}

fn decode_graph(g: &mut Graph, head: &LinearParams<Var>, sample: &DetectionSample) -> (Var, Var, Var) {
    let n = sample.anchors.len();
    let column = |f: fn(&BBox) -> f64| Matrix::from_vec(n, 1, sample.anchors.iter().map(f).collect());
    let feats = g.leaf(sample.features.clone());
    let raw = g.matmul(feats, head.weight);
    let out = g.add_row(raw, head.bias);
    let ax = g.leaf(column(|b| b.x));
    let ay = g.leaf(column(|b| b.y));
    let aw = g.leaf(column(|b| b.w));
    let ah = g.leaf(column(|b| b.h));
    let dx = g.slice_cols(out, 0, 1);
    let dy = g.slice_cols(out, 1, 1);
    let dw = g.slice_cols(out, 2, 1);
    let dh = g.slice_cols(out, 3, 1);
    let sx = g.mul(dx, aw);
    let x = g.add(sx, ax);
    let sy = g.mul(dy, ah);
    let y = g.add(sy, ay);
    let ew = g.exp(dw);
    let w = g.mul(ew, aw);
    let eh = g.exp(dh);
    let h = g.mul(eh, ah);
    let boxes = g.concat_cols(&[x, y, w, h]);
    let obj = g.slice_cols(out, 4, 1);
    let cls = g.slice_cols(out, 5, 1);
    (boxes, obj, cls)
}

/// Records the full objective on a fresh graph. Returns the graph, the bound
/// parameters, the total-loss node and the component report.
pub(crate) fn objective_graph(
    model: &BppModel,
    sample: &TrainingSample,
    settings: &LossSettings,
) -> Result<(Graph, ModelVars, Var, LossReport), PrototypeError> {
    let d = model.dims.dim;
    if sample.detection.features.rows() != sample.detection.anchors.len() || (sample.detection.features.rows() > 0 && sample.detection.features.cols() != d) {
        return Err(PrototypeError::Dimension("detection features must be one row of width d per anchor".into()));
    }
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let inputs: Vec<Var> = sample.patches.iter().map(|p| g.leaf(p.clone())).collect();
    let mut gumbel = GumbelSampler::new(settings.gumbel);
    let h = forward_graph(&mut g, &vars, &model.dims, &inputs, &sample.groups, &mut gumbel)?;
    let l = heads_graph(&mut g, &vars.heads, &h, &model.dims);
    let rec = recognition_graph(&mut g, (l.individual, l.group, l.global, l.affinity), &sample.targets)?;

    let (boxes, obj, cls) = if sample.detection.anchors.is_empty() {
        (g.leaf(Matrix::zeros(0, 4)), g.leaf(Matrix::zeros(0, 1)), g.leaf(Matrix::zeros(0, 1)))
    } else {
        decode_graph(&mut g, &vars.detection, &sample.detection)
    };
    let det = detection_graph(&mut g, boxes, obj, cls, &sample.detection.ground_truth, settings.lambda_reg);
    let weighted = g.scale(det.total, settings.lambda);
    let total = g.add(rec.total, weighted);
    let report = LossReport {
        detection: detection_report(&g, &det, settings.lambda_reg),
        recognition: recognition_report(&g, &rec),
        lambda: settings.lambda,
        total: scalar(&g, total),
    };
    Ok((g, vars, total, report))
}

/// Forward pass, heads and both losses for one sample.
pub fn evaluate_objective(model: &BppModel, sample: &TrainingSample, settings: &LossSettings) -> Result<LossReport, PrototypeError> {
    Ok(objective_graph(model, sample, settings)?.3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn saturated_logits_give_near_zero_loss() {
        let targets = RecognitionTargets {
            individual: Matrix::from_rows(&[vec![1., 0., 1.]]),
            group: Matrix::from_rows(&[vec![0., 1.]]),
            global: Matrix::from_rows(&[vec![1.]]),
            membership: Matrix::from_rows(&[vec![1.]]),
        };
        let logits = RecognitionLogits {
            individual: targets.individual.map(|t| if t > 0.5 { 20.0 } else { -20.0 }),
            group: targets.group.map(|t| if t > 0.5 { 20.0 } else { -20.0 }),
            global: Matrix::filled(1, 1, 20.0),
            affinity: Matrix::filled(1, 1, 20.0),
        };
        let l = recognition_loss(&logits, &targets).unwrap();
        for v in [l.individual, l.group, l.global, l.membership] {
            assert!(v < 1e-6, "{v}");
        }
    }

    #[test]
    fn zero_logits_cost_ln2_per_entry() {
        let mut individual = Matrix::zeros(1, 5);
        individual.set(0, 2, 1.0);
        let targets = RecognitionTargets {
            individual,
            group: Matrix::zeros(1, 3),
            global: Matrix::zeros(1, 2),
            membership: Matrix::filled(1, 1, 1.0),
        };
        let logits = RecognitionLogits {
            individual: Matrix::zeros(1, 5),
            group: Matrix::zeros(1, 3),
            global: Matrix::zeros(1, 2),
            affinity: Matrix::zeros(1, 1),
        };
        let l = recognition_loss(&logits, &targets).unwrap();
        assert!((l.individual - LN_2).abs() < 1e-15);
        assert!((l.total - 4.0 * LN_2).abs() < 1e-14);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let t = RecognitionTargets {
            individual: Matrix::zeros(2, 3),
            group: Matrix::zeros(1, 3),
            global: Matrix::zeros(1, 2),
            membership: Matrix::zeros(2, 2),
        };
        let l = RecognitionLogits {
            individual: Matrix::zeros(1, 3),
            group: Matrix::zeros(1, 3),
            global: Matrix::zeros(1, 2),
            affinity: Matrix::zeros(2, 2),
        };
        assert!(matches!(recognition_loss(&l, &t), Err(PrototypeError::Dimension(_))));
    }

    #[test]
    fn targets_from_labels() {
        let dims = ModelDims::default();
        let t = RecognitionTargets::from_labels(&dims, &[vec![0, 3], vec![1], vec![26]], &[vec![2], vec![10]], &[6], &[vec![0, 2], vec![1]]).unwrap();
        assert_eq!(t.individual.shape(), (3, 27));
        assert_eq!(t.individual.get(0, 3), 1.0);
        assert_eq!(t.membership.get(0, 2), 1.0);
        assert_eq!(t.membership.get(0, 1), 0.0);
        assert_eq!(t.global.get(0, 6), 1.0);
        assert!(RecognitionTargets::from_labels(&dims, &[vec![27]], &[vec![]], &[], &[vec![0]]).is_err());
    }

    #[test]
    fn detection_perfect_prediction() {
        let gt = [bx(0., 0., 10., 10.), bx(40., 0., 10., 20.)];
        let pred: Vec<DetectionPrediction> = gt
            .iter()
            .map(|&b| DetectionPrediction { bbox: b, objectness: 20.0, class_logit: 20.0 })
            .collect();
        let l = detection_loss(&pred, &gt, 5.0);
        assert!(l.total < 1e-5, "{l:?}");
    }

    #[test]
    fn detection_regression_term() {
        let pred = [DetectionPrediction { bbox: bx(5., 0., 10., 10.), objectness: 20.0, class_logit: 20.0 }];
        let l = detection_loss(&pred, &[bx(0., 0., 10., 10.)], 5.0);
        assert!((l.regression - 2.0 / 3.0).abs() < 1e-15);
        let l1 = detection_loss(&pred, &[bx(0., 0., 10., 10.)], 1.0);
        assert!(((l.total - l1.total) - 4.0 * l.regression).abs() < 1e-12);
    }

    #[test]
    fn detection_empty_sets() {
        let l = detection_loss(&[], &[], 5.0);
        assert_eq!(l.total, 0.0);
        let unmatched = [DetectionPrediction { bbox: bx(0., 0., 1., 1.), objectness: 0.0, class_logit: 0.0 }];
        let l = detection_loss(&unmatched, &[], 5.0);
        assert_eq!(l.regression, 0.0);
        assert!((l.objectness - LN_2).abs() < 1e-15);
    }

    #[test]
    fn greedy_assignment_prefers_higher_iou() {
        let gt = [bx(0., 0., 10., 10.)];
        let pred = [bx(3., 0., 10., 10.), bx(1., 0., 10., 10.)];
        assert_eq!(assign_greedy(&pred, &gt), vec![(1, 0)]);
    }

    #[test]
    fn total_loss_combination() {
        assert_eq!(total_loss(1.0, 0.0, 1e-3), 1.0);
        assert!((total_loss(0.0, 1000.0, 1e-3) - 1.0).abs() < 1e-12);
        assert_eq!(LossSettings::default().lambda, 1e-3);
        assert_eq!(LossSettings::default().lambda_reg, 5.0);
    }
}
