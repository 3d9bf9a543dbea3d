use std::collections::BTreeSet;

use panofocus::evaluation::{
    evaluate, evaluate_frame, f1, label_overlap, match_individuals, overall, AnnotatedGroup, AnnotatedIndividual,
    EvalConfig, FrameAnnotation, FramePrediction,
};
use panofocus::geometry::BBox;
use proptest::prelude::*;

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.0..200.0f64, 0.0..100.0f64, 5.0..60.0f64, 5.0..60.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, w, h).unwrap())
}

fn arb_labels(n: usize) -> impl Strategy<Value = Vec<usize>> {
    proptest::collection::btree_set(0..n, 0..4).prop_map(|s| s.into_iter().collect())
}

prop_compose! {
    fn arb_frame(id: usize)(
        people in proptest::collection::vec((arb_box(), arb_labels(27)), 0..8),
        splits in proptest::collection::vec(any::<bool>(), 8),
        group_labels in proptest::collection::vec(arb_labels(11), 8),
        global in arb_labels(7),
    ) -> FrameAnnotation {
        let individuals: Vec<AnnotatedIndividual> = people
            .into_iter()
            .enumerate()
            .map(|(i, (bbox, actions))| AnnotatedIndividual { id: 100 + i as u64, bbox, actions })
            .collect();
        // Consecutive individuals form groups, broken where `splits` says so.
        let mut groups: Vec<AnnotatedGroup> = Vec::new();
        for (i, ind) in individuals.iter().enumerate() {
            if i == 0 || splits[i] {
                groups.push(AnnotatedGroup { members: vec![], activities: group_labels[groups.len()].clone() });
            }
            groups.last_mut().unwrap().members.push(ind.id);
        }
        FrameAnnotation { frame_id: format!("f{id}"), image_path: None, individuals, groups, global }
    }
}

fn arb_frames() -> impl Strategy<Value = Vec<FrameAnnotation>> {
    (1usize..6).prop_flat_map(|n| (0..n).map(arb_frame).collect::<Vec<_>>())
}

proptest! {
    #[test]
    fn perfect_predictions_score_one_where_defined(gts in arb_frames()) {
        let preds: Vec<FramePrediction> = gts.iter().map(FramePrediction::from_annotation).collect();
        let report = evaluate(&preds, &gts, &EvalConfig::default()).unwrap();
        for (frame, gt) in report.frames.iter().zip(&gts) {
            // Empty label sets score 0 by convention, so only fully labelled levels reach 1.
            if gt.individuals.iter().all(|i| !i.actions.is_empty()) && !gt.individuals.is_empty() {
                prop_assert_eq!(frame.individual.f, 1.0);
            }
            if gt.groups.iter().all(|g| !g.activities.is_empty()) && !gt.groups.is_empty() {
                prop_assert_eq!(frame.group.f, 1.0);
            }
            if !gt.global.is_empty() {
                prop_assert_eq!(frame.global.f, 1.0);
            }
        }
    }

    #[test]
    fn scores_are_bounded(gts in arb_frames(), noise in arb_frames()) {
        let preds: Vec<FramePrediction> = gts
            .iter()
            .zip(noise.iter().cycle())
            .map(|(g, n)| FramePrediction { frame_id: g.frame_id.clone(), ..FramePrediction::from_annotation(n) })
            .collect();
        let r = evaluate(&preds, &gts, &EvalConfig::default()).unwrap();
        for v in [r.p_i, r.r_i, r.f_i, r.p_g, r.r_g, r.f_g, r.p_p, r.r_p, r.f_p, r.f_a] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn matching_is_one_to_one(pred in proptest::collection::vec(arb_box(), 0..12), gt in proptest::collection::vec(arb_box(), 0..12), t in 0.0..0.9f64) {
        let m = match_individuals(&pred, &gt, t);
        let ps: BTreeSet<usize> = m.iter().map(|p| p.0).collect();
        let ts: BTreeSet<usize> = m.iter().map(|p| p.1).collect();
        prop_assert_eq!(ps.len(), m.len());
        prop_assert_eq!(ts.len(), m.len());
    }

    #[test]
    fn label_changes_move_scores_the_right_way(pred in arb_labels(10), gt in arb_labels(10), extra in 0usize..20) {
        let (p0, r0) = label_overlap(&pred, &gt);
        // Dropping a correct label never raises recall.
        if let Some(&c) = pred.iter().find(|l| gt.contains(l)) {
            let fewer: Vec<usize> = pred.iter().copied().filter(|&l| l != c).collect();
            prop_assert!(label_overlap(&fewer, &gt).1 <= r0);
        }
        // Adding a spurious label never raises precision.
        let spurious = 100 + extra;
        let mut more = pred.clone();
        more.push(spurious);
        prop_assert!(label_overlap(&more, &gt).0 <= p0);
        prop_assert!(f1(p0, r0) <= 1.0);
    }
}

#[test]
fn empty_predictions_have_zero_recall() {
    let gt = FrameAnnotation {
        frame_id: "a".into(),
        image_path: None,
        individuals: vec![AnnotatedIndividual { id: 1, bbox: BBox::new(0., 0., 10., 10.).unwrap(), actions: vec![2] }],
        groups: vec![AnnotatedGroup { members: vec![1], activities: vec![0] }],
        global: vec![1],
    };
    let s = evaluate_frame(&FramePrediction::empty("a"), &gt, &EvalConfig::default()).unwrap();
    assert_eq!((s.individual.r, s.group.r, s.global.r), (0.0, 0.0, 0.0));
}

#[test]
fn overall_is_the_mean_of_three_f_scores() {
    let f_a = overall(0.545, 0.267, 0.471);
    assert!((f_a - 0.4277).abs() < 1e-4);
    assert!((100.0 * f_a - 42.8).abs() < 0.05);
}
