use std::time::Instant;

use panofocus::prototyper::{check_model, fixture, LossSettings, ModelDims, FIXTURE_INIT_STD, FIXTURE_SEED};

fn dims() -> ModelDims {
    ModelDims { dim: 8, ..Default::default() }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let (model, sample) = fixture(dims(), FIXTURE_SEED, FIXTURE_INIT_STD).unwrap();
    let start = Instant::now();
    let report = check_model(&model, &sample, &LossSettings::default(), 1e-5).unwrap();
    eprintln!("gradcheck took {:?}", start.elapsed());
    for m in &report.matrices {
        eprintln!("{:40} {:>10.3e} {:>10.3e}", m.name, m.max_rel_error, m.max_abs_gradient);
    }
    assert!(report.passed(1e-4), "max relative error {}", report.max_rel_error());
}

#[test]
fn every_weight_matrix_is_checked() {
    let (model, sample) = fixture(dims(), FIXTURE_SEED, FIXTURE_INIT_STD).unwrap();
    let report = check_model(&model, &sample, &LossSettings::default(), 1e-4).unwrap();
    let names: Vec<_> = model.named().into_iter().map(|(n, _)| n.to_string()).collect();
    let checked: Vec<_> = report.matrices.iter().map(|m| m.name.clone()).collect();
    assert_eq!(names, checked);
    assert!(checked.iter().any(|n| n.starts_with("detection")));
    for m in &report.matrices {
        // Top-down attention sees one key per query, so its softmax is
        // constant and query/key receive no gradient.
        let single_key = m.name.contains(".cme.attention.query") || m.name.contains(".cme.attention.key");
        if single_key {
            assert_eq!(m.max_abs_gradient, 0.0, "{}", m.name);
        } else {
            assert!(m.max_abs_gradient > 0.0, "{} has no gradient", m.name);
        }
    }
}

#[test]
fn large_epsilon_degrades_agreement() {
    let (model, sample) = fixture(dims(), FIXTURE_SEED, FIXTURE_INIT_STD).unwrap();
    let fine = check_model(&model, &sample, &LossSettings::default(), 1e-5).unwrap();
    let coarse = check_model(&model, &sample, &LossSettings::default(), 1e-1).unwrap();
    assert!(coarse.max_rel_error() > fine.max_rel_error());
}
