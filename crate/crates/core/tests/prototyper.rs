use panofocus::prototyper::{
    cme_top_down, evaluate_objective, fixture, forward_bipropagate, prototype_attention, recognition_heads,
    ume_self_attention, BppModel, GumbelMode, GumbelSampler, Level, LossSettings, Matrix, ModelDims, TokenMatrix,
    FIXTURE_INIT_STD,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dims() -> ModelDims {
    ModelDims { dim: 8, heads: 4, max_tokens: 16, ..Default::default() }
}

fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn tokens(m: usize, seed: u64) -> TokenMatrix {
    TokenMatrix::new(random(m, 8, seed), Level::Patch).unwrap()
}

fn rows_sum_to_one(m: &Matrix) -> bool {
    (0..m.rows()).all(|r| (m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_attention_is_a_distribution(m in 1usize..12, seed in 0u64..1000, std in 0.02..1.0f64) {
        let model = BppModel::seeded_with_std(dims(), seed, std).unwrap();
        let x = tokens(m, seed + 1);
        let ume = ume_self_attention(&x, &model.params.p2i, 4).unwrap();
        prop_assert!(ume.attention.iter().all(rows_sum_to_one));
        let mode = GumbelMode::Seeded { seed, scale: 1.0 };
        let proto = prototype_attention(&x, &model.bank(Level::Patch), &model.params.p2i, &mut GumbelSampler::new(mode)).unwrap();
        prop_assert!(rows_sum_to_one(&proto.similarity));
        let cme = cme_top_down(&x, &random(1, 8, seed + 2), model.params.i2g.cme.as_ref().unwrap(), 4).unwrap();
        prop_assert!(cme.attention.iter().all(rows_sum_to_one));
    }

    #[test]
    fn prototype_pooling_ignores_token_order(m in 2usize..12, seed in 0u64..1000, shift in 1usize..11) {
        let model = BppModel::seeded_with_std(dims(), seed, 0.5).unwrap();
        let x = tokens(m, seed + 7);
        let order: Vec<usize> = (0..m).map(|i| (i + shift) % m).rev().collect();
        let permuted = TokenMatrix::new(x.rows.select_rows(&order), Level::Patch).unwrap();
        let bank = model.bank(Level::Patch);
        let a = prototype_attention(&x, &bank, &model.params.p2i, &mut GumbelSampler::disabled()).unwrap();
        let b = prototype_attention(&permuted, &bank, &model.params.p2i, &mut GumbelSampler::disabled()).unwrap();
        prop_assert!(a.pooled.max_abs_diff(&b.pooled) < 1e-6);
    }
}

#[test]
fn one_prototype_attends_uniformly() {
    let model = BppModel::seeded_with_std(ModelDims { prototypes: 1, ..dims() }, 3, 0.5).unwrap();
    assert_eq!(model.params.bank_patch.rows(), 1);
    let out = prototype_attention(&tokens(5, 1), &model.bank(Level::Patch), &model.params.p2i, &mut GumbelSampler::disabled()).unwrap();
    assert!(out.similarity.as_slice().iter().all(|&v| v == 1.0));
}

fn hierarchy_features(model: &BppModel, gumbel: GumbelMode) -> Matrix {
    let patches = [random(3, 8, 1), random(2, 8, 2), random(4, 8, 3)];
    let h = forward_bipropagate(&patches, &[vec![0, 2], vec![1]], model, gumbel).unwrap();
    let mut all = h.individual.into_vec();
    all.extend(h.group.into_vec());
    all.extend(h.global.into_vec());
    let n = all.len();
    Matrix::from_vec(1, n, all)
}

#[test]
fn vanishing_noise_approaches_the_noiseless_pass() {
    let model = BppModel::seeded_with_std(dims(), 5, 0.5).unwrap();
    let base = hierarchy_features(&model, GumbelMode::Disabled);
    let mut diffs = Vec::new();
    for scale in [1e-3, 1e-6] {
        let noisy = hierarchy_features(&model, GumbelMode::Seeded { seed: 9, scale });
        let diff = noisy.max_abs_diff(&base);
        assert!(diff > 0.0, "noise at {scale} had no effect");
        assert!(diff <= 100.0 * scale, "difference {diff} at amplitude {scale}");
        diffs.push(diff);
    }
    // Linear response: a thousandfold smaller amplitude moves outputs about a thousandfold less.
    let ratio = diffs[0] / diffs[1];
    assert!((ratio / 1e3 - 1.0).abs() < 0.05, "ratio {ratio}");
}

#[test]
fn forward_pass_and_losses_are_bitwise_reproducible() {
    let (model, sample) = fixture(dims(), 2, FIXTURE_INIT_STD).unwrap();
    let mode = GumbelMode::Seeded { seed: 4, scale: 1.0 };
    let a = forward_bipropagate(&sample.patches, &sample.groups, &model, mode).unwrap();
    let b = forward_bipropagate(&sample.patches, &sample.groups, &model, mode).unwrap();
    assert_eq!(a, b);
    assert_eq!(recognition_heads(&a, &model).unwrap(), recognition_heads(&b, &model).unwrap());
    let settings = LossSettings { gumbel: mode, ..Default::default() };
    let la = evaluate_objective(&model, &sample, &settings).unwrap();
    let lb = evaluate_objective(&model, &sample, &settings).unwrap();
    assert_eq!(la.total.to_bits(), lb.total.to_bits());
    let again = BppModel::seeded_with_std(dims(), 2, FIXTURE_INIT_STD).unwrap();
    assert_eq!(again, model);
}

#[test]
fn overall_loss_combines_both_paths() {
    let (model, sample) = fixture(dims(), 3, FIXTURE_INIT_STD).unwrap();
    let r = evaluate_objective(&model, &sample, &LossSettings::default()).unwrap();
    assert_eq!(r.lambda, 1e-3);
    assert_eq!(r.detection.lambda_reg, 5.0);
    assert!((r.total - (r.recognition.total + 1e-3 * r.detection.total)).abs() < 1e-12);
}
