//! Bottom-up and top-down halves of one encoding block.

use super::matrix::Matrix;
use super::tape::{Graph, Var};
use super::weights::{AttentionParams, CmeParams, MlpParams, PrototypeBank, PrototypeProjections, UbeVars, UbeWeights};
use super::{GumbelSampler, PrototypeError, TokenMatrix};

/// Prototypes whose total attention mass falls below this keep their value.
pub const STARVATION_GUARD: f64 = 1e-12;

/// Multi-head scaled dot-product attention. Queries come from `q_in`, keys
/// and values from `kv_in`. Per-head attention maps are appended to `probs`.
pub(crate) fn multi_head_attention(
    g: &mut Graph,
    q_in: Var,
    kv_in: Var,
    w: &AttentionParams<Var>,
    heads: usize,
    probs: &mut Vec<Var>,
) -> Var {
    let q = g.matmul(q_in, w.query);
    let k = g.matmul(kv_in, w.key);
    let v = g.matmul(kv_in, w.value);
    let d = g.shape(q).1;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(k, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let scores = g.scale(scores, scale);
        let a = g.softmax_rows(scores);
        probs.push(a);
        outs.push(g.matmul(a, vh));
    }
    let merged = g.concat_cols(&outs);
    g.matmul(merged, w.output)
}

pub(crate) fn mlp(g: &mut Graph, x: Var, w: &MlpParams<Var>) -> Var {
    let h = g.matmul(x, w.w1);
    let h = g.add_row(h, w.b1);
    let h = g.gelu(h);
    let o = g.matmul(h, w.w2);
    g.add_row(o, w.b2)
}

pub(crate) struct UmeVars {
    pub input: Var,
    pub hidden: Var,
    pub cls_out: Var,
    pub attention: Vec<Var>,
}

/// Self-attention encoder over `[cls; x] + positional`. `x = None` encodes
/// the CLS token alone.
pub(crate) fn ume_graph(g: &mut Graph, x: Option<Var>, w: &UbeVars, heads: usize) -> Result<UmeVars, PrototypeError> {
    let m = x.map_or(0, |x| g.shape(x).0);
    let table = g.shape(w.positional).0;
    if m + 1 > table {
        return Err(PrototypeError::TooManyTokens {
            tokens: m,
            max: table - 1,
        });
    }
    let tokens = match x {
        Some(x) => g.concat_rows(&[w.cls_token, x]),
        None => w.cls_token,
    };
    let pos = g.slice_rows(w.positional, 0, m + 1);
    let z = g.add(tokens, pos);
    let mut attention = Vec::new();
    let att = multi_head_attention(g, z, z, &w.msa, heads, &mut attention);
    let z_bar = g.add(att, z);
    let m_out = mlp(g, z_bar, &w.mlp);
    let z_hat = g.add(m_out, z_bar);
    let cls_out = g.slice_rows(z_hat, 0, 1);
    Ok(UmeVars {
        input: z,
        hidden: z_hat,
        cls_out,
        attention,
    })
}

pub(crate) struct PrototypeVars {
    pub pooled: Var,
    pub similarity: Option<Var>,
    pub updated: Var,
    pub starved: Vec<usize>,
}

/// Prototype similarity, update and pooling.
///
/// `A = softmax_j(x_i Wk · p_j Wq + γ_j)`, each prototype moves by
/// `Wo`-projected attention-weighted mean of `x Wv`, and the updated
/// prototypes are averaged.
pub(crate) fn prototype_graph(
    g: &mut Graph,
    x: Option<Var>,
    bank: Var,
    w: &PrototypeProjections<Var>,
    gumbel: &mut GumbelSampler,
) -> PrototypeVars {
    let j = g.shape(bank).0;
    let noise = gumbel.sample(j);
    let Some(x) = x else {
        return PrototypeVars {
            pooled: g.mean_rows(bank),
            similarity: None,
            updated: bank,
            starved: (0..j).collect(),
        };
    };
    let pq = g.matmul(bank, w.query);
    let xk = g.matmul(x, w.key);
    let pq_t = g.transpose(pq);
    let mut logits = g.matmul(xk, pq_t);
    if let Some(noise) = noise {
        let n = g.leaf(noise);
        logits = g.add_row(logits, n);
    }
    let a = g.softmax_rows(logits);
    let xv = g.matmul(x, w.value);
    let a_t = g.transpose(a);
    let num = g.matmul(a_t, xv);
    let mass = g.sum_cols(a_t);
    let starved = (0..j).filter(|&r| g.value(mass).get(r, 0) < STARVATION_GUARD).collect();
    let agg = g.guarded_div_rows(num, mass, STARVATION_GUARD);
    let upd = g.matmul(agg, w.output);
    let updated = g.add(bank, upd);
    PrototypeVars {
        pooled: g.mean_rows(updated),
        similarity: Some(a),
        updated,
        starved,
    }
}

/// Bottom-up block output `o_u + o_r`.
pub(crate) fn ube_graph(
    g: &mut Graph,
    x: Option<Var>,
    bank: Var,
    w: &UbeVars,
    heads: usize,
    gumbel: &mut GumbelSampler,
) -> Result<Var, PrototypeError> {
    let ume = ume_graph(g, x, w, heads)?;
    let proto = prototype_graph(g, x, bank, &w.proto, gumbel);
    Ok(g.add(ume.cls_out, proto.pooled))
}

pub(crate) struct CmeVars {
    pub pooled: Var,
    pub residual: Var,
    pub attention: Vec<Var>,
}

/// Cross-attention from `x_low` to `o_high`, residual MLP, mean over tokens.
pub(crate) fn cme_graph(g: &mut Graph, x_low: Var, o_high: Var, w: &CmeParams<Var>, heads: usize) -> CmeVars {
    let mut attention = Vec::new();
    let att = multi_head_attention(g, x_low, o_high, &w.attention, heads, &mut attention);
    let x_bar = g.add(att, x_low);
    let m = mlp(g, x_bar, &w.mlp);
    let r = g.add(m, x_bar);
    CmeVars {
        pooled: g.mean_rows(r),
        residual: x_bar,
        attention,
    }
}

fn check_dim(what: &str, found: usize, expected: usize) -> Result<(), PrototypeError> {
    if found != expected {
        return Err(PrototypeError::Dimension(format!("{what} has {found} columns, expected {expected}")));
    }
    Ok(())
}

fn check_block(w: &UbeWeights, heads: usize) -> Result<usize, PrototypeError> {
    let d = w.cls_token.cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(PrototypeError::Config(format!("heads ({heads}) must divide dim ({d})")));
    }
    Ok(d)
}

fn bind_block(g: &mut Graph, w: &UbeWeights) -> UbeVars {
    w.map("", &mut |_, m| g.leaf(m.clone()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct UmeOutput {
    /// CLS row of the encoded sequence, `1×d`.
    pub cls_out: Matrix,
    /// Encoded sequence, `(M+1)×d`.
    pub hidden: Matrix,
    /// Encoder input `[cls; x] + positional`.
    pub input: Matrix,
    /// One `(M+1)×(M+1)` attention map per head.
    pub attention: Vec<Matrix>,
}

/// Self-attention encoding of one token sequence.
pub fn ume_self_attention(x: &TokenMatrix, w: &UbeWeights, heads: usize) -> Result<UmeOutput, PrototypeError> {
    let d = check_block(w, heads)?;
    check_dim("token matrix", x.dim(), d)?;
    let mut g = Graph::new();
    let vars = bind_block(&mut g, w);
    let xv = g.leaf(x.rows.clone());
    let out = ume_graph(&mut g, Some(xv), &vars, heads)?;
    Ok(UmeOutput {
        cls_out: g.value(out.cls_out).clone(),
        hidden: g.value(out.hidden).clone(),
        input: g.value(out.input).clone(),
        attention: out.attention.iter().map(|&a| g.value(a).clone()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeOutput {
    /// Mean of the updated prototypes, `1×d`.
    pub pooled: Matrix,
    /// Token-to-prototype similarity `A`, `M×J`; each row sums to one.
    pub similarity: Matrix,
    /// Updated prototypes, `J×d`.
    pub updated: Matrix,
    /// Prototypes that received no attention mass and were left unchanged.
    pub starved: Vec<usize>,
}

pub fn prototype_attention(
    x: &TokenMatrix,
    bank: &PrototypeBank,
    w: &UbeWeights,
    gumbel: &mut GumbelSampler,
) -> Result<PrototypeOutput, PrototypeError> {
    let d = w.proto.query.rows();
    check_dim("token matrix", x.dim(), d)?;
    check_dim("prototype bank", bank.prototypes.cols(), d)?;
    let mut g = Graph::new();
    let proj = w.proto.map("", &mut |_, m| g.leaf(m.clone()));
    let xv = g.leaf(x.rows.clone());
    let bv = g.leaf(bank.prototypes.clone());
    let out = prototype_graph(&mut g, Some(xv), bv, &proj, gumbel);
    Ok(PrototypeOutput {
        pooled: g.value(out.pooled).clone(),
        similarity: g.value(out.similarity.expect("tokens present")).clone(),
        updated: g.value(out.updated).clone(),
        starved: out.starved,
    })
}

/// `o_u + o_r` for one token sequence, `1×d`.
pub fn ube_bottom_up(
    x: &TokenMatrix,
    bank: &PrototypeBank,
    w: &UbeWeights,
    heads: usize,
    gumbel: &mut GumbelSampler,
) -> Result<Matrix, PrototypeError> {
    let d = check_block(w, heads)?;
    check_dim("token matrix", x.dim(), d)?;
    check_dim("prototype bank", bank.prototypes.cols(), d)?;
    let mut g = Graph::new();
    let vars = bind_block(&mut g, w);
    let xv = g.leaf(x.rows.clone());
    let bv = g.leaf(bank.prototypes.clone());
    let out = ube_graph(&mut g, Some(xv), bv, &vars, heads, gumbel)?;
    Ok(g.value(out).clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmeOutput {
    /// Pooled refined feature, `1×d`.
    pub pooled: Matrix,
    /// `MCA(x, o) + x` before the MLP.
    pub residual: Matrix,
    /// One `M×1` attention map per head.
    pub attention: Vec<Matrix>,
}

pub fn cme_top_down(
    x_low: &TokenMatrix,
    o_high: &Matrix,
    w: &CmeParams<Matrix>,
    heads: usize,
) -> Result<CmeOutput, PrototypeError> {
    let d = w.attention.query.rows();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(PrototypeError::Config(format!("heads ({heads}) must divide dim ({d})")));
    }
    check_dim("token matrix", x_low.dim(), d)?;
    check_dim("higher-level token", o_high.cols(), d)?;
    let mut g = Graph::new();
    let vars = w.map("", &mut |_, m| g.leaf(m.clone()));
    let xv = g.leaf(x_low.rows.clone());
    let ov = g.leaf(o_high.clone());
    let out = cme_graph(&mut g, xv, ov, &vars, heads);
    Ok(CmeOutput {
        pooled: g.value(out.pooled).clone(),
        residual: g.value(out.residual).clone(),
        attention: out.attention.iter().map(|&a| g.value(a).clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prototyper::{BppModel, GumbelMode, Level, ModelDims};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dims() -> ModelDims {
        ModelDims {
            dim: 8,
            heads: 4,
            max_tokens: 16,
            ..Default::default()
        }
    }

    fn tokens(m: usize, seed: u64) -> TokenMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TokenMatrix::new(Matrix::from_vec(m, 8, (0..m * 8).map(|_| rng.gen_range(-1.0..1.0)).collect()), Level::Patch).unwrap()
    }

    fn zero_like(w: &UbeWeights) -> UbeWeights {
        w.map("", &mut |_, m| Matrix::zeros(m.rows(), m.cols()))
    }

    #[test]
    fn msa_rows_are_distributions() {
        let model = BppModel::seeded_with_std(dims(), 1, 0.5).unwrap();
        let out = ume_self_attention(&tokens(5, 2), &model.params.p2i, 4).unwrap();
        assert_eq!(out.attention.len(), 4);
        for a in &out.attention {
            for r in 0..a.rows() {
                assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(out.hidden.shape(), (6, 8));
    }

    #[test]
    fn zero_weights_zero_cls() {
        let model = BppModel::seeded(dims(), 1).unwrap();
        let w = zero_like(&model.params.p2i);
        let out = ume_self_attention(&tokens(1, 3), &w, 4).unwrap();
        assert!(out.cls_out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_identity_when_projections_zeroed() {
        let model = BppModel::seeded(dims(), 1).unwrap();
        let mut w = model.params.p2i.clone();
        w.msa.output = Matrix::zeros(8, 8);
        w.mlp.w2 = Matrix::zeros(32, 8);
        w.mlp.b2 = Matrix::zeros(1, 8);
        let out = ume_self_attention(&tokens(4, 5), &w, 4).unwrap();
        assert_eq!(out.hidden, out.input);
    }

    #[test]
    fn too_many_tokens() {
        let model = BppModel::seeded(dims(), 1).unwrap();
        let err = ume_self_attention(&tokens(17, 5), &model.params.p2i, 4).unwrap_err();
        assert_eq!(err, PrototypeError::TooManyTokens { tokens: 17, max: 16 });
    }

    #[test]
    fn single_prototype_attention_is_one() {
        let model = BppModel::seeded_with_std(dims(), 1, 0.5).unwrap();
        let bank = PrototypeBank {
            prototypes: model.params.bank_patch.slice_rows(0, 1),
            level: Level::Patch,
        };
        let out = prototype_attention(&tokens(6, 1), &bank, &model.params.p2i, &mut GumbelSampler::disabled()).unwrap();
        assert!(out.similarity.as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn identical_prototypes_give_uniform_similarity() {
        let model = BppModel::seeded_with_std(dims(), 1, 0.5).unwrap();
        let row = model.params.bank_patch.slice_rows(0, 1);
        let bank = PrototypeBank {
            prototypes: Matrix::from_rows(&vec![row.row(0).to_vec(); 4]),
            level: Level::Patch,
        };
        let out = prototype_attention(&tokens(3, 1), &bank, &model.params.p2i, &mut GumbelSampler::disabled()).unwrap();
        for v in out.similarity.as_slice() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn gumbel_noise_is_seeded() {
        let model = BppModel::seeded_with_std(dims(), 1, 0.5).unwrap();
        let bank = model.bank(Level::Patch);
        let x = tokens(3, 1);
        let mode = GumbelMode::Seeded { seed: 11, scale: 1.0 };
        let a = prototype_attention(&x, &bank, &model.params.p2i, &mut GumbelSampler::new(mode)).unwrap();
        let b = prototype_attention(&x, &bank, &model.params.p2i, &mut GumbelSampler::new(mode)).unwrap();
        let c = prototype_attention(&x, &bank, &model.params.p2i, &mut GumbelSampler::disabled()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.similarity, c.similarity);
    }

    #[test]
    fn starved_prototype_keeps_value() {
        // Prototype 1 is pushed to -inf logit relative to prototype 0.
        let mut w = BppModel::seeded(dims(), 1).unwrap().params.p2i;
        w.proto.query = identity(8);
        w.proto.key = identity(8);
        let x = TokenMatrix::new(Matrix::from_rows(&[vec![1.0; 8]]), Level::Patch).unwrap();
        let bank = PrototypeBank {
            prototypes: Matrix::from_rows(&[vec![200.0; 8], vec![-200.0; 8]]),
            level: Level::Patch,
        };
        let out = prototype_attention(&x, &bank, &w, &mut GumbelSampler::disabled()).unwrap();
        assert_eq!(out.starved, vec![1]);
        assert_eq!(out.updated.row(1), bank.prototypes.row(1));
    }

    fn identity(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    #[test]
    fn bottom_up_is_sum_of_parts() {
        let model = BppModel::seeded_with_std(dims(), 4, 0.3).unwrap();
        let x = tokens(5, 9);
        let bank = model.bank(Level::Patch);
        let w = &model.params.p2i;
        let total = ube_bottom_up(&x, &bank, w, 4, &mut GumbelSampler::disabled()).unwrap();
        let u = ume_self_attention(&x, w, 4).unwrap().cls_out;
        let r = prototype_attention(&x, &bank, w, &mut GumbelSampler::disabled()).unwrap().pooled;
        assert_eq!(total, u.zip_map(&r, |a, b| a + b));
        assert_eq!(total.shape(), (1, 8));
    }

    #[test]
    fn cross_attention_single_key() {
        let model = BppModel::seeded_with_std(dims(), 4, 0.3).unwrap();
        let cme = model.params.g2g.cme.clone().unwrap();
        let high = Matrix::row_vector(&[0.3; 8]);
        let out = cme_top_down(&tokens(3, 2), &high, &cme, 4).unwrap();
        for a in &out.attention {
            assert_eq!(a.shape(), (3, 1));
            assert!(a.as_slice().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn cross_attention_zero_mlp_pools_residual() {
        let model = BppModel::seeded_with_std(dims(), 4, 0.3).unwrap();
        let mut cme = model.params.g2g.cme.clone().unwrap();
        cme.mlp = cme.mlp.map("", &mut |_, m| Matrix::zeros(m.rows(), m.cols()));
        let out = cme_top_down(&tokens(3, 2), &Matrix::row_vector(&[0.1; 8]), &cme, 4).unwrap();
        assert!(out.pooled.max_abs_diff(&out.residual.mean_rows()) < 1e-15);
    }
}
