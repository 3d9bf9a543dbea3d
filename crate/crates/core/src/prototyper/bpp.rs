use super::matrix::Matrix;
use super::tape::{Graph, Var};
use super::ube::{cme_graph, ube_graph};
use super::weights::{BppModel, HeadParams, ModelDims, ModelVars};
use super::{GumbelMode, GumbelSampler, PrototypeError};

/// Features at every level of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Hierarchy {
    /// Bottom-up individual tokens, `Q×d`.
    pub individual_forward: Matrix,
    /// Bottom-up group tokens, `L×d`.
    pub group_forward: Matrix,
    /// Final individual features after top-down refinement, `Q×d`.
    pub individual: Matrix,
    /// Final group features after top-down refinement, `L×d`.
    pub group: Matrix,
    /// Global feature, `1×d`.
    pub global: Matrix,
}

pub(crate) struct HierarchyVars {
    pub individual_forward: Var,
    pub group_forward: Var,
    pub individual: Var,
    pub group: Var,
    pub global: Var,
}

/// Checks that `groups` partitions `0..individuals` and returns the group of
/// every individual.
pub(crate) fn group_of(individuals: usize, groups: &[Vec<usize>]) -> Result<Vec<usize>, PrototypeError> {
    let mut owner = vec![usize::MAX; individuals];
    for (g, members) in groups.iter().enumerate() {
        if members.is_empty() {
            return Err(PrototypeError::EmptyGroup(g));
        }
        for &m in members {
            let slot = owner.get_mut(m).ok_or(PrototypeError::UnknownMember(g, m))?;
            if *slot != usize::MAX {
                return Err(PrototypeError::DuplicateMember(m));
            }
            *slot = g;
        }
    }
    if let Some(q) = owner.iter().position(|&o| o == usize::MAX) {
        return Err(PrototypeError::Uncovered(q));
    }
    Ok(owner)
}

fn empty_rows(g: &mut Graph, d: usize) -> Var {
    g.leaf(Matrix::zeros(0, d))
}

/// Records the forward and backward propagation chain on `g`.
pub(crate) fn forward_graph(
    g: &mut Graph,
    vars: &ModelVars,
    dims: &ModelDims,
    patches: &[Var],
    groups: &[Vec<usize>],
    gumbel: &mut GumbelSampler,
) -> Result<HierarchyVars, PrototypeError> {
    let d = dims.dim;
    let heads = dims.heads;
    let owner = group_of(patches.len(), groups)?;
    for &p in patches {
        if g.shape(p).1 != d {
            return Err(PrototypeError::Dimension(format!("patch tokens have {} columns, expected {d}", g.shape(p).1)));
        }
        if g.shape(p).0 == 0 {
            return Err(PrototypeError::Dimension("an individual has no patch tokens".into()));
        }
    }

    if patches.is_empty() {
        // Zero-token guard: the global block sees only its CLS token and
        // unchanged prototypes.
        let global = ube_graph(g, None, vars.bank_group, &vars.g2g, heads, gumbel)?;
        let e1 = empty_rows(g, d);
        let e2 = empty_rows(g, d);
        return Ok(HierarchyVars {
            individual_forward: e1,
            group_forward: e2,
            individual: e1,
            group: e2,
            global,
        });
    }

    // Forward: patches → individuals → groups → global.
    let ind_fwd: Vec<Var> = patches
        .iter()
        .map(|&p| ube_graph(g, Some(p), vars.bank_patch, &vars.p2i, heads, gumbel))
        .collect::<Result<_, _>>()?;
    let mut gro_fwd = Vec::with_capacity(groups.len());
    for members in groups {
        let rows: Vec<Var> = members.iter().map(|&m| ind_fwd[m]).collect();
        let x = g.concat_rows(&rows);
        gro_fwd.push(ube_graph(g, Some(x), vars.bank_individual, &vars.i2g, heads, gumbel)?);
    }
    let gro_fwd_all = g.concat_rows(&gro_fwd);
    let global = ube_graph(g, Some(gro_fwd_all), vars.bank_group, &vars.g2g, heads, gumbel)?;

    // Backward: global → groups → individuals.
    let g2g = vars.g2g.cme.as_ref().ok_or_else(|| PrototypeError::Config("group block lacks cross-attention".into()))?;
    let i2g = vars.i2g.cme.as_ref().ok_or_else(|| PrototypeError::Config("individual block lacks cross-attention".into()))?;
    let gro: Vec<Var> = gro_fwd.iter().map(|&t| cme_graph(g, t, global, g2g, heads).pooled).collect();
    let ind: Vec<Var> = ind_fwd
        .iter()
        .zip(&owner)
        .map(|(&t, &o)| cme_graph(g, t, gro[o], i2g, heads).pooled)
        .collect();

    let ind_fwd_all = g.concat_rows(&ind_fwd);
    let ind_all = g.concat_rows(&ind);
    let gro_all = g.concat_rows(&gro);
    Ok(HierarchyVars {
        individual_forward: ind_fwd_all,
        group_forward: gro_fwd_all,
        individual: ind_all,
        group: gro_all,
        global,
    })
}

/// Runs the bidirectional chain for one frame.
///
/// `patches[q]` holds the patch tokens of individual `q`; `groups` must
/// partition the individuals. With no individuals, `groups` must be empty
/// and only the global feature is produced.
pub fn forward_bipropagate(
    patches: &[Matrix],
    groups: &[Vec<usize>],
    model: &BppModel,
    gumbel: GumbelMode,
) -> Result<Hierarchy, PrototypeError> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let inputs: Vec<Var> = patches.iter().map(|p| g.leaf(p.clone())).collect();
    let h = forward_graph(&mut g, &vars, &model.dims, &inputs, groups, &mut GumbelSampler::new(gumbel))?;
    Ok(Hierarchy {
        individual_forward: g.value(h.individual_forward).clone(),
        group_forward: g.value(h.group_forward).clone(),
        individual: g.value(h.individual).clone(),
        group: g.value(h.group).clone(),
        global: g.value(h.global).clone(),
    })
}

/// Multi-label logits at the three granularities plus membership affinity.
#[derive(Debug, Clone, PartialEq)]
pub struct RecognitionLogits {
    /// `Q×num_actions`.
    pub individual: Matrix,
    /// `L×num_group_activities`.
    pub group: Matrix,
    /// `1×num_global_activities`.
    pub global: Matrix,
    /// `Q×Q` same-group affinity.
    pub affinity: Matrix,
}

pub(crate) struct LogitVars {
    pub individual: Var,
    pub group: Var,
    pub global: Var,
    pub affinity: Var,
}

pub(crate) fn heads_graph(g: &mut Graph, heads: &HeadParams<Var>, h: &HierarchyVars, dims: &ModelDims) -> LogitVars {
    let linear = |g: &mut Graph, x: Var, w: Var, b: Var| {
        let y = g.matmul(x, w);
        g.add_row(y, b)
    };
    let individual = linear(g, h.individual, heads.individual.weight, heads.individual.bias);
    let group = linear(g, h.group, heads.group.weight, heads.group.bias);
    let global = linear(g, h.global, heads.global.weight, heads.global.bias);
    let projected = g.matmul(h.individual, heads.affinity);
    let t = g.transpose(h.individual);
    let raw = g.matmul(projected, t);
    let affinity = g.scale(raw, 1.0 / (dims.dim as f64).sqrt());
    LogitVars {
        individual,
        group,
        global,
        affinity,
    }
}

/// Applies the linear recognition heads to a hierarchy.
pub fn recognition_heads(h: &Hierarchy, model: &BppModel) -> Result<RecognitionLogits, PrototypeError> {
    let d = model.dims.dim;
    for (what, m) in [("individual", &h.individual), ("group", &h.group), ("global", &h.global)] {
        if m.cols() != d {
            return Err(PrototypeError::Dimension(format!("{what} features have {} columns, expected {d}", m.cols())));
        }
    }
    let mut g = Graph::new();
    let heads = model.params.heads.map("", &mut |_, m| g.leaf(m.clone()));
    let individual = g.leaf(h.individual.clone());
    let group = g.leaf(h.group.clone());
    let global = g.leaf(h.global.clone());
    let hv = HierarchyVars {
        individual_forward: individual,
        group_forward: group,
        individual,
        group,
        global,
    };
    let l = heads_graph(&mut g, &heads, &hv, &model.dims);
    Ok(RecognitionLogits {
        individual: g.value(l.individual).clone(),
        group: g.value(l.group).clone(),
        global: g.value(l.global).clone(),
        affinity: g.value(l.affinity).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
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

    fn patches(counts: &[usize], seed: u64) -> Vec<Matrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        counts
            .iter()
            .map(|&n| Matrix::from_vec(n, 8, (0..n * 8).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect()
    }

    #[test]
    fn shapes() {
        let model = BppModel::seeded(dims(), 7).unwrap();
        let h = forward_bipropagate(&patches(&[4, 2, 3], 1), &[vec![0, 2], vec![1]], &model, GumbelMode::Disabled).unwrap();
        assert_eq!(h.individual.shape(), (3, 8));
        assert_eq!(h.group.shape(), (2, 8));
        assert_eq!(h.global.shape(), (1, 8));
        let logits = recognition_heads(&h, &model).unwrap();
        assert_eq!(logits.individual.shape(), (3, 27));
        assert_eq!(logits.group.shape(), (2, 11));
        assert_eq!(logits.global.shape(), (1, 7));
        assert_eq!(logits.affinity.shape(), (3, 3));
    }

    #[test]
    fn minimal_instance_is_finite() {
        let model = BppModel::seeded(dims(), 7).unwrap();
        let h = forward_bipropagate(&patches(&[1], 2), &[vec![0]], &model, GumbelMode::Disabled).unwrap();
        assert!(h.individual.is_finite() && h.group.is_finite() && h.global.is_finite());
    }

    #[test]
    fn zero_individual_guard() {
        let model = BppModel::seeded(dims(), 7).unwrap();
        let h = forward_bipropagate(&[], &[], &model, GumbelMode::Disabled).unwrap();
        assert_eq!(h.individual.shape(), (0, 8));
        assert_eq!(h.global.shape(), (1, 8));
        let logits = recognition_heads(&h, &model).unwrap();
        assert_eq!(logits.individual.shape(), (0, 27));
        assert_eq!(logits.global.shape(), (1, 7));
    }

    #[test]
    fn partition_violations() {
        let model = BppModel::seeded(dims(), 7).unwrap();
        let p = patches(&[2, 2], 3);
        let run = |groups: &[Vec<usize>]| forward_bipropagate(&p, groups, &model, GumbelMode::Disabled).unwrap_err();
        assert_eq!(run(&[vec![0]]), PrototypeError::Uncovered(1));
        assert_eq!(run(&[vec![0, 1], vec![1]]), PrototypeError::DuplicateMember(1));
        assert_eq!(run(&[vec![0, 5], vec![1]]), PrototypeError::UnknownMember(0, 5));
        assert_eq!(run(&[vec![0, 1], vec![]]), PrototypeError::EmptyGroup(1));
    }

    #[test]
    fn zero_weight_heads_give_zero_logits() {
        let mut model = BppModel::seeded(dims(), 7).unwrap();
        model.params.heads = model.params.heads.map("", &mut |_, m| Matrix::zeros(m.rows(), m.cols()));
        let h = forward_bipropagate(&patches(&[3, 3], 4), &[vec![0, 1]], &model, GumbelMode::Disabled).unwrap();
        let logits = recognition_heads(&h, &model).unwrap();
        for m in [&logits.individual, &logits.group, &logits.global, &logits.affinity] {
            assert!(m.as_slice().iter().all(|&v| v == 0.0));
        }
    }
}
