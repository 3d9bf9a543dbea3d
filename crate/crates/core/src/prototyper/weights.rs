//! Parameter containers.
//!
//! Every container is generic over its leaf type so the same layout holds
//! plain matrices ([`Matrix`]) or graph handles ([`Var`]) after binding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::tape::{Graph, Var};
use super::{Level, PrototypeError};

/// Standard deviation of the Gaussian weight initialisation.
pub const INIT_STD: f64 = 0.02;

/// Architecture sizes of the encoder, heads and label spaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub dim: usize,
    pub heads: usize,
    /// Prototypes per level.
    pub prototypes: usize,
    /// Largest token count the positional tables accept.
    pub max_tokens: usize,
    pub mlp_ratio: usize,
    pub num_actions: usize,
    pub num_group_activities: usize,
    pub num_global_activities: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            prototypes: 4,
            max_tokens: 256,
            mlp_ratio: 4,
            num_actions: 27,
            num_group_activities: 11,
            num_global_activities: 7,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<(), PrototypeError> {
        let bad = |m: String| Err(PrototypeError::Config(m));
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("heads ({}) must divide dim ({})", self.heads, self.dim));
        }
        if self.prototypes == 0 {
            return bad("at least one prototype per level is required".into());
        }
        if self.max_tokens == 0 || self.mlp_ratio == 0 {
            return bad("max_tokens and mlp_ratio must be >= 1".into());
        }
        if self.num_actions == 0 || self.num_group_activities == 0 || self.num_global_activities == 0 {
            return bad("label spaces must be non-empty".into());
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }
}

/// Naming visitor used for serialisation, gradient checks and binding.
pub trait Visit<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T));
}

fn name(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}

macro_rules! params {
    ($(#[$m:meta])* $ty:ident { $($field:ident),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $ty<T> {
            $(pub $field: T,)+
        }

        impl<T> $ty<T> {
            pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> $ty<U> {
                $ty { $($field: f(&name(prefix, stringify!($field)), &self.$field),)+ }
            }
        }

        impl<T> Visit<T> for $ty<T> {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
                $(f(&name(prefix, stringify!($field)), &self.$field);)+
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
                $(f(&name(prefix, stringify!($field)), &mut self.$field);)+
            }
        }
    };
}

params!(
    /// Query, key, value and output projections (`d×d`); heads split columns.
    AttentionParams { query, key, value, output }
);

params!(
    /// Two linear layers with bias and a GELU between them.
    MlpParams { w1, b1, w2, b2 }
);

params!(
    /// Prototype projections: query side, token key side, token value side
    /// and output merge.
    PrototypeProjections { query, key, value, output }
);

params!(
    /// A linear classifier `x W + b`.
    LinearParams { weight, bias }
);

/// Cross-attention half of an encoding block.
#[derive(Debug, Clone, PartialEq)]
pub struct CmeParams<T> {
    pub attention: AttentionParams<T>,
    pub mlp: MlpParams<T>,
}

impl<T> CmeParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> CmeParams<U> {
        CmeParams {
            attention: self.attention.map(&name(prefix, "attention"), f),
            mlp: self.mlp.map(&name(prefix, "mlp"), f),
        }
    }
}

impl<T> Visit<T> for CmeParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        self.attention.visit(&name(prefix, "attention"), f);
        self.mlp.visit(&name(prefix, "mlp"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.attention.visit_mut(&name(prefix, "attention"), f);
        self.mlp.visit_mut(&name(prefix, "mlp"), f);
    }
}

/// One unified bidirectional encoding block.
///
/// The cross-attention half is absent on the patch-level block, whose
/// top-down path is never used by the propagation chain.
#[derive(Debug, Clone, PartialEq)]
pub struct UbeParams<T> {
    pub cls_token: T,
    pub positional: T,
    pub msa: AttentionParams<T>,
    pub mlp: MlpParams<T>,
    pub proto: PrototypeProjections<T>,
    pub cme: Option<CmeParams<T>>,
}

pub type UbeWeights = UbeParams<Matrix>;
pub type UbeVars = UbeParams<Var>;

impl<T> UbeParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> UbeParams<U> {
        UbeParams {
            cls_token: f(&name(prefix, "cls_token"), &self.cls_token),
            positional: f(&name(prefix, "positional"), &self.positional),
            msa: self.msa.map(&name(prefix, "msa"), f),
            mlp: self.mlp.map(&name(prefix, "mlp"), f),
            proto: self.proto.map(&name(prefix, "proto"), f),
            cme: self.cme.as_ref().map(|c| c.map(&name(prefix, "cme"), f)),
        }
    }
}

impl<T> Visit<T> for UbeParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        f(&name(prefix, "cls_token"), &self.cls_token);
        f(&name(prefix, "positional"), &self.positional);
        self.msa.visit(&name(prefix, "msa"), f);
        self.mlp.visit(&name(prefix, "mlp"), f);
        self.proto.visit(&name(prefix, "proto"), f);
        if let Some(c) = &self.cme {
            c.visit(&name(prefix, "cme"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&name(prefix, "cls_token"), &mut self.cls_token);
        f(&name(prefix, "positional"), &mut self.positional);
        self.msa.visit_mut(&name(prefix, "msa"), f);
        self.mlp.visit_mut(&name(prefix, "mlp"), f);
        self.proto.visit_mut(&name(prefix, "proto"), f);
        if let Some(c) = &mut self.cme {
            c.visit_mut(&name(prefix, "cme"), f);
        }
    }
}

/// Learnable prototypes of one granularity, `J×d`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank<T = Matrix> {
    pub prototypes: T,
    pub level: Level,
}

/// Linear heads producing recognition logits and the membership affinity.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T> {
    pub individual: LinearParams<T>,
    pub group: LinearParams<T>,
    pub global: LinearParams<T>,
    /// Bilinear form for the `Q×Q` membership affinity.
    pub affinity: T,
}

impl<T> HeadParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> HeadParams<U> {
        HeadParams {
            individual: self.individual.map(&name(prefix, "individual"), f),
            group: self.group.map(&name(prefix, "group"), f),
            global: self.global.map(&name(prefix, "global"), f),
            affinity: f(&name(prefix, "affinity"), &self.affinity),
        }
    }
}

impl<T> Visit<T> for HeadParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        self.individual.visit(&name(prefix, "individual"), f);
        self.group.visit(&name(prefix, "group"), f);
        self.global.visit(&name(prefix, "global"), f);
        f(&name(prefix, "affinity"), &self.affinity);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.individual.visit_mut(&name(prefix, "individual"), f);
        self.group.visit_mut(&name(prefix, "group"), f);
        self.global.visit_mut(&name(prefix, "global"), f);
        f(&name(prefix, "affinity"), &mut self.affinity);
    }
}

/// All learnable state of the prototyper plus its heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    /// Patch → individual block.
    pub p2i: UbeParams<T>,
    /// Individual → group block (its cross-attention refines individuals).
    pub i2g: UbeParams<T>,
    /// Group → global block (its cross-attention refines groups).
    pub g2g: UbeParams<T>,
    pub bank_patch: T,
    pub bank_individual: T,
    pub bank_group: T,
    pub heads: HeadParams<T>,
    /// Maps per-prediction features to `(dx, dy, dw, dh, objectness, class)`.
    pub detection: LinearParams<T>,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&str, &T) -> U) -> ModelParams<U> {
        ModelParams {
            p2i: self.p2i.map("p2i", f),
            i2g: self.i2g.map("i2g", f),
            g2g: self.g2g.map("g2g", f),
            bank_patch: f("bank.patch", &self.bank_patch),
            bank_individual: f("bank.individual", &self.bank_individual),
            bank_group: f("bank.group", &self.bank_group),
            heads: self.heads.map("head", f),
            detection: self.detection.map("detection", f),
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &T)) {
        self.p2i.visit("p2i", f);
        self.i2g.visit("i2g", f);
        self.g2g.visit("g2g", f);
        f("bank.patch", &self.bank_patch);
        f("bank.individual", &self.bank_individual);
        f("bank.group", &self.bank_group);
        self.heads.visit("head", f);
        self.detection.visit("detection", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut T)) {
        self.p2i.visit_mut("p2i", f);
        self.i2g.visit_mut("i2g", f);
        self.g2g.visit_mut("g2g", f);
        f("bank.patch", &mut self.bank_patch);
        f("bank.individual", &mut self.bank_individual);
        f("bank.group", &mut self.bank_group);
        self.heads.visit_mut("head", f);
        self.detection.visit_mut("detection", f);
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _| out.push(n.to_string()));
        out
    }
}

/// Number of input features per detection prediction.
pub fn detection_features(dims: &ModelDims) -> usize {
    dims.dim
}

/// Matrix parameters with their architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct BppModel {
    pub dims: ModelDims,
    pub params: ModelParams<Matrix>,
}

pub type ModelVars = ModelParams<Var>;

impl BppModel {
    /// Gaussian initialisation (std [`INIT_STD`]) from a seed. Biases start
    /// at zero.
    pub fn seeded(dims: ModelDims, seed: u64) -> Result<Self, PrototypeError> {
        Self::seeded_with_std(dims, seed, INIT_STD)
    }

    pub fn seeded_with_std(dims: ModelDims, seed: u64, std: f64) -> Result<Self, PrototypeError> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).map_err(|e| PrototypeError::Config(e.to_string()))?;
        let shapes = Self::expected_shapes(&dims);
        let mut params = shapes.map(&mut |name, &(r, c)| {
            if is_bias(name) {
                Matrix::zeros(r, c)
            } else {
                Matrix::from_vec(r, c, (0..r * c).map(|_| normal.sample(&mut rng)).collect())
            }
        });
        // Keep the patch block free of an unused top-down half.
        params.p2i.cme = None;
        Ok(Self { dims, params })
    }

    /// Expected `(rows, cols)` of every parameter.
    pub fn expected_shapes(dims: &ModelDims) -> ModelParams<(usize, usize)> {
        let d = dims.dim;
        let h = dims.hidden();
        let attention = || AttentionParams {
            query: (d, d),
            key: (d, d),
            value: (d, d),
            output: (d, d),
        };
        let mlp = || MlpParams {
            w1: (d, h),
            b1: (1, h),
            w2: (h, d),
            b2: (1, d),
        };
        let block = |with_cme: bool| UbeParams {
            cls_token: (1, d),
            positional: (dims.max_tokens + 1, d),
            msa: attention(),
            mlp: mlp(),
            proto: PrototypeProjections {
                query: (d, d),
                key: (d, d),
                value: (d, d),
                output: (d, d),
            },
            cme: with_cme.then(|| CmeParams {
                attention: attention(),
                mlp: mlp(),
            }),
        };
        let linear = |out: usize| LinearParams {
            weight: (d, out),
            bias: (1, out),
        };
        ModelParams {
            p2i: block(false),
            i2g: block(true),
            g2g: block(true),
            bank_patch: (dims.prototypes, d),
            bank_individual: (dims.prototypes, d),
            bank_group: (dims.prototypes, d),
            heads: HeadParams {
                individual: linear(dims.num_actions),
                group: linear(dims.num_group_activities),
                global: linear(dims.num_global_activities),
                affinity: (d, d),
            },
            detection: LinearParams {
                weight: (detection_features(dims), 6),
                bias: (1, 6),
            },
        }
    }

    /// Checks every shape against the architecture and that all entries are
    /// finite.
    pub fn validate(&self) -> Result<(), PrototypeError> {
        self.dims.validate()?;
        let mut expected = Vec::new();
        let mut shapes = Self::expected_shapes(&self.dims);
        shapes.p2i.cme = None;
        shapes.visit(&mut |n, s| expected.push((n.to_string(), *s)));
        let mut actual = Vec::new();
        self.params.visit(&mut |n, m| actual.push((n.to_string(), m.shape(), m.is_finite())));
        if expected.len() != actual.len() {
            return Err(PrototypeError::Config(format!(
                "expected {} parameter matrices, found {}",
                expected.len(),
                actual.len()
            )));
        }
        for ((en, es), (an, ashape, finite)) in expected.iter().zip(&actual) {
            if en != an || es != ashape {
                return Err(PrototypeError::Shape {
                    name: an.clone(),
                    expected: *es,
                    found: *ashape,
                });
            }
            if !finite {
                return Err(PrototypeError::NonFinite(an.clone()));
            }
        }
        Ok(())
    }

    /// Clones of every parameter with its name, in visiting order.
    pub fn named(&self) -> Vec<(String, Matrix)> {
        let mut out = Vec::new();
        self.params.visit(&mut |n, m| out.push((n.to_string(), m.clone())));
        out
    }

    pub fn get(&self, name: &str) -> Option<Matrix> {
        let mut found = None;
        self.params.visit(&mut |n, m| {
            if n == name {
                found = Some(m.clone());
            }
        });
        found
    }

    /// Replaces the named matrix; the shape must match.
    pub fn set(&mut self, name: &str, value: Matrix) -> Result<(), PrototypeError> {
        let mut value = Some(value);
        let mut result = Err(PrototypeError::UnknownParameter(name.to_string()));
        self.params.visit_mut(&mut |n, m| {
            if n == name {
                let v = value.take().expect("names are unique");
                if v.shape() != m.shape() {
                    result = Err(PrototypeError::Shape {
                        name: n.to_string(),
                        expected: m.shape(),
                        found: v.shape(),
                    });
                } else {
                    *m = v;
                    result = Ok(());
                }
            }
        });
        result
    }

    /// Registers every parameter as a leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph) -> ModelVars {
        self.params.map(&mut |_, m| graph.leaf(m.clone()))
    }

    /// Graph handle for the named parameter of a bound model.
    pub fn var_of(vars: &ModelVars, name: &str) -> Option<Var> {
        let mut found = None;
        vars.visit(&mut |n, v| {
            if n == name {
                found = Some(*v);
            }
        });
        found
    }

    pub fn bank(&self, level: Level) -> PrototypeBank {
        let prototypes = match level {
            Level::Patch => &self.params.bank_patch,
            Level::Individual => &self.params.bank_individual,
            Level::Group | Level::Global => &self.params.bank_group,
        };
        PrototypeBank {
            prototypes: prototypes.clone(),
            level,
        }
    }
}

fn is_bias(name: &str) -> bool {
    name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2")
}
