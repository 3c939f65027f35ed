//! Initialization schemes for the encoder stack.
//!
//! Four schemes are supported:
//!
//! * `StandardLn` — Xavier weights, post-norm layer normalization, and a
//!   linear learning-rate warmup. The conventional recipe.
//! * `TFixup` — no layer norm, no warmup; value/output/MLP weights rescaled
//!   by `0.67 * N^(-1/4)`. Input rescaling from the original recipe is not
//!   applicable when inputs come from a fixed upstream embedder, so only the
//!   weight scaling is exposed.
//! * `DtFixup` — no layer norm, no warmup; the scale is data-dependent:
//!   `xi = (N * (4 mu^2 + 2 mu + 2))^(-1/2)` for relational stacks or
//!   `N^(-1/2) / (2 mu)` for vanilla ones, where `mu` is the largest
//!   per-token input norm observed over the training examples.
//! * `Xavier` — no layer norm and no rescaling; the unscaled contrast
//!   baseline the depth-sweep experiments compare against.
//!
//! `q`, `k` and the relation-key table are never rescaled: they only enter
//! through the softmax and do not drive the hidden-state norm.

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;
use crate::transformer::Encoder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InitKind {
    StandardLn,
    TFixup,
    DtFixup,
    /// Plain Xavier without layer norm: the unscaled baseline.
    Xavier,
}

impl InitKind {
    pub fn name(self) -> &'static str {
        match self {
            InitKind::StandardLn => "standard_ln",
            InitKind::TFixup => "tfixup",
            InitKind::DtFixup => "dtfixup",
            InitKind::Xavier => "xavier",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "standard_ln" => Some(InitKind::StandardLn),
            "tfixup" => Some(InitKind::TFixup),
            "dtfixup" => Some(InitKind::DtFixup),
            "xavier" => Some(InitKind::Xavier),
            _ => None,
        }
    }

    /// Only the standard recipe keeps layer normalization.
    pub fn uses_layer_norm(self) -> bool {
        matches!(self, InitKind::StandardLn)
    }
}

/// A resolved scheme: the tagged kind plus the computed scale factor and, for
/// the data-dependent scheme, the estimated max input norm.
#[derive(Debug, Clone, PartialEq)]
pub struct InitScheme {
    pub kind: InitKind,
    pub relational: bool,
    /// Estimated max per-token input norm (DtFixup only).
    pub mu: Option<f64>,
    /// Scale factor applied to value/output/MLP weights (TFixup, DtFixup).
    pub xi: Option<f64>,
}

impl InitScheme {
    pub fn standard_ln(relational: bool) -> Self {
        Self {
            kind: InitKind::StandardLn,
            relational,
            mu: None,
            xi: None,
        }
    }

    pub fn xavier(relational: bool) -> Self {
        Self {
            kind: InitKind::Xavier,
            relational,
            mu: None,
            xi: None,
        }
    }

    pub fn tfixup(n_blocks: usize, relational: bool) -> Result<Self> {
        if n_blocks < 1 {
            return Err(CoreError::Config("n_blocks must be >= 1".into()));
        }
        Ok(Self {
            kind: InitKind::TFixup,
            relational,
            mu: None,
            xi: Some(tfixup_scale(n_blocks)),
        })
    }

    pub fn dtfixup(n_blocks: usize, mu: f64, relational: bool) -> Result<Self> {
        if n_blocks < 1 {
            return Err(CoreError::Config("n_blocks must be >= 1".into()));
        }
        if !(mu > 0.0) {
            return Err(CoreError::Config("mu must be positive".into()));
        }
        Ok(Self {
            kind: InitKind::DtFixup,
            relational,
            mu: Some(mu),
            xi: Some(dtfixup_scale(n_blocks, mu, relational)),
        })
    }

    /// Multiplier applied to the scaled weight blocks (1 when the scheme does
    /// not rescale).
    pub fn scale_factor(&self) -> f64 {
        self.xi.unwrap_or(1.0)
    }

    /// The scale as it enters the norm-recursion predictions; schemes without
    /// a scale predict zero per-layer growth.
    pub fn xi_or_zero(&self) -> f64 {
        self.xi.unwrap_or(0.0)
    }

    pub fn uses_layer_norm(&self) -> bool {
        self.kind.uses_layer_norm()
    }

    /// Learning-rate schedule this scheme trains with: warmup for the
    /// standard recipe, constant-then-decay with zero warmup otherwise.
    pub fn lr_schedule(&self) -> LrSchedule {
        match self.kind {
            InitKind::StandardLn => LrSchedule {
                warmup_steps: 200,
                constant_steps: 200,
            },
            _ => LrSchedule {
                warmup_steps: 0,
                constant_steps: 200,
            },
        }
    }
}

/// Linear warmup (when configured), a constant plateau, then inverse-sqrt
/// decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub warmup_steps: usize,
    pub constant_steps: usize,
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, step: usize) -> f64 {
        if step < self.warmup_steps {
            return base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let after = step - self.warmup_steps;
        if after < self.constant_steps {
            base
        } else {
            base * (self.constant_steps as f64 / after as f64).sqrt()
        }
    }
}

/// Glorot-uniform sample: entries uniform in
/// `[-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))]`.
pub fn xavier_init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<Tensor> {
    if fan_in == 0 || fan_out == 0 {
        return Err(CoreError::BadShape {
            op: "xavier_init",
            shape: vec![fan_in, fan_out],
            reason: "dimensions must be positive",
        });
    }
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::matrix(fan_in, fan_out, data)
}

/// Max per-token Euclidean norm over a stream of embedded examples (each a
/// `tokens x d_x` tensor). This is the data-dependent quantity the DtFixup
/// scale is computed from; it is estimated once, before training.
pub fn estimate_mu<'a, I>(examples: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a Tensor>,
{
    let mut mu = None::<f64>;
    for example in examples {
        if example.rank() != 2 {
            return Err(CoreError::BadShape {
                op: "estimate_mu",
                shape: example.shape().to_vec(),
                reason: "examples must be rank-2 (tokens x width)",
            });
        }
        let m = example.max_row_norm();
        mu = Some(mu.map_or(m, |prev: f64| prev.max(m)));
    }
    mu.ok_or_else(|| CoreError::Usage("estimate_mu needs at least one example".into()))
}

/// Data-dependent scale: `(N(4mu^2+2mu+2))^(-1/2)` relational,
/// `N^(-1/2)/(2mu)` vanilla.
pub fn dtfixup_scale(n_blocks: usize, mu: f64, relational: bool) -> f64 {
    let n = n_blocks as f64;
    if relational {
        (n * (4.0 * mu * mu + 2.0 * mu + 2.0)).powf(-0.5)
    } else {
        n.powf(-0.5) / (2.0 * mu)
    }
}

/// Depth-only scale `0.67 * N^(-1/4)`.
pub fn tfixup_scale(n_blocks: usize) -> f64 {
    0.67 * (n_blocks as f64).powf(-0.25)
}

/// Rescales a freshly Xavier-initialized stack in place: every head's value
/// projection, the output projection and both MLP matrices are multiplied by
/// the scheme's scale factor, and under relational DtFixup the relation-value
/// table as well. Query/key projections and the relation-key table keep their
/// Xavier scale. Guarded against double application.
pub fn apply_scheme(encoder: &mut Encoder, scheme: &InitScheme) -> Result<()> {
    if scheme.relational != encoder.config.relational {
        return Err(CoreError::Config(format!(
            "scheme is {} but encoder is {}",
            if scheme.relational { "relational" } else { "vanilla" },
            if encoder.config.relational { "relational" } else { "vanilla" },
        )));
    }
    if scheme.uses_layer_norm() != encoder.config.use_layer_norm {
        return Err(CoreError::Config(format!(
            "{} requires use_layer_norm = {}",
            scheme.kind.name(),
            scheme.uses_layer_norm(),
        )));
    }
    encoder.mark_scaled()?;
    let factor = scheme.scale_factor();
    if factor == 1.0 {
        return Ok(());
    }
    for block in &mut encoder.blocks {
        for head in &mut block.heads {
            head.value.scale_in_place(factor);
        }
        block.out_proj.scale_in_place(factor);
        block.mlp_hidden_weight.scale_in_place(factor);
        block.mlp_out_weight.scale_in_place(factor);
    }
    if scheme.kind == InitKind::DtFixup && scheme.relational {
        if let Some(rel) = &mut encoder.relations {
            rel.value_table.scale_in_place(factor);
        }
    }
    Ok(())
}
