use rand::Rng as _;

use crate::autodiff::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// The two projections `W_L`, `W_E` shared by all auxiliary peers.
#[derive(Clone, Debug)]
pub struct AttentionProjector {
    pub w_l: ParamId,
    pub w_e: ParamId,
    pub feature_dim: usize,
    pub proj_dim: usize,
}

impl AttentionProjector {
    /// Registers independent `[feature_dim, proj_dim]` projections, drawn
    /// uniformly in `±1/sqrt(feature_dim)`.
    pub fn register(store: &mut ParamStore, feature_dim: usize, proj_dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (feature_dim as f64).sqrt();
        let draw = |rng: &mut Rng| {
            let data = (0..feature_dim * proj_dim)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            Tensor::new(vec![feature_dim, proj_dim], data).expect("shape matches data")
        };
        let w_l = store.add("attention.w_l", draw(rng));
        let w_e = store.add("attention.w_e", draw(rng));
        Self {
            w_l,
            w_e,
            feature_dim,
            proj_dim,
        }
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.w_l, self.w_e]
    }
}

/// Per-sample attention of each auxiliary peer over all peers.
///
/// `rows[a]` is `[batch, k]` with `rows[a][i, b] = α_ab` for sample `i`.
#[derive(Clone, Debug)]
pub struct AttentionMatrix {
    pub rows: Vec<Var>,
}

impl AttentionMatrix {
    pub fn num_peers(&self) -> usize {
        self.rows.len()
    }

    /// Materializes `[batch, k, k]` with `alpha[i, a, b]`.
    pub fn to_tensor(&self, tape: &Tape) -> Tensor {
        let k = self.rows.len();
        let batch = self.rows.first().map_or(0, |&r| tape.shape(r)[0]);
        let mut data = vec![0.0; batch * k * k];
        for (a, &row) in self.rows.iter().enumerate() {
            for (i, vals) in tape.value(row).chunks(k).enumerate() {
                data[(i * k + a) * k..(i * k + a + 1) * k].copy_from_slice(vals);
            }
        }
        Tensor::new(vec![batch, k, k], data).expect("shape matches data")
    }

    /// Builds a constant matrix from one `[batch, k, k]` tensor.
    pub fn constant(tape: &mut Tape, alpha: &Tensor) -> Result<Self> {
        let s = alpha.shape();
        if s.len() != 3 || s[1] != s[2] {
            return Err(Error::shape("AttentionMatrix::constant", s, &[s[0], s[1], s[1]]));
        }
        let (batch, k) = (s[0], s[1]);
        let rows = (0..k)
            .map(|a| {
                let mut row = Vec::with_capacity(batch * k);
                for i in 0..batch {
                    row.extend_from_slice(&alpha.data()[(i * k + a) * k..(i * k + a + 1) * k]);
                }
                tape.constant(vec![batch, k], row)
            })
            .collect::<Result<_>>()?;
        Ok(Self { rows })
    }
}

fn check_features(tape: &Tape, features: &[Var]) -> Result<()> {
    if features.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "attention needs at least 2 auxiliary peers, got {}",
            features.len()
        )));
    }
    let s0 = tape.shape(features[0]);
    for &h in features {
        if tape.shape(h) != s0 {
            return Err(Error::shape("attention_weights", s0, tape.shape(h)));
        }
        if tape.value(h).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("peer features".into()));
        }
    }
    Ok(())
}

/// Row-normalized Embedded Gaussian weights `softmax_b(L_a · E_b)` over
/// already projected peer features.
pub fn attention_from_projections(tape: &mut Tape, left: &[Var], right: &[Var]) -> Result<AttentionMatrix> {
    let mut rows = Vec::with_capacity(left.len());
    for &l in left {
        let scores = right
            .iter()
            .map(|&e| {
                let prod = tape.mul(l, e)?;
                tape.sum_axis(prod, 1)
            })
            .collect::<Result<Vec<_>>>()?;
        let stacked = tape.stack_cols(&scores)?;
        rows.push(tape.softmax(stacked, 1.0)?);
    }
    Ok(AttentionMatrix { rows })
}

/// Attention of every auxiliary peer over the group, from peer features `h_a`.
pub fn attention_weights(
    tape: &mut Tape,
    bound: &Bound,
    features: &[Var],
    proj: &AttentionProjector,
) -> Result<AttentionMatrix> {
    check_features(tape, features)?;
    let (w_l, w_e) = (bound.var(proj.w_l), bound.var(proj.w_e));
    let left = features
        .iter()
        .map(|&h| tape.matmul(h, w_l))
        .collect::<Result<Vec<_>>>()?;
    let right = features
        .iter()
        .map(|&h| tape.matmul(h, w_e))
        .collect::<Result<Vec<_>>>()?;
    attention_from_projections(tape, &left, &right)
}

/// Same weights with both projections fixed to the identity.
pub fn identity_attention(tape: &mut Tape, features: &[Var]) -> Result<AttentionMatrix> {
    check_features(tape, features)?;
    attention_from_projections(tape, features, features)
}

/// Replacement weight generators used by the ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    /// Fresh positive random rows, normalized, every batch.
    Random,
    /// Uniform `1/k`.
    Mean,
    /// Embedded Gaussian with identity projections.
    IdentityAsymmetry,
    /// Identity rows: each peer attends only to itself.
    SelfOnly,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 4] = [
        AttentionKind::Random,
        AttentionKind::Mean,
        AttentionKind::IdentityAsymmetry,
        AttentionKind::SelfOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::Random => "random",
            AttentionKind::Mean => "mean",
            AttentionKind::IdentityAsymmetry => "identity_asymmetry",
            AttentionKind::SelfOnly => "self_only",
        }
    }
}

impl std::fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(AttentionKind::Random),
            "mean" => Ok(AttentionKind::Mean),
            "identity_asymmetry" | "asymmetry" => Ok(AttentionKind::IdentityAsymmetry),
            "self_only" | "entropy" => Ok(AttentionKind::SelfOnly),
            other => Err(Error::InvalidArgument(format!("unknown attention kind {other:?}"))),
        }
    }
}

/// Inputs an ablation generator may draw on.
pub struct AblationContext<'a> {
    /// Auxiliary-peer features (only `IdentityAsymmetry` reads their values).
    pub features: &'a [Var],
    pub rng: &'a mut Rng,
}

pub fn ablation_weights(
    tape: &mut Tape,
    kind: AttentionKind,
    ctx: AblationContext<'_>,
) -> Result<AttentionMatrix> {
    let k = ctx.features.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "ablation weights need at least 2 auxiliary peers, got {k}"
        )));
    }
    let batch = tape.shape(ctx.features[0])[0];
    let constant_rows = |tape: &mut Tape, f: &mut dyn FnMut(usize) -> Vec<f64>| {
        let rows = (0..k)
            .map(|a| {
                let row: Vec<f64> = (0..batch).flat_map(|_| f(a)).collect();
                tape.constant(vec![batch, k], row)
            })
            .collect::<Result<_>>()?;
        Ok(AttentionMatrix { rows })
    };
    match kind {
        AttentionKind::Mean => constant_rows(tape, &mut |_| vec![1.0 / k as f64; k]),
        AttentionKind::SelfOnly => constant_rows(tape, &mut |a| {
            let mut r = vec![0.0; k];
            r[a] = 1.0;
            r
        }),
        AttentionKind::Random => {
            let rng = ctx.rng;
            constant_rows(tape, &mut |_| {
                // (0, 1]: strictly positive.
                let raw: Vec<f64> = (0..k).map(|_| 1.0 - rng.random::<f64>()).collect();
                let total: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / total).collect()
            })
        }
        AttentionKind::IdentityAsymmetry => identity_attention(tape, ctx.features),
    }
}
