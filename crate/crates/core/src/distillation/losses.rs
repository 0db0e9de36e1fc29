use crate::autodiff::{Tape, Tensor, Var};
use crate::distillation::attention::AttentionMatrix;
use crate::error::{Error, Result};
use crate::models::GroupForwardOutput;

/// How soft targets are formed from peer outputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillSettings {
    pub temperature: f64,
    /// Treat peer predictions inside targets as constants.
    pub detach_targets: bool,
    /// Aggregate logits and soften the result, instead of aggregating
    /// softened probabilities.
    pub aggregate_logits: bool,
}

impl Default for DistillSettings {
    fn default() -> Self {
        Self {
            temperature: 3.0,
            detach_targets: true,
            aggregate_logits: false,
        }
    }
}

/// Scalar values of every term of one objective evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    /// Cross-entropy of each student that was trained (index = student).
    pub ce: Vec<f64>,
    pub dis1: f64,
    pub dis2: f64,
    /// Summed teacher KL terms (already multiplied by `T²`).
    pub kd: f64,
    pub rampup: f64,
    pub total: f64,
}

fn maybe_detach(tape: &mut Tape, vars: &[Var], detach: bool) -> Vec<Var> {
    if detach {
        vars.iter().map(|&v| tape.detach(v)).collect()
    } else {
        vars.to_vec()
    }
}

/// `Σ_b α_ab · x_b` for every peer `a`.
fn weighted_sums(tape: &mut Tape, alpha: &AttentionMatrix, xs: &[Var]) -> Result<Vec<Var>> {
    if alpha.num_peers() != xs.len() {
        return Err(Error::shape(
            "derive_peer_targets",
            &[alpha.num_peers()],
            &[xs.len()],
        ));
    }
    alpha
        .rows
        .iter()
        .map(|&row| {
            let terms = xs
                .iter()
                .enumerate()
                .map(|(b, &x)| {
                    let w = tape.select_col(row, b)?;
                    tape.scale_rows(x, w)
                })
                .collect::<Result<Vec<_>>>()?;
            tape.add_all(&terms)
        })
        .collect()
}

/// Per-peer targets `t_a = Σ_b α_ab q'_b`.
pub fn derive_peer_targets(
    tape: &mut Tape,
    alpha: &AttentionMatrix,
    soft_probs: &[Var],
    detach: bool,
) -> Result<Vec<Var>> {
    let q = maybe_detach(tape, soft_probs, detach);
    weighted_sums(tape, alpha, &q)
}

/// Alternative targets `softmax(Σ_b α_ab g_b, T)` built from peer logits.
pub fn derive_logit_targets(
    tape: &mut Tape,
    alpha: &AttentionMatrix,
    logits: &[Var],
    temperature: f64,
    detach: bool,
) -> Result<Vec<Var>> {
    let g = maybe_detach(tape, logits, detach);
    weighted_sums(tape, alpha, &g)?
        .into_iter()
        .map(|agg| tape.softmax(agg, temperature))
        .collect()
}

/// First-level loss `Σ_a KL(t_a, q'_a)` over the auxiliary peers.
pub fn dis1_loss(tape: &mut Tape, targets: &[Var], soft_probs: &[Var]) -> Result<Var> {
    if targets.len() != soft_probs.len() || targets.len() < 2 {
        return Err(Error::shape("dis1_loss", &[targets.len()], &[soft_probs.len()]));
    }
    let terms = targets
        .iter()
        .zip(soft_probs)
        .map(|(&t, &q)| tape.kl_divergence(t, q))
        .collect::<Result<Vec<_>>>()?;
    tape.add_all(&terms)
}

/// Leader target: the plain average of the peers' soft predictions.
pub fn leader_target(tape: &mut Tape, peer_soft_probs: &[Var], detach: bool) -> Result<Var> {
    if peer_soft_probs.is_empty() {
        return Err(Error::InvalidArgument("leader target needs at least one peer".into()));
    }
    let q = maybe_detach(tape, peer_soft_probs, detach);
    let sum = tape.add_all(&q)?;
    Ok(tape.scale(sum, 1.0 / q.len() as f64))
}

/// Second-level loss `KL(t_m, q'_m)` with `t_m` the peer average.
pub fn dis2_loss(tape: &mut Tape, peer_soft_probs: &[Var], leader_soft_probs: Var, detach: bool) -> Result<Var> {
    let target = leader_target(tape, peer_soft_probs, detach)?;
    tape.kl_divergence(target, leader_soft_probs)
}

/// `T² · KL(softmax(teacher, T), q')` for a frozen teacher.
pub fn teacher_kl(tape: &mut Tape, student_soft_probs: Var, teacher_logits: &Tensor, temperature: f64) -> Result<Var> {
    let g = tape.constant(teacher_logits.shape().to_vec(), teacher_logits.data().to_vec())?;
    let t = tape.softmax(g, temperature)?;
    let kl = tape.kl_divergence(t, student_soft_probs)?;
    Ok(tape.scale(kl, temperature * temperature))
}

/// Classic KD objective `CE(q, y) + T² · KL(softmax(teacher, T), q')`.
pub fn kd_teacher_loss(
    tape: &mut Tape,
    student_probs: Var,
    student_soft_probs: Var,
    teacher_logits: &Tensor,
    labels: &[usize],
    temperature: f64,
) -> Result<Var> {
    let ce = tape.cross_entropy(student_probs, labels)?;
    let kd = teacher_kl(tape, student_soft_probs, teacher_logits, temperature)?;
    tape.add(ce, kd)
}

fn check_rampup(rampup: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rampup) {
        return Err(Error::InvalidArgument(format!("rampup {rampup} outside [0, 1]")));
    }
    Ok(())
}

/// Peer targets under `settings` (probability or logit aggregation).
pub fn peer_targets(
    tape: &mut Tape,
    out: &GroupForwardOutput,
    peers: usize,
    alpha: &AttentionMatrix,
    settings: &DistillSettings,
) -> Result<Vec<Var>> {
    if settings.aggregate_logits {
        derive_logit_targets(
            tape,
            alpha,
            &out.logits[..peers],
            settings.temperature,
            settings.detach_targets,
        )
    } else {
        derive_peer_targets(tape, alpha, &out.soft_probs[..peers], settings.detach_targets)
    }
}

/// Full objective: `Σ_a CE(q_a, y) + rampup · T² · (dis1 + dis2)`.
///
/// The last student of `out` is the leader; the others are auxiliary peers.
pub fn okddip_total_loss(
    tape: &mut Tape,
    out: &GroupForwardOutput,
    labels: &[usize],
    alpha: &AttentionMatrix,
    settings: &DistillSettings,
    rampup: f64,
) -> Result<(Var, LossBreakdown)> {
    check_rampup(rampup)?;
    let m = out.num_students();
    let peers = m - 1;
    let t2 = settings.temperature * settings.temperature;

    let ces = out
        .probs
        .iter()
        .map(|&q| tape.cross_entropy(q, labels))
        .collect::<Result<Vec<_>>>()?;
    let ce_total = tape.add_all(&ces)?;

    let targets = peer_targets(tape, out, peers, alpha, settings)?;
    let dis1 = dis1_loss(tape, &targets, &out.soft_probs[..peers])?;
    let dis2 = dis2_loss(
        tape,
        &out.soft_probs[..peers],
        out.soft_probs[peers],
        settings.detach_targets,
    )?;
    let dis = tape.add(dis1, dis2)?;
    let weighted = tape.scale(dis, rampup * t2);
    let total = tape.add(ce_total, weighted)?;

    let breakdown = LossBreakdown {
        ce: ces.iter().map(|&c| tape.scalar_value(c)).collect(),
        dis1: tape.scalar_value(dis1),
        dis2: tape.scalar_value(dis2),
        kd: 0.0,
        rampup,
        total: tape.scalar_value(total),
    };
    Ok((total, breakdown))
}
