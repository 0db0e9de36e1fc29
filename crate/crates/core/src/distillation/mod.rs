//! Distillation mathematics: attention weights over peers, per-peer soft
//! targets, the two distillation levels, the total objective, the
//! teacher-assisted variant and the ablation weight generators.

mod attention;
mod losses;
mod probe;

pub use attention::{
    ablation_weights, attention_from_projections, attention_weights, identity_attention,
    AblationContext, AttentionKind, AttentionMatrix, AttentionProjector,
};
pub use losses::{
    derive_logit_targets, derive_peer_targets, dis1_loss, dis2_loss, kd_teacher_loss,
    leader_target, okddip_total_loss, peer_targets, teacher_kl, DistillSettings, LossBreakdown,
};
pub use probe::mse_approximation_gap;
