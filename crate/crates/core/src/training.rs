//! Optimizer, schedules and the end-to-end training loops.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::data::{augment_batch, batch_iter, Dataset};
use crate::distillation::{
    ablation_weights, attention_weights, derive_peer_targets, dis1_loss, kd_teacher_loss,
    okddip_total_loss, teacher_kl, AblationContext, AttentionKind, DistillSettings, LossBreakdown,
};
use crate::error::{Error, Result};
use crate::metrics::{ensemble_error, peer_diversity, top1_error, EpochRow, ExperimentReport};
use crate::models::{Classifier, GroupForwardOutput, StudentGroup};
use crate::rng::{self, tags};

/// Chunk size used when evaluating on a test split.
pub const EVAL_CHUNK: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// Replace learned attention with a fixed generator.
    Attention(AttentionKind),
    /// Drop the leader and the second distillation level.
    NoTwoLevel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Okddip,
    /// Every student trained with cross-entropy alone.
    Independent,
    Ablation(Ablation),
    /// OKDDip plus a frozen teacher's soft targets for every student.
    OkddipPlusKd,
    /// Cross-entropy plus a frozen teacher; no peer distillation.
    KdOnly,
}

impl Method {
    /// The five ablations, in report order.
    pub const ABLATIONS: [Method; 5] = [
        Method::Ablation(Ablation::Attention(AttentionKind::Random)),
        Method::Ablation(Ablation::Attention(AttentionKind::SelfOnly)),
        Method::Ablation(Ablation::Attention(AttentionKind::Mean)),
        Method::Ablation(Ablation::Attention(AttentionKind::IdentityAsymmetry)),
        Method::Ablation(Ablation::NoTwoLevel),
    ];

    pub fn needs_teacher(self) -> bool {
        matches!(self, Method::OkddipPlusKd | Method::KdOnly)
    }

    /// Students whose predictions enter the ensemble and diversity metrics.
    pub fn peer_range(self, m: usize) -> std::ops::Range<usize> {
        match self {
            Method::Independent | Method::KdOnly => 0..m,
            _ => 0..m - 1,
        }
    }

    /// The error reported for the method: the leader for OKDDip-style
    /// methods, the fixed peer 0 without the two-level structure, and the
    /// student mean for the baselines.
    pub fn reported_error(self, student_errors: &[f64]) -> f64 {
        match self {
            Method::Independent | Method::KdOnly => {
                student_errors.iter().sum::<f64>() / student_errors.len() as f64
            }
            Method::Ablation(Ablation::NoTwoLevel) => student_errors[0],
            _ => *student_errors.last().unwrap_or(&f64::NAN),
        }
    }

    /// Parameters updated by the optimizer.
    pub fn trainable(self, group: &StudentGroup) -> Vec<ParamId> {
        let m = group.m();
        let students: Vec<usize> = match self {
            Method::Ablation(Ablation::NoTwoLevel) => (0..m - 1).collect(),
            _ => (0..m).collect(),
        };
        let mut ids = group.trunk_param_ids();
        for a in students {
            ids.extend(group.student_param_ids(a));
        }
        let learned_attention = matches!(
            self,
            Method::Okddip | Method::OkddipPlusKd | Method::Ablation(Ablation::NoTwoLevel)
        );
        if learned_attention {
            ids.extend(group.projector().param_ids());
        }
        ids
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Okddip => f.write_str("okddip"),
            Method::Independent => f.write_str("independent"),
            Method::Ablation(Ablation::Attention(k)) => write!(f, "ablation:{}", k.name()),
            Method::Ablation(Ablation::NoTwoLevel) => f.write_str("ablation:no_two_level"),
            Method::OkddipPlusKd => f.write_str("okddip_plus_kd"),
            Method::KdOnly => f.write_str("kd_only"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "okddip" => Ok(Method::Okddip),
            "independent" | "ind" => Ok(Method::Independent),
            "okddip_plus_kd" => Ok(Method::OkddipPlusKd),
            "kd_only" => Ok(Method::KdOnly),
            other => match other.strip_prefix("ablation:") {
                Some("no_two_level") => Ok(Method::Ablation(Ablation::NoTwoLevel)),
                Some(kind) => Ok(Method::Ablation(Ablation::Attention(kind.parse()?))),
                None => Err(Error::Config(format!(
                    "unknown method {other:?} (expected okddip, independent, ablation:<kind>, okddip_plus_kd, kd_only)"
                ))),
            },
        }
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    #[serde(rename = "T")]
    pub temperature: f64,
    pub rampup_epochs: usize,
    pub seed: u64,
    pub method: Method,
    pub detach_targets: bool,
    pub aggregate_logits: bool,
}

impl Default for TrainConfig {
    /// Desk-scale schedule: 100 epochs, drops at 50 and 75, ramp over 25.
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_drop_epochs: vec![50, 75],
            lr_drop_factor: 0.1,
            temperature: 3.0,
            rampup_epochs: 25,
            seed: 0,
            method: Method::Okddip,
            detach_targets: true,
            aggregate_logits: false,
        }
    }
}

impl TrainConfig {
    /// The full 300-epoch CIFAR schedule.
    pub fn paper() -> Self {
        Self {
            epochs: 300,
            lr_drop_epochs: vec![150, 225],
            rampup_epochs: 75,
            ..Self::default()
        }
    }

    /// Sets `epochs` and rescales drops (½, ¾) and ramp-up (¼) proportionally.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self.lr_drop_epochs = vec![epochs / 2, epochs * 3 / 4];
        self.lr_drop_epochs.retain(|&d| d > 0);
        self.lr_drop_epochs.dedup();
        self.rampup_epochs = epochs / 4;
        self
    }

    pub fn settings(&self) -> DistillSettings {
        DistillSettings {
            temperature: self.temperature,
            detach_targets: self.detach_targets,
            aggregate_logits: self.aggregate_logits,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        if !(self.lr0 > 0.0) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) || !(self.lr_drop_factor > 0.0) {
            return bad("weight_decay must be ≥ 0 and lr_drop_factor > 0".into());
        }
        if self.lr_drop_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "lr_drop_epochs must be strictly increasing, got {:?}",
                self.lr_drop_epochs
            ));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return bad(format!("T must be positive, got {}", self.temperature));
        }
        Ok(())
    }
}

// ---- optimizer and schedules ----

/// Velocity buffers, one per parameter of the store they were created for.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    velocity: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            velocity: params.ids().map(|id| vec![0.0; params.get(id).numel()]).collect(),
        }
    }

    pub fn velocity(&self, id: ParamId) -> &[f64] {
        &self.velocity[id.index()]
    }
}

/// Nesterov step on the parameters in `ids`, using their accumulated grads:
/// `g = ∇ + wd·p; v = μv + g; p -= lr·(g + μv)`.
pub fn sgd_nesterov_step(
    params: &mut ParamStore,
    ids: &[ParamId],
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for &id in ids {
        let t = params.get(id);
        if state.velocity[id.index()].len() != t.numel() {
            return Err(Error::shape("sgd_nesterov_step", t.shape(), &[state.velocity[id.index()].len()]));
        }
        if let Some(g) = t.grad() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}", params.name(id))));
            }
        }
    }
    for &id in ids {
        let t = params.get_mut(id);
        let grad = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
        let v = &mut state.velocity[id.index()];
        for ((p, g), v) in t.data_mut().iter_mut().zip(grad).zip(v.iter_mut()) {
            let g = g + weight_decay * *p;
            *v = momentum * *v + g;
            *p -= lr * (g + momentum * *v);
        }
    }
    Ok(())
}

/// `lr0 · factor^k`, `k` = number of drop epochs ≤ `epoch`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    let k = config.lr_drop_epochs.iter().filter(|&&d| d <= epoch).count();
    config.lr0 * config.lr_drop_factor.powi(k as i32)
}

/// Gaussian ramp `exp(-5 (1 - min(epoch / R, 1))²)`; 1 when `R = 0`.
pub fn rampup_weight(epoch: usize, rampup_epochs: usize) -> f64 {
    if rampup_epochs == 0 {
        return 1.0;
    }
    let t = (epoch as f64 / rampup_epochs as f64).min(1.0);
    (-5.0 * (1.0 - t).powi(2)).exp()
}

// ---- losses per method ----

/// The method's objective on one forward pass.
pub fn method_loss(
    tape: &mut Tape,
    group: &StudentGroup,
    bound: &crate::autodiff::Bound,
    out: &GroupForwardOutput,
    labels: &[usize],
    config: &TrainConfig,
    rampup: f64,
    teacher_logits: Option<&Tensor>,
    ablation_rng: &mut rng::Rng,
) -> Result<(Var, LossBreakdown)> {
    let settings = config.settings();
    let m = out.num_students();
    let peers = m - 1;
    let t = config.temperature;
    let teacher = || {
        teacher_logits.ok_or_else(|| Error::InvalidArgument(format!("method {} needs a teacher", config.method)))
    };
    match config.method {
        Method::Okddip | Method::OkddipPlusKd => {
            let alpha = attention_weights(tape, bound, &out.features[..peers], group.projector())?;
            let (loss, mut b) = okddip_total_loss(tape, out, labels, &alpha, &settings, rampup)?;
            if config.method == Method::Okddip {
                return Ok((loss, b));
            }
            let g = teacher()?;
            let kds = out
                .soft_probs
                .iter()
                .map(|&q| teacher_kl(tape, q, g, t))
                .collect::<Result<Vec<_>>>()?;
            let kd = tape.add_all(&kds)?;
            let total = tape.add(loss, kd)?;
            b.kd = tape.scalar_value(kd);
            b.total = tape.scalar_value(total);
            Ok((total, b))
        }
        Method::Ablation(Ablation::Attention(kind)) => {
            let ctx = AblationContext {
                features: &out.features[..peers],
                rng: ablation_rng,
            };
            let alpha = ablation_weights(tape, kind, ctx)?;
            okddip_total_loss(tape, out, labels, &alpha, &settings, rampup)
        }
        Method::Ablation(Ablation::NoTwoLevel) => {
            if !(0.0..=1.0).contains(&rampup) {
                return Err(Error::InvalidArgument(format!("rampup {rampup} outside [0, 1]")));
            }
            let ces = out.probs[..peers]
                .iter()
                .map(|&q| tape.cross_entropy(q, labels))
                .collect::<Result<Vec<_>>>()?;
            let ce = tape.add_all(&ces)?;
            let alpha = attention_weights(tape, bound, &out.features[..peers], group.projector())?;
            let targets = if settings.aggregate_logits {
                crate::distillation::derive_logit_targets(
                    tape,
                    &alpha,
                    &out.logits[..peers],
                    t,
                    settings.detach_targets,
                )?
            } else {
                derive_peer_targets(tape, &alpha, &out.soft_probs[..peers], settings.detach_targets)?
            };
            let dis1 = dis1_loss(tape, &targets, &out.soft_probs[..peers])?;
            let w = tape.scale(dis1, rampup * t * t);
            let total = tape.add(ce, w)?;
            let mut ce_vals: Vec<f64> = ces.iter().map(|&c| tape.scalar_value(c)).collect();
            ce_vals.push(0.0);
            Ok((
                total,
                LossBreakdown {
                    ce: ce_vals,
                    dis1: tape.scalar_value(dis1),
                    dis2: 0.0,
                    kd: 0.0,
                    rampup,
                    total: tape.scalar_value(total),
                },
            ))
        }
        Method::Independent => {
            let ces = out
                .probs
                .iter()
                .map(|&q| tape.cross_entropy(q, labels))
                .collect::<Result<Vec<_>>>()?;
            let total = tape.add_all(&ces)?;
            Ok((
                total,
                LossBreakdown {
                    ce: ces.iter().map(|&c| tape.scalar_value(c)).collect(),
                    rampup,
                    total: tape.scalar_value(total),
                    ..LossBreakdown::default()
                },
            ))
        }
        Method::KdOnly => {
            let g = teacher()?;
            let mut ce = Vec::with_capacity(m);
            let mut terms = Vec::with_capacity(m);
            for (&q, &qs) in out.probs.iter().zip(&out.soft_probs) {
                let term = kd_teacher_loss(tape, q, qs, g, labels, t)?;
                let c = tape.cross_entropy(q, labels)?;
                ce.push(tape.scalar_value(c));
                terms.push(term);
            }
            let total = tape.add_all(&terms)?;
            let total_v = tape.scalar_value(total);
            Ok((
                total,
                LossBreakdown {
                    kd: total_v - ce.iter().sum::<f64>(),
                    ce,
                    rampup,
                    total: total_v,
                    ..LossBreakdown::default()
                },
            ))
        }
    }
}

// ---- training loops ----

fn training_inputs(data: &Dataset, idx: &[usize], seed: u64, epoch: usize) -> Result<(Tensor, Vec<usize>)> {
    let (x, y) = data.gather(idx)?;
    if data.augment && x.shape().len() == 4 {
        // Batches are indexed by their first sample's permutation slot.
        let first = idx.first().copied().unwrap_or(0);
        return Ok((augment_batch(&x, seed, epoch, first)?, y));
    }
    Ok((x, y))
}

/// Test-split metrics of every student.
pub fn evaluate_group(group: &StudentGroup, test: &Dataset, method: Method) -> Result<(Vec<f64>, f64, f64, f64)> {
    let probs = group.predict(&test.inputs, EVAL_CHUNK)?;
    let errors = probs
        .iter()
        .map(|p| top1_error(p, &test.labels))
        .collect::<Result<Vec<_>>>()?;
    let peers = &probs[method.peer_range(group.m())];
    let ens = ensemble_error(peers, &test.labels)?;
    let div = if peers.len() >= 2 { peer_diversity(peers)? } else { f64::NAN };
    let reported = method.reported_error(&errors);
    Ok((errors, reported, ens, div))
}

/// Trains `group` with `config.method`, evaluating on `test` after every epoch.
pub fn train_run(
    group: StudentGroup,
    train: &Dataset,
    test: &Dataset,
    config: &TrainConfig,
    teacher: Option<&Classifier>,
) -> Result<(StudentGroup, ExperimentReport)> {
    train_run_with(group, train, test, config, teacher, |_| {})
}

/// [`train_run`] with a callback after each epoch's row is recorded.
pub fn train_run_with(
    mut group: StudentGroup,
    train: &Dataset,
    test: &Dataset,
    config: &TrainConfig,
    teacher: Option<&Classifier>,
    mut on_epoch: impl FnMut(&EpochRow),
) -> Result<(StudentGroup, ExperimentReport)> {
    config.validate()?;
    if train.input != group.config().input || test.input != group.config().input {
        return Err(Error::InvalidArgument(format!(
            "dataset input {:?} does not match the group's {:?}",
            train.input,
            group.config().input
        )));
    }
    if train.num_classes > group.config().num_classes {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes, group predicts {}",
            train.num_classes,
            group.config().num_classes
        )));
    }
    if config.method.needs_teacher() && teacher.is_none() {
        return Err(Error::InvalidArgument(format!("method {} needs a teacher", config.method)));
    }
    let m = group.m();
    let trainable = config.method.trainable(&group);
    let mut state = OptimizerState::new(group.params());
    let echo = toml::to_string(config).map_err(|e| Error::Config(e.to_string()))?;
    let mut report = ExperimentReport::new(config.seed, config.method.to_string(), m, echo);

    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config);
        let rampup = rampup_weight(epoch, config.rampup_epochs);
        let mut ablation_rng = rng::stream(config.seed, &[tags::ABLATION, epoch as u64]);
        let batches = batch_iter(train.len(), config.batch_size, config.seed, epoch)?;

        let mut sums = LossBreakdown {
            ce: vec![0.0; m],
            ..LossBreakdown::default()
        };
        let mut seen = 0usize;
        for (b, idx) in batches.iter().enumerate() {
            let (x, y) = training_inputs(train, idx, config.seed, epoch)?;
            let teacher_logits = match teacher {
                Some(t) if config.method.needs_teacher() => Some(t.predict_logits(&x)?),
                _ => None,
            };
            let mut tape = Tape::new();
            let bound = group.bind(&mut tape);
            let xv = tape.leaf(&x);
            let (loss, parts) = group
                .forward(&mut tape, &bound, xv, config.temperature)
                .and_then(|out| {
                    method_loss(
                        &mut tape,
                        &group,
                        &bound,
                        &out,
                        &y,
                        config,
                        rampup,
                        teacher_logits.as_ref(),
                        &mut ablation_rng,
                    )
                })
                .map_err(|e| match e {
                    Error::NonFinite(what) => Error::Diverged { epoch, batch: b, what },
                    other => other,
                })?;
            if !parts.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    what: format!("loss {}", parts.total),
                });
            }
            let grads = tape.backward(loss)?;
            let params = group.params_mut();
            params.zero_grads();
            params.accumulate(&bound, &grads);
            sgd_nesterov_step(params, &trainable, &mut state, lr, config.momentum, config.weight_decay)
                .map_err(|e| Error::Diverged {
                    epoch,
                    batch: b,
                    what: e.to_string(),
                })?;

            let w = idx.len() as f64;
            seen += idx.len();
            sums.total += w * parts.total;
            sums.dis1 += w * parts.dis1;
            sums.dis2 += w * parts.dis2;
            sums.kd += w * parts.kd;
            sums.ce.iter_mut().zip(&parts.ce).for_each(|(s, c)| *s += w * c);
        }

        let n = seen.max(1) as f64;
        let (student_errors, reported_error, ens, diversity) = evaluate_group(&group, test, config.method)?;
        let row = EpochRow {
            epoch,
            lr,
            rampup,
            loss: sums.total / n,
            ce: sums.ce.iter().map(|c| c / n).collect(),
            dis1: sums.dis1 / n,
            dis2: sums.dis2 / n,
            kd: sums.kd / n,
            student_errors,
            reported_error,
            ensemble_error: ens,
            diversity,
        };
        on_epoch(&row);
        report.rows.push(row);
    }
    Ok((group, report))
}

/// Trains a stand-alone classifier with cross-entropy (the frozen teacher).
/// Returns the network and its per-epoch test error.
pub fn train_classifier(
    mut net: Classifier,
    train: &Dataset,
    test: &Dataset,
    config: &TrainConfig,
) -> Result<(Classifier, Vec<f64>)> {
    config.validate()?;
    let ids: Vec<ParamId> = net.params().ids().collect();
    let mut state = OptimizerState::new(net.params());
    let mut errors = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config);
        for (b, idx) in batch_iter(train.len(), config.batch_size, config.seed, epoch)?.iter().enumerate() {
            let (x, y) = training_inputs(train, idx, config.seed, epoch)?;
            let mut tape = Tape::new();
            let bound = net.params().bind(&mut tape);
            let xv = tape.leaf(&x);
            let g = net.logits(&mut tape, &bound, xv)?;
            let q = tape.softmax(g, 1.0)?;
            let loss = tape.cross_entropy(q, &y)?;
            if !tape.scalar_value(loss).is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    what: "teacher loss".into(),
                });
            }
            let grads = tape.backward(loss)?;
            let params = net.params_mut();
            params.zero_grads();
            params.accumulate(&bound, &grads);
            sgd_nesterov_step(params, &ids, &mut state, lr, config.momentum, config.weight_decay)?;
        }
        let logits = net.predict_logits(&test.inputs)?;
        errors.push(top1_error(&logits, &test.labels)?);
    }
    Ok((net, errors))
}
