//! Self-checks that exercise the full objective on tiny instances.

use rand::Rng as _;

use crate::autodiff::{central_differences, max_relative_discrepancy, Tape, Tensor, Var};
use crate::distillation::{
    attention_weights, derive_peer_targets, dis1_loss, mse_approximation_gap, okddip_total_loss,
    DistillSettings,
};
use crate::error::Result;
use crate::models::{StudentGroup, StudentGroupConfig};
use crate::rng;

/// Finite-difference step used by [`okddip_gradcheck`].
pub const GRADCHECK_EPS: f64 = 1e-5;

/// Outcome of a finite-difference check of the full objective.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub detach_targets: bool,
    pub num_params: usize,
    pub max_discrepancy: f64,
}

/// Micro-instance: m = 3 students, 3 classes, batch 2, every parameter
/// (trunk, branches, heads, `W_L`, `W_E`) perturbed.
fn micro_group(seed: u64) -> Result<(StudentGroup, Tensor, Vec<usize>)> {
    let group = StudentGroup::build(StudentGroupConfig::mlp_with(3, 3, 5, 4, 3, seed))?;
    let mut r = rng::stream(seed, &[rng::tags::DATA]);
    let x: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
    Ok((group, Tensor::new(vec![2, 3], x)?, vec![0, 2]))
}

/// The objective at `group`'s parameters. With `frozen` set, the peer
/// predictions inside both levels of targets are the given constants, which
/// is exactly what detaching does to the gradient.
fn objective(
    tape: &mut Tape,
    group: &StudentGroup,
    x: &Tensor,
    labels: &[usize],
    settings: &DistillSettings,
    frozen: Option<&[Tensor]>,
) -> Result<(Var, crate::autodiff::Bound)> {
    let bound = group.bind(tape);
    let xv = tape.leaf(x);
    let out = group.forward(tape, &bound, xv, settings.temperature)?;
    let peers = group.m() - 1;
    let alpha = attention_weights(tape, &bound, &out.features[..peers], group.projector())?;
    let loss = match frozen {
        None => okddip_total_loss(tape, &out, labels, &alpha, settings, 1.0)?.0,
        Some(q) => {
            let consts = q
                .iter()
                .map(|t| tape.constant(t.shape().to_vec(), t.data().to_vec()))
                .collect::<Result<Vec<_>>>()?;
            let ces = out
                .probs
                .iter()
                .map(|&p| tape.cross_entropy(p, labels))
                .collect::<Result<Vec<_>>>()?;
            let ce = tape.add_all(&ces)?;
            let targets = derive_peer_targets(tape, &alpha, &consts, false)?;
            let dis1 = dis1_loss(tape, &targets, &out.soft_probs[..peers])?;
            let sum = tape.add_all(&consts)?;
            let mean = tape.scale(sum, 1.0 / peers as f64);
            let dis2 = tape.kl_divergence(mean, out.soft_probs[peers])?;
            let dis = tape.add(dis1, dis2)?;
            let t2 = settings.temperature * settings.temperature;
            let w = tape.scale(dis, t2);
            tape.add(ce, w)?
        }
    };
    Ok((loss, bound))
}

/// Taped gradient of the full objective (rampup 1, `T = 3`) against central
/// differences over every parameter.
pub fn okddip_gradcheck(detach_targets: bool, seed: u64) -> Result<f64> {
    okddip_gradcheck_report(detach_targets, seed).map(|r| r.max_discrepancy)
}

pub fn okddip_gradcheck_report(detach_targets: bool, seed: u64) -> Result<GradCheckReport> {
    let (mut group, x, labels) = micro_group(seed)?;
    let settings = DistillSettings {
        detach_targets,
        ..DistillSettings::default()
    };

    let mut tape = Tape::new();
    let (loss, bound) = objective(&mut tape, &group, &x, &labels, &settings, None)?;
    let grads = tape.backward(loss)?;
    group.params_mut().zero_grads();
    group.params_mut().accumulate(&bound, &grads);
    let analytic = group.params().flatten_grads();

    let frozen = if detach_targets {
        let mut tape = Tape::new();
        let bound = group.bind(&mut tape);
        let xv = tape.leaf(&x);
        let out = group.forward(&mut tape, &bound, xv, settings.temperature)?;
        Some(
            out.soft_probs[..group.m() - 1]
                .iter()
                .map(|&q| tape.tensor(q))
                .collect::<Vec<_>>(),
        )
    } else {
        None
    };

    let base = group.params().flatten();
    let numeric = central_differences(
        |theta| {
            let mut probe = group.clone();
            probe.params_mut().unflatten(theta)?;
            let mut tape = Tape::new();
            let (loss, _) = objective(&mut tape, &probe, &x, &labels, &settings, frozen.as_deref())?;
            Ok(tape.scalar_value(loss))
        },
        &base,
        GRADCHECK_EPS,
    )?;
    Ok(GradCheckReport {
        detach_targets,
        num_params: base.len(),
        max_discrepancy: max_relative_discrepancy(&analytic, &numeric),
    })
}

// ---- property suite ----

/// One named check with a one-line outcome.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {}: {}", self.name, self.detail)
    }
}

fn check(name: &'static str, body: impl FnOnce() -> Result<(bool, String)>) -> Check {
    match body() {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Full-objective finite-difference check for both target-detach settings.
pub fn check_gradients() -> Check {
    check("gradient correctness", || {
        let mut worst: f64 = 0.0;
        let mut parts = Vec::new();
        for detach in [true, false] {
            let r = okddip_gradcheck_report(detach, 1)?;
            worst = worst.max(r.max_discrepancy);
            parts.push(format!("detach={detach}: {:.2e} over {} params", r.max_discrepancy, r.num_params));
        }
        Ok((worst < 1e-4, parts.join("; ")))
    })
}

/// Row-stochastic, strictly positive attention on random draws, and at least
/// one asymmetric pair.
pub fn check_attention_invariants(draws: usize, seed: u64) -> Check {
    use crate::autodiff::ParamStore;
    use crate::distillation::AttentionProjector;
    check("attention invariants", move || {
        let mut r = rng::stream(seed, &[rng::tags::PROJECTOR]);
        let mut worst_sum: f64 = 0.0;
        let mut min_entry = f64::INFINITY;
        let mut asymmetric = 0usize;
        for _ in 0..draws {
            let k = r.random_range(2..=6);
            let batch = r.random_range(1..=3);
            let d = r.random_range(2..=8);
            let mut store = ParamStore::new();
            let proj = AttentionProjector::register(&mut store, d, d, &mut r);
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let feats: Vec<Var> = (0..k)
                .map(|_| {
                    let v: Vec<f64> = (0..batch * d).map(|_| r.random_range(-2.0..2.0)).collect();
                    Tensor::new(vec![batch, d], v).map(|t| tape.leaf(&t))
                })
                .collect::<Result<_>>()?;
            let alpha = attention_weights(&mut tape, &bound, &feats, &proj)?.to_tensor(&tape);
            let a = alpha.data();
            for row in a.chunks(k) {
                worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
                min_entry = row.iter().copied().fold(min_entry, f64::min);
            }
            let found = (0..batch).any(|i| {
                (0..k).any(|x| (0..k).any(|y| (a[(i * k + x) * k + y] - a[(i * k + y) * k + x]).abs() > 1e-9))
            });
            asymmetric += found as usize;
        }
        let ok = worst_sum < 1e-9 && min_entry > 0.0 && asymmetric > 0;
        Ok((
            ok,
            format!(
                "{draws} draws: max |row sum - 1| = {worst_sum:.1e}, min entry = {min_entry:.2e}, {asymmetric} draws asymmetric"
            ),
        ))
    })
}

/// Uniform attention equals the mean ablation (loss and gradients, exactly);
/// self-only attention has no cross-peer gradient coupling.
pub fn check_degenerate_identities() -> Check {
    use crate::distillation::{ablation_weights, AblationContext, AttentionKind};
    check("degenerate aggregation", || {
        let (mut group, x, labels) = micro_group(2)?;
        // Zero projections give all-equal scores, i.e. uniform attention.
        for id in group.projector().param_ids() {
            group.params_mut().get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let settings = DistillSettings::default();
        let peers = group.m() - 1;
        let eval = |mean: bool| -> Result<(f64, Vec<f64>)> {
            let mut tape = Tape::new();
            let bound = group.bind(&mut tape);
            let xv = tape.leaf(&x);
            let out = group.forward(&mut tape, &bound, xv, settings.temperature)?;
            let alpha = if mean {
                let mut r = rng::stream(0, &[rng::tags::ABLATION]);
                let ctx = AblationContext { features: &out.features[..peers], rng: &mut r };
                ablation_weights(&mut tape, AttentionKind::Mean, ctx)?
            } else {
                attention_weights(&mut tape, &bound, &out.features[..peers], group.projector())?
            };
            let (loss, _) = okddip_total_loss(&mut tape, &out, &labels, &alpha, &settings, 1.0)?;
            let grads = tape.backward(loss)?;
            let g: Vec<f64> = out
                .logits
                .iter()
                .flat_map(|&v| grads.get(v).map(<[f64]>::to_vec).unwrap_or_default())
                .collect();
            Ok((tape.scalar_value(loss), g))
        };
        let uniform = eval(false)?;
        let mean = eval(true)?;
        let same = uniform == mean;

        // Self-only: the KL term of peer a must not reach peer b's logits.
        let mut coupling: f64 = 0.0;
        for detach in [true, false] {
            for a in 0..peers {
                let mut tape = Tape::new();
                let bound = group.bind(&mut tape);
                let xv = tape.leaf(&x);
                let out = group.forward(&mut tape, &bound, xv, settings.temperature)?;
                let mut r = rng::stream(0, &[rng::tags::ABLATION]);
                let ctx = AblationContext { features: &out.features[..peers], rng: &mut r };
                let alpha = ablation_weights(&mut tape, AttentionKind::SelfOnly, ctx)?;
                let t = derive_peer_targets(&mut tape, &alpha, &out.soft_probs[..peers], detach)?;
                let term = tape.kl_divergence(t[a], out.soft_probs[a])?;
                let grads = tape.backward(term)?;
                for b in (0..peers).filter(|&b| b != a) {
                    if let Some(g) = grads.get(out.logits[b]) {
                        coupling = g.iter().fold(coupling, |m, v| m.max(v.abs()));
                    }
                }
            }
        }
        Ok((
            same && coupling == 0.0,
            format!(
                "uniform vs mean: {} (loss {:.6}); self-only max cross-peer gradient = {coupling:e}",
                if same { "identical" } else { "DIFFERENT" },
                uniform.0
            ),
        ))
    })
}

/// Scaled-gradient gap between softened KL and squared error on zero-mean
/// random logits.
pub fn check_mse_probe() -> Check {
    use rand_distr::StandardNormal;
    check("KL ≈ MSE probe", || {
        let mut r = rng::stream(11, &[rng::tags::DATA]);
        let (n, c) = (64, 4);
        let mut zero_mean = || -> Vec<f64> {
            let mut rows = Vec::with_capacity(n * c);
            for _ in 0..n {
                let row: Vec<f64> = (0..c).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
                let mean = row.iter().sum::<f64>() / c as f64;
                rows.extend(row.into_iter().map(|v| v - mean));
            }
            rows
        };
        let z = Tensor::new(vec![n, c], zero_mean())?;
        let v = zero_mean();
        let mut gaps = Vec::new();
        for temperature in [5.0, 20.0, 80.0] {
            let mut t = vec![0.0; n * c];
            for (src, dst) in v.chunks(c).zip(t.chunks_mut(c)) {
                crate::autodiff::softmax_row(src, temperature, dst);
            }
            let targets = Tensor::new(vec![n, c], t)?;
            gaps.push(mse_approximation_gap(&targets, &z, temperature)?);
        }
        let ok = gaps[1] < 0.05 && gaps[0] > gaps[1] && gaps[1] > gaps[2];
        Ok((
            ok,
            format!("gap T=5: {:.4}, T=20: {:.4}, T=80: {:.4}", gaps[0], gaps[1], gaps[2]),
        ))
    })
}

/// `rampup = 0` leaves exactly the CE sum; at `T = 3` the distillation terms
/// are multiplied by exactly 9.
pub fn check_loss_algebra() -> Check {
    check("loss algebra", || {
        let (group, x, labels) = micro_group(3)?;
        let settings = DistillSettings::default();
        let eval = |rampup: f64| -> Result<crate::distillation::LossBreakdown> {
            let mut tape = Tape::new();
            let bound = group.bind(&mut tape);
            let xv = tape.leaf(&x);
            let out = group.forward(&mut tape, &bound, xv, settings.temperature)?;
            let alpha = attention_weights(&mut tape, &bound, &out.features[..group.m() - 1], group.projector())?;
            Ok(okddip_total_loss(&mut tape, &out, &labels, &alpha, &settings, rampup)?.1)
        };
        let b0 = eval(0.0)?;
        let ce0: f64 = b0.ce.iter().fold(0.0, |a, v| a + v);
        let b1 = eval(1.0)?;
        let ce1: f64 = b1.ce.iter().fold(0.0, |a, v| a + v);
        let nine = ce1 + 9.0 * (b1.dis1 + b1.dis2);
        let ok = b0.total == ce0 && b1.total == nine && b1.dis1 > 0.0 && b1.dis2 > 0.0;
        Ok((
            ok,
            format!(
                "rampup=0: total - ΣCE = {:e}; rampup=1: total - (ΣCE + 9·dis) = {:e}",
                b0.total - ce0,
                b1.total - nine
            ),
        ))
    })
}

/// Two identical micro runs give identical CSV reports.
pub fn check_determinism() -> Check {
    use crate::data::synth_gaussian_mixture;
    use crate::training::{train_run, TrainConfig};
    check("determinism", || {
        let (train, test) = synth_gaussian_mixture(4, 50, 6, 2.5, 5)?;
        let group = StudentGroup::build(StudentGroupConfig::mlp_with(3, 6, 16, 16, 4, 5))?;
        let cfg = TrainConfig {
            batch_size: 16,
            seed: 5,
            method: "ablation:random".parse()?,
            ..TrainConfig::default().with_epochs(3)
        };
        let (_, a) = train_run(group.clone(), &train, &test, &cfg, None)?;
        let (_, b) = train_run(group, &train, &test, &cfg, None)?;
        let (ca, cb) = (a.to_csv_bytes()?, b.to_csv_bytes()?);
        let mut worst: f64 = 0.0;
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            let pairs = [(ra.loss, rb.loss), (ra.diversity, rb.diversity), (ra.reported_error, rb.reported_error)];
            for (x, y) in pairs {
                worst = worst.max((x - y).abs());
            }
        }
        let ok = ca == cb && worst <= 1e-9 && a.rows.len() == 3;
        Ok((ok, format!("{} rows, CSV bytes identical: {}, max field gap {worst:e}", a.rows.len(), ca == cb)))
    })
}

/// IDX and CIFAR fixtures survive parse → encode byte-for-byte; malformed
/// fixtures give the expected error kinds.
pub fn check_formats() -> Check {
    use crate::data::{
        encode_cifar_binary, encode_idx, idx_dataset, parse_cifar_binary, parse_idx, IdxFile, Split,
    };
    use crate::Error;
    check("format fidelity", || {
        let images = IdxFile::Images {
            rows: 2,
            cols: 3,
            pixels: (0..12u8).map(|v| v * 21).collect(),
        };
        let labels = IdxFile::Labels(vec![4, 9]);
        let mut ok = true;
        for f in [&images, &labels] {
            let bytes = encode_idx(f);
            ok &= encode_idx(&parse_idx(&bytes)?) == bytes;
        }
        let ds = idx_dataset(images.clone(), labels.clone(), Split::Train)?;
        ok &= ds.inputs.data()[1] == 21.0 / 255.0 && ds.labels == [4, 9];

        let cifar: Vec<u8> = (0..2 * crate::data::CIFAR_RECORD).map(|i| (i * 7 % 251) as u8).collect();
        let parsed = parse_cifar_binary(&cifar, Split::Train)?;
        ok &= encode_cifar_binary(&parsed) == cifar;

        let mut bad_magic = encode_idx(&labels);
        bad_magic[3] = 0x02;
        let truncated = &encode_idx(&images)[..20];
        let errors = [
            matches!(parse_idx(&bad_magic), Err(Error::BadMagic { .. })),
            matches!(parse_idx(truncated), Err(Error::Truncated { .. })),
            matches!(
                idx_dataset(images, IdxFile::Labels(vec![1, 2, 3]), Split::Train),
                Err(Error::CountMismatch { .. })
            ),
            matches!(parse_cifar_binary(&cifar[..100], Split::Train), Err(Error::RecordLength { .. })),
        ];
        let kinds = errors.iter().filter(|&&e| e).count();
        ok &= kinds == errors.len();
        Ok((ok, format!("round trips exact: {ok}; {kinds}/4 malformed fixtures rejected with the right kind")))
    })
}

/// Everything above, in order.
pub fn property_suite() -> Vec<Check> {
    vec![
        check_gradients(),
        check_attention_invariants(1000, 7),
        check_degenerate_identities(),
        check_mse_probe(),
        check_loss_algebra(),
        check_determinism(),
        check_formats(),
    ]
}
