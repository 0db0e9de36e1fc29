//! One replica of an experiment: data, group and (optionally) teacher for a
//! seed, then a training run. Shared by the command-line tool and the
//! acceptance suite.

use crate::config::{DatasetKind, RunConfig};
use crate::data::{
    read_cifar_binary, read_idx_pair, synth_gaussian_mixture_split, Dataset, Split,
};
use crate::error::{Error, Result};
use crate::metrics::{EpochRow, ExperimentReport};
use crate::models::{Classifier, StudentGroup};
use crate::rng::{derive_seed, tags};
use crate::training::{train_classifier, train_run_with, Method, TrainConfig};

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

fn required<'a>(p: &'a Option<std::path::PathBuf>, key: &str) -> Result<&'a std::path::PathBuf> {
    p.as_ref()
        .ok_or_else(|| Error::Config(format!("dataset needs `{key}`")))
}

/// Loads or synthesizes the data for `seed`. Test inputs are normalized
/// with the training split's statistics.
pub fn load_data(cfg: &RunConfig, seed: u64) -> Result<Splits> {
    let (mut train, mut test) = match cfg.dataset {
        DatasetKind::Gaussian => {
            return synth_gaussian_mixture_split(
                cfg.num_classes,
                cfg.train_per_class,
                cfg.test_per_class,
                cfg.input_dim,
                cfg.class_separation,
                derive_seed(seed, &[tags::DATA]),
            )
            .map(|(mut train, mut test)| {
                if let Some(a) = cfg.augment {
                    train.augment = a;
                    test.augment = a;
                }
                Splits { train, test }
            });
        }
        DatasetKind::Idx => (
            read_idx_pair(required(&cfg.train_images, "train_images")?, required(&cfg.train_labels, "train_labels")?, Split::Train)?,
            read_idx_pair(required(&cfg.test_images, "test_images")?, required(&cfg.test_labels, "test_labels")?, Split::Test)?,
        ),
        DatasetKind::Cifar => (
            read_cifar_binary(required(&cfg.train_path, "train_path")?, Split::Train)?,
            read_cifar_binary(required(&cfg.test_path, "test_path")?, Split::Test)?,
        ),
    };
    let stats = train.normalize()?;
    test.normalize_with(&stats)?;
    let classes = train.num_classes.max(test.num_classes).max(cfg.num_classes);
    train.num_classes = classes;
    test.num_classes = classes;
    if let Some(a) = cfg.augment {
        train.augment = a;
    }
    Ok(Splits { train, test })
}

pub fn build_group(cfg: &RunConfig, splits: &Splits, seed: u64) -> Result<StudentGroup> {
    let group_cfg = cfg.group_config(splits.train.input, splits.train.num_classes, derive_seed(seed, &[tags::INIT]));
    StudentGroup::build(group_cfg)
}

/// The training configuration actually used for `seed`.
pub fn train_config(cfg: &RunConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..cfg.train.clone()
    }
}

/// Pre-trains the teacher (two hidden layers of `teacher_hidden`) with
/// cross-entropy on the same schedule shape. Returns it with its final test error.
pub fn train_teacher(cfg: &RunConfig, splits: &Splits, seed: u64) -> Result<(Classifier, f64)> {
    let net = Classifier::mlp(
        splits.train.input.numel(),
        cfg.teacher_hidden,
        splits.train.num_classes,
        derive_seed(seed, &[tags::TEACHER]),
    )?;
    let tcfg = TrainConfig {
        seed: derive_seed(seed, &[tags::TEACHER]),
        method: Method::Independent,
        ..cfg.train.clone().with_epochs(cfg.teacher_epochs)
    };
    let (net, errors) = train_classifier(net, &splits.train, &splits.test, &tcfg)?;
    Ok((net, errors.last().copied().unwrap_or(f64::NAN)))
}

/// Trains one replica. The report's config echo is the full effective config.
pub fn run_seed(
    cfg: &RunConfig,
    seed: u64,
    splits: &Splits,
    teacher: Option<&Classifier>,
    on_epoch: impl FnMut(&EpochRow),
) -> Result<(StudentGroup, ExperimentReport)> {
    let group = build_group(cfg, splits, seed)?;
    let tcfg = train_config(cfg, seed);
    let (group, mut report) = train_run_with(group, &splits.train, &splits.test, &tcfg, teacher, on_epoch)?;
    let effective = RunConfig {
        train: tcfg,
        ..cfg.clone()
    };
    report.config_echo = effective.to_toml();
    Ok((group, report))
}

/// Convenience wrapper: data, teacher if the method needs one, and the run.
pub fn run_method(cfg: &RunConfig, seed: u64) -> Result<(StudentGroup, ExperimentReport)> {
    let splits = load_data(cfg, seed)?;
    let teacher = if cfg.train.method.needs_teacher() {
        Some(train_teacher(cfg, &splits, seed)?.0)
    } else {
        None
    };
    run_seed(cfg, seed, &splits, teacher.as_ref(), |_| {})
}
