use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::distillation::AttentionProjector;
use crate::error::{Error, Result};
use crate::models::layers::{fan_in_uniform, infer_output, InputShape, LayerSpec, Stack};
use crate::rng::{self, tags};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupMode {
    /// Students share a trunk and diverge into per-student branches.
    BranchBased,
    /// Every student is a separate network; the trunk layers are replicated.
    NetworkBased,
}

impl std::str::FromStr for GroupMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "branch_based" | "branch" => Ok(GroupMode::BranchBased),
            "network_based" | "network" => Ok(GroupMode::NetworkBased),
            other => Err(Error::Config(format!("unknown group mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentGroupConfig {
    /// Total students: `m - 1` auxiliary peers plus the leader.
    pub m: usize,
    pub mode: GroupMode,
    pub input: InputShape,
    pub trunk: Vec<LayerSpec>,
    /// Per-student feature extractor; the classifier head is appended.
    pub branch: Vec<LayerSpec>,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Attention projection width; `None` means `feature_dim`.
    pub proj_dim: Option<usize>,
    pub seed: u64,
}

impl StudentGroupConfig {
    /// MLP students: trunk `input -> hidden` ReLU, branch `hidden -> feature_dim` ReLU.
    pub fn mlp(m: usize, input_dim: usize, num_classes: usize, seed: u64) -> Self {
        Self::mlp_with(m, input_dim, 64, 64, num_classes, seed)
    }

    pub fn mlp_with(
        m: usize,
        input_dim: usize,
        hidden: usize,
        feature_dim: usize,
        num_classes: usize,
        seed: u64,
    ) -> Self {
        Self {
            m,
            mode: GroupMode::BranchBased,
            input: InputShape::Vector(input_dim),
            trunk: vec![LayerSpec::Linear {
                out: hidden,
                relu: true,
            }],
            branch: vec![LayerSpec::Linear {
                out: feature_dim,
                relu: true,
            }],
            num_classes,
            feature_dim,
            proj_dim: None,
            seed,
        }
    }

    /// Tiny CNN students: trunk conv3x3x8 + pool, branch conv3x3x16 + pool + flatten.
    pub fn cnn(m: usize, channels: usize, height: usize, width: usize, num_classes: usize, seed: u64) -> Self {
        let feature_dim = 16 * (height / 4) * (width / 4);
        Self {
            m,
            mode: GroupMode::BranchBased,
            input: InputShape::Image {
                channels,
                height,
                width,
            },
            trunk: vec![
                LayerSpec::Conv {
                    out_channels: 8,
                    kernel: 3,
                    relu: true,
                },
                LayerSpec::MaxPool2,
            ],
            branch: vec![
                LayerSpec::Conv {
                    out_channels: 16,
                    kernel: 3,
                    relu: true,
                },
                LayerSpec::MaxPool2,
                LayerSpec::Flatten,
            ],
            num_classes,
            feature_dim,
            proj_dim: None,
            seed,
        }
    }

    pub fn with_mode(mut self, mode: GroupMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn proj_dim(&self) -> usize {
        self.proj_dim.unwrap_or(self.feature_dim)
    }

    pub fn num_peers(&self) -> usize {
        self.m - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::Config(format!("m must be at least 2, got {}", self.m)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.feature_dim == 0 || self.proj_dim() == 0 {
            return Err(Error::Config("feature_dim and proj_dim must be positive".into()));
        }
        let trunk_out = infer_output(self.input, &self.trunk, 0)?;
        let features = infer_output(trunk_out, &self.branch, self.trunk.len())?;
        match features {
            InputShape::Vector(d) if d == self.feature_dim => Ok(()),
            InputShape::Vector(d) => Err(Error::InvalidLayer {
                index: self.trunk.len() + self.branch.len().saturating_sub(1),
                kind: "branch output".into(),
                reason: format!("produces {d} features, config says {}", self.feature_dim),
            }),
            InputShape::Image { .. } => Err(Error::InvalidLayer {
                index: self.trunk.len() + self.branch.len().saturating_sub(1),
                kind: "branch output".into(),
                reason: "features must be flattened before the classifier".into(),
            }),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Student {
    body: Stack,
    head_weight: ParamId,
    head_bias: ParamId,
}

/// `m` students plus the shared attention projector, all in one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct StudentGroup {
    config: StudentGroupConfig,
    params: ParamStore,
    trunk: Stack,
    students: Vec<Student>,
    projector: AttentionProjector,
}

/// Per-student forward results on one tape.
#[derive(Clone, Debug)]
pub struct GroupForwardOutput {
    /// `h_a`, `[batch, feature_dim]`.
    pub features: Vec<Var>,
    /// `g_a`, `[batch, classes]`.
    pub logits: Vec<Var>,
    /// `q_a = softmax(g_a, 1)`.
    pub probs: Vec<Var>,
    /// `q'_a = softmax(g_a, T)`.
    pub soft_probs: Vec<Var>,
    pub temperature: f64,
}

impl GroupForwardOutput {
    pub fn num_students(&self) -> usize {
        self.logits.len()
    }
}

impl StudentGroup {
    pub fn build(config: StudentGroupConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let (trunk_specs, student_specs): (&[LayerSpec], Vec<LayerSpec>) = match config.mode {
            GroupMode::BranchBased => (&config.trunk, config.branch.clone()),
            GroupMode::NetworkBased => (
                &[],
                config.trunk.iter().chain(&config.branch).cloned().collect(),
            ),
        };
        let mut trunk_rng = rng::stream(config.seed, &[tags::INIT, tags::TRUNK]);
        let (trunk, trunk_out) =
            Stack::build(trunk_specs, config.input, "trunk", &mut params, &mut trunk_rng)?;

        let mut students = Vec::with_capacity(config.m);
        for a in 0..config.m {
            let mut srng = rng::stream(config.seed, &[tags::INIT, tags::BRANCH, a as u64]);
            let prefix = format!("student{a}");
            let (body, _) = Stack::build(&student_specs, trunk_out, &prefix, &mut params, &mut srng)?;
            let head_weight = params.add(
                format!("{prefix}.head.weight"),
                fan_in_uniform(
                    vec![config.feature_dim, config.num_classes],
                    config.feature_dim,
                    &mut srng,
                ),
            );
            let head_bias = params.add(
                format!("{prefix}.head.bias"),
                Tensor::zeros(vec![config.num_classes]),
            );
            students.push(Student {
                body,
                head_weight,
                head_bias,
            });
        }

        let mut prng = rng::stream(config.seed, &[tags::INIT, tags::PROJECTOR]);
        let projector =
            AttentionProjector::register(&mut params, config.feature_dim, config.proj_dim(), &mut prng);

        Ok(Self {
            config,
            params,
            trunk,
            students,
            projector,
        })
    }

    pub fn config(&self) -> &StudentGroupConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn projector(&self) -> &AttentionProjector {
        &self.projector
    }

    pub fn m(&self) -> usize {
        self.config.m
    }

    pub fn leader(&self) -> usize {
        self.config.m - 1
    }

    pub fn trunk_param_ids(&self) -> Vec<ParamId> {
        self.trunk.param_ids()
    }

    /// Branch and classifier parameters of student `a` (trunk excluded).
    pub fn student_param_ids(&self, a: usize) -> Vec<ParamId> {
        let s = &self.students[a];
        let mut ids = s.body.param_ids();
        ids.extend([s.head_weight, s.head_bias]);
        ids
    }

    pub fn has_trunk(&self) -> bool {
        !self.trunk.is_empty()
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.params.bind(tape)
    }

    /// Runs every student on `x`; in branch-based mode the trunk is evaluated once.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        temperature: f64,
    ) -> Result<GroupForwardOutput> {
        let shape = tape.shape(x);
        let expected = self.config.input.batch_shape(shape.first().copied().unwrap_or(0));
        if shape != expected.as_slice() {
            return Err(Error::shape("forward_group input", shape, &expected));
        }
        let shared = self.trunk.forward(tape, bound, x)?;
        let m = self.students.len();
        let mut out = GroupForwardOutput {
            features: Vec::with_capacity(m),
            logits: Vec::with_capacity(m),
            probs: Vec::with_capacity(m),
            soft_probs: Vec::with_capacity(m),
            temperature,
        };
        for s in &self.students {
            let h = s.body.forward(tape, bound, shared)?;
            let g = tape.matmul(h, bound.var(s.head_weight))?;
            let g = tape.bias_add(g, bound.var(s.head_bias))?;
            out.probs.push(tape.softmax(g, 1.0)?);
            out.soft_probs.push(tape.softmax(g, temperature)?);
            out.features.push(h);
            out.logits.push(g);
        }
        Ok(out)
    }

    /// T=1 class probabilities of every student, evaluated in chunks.
    pub fn predict(&self, inputs: &Tensor, chunk: usize) -> Result<Vec<Tensor>> {
        let n = inputs.shape().first().copied().unwrap_or(0);
        let classes = self.config.num_classes;
        let per = self.config.input.numel();
        let mut rows: Vec<Vec<f64>> = vec![Vec::with_capacity(n * classes); self.config.m];
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let x = Tensor::new(
                self.config.input.batch_shape(end - start),
                inputs.data()[start * per..end * per].to_vec(),
            )?;
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape);
            let xv = tape.leaf(&x);
            let out = self.forward(&mut tape, &bound, xv, 1.0)?;
            for (dst, &q) in rows.iter_mut().zip(&out.probs) {
                dst.extend_from_slice(tape.value(q));
            }
            start = end;
        }
        rows.into_iter()
            .map(|r| Tensor::new(vec![n, classes], r))
            .collect()
    }
}

/// A single stand-alone network (used as the pre-trained teacher).
#[derive(Clone, Debug)]
pub struct Classifier {
    input: InputShape,
    num_classes: usize,
    params: ParamStore,
    body: Stack,
    head_weight: ParamId,
    head_bias: ParamId,
}

impl Classifier {
    pub fn build(input: InputShape, layers: &[LayerSpec], num_classes: usize, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = rng::stream(seed, &[tags::INIT]);
        let (body, out) = Stack::build(layers, input, "net", &mut params, &mut rng)?;
        let InputShape::Vector(feat) = out else {
            return Err(Error::InvalidLayer {
                index: layers.len().saturating_sub(1),
                kind: "body output".into(),
                reason: "features must be flattened before the classifier".into(),
            });
        };
        let head_weight = params.add(
            "net.head.weight",
            fan_in_uniform(vec![feat, num_classes], feat, &mut rng),
        );
        let head_bias = params.add("net.head.bias", Tensor::zeros(vec![num_classes]));
        Ok(Self {
            input,
            num_classes,
            params,
            body,
            head_weight,
            head_bias,
        })
    }

    /// Two hidden ReLU layers of width `hidden`.
    pub fn mlp(input_dim: usize, hidden: usize, num_classes: usize, seed: u64) -> Result<Self> {
        let layers = [
            LayerSpec::Linear { out: hidden, relu: true },
            LayerSpec::Linear { out: hidden, relu: true },
        ];
        Self::build(InputShape::Vector(input_dim), &layers, num_classes, seed)
    }

    pub fn input(&self) -> InputShape {
        self.input
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn logits(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let h = self.body.forward(tape, bound, x)?;
        let g = tape.matmul(h, bound.var(self.head_weight))?;
        tape.bias_add(g, bound.var(self.head_bias))
    }

    /// Logits for all of `inputs`, computed without gradient tracking.
    pub fn predict_logits(&self, inputs: &Tensor) -> Result<Tensor> {
        let mut frozen = self.params.clone();
        frozen.tensors_mut().iter_mut().for_each(|t| t.set_requires_grad(false));
        let mut tape = Tape::new();
        let bound = frozen.bind(&mut tape);
        let x = tape.leaf(inputs);
        let g = self.logits(&mut tape, &bound, x)?;
        Ok(tape.tensor(g))
    }
}
