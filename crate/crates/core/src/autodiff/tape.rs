use crate::autodiff::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Clamp floor applied to probabilities inside `ln` and divisions.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BiasAdd(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    Reshape(Var),
    Conv2d { input: Var, weight: Var, bias: Var, pad: usize },
    MaxPool2 { input: Var, argmax: Vec<usize> },
    Softmax { input: Var, temperature: f64 },
    CrossEntropy { probs: Var, labels: Vec<usize> },
    Kl { target: Var, pred: Var },
    StackCols(Vec<Var>),
    SelectCol(Var, usize),
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Linear record of executed operations, replayed in reverse by [`Tape::backward`].
///
/// Nodes are appended in execution order, so every node's inputs have
/// smaller indices than the node itself.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one loss with respect to every node of a tape.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (zeros if disconnected) into `tensor.grad`.
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor) {
        match self.get(v) {
            Some(g) => tensor.accumulate_grad(g),
            None => {
                let zeros = vec![0.0; tensor.numel()];
                tensor.accumulate_grad(&zeros);
            }
        }
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, a, b));
    }
    Ok(())
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Copies the value of `v` out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Records `t` as a leaf; gradients flow to it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        if numel(&shape) != value.len() {
            return Err(Error::shape("constant", &shape, &[value.len()]));
        }
        Ok(self.push(shape, value, Op::Leaf, false))
    }

    /// Copies `v` into a new leaf that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (n, k, p) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; n * p];
        for i in 0..n {
            let row = &mut out[i * p..(i + 1) * p];
            for kk in 0..k {
                let aik = av[i * k + kk];
                if aik == 0.0 {
                    continue;
                }
                let brow = &bv[kk * p..(kk + 1) * p];
                row.iter_mut().zip(brow).for_each(|(o, b)| *o += aik * b);
            }
        }
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(vec![n, p], out, Op::MatMul(a, b), ng))
    }

    /// Adds a bias vector to the last axis of a 2-D input.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::shape("bias_add", sx, sb));
        }
        let p = sb[0];
        let bv = self.value(bias);
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i % p])
            .collect();
        let shape = sx.to_vec();
        let ng = self.needs_grad(x) || self.needs_grad(bias);
        Ok(self.push(shape, out, Op::BiasAdd(x, bias), ng))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(shape, out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Sums a non-empty list of same-shaped values.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("add_all of an empty list".into()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).iter().map(|v| f(*v)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs_grad(x);
        self.push(shape, out, op, ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    /// Natural log with the argument clamped at [`PROB_FLOOR`].
    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(PROB_FLOOR).ln(), Op::Ln(x))
    }

    /// Multiplies every row `i` (leading axis) of `x` by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (sx, ss) = (self.shape(x), self.shape(s));
        if sx.is_empty() || ss.len() != 1 || ss[0] != sx[0] {
            return Err(Error::shape("scale_rows", sx, ss));
        }
        let row = numel(sx).checked_div(sx[0]).unwrap_or(0);
        let sv = self.value(s);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v * sv[i / row.max(1)])
            .collect();
        let shape = sx.to_vec();
        let ng = self.needs_grad(x) || self.needs_grad(s);
        Ok(self.push(shape, out, Op::ScaleRows(x, s), ng))
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let sx = self.shape(x);
        if axis >= sx.len() {
            return Err(Error::InvalidArgument(format!(
                "axis {axis} out of range for shape {sx:?}"
            )));
        }
        let (outer, len, inner) = axis_extents(sx, axis);
        let mut shape = sx.to_vec();
        shape.remove(axis);
        let xv = self.value(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xv[(o * len + l) * inner..(o * len + l + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, s)| *d += s);
            }
        }
        if mean && len > 0 {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        let ng = self.needs_grad(x);
        let op = if mean {
            Op::MeanAxis(x, axis)
        } else {
            Op::SumAxis(x, axis)
        };
        Ok(self.push(shape, out, op, ng))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.needs_grad(x);
        self.push(vec![], vec![s], Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.iter().sum::<f64>() / xv.len().max(1) as f64;
        let ng = self.needs_grad(x);
        self.push(vec![], vec![s], Op::MeanAll(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), &shape));
        }
        let value = self.value(x).to_vec();
        let ng = self.needs_grad(x);
        Ok(self.push(shape, value, Op::Reshape(x), ng))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let n = s.first().copied().unwrap_or(1);
        let rest = numel(s).checked_div(n).unwrap_or(0);
        self.reshape(x, vec![n, rest])
    }

    /// Stride-1 2-D convolution over NCHW input with zero padding `pad`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, pad: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(input), self.shape(weight), self.shape(bias));
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] {
            return Err(Error::shape("conv2d", sx, sw));
        }
        if sb != [sw[0]] {
            return Err(Error::shape("conv2d bias", sw, sb));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, k) = (sw[0], sw[2]);
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape("conv2d kernel", sx, sw));
        }
        let (oh, ow) = (h + 2 * pad - k + 1, w + 2 * pad - k + 1);
        let (xv, wv, bv) = (self.value(input), self.value(weight), self.value(bias));
        let mut out = vec![0.0; n * o * oh * ow];
        for ni in 0..n {
            for oi in 0..o {
                let plane = &mut out[((ni * o + oi) * oh) * ow..((ni * o + oi + 1) * oh) * ow];
                plane.iter_mut().for_each(|v| *v = bv[oi]);
                for ci in 0..c {
                    let xp = &xv[((ni * c + ci) * h) * w..((ni * c + ci + 1) * h) * w];
                    for ky in 0..k {
                        for kx in 0..k {
                            let wt = wv[((oi * c + ci) * k + ky) * k + kx];
                            for oy in 0..oh {
                                let iy = oy + ky;
                                if iy < pad || iy - pad >= h {
                                    continue;
                                }
                                let xrow = &xp[(iy - pad) * w..(iy - pad + 1) * w];
                                let orow = &mut plane[oy * ow..(oy + 1) * ow];
                                for (ox, ov) in orow.iter_mut().enumerate() {
                                    let ix = ox + kx;
                                    if ix >= pad && ix - pad < w {
                                        *ov += wt * xrow[ix - pad];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let ng = self.needs_grad(input) || self.needs_grad(weight) || self.needs_grad(bias);
        Ok(self.push(
            vec![n, o, oh, ow],
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                pad,
            },
            ng,
        ))
    }

    /// 2×2 max pooling with stride 2 over NCHW input (odd trailing rows/cols dropped).
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let sx = self.shape(input);
        if sx.len() != 4 || sx[2] < 2 || sx[3] < 2 {
            return Err(Error::shape("max_pool2", sx, &[2, 2]));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(input);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let ng = self.needs_grad(input);
        Ok(self.push(vec![n, c, oh, ow], out, Op::MaxPool2 { input, argmax }, ng))
    }

    /// Row-wise softmax of `logits / temperature` over the last axis of a 2-D input.
    pub fn softmax(&mut self, logits: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive and finite, got {temperature}"
            )));
        }
        let s = self.shape(logits);
        if s.len() != 2 {
            return Err(Error::shape("softmax", s, &[0, 0]));
        }
        let cols = s[1];
        let xv = self.value(logits);
        if xv.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("softmax logits".into()));
        }
        let mut out = vec![0.0; xv.len()];
        for (src, dst) in xv.chunks(cols).zip(out.chunks_mut(cols)) {
            softmax_row(src, temperature, dst);
        }
        let shape = s.to_vec();
        let ng = self.needs_grad(logits);
        Ok(self.push(
            shape,
            out,
            Op::Softmax {
                input: logits,
                temperature,
            },
            ng,
        ))
    }

    /// `-mean_i ln q[i, labels[i]]` with `q` clamped at [`PROB_FLOOR`].
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(probs);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("cross_entropy", s, &[labels.len()]));
        }
        let cols = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {cols} classes"
            )));
        }
        let qv = self.value(probs);
        let n = labels.len().max(1) as f64;
        let loss = -labels
            .iter()
            .enumerate()
            .map(|(i, &y)| qv[i * cols + y].max(PROB_FLOOR).ln())
            .sum::<f64>()
            / n;
        let ng = self.needs_grad(probs);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            ng,
        ))
    }

    /// Batch mean of `Σ_j t_j ln(t_j / q_j)`, with `0 ln 0 = 0` and `q` clamped.
    pub fn kl_divergence(&mut self, target: Var, pred: Var) -> Result<Var> {
        let (st, sq) = (self.shape(target), self.shape(pred));
        if st.len() != 2 || st != sq {
            return Err(Error::shape("kl_divergence", st, sq));
        }
        let n = st[0].max(1) as f64;
        let loss = self
            .value(target)
            .iter()
            .zip(self.value(pred))
            .map(|(&t, &q)| kl_term(t, q))
            .sum::<f64>()
            / n;
        let ng = self.needs_grad(target) || self.needs_grad(pred);
        Ok(self.push(vec![], vec![loss], Op::Kl { target, pred }, ng))
    }

    /// Stacks equal-length 1-D values as the columns of a 2-D value.
    pub fn stack_cols(&mut self, cols: &[Var]) -> Result<Var> {
        let first = *cols
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack_cols of an empty list".into()))?;
        let s0 = self.shape(first).to_vec();
        if s0.len() != 1 {
            return Err(Error::shape("stack_cols", &s0, &[s0.first().copied().unwrap_or(0)]));
        }
        for &c in cols {
            same_shape("stack_cols", &s0, self.shape(c))?;
        }
        let (n, k) = (s0[0], cols.len());
        let mut out = vec![0.0; n * k];
        for (j, &c) in cols.iter().enumerate() {
            for (i, v) in self.value(c).iter().enumerate() {
                out[i * k + j] = *v;
            }
        }
        let ng = cols.iter().any(|&c| self.needs_grad(c));
        Ok(self.push(vec![n, k], out, Op::StackCols(cols.to_vec()), ng))
    }

    pub fn select_col(&mut self, x: Var, col: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || col >= s[1] {
            return Err(Error::shape("select_col", s, &[col]));
        }
        let (n, k) = (s[0], s[1]);
        let xv = self.value(x);
        let out = (0..n).map(|i| xv[i * k + col]).collect();
        let ng = self.needs_grad(x);
        Ok(self.push(vec![n], out, Op::SelectCol(x, col), ng))
    }

    /// Reverse pass from a scalar `loss`, returning gradients for every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ln = self.node(loss);
        if ln.value.len() != 1 {
            return Err(Error::NotScalar(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, k, p) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(*a), self.value(*b));
                if wants(*a) {
                    // ga = g · Bᵀ, accumulated as row updates so the inner loop vectorizes.
                    let mut bt = vec![0.0; p * k];
                    for kk in 0..k {
                        for j in 0..p {
                            bt[j * k + kk] = bv[kk * p + j];
                        }
                    }
                    let mut ga = vec![0.0; n * k];
                    for i in 0..n {
                        let dst = &mut ga[i * k..(i + 1) * k];
                        for j in 0..p {
                            let gij = g[i * p + j];
                            if gij == 0.0 {
                                continue;
                            }
                            dst.iter_mut()
                                .zip(&bt[j * k..(j + 1) * k])
                                .for_each(|(d, b)| *d += gij * b);
                        }
                    }
                    add_into(&mut grads[a.0], &ga);
                }
                if wants(*b) {
                    let mut gb = vec![0.0; k * p];
                    for i in 0..n {
                        let grow = &g[i * p..(i + 1) * p];
                        for kk in 0..k {
                            let aik = av[i * k + kk];
                            if aik == 0.0 {
                                continue;
                            }
                            gb[kk * p..(kk + 1) * p]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(d, gv)| *d += aik * gv);
                        }
                    }
                    add_into(&mut grads[b.0], &gb);
                }
            }
            Op::BiasAdd(x, b) => {
                if wants(*x) {
                    add_into(&mut grads[x.0], g);
                }
                if wants(*b) {
                    let p = self.shape(*b)[0];
                    let mut gb = vec![0.0; p];
                    for row in g.chunks(p) {
                        gb.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    add_into(&mut grads[b.0], &gb);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if wants(*b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if wants(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    add_into(&mut grads[b.0], &neg);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let ga: Vec<f64> = g.iter().zip(self.value(*b)).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[a.0], &ga);
                }
                if wants(*b) {
                    let gb: Vec<f64> = g.iter().zip(self.value(*a)).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[b.0], &gb);
                }
            }
            Op::Scale(x, c) => {
                let gx: Vec<f64> = g.iter().map(|v| v * c).collect();
                add_into(&mut grads[x.0], &gx);
            }
            Op::ScaleRows(x, s) => {
                let rows = self.shape(*s)[0];
                let row = g.len().checked_div(rows).unwrap_or(1);
                let (xv, sv) = (self.value(*x), self.value(*s));
                if wants(*x) {
                    let gx: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, v)| v * sv[i / row])
                        .collect();
                    add_into(&mut grads[x.0], &gx);
                }
                if wants(*s) {
                    let gs: Vec<f64> = g
                        .chunks(row)
                        .zip(xv.chunks(row))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    add_into(&mut grads[s.0], &gs);
                }
            }
            Op::Relu(x) => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(self.value(*x))
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                add_into(&mut grads[x.0], &gx);
            }
            Op::Exp(x) => {
                let gx: Vec<f64> = g.iter().zip(&node.value).map(|(a, y)| a * y).collect();
                add_into(&mut grads[x.0], &gx);
            }
            Op::Ln(x) => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(self.value(*x))
                    .map(|(gv, xv)| if *xv > PROB_FLOOR { gv / xv } else { 0.0 })
                    .collect();
                add_into(&mut grads[x.0], &gx);
            }
            Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
                let (outer, len, inner) = axis_extents(self.shape(*x), *axis);
                let scale = match node.op {
                    Op::MeanAxis(..) if len > 0 => 1.0 / len as f64,
                    _ => 1.0,
                };
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        gx[(o * len + l) * inner..(o * len + l + 1) * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d = s * scale);
                    }
                }
                add_into(&mut grads[x.0], &gx);
            }
            Op::SumAll(x) => {
                let gx = vec![g[0]; self.value(*x).len()];
                add_into(&mut grads[x.0], &gx);
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).len().max(1) as f64;
                let gx = vec![g[0] / n; self.value(*x).len()];
                add_into(&mut grads[x.0], &gx);
            }
            Op::Reshape(x) => add_into(&mut grads[x.0], g),
            Op::Conv2d {
                input,
                weight,
                bias,
                pad,
            } => self.conv2d_backward(*input, *weight, *bias, *pad, g, grads),
            Op::MaxPool2 { input, argmax } => {
                let mut gx = vec![0.0; self.value(*input).len()];
                for (gv, &src) in g.iter().zip(argmax) {
                    gx[src] += gv;
                }
                add_into(&mut grads[input.0], &gx);
            }
            Op::Softmax { input, temperature } => {
                let cols = node.shape[1];
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), dr) in g
                    .chunks(cols)
                    .zip(node.value.chunks(cols))
                    .zip(gx.chunks_mut(cols))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dr[j] = yr[j] * (gr[j] - dot) / temperature;
                    }
                }
                add_into(&mut grads[input.0], &gx);
            }
            Op::CrossEntropy { probs, labels } => {
                let cols = self.shape(*probs)[1];
                let qv = self.value(*probs);
                let n = labels.len().max(1) as f64;
                let mut gq = vec![0.0; qv.len()];
                for (i, &y) in labels.iter().enumerate() {
                    let q = qv[i * cols + y];
                    if q > PROB_FLOOR {
                        gq[i * cols + y] = -g[0] / (n * q);
                    }
                }
                add_into(&mut grads[probs.0], &gq);
            }
            Op::Kl { target, pred } => {
                let n = self.shape(*target)[0].max(1) as f64;
                let (tv, qv) = (self.value(*target), self.value(*pred));
                if wants(*pred) {
                    let gq: Vec<f64> = tv
                        .iter()
                        .zip(qv)
                        .map(|(&t, &q)| {
                            if q > PROB_FLOOR {
                                -g[0] * t / (n * q)
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    add_into(&mut grads[pred.0], &gq);
                }
                if wants(*target) {
                    let gt: Vec<f64> = tv
                        .iter()
                        .zip(qv)
                        .map(|(&t, &q)| {
                            let ratio = t.max(PROB_FLOOR) / q.max(PROB_FLOOR);
                            g[0] * (ratio.ln() + 1.0) / n
                        })
                        .collect();
                    add_into(&mut grads[target.0], &gt);
                }
            }
            Op::StackCols(cols) => {
                let k = cols.len();
                for (j, &c) in cols.iter().enumerate() {
                    if wants(c) {
                        let gc: Vec<f64> = g.iter().skip(j).step_by(k).copied().collect();
                        add_into(&mut grads[c.0], &gc);
                    }
                }
            }
            Op::SelectCol(x, col) => {
                let k = self.shape(*x)[1];
                let mut gx = vec![0.0; self.value(*x).len()];
                for (i, gv) in g.iter().enumerate() {
                    gx[i * k + col] = *gv;
                }
                add_into(&mut grads[x.0], &gx);
            }
        }
    }

    fn conv2d_backward(
        &self,
        input: Var,
        weight: Var,
        bias: Var,
        pad: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (sx, sw) = (self.shape(input), self.shape(weight));
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, k) = (sw[0], sw[2]);
        let (oh, ow) = (h + 2 * pad - k + 1, w + 2 * pad - k + 1);
        let (xv, wv) = (self.value(input), self.value(weight));
        let want_x = self.needs_grad(input);
        let want_w = self.needs_grad(weight);
        let mut gx = vec![0.0; if want_x { xv.len() } else { 0 }];
        let mut gw = vec![0.0; if want_w { wv.len() } else { 0 }];
        let mut gb = vec![0.0; o];
        for ni in 0..n {
            for oi in 0..o {
                let gp = &g[((ni * o + oi) * oh) * ow..((ni * o + oi + 1) * oh) * ow];
                gb[oi] += gp.iter().sum::<f64>();
                for ci in 0..c {
                    let xbase = ((ni * c + ci) * h) * w;
                    for ky in 0..k {
                        for kx in 0..k {
                            let widx = ((oi * c + ci) * k + ky) * k + kx;
                            let wt = wv[widx];
                            let mut acc = 0.0;
                            for oy in 0..oh {
                                let iy = oy + ky;
                                if iy < pad || iy - pad >= h {
                                    continue;
                                }
                                for ox in 0..ow {
                                    let ix = ox + kx;
                                    if ix < pad || ix - pad >= w {
                                        continue;
                                    }
                                    let gv = gp[oy * ow + ox];
                                    let xi = xbase + (iy - pad) * w + ix - pad;
                                    if want_w {
                                        acc += gv * xv[xi];
                                    }
                                    if want_x {
                                        gx[xi] += gv * wt;
                                    }
                                }
                            }
                            if want_w {
                                gw[widx] += acc;
                            }
                        }
                    }
                }
            }
        }
        if want_x {
            add_into(&mut grads[input.0], &gx);
        }
        if want_w {
            add_into(&mut grads[weight.0], &gw);
        }
        if self.needs_grad(bias) {
            add_into(&mut grads[bias.0], &gb);
        }
    }
}

fn kl_term(t: f64, q: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else {
        t * (t / q.max(PROB_FLOOR)).ln()
    }
}

/// Max-subtracted softmax of `src / temperature` written into `dst`.
pub fn softmax_row(src: &[f64], temperature: f64, dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, s) in dst.iter_mut().zip(src) {
        *d = ((s - max) / temperature).exp();
        total += *d;
    }
    dst.iter_mut().for_each(|d| *d /= total);
}
