use super::loss::{fedprox_penalty, softmax_cross_entropy};
use super::scalar::{matmul, Mat};
use super::{LayerSpec, ModelSpec, NnError, Scalar, Tensor};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

const BN_EPS: f64 = 1e-5;
/// Momentum of the batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.99;

/// Forward-pass mode. Dropout is active and batch-norm uses batch statistics
/// only in `Train`.
pub enum Mode<'a> {
    Train(&'a mut dyn RngCore),
    Eval,
}

impl Mode<'_> {
    fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Trainable values plus non-trainable buffers (batch-norm running statistics).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub values: Vec<T>,
    pub buffers: Vec<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn param_count(&self) -> usize {
        self.values.len()
    }

    /// Element-wise mean of several parameter sets of the same network.
    pub fn mean(sets: &[&ModelParams<T>]) -> Option<ModelParams<T>> {
        let first = sets.first()?;
        let n = T::from_usize(sets.len())?;
        let mut values = vec![T::zero(); first.values.len()];
        let mut buffers = vec![T::zero(); first.buffers.len()];
        for set in sets {
            assert_eq!(set.values.len(), values.len());
            for (acc, v) in values.iter_mut().zip(&set.values) {
                *acc += *v;
            }
            for (acc, v) in buffers.iter_mut().zip(&set.buffers) {
                *acc += *v;
            }
        }
        values.iter_mut().for_each(|v| *v = *v / n);
        buffers.iter_mut().for_each(|v| *v = *v / n);
        Some(ModelParams { values, buffers })
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let conv = |v: &T| U::from_f64(v.to_f64().unwrap_or(0.0)).unwrap_or_else(U::zero);
        ModelParams {
            values: self.values.iter().map(conv).collect(),
            buffers: self.buffers.iter().map(conv).collect(),
        }
    }
}

/// Location of one named tensor inside the flat parameter or buffer vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    /// Buffers are stored after the trainable values in serialized form.
    pub buffer: bool,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Shape {
    Spatial(usize, usize, usize),
    Flat(usize),
}

impl Shape {
    fn len(self) -> usize {
        match self {
            Shape::Spatial(c, h, w) => c * h * w,
            Shape::Flat(n) => n,
        }
    }
}

#[derive(Clone, Debug)]
enum Node {
    Conv {
        cin: usize,
        cout: usize,
        k: usize,
        h: usize,
        w: usize,
        weight: usize,
        bias: usize,
    },
    BatchNorm {
        c: usize,
        gamma: usize,
        beta: usize,
        buf: usize,
    },
    Relu,
    AvgPool2,
    MaxPool2,
    Adaptive {
        size: usize,
    },
    Flatten,
    Dense {
        nin: usize,
        nout: usize,
        weight: usize,
        bias: usize,
    },
    Dropout {
        rate: f64,
    },
    Residual {
        body: Vec<Node>,
    },
    SqueezeExcite {
        c: usize,
        hidden: usize,
        w1: usize,
        b1: usize,
        w2: usize,
        b2: usize,
    },
}

enum Cache<T> {
    Conv { cols: Vec<T>, batch: usize },
    BatchNorm { xhat: Vec<T>, inv_std: Vec<T>, batch: usize, hw: usize, train: bool },
    Relu { mask: Vec<bool> },
    AvgPool2 { in_shape: [usize; 4] },
    MaxPool2 { in_shape: [usize; 4], argmax: Vec<u32> },
    Adaptive { in_shape: [usize; 4] },
    Flatten,
    Dense { input: Vec<T>, batch: usize },
    Dropout { mask: Option<Vec<T>> },
    Residual { body: Vec<Cache<T>> },
    SqueezeExcite { x: Vec<T>, pooled: Vec<T>, hidden: Vec<T>, gate: Vec<T>, in_shape: [usize; 4] },
}

/// Output of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    pub logits: Tensor<T>,
    pub features: Tensor<T>,
}

/// A compiled model: its `ModelSpec` plus parameter layout and shape information.
#[derive(Clone, Debug)]
pub struct Network {
    spec: ModelSpec,
    nodes: Vec<Node>,
    param_count: usize,
    buffer_count: usize,
    feature_dim: usize,
    manifest: Vec<ParamEntry>,
    /// Largest single activation, in values per batch item.
    peak_activation: usize,
    /// Bias-free initialisation hints: (offset, len, fan_in).
    init_plan: Vec<InitSlot>,
}

#[derive(Clone, Debug)]
enum InitSlot {
    He { offset: usize, len: usize, fan_in: usize },
    Const { offset: usize, len: usize, value: f64 },
}

struct Builder {
    params: usize,
    buffers: usize,
    manifest: Vec<ParamEntry>,
    init: Vec<InitSlot>,
    peak: usize,
}

impl Builder {
    fn param(&mut self, name: String, shape: Vec<usize>) -> usize {
        let offset = self.params;
        let len: usize = shape.iter().product();
        self.manifest.push(ParamEntry {
            name,
            shape,
            offset,
            buffer: false,
        });
        self.params += len;
        offset
    }

    fn buffer(&mut self, name: String, len: usize) -> usize {
        let offset = self.buffers;
        self.manifest.push(ParamEntry {
            name,
            shape: vec![len],
            offset,
            buffer: true,
        });
        self.buffers += len;
        offset
    }

    fn compile(&mut self, prefix: &str, layers: &[LayerSpec], mut shape: Shape) -> Result<(Vec<Node>, Shape, Vec<Shape>), NnError> {
        let mut nodes = Vec::with_capacity(layers.len());
        let mut outputs = Vec::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            let name = format!("{prefix}{i}.{}", layer.kind());
            let bad = |why: &str| NnError::InvalidSpec(format!("layer {name}: {why} (input {shape:?})"));
            let (node, next) = match (layer, shape) {
                (LayerSpec::Conv2d { in_channels, out_channels, kernel }, Shape::Spatial(c, h, w)) => {
                    if *in_channels != c || *kernel % 2 == 0 || *kernel == 0 {
                        return Err(bad("channel or kernel mismatch"));
                    }
                    let fan_in = c * kernel * kernel;
                    let weight = self.param(format!("{name}.weight"), vec![*out_channels, c, *kernel, *kernel]);
                    self.init.push(InitSlot::He { offset: weight, len: out_channels * fan_in, fan_in });
                    let bias = self.param(format!("{name}.bias"), vec![*out_channels]);
                    (
                        Node::Conv { cin: c, cout: *out_channels, k: *kernel, h, w, weight, bias },
                        Shape::Spatial(*out_channels, h, w),
                    )
                }
                (LayerSpec::BatchNorm { channels }, Shape::Spatial(c, _, _)) => {
                    if *channels != c {
                        return Err(bad("channel mismatch"));
                    }
                    let gamma = self.param(format!("{name}.gamma"), vec![c]);
                    self.init.push(InitSlot::Const { offset: gamma, len: c, value: 1.0 });
                    let beta = self.param(format!("{name}.beta"), vec![c]);
                    let buf = self.buffer(format!("{name}.running"), 2 * c + 1);
                    (Node::BatchNorm { c, gamma, beta, buf }, shape)
                }
                (LayerSpec::Relu, _) => (Node::Relu, shape),
                (LayerSpec::AvgPool2 | LayerSpec::MaxPool2, Shape::Spatial(c, h, w)) => {
                    if h < 2 || w < 2 {
                        return Err(bad("input too small to pool"));
                    }
                    let node = if matches!(layer, LayerSpec::AvgPool2) { Node::AvgPool2 } else { Node::MaxPool2 };
                    (node, Shape::Spatial(c, h / 2, w / 2))
                }
                (LayerSpec::AdaptiveAvgPool { size }, Shape::Spatial(c, h, w)) => {
                    if *size == 0 || *size > h || *size > w {
                        return Err(bad("grid larger than input"));
                    }
                    (Node::Adaptive { size: *size }, Shape::Spatial(c, *size, *size))
                }
                (LayerSpec::Flatten, s) => (Node::Flatten, Shape::Flat(s.len())),
                (LayerSpec::Dense { inputs, outputs }, Shape::Flat(n)) => {
                    if *inputs != n {
                        return Err(bad("input width mismatch"));
                    }
                    let weight = self.param(format!("{name}.weight"), vec![n, *outputs]);
                    self.init.push(InitSlot::He { offset: weight, len: n * outputs, fan_in: n });
                    let bias = self.param(format!("{name}.bias"), vec![*outputs]);
                    (Node::Dense { nin: n, nout: *outputs, weight, bias }, Shape::Flat(*outputs))
                }
                (LayerSpec::Dropout { rate }, _) => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(bad("dropout rate outside [0, 1)"));
                    }
                    (Node::Dropout { rate: *rate }, shape)
                }
                (LayerSpec::Residual { body }, _) => {
                    let (body_nodes, out, _) = self.compile(&format!("{name}."), body, shape)?;
                    if out != shape {
                        return Err(bad("residual body changes the shape"));
                    }
                    (Node::Residual { body: body_nodes }, shape)
                }
                (LayerSpec::SqueezeExcite { channels, hidden }, Shape::Spatial(c, _, _)) => {
                    if *channels != c || *hidden == 0 {
                        return Err(bad("channel mismatch"));
                    }
                    let w1 = self.param(format!("{name}.squeeze.weight"), vec![c, *hidden]);
                    self.init.push(InitSlot::He { offset: w1, len: c * hidden, fan_in: c });
                    let b1 = self.param(format!("{name}.squeeze.bias"), vec![*hidden]);
                    let w2 = self.param(format!("{name}.excite.weight"), vec![*hidden, c]);
                    self.init.push(InitSlot::He { offset: w2, len: c * hidden, fan_in: *hidden });
                    let b2 = self.param(format!("{name}.excite.bias"), vec![c]);
                    (Node::SqueezeExcite { c, hidden: *hidden, w1, b1, w2, b2 }, shape)
                }
                _ => return Err(bad("layer does not accept this input")),
            };
            self.peak = self.peak.max(next.len());
            nodes.push(node);
            outputs.push(next);
            shape = next;
        }
        Ok((nodes, shape, outputs))
    }
}

impl Network {
    pub fn new(spec: ModelSpec) -> Result<Self, NnError> {
        let [c, h, w] = spec.input_shape;
        let mut b = Builder { params: 0, buffers: 0, manifest: Vec::new(), init: Vec::new(), peak: c * h * w };
        let (nodes, out, outputs) = b.compile("", &spec.layers, Shape::Spatial(c, h, w))?;
        if out != Shape::Flat(spec.num_classes) {
            return Err(NnError::InvalidSpec(format!(
                "network output {out:?} is not {} logits",
                spec.num_classes
            )));
        }
        let feature_dim = match outputs.get(spec.feature_layer) {
            Some(Shape::Flat(n)) => *n,
            other => {
                return Err(NnError::InvalidSpec(format!(
                    "feature layer {} must produce a flat vector, got {other:?}",
                    spec.feature_layer
                )))
            }
        };
        Ok(Self {
            spec,
            nodes,
            param_count: b.params,
            buffer_count: b.buffers,
            feature_dim,
            manifest: b.manifest,
            peak_activation: b.peak,
            init_plan: b.init,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Exact number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn buffer_count(&self) -> usize {
        self.buffer_count
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn manifest(&self) -> &[ParamEntry] {
        &self.manifest
    }

    pub fn input_len(&self) -> usize {
        self.spec.input_shape.iter().product()
    }

    /// Largest activation for one batch item, in scalar values.
    pub fn peak_activation_len(&self) -> usize {
        self.peak_activation
    }

    /// He-normal weights, zero biases, unit batch-norm scales.
    pub fn init_params<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> ModelParams<T> {
        let mut values = vec![T::zero(); self.param_count];
        for slot in &self.init_plan {
            match *slot {
                InitSlot::He { offset, len, fan_in } => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    for v in &mut values[offset..offset + len] {
                        let z: f64 = rng.sample(StandardNormal);
                        *v = T::lit(z * std);
                    }
                }
                InitSlot::Const { offset, len, value } => {
                    values[offset..offset + len].iter_mut().for_each(|v| *v = T::lit(value));
                }
            }
        }
        ModelParams { values, buffers: vec![T::zero(); self.buffer_count] }
    }

    pub fn zero_params<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams {
            values: vec![T::zero(); self.param_count],
            buffers: vec![T::zero(); self.buffer_count],
        }
    }

    fn check_input<T: Scalar>(&self, params: &ModelParams<T>, input: &Tensor<T>) -> Result<(), NnError> {
        if params.values.len() != self.param_count || params.buffers.len() != self.buffer_count {
            return Err(NnError::ShapeMismatch {
                expected: format!("{} params / {} buffers", self.param_count, self.buffer_count),
                actual: format!("{} params / {} buffers", params.values.len(), params.buffers.len()),
            });
        }
        let [c, h, w] = self.spec.input_shape;
        let ok = match input.shape() {
            [_, ic, ih, iw] => [*ic, *ih, *iw] == [c, h, w],
            [_, n] => *n == c * h * w,
            _ => false,
        };
        if !ok || input.batch() == 0 {
            return Err(NnError::ShapeMismatch {
                expected: format!("[B>0, {c}, {h}, {w}]"),
                actual: format!("{:?}", input.shape()),
            });
        }
        Ok(())
    }

    /// Forward pass without gradient bookkeeping or buffer updates.
    pub fn forward<T: Scalar>(
        &self,
        params: &ModelParams<T>,
        input: &Tensor<T>,
        mut mode: Mode<'_>,
    ) -> Result<ForwardOutput<T>, NnError> {
        self.check_input(params, input)?;
        let (logits, features, _) = self.run(params, None, input, &mut mode, false);
        Ok(ForwardOutput { logits, features })
    }

    /// Logits and features in eval mode, processed in chunks of `chunk` items.
    pub fn infer<T: Scalar>(
        &self,
        params: &ModelParams<T>,
        input: &Tensor<T>,
        chunk: usize,
    ) -> Result<ForwardOutput<T>, NnError> {
        self.check_input(params, input)?;
        let n = input.batch();
        let item = input.item_len();
        let mut logits = Vec::with_capacity(n * self.spec.num_classes);
        let mut features = Vec::with_capacity(n * self.feature_dim);
        let [c, h, w] = self.spec.input_shape;
        for start in (0..n).step_by(chunk.max(1)) {
            let end = (start + chunk.max(1)).min(n);
            let part = Tensor::new(vec![end - start, c, h, w], input.data()[start * item..end * item].to_vec())?;
            let (l, f, _) = self.run(params, None, &part, &mut Mode::Eval, false);
            logits.extend_from_slice(l.data());
            features.extend_from_slice(f.data());
        }
        Ok(ForwardOutput {
            logits: Tensor::new(vec![n, self.spec.num_classes], logits)?,
            features: Tensor::new(vec![n, self.feature_dim], features)?,
        })
    }

    /// Loss of the FedProx objective and its exact gradient with respect to
    /// the trainable values. In train mode, batch-norm running statistics are
    /// written to `buffers_out` when given.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_and_gradient<T: Scalar>(
        &self,
        params: &ModelParams<T>,
        buffers_out: Option<&mut [T]>,
        input: &Tensor<T>,
        labels: &[usize],
        prev_params: Option<&[T]>,
        mu: f64,
        l2: f64,
        mut mode: Mode<'_>,
    ) -> Result<(T, Vec<T>, Tensor<T>), NnError> {
        self.check_input(params, input)?;
        if labels.len() != input.batch() {
            return Err(NnError::ShapeMismatch {
                expected: format!("{} labels", input.batch()),
                actual: format!("{} labels", labels.len()),
            });
        }
        if let Some(prev) = prev_params {
            if prev.len() != self.param_count {
                return Err(NnError::ShapeMismatch {
                    expected: format!("{} previous params", self.param_count),
                    actual: format!("{}", prev.len()),
                });
            }
        }
        let (logits, _, caches) = self.run(params, buffers_out, input, &mut mode, true);
        let (ce, dlogits) = softmax_cross_entropy(&logits, labels)?;
        let mut grad = vec![T::zero(); self.param_count];
        let mut delta = dlogits.into_data();
        backward_nodes(&self.nodes, &params.values, &caches, &mut delta, &mut grad, false);
        let penalty = fedprox_penalty(&params.values, prev_params, mu, l2, Some(&mut grad));
        Ok((ce + penalty, grad, logits))
    }

    fn run<T: Scalar>(
        &self,
        params: &ModelParams<T>,
        mut buffers_out: Option<&mut [T]>,
        input: &Tensor<T>,
        mode: &mut Mode<'_>,
        keep: bool,
    ) -> (Tensor<T>, Tensor<T>, Vec<Cache<T>>) {
        let [c, h, w] = self.spec.input_shape;
        let mut x = input.clone().reshaped(vec![input.batch(), c, h, w]);
        let mut caches = Vec::with_capacity(if keep { self.nodes.len() } else { 0 });
        let mut features = None;
        for (i, node) in self.nodes.iter().enumerate() {
            let (y, cache) = forward_node(node, params, buffers_out.as_deref_mut(), x, mode, keep);
            if keep {
                caches.push(cache.expect("cache kept"));
            }
            if i == self.spec.feature_layer {
                features = Some(y.clone());
            }
            x = y;
        }
        (x, features.expect("feature layer inside network"), caches)
    }
}

fn forward_node<T: Scalar>(
    node: &Node,
    params: &ModelParams<T>,
    buffers_out: Option<&mut [T]>,
    x: Tensor<T>,
    mode: &mut Mode<'_>,
    keep: bool,
) -> (Tensor<T>, Option<Cache<T>>) {
    let p = &params.values;
    match node {
        Node::Conv { cin, cout, k, h, w, weight, bias } => {
            let (b, hw, kk) = (x.batch(), h * w, cin * k * k);
            let mut out = vec![T::zero(); b * cout * hw];
            let mut cols_all = if keep { vec![T::zero(); b * kk * hw] } else { Vec::new() };
            let mut cols = vec![T::zero(); kk * hw];
            let wmat = Mat::new(&p[*weight..*weight + cout * kk], *cout, kk);
            for item in 0..b {
                let src = &x.data()[item * cin * hw..(item + 1) * cin * hw];
                im2col(src, *cin, *h, *w, *k, &mut cols);
                let dst = &mut out[item * cout * hw..(item + 1) * cout * hw];
                for (o, row) in dst.chunks_mut(hw).enumerate() {
                    row.iter_mut().for_each(|v| *v = p[bias + o]);
                }
                matmul(wmat, Mat::new(&cols, kk, hw), dst, true);
                if keep {
                    cols_all[item * kk * hw..(item + 1) * kk * hw].copy_from_slice(&cols);
                }
            }
            let y = Tensor::new(vec![b, *cout, *h, *w], out).expect("conv shape");
            (y, keep.then_some(Cache::Conv { cols: cols_all, batch: b }))
        }
        Node::BatchNorm { c, gamma, beta, buf } => {
            let shape = x.shape().to_vec();
            let (b, hw) = (shape[0], shape[2] * shape[3]);
            let n = T::from_usize(b * hw).unwrap();
            let eps = T::lit(BN_EPS);
            let mut mean = vec![T::zero(); *c];
            let mut var = vec![T::zero(); *c];
            let data = x.data();
            if mode.is_train() {
                for ch in 0..*c {
                    let mut s = T::zero();
                    for item in 0..b {
                        s += data[(item * c + ch) * hw..(item * c + ch + 1) * hw].iter().copied().sum::<T>();
                    }
                    mean[ch] = s / n;
                    let mut v = T::zero();
                    for item in 0..b {
                        for &val in &data[(item * c + ch) * hw..(item * c + ch + 1) * hw] {
                            v += (val - mean[ch]) * (val - mean[ch]);
                        }
                    }
                    var[ch] = v / n;
                }
                if let Some(bufs) = buffers_out {
                    let m = T::lit(BN_MOMENTUM);
                    let one_m = T::one() - m;
                    let slot = &mut bufs[*buf..*buf + 2 * c + 1];
                    for ch in 0..*c {
                        slot[ch] = m * slot[ch] + one_m * mean[ch];
                        slot[c + ch] = m * slot[c + ch] + one_m * var[ch];
                    }
                    slot[2 * c] = m * slot[2 * c] + one_m;
                }
            } else {
                let slot = &params.buffers[*buf..*buf + 2 * c + 1];
                let weight = slot[2 * c];
                for ch in 0..*c {
                    if weight > T::zero() {
                        mean[ch] = slot[ch] / weight;
                        var[ch] = slot[c + ch] / weight;
                    } else {
                        var[ch] = T::one();
                    }
                }
            }
            let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
            let mut xhat = vec![T::zero(); data.len()];
            let mut out = vec![T::zero(); data.len()];
            for item in 0..b {
                for ch in 0..*c {
                    let range = (item * c + ch) * hw..(item * c + ch + 1) * hw;
                    let (g, be) = (p[gamma + ch], p[beta + ch]);
                    for idx in range {
                        let xh = (data[idx] - mean[ch]) * inv_std[ch];
                        xhat[idx] = xh;
                        out[idx] = g * xh + be;
                    }
                }
            }
            let y = Tensor::new(shape, out).expect("bn shape");
            (y, keep.then_some(Cache::BatchNorm { xhat, inv_std, batch: b, hw, train: mode.is_train() }))
        }
        Node::Relu => {
            let mut x = x;
            let mask: Vec<bool> = x.data().iter().map(|v| *v > T::zero()).collect();
            for (v, m) in x.data_mut().iter_mut().zip(&mask) {
                if !m {
                    *v = T::zero();
                }
            }
            (x, keep.then_some(Cache::Relu { mask }))
        }
        Node::AvgPool2 => {
            let s = to4(x.shape());
            let (oh, ow) = (s[2] / 2, s[3] / 2);
            let quarter = T::lit(0.25);
            let mut out = vec![T::zero(); s[0] * s[1] * oh * ow];
            let d = x.data();
            for plane in 0..s[0] * s[1] {
                let src = &d[plane * s[2] * s[3]..];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let (y0, x0) = (2 * oy, 2 * ox);
                        let v = src[y0 * s[3] + x0] + src[y0 * s[3] + x0 + 1] + src[(y0 + 1) * s[3] + x0] + src[(y0 + 1) * s[3] + x0 + 1];
                        out[plane * oh * ow + oy * ow + ox] = v * quarter;
                    }
                }
            }
            let y = Tensor::new(vec![s[0], s[1], oh, ow], out).expect("pool shape");
            (y, keep.then_some(Cache::AvgPool2 { in_shape: s }))
        }
        Node::MaxPool2 => {
            let s = to4(x.shape());
            let (oh, ow) = (s[2] / 2, s[3] / 2);
            let mut out = vec![T::zero(); s[0] * s[1] * oh * ow];
            let mut argmax = vec![0u32; out.len()];
            let d = x.data();
            for plane in 0..s[0] * s[1] {
                let base = plane * s[2] * s[3];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = base + 2 * oy * s[3] + 2 * ox;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = base + (2 * oy + dy) * s[3] + 2 * ox + dx;
                            if d[idx] > d[best] {
                                best = idx;
                            }
                        }
                        let o = plane * oh * ow + oy * ow + ox;
                        out[o] = d[best];
                        argmax[o] = best as u32;
                    }
                }
            }
            let y = Tensor::new(vec![s[0], s[1], oh, ow], out).expect("pool shape");
            (y, keep.then_some(Cache::MaxPool2 { in_shape: s, argmax }))
        }
        Node::Adaptive { size } => {
            let s = to4(x.shape());
            let bins_h = adaptive_bins(s[2], *size);
            let bins_w = adaptive_bins(s[3], *size);
            let mut out = vec![T::zero(); s[0] * s[1] * size * size];
            let d = x.data();
            for plane in 0..s[0] * s[1] {
                let src = &d[plane * s[2] * s[3]..(plane + 1) * s[2] * s[3]];
                for (oy, &(y0, y1)) in bins_h.iter().enumerate() {
                    for (ox, &(x0, x1)) in bins_w.iter().enumerate() {
                        let mut acc = T::zero();
                        for yy in y0..y1 {
                            for xx in x0..x1 {
                                acc += src[yy * s[3] + xx];
                            }
                        }
                        out[plane * size * size + oy * size + ox] = acc / T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                    }
                }
            }
            let y = Tensor::new(vec![s[0], s[1], *size, *size], out).expect("adaptive shape");
            (y, keep.then_some(Cache::Adaptive { in_shape: s }))
        }
        Node::Flatten => {
            let b = x.batch();
            let n = x.item_len();
            (x.reshaped(vec![b, n]), keep.then_some(Cache::Flatten))
        }
        Node::Dense { nin, nout, weight, bias } => {
            let b = x.batch();
            let mut out = vec![T::zero(); b * nout];
            for row in out.chunks_mut(*nout) {
                row.copy_from_slice(&p[*bias..bias + nout]);
            }
            matmul(Mat::new(x.data(), b, *nin), Mat::new(&p[*weight..weight + nin * nout], *nin, *nout), &mut out, true);
            let y = Tensor::new(vec![b, *nout], out).expect("dense shape");
            let cache = keep.then(|| Cache::Dense { input: x.into_data(), batch: b });
            (y, cache)
        }
        Node::Dropout { rate } => match mode {
            Mode::Train(rng) if *rate > 0.0 => {
                let scale = T::lit(1.0 / (1.0 - rate));
                let mask: Vec<T> = (0..x.data().len())
                    .map(|_| if rng.random::<f64>() >= *rate { scale } else { T::zero() })
                    .collect();
                let mut x = x;
                for (v, m) in x.data_mut().iter_mut().zip(&mask) {
                    *v *= *m;
                }
                (x, keep.then_some(Cache::Dropout { mask: Some(mask) }))
            }
            _ => (x, keep.then_some(Cache::Dropout { mask: None })),
        },
        Node::Residual { body } => {
            let skip = x.clone();
            let mut y = x;
            let mut body_caches = Vec::new();
            let mut bufs = buffers_out;
            for inner in body {
                let (next, cache) = forward_node(inner, params, bufs.as_deref_mut(), y, mode, keep);
                if let Some(cache) = cache {
                    body_caches.push(cache);
                }
                y = next;
            }
            for (v, s) in y.data_mut().iter_mut().zip(skip.data()) {
                *v += *s;
            }
            (y, keep.then_some(Cache::Residual { body: body_caches }))
        }
        Node::SqueezeExcite { c, hidden, w1, b1, w2, b2 } => {
            let s = to4(x.shape());
            let (b, hw) = (s[0], s[2] * s[3]);
            let inv_hw = T::one() / T::from_usize(hw).unwrap();
            let d = x.data();
            let pooled: Vec<T> = (0..b * c)
                .map(|plane| d[plane * hw..(plane + 1) * hw].iter().copied().sum::<T>() * inv_hw)
                .collect();
            let mut hid = vec![T::zero(); b * hidden];
            for row in hid.chunks_mut(*hidden) {
                row.copy_from_slice(&p[*b1..b1 + hidden]);
            }
            matmul(Mat::new(&pooled, b, *c), Mat::new(&p[*w1..w1 + c * hidden], *c, *hidden), &mut hid, true);
            hid.iter_mut().for_each(|v| {
                if *v < T::zero() {
                    *v = T::zero()
                }
            });
            let mut gate = vec![T::zero(); b * c];
            for row in gate.chunks_mut(*c) {
                row.copy_from_slice(&p[*b2..b2 + c]);
            }
            matmul(Mat::new(&hid, b, *hidden), Mat::new(&p[*w2..w2 + hidden * c], *hidden, *c), &mut gate, true);
            gate.iter_mut().for_each(|v| *v = T::one() / (T::one() + (-*v).exp()));
            let mut out = d.to_vec();
            for plane in 0..b * c {
                let g = gate[plane];
                out[plane * hw..(plane + 1) * hw].iter_mut().for_each(|v| *v *= g);
            }
            let y = Tensor::new(s.to_vec(), out).expect("se shape");
            let cache = keep.then(|| Cache::SqueezeExcite { x: x.into_data(), pooled, hidden: hid, gate, in_shape: s });
            (y, cache)
        }
    }
}

/// Propagates `delta` (gradient w.r.t. the output of `nodes`) backwards,
/// accumulating parameter gradients into `grad`. On return `delta` holds the
/// gradient w.r.t. the input unless `skip_input_grad` is set.
fn backward_nodes<T: Scalar>(
    nodes: &[Node],
    p: &[T],
    caches: &[Cache<T>],
    delta: &mut Vec<T>,
    grad: &mut [T],
    skip_input_grad: bool,
) {
    for (i, (node, cache)) in nodes.iter().zip(caches).enumerate().rev() {
        let need_input = !(skip_input_grad && i == 0);
        backward_node(node, p, cache, delta, grad, need_input);
    }
}

fn backward_node<T: Scalar>(node: &Node, p: &[T], cache: &Cache<T>, delta: &mut Vec<T>, grad: &mut [T], need_input: bool) {
    match (node, cache) {
        (Node::Conv { cin, cout, k, h, w, weight, bias }, Cache::Conv { cols, batch }) => {
            let (hw, kk) = (h * w, cin * k * k);
            let mut dx = if need_input { vec![T::zero(); batch * cin * hw] } else { Vec::new() };
            let mut dcols = vec![T::zero(); kk * hw];
            let wmat = Mat::new(&p[*weight..*weight + cout * kk], *cout, kk);
            for item in 0..*batch {
                let dy = &delta[item * cout * hw..(item + 1) * cout * hw];
                let col = &cols[item * kk * hw..(item + 1) * kk * hw];
                matmul(Mat::new(dy, *cout, hw), Mat::new(col, kk, hw).t(), &mut grad[*weight..*weight + cout * kk], true);
                for o in 0..*cout {
                    grad[bias + o] += dy[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
                }
                if need_input {
                    matmul(wmat.t(), Mat::new(dy, *cout, hw), &mut dcols, false);
                    col2im(&dcols, *cin, *h, *w, *k, &mut dx[item * cin * hw..(item + 1) * cin * hw]);
                }
            }
            *delta = dx;
        }
        (Node::BatchNorm { c, gamma, beta, .. }, Cache::BatchNorm { xhat, inv_std, batch, hw, train }) => {
            let (b, hw) = (*batch, *hw);
            let n = T::from_usize(b * hw).unwrap();
            let mut sum_dy = vec![T::zero(); *c];
            let mut sum_dy_xhat = vec![T::zero(); *c];
            for item in 0..b {
                for ch in 0..*c {
                    let r = (item * c + ch) * hw..(item * c + ch + 1) * hw;
                    for idx in r {
                        sum_dy[ch] += delta[idx];
                        sum_dy_xhat[ch] += delta[idx] * xhat[idx];
                    }
                }
            }
            for ch in 0..*c {
                grad[gamma + ch] += sum_dy_xhat[ch];
                grad[beta + ch] += sum_dy[ch];
            }
            if need_input {
                for item in 0..b {
                    for ch in 0..*c {
                        let k = p[gamma + ch] * inv_std[ch];
                        let r = (item * c + ch) * hw..(item * c + ch + 1) * hw;
                        for idx in r {
                            delta[idx] = if *train {
                                k / n * (n * delta[idx] - sum_dy[ch] - xhat[idx] * sum_dy_xhat[ch])
                            } else {
                                k * delta[idx]
                            };
                        }
                    }
                }
            }
        }
        (Node::Relu, Cache::Relu { mask }) => {
            for (d, m) in delta.iter_mut().zip(mask) {
                if !m {
                    *d = T::zero();
                }
            }
        }
        (Node::AvgPool2, Cache::AvgPool2 { in_shape: s }) => {
            let (oh, ow) = (s[2] / 2, s[3] / 2);
            let quarter = T::lit(0.25);
            let mut dx = vec![T::zero(); s.iter().product()];
            for plane in 0..s[0] * s[1] {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = delta[plane * oh * ow + oy * ow + ox] * quarter;
                        let base = plane * s[2] * s[3];
                        for (dy, dxx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            dx[base + (2 * oy + dy) * s[3] + 2 * ox + dxx] += g;
                        }
                    }
                }
            }
            *delta = dx;
        }
        (Node::MaxPool2, Cache::MaxPool2 { in_shape: s, argmax }) => {
            let mut dx = vec![T::zero(); s.iter().product()];
            for (g, &src) in delta.iter().zip(argmax) {
                dx[src as usize] += *g;
            }
            *delta = dx;
        }
        (Node::Adaptive { size }, Cache::Adaptive { in_shape: s }) => {
            let bins_h = adaptive_bins(s[2], *size);
            let bins_w = adaptive_bins(s[3], *size);
            let mut dx = vec![T::zero(); s.iter().product()];
            for plane in 0..s[0] * s[1] {
                let base = plane * s[2] * s[3];
                for (oy, &(y0, y1)) in bins_h.iter().enumerate() {
                    for (ox, &(x0, x1)) in bins_w.iter().enumerate() {
                        let g = delta[plane * size * size + oy * size + ox] / T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                        for yy in y0..y1 {
                            for xx in x0..x1 {
                                dx[base + yy * s[3] + xx] += g;
                            }
                        }
                    }
                }
            }
            *delta = dx;
        }
        (Node::Flatten, Cache::Flatten) => {}
        (Node::Dense { nin, nout, weight, bias }, Cache::Dense { input, batch }) => {
            matmul(Mat::new(input, *batch, *nin).t(), Mat::new(delta, *batch, *nout), &mut grad[*weight..weight + nin * nout], true);
            for row in delta.chunks(*nout) {
                for (g, d) in grad[*bias..bias + nout].iter_mut().zip(row) {
                    *g += *d;
                }
            }
            if need_input {
                let mut dx = vec![T::zero(); batch * nin];
                matmul(Mat::new(delta, *batch, *nout), Mat::new(&p[*weight..weight + nin * nout], *nin, *nout).t(), &mut dx, false);
                *delta = dx;
            }
        }
        (Node::Dropout { .. }, Cache::Dropout { mask }) => {
            if let Some(mask) = mask {
                for (d, m) in delta.iter_mut().zip(mask) {
                    *d *= *m;
                }
            }
        }
        (Node::Residual { body }, Cache::Residual { body: caches }) => {
            let skip = delta.clone();
            backward_nodes(body, p, caches, delta, grad, false);
            for (d, s) in delta.iter_mut().zip(&skip) {
                *d += *s;
            }
        }
        (Node::SqueezeExcite { c, hidden, w1, b1, w2, b2 }, Cache::SqueezeExcite { x, pooled, hidden: hid, gate, in_shape: s }) => {
            let (b, hw) = (s[0], s[2] * s[3]);
            let mut dgate = vec![T::zero(); b * c];
            for plane in 0..b * c {
                let r = plane * hw..(plane + 1) * hw;
                dgate[plane] = delta[r.clone()].iter().zip(&x[r]).map(|(d, v)| *d * *v).sum::<T>();
            }
            // through the sigmoid
            for (dg, g) in dgate.iter_mut().zip(gate) {
                *dg *= *g * (T::one() - *g);
            }
            matmul(Mat::new(hid, b, *hidden).t(), Mat::new(&dgate, b, *c), &mut grad[*w2..w2 + hidden * c], true);
            for row in dgate.chunks(*c) {
                for (g, d) in grad[*b2..b2 + c].iter_mut().zip(row) {
                    *g += *d;
                }
            }
            let mut dhid = vec![T::zero(); b * hidden];
            matmul(Mat::new(&dgate, b, *c), Mat::new(&p[*w2..w2 + hidden * c], *hidden, *c).t(), &mut dhid, false);
            for (d, h) in dhid.iter_mut().zip(hid) {
                if *h <= T::zero() {
                    *d = T::zero();
                }
            }
            matmul(Mat::new(pooled, b, *c).t(), Mat::new(&dhid, b, *hidden), &mut grad[*w1..w1 + c * hidden], true);
            for row in dhid.chunks(*hidden) {
                for (g, d) in grad[*b1..b1 + hidden].iter_mut().zip(row) {
                    *g += *d;
                }
            }
            if need_input {
                let mut dpooled = vec![T::zero(); b * c];
                matmul(Mat::new(&dhid, b, *hidden), Mat::new(&p[*w1..w1 + c * hidden], *c, *hidden).t(), &mut dpooled, false);
                let inv_hw = T::one() / T::from_usize(hw).unwrap();
                for plane in 0..b * c {
                    let g = gate[plane];
                    let add = dpooled[plane] * inv_hw;
                    delta[plane * hw..(plane + 1) * hw].iter_mut().for_each(|d| *d = *d * g + add);
                }
            }
        }
        _ => unreachable!("cache does not match node"),
    }
}

fn to4(shape: &[usize]) -> [usize; 4] {
    [shape[0], shape[1], shape[2], shape[3]]
}

fn adaptive_bins(n: usize, size: usize) -> Vec<(usize, usize)> {
    (0..size)
        .map(|i| ((i * n) / size, ((i + 1) * n).div_ceil(size)))
        .collect()
}

fn im2col<T: Scalar>(src: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &src[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ch * k + ky) * k + kx) * hw..((ch * k + ky) * k + kx + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, v) in dst.iter_mut().enumerate() {
                        let sx = x as isize + dx;
                        *v = if sx < 0 || sx >= w as isize { T::zero() } else { src_row[sx as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, dst: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ch * k + ky) * k + kx) * hw..((ch * k + ky) * k + kx + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            dst[ch * hw + sy as usize * w + sx as usize] += row[y * w + x];
                        }
                    }
                }
            }
        }
    }
}
