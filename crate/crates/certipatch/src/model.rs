//! The base classifier: a small CNN over NULL-encoded images, trained with
//! momentum SGD on randomly ablated batches.
//!
//! Everything here is deterministic: weight init, batch order, and the
//! ablation position drawn per batch all come from the configured seed, and
//! every reduction runs in a fixed order, so identical configs produce
//! bit-identical weights.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ablation::{GeometrySpec, PatternKind};
use crate::dataset::{encode_with_mask, EncodedImage, RawDataset};
use crate::error::{Error, Result};
use crate::smoothing::VoteMode;

/// One layer of the base classifier. Convolutions are stride-1, valid
/// padding, followed by ReLU; pooling is non-overlapping max; fully
/// connected layers apply ReLU except the last.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { in_ch: usize, out_ch: usize, kernel: usize },
    MaxPool { size: usize },
    Fc { inputs: usize, outputs: usize },
}

/// Architecture descriptor: an ordered list of layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub layers: Vec<LayerSpec>,
}

/// Default MNIST-scale architecture: two 5x5 convolutions with 2x2 pooling
/// and three fully-connected layers.
pub fn default_arch(in_channels: usize, height: usize, width: usize, num_classes: usize) -> Arch {
    let h = (height - 4) / 2;
    let w = (width - 4) / 2;
    let h2 = (h - 4) / 2;
    let w2 = (w - 4) / 2;
    Arch {
        layers: vec![
            LayerSpec::Conv { in_ch: in_channels, out_ch: 6, kernel: 5 },
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Conv { in_ch: 6, out_ch: 12, kernel: 5 },
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Fc { inputs: 12 * h2 * w2, outputs: 64 },
            LayerSpec::Fc { inputs: 64, outputs: 32 },
            LayerSpec::Fc { inputs: 32, outputs: num_classes },
        ],
    }
}

/// One constant-rate phase of the piecewise learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrPhase {
    pub epochs: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: Vec<LrPhase>,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Ablation pattern family applied during training (one position per batch).
    pub geometry: GeometrySpec,
}

impl TrainConfig {
    /// Desk-scale default: 20 epochs at 0.01 then 10 at 0.001, batch 128,
    /// momentum 0.9, weight decay 5e-4.
    pub fn desk_scale(geometry: GeometrySpec, seed: u64) -> Self {
        TrainConfig {
            schedule: vec![LrPhase { epochs: 20, lr: 0.01 }, LrPhase { epochs: 10, lr: 0.001 }],
            batch_size: 128,
            momentum: 0.9,
            weight_decay: 0.0005,
            seed,
            geometry,
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.schedule.iter().map(|p| p.epochs).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteConfig {
    pub geometry: GeometrySpec,
    pub mode: VoteMode,
}

/// Per-class scores of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector {
    pub logits: Vec<f64>,
    pub softmax: Vec<f64>,
}

impl LogitVector {
    fn from_logits(logits: Vec<f64>) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let softmax = exps.iter().map(|&e| e / sum).collect();
        LogitVector { logits, softmax }
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &l) in self.logits.iter().enumerate() {
            if l > self.logits[best] {
                best = i;
            }
        }
        best
    }
}

/// Activations retained by [`ModelParams::forward_trace`] for later backprop.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    acts: Vec<Vec<f64>>,
    pub output: LogitVector,
}

/// Weight and bias gradients, one entry per parameterized layer.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub tensors: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Gradients {
    fn zeros_like(params: &ModelParams) -> Self {
        Gradients {
            tensors: params
                .tensors
                .iter()
                .map(|t| t.as_ref().map(|(w, b)| (vec![0.0; w.len()], vec![0.0; b.len()])))
                .collect(),
        }
    }

    fn add(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            if let (Some((aw, ab)), Some((bw, bb))) = (a.as_mut(), b.as_ref()) {
                for (x, y) in aw.iter_mut().zip(bw) {
                    *x += y;
                }
                for (x, y) in ab.iter_mut().zip(bb) {
                    *x += y;
                }
            }
        }
    }
}

/// The base classifier: architecture, flat weight arrays, and the training
/// and vote configuration it was built with.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Arch,
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    pub num_classes: usize,
    /// (weights, bias) per layer; `None` for layers without parameters.
    pub tensors: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    pub train: TrainConfig,
    pub vote: VoteConfig,
}

/// (channels, height, width) of each layer boundary, input first.
fn layer_shapes(arch: &Arch, c: usize, h: usize, w: usize) -> Result<Vec<(usize, usize, usize)>> {
    let mut shapes = vec![(c, h, w)];
    for (idx, layer) in arch.layers.iter().enumerate() {
        let (c, h, w) = *shapes.last().unwrap();
        let next = match *layer {
            LayerSpec::Conv { in_ch, out_ch, kernel } => {
                if in_ch != c {
                    return Err(Error::Geometry(format!(
                        "layer {idx}: conv expects {in_ch} channels, input has {c}"
                    )));
                }
                if kernel > h || kernel > w {
                    return Err(Error::Geometry(format!("layer {idx}: kernel exceeds input")));
                }
                (out_ch, h - kernel + 1, w - kernel + 1)
            }
            LayerSpec::MaxPool { size } => {
                if size == 0 || h < size || w < size {
                    return Err(Error::Geometry(format!("layer {idx}: bad pool size")));
                }
                (c, h / size, w / size)
            }
            LayerSpec::Fc { inputs, outputs } => {
                if inputs != c * h * w {
                    return Err(Error::Geometry(format!(
                        "layer {idx}: fc expects {inputs} inputs, got {}",
                        c * h * w
                    )));
                }
                (outputs, 1, 1)
            }
        };
        shapes.push(next);
    }
    Ok(shapes)
}

impl ModelParams {
    /// Seeded initialization: weights uniform in +-sqrt(6/fan_in), biases zero.
    pub fn init(
        arch: Arch,
        input_height: usize,
        input_width: usize,
        input_channels: usize,
        num_classes: usize,
        train: TrainConfig,
        vote: VoteConfig,
    ) -> Result<Self> {
        let shapes = layer_shapes(&arch, input_channels, input_height, input_width)?;
        let (oc, oh, ow) = *shapes.last().unwrap();
        if oc * oh * ow != num_classes {
            return Err(Error::Geometry(format!(
                "architecture outputs {} values for {num_classes} classes",
                oc * oh * ow
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        let tensors = arch
            .layers
            .iter()
            .map(|layer| match *layer {
                LayerSpec::Conv { in_ch, out_ch, kernel } => {
                    let fan_in = in_ch * kernel * kernel;
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let w = (0..out_ch * fan_in)
                        .map(|_| rng.gen_range(-bound..bound))
                        .collect();
                    Some((w, vec![0.0; out_ch]))
                }
                LayerSpec::Fc { inputs, outputs } => {
                    let bound = (6.0 / inputs as f64).sqrt();
                    let w = (0..outputs * inputs)
                        .map(|_| rng.gen_range(-bound..bound))
                        .collect();
                    Some((w, vec![0.0; outputs]))
                }
                LayerSpec::MaxPool { .. } => None,
            })
            .collect();
        Ok(ModelParams {
            arch,
            input_height,
            input_width,
            input_channels,
            num_classes,
            tensors,
            train,
            vote,
        })
    }

    fn check_input(&self, input: &EncodedImage) -> Result<()> {
        if input.height != self.input_height
            || input.width != self.input_width
            || input.channels != self.input_channels
        {
            return Err(Error::Geometry(format!(
                "input {}x{}x{} does not match model {}x{}x{}",
                input.height,
                input.width,
                input.channels,
                self.input_height,
                self.input_width,
                self.input_channels
            )));
        }
        Ok(())
    }

    /// Forward pass. Deterministic: fixed accumulation order throughout.
    pub fn forward(&self, input: &EncodedImage) -> Result<LogitVector> {
        self.check_input(input)?;
        let (acts, logits) = self.run_forward(&input.pixels)?;
        drop(acts);
        Ok(LogitVector::from_logits(logits))
    }

    /// Forward pass capturing the input of every layer, for backprop.
    fn run_forward(&self, input: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let shapes = layer_shapes(&self.arch, self.input_channels, self.input_height, self.input_width)?;
        let mut acts: Vec<Vec<f64>> = vec![input.to_vec()];
        for (idx, layer) in self.arch.layers.iter().enumerate() {
            let x = acts.last().unwrap();
            let (c, h, w) = shapes[idx];
            let last = idx + 1 == self.arch.layers.len();
            let out = match *layer {
                LayerSpec::Conv { in_ch, out_ch, kernel } => {
                    let (weights, bias) = self.tensors[idx].as_ref().unwrap();
                    let (oh, ow) = (h - kernel + 1, w - kernel + 1);
                    let mut out = vec![0.0; out_ch * oh * ow];
                    for o in 0..out_ch {
                        let wbase = o * in_ch * kernel * kernel;
                        for y in 0..oh {
                            for xo in 0..ow {
                                let mut acc = bias[o];
                                for i in 0..in_ch {
                                    let plane = i * h * w;
                                    let wk = wbase + i * kernel * kernel;
                                    for ky in 0..kernel {
                                        let row = plane + (y + ky) * w + xo;
                                        let wrow = wk + ky * kernel;
                                        for kx in 0..kernel {
                                            acc += weights[wrow + kx] * x[row + kx];
                                        }
                                    }
                                }
                                out[(o * oh + y) * ow + xo] = acc.max(0.0);
                            }
                        }
                    }
                    out
                }
                LayerSpec::MaxPool { size } => {
                    let (oh, ow) = (h / size, w / size);
                    let mut out = vec![0.0; c * oh * ow];
                    for ch in 0..c {
                        for y in 0..oh {
                            for xo in 0..ow {
                                let mut best = f64::NEG_INFINITY;
                                for dy in 0..size {
                                    for dx in 0..size {
                                        let v = x[(ch * h + y * size + dy) * w + xo * size + dx];
                                        if v > best {
                                            best = v;
                                        }
                                    }
                                }
                                out[(ch * oh + y) * ow + xo] = best;
                            }
                        }
                    }
                    out
                }
                LayerSpec::Fc { inputs, outputs } => {
                    let (weights, bias) = self.tensors[idx].as_ref().unwrap();
                    let mut out = vec![0.0; outputs];
                    for o in 0..outputs {
                        let mut acc = bias[o];
                        let wrow = o * inputs;
                        for i in 0..inputs {
                            acc += weights[wrow + i] * x[i];
                        }
                        out[o] = if last { acc } else { acc.max(0.0) };
                    }
                    out
                }
            };
            if let Some(bad) = out.iter().find(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite activation {bad} in layer {idx}"
                )));
            }
            acts.push(out);
        }
        let logits = acts.pop().unwrap();
        Ok((acts, logits))
    }

    /// Backprop from a gradient on the raw logits. Returns per-layer weight
    /// gradients plus the gradient with respect to the encoded input.
    fn backward(
        &self,
        acts: &[Vec<f64>],
        logits: &[f64],
        d_logits: &[f64],
    ) -> (Gradients, Vec<f64>) {
        let shapes =
            layer_shapes(&self.arch, self.input_channels, self.input_height, self.input_width)
                .expect("shapes validated at init");
        let mut grads = Gradients::zeros_like(self);
        let mut d_out = d_logits.to_vec();
        for (idx, layer) in self.arch.layers.iter().enumerate().rev() {
            let x = &acts[idx];
            let (c, h, w) = shapes[idx];
            let last = idx + 1 == self.arch.layers.len();
            let out: &[f64] = if last { logits } else { &acts[idx + 1] };
            match *layer {
                LayerSpec::Conv { in_ch, out_ch, kernel } => {
                    let (weights, _) = self.tensors[idx].as_ref().unwrap();
                    let (gw, gb) = grads.tensors[idx].as_mut().unwrap();
                    let (oh, ow) = (h - kernel + 1, w - kernel + 1);
                    let mut d_in = vec![0.0; c * h * w];
                    for o in 0..out_ch {
                        let wbase = o * in_ch * kernel * kernel;
                        for y in 0..oh {
                            for xo in 0..ow {
                                let oidx = (o * oh + y) * ow + xo;
                                // ReLU: dead units pass no gradient
                                if out[oidx] <= 0.0 {
                                    continue;
                                }
                                let g = d_out[oidx];
                                if g == 0.0 {
                                    continue;
                                }
                                gb[o] += g;
                                for i in 0..in_ch {
                                    let plane = i * h * w;
                                    let wk = wbase + i * kernel * kernel;
                                    for ky in 0..kernel {
                                        let row = plane + (y + ky) * w + xo;
                                        let wrow = wk + ky * kernel;
                                        for kx in 0..kernel {
                                            gw[wrow + kx] += g * x[row + kx];
                                            d_in[row + kx] += g * weights[wrow + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    d_out = d_in;
                }
                LayerSpec::MaxPool { size } => {
                    let (oh, ow) = (h / size, w / size);
                    let mut d_in = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for y in 0..oh {
                            for xo in 0..ow {
                                // route to the first maximum, matching forward scan order
                                let mut best = f64::NEG_INFINITY;
                                let mut best_idx = 0;
                                for dy in 0..size {
                                    for dx in 0..size {
                                        let ii = (ch * h + y * size + dy) * w + xo * size + dx;
                                        if x[ii] > best {
                                            best = x[ii];
                                            best_idx = ii;
                                        }
                                    }
                                }
                                d_in[best_idx] += d_out[(ch * oh + y) * ow + xo];
                            }
                        }
                    }
                    d_out = d_in;
                }
                LayerSpec::Fc { inputs, outputs } => {
                    let (weights, _) = self.tensors[idx].as_ref().unwrap();
                    let (gw, gb) = grads.tensors[idx].as_mut().unwrap();
                    let mut d_in = vec![0.0; inputs];
                    for o in 0..outputs {
                        if !last && out[o] <= 0.0 {
                            continue;
                        }
                        let g = d_out[o];
                        if g == 0.0 {
                            continue;
                        }
                        gb[o] += g;
                        let wrow = o * inputs;
                        for i in 0..inputs {
                            gw[wrow + i] += g * x[i];
                            d_in[i] += g * weights[wrow + i];
                        }
                    }
                    d_out = d_in;
                }
            }
        }
        (grads, d_out)
    }

    /// Gradient of an arbitrary scalar objective with respect to the encoded
    /// input pixels, given the objective's gradient on the raw logits.
    pub fn input_gradient(&self, input: &EncodedImage, d_logits: &[f64]) -> Result<Vec<f64>> {
        let trace = self.forward_trace(input)?;
        Ok(self.backward_input(&trace, d_logits))
    }

    /// Forward pass retaining intermediate activations so a backward pass
    /// can be run later without recomputing.
    pub fn forward_trace(&self, input: &EncodedImage) -> Result<ForwardTrace> {
        self.check_input(input)?;
        let (acts, logits) = self.run_forward(&input.pixels)?;
        Ok(ForwardTrace { acts, output: LogitVector::from_logits(logits) })
    }

    /// Backward pass from a retained trace, returning the gradient with
    /// respect to the encoded input pixels.
    pub fn backward_input(&self, trace: &ForwardTrace, d_logits: &[f64]) -> Vec<f64> {
        let (_, d_in) = self.backward(&trace.acts, &trace.output.logits, d_logits);
        d_in
    }

    /// Mean cross-entropy over a batch plus weight gradients.
    pub fn loss_and_grad(
        &self,
        batch: &[EncodedImage],
        labels: &[u8],
    ) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        if batch.len() != labels.len() {
            return Err(Error::Argument("batch and label lengths differ".into()));
        }
        let inv = 1.0 / batch.len() as f64;
        let mut total = Gradients::zeros_like(self);
        let mut loss = 0.0;
        for (input, &label) in batch.iter().zip(labels) {
            self.check_input(input)?;
            if label as usize >= self.num_classes {
                return Err(Error::Argument(format!("label {label} out of range")));
            }
            let (acts, logits) = self.run_forward(&input.pixels)?;
            let lv = LogitVector::from_logits(logits);
            loss -= inv * lv.softmax[label as usize].max(f64::MIN_POSITIVE).ln();
            let d_logits: Vec<f64> = lv
                .softmax
                .iter()
                .enumerate()
                .map(|(c, &p)| inv * (p - if c == label as usize { 1.0 } else { 0.0 }))
                .collect();
            let (g, _) = self.backward(&acts, &lv.logits, &d_logits);
            total.add(&g);
        }
        Ok((loss, total))
    }

    // ---- checkpoint persistence -------------------------------------------

    /// Serialize: one-line text magic, a JSON header, then all weight arrays
    /// as little-endian f32 in declared order.
    pub fn save(&self) -> Vec<u8> {
        #[derive(Serialize)]
        struct Header<'a> {
            arch: &'a Arch,
            input: [usize; 3],
            num_classes: usize,
            train: &'a TrainConfig,
            vote: &'a VoteConfig,
            tensor_lens: Vec<[usize; 2]>,
        }
        let header = Header {
            arch: &self.arch,
            input: [self.input_height, self.input_width, self.input_channels],
            num_classes: self.num_classes,
            train: &self.train,
            vote: &self.vote,
            tensor_lens: self
                .tensors
                .iter()
                .map(|t| t.as_ref().map(|(w, b)| [w.len(), b.len()]).unwrap_or([0, 0]))
                .collect(),
        };
        let mut out = format!(
            "{} {}\n{}\n",
            CKPT_MAGIC,
            CKPT_VERSION,
            serde_json::to_string(&header).expect("header serializes")
        )
        .into_bytes();
        for t in self.tensors.iter().flatten() {
            for v in t.0.iter().chain(t.1.iter()) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn load(bytes: &[u8]) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            arch: Arch,
            input: [usize; 3],
            num_classes: usize,
            train: TrainConfig,
            vote: VoteConfig,
            tensor_lens: Vec<[usize; 2]>,
        }
        let nl1 = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("missing checkpoint magic line".into()))?;
        let magic = std::str::from_utf8(&bytes[..nl1])
            .map_err(|_| Error::Format("checkpoint magic is not UTF-8".into()))?;
        let mut parts = magic.split_whitespace();
        if parts.next() != Some(CKPT_MAGIC) {
            return Err(Error::Format(format!("not a checkpoint file: {magic:?}")));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format("missing checkpoint version".into()))?;
        if version != CKPT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (supported: {CKPT_VERSION})"
            )));
        }
        let rest = &bytes[nl1 + 1..];
        let nl2 = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("missing checkpoint header".into()))?;
        let header: Header = serde_json::from_slice(&rest[..nl2])
            .map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
        let mut body = &rest[nl2 + 1..];
        let mut tensors = Vec::with_capacity(header.arch.layers.len());
        for (layer, lens) in header.arch.layers.iter().zip(&header.tensor_lens) {
            match layer {
                LayerSpec::MaxPool { .. } => tensors.push(None),
                _ => {
                    let need = (lens[0] + lens[1]) * 4;
                    if body.len() < need {
                        return Err(Error::Format(format!(
                            "truncated checkpoint: need {need} more bytes, have {}",
                            body.len()
                        )));
                    }
                    let mut vals = body[..need]
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
                    let w: Vec<f64> = vals.by_ref().take(lens[0]).collect();
                    let b: Vec<f64> = vals.collect();
                    tensors.push(Some((w, b)));
                    body = &body[need..];
                }
            }
        }
        if !body.is_empty() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint payload",
                body.len()
            )));
        }
        let params = ModelParams {
            arch: header.arch,
            input_height: header.input[0],
            input_width: header.input[1],
            input_channels: header.input[2],
            num_classes: header.num_classes,
            tensors,
            train: header.train,
            vote: header.vote,
        };
        layer_shapes(
            &params.arch,
            params.input_channels,
            params.input_height,
            params.input_width,
        )?;
        Ok(params)
    }
}

const CKPT_MAGIC: &str = "CERTIPATCH-CKPT";
const CKPT_VERSION: u32 = 1;

/// Train a base classifier on ablated batches with momentum SGD.
/// One ablation position is drawn per batch and applied to every sample.
pub fn train(
    dataset: &RawDataset,
    arch: Arch,
    train_cfg: TrainConfig,
    vote_cfg: VoteConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<ModelParams> {
    if dataset.is_empty() {
        return Err(Error::Argument("empty training dataset".into()));
    }
    let first = &dataset.images[0];
    let shape = first.shape();
    let geometry = train_cfg.geometry.with_shape(shape)?;
    // Sparse patterns are sampled per batch; every other kind draws uniformly
    // from the enumerated positions.
    let masks: Vec<Vec<bool>> = if geometry.kind == PatternKind::Sparse {
        Vec::new()
    } else {
        geometry
            .enumerate_positions()?
            .iter()
            .map(|p| geometry.retained_mask(p))
            .collect::<Result<_>>()?
    };
    let mut params = ModelParams::init(
        arch,
        first.height,
        first.width,
        2 * first.channels,
        dataset.num_classes,
        train_cfg.clone(),
        vote_cfg,
    )?;
    let mut velocity: Vec<Option<(Vec<f64>, Vec<f64>)>> = params
        .tensors
        .iter()
        .map(|t| t.as_ref().map(|(w, b)| (vec![0.0; w.len()], vec![0.0; b.len()])))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch = 0;
    for phase in &train_cfg.schedule {
        for _ in 0..phase.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            let mut batches = 0;
            for (batch_no, chunk) in order.chunks(train_cfg.batch_size).enumerate() {
                let mask = if masks.is_empty() {
                    geometry.retained_mask(&geometry.sample_sparse(&mut rng)?)?
                } else {
                    masks[rng.gen_range(0..masks.len())].clone()
                };
                let mask = &mask;
                let batch: Vec<EncodedImage> = chunk
                    .iter()
                    .map(|&i| encode_with_mask(&dataset.images[i], mask))
                    .collect();
                let labels: Vec<u8> = chunk.iter().map(|&i| dataset.labels[i]).collect();
                let (loss, grads) = params.loss_and_grad(&batch, &labels)?;
                if !loss.is_finite() {
                    return Err(Error::Training(format!(
                        "loss diverged at epoch {epoch} batch {batch_no}"
                    )));
                }
                epoch_loss += loss;
                batches += 1;
                for ((t, v), g) in params
                    .tensors
                    .iter_mut()
                    .zip(velocity.iter_mut())
                    .zip(grads.tensors.iter())
                {
                    if let (Some((w, b)), Some((vw, vb)), Some((gw, gb))) =
                        (t.as_mut(), v.as_mut(), g.as_ref())
                    {
                        for i in 0..w.len() {
                            vw[i] = train_cfg.momentum * vw[i]
                                - phase.lr * (gw[i] + train_cfg.weight_decay * w[i]);
                            w[i] += vw[i];
                        }
                        for i in 0..b.len() {
                            vb[i] = train_cfg.momentum * vb[i]
                                - phase.lr * (gb[i] + train_cfg.weight_decay * b[i]);
                            b[i] += vb[i];
                        }
                    }
                }
            }
            on_epoch(epoch, epoch_loss / batches.max(1) as f64);
            epoch += 1;
        }
    }
    Ok(params)
}
