//! Small convolutional classifiers used both for crafting and evaluation.

use std::fmt;
use std::str::FromStr;

use learnlock_tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bytes::{Reader, Writer};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"LLCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Rows per forward pass when predicting over a whole dataset.
const PREDICT_CHUNK: usize = 250;

/// Fixed input standardization applied before the first layer.
pub const INPUT_CENTER: f32 = 0.5;
pub const INPUT_SCALE: f32 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    MiniCnn,
    MiniResnet,
    MiniVgg,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::MiniCnn, Arch::MiniResnet, Arch::MiniVgg];

    pub fn name(self) -> &'static str {
        match self {
            Arch::MiniCnn => "mini_cnn",
            Arch::MiniResnet => "mini_resnet",
            Arch::MiniVgg => "mini_vgg",
        }
    }

    fn code(self) -> u8 {
        match self {
            Arch::MiniCnn => 0,
            Arch::MiniResnet => 1,
            Arch::MiniVgg => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => Arch::MiniCnn,
            1 => Arch::MiniResnet,
            2 => Arch::MiniVgg,
            _ => return Err(Error::Config(format!("unknown architecture code {c}"))),
        })
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.name() == s.replace('-', "_"))
            .ok_or_else(|| Error::Config(format!("unknown architecture {s:?}; expected mini_cnn, mini_resnet or mini_vgg")))
    }
}

/// One building block of an architecture, in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    /// 3x3 convolution, padding 1, followed by ReLU.
    Conv { in_c: usize, out_c: usize },
    /// `relu(x + conv(relu(conv(x))))` with two 3x3 convolutions.
    Residual { channels: usize },
    MaxPool,
    /// Flatten then affine map to logits.
    Head { features: usize, classes: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub arch: Arch,
    /// Channels of the first convolution; deeper stages use 2x and 4x.
    pub width: usize,
}

impl ClassifierSpec {
    pub fn new(arch: Arch, input_shape: [usize; 3], num_classes: usize) -> Self {
        Self {
            input_shape,
            num_classes,
            arch,
            width: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input_shape;
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if c == 0 || self.width == 0 {
            return Err(Error::Config("channels and width must be positive".into()));
        }
        if h < 8 || w < 8 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Config(format!("image side must be a positive multiple of 8, got {h}x{w}")));
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<Layer> {
        let [c, h, w] = self.input_shape;
        let b = self.width;
        let conv = |in_c, out_c| Layer::Conv { in_c, out_c };
        let mut l = match self.arch {
            Arch::MiniCnn => vec![
                conv(c, b),
                Layer::MaxPool,
                conv(b, 2 * b),
                Layer::MaxPool,
                conv(2 * b, 2 * b),
                conv(2 * b, 4 * b),
                Layer::MaxPool,
            ],
            Arch::MiniResnet => vec![
                conv(c, b),
                Layer::MaxPool,
                Layer::Residual { channels: b },
                conv(b, 2 * b),
                Layer::MaxPool,
                Layer::Residual { channels: 2 * b },
                Layer::MaxPool,
            ],
            Arch::MiniVgg => vec![
                conv(c, b),
                conv(b, b),
                Layer::MaxPool,
                conv(b, 2 * b),
                conv(2 * b, 2 * b),
                Layer::MaxPool,
                conv(2 * b, 4 * b),
                conv(4 * b, 4 * b),
                Layer::MaxPool,
            ],
        };
        let out_c = match self.arch {
            Arch::MiniResnet => 2 * b,
            _ => 4 * b,
        };
        l.push(Layer::Head {
            features: out_c * (h / 8) * (w / 8),
            classes: self.num_classes,
        });
        l
    }

    pub fn has_residual(&self) -> bool {
        self.layers().iter().any(|l| matches!(l, Layer::Residual { .. }))
    }

    /// Shapes of all parameter tensors in binding order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for layer in self.layers() {
            match layer {
                Layer::Conv { in_c, out_c } => {
                    out.push(vec![out_c, in_c, 3, 3]);
                    out.push(vec![out_c]);
                }
                Layer::Residual { channels } => {
                    for _ in 0..2 {
                        out.push(vec![channels, channels, 3, 3]);
                        out.push(vec![channels]);
                    }
                }
                Layer::MaxPool => {}
                Layer::Head { features, classes } => {
                    out.push(vec![features, classes]);
                    out.push(vec![classes]);
                }
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierState {
    pub spec: ClassifierSpec,
    pub params: Vec<Tensor>,
    pub seed: u64,
}

/// Uniform fan-in initialization: He-uniform for convolutions, `1/sqrt(fan_in)`
/// for the head, zero biases.
pub fn init_classifier(spec: &ClassifierSpec, seed: u64) -> Result<ClassifierState> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = spec
        .param_shapes()
        .into_iter()
        .map(|shape| {
            if shape.len() == 1 {
                return Tensor::zeros(&shape);
            }
            let (fan_in, bound) = if shape.len() == 4 {
                let f = shape[1] * shape[2] * shape[3];
                (f, (6.0 / f as f32).sqrt())
            } else {
                (shape[0], 1.0 / (shape[0] as f32).sqrt())
            };
            debug_assert!(fan_in > 0);
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            Tensor::new(shape, data).expect("length matches shape")
        })
        .collect();
    Ok(ClassifierState {
        spec: spec.clone(),
        params,
        seed,
    })
}

impl ClassifierState {
    /// Registers every parameter as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p.clone())).collect()
    }

    /// Registers every parameter as a constant (gradients flow to inputs only).
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.constant(p.clone())).collect()
    }

    pub fn check_batch(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1..] != self.spec.input_shape {
            return Err(Error::Config(format!(
                "batch shape {shape:?} does not match model input {:?}",
                self.spec.input_shape
            )));
        }
        Ok(())
    }
}

/// Records the forward pass on `g` and returns the logits node.
pub fn forward(g: &mut Graph, spec: &ClassifierSpec, params: &[Var], x: Var) -> Result<Var> {
    let mut p = params.iter().copied();
    let mut next = || p.next().ok_or_else(|| Error::Config("too few parameters for architecture".into()));
    let scaled = g.mul_scalar(x, 1.0 / INPUT_SCALE);
    let mut h = g.add_scalar(scaled, -INPUT_CENTER / INPUT_SCALE);
    for layer in spec.layers() {
        h = match layer {
            Layer::Conv { .. } => {
                let (w, b) = (next()?, next()?);
                let c = g.conv2d(h, w, Some(b), 1, 1)?;
                g.relu(c)
            }
            Layer::Residual { .. } => {
                let (w1, b1, w2, b2) = (next()?, next()?, next()?, next()?);
                let c1 = g.conv2d(h, w1, Some(b1), 1, 1)?;
                let a1 = g.relu(c1);
                let c2 = g.conv2d(a1, w2, Some(b2), 1, 1)?;
                let s = g.add(h, c2)?;
                g.relu(s)
            }
            Layer::MaxPool => g.max_pool2d(h, 2)?,
            Layer::Head { .. } => {
                let (w, b) = (next()?, next()?);
                let f = g.flatten(h)?;
                let z = g.matmul(f, w)?;
                g.add_row_bias(z, b)?
            }
        };
    }
    Ok(h)
}

/// Logits `[N, K]` for a batch `[N, C, H, W]`.
pub fn predict(state: &ClassifierState, batch: &Tensor) -> Result<Tensor> {
    state.check_batch(batch.shape())?;
    let n = batch.shape()[0];
    let k = state.spec.num_classes;
    let mut out = Vec::with_capacity(n * k);
    let mut start = 0;
    while start < n {
        let end = (start + PREDICT_CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let mut g = Graph::new();
        let params = state.bind_frozen(&mut g);
        let x = g.constant(batch.select_rows(&idx));
        let logits = forward(&mut g, &state.spec, &params, x)?;
        out.extend_from_slice(g.value(logits).data());
        start = end;
    }
    let logits = Tensor::new(vec![n, k], out)?;
    if !logits.is_finite() {
        return Err(Error::NonFinite("logits"));
    }
    Ok(logits)
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.row_len();
    logits
        .data()
        .chunks(k.max(1))
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn predict_labels(state: &ClassifierState, batch: &Tensor) -> Result<Vec<usize>> {
    Ok(argmax_rows(&predict(state, batch)?))
}

pub fn encode_checkpoint(state: &ClassifierState) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(&CHECKPOINT_MAGIC);
    w.u16(CHECKPOINT_VERSION);
    w.u8(state.spec.arch.code());
    for d in state.spec.input_shape {
        w.u32(d as u32);
    }
    w.u32(state.spec.num_classes as u32);
    w.u32(state.spec.width as u32);
    w.u64(state.seed);
    w.u32(state.params.len() as u32);
    for p in &state.params {
        w.f32s(p.data());
    }
    w.buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ClassifierState> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let arch = Arch::from_code(r.u8()?)?;
    let input_shape = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let spec = ClassifierSpec {
        input_shape,
        num_classes: r.u32()? as usize,
        arch,
        width: r.u32()? as usize,
    };
    spec.validate()?;
    let seed = r.u64()?;
    let count = r.u32()? as usize;
    let shapes = spec.param_shapes();
    if count != shapes.len() {
        return Err(Error::Config(format!(
            "checkpoint has {count} tensors, {} expects {}",
            spec.arch,
            shapes.len()
        )));
    }
    let params = shapes
        .into_iter()
        .map(|s| {
            let n = s.iter().product();
            Ok(Tensor::new(s, r.f32s(n)?)?)
        })
        .collect::<Result<Vec<_>>>()?;
    if !r.is_empty() {
        return Err(Error::Config("trailing bytes after checkpoint".into()));
    }
    Ok(ClassifierState { spec, params, seed })
}
