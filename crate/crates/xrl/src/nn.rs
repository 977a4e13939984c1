//! Neural layers, losses, and the desk-scale model zoo.
//!
//! Every activation is softplus, so the models are twice differentiable
//! everywhere (with average pooling, the default); this is what keeps the
//! explanation attack's second-derivative path well-posed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::rc::Rc;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Linear {
        out_features: usize,
    },
    AvgPool {
        window: usize,
    },
    MaxPool {
        window: usize,
    },
    Softplus {
        beta: f64,
    },
    Flatten,
    /// out = body(x) + x; body must preserve shape.
    Residual {
        body: Vec<Layer>,
    },
}

/// Architecture descriptor: layer sequence, input shape, class count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// (channels, height, width)
    pub input: (usize, usize, usize),
    pub classes: usize,
    pub layers: Vec<Layer>,
}

#[derive(Clone, Debug, PartialEq)]
enum ShapeState {
    Chw(usize, usize, usize),
    Flat(usize),
}

impl ModelSpec {
    /// The standard ConvNet used throughout: three conv layers (32/64/64, kernel 3,
    /// stride 1, pad 1, average-pool 2 after each) and one linear head.
    pub fn conv_net(input: (usize, usize, usize), classes: usize, beta: f64) -> ModelSpec {
        let mut layers = Vec::new();
        for out in [32usize, 64, 64] {
            layers.push(Layer::Conv2d {
                out_channels: out,
                kernel: 3,
                stride: 1,
                pad: 1,
            });
            layers.push(Layer::Softplus { beta });
            layers.push(Layer::AvgPool { window: 2 });
        }
        layers.push(Layer::Flatten);
        layers.push(Layer::Linear {
            out_features: classes,
        });
        ModelSpec {
            input,
            classes,
            layers,
        }
    }

    /// Four softplus residual blocks; a desk-scale stand-in for ResNet18.
    pub fn small_resnet(input: (usize, usize, usize), classes: usize, beta: f64) -> ModelSpec {
        let block = |c: usize| Layer::Residual {
            body: vec![
                Layer::Conv2d {
                    out_channels: c,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
                Layer::Softplus { beta },
                Layer::Conv2d {
                    out_channels: c,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
            ],
        };
        let mut layers = vec![
            Layer::Conv2d {
                out_channels: 16,
                kernel: 3,
                stride: 1,
                pad: 1,
            },
            Layer::Softplus { beta },
            block(16),
            Layer::Softplus { beta },
            Layer::AvgPool { window: 2 },
            Layer::Conv2d {
                out_channels: 32,
                kernel: 3,
                stride: 1,
                pad: 1,
            },
            Layer::Softplus { beta },
            block(32),
            Layer::Softplus { beta },
            Layer::AvgPool { window: 2 },
            block(32),
            Layer::Softplus { beta },
            block(32),
            Layer::Softplus { beta },
        ];
        layers.push(Layer::Flatten);
        layers.push(Layer::Linear {
            out_features: classes,
        });
        ModelSpec {
            input,
            classes,
            layers,
        }
    }

    /// A single linear head over the flattened input.
    pub fn linear(input: (usize, usize, usize), classes: usize) -> ModelSpec {
        ModelSpec {
            input,
            classes,
            layers: vec![
                Layer::Flatten,
                Layer::Linear {
                    out_features: classes,
                },
            ],
        }
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        hex_of(&h.finalize())
    }

    /// Statically check that consecutive layers compose; returns the final
    /// (pre-head-dependent) shape trace.
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input;
        let mut state = ShapeState::Chw(c, h, w);
        state = shape_through(&self.layers, state, "root")?;
        match state {
            ShapeState::Flat(k) if k == self.classes => Ok(()),
            ShapeState::Flat(k) => Err(Error::BadModelSpec {
                detail: format!("head produces {} features, expected {} classes", k, self.classes),
            }),
            ShapeState::Chw(..) => Err(Error::BadModelSpec {
                detail: "model does not end in a flat class vector".into(),
            }),
        }
    }
}

fn shape_through(layers: &[Layer], mut state: ShapeState, scope: &str) -> Result<ShapeState> {
    for (i, layer) in layers.iter().enumerate() {
        let name = format!("{}[{}] {:?}", scope, i, layer_kind(layer));
        state = match (layer, state.clone()) {
            (
                Layer::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                },
                ShapeState::Chw(_, h, w),
            ) => {
                let hp = h + 2 * pad;
                let wp = w + 2 * pad;
                if hp < *kernel || wp < *kernel {
                    return Err(Error::BadModelSpec {
                        detail: format!("{}: kernel {} exceeds padded input {}x{}", name, kernel, hp, wp),
                    });
                }
                ShapeState::Chw(
                    *out_channels,
                    (hp - kernel) / stride + 1,
                    (wp - kernel) / stride + 1,
                )
            }
            (Layer::Linear { out_features }, ShapeState::Flat(_)) => ShapeState::Flat(*out_features),
            (Layer::AvgPool { window } | Layer::MaxPool { window }, ShapeState::Chw(c, h, w)) => {
                if h / window == 0 || w / window == 0 {
                    return Err(Error::BadModelSpec {
                        detail: format!("{}: window {} exceeds input {}x{}", name, window, h, w),
                    });
                }
                ShapeState::Chw(c, h / window, w / window)
            }
            (Layer::Softplus { beta }, s) => {
                if *beta <= 0.0 {
                    return Err(Error::BadModelSpec {
                        detail: format!("{}: beta must be positive", name),
                    });
                }
                s
            }
            (Layer::Flatten, ShapeState::Chw(c, h, w)) => ShapeState::Flat(c * h * w),
            (Layer::Flatten, ShapeState::Flat(k)) => ShapeState::Flat(k),
            (Layer::Residual { body }, ShapeState::Chw(c, h, w)) => {
                let out = shape_through(body, ShapeState::Chw(c, h, w), &name)?;
                if out != ShapeState::Chw(c, h, w) {
                    return Err(Error::BadModelSpec {
                        detail: format!("{}: residual body changes shape", name),
                    });
                }
                out
            }
            (_, s) => {
                return Err(Error::BadModelSpec {
                    detail: format!("{}: cannot follow a {:?}-shaped value", name, s),
                })
            }
        };
    }
    Ok(state)
}

fn layer_kind(l: &Layer) -> &'static str {
    match l {
        Layer::Conv2d { .. } => "conv2d",
        Layer::Linear { .. } => "linear",
        Layer::AvgPool { .. } => "avg_pool",
        Layer::MaxPool { .. } => "max_pool",
        Layer::Softplus { .. } => "softplus",
        Layer::Flatten => "flatten",
        Layer::Residual { .. } => "residual",
    }
}

fn hex_of(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

/// Named, ordered collection of trainable weight arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    pub seed: u64,
    pub spec_digest: String,
}

impl ParamSet {
    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>, seed: u64, spec_digest: String) -> ParamSet {
        ParamSet {
            entries,
            seed,
            spec_digest,
        }
    }

    /// Content digest over names, shapes, and weight bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.spec_digest.as_bytes());
        for (name, t) in &self.entries {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex_of(&h.finalize())
    }
}

/// Initialize weights from a zero-mean uniform distribution with fan-in
/// scaling; biases zero. Deterministic given the seed.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<ParamSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = spec.input;
    let mut entries = Vec::new();
    init_layers(&spec.layers, ShapeState::Chw(c, h, w), "layer", &mut rng, &mut entries)?;
    Ok(ParamSet {
        entries,
        seed,
        spec_digest: spec.digest(),
    })
}

fn init_layers(
    layers: &[Layer],
    mut state: ShapeState,
    prefix: &str,
    rng: &mut ChaCha8Rng,
    entries: &mut Vec<(String, Tensor)>,
) -> Result<ShapeState> {
    for (i, layer) in layers.iter().enumerate() {
        match (layer, state.clone()) {
            (
                Layer::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                },
                ShapeState::Chw(cin, h, w),
            ) => {
                let fan_in = cin * kernel * kernel;
                let bound = 1.0 / (fan_in as f64).sqrt();
                let n = out_channels * fan_in;
                let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                entries.push((
                    format!("{}{}.weight", prefix, i),
                    Tensor::new(vec![*out_channels, cin, *kernel, *kernel], data)?,
                ));
                entries.push((format!("{}{}.bias", prefix, i), Tensor::zeros(&[*out_channels])));
                let hp = h + 2 * pad;
                let wp = w + 2 * pad;
                state = ShapeState::Chw(
                    *out_channels,
                    (hp - kernel) / stride + 1,
                    (wp - kernel) / stride + 1,
                );
            }
            (Layer::Linear { out_features }, ShapeState::Flat(fin)) => {
                let bound = 1.0 / (fin as f64).sqrt();
                let data: Vec<f64> = (0..fin * out_features)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect();
                entries.push((
                    format!("{}{}.weight", prefix, i),
                    Tensor::new(vec![fin, *out_features], data)?,
                ));
                entries.push((format!("{}{}.bias", prefix, i), Tensor::zeros(&[*out_features])));
                state = ShapeState::Flat(*out_features);
            }
            (Layer::AvgPool { window } | Layer::MaxPool { window }, ShapeState::Chw(c, h, w)) => {
                state = ShapeState::Chw(c, h / window, w / window);
            }
            (Layer::Softplus { .. }, s) => state = s,
            (Layer::Flatten, ShapeState::Chw(c, h, w)) => state = ShapeState::Flat(c * h * w),
            (Layer::Flatten, ShapeState::Flat(k)) => state = ShapeState::Flat(k),
            (Layer::Residual { body }, s @ ShapeState::Chw(..)) => {
                let nested = format!("{}{}.body", prefix, i);
                state = init_layers(body, s, &nested, rng, entries)?;
            }
            _ => unreachable!("validate() rejects incomposable specs"),
        }
    }
    Ok(state)
}

/// A ParamSet lifted into graph leaves, in entry order.
pub struct ParamVars {
    entries: Vec<(String, Var)>,
}

impl ParamVars {
    pub fn new(params: &ParamSet, requires_grad: bool) -> ParamVars {
        ParamVars {
            entries: params
                .entries()
                .iter()
                .map(|(n, t)| (n.clone(), Var::leaf(t.clone(), requires_grad)))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> &Var {
        &self
            .entries
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("missing parameter {}", name))
            .1
    }

    pub fn vars(&self) -> Vec<&Var> {
        self.entries.iter().map(|(_, v)| v).collect()
    }

    pub fn entries(&self) -> &[(String, Var)] {
        &self.entries
    }
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Activations entering the final linear layer.
    pub features: Var,
}

/// Run the model on a batch [N,C,H,W]. With `guided`, activations use the
/// guided-backprop rule (negative upstream gradients zeroed on the backward
/// pass); forward values are identical either way.
pub fn model_forward_full(
    spec: &ModelSpec,
    params: &ParamVars,
    batch: &Var,
    guided: bool,
) -> Result<ForwardOutput> {
    let shape = batch.shape();
    let (c, h, w) = spec.input;
    if shape.len() != 4 || shape[1] != c || shape[2] != h || shape[3] != w {
        return Err(Error::ShapeMismatch {
            op: "model_forward",
            detail: format!("batch {:?}, spec input {:?}", shape, (c, h, w)),
        });
    }
    let mut features = batch.clone();
    let mut x = batch.clone();
    apply_layers(&spec.layers, params, "layer", &mut x, &mut features, guided)?;
    Ok(ForwardOutput {
        logits: x,
        features,
    })
}

fn apply_layers(
    layers: &[Layer],
    params: &ParamVars,
    prefix: &str,
    x: &mut Var,
    features: &mut Var,
    guided: bool,
) -> Result<()> {
    for (i, layer) in layers.iter().enumerate() {
        match layer {
            Layer::Conv2d { stride, pad, .. } => {
                let wname = format!("{}{}.weight", prefix, i);
                let bname = format!("{}{}.bias", prefix, i);
                let y = x.conv2d(params.get(&wname), *stride, *pad)?;
                *x = y.add(&params.get(&bname).broadcast_chan(y.shape())?)?;
            }
            Layer::Linear { .. } => {
                let wname = format!("{}{}.weight", prefix, i);
                let bname = format!("{}{}.bias", prefix, i);
                *features = x.clone();
                let y = x.matmul(params.get(&wname))?;
                let n = y.shape()[0];
                *x = y.add(&params.get(&bname).broadcast_dim0(n)?)?;
            }
            Layer::AvgPool { window } => *x = x.avg_pool(*window)?,
            Layer::MaxPool { window } => *x = x.max_pool(*window)?,
            Layer::Softplus { beta } => {
                *x = if guided {
                    x.guided_softplus(*beta)
                } else {
                    x.softplus(*beta)
                }
            }
            Layer::Flatten => {
                let s = x.shape();
                let n = s[0];
                let rest: usize = s[1..].iter().product();
                *x = x.reshape(&[n, rest])?;
            }
            Layer::Residual { body } => {
                let nested = format!("{}{}.body", prefix, i);
                let mut y = x.clone();
                apply_layers(body, params, &nested, &mut y, features, guided)?;
                *x = y.add(x)?;
            }
        }
    }
    Ok(())
}

/// Logits [N, classes] for a batch; differentiable w.r.t. both batch and
/// parameters.
pub fn model_forward(spec: &ModelSpec, params: &ParamVars, batch: &Var) -> Result<Var> {
    Ok(model_forward_full(spec, params, batch, false)?.logits)
}

/// Convenience: forward a raw tensor batch against raw parameters.
pub fn forward_tensors(spec: &ModelSpec, params: &ParamSet, batch: &Tensor) -> Result<Tensor> {
    let pv = ParamVars::new(params, false);
    let x = Var::constant(batch.clone());
    Ok(model_forward(spec, &pv, &x)?.forward_eval())
}

/// log softmax per row via a detached-max shift.
pub fn log_softmax(logits: &Var) -> Result<Var> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "log_softmax",
            detail: format!("{:?}", s),
        });
    }
    let (n, k) = (s[0], s[1]);
    let src = logits.value().data();
    let maxes: Vec<f64> = (0..n)
        .map(|i| src[i * k..(i + 1) * k].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let m = Var::constant(Tensor::new(vec![n], maxes)?);
    let shifted = logits.sub(&m.broadcast_per_image(s)?)?;
    let lse_shifted = shifted.exp().sum_per_image()?.ln();
    shifted.sub(&lse_shifted.broadcast_per_image(s)?)
}

/// Mean over the batch of -log softmax(logits)[label].
pub fn cross_entropy(logits: &Var, labels: &[usize]) -> Result<Var> {
    let s = logits.shape();
    if s.len() != 2 || labels.len() != s[0] {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            detail: format!("logits {:?}, {} labels", s, labels.len()),
        });
    }
    for &l in labels {
        if l >= s[1] {
            return Err(Error::LabelOutOfRange {
                label: l,
                classes: s[1],
            });
        }
    }
    let lsm = log_softmax(logits)?;
    let idx = Rc::new(labels.to_vec());
    let picked = lsm.select_classes(&idx)?;
    Ok(picked.sum().scalar_mul(-1.0 / s[0] as f64))
}

/// Mean over the batch of KL(softmax(p) || softmax(q)).
pub fn kl_divergence(p_logits: &Var, q_logits: &Var) -> Result<Var> {
    if p_logits.shape() != q_logits.shape() {
        return Err(Error::ShapeMismatch {
            op: "kl_divergence",
            detail: format!("{:?} vs {:?}", p_logits.shape(), q_logits.shape()),
        });
    }
    let n = p_logits.shape()[0];
    let lsm_p = log_softmax(p_logits)?;
    let lsm_q = log_softmax(q_logits)?;
    let p = lsm_p.exp();
    let per_row = p.mul(&lsm_p.sub(&lsm_q)?)?.sum_per_image()?;
    Ok(per_row.sum().scalar_mul(1.0 / n as f64))
}

/// Predicted class per row; ties toward the lowest index.
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    let s = logits.shape();
    let (n, k) = (s[0], s[1]);
    let src = logits.data();
    (0..n)
        .map(|i| {
            let row = &src[i * k..(i + 1) * k];
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

pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let preds = predictions(logits);
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}
