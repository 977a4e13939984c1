//! Saliency-map explanation methods and the explanation loss.
//!
//! A saliency map is the channel-absolute-aggregated, sum-normalized
//! relevance of each pixel for the model's predicted class. The
//! differentiable path retains provenance through the gradient computation
//! itself, which is what the explanation attack and the SEP flattening loss
//! differentiate through.

use std::io::Write;
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{grad, Var};
use crate::error::{Error, Result};
use crate::nn::{model_forward_full, ModelSpec, ParamSet, ParamVars};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExplKind {
    Gradient,
    GradientTimesInput,
    GuidedBackprop,
    IntegratedGradients,
}

impl ExplKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExplKind::Gradient => "gradient",
            ExplKind::GradientTimesInput => "gradient_x_input",
            ExplKind::GuidedBackprop => "guided_backprop",
            ExplKind::IntegratedGradients => "integrated_gradients",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplMethod {
    pub kind: ExplKind,
    /// Path resolution for IntegratedGradients (left Riemann sum from a zero
    /// baseline); ignored by the other methods.
    pub ig_steps: usize,
}

impl ExplMethod {
    pub fn new(kind: ExplKind) -> ExplMethod {
        ExplMethod { kind, ig_steps: 32 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == ExplKind::IntegratedGradients && self.ig_steps < 1 {
            return Err(Error::Config("ig_steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// A per-pixel, sum-normalized, nonnegative relevance map.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub values: Tensor,
    /// image digest + method kind
    pub source: String,
}

impl SaliencyMap {
    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    /// CSV grid, one row of pixels per line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let mut f = std::fs::File::create(path)?;
        for i in 0..h {
            let row: Vec<String> = (0..w)
                .map(|j| format!("{:e}", self.values.data()[i * w + j]))
                .collect();
            writeln!(f, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// 8-bit binary PGM scaled to the map's max for visual inspection.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let max = self
            .values
            .data()
            .iter()
            .cloned()
            .fold(0.0f64, f64::max)
            .max(1e-300);
        let mut f = std::fs::File::create(path)?;
        write!(f, "P5\n{} {}\n255\n", w, h)?;
        let bytes: Vec<u8> = self
            .values
            .data()
            .iter()
            .map(|&v| ((v / max) * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        f.write_all(&bytes)?;
        Ok(())
    }
}

fn image_digest(image: &Tensor) -> String {
    let mut h = Sha256::new();
    for v in image.data() {
        h.update(v.to_le_bytes());
    }
    let d = h.finalize();
    d[..8].iter().map(|b| format!("{:02x}", b)).collect()
}

/// Gradient of the summed per-image class scores w.r.t. `x`, as a graph
/// value when `create_graph` is set.
fn input_grad(
    spec: &ModelSpec,
    params: &ParamVars,
    x: &Var,
    classes: &Rc<Vec<usize>>,
    guided: bool,
    create_graph: bool,
) -> Result<Var> {
    let logits = model_forward_full(spec, params, x, guided)?.logits;
    let score = logits.select_classes(classes)?.sum();
    Ok(grad(&score, &[x], create_graph)?.remove(0))
}

/// Raw (pre-normalization) relevance for a whole batch, [N,C,H,W].
fn raw_relevance(
    method: ExplMethod,
    spec: &ModelSpec,
    params: &ParamVars,
    x: &Var,
    classes: &Rc<Vec<usize>>,
    create_graph: bool,
) -> Result<Var> {
    method.validate()?;
    match method.kind {
        ExplKind::Gradient => input_grad(spec, params, x, classes, false, create_graph),
        ExplKind::GradientTimesInput => {
            let g = input_grad(spec, params, x, classes, false, create_graph)?;
            g.mul(x)
        }
        ExplKind::GuidedBackprop => input_grad(spec, params, x, classes, true, create_graph),
        ExplKind::IntegratedGradients => {
            // mean of path gradients from the zero baseline, left Riemann sum
            let m = method.ig_steps;
            let mut acc: Option<Var> = None;
            for t in 0..m {
                let ct = t as f64 / m as f64;
                let xt = x.scalar_mul(ct);
                let logits = model_forward_full(spec, params, &xt, false)?.logits;
                let score = logits.select_classes(classes)?.sum();
                let gt = grad(&score, &[&xt], create_graph)?.remove(0);
                acc = Some(match acc {
                    Some(a) => a.add(&gt)?,
                    None => gt,
                });
            }
            let mean_grad = acc.expect("ig_steps >= 1").scalar_mul(1.0 / m as f64);
            mean_grad.mul(x)
        }
    }
}

/// Differentiable batched saliency: [N,C,H,W] input to [N,H,W] normalized
/// maps. Each image's map is nonnegative and sums to one.
pub fn saliency_batch_var(
    method: ExplMethod,
    spec: &ModelSpec,
    params: &ParamVars,
    x: &Var,
    classes: &[usize],
    create_graph: bool,
) -> Result<Var> {
    let idx = Rc::new(classes.to_vec());
    let raw = raw_relevance(method, spec, params, x, &idx, create_graph)?;
    normalize_relevance(&raw)
}

fn normalize_relevance(raw: &Var) -> Result<Var> {
    let agg = raw.abs().sum_over_c()?;
    let sums = agg.sum_per_image()?;
    if sums.value().data().iter().any(|&s| s <= 0.0) {
        return Err(Error::DegenerateSaliency);
    }
    let ones = Var::constant(Tensor::full(sums.shape(), 1.0));
    let inv = ones.div(&sums)?;
    let normalized = agg.mul(&inv.broadcast_per_image(agg.shape())?)?;
    let s = normalized.shape();
    normalized.reshape(&[s[0], s[2], s[3]])
}

/// Like [`saliency_batch_var`] but also returns the logits of the same
/// forward pass, so callers that need a classification term (the explanation
/// attack) avoid a second forward. For IntegratedGradients the logits come
/// from one extra forward at `x` itself, which is not on the Riemann path.
pub fn saliency_batch_with_logits(
    method: ExplMethod,
    spec: &ModelSpec,
    params: &ParamVars,
    x: &Var,
    classes: &[usize],
    create_graph: bool,
) -> Result<(Var, Var)> {
    method.validate()?;
    let idx = Rc::new(classes.to_vec());
    let (raw, logits) = match method.kind {
        ExplKind::IntegratedGradients => {
            let raw = raw_relevance(method, spec, params, x, &idx, create_graph)?;
            let logits = model_forward_full(spec, params, x, false)?.logits;
            (raw, logits)
        }
        kind => {
            let guided = kind == ExplKind::GuidedBackprop;
            let logits = model_forward_full(spec, params, x, guided)?.logits;
            let score = logits.select_classes(&idx)?.sum();
            let g = grad(&score, &[x], create_graph)?.remove(0);
            let raw = match kind {
                ExplKind::Gradient | ExplKind::GuidedBackprop => g,
                ExplKind::GradientTimesInput => g.mul(x)?,
                ExplKind::IntegratedGradients => unreachable!(),
            };
            (raw, logits)
        }
    };
    Ok((normalize_relevance(&raw)?, logits))
}

pub(crate) fn check_image_range(image: &Tensor) -> Result<()> {
    for (i, &v) in image.data().iter().enumerate() {
        if !(-1e-6..=1.0 + 1e-6).contains(&v) {
            return Err(Error::ImageRange {
                detail: format!("pixel {} = {}", i, v),
            });
        }
    }
    Ok(())
}

/// Predicted class of a single image (ties toward the lowest index).
pub fn predict(spec: &ModelSpec, params: &ParamSet, image: &Tensor) -> Result<usize> {
    let pv = ParamVars::new(params, false);
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let x = Var::constant(image.reshaped(shape)?);
    let logits = model_forward_full(spec, &pv, &x, false)?.logits;
    Ok(crate::nn::predictions(logits.value())[0])
}

/// Saliency map of a single [C,H,W] image. The class score is the logit of
/// the model's predicted class unless overridden.
pub fn saliency(
    method: ExplMethod,
    spec: &ModelSpec,
    params: &ParamSet,
    image: &Tensor,
    class: Option<usize>,
) -> Result<SaliencyMap> {
    check_image_range(image)?;
    let class = match class {
        Some(c) => c,
        None => predict(spec, params, image)?,
    };
    let pv = ParamVars::new(params, false);
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let x = Var::leaf(image.reshaped(shape)?, true);
    let map = saliency_batch_var(method, spec, &pv, &x, &[class], false)?;
    let s = map.shape();
    let values = map.value().reshaped(vec![s[1], s[2]])?;
    Ok(SaliencyMap {
        values,
        source: format!("{}:{}", image_digest(image), method.kind.name()),
    })
}

/// Explanation loss: mean squared difference between two maps.
pub fn explanation_loss(a: &Var, b: &Var) -> Result<Var> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "explanation_loss",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(a.sub(b)?.square()?.mean())
}

/// Explanation loss between two concrete maps.
pub fn explanation_loss_maps(a: &SaliencyMap, b: &SaliencyMap) -> Result<f64> {
    Ok(explanation_loss(&Var::constant(a.values.clone()), &Var::constant(b.values.clone()))?.item())
}
