//! PGD classification attacks and the targeted explanation-manipulation
//! attack.
//!
//! PGD maximizes a classification objective by signed-gradient ascent with
//! per-step projection to the L∞ ball and the [0,1] box. The explanation
//! attack minimizes the explanation loss toward a target map by plain
//! gradient descent through the differentiable saliency path (double
//! backprop), with a weighted classification term that keeps the original
//! prediction.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad, Var};
use crate::error::{Error, Result};
use crate::explain::{
    check_image_range, explanation_loss, predict, saliency_batch_with_logits, ExplMethod,
    SaliencyMap,
};
use crate::nn::{cross_entropy, kl_divergence, model_forward, predictions, ModelSpec, ParamSet, ParamVars};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PgdObjective {
    /// maximize cross-entropy against the given labels (Madry-style)
    CrossEntropy,
    /// maximize KL(f(x₀) ‖ f(x)) from the clean prediction (TRADES inner
    /// problem); requires random_start, since the KL gradient vanishes at
    /// the clean point
    KLFromClean,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PgdConfig {
    /// L∞ budget
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub random_start: bool,
    pub objective: PgdObjective,
}

impl PgdConfig {
    /// Conventional step size that lets the iterates traverse the ball.
    pub fn default_step_size(epsilon: f64, steps: usize) -> f64 {
        2.5 * epsilon / steps.max(1) as f64
    }

    pub fn new(epsilon: f64, steps: usize, objective: PgdObjective) -> PgdConfig {
        PgdConfig {
            epsilon,
            steps,
            step_size: PgdConfig::default_step_size(epsilon, steps),
            random_start: true,
            objective,
        }
    }

    pub fn validate(&self) -> Result<()> {
        // epsilon = 0 is the identity attack: projection pins every pixel to
        // its original value, so a zero step size is harmless there
        if self.epsilon < 0.0 || self.step_size < 0.0 || (self.epsilon > 0.0 && self.step_size == 0.0)
        {
            return Err(Error::Config(
                "pgd epsilon must be nonnegative and step_size positive".into(),
            ));
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-pixel projection onto B_∞(x₀, ε) ∩ [0,1].
fn project(x: &mut Tensor, origin: &Tensor, epsilon: f64) {
    let orig = origin.data();
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        let lo = (orig[i] - epsilon).max(0.0);
        let hi = (orig[i] + epsilon).min(1.0);
        *v = v.clamp(lo, hi);
    }
}

/// PGD on a batch. The returned batch satisfies ‖x_adv − x₀‖_∞ ≤ ε and
/// x_adv ∈ [0,1] per pixel.
pub fn pgd_attack(
    spec: &ModelSpec,
    params: &ParamSet,
    batch: &Tensor,
    labels: &[usize],
    cfg: &PgdConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    cfg.validate()?;
    assert!(
        cfg.objective != PgdObjective::KLFromClean || cfg.random_start,
        "KLFromClean requires random_start: the KL gradient vanishes at the clean point"
    );
    let pv = ParamVars::new(params, false);
    let clean_logits = match cfg.objective {
        PgdObjective::KLFromClean => Some(
            model_forward(spec, &pv, &Var::constant(batch.clone()))?
                .value()
                .clone(),
        ),
        PgdObjective::CrossEntropy => None,
    };

    let mut x = batch.clone();
    if cfg.random_start {
        for v in x.data_mut().iter_mut() {
            *v += rng.gen_range(-cfg.epsilon..=cfg.epsilon);
        }
        project(&mut x, batch, cfg.epsilon);
    }

    for _ in 0..cfg.steps {
        let xv = Var::leaf(x.clone(), true);
        let loss = match cfg.objective {
            PgdObjective::CrossEntropy => {
                let logits = model_forward(spec, &pv, &xv)?;
                cross_entropy(&logits, labels)?
            }
            PgdObjective::KLFromClean => {
                let logits = model_forward(spec, &pv, &xv)?;
                let clean = Var::constant(clean_logits.clone().expect("clean logits"));
                kl_divergence(&clean, &logits)?
            }
        };
        let g = grad(&loss, &[&xv], false)?.remove(0);
        for (v, gv) in x.data_mut().iter_mut().zip(g.value().data()) {
            *v += cfg.step_size * sign(*gv);
        }
        project(&mut x, batch, cfg.epsilon);
    }
    Ok(x)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExplAttackConfig {
    /// L∞ budget on the perturbation
    pub epsilon: f64,
    pub iterations: usize,
    /// descent step on δ; None picks 1e-2·ε
    pub learning_rate: Option<f64>,
    /// class-preservation weight; None balances the terms per pair as
    /// 1e-2·(initial L_e / initial CE)
    pub gamma_c: Option<f64>,
}

impl ExplAttackConfig {
    pub fn new(epsilon: f64, iterations: usize) -> ExplAttackConfig {
        ExplAttackConfig {
            epsilon,
            iterations,
            learning_rate: None,
            gamma_c: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0
            || self.learning_rate.is_some_and(|v| v <= 0.0)
            || self.gamma_c.is_some_and(|v| v <= 0.0)
        {
            return Err(Error::Config(
                "explanation attack parameters must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttackTraceRow {
    pub iteration: usize,
    pub expl_loss: f64,
    pub ce_loss: f64,
    pub preserved: bool,
}

#[derive(Clone, Debug)]
pub struct ExplAttackResult {
    pub adversarial: Tensor,
    pub loss_at_start: f64,
    pub loss_at_end: f64,
    pub prediction_preserved: bool,
    pub iterations_run: usize,
    pub trace: Vec<AttackTraceRow>,
}

pub fn write_trace_csv(trace: &[AttackTraceRow], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "iteration,expl_loss,ce_loss,preserved")?;
    for r in trace {
        writeln!(
            f,
            "{},{:e},{:e},{}",
            r.iteration, r.expl_loss, r.ce_loss, r.preserved
        )?;
    }
    Ok(())
}

/// Targeted manipulation of a single image's saliency map toward
/// `target_map`, preserving the original prediction where possible.
/// Returns the best iterate by explanation loss: preferring iterates whose
/// prediction matches the victim's, falling back to the best overall with
/// `prediction_preserved = false`.
pub fn explanation_attack(
    spec: &ModelSpec,
    params: &ParamSet,
    victim: &Tensor,
    target_map: &SaliencyMap,
    method: ExplMethod,
    cfg: &ExplAttackConfig,
) -> Result<ExplAttackResult> {
    cfg.validate()?;
    check_image_range(victim)?;
    let orig_pred = predict(spec, params, victim)?;
    let lr_default;
    let pv = ParamVars::new(params, false);
    let mut shape = vec![1];
    shape.extend_from_slice(victim.shape());
    let origin = victim.reshaped(shape.clone())?;
    let target = Var::constant(target_map.values.reshaped(vec![
        1,
        target_map.height(),
        target_map.width(),
    ])?);

    lr_default = cfg.learning_rate.unwrap_or(1e-2 * cfg.epsilon);
    let mut gamma_c = cfg.gamma_c;
    let mut x = origin.clone();
    let mut loss_at_start = 0.0;
    let mut best_preserved: Option<(f64, Tensor)> = None;
    let mut best_any: Option<(f64, Tensor)> = None;
    let mut trace = Vec::with_capacity(cfg.iterations + 1);

    for it in 0..=cfg.iterations {
        let xv = Var::leaf(x.clone(), true);
        let (map, logits) =
            saliency_batch_with_logits(method, spec, &pv, &xv, &[orig_pred], true)?;
        let le = explanation_loss(&map, &target)?;
        let ce = cross_entropy(&logits, &[orig_pred])?;
        let le_val = le.item();
        let ce_val = ce.item();
        if !le_val.is_finite() || !ce_val.is_finite() {
            return Err(Error::AttackDiverged { iteration: it });
        }
        let pred = predictions(logits.value())[0];
        let preserved = pred == orig_pred;
        trace.push(AttackTraceRow {
            iteration: it,
            expl_loss: le_val,
            ce_loss: ce_val,
            preserved,
        });
        if it == 0 {
            loss_at_start = le_val;
            if gamma_c.is_none() {
                gamma_c = Some(if ce_val > 0.0 {
                    1e-2 * le_val / ce_val
                } else {
                    1e-2
                });
            }
        }
        if preserved && best_preserved.as_ref().map_or(true, |(b, _)| le_val < *b) {
            best_preserved = Some((le_val, x.clone()));
        }
        if best_any.as_ref().map_or(true, |(b, _)| le_val < *b) {
            best_any = Some((le_val, x.clone()));
        }
        if it == cfg.iterations {
            break;
        }

        let total = le.add(&ce.scalar_mul(gamma_c.expect("set at iteration 0")))?;
        let g = grad(&total, &[&xv], false)?.remove(0);
        for (v, gv) in x.data_mut().iter_mut().zip(g.value().data()) {
            *v -= lr_default * gv;
        }
        project(&mut x, &origin, cfg.epsilon);
    }

    let (prediction_preserved, (loss_at_end, best_x)) = match best_preserved {
        Some(b) => (true, b),
        None => (false, best_any.expect("at least the start iterate")),
    };
    Ok(ExplAttackResult {
        adversarial: best_x.reshaped(victim.shape().to_vec())?,
        loss_at_start,
        loss_at_end,
        prediction_preserved,
        iterations_run: cfg.iterations,
        trace,
    })
}
