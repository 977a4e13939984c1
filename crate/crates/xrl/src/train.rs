//! The four training regimes — Normal, MAT, TRADES, SEP — their loss
//! assemblies, and the Adam optimizer.
//!
//! The regime-reduction identities hold by construction: Normal is the
//! TRADES loss at α = 0 and MAT is the SEP loss at λ = 0, so the identity
//! regimes are bit-for-bit equal, not merely numerically close.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::attack::{pgd_attack, PgdConfig, PgdObjective};
use crate::autodiff::{grad, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::explain::{explanation_loss, saliency_batch_var, ExplMethod};
use crate::nn::{
    accuracy, build_model, cross_entropy, forward_tensors, kl_divergence, model_forward, Layer,
    ModelSpec, ParamSet, ParamVars,
};
use crate::seeds::{rng_for, standard_normal, subseed};
use crate::tensor::{kahan_sum, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    Normal,
    Mat,
    Trades,
    Sep,
}

impl Regime {
    pub fn name(&self) -> &'static str {
        match self {
            Regime::Normal => "normal",
            Regime::Mat => "mat",
            Regime::Trades => "trades",
            Regime::Sep => "sep",
        }
    }

    pub fn parse(s: &str) -> Result<Regime> {
        match s {
            "normal" => Ok(Regime::Normal),
            "mat" => Ok(Regime::Mat),
            "trades" => Ok(Regime::Trades),
            "sep" => Ok(Regime::Sep),
            other => Err(Error::Config(format!("unknown regime '{}'", other))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; one moment pair per parameter tensor.
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: usize,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Adam {
        let m = params
            .entries()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect::<Vec<_>>();
        let v = m.clone();
        Adam { cfg, m, v, t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) {
        self.t += 1;
        let b1t = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for (i, (_, p)) in params.entries_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, pj) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.cfg.beta1 * m[j] + (1.0 - self.cfg.beta1) * g[j];
                v[j] = self.cfg.beta2 * v[j] + (1.0 - self.cfg.beta2) * g[j] * g[j];
                let mhat = m[j] / b1t;
                let vhat = v[j] / b2t;
                *pj -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
    }
}

/// A per-batch loss with the parameter graph it was built over.
pub struct LossOutput {
    pub total: Var,
    pub params: ParamVars,
    /// classification part (CE on clean or adversarial x, by regime)
    pub cls: f64,
    /// auxiliary part: the KL term (TRADES) or L_f (SEP), 0 otherwise
    pub aux: f64,
}

/// Eq. (1): L_sc(f(x), y) + α·KL(f(x) ‖ f(x_adv)), x_adv from the
/// KLFromClean inner maximization. α = 0 skips the attack entirely and
/// reduces to the plain cross-entropy loss.
pub fn trades_loss(
    spec: &ModelSpec,
    params: &ParamSet,
    batch: &Tensor,
    labels: &[usize],
    alpha: f64,
    pgd: &PgdConfig,
    attack_rng: &mut ChaCha8Rng,
) -> Result<LossOutput> {
    let pv = ParamVars::new(params, true);
    let clean_logits = model_forward(spec, &pv, &Var::constant(batch.clone()))?;
    let ce = cross_entropy(&clean_logits, labels)?;
    let cls = ce.item();
    if alpha == 0.0 {
        return Ok(LossOutput {
            total: ce,
            params: pv,
            cls,
            aux: 0.0,
        });
    }
    let mut cfg = *pgd;
    cfg.objective = PgdObjective::KLFromClean;
    let x_adv = pgd_attack(spec, params, batch, labels, &cfg, attack_rng)?;
    let adv_logits = model_forward(spec, &pv, &Var::constant(x_adv))?;
    let kl = kl_divergence(&clean_logits, &adv_logits)?;
    let aux = kl.item();
    Ok(LossOutput {
        total: ce.add(&kl.scalar_mul(alpha))?,
        params: pv,
        cls,
        aux,
    })
}

/// Eq. (5) with an explicit noise tensor (the ζ test hook):
/// L_sc(f(x_adv), y) + λ·L_f, L_f = explanation_loss(I(x+ζ), I(x)).
/// Both maps take the class score at the clean prediction so they compare
/// like-for-like. λ = 0 skips the saliency path and reduces to the MAT
/// loss (cross-entropy on x_adv).
pub fn sep_loss_with_noise(
    spec: &ModelSpec,
    params: &ParamSet,
    batch: &Tensor,
    labels: &[usize],
    lambda: f64,
    zeta: &Tensor,
    method: ExplMethod,
    pgd: &PgdConfig,
    attack_rng: &mut ChaCha8Rng,
) -> Result<LossOutput> {
    let pv = ParamVars::new(params, true);
    let mut cfg = *pgd;
    cfg.objective = PgdObjective::CrossEntropy;
    let x_adv = pgd_attack(spec, params, batch, labels, &cfg, attack_rng)?;
    let adv_logits = model_forward(spec, &pv, &Var::constant(x_adv))?;
    let ce = cross_entropy(&adv_logits, labels)?;
    let cls = ce.item();
    if lambda == 0.0 {
        return Ok(LossOutput {
            total: ce,
            params: pv,
            cls,
            aux: 0.0,
        });
    }
    if zeta.shape() != batch.shape() {
        return Err(Error::ShapeMismatch {
            op: "sep_loss",
            detail: format!("zeta {:?} vs batch {:?}", zeta.shape(), batch.shape()),
        });
    }
    let clean_logits = forward_tensors(spec, params, batch)?;
    let preds = crate::nn::predictions(&clean_logits);
    let mut noisy = batch.clone();
    for (v, z) in noisy.data_mut().iter_mut().zip(zeta.data()) {
        *v += z;
    }
    let x_clean = Var::leaf(batch.clone(), true);
    let x_noisy = Var::leaf(noisy, true);
    let map_noisy = saliency_batch_var(method, spec, &pv, &x_noisy, &preds, true)?;
    let map_clean = saliency_batch_var(method, spec, &pv, &x_clean, &preds, true)?;
    let lf = explanation_loss(&map_noisy, &map_clean)?;
    let aux = lf.item();
    Ok(LossOutput {
        total: ce.add(&lf.scalar_mul(lambda))?,
        params: pv,
        cls,
        aux,
    })
}

/// Eq. (5) with ζ ~ N(0, σ_ζ²) per pixel, drawn fresh from `zeta_rng`.
pub fn sep_loss(
    spec: &ModelSpec,
    params: &ParamSet,
    batch: &Tensor,
    labels: &[usize],
    lambda: f64,
    sigma_zeta: f64,
    method: ExplMethod,
    pgd: &PgdConfig,
    attack_rng: &mut ChaCha8Rng,
    zeta_rng: &mut ChaCha8Rng,
) -> Result<LossOutput> {
    if sigma_zeta <= 0.0 {
        return Err(Error::Config("sigma_zeta must be positive".into()));
    }
    let zeta = if lambda == 0.0 {
        Tensor::zeros(batch.shape())
    } else {
        let mut z = Tensor::zeros(batch.shape());
        for v in z.data_mut().iter_mut() {
            *v = sigma_zeta * standard_normal(zeta_rng);
        }
        z
    };
    sep_loss_with_noise(
        spec, params, batch, labels, lambda, &zeta, method, pgd, attack_rng,
    )
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// TRADES weight (Eq. 1)
    pub alpha: f64,
    /// SEP weight (Eq. 5), signed
    pub lambda: f64,
    /// SEP noise scale (Eq. 4)
    pub sigma_zeta: f64,
    pub pgd: PgdConfig,
    pub expl_method: ExplMethod,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config("alpha must be nonnegative".into()));
        }
        if self.sigma_zeta <= 0.0 {
            return Err(Error::Config("sigma_zeta must be positive".into()));
        }
        self.pgd.validate()?;
        self.expl_method.validate()
    }
}

/// Learning-rate convention: 0.01 for plain convolutional stacks, 0.001
/// once residual blocks are present.
pub fn default_learning_rate(spec: &ModelSpec) -> f64 {
    let residual = spec
        .layers
        .iter()
        .any(|l| matches!(l, Layer::Residual { .. }));
    if residual {
        0.001
    } else {
        0.01
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub cls_loss: f64,
    pub aux_loss: f64,
    pub clean_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "epoch,cls_loss,aux_loss,clean_acc")?;
        for r in &self.records {
            writeln!(
                f,
                "{},{:e},{:e},{:e}",
                r.epoch, r.cls_loss, r.aux_loss, r.clean_acc
            )?;
        }
        Ok(())
    }
}

fn heldout_accuracy(spec: &ModelSpec, params: &ParamSet, ds: &Dataset) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    let n = ds.len();
    let mut i = 0;
    while i < n {
        let end = (i + 256).min(n);
        let idx: Vec<usize> = (i..end).collect();
        let (batch, labels) = ds.batch(&idx);
        let logits = forward_tensors(spec, params, &batch)?;
        correct += (accuracy(&logits, &labels) * labels.len() as f64).round() as usize;
        total += labels.len();
        i = end;
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// Train per Algorithm 1: per-epoch shuffle, per-batch loss by regime, one
/// Adam update per batch. Deterministic given cfg.seed: the shuffle,
/// attack, and ζ noise streams are independent labeled substreams, so the
/// SEP(λ=0) ≡ MAT identity survives the extra (skipped) noise draws.
pub fn train(spec: &ModelSpec, dataset: &Dataset, cfg: &TrainConfig) -> Result<(ParamSet, TrainHistory)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    spec.validate()?;
    let (train_ds, heldout) = dataset.split_heldout();
    let mut params = build_model(spec, subseed(cfg.seed, "init"))?;
    let mut adam = Adam::new(cfg.adam, &params);
    let mut shuffle_rng = rng_for(cfg.seed, "shuffle");
    let mut attack_rng = rng_for(cfg.seed, "attack");
    let mut zeta_rng = rng_for(cfg.seed, "zeta");

    let mut history = TrainHistory::default();
    let n = train_ds.len();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut shuffle_rng);
        let mut cls_losses = Vec::new();
        let mut aux_losses = Vec::new();
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (batch, labels) = train_ds.batch(chunk);
            let out = match cfg.regime {
                Regime::Normal => {
                    trades_loss(spec, &params, &batch, &labels, 0.0, &cfg.pgd, &mut attack_rng)?
                }
                Regime::Trades => trades_loss(
                    spec,
                    &params,
                    &batch,
                    &labels,
                    cfg.alpha,
                    &cfg.pgd,
                    &mut attack_rng,
                )?,
                Regime::Mat => sep_loss(
                    spec,
                    &params,
                    &batch,
                    &labels,
                    0.0,
                    cfg.sigma_zeta,
                    cfg.expl_method,
                    &cfg.pgd,
                    &mut attack_rng,
                    &mut zeta_rng,
                )?,
                Regime::Sep => sep_loss(
                    spec,
                    &params,
                    &batch,
                    &labels,
                    cfg.lambda,
                    cfg.sigma_zeta,
                    cfg.expl_method,
                    &cfg.pgd,
                    &mut attack_rng,
                    &mut zeta_rng,
                )?,
            };
            if !out.total.item().is_finite() {
                return Err(Error::TrainDiverged {
                    epoch,
                    batch: bi,
                });
            }
            let wrt: Vec<&Var> = out.params.vars();
            let grads = grad(&out.total, &wrt, false)?;
            let grad_tensors: Vec<Tensor> = grads.iter().map(|g| g.value().clone()).collect();
            adam.step(&mut params, &grad_tensors);
            cls_losses.push(out.cls);
            aux_losses.push(out.aux);
        }
        let clean_acc = if heldout.is_empty() {
            f64::NAN
        } else {
            heldout_accuracy(spec, &params, &heldout)?
        };
        history.records.push(EpochRecord {
            epoch,
            cls_loss: kahan_sum(cls_losses.iter().copied()) / cls_losses.len() as f64,
            aux_loss: kahan_sum(aux_losses.iter().copied()) / aux_losses.len() as f64,
            clean_acc,
        });
    }
    Ok((params, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::explain::ExplKind;

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            input: (1, 6, 6),
            classes: 2,
            layers: vec![
                Layer::Conv2d {
                    out_channels: 3,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
                Layer::Softplus { beta: 1.0 },
                Layer::Flatten,
                Layer::Linear { out_features: 2 },
            ],
        }
    }

    fn small_pgd(steps: usize) -> PgdConfig {
        PgdConfig {
            epsilon: 0.1,
            steps,
            step_size: 0.05,
            random_start: false,
            objective: PgdObjective::CrossEntropy,
        }
    }

    fn tiny_cfg(regime: Regime) -> TrainConfig {
        TrainConfig {
            regime,
            epochs: 2,
            batch_size: 8,
            adam: AdamConfig::new(0.01),
            alpha: 1.0,
            lambda: 10.0,
            sigma_zeta: 0.5,
            pgd: small_pgd(2),
            expl_method: ExplMethod::new(ExplKind::Gradient),
            seed: 7,
        }
    }

    #[test]
    fn trades_alpha_zero_is_plain_cross_entropy() {
        let spec = tiny_spec();
        let params = build_model(&spec, 1).unwrap();
        let ds = synth_blobs(2, 4, 6, 0.05, 3);
        let (batch, labels) = ds.batch(&(0..8).collect::<Vec<_>>());
        let mut rng = rng_for(1, "attack");
        let out = trades_loss(&spec, &params, &batch, &labels, 0.0, &small_pgd(2), &mut rng).unwrap();
        let pv = ParamVars::new(&params, false);
        let ce = cross_entropy(
            &model_forward(&spec, &pv, &Var::constant(batch)).unwrap(),
            &labels,
        )
        .unwrap();
        assert_eq!(out.total.item(), ce.item());
        assert_eq!(out.aux, 0.0);
    }

    #[test]
    fn trades_with_identity_attack_equals_cross_entropy() {
        // ε = 0, steps = 0, no random start forces x_adv = x; KL(p‖p) = 0
        let spec = tiny_spec();
        let params = build_model(&spec, 2).unwrap();
        let ds = synth_blobs(2, 4, 6, 0.05, 4);
        let (batch, labels) = ds.batch(&(0..8).collect::<Vec<_>>());
        let cfg = PgdConfig {
            epsilon: 0.0,
            steps: 0,
            step_size: 0.05,
            random_start: false,
            objective: PgdObjective::KLFromClean,
        };
        // random_start=false is fine here: steps=0 never queries the gradient
        let mut rng = rng_for(2, "attack");
        let mut cfg_ok = cfg;
        cfg_ok.random_start = true;
        let out =
            trades_loss(&spec, &params, &batch, &labels, 1.0, &cfg_ok, &mut rng).unwrap();
        assert_eq!(out.aux, 0.0);
        assert_eq!(out.total.item(), out.cls);
    }

    #[test]
    fn trades_is_monotone_in_alpha_for_fixed_attack() {
        let spec = tiny_spec();
        let params = build_model(&spec, 3).unwrap();
        let ds = synth_blobs(2, 4, 6, 0.08, 5);
        let (batch, labels) = ds.batch(&(0..8).collect::<Vec<_>>());
        let mut cfg = small_pgd(3);
        cfg.objective = PgdObjective::KLFromClean;
        cfg.random_start = true;
        let v1 = trades_loss(&spec, &params, &batch, &labels, 1.0, &cfg, &mut rng_for(9, "attack"))
            .unwrap()
            .total
            .item();
        let v5 = trades_loss(&spec, &params, &batch, &labels, 5.0, &cfg, &mut rng_for(9, "attack"))
            .unwrap()
            .total
            .item();
        assert!(v5 >= v1);
    }

    #[test]
    fn sep_lambda_zero_is_mat_loss() {
        let spec = tiny_spec();
        let params = build_model(&spec, 4).unwrap();
        let ds = synth_blobs(2, 4, 6, 0.05, 6);
        let (batch, labels) = ds.batch(&(0..8).collect::<Vec<_>>());
        let out = sep_loss(
            &spec,
            &params,
            &batch,
            &labels,
            0.0,
            1.0,
            ExplMethod::new(ExplKind::Gradient),
            &small_pgd(3),
            &mut rng_for(5, "attack"),
            &mut rng_for(5, "zeta"),
        )
        .unwrap();
        // recompute the MAT loss with an identically seeded attack stream
        let adv = pgd_attack(
            &spec,
            &params,
            &batch,
            &labels,
            &small_pgd(3),
            &mut rng_for(5, "attack"),
        )
        .unwrap();
        let pv = ParamVars::new(&params, false);
        let ce = cross_entropy(
            &model_forward(&spec, &pv, &Var::constant(adv)).unwrap(),
            &labels,
        )
        .unwrap();
        assert_eq!(out.total.item(), ce.item());
        assert_eq!(out.aux, 0.0);
    }

    #[test]
    fn sep_zero_noise_hook_reduces_to_mat_for_any_lambda() {
        let spec = tiny_spec();
        let params = build_model(&spec, 5).unwrap();
        let ds = synth_blobs(2, 4, 6, 0.05, 7);
        let (batch, labels) = ds.batch(&(0..8).collect::<Vec<_>>());
        let zeta = Tensor::zeros(batch.shape());
        let out = sep_loss_with_noise(
            &spec,
            &params,
            &batch,
            &labels,
            5e4,
            &zeta,
            ExplMethod::new(ExplKind::Gradient),
            &small_pgd(2),
            &mut rng_for(6, "attack"),
        )
        .unwrap();
        assert_eq!(out.aux, 0.0);
        assert_eq!(out.total.item(), out.cls);
    }

    #[test]
    fn sep_loss_is_linear_in_lambda() {
        let spec = tiny_spec();
        let params = build_model(&spec, 6).unwrap();
        let ds = synth_blobs(2, 4, 6, 0.08, 8);
        let (batch, labels) = ds.batch(&(0..8).collect::<Vec<_>>());
        let mut zeta = Tensor::zeros(batch.shape());
        let mut zrng = rng_for(11, "zeta");
        for v in zeta.data_mut().iter_mut() {
            *v = 0.5 * standard_normal(&mut zrng);
        }
        let run = |lambda: f64| {
            sep_loss_with_noise(
                &spec,
                &params,
                &batch,
                &labels,
                lambda,
                &zeta,
                ExplMethod::new(ExplKind::Gradient),
                &small_pgd(2),
                &mut rng_for(7, "attack"),
            )
            .unwrap()
        };
        let pos = run(5e4);
        let neg = run(-3e3);
        assert!(pos.aux > 0.0);
        let expect = (5e4 + 3e3) * pos.aux;
        let got = pos.total.item() - neg.total.item();
        assert!(
            (got - expect).abs() <= 1e-9 * expect.abs().max(1.0),
            "got {} expected {}",
            got,
            expect
        );
    }

    #[test]
    fn sep_gradient_passes_finite_difference_spot_check() {
        // fixed ζ and an identity attack (ε=0, steps=0) so the loss is a
        // smooth function of the parameters; validates the mixed
        // second-order path through the saliency maps
        let spec = tiny_spec();
        let params = build_model(&spec, 7).unwrap();
        let ds = synth_blobs(2, 2, 6, 0.08, 9);
        let (batch, labels) = ds.batch(&[0, 1, 2, 3]);
        let mut zeta = Tensor::zeros(batch.shape());
        let mut zrng = rng_for(3, "zeta");
        for v in zeta.data_mut().iter_mut() {
            *v = 0.3 * standard_normal(&mut zrng);
        }
        let pgd = PgdConfig {
            epsilon: 0.0,
            steps: 0,
            step_size: 0.05,
            random_start: false,
            objective: PgdObjective::CrossEntropy,
        };
        let eval = |p: &ParamSet| {
            sep_loss_with_noise(
                &spec,
                p,
                &batch,
                &labels,
                50.0,
                &zeta,
                ExplMethod::new(ExplKind::Gradient),
                &pgd,
                &mut rng_for(0, "attack"),
            )
            .unwrap()
        };
        let out = eval(&params);
        let wrt: Vec<&Var> = out.params.vars();
        let grads = grad(&out.total, &wrt, false).unwrap();
        // spot-check 3 coordinates spread across tensors
        let picks = [(0usize, 1usize), (1, 0), (2, 5)];
        let h = 1e-4;
        for &(ti, ci) in &picks {
            let ti = ti % params.entries().len();
            let ci = ci % params.entries()[ti].1.len();
            let mut plus = params.clone();
            plus.entries_mut()[ti].1.data_mut()[ci] += h;
            let mut minus = params.clone();
            minus.entries_mut()[ti].1.data_mut()[ci] -= h;
            let num = (eval(&plus).total.item() - eval(&minus).total.item()) / (2.0 * h);
            let ana = grads[ti].value().data()[ci];
            let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-8);
            assert!(rel < 1e-3, "param {} coord {}: num {} ana {}", ti, ci, num, ana);
        }
    }

    #[test]
    fn normal_training_fits_separable_blobs() {
        let spec = tiny_spec();
        let ds = synth_blobs(2, 30, 6, 0.08, 13);
        let mut cfg = tiny_cfg(Regime::Normal);
        cfg.epochs = 5;
        let (params, history) = train(&spec, &ds, &cfg).unwrap();
        assert_eq!(history.records.len(), 5);
        let (_, heldout) = ds.split_heldout();
        let acc = heldout_accuracy(&spec, &params, &heldout).unwrap();
        assert!(acc >= 0.95, "held-out accuracy {}", acc);
    }

    #[test]
    fn sep_lambda_zero_trains_bit_identical_to_mat() {
        let spec = tiny_spec();
        let ds = synth_blobs(2, 10, 6, 0.08, 14);
        let mut mat_cfg = tiny_cfg(Regime::Mat);
        mat_cfg.epochs = 2;
        let mut sep_cfg = tiny_cfg(Regime::Sep);
        sep_cfg.epochs = 2;
        sep_cfg.lambda = 0.0;
        let (p_mat, h_mat) = train(&spec, &ds, &mat_cfg).unwrap();
        let (p_sep, h_sep) = train(&spec, &ds, &sep_cfg).unwrap();
        assert_eq!(p_mat.entries(), p_sep.entries());
        assert_eq!(h_mat, h_sep);
    }

    #[test]
    fn training_is_reproducible() {
        let spec = tiny_spec();
        let ds = synth_blobs(2, 8, 6, 0.08, 15);
        let cfg = tiny_cfg(Regime::Sep);
        let (p1, h1) = train(&spec, &ds, &cfg).unwrap();
        let (p2, h2) = train(&spec, &ds, &cfg).unwrap();
        assert_eq!(p1.entries(), p2.entries());
        assert_eq!(h1, h2);
    }

    #[test]
    fn trades_regime_runs_and_records_aux() {
        let spec = tiny_spec();
        let ds = synth_blobs(2, 8, 6, 0.08, 16);
        let mut cfg = tiny_cfg(Regime::Trades);
        cfg.pgd.random_start = true;
        cfg.epochs = 1;
        let (_, h) = train(&spec, &ds, &cfg).unwrap();
        assert_eq!(h.records.len(), 1);
        assert!(h.records[0].aux_loss >= 0.0);
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let spec = tiny_spec();
        let mut params = build_model(&spec, 9).unwrap();
        let before = params.clone();
        let zeros: Vec<Tensor> = params
            .entries()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        let mut adam = Adam::new(AdamConfig::new(0.01), &params);
        adam.step(&mut params, &zeros);
        assert_eq!(params.entries(), before.entries());
    }

    #[test]
    fn history_csv_has_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("history.csv");
        let h = TrainHistory {
            records: vec![EpochRecord {
                epoch: 0,
                cls_loss: 0.5,
                aux_loss: 0.0,
                clean_acc: 1.0,
            }],
        };
        h.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("epoch,cls_loss,aux_loss,clean_acc\n"));
        assert!(text.lines().count() == 2);
    }
}
