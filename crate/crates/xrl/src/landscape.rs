//! Input loss-landscape probing: the explanation loss f(γ) = L_e(I(x_v+γd),
//! I(x_t)) and its classification analogue, swept over a γ grid with
//! Gaussian direction draws.
//!
//! x + γd is deliberately not clipped to [0,1]: the probe examines the
//! mathematical landscape around the input.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::eval::PairSet;
use crate::explain::{
    explanation_loss, explanation_loss_maps, predict, saliency, saliency_batch_var, ExplMethod,
    SaliencyMap,
};
use crate::nn::{log_softmax, model_forward, ModelSpec, ParamSet, ParamVars};
use crate::seeds::{rng_for, standard_normal};
use crate::tensor::{kahan_sum, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Explanation,
    Classification,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Explanation => "explanation",
            LossKind::Classification => "classification",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandscapeCurve {
    pub kind: LossKind,
    pub gammas: Vec<f64>,
    pub means: Vec<f64>,
    pub std_devs: Vec<f64>,
    pub num_directions: usize,
    pub samples_per_gamma: usize,
    pub seed: u64,
}

impl LandscapeCurve {
    /// CSV: gamma, mean, std, kind, model_digest — one row per γ.
    pub fn write_csv(&self, path: &Path, model_digest: &str) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "gamma,mean,std,kind,model_digest")?;
        for i in 0..self.gammas.len() {
            writeln!(
                f,
                "{:e},{:e},{:e},{},{}",
                self.gammas[i],
                self.means[i],
                self.std_devs[i],
                self.kind.name(),
                model_digest
            )?;
        }
        Ok(())
    }
}

fn check_gammas(gammas: &[f64], num_directions: usize) -> Result<()> {
    if num_directions < 1 {
        return Err(Error::Config("num_directions must be >= 1".into()));
    }
    if gammas.is_empty() || !gammas.contains(&0.0) {
        return Err(Error::Config("gamma grid must include 0".into()));
    }
    if gammas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("gammas must be strictly increasing".into()));
    }
    Ok(())
}

/// Default γ grid: 21 evenly spaced points in [0, 1].
pub fn default_gammas() -> Vec<f64> {
    (0..21).map(|i| i as f64 / 20.0).collect()
}

fn aggregate(per_sample: &[Vec<f64>], gammas: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let m = per_sample.len() as f64;
    let mut means = Vec::with_capacity(gammas.len());
    let mut stds = Vec::with_capacity(gammas.len());
    for gi in 0..gammas.len() {
        let mean = kahan_sum(per_sample.iter().map(|s| s[gi])) / m;
        let var = kahan_sum(per_sample.iter().map(|s| (s[gi] - mean) * (s[gi] - mean))) / m;
        means.push(mean);
        stds.push(var.sqrt());
    }
    (means, stds)
}

/// Sweep L_e(I(x_v + γd), I(x_t)) over the pair set. One i.i.d. standard
/// Gaussian d per (pair, direction); the γ=0 entry applies no noise at all
/// and equals the pair set's mean Expl-at-Start exactly. The class score
/// of every perturbed map is taken at the victim's clean prediction so the
/// curve tracks one fixed explanation per victim.
pub fn probe_explanation_landscape(
    spec: &ModelSpec,
    params: &ParamSet,
    pairset: &PairSet,
    method: ExplMethod,
    gammas: &[f64],
    num_directions: usize,
    seed: u64,
) -> Result<LandscapeCurve> {
    check_gammas(gammas, num_directions)?;
    let maps: Vec<SaliencyMap> = pairset
        .items
        .iter()
        .map(|it| saliency(method, spec, params, &it.image(), None))
        .collect::<Result<_>>()?;
    let preds: Vec<usize> = pairset
        .items
        .iter()
        .map(|it| predict(spec, params, &it.image()))
        .collect::<Result<_>>()?;

    // all direction draws up front, in (pair, direction) order, so the
    // stream is independent of evaluation order
    let img_len = pairset.items[0].image().len();
    let mut rng = rng_for(seed, "directions");
    let directions: Vec<Vec<f64>> = (0..pairset.pairs.len() * num_directions)
        .map(|_| (0..img_len).map(|_| standard_normal(&mut rng)).collect())
        .collect();

    let per_sample: Vec<Vec<f64>> = (0..pairset.pairs.len() * num_directions)
        .into_par_iter()
        .map(|si| -> Result<Vec<f64>> {
            // ParamVars holds Rc graph nodes, so each worker builds its own
            let pv = ParamVars::new(params, false);
            let (v, t) = pairset.pairs[si / num_directions];
            let d = &directions[si];
            let base = pairset.items[v].image();
            let target = Var::constant(maps[t].values.reshaped(vec![
                1,
                maps[t].height(),
                maps[t].width(),
            ])?);
            let mut row = Vec::with_capacity(gammas.len());
            for &g in gammas {
                if g == 0.0 {
                    row.push(explanation_loss_maps(&maps[v], &maps[t])?);
                    continue;
                }
                let mut noisy = base.clone();
                for (p, dv) in noisy.data_mut().iter_mut().zip(d) {
                    *p += g * dv;
                }
                let mut shape = vec![1];
                shape.extend_from_slice(base.shape());
                let x = Var::leaf(noisy.reshaped(shape)?, true);
                let map = saliency_batch_var(method, spec, &pv, &x, &[preds[v]], false)?;
                row.push(explanation_loss(&map, &target)?.item());
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;

    let (means, std_devs) = aggregate(&per_sample, gammas);
    Ok(LandscapeCurve {
        kind: LossKind::Explanation,
        gammas: gammas.to_vec(),
        means,
        std_devs,
        num_directions,
        samples_per_gamma: per_sample.len(),
        seed,
    })
}

/// The classification analogue: per-image cross-entropy swept over the same
/// kind of γ grid, one Gaussian d per (image, direction).
pub fn probe_classification_landscape(
    spec: &ModelSpec,
    params: &ParamSet,
    batch: &Tensor,
    labels: &[usize],
    gammas: &[f64],
    num_directions: usize,
    seed: u64,
) -> Result<LandscapeCurve> {
    check_gammas(gammas, num_directions)?;
    let n = batch.shape()[0];
    let per: usize = batch.shape()[1..].iter().product();
    let mut rng = rng_for(seed, "directions");
    let directions: Vec<Vec<f64>> = (0..n * num_directions)
        .map(|_| (0..per).map(|_| standard_normal(&mut rng)).collect())
        .collect();

    let pv = ParamVars::new(params, false);
    // per-image CE at one input batch
    let per_image_ce = |x: &Tensor| -> Result<Vec<f64>> {
        let logits = model_forward(spec, &pv, &Var::constant(x.clone()))?;
        let lsm = log_softmax(&logits)?;
        let k = lsm.shape()[1];
        Ok((0..x.shape()[0])
            .map(|i| -lsm.value().data()[i * k + labels[i]])
            .collect())
    };

    let clean_ce = per_image_ce(batch)?;
    let mut per_sample: Vec<Vec<f64>> = vec![Vec::with_capacity(gammas.len()); n * num_directions];
    for &g in gammas {
        if g == 0.0 {
            for (si, row) in per_sample.iter_mut().enumerate() {
                row.push(clean_ce[si / num_directions]);
            }
            continue;
        }
        for j in 0..num_directions {
            let mut noisy = batch.clone();
            for i in 0..n {
                let d = &directions[i * num_directions + j];
                for (p, dv) in noisy.data_mut()[i * per..(i + 1) * per].iter_mut().zip(d) {
                    *p += g * dv;
                }
            }
            let ce = per_image_ce(&noisy)?;
            for i in 0..n {
                per_sample[i * num_directions + j].push(ce[i]);
            }
        }
    }

    let (means, std_devs) = aggregate(&per_sample, gammas);
    Ok(LandscapeCurve {
        kind: LossKind::Classification,
        gammas: gammas.to_vec(),
        means,
        std_devs,
        num_directions,
        samples_per_gamma: n * num_directions,
        seed,
    })
}
