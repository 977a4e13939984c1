//! Cluster-based representative pair selection and the four robustness
//! metrics: Expl at Start, Expl at End, Clean Acc, Adv Acc.
//!
//! Pairs are ordered (victim, target) with victim ≠ target, so n images
//! yield n·(n−1) pairs. Features come from the penultimate layer (the input
//! to the final classification layer) of a reference model.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{explanation_attack, pgd_attack, ExplAttackConfig, PgdConfig, PgdObjective};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::explain::{explanation_loss_maps, saliency, ExplMethod, SaliencyMap};
use crate::nn::{accuracy, model_forward_full, ModelSpec, ParamSet, ParamVars};
use crate::seeds::rng_for;
use crate::tensor::{kahan_sum, Tensor};

/// Penultimate-layer activations, one row per image: [N, F].
pub fn extract_features(spec: &ModelSpec, params: &ParamSet, images: &Tensor) -> Result<Tensor> {
    let pv = ParamVars::new(params, false);
    let n = images.shape()[0];
    let mut rows: Vec<f64> = Vec::new();
    let mut width = 0usize;
    let mut i = 0;
    while i < n {
        let end = (i + 64).min(n);
        let idx: Vec<usize> = (i..end).collect();
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&images.shape()[1..]);
        let per: usize = images.shape()[1..].iter().product();
        let data = images.data()[i * per..end * per].to_vec();
        let batch = crate::autodiff::Var::constant(Tensor::new(shape, data)?);
        let out = model_forward_full(spec, &pv, &batch, false)?;
        let f = out.features.value();
        width = f.shape()[1];
        rows.extend_from_slice(f.data());
        i = end;
    }
    Tensor::new(vec![n, width], rows)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    kahan_sum(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)))
}

#[derive(Clone, Debug)]
pub struct KmeansResult {
    pub assignments: Vec<usize>,
    /// [k, F]
    pub centroids: Tensor,
    pub inertia: f64,
    /// inertia after each Lloyd iteration; non-increasing
    pub inertia_history: Vec<f64>,
}

fn assign(points: &Tensor, centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let f = points.shape()[1];
    let n = points.shape()[0];
    let mut assignments = vec![0usize; n];
    let mut dists = vec![0.0f64; n];
    for i in 0..n {
        let row = &points.data()[i * f..(i + 1) * f];
        let mut best = (0usize, f64::INFINITY);
        for (c, cen) in centroids.iter().enumerate() {
            let d = sq_dist(row, cen);
            if d < best.1 {
                best = (c, d);
            }
        }
        assignments[i] = best.0;
        dists[i] = best.1;
    }
    (assignments, kahan_sum(dists.iter().copied()))
}

/// Lloyd's algorithm from a k-means++ initialization, run to an assignment
/// fixpoint or 300 iterations. Empty clusters are reseeded to the point
/// farthest from its current centroid. Deterministic given the seed.
pub fn kmeans(features: &Tensor, k: usize, seed: u64) -> Result<KmeansResult> {
    let n = features.shape()[0];
    let f = features.shape()[1];
    if k > n {
        return Err(Error::TooFewPoints { k, points: n });
    }
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    let mut rng: ChaCha8Rng = rng_for(seed, "kmeans");
    let row = |i: usize| features.data()[i * f..(i + 1) * f].to_vec();

    // k-means++ seeding
    let mut centroids: Vec<Vec<f64>> = vec![row(rng.gen_range(0..n))];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(&row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let total = kahan_sum(d2.iter().copied());
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                target -= d;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        let c = row(pick);
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(&row(i), &c));
        }
        centroids.push(c);
    }

    let mut assignments = vec![usize::MAX; n];
    let mut inertia = f64::INFINITY;
    let mut history = Vec::new();
    for _ in 0..300 {
        let (new_assign, new_inertia) = assign(features, &centroids);
        history.push(new_inertia);
        let converged = new_assign == assignments;
        assignments = new_assign;
        inertia = new_inertia;
        if converged {
            break;
        }
        // recompute centroids as member means
        let mut sums = vec![vec![0.0f64; f]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignments[i];
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(&features.data()[i * f..(i + 1) * f]) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // reseed to the point farthest from its assigned centroid
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(&row(a), &centroids[assignments[a]]);
                        let db = sq_dist(&row(b), &centroids[assignments[b]]);
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centroids[c] = row(far);
            } else {
                for (j, s) in sums[c].iter().enumerate() {
                    centroids[c][j] = s / counts[c] as f64;
                }
            }
        }
    }
    let flat: Vec<f64> = centroids.into_iter().flatten().collect();
    Ok(KmeansResult {
        assignments,
        centroids: Tensor::new(vec![k, f], flat)?,
        inertia,
        inertia_history: history,
    })
}

/// One selected image with its pixels inlined so a PairSet round-trips
/// through JSON without the source dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairImage {
    pub dataset_index: usize,
    pub label: usize,
    pub cluster: usize,
    shape: Vec<usize>,
    pixels: Vec<f64>,
}

impl PairImage {
    pub fn image(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.pixels.clone()).expect("stored image")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairSet {
    pub items: Vec<PairImage>,
    /// ordered (victim, target) indices into `items`
    pub pairs: Vec<(usize, usize)>,
    pub model_digest: String,
    pub k: usize,
    pub per_cluster: usize,
    pub seed: u64,
}

impl PairSet {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("pair set serialization: {}", e)))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<PairSet> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Parse {
                offset: 0,
                detail: format!("pair set JSON: {}", e),
            })
    }
}

/// Cluster the split's penultimate features, take the `per_cluster` images
/// nearest each centroid (Euclidean, ties toward the lowest index), and
/// form all ordered pairs.
pub fn select_pairs(
    split: &Dataset,
    spec: &ModelSpec,
    params: &ParamSet,
    k: usize,
    per_cluster: usize,
    seed: u64,
) -> Result<PairSet> {
    if split.len() < k * per_cluster {
        return Err(Error::TooFewPoints {
            k: k * per_cluster,
            points: split.len(),
        });
    }
    let features = extract_features(spec, params, &split.images)?;
    let km = kmeans(&features, k, seed)?;
    let f = features.shape()[1];
    let mut items = Vec::with_capacity(k * per_cluster);
    for c in 0..k {
        let mut members: Vec<(f64, usize)> = (0..split.len())
            .filter(|&i| km.assignments[i] == c)
            .map(|i| {
                let d = sq_dist(
                    &features.data()[i * f..(i + 1) * f],
                    &km.centroids.data()[c * f..(c + 1) * f],
                );
                (d, i)
            })
            .collect();
        if members.len() < per_cluster {
            return Err(Error::ClusterTooSmall {
                cluster: c,
                members: members.len(),
                per_cluster,
            });
        }
        members.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for &(_, i) in members.iter().take(per_cluster) {
            let img = split.image(i);
            items.push(PairImage {
                dataset_index: i,
                label: split.labels[i],
                cluster: c,
                shape: img.shape().to_vec(),
                pixels: img.data().to_vec(),
            });
        }
    }
    let n = items.len();
    let mut pairs = Vec::with_capacity(n * (n - 1));
    for v in 0..n {
        for t in 0..n {
            if v != t {
                pairs.push((v, t));
            }
        }
    }
    Ok(PairSet {
        items,
        pairs,
        model_digest: params.digest(),
        k,
        per_cluster,
        seed,
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PairRecord {
    pub victim: usize,
    pub target: usize,
    pub expl_at_start: f64,
    pub expl_at_end: f64,
    pub prediction_preserved: bool,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    /// training-method label for the report row
    pub method: String,
    pub expl_at_start: f64,
    pub expl_at_end: f64,
    pub clean_acc: f64,
    pub adv_acc: f64,
    pub records: Vec<PairRecord>,
    /// per-pair attacks that errored and were excluded from the means
    pub failures: usize,
    pub config_digest: String,
}

fn split_accuracy(
    spec: &ModelSpec,
    params: &ParamSet,
    images: &Tensor,
    labels: &[usize],
) -> Result<f64> {
    let n = images.shape()[0];
    let per: usize = images.shape()[1..].iter().product();
    let mut correct = 0.0;
    let mut i = 0;
    while i < n {
        let end = (i + 64).min(n);
        let mut shape = vec![end - i];
        shape.extend_from_slice(&images.shape()[1..]);
        let batch = Tensor::new(shape, images.data()[i * per..end * per].to_vec())?;
        let logits = crate::nn::forward_tensors(spec, params, &batch)?;
        correct += accuracy(&logits, &labels[i..end]) * (end - i) as f64;
        i = end;
    }
    Ok(correct / n as f64)
}

/// The four metrics on a model: mean explanation loss across pairs before
/// and after the explanation attack, plus clean and adversarial accuracy
/// on the test split.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_robustness(
    spec: &ModelSpec,
    params: &ParamSet,
    pairset: &PairSet,
    test: &Dataset,
    method_label: &str,
    expl_method: ExplMethod,
    pgd: &PgdConfig,
    expl_cfg: &ExplAttackConfig,
    seed: u64,
) -> Result<EvalReport> {
    // one saliency map per item, class at the model's own prediction
    let maps: Vec<SaliencyMap> = pairset
        .items
        .iter()
        .map(|it| saliency(expl_method, spec, params, &it.image(), None))
        .collect::<Result<_>>()?;

    #[derive(Clone, Copy)]
    enum Outcome {
        Ok(PairRecord),
        Failed,
    }
    let outcomes: Vec<Outcome> = pairset
        .pairs
        .par_iter()
        .map(|&(v, t)| {
            let start = match explanation_loss_maps(&maps[v], &maps[t]) {
                Ok(s) => s,
                Err(_) => return Outcome::Failed,
            };
            match explanation_attack(
                spec,
                params,
                &pairset.items[v].image(),
                &maps[t],
                expl_method,
                expl_cfg,
            ) {
                Ok(res) => Outcome::Ok(PairRecord {
                    victim: v,
                    target: t,
                    expl_at_start: start,
                    expl_at_end: res.loss_at_end,
                    prediction_preserved: res.prediction_preserved,
                }),
                Err(_) => Outcome::Failed,
            }
        })
        .collect();

    let mut records = Vec::new();
    let mut failures = 0usize;
    for o in outcomes {
        match o {
            Outcome::Ok(r) => records.push(r),
            Outcome::Failed => failures += 1,
        }
    }
    if records.is_empty() {
        return Err(Error::Config(
            "every per-pair explanation attack failed".into(),
        ));
    }
    let m = records.len() as f64;
    let expl_at_start = kahan_sum(records.iter().map(|r| r.expl_at_start)) / m;
    let expl_at_end = kahan_sum(records.iter().map(|r| r.expl_at_end)) / m;

    let clean_acc = split_accuracy(spec, params, &test.images, &test.labels)?;
    let mut rng = rng_for(seed, "eval_attack");
    let mut cls_pgd = *pgd;
    cls_pgd.objective = PgdObjective::CrossEntropy;
    let n = test.len();
    let mut adv_correct = 0.0;
    let mut i = 0;
    while i < n {
        let end = (i + 64).min(n);
        let idx: Vec<usize> = (i..end).collect();
        let (batch, labels) = test.batch(&idx);
        let adv = pgd_attack(spec, params, &batch, &labels, &cls_pgd, &mut rng)?;
        let logits = crate::nn::forward_tensors(spec, params, &adv)?;
        adv_correct += accuracy(&logits, &labels) * (end - i) as f64;
        i = end;
    }
    let adv_acc = adv_correct / n as f64;

    let mut digest_src = params.digest();
    digest_src.push_str(method_label);
    Ok(EvalReport {
        method: method_label.to_string(),
        expl_at_start,
        expl_at_end,
        clean_acc,
        adv_acc,
        records,
        failures,
        config_digest: digest_src,
    })
}

/// CSV with the exact column names `method, expl_at_start, expl_at_end,
/// clean_acc, adv_acc`, one row per report.
pub fn write_report_csv(reports: &[EvalReport], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "method,expl_at_start,expl_at_end,clean_acc,adv_acc")?;
    for r in reports {
        writeln!(
            f,
            "{},{:e},{:e},{:e},{:e}",
            r.method, r.expl_at_start, r.expl_at_end, r.clean_acc, r.adv_acc
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::explain::ExplKind;
    use crate::nn::{build_model, Layer};

    fn flat_identity_spec(side: usize, classes: usize) -> ModelSpec {
        ModelSpec {
            input: (1, side, side),
            classes,
            layers: vec![Layer::Flatten, Layer::Linear { out_features: classes }],
        }
    }

    fn tiny_spec(side: usize, classes: usize) -> ModelSpec {
        ModelSpec {
            input: (1, side, side),
            classes,
            layers: vec![
                Layer::Conv2d {
                    out_channels: 3,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
                Layer::Softplus { beta: 1.0 },
                Layer::Flatten,
                Layer::Linear { out_features: classes },
            ],
        }
    }

    #[test]
    fn features_of_flatten_linear_model_are_the_pixels() {
        let spec = flat_identity_spec(4, 3);
        let params = build_model(&spec, 1).unwrap();
        let ds = synth_blobs(3, 2, 4, 0.05, 2);
        let feats = extract_features(&spec, &params, &ds.images).unwrap();
        assert_eq!(feats.shape(), &[6, 16]);
        assert_eq!(feats.data(), ds.images.data());
    }

    #[test]
    fn identical_images_give_identical_feature_rows() {
        let spec = tiny_spec(6, 2);
        let params = build_model(&spec, 2).unwrap();
        let ds = synth_blobs(2, 3, 6, 0.0, 1); // zero noise: templates repeat
        let feats = extract_features(&spec, &params, &ds.images).unwrap();
        let f = feats.shape()[1];
        assert_eq!(&feats.data()[0..f], &feats.data()[f..2 * f]);
    }

    #[test]
    fn kmeans_separates_two_blobs() {
        let pts = Tensor::new(vec![4, 1], vec![0.0, 0.1, 10.0, 10.1]).unwrap();
        let km = kmeans(&pts, 2, 3).unwrap();
        assert_eq!(km.assignments[0], km.assignments[1]);
        assert_eq!(km.assignments[2], km.assignments[3]);
        assert_ne!(km.assignments[0], km.assignments[2]);
    }

    #[test]
    fn kmeans_k_equals_n_is_zero_inertia() {
        let pts = Tensor::new(vec![3, 2], vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let km = kmeans(&pts, 3, 4).unwrap();
        assert_eq!(km.inertia, 0.0);
        let mut sorted = km.assignments.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2]);
    }

    #[test]
    fn kmeans_rejects_k_above_points() {
        let pts = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        assert!(matches!(
            kmeans(&pts, 3, 0),
            Err(Error::TooFewPoints { k: 3, points: 2 })
        ));
    }

    #[test]
    fn kmeans_inertia_is_non_increasing() {
        let ds = synth_blobs(4, 15, 5, 0.1, 17);
        let feats = Tensor::new(
            vec![60, 25],
            ds.images.data().to_vec(),
        )
        .unwrap();
        let km = kmeans(&feats, 4, 5).unwrap();
        for w in km.inertia_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "inertia rose: {:?}", w);
        }
    }

    #[test]
    fn kmeans_close_to_multi_restart_oracle() {
        // 60 random 2-D points; oracle = best of 50 plain random-init Lloyd
        // restarts written out independently here
        let mut rng = rng_for(99, "oracle");
        let data: Vec<f64> = (0..120).map(|_| rng.gen::<f64>()).collect();
        let pts = Tensor::new(vec![60, 2], data.clone()).unwrap();
        let mut best = f64::INFINITY;
        for _ in 0..50 {
            // random initial centroids from the points
            let mut cents: Vec<Vec<f64>> = (0..3)
                .map(|_| {
                    let i = rng.gen_range(0..60);
                    data[i * 2..i * 2 + 2].to_vec()
                })
                .collect();
            let mut inertia = f64::INFINITY;
            for _ in 0..100 {
                let (asn, inn) = super::assign(&pts, &cents);
                inertia = inn;
                let mut sums = vec![vec![0.0; 2]; 3];
                let mut counts = vec![0usize; 3];
                for i in 0..60 {
                    counts[asn[i]] += 1;
                    sums[asn[i]][0] += data[i * 2];
                    sums[asn[i]][1] += data[i * 2 + 1];
                }
                for c in 0..3 {
                    if counts[c] > 0 {
                        cents[c][0] = sums[c][0] / counts[c] as f64;
                        cents[c][1] = sums[c][1] / counts[c] as f64;
                    }
                }
            }
            best = best.min(inertia);
        }
        let km = kmeans(&pts, 3, 12).unwrap();
        assert!(
            km.inertia <= 1.05 * best,
            "kmeans inertia {} vs oracle {}",
            km.inertia,
            best
        );
    }

    #[test]
    fn select_pairs_counts_and_membership() {
        let spec = tiny_spec(6, 3);
        let params = build_model(&spec, 3).unwrap();
        let ds = synth_blobs(3, 8, 6, 0.08, 21);
        let ps = select_pairs(&ds, &spec, &params, 3, 2, 7).unwrap();
        assert_eq!(ps.items.len(), 6);
        assert_eq!(ps.pairs.len(), 6 * 5);
        // each selected image really is among the per_cluster nearest of
        // its cluster
        let feats = extract_features(&spec, &params, &ds.images).unwrap();
        let km = kmeans(&feats, 3, 7).unwrap();
        let f = feats.shape()[1];
        for item in &ps.items {
            let c = item.cluster;
            let my_d = sq_dist(
                &feats.data()[item.dataset_index * f..(item.dataset_index + 1) * f],
                &km.centroids.data()[c * f..(c + 1) * f],
            );
            let closer = (0..ds.len())
                .filter(|&i| km.assignments[i] == c)
                .filter(|&i| {
                    let d = sq_dist(
                        &feats.data()[i * f..(i + 1) * f],
                        &km.centroids.data()[c * f..(c + 1) * f],
                    );
                    d < my_d
                })
                .count();
            assert!(closer < ps.per_cluster);
        }
    }

    #[test]
    fn select_pairs_two_images_two_ordered_pairs() {
        let spec = tiny_spec(6, 2);
        let params = build_model(&spec, 4).unwrap();
        let ds = synth_blobs(2, 5, 6, 0.08, 22);
        let ps = select_pairs(&ds, &spec, &params, 2, 1, 9).unwrap();
        assert_eq!(ps.items.len(), 2);
        assert_eq!(ps.pairs, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn select_pairs_deterministic_and_json_round_trip() {
        let spec = tiny_spec(6, 2);
        let params = build_model(&spec, 5).unwrap();
        let ds = synth_blobs(2, 6, 6, 0.08, 23);
        let a = select_pairs(&ds, &spec, &params, 2, 2, 11).unwrap();
        let b = select_pairs(&ds, &spec, &params, 2, 2, 11).unwrap();
        assert_eq!(
            a.items.iter().map(|i| i.dataset_index).collect::<Vec<_>>(),
            b.items.iter().map(|i| i.dataset_index).collect::<Vec<_>>()
        );
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pairs.json");
        a.save_json(&p).unwrap();
        let back = PairSet::load_json(&p).unwrap();
        assert_eq!(back.pairs, a.pairs);
        assert_eq!(back.items[0].pixels, a.items[0].pixels);
        assert_eq!(back.model_digest, a.model_digest);
    }

    #[test]
    fn cluster_too_small_is_reported() {
        let spec = tiny_spec(6, 2);
        let params = build_model(&spec, 6).unwrap();
        // nine near-duplicate images plus one far outlier: k-means with k = 2
        // isolates the outlier in a singleton cluster, which cannot supply
        // per_cluster = 2 representatives
        let n = 10;
        let side = 6;
        let mut pixels = vec![0.0f64; n * side * side];
        for (i, chunk) in pixels.chunks_mut(side * side).enumerate() {
            let base = if i == n - 1 { 0.9 } else { 0.2 };
            for (j, p) in chunk.iter_mut().enumerate() {
                *p = base + 1e-3 * ((i * 7 + j) % 5) as f64;
            }
        }
        let ds = Dataset {
            images: Tensor::new(vec![n, 1, side, side], pixels).unwrap(),
            labels: vec![0; n],
            classes: 2,
            source: "synth:outlier".to_string(),
        };
        match select_pairs(&ds, &spec, &params, 2, 2, 3) {
            Err(Error::ClusterTooSmall { per_cluster: 2, .. }) => {}
            other => panic!("expected ClusterTooSmall, got {:?}", other.map(|p| p.items.len())),
        }
    }

    #[test]
    fn zero_budget_evaluation_is_identity() {
        let spec = tiny_spec(6, 2);
        let params = build_model(&spec, 7).unwrap();
        let ds = synth_blobs(2, 5, 6, 0.08, 25);
        let ps = select_pairs(&ds, &spec, &params, 2, 1, 13).unwrap();
        let pgd = PgdConfig {
            epsilon: 0.0,
            steps: 3,
            step_size: 0.05,
            random_start: false,
            objective: PgdObjective::CrossEntropy,
        };
        let expl_cfg = ExplAttackConfig::new(0.0, 3);
        let report = evaluate_robustness(
            &spec,
            &params,
            &ps,
            &ds,
            "normal",
            ExplMethod::new(ExplKind::Gradient),
            &pgd,
            &expl_cfg,
            1,
        )
        .unwrap();
        assert_eq!(report.expl_at_start, report.expl_at_end);
        assert_eq!(report.clean_acc, report.adv_acc);
        assert_eq!(report.failures, 0);
    }

    #[test]
    fn report_means_match_records_and_end_below_start() {
        let spec = tiny_spec(6, 3);
        let params = build_model(&spec, 8).unwrap();
        let ds = synth_blobs(3, 4, 6, 0.08, 26);
        let ps = select_pairs(&ds, &spec, &params, 3, 1, 14).unwrap();
        let pgd = PgdConfig::new(0.1, 3, PgdObjective::CrossEntropy);
        let expl_cfg = ExplAttackConfig::new(0.1, 10);
        let report = evaluate_robustness(
            &spec,
            &params,
            &ps,
            &ds,
            "normal",
            ExplMethod::new(ExplKind::Gradient),
            &pgd,
            &expl_cfg,
            2,
        )
        .unwrap();
        let m = report.records.len() as f64;
        let start = kahan_sum(report.records.iter().map(|r| r.expl_at_start)) / m;
        let end = kahan_sum(report.records.iter().map(|r| r.expl_at_end)) / m;
        assert!((report.expl_at_start - start).abs() < 1e-12);
        assert!((report.expl_at_end - end).abs() < 1e-12);
        assert!(report.expl_at_end <= report.expl_at_start);
        assert!((0.0..=1.0).contains(&report.clean_acc));
        assert!((0.0..=1.0).contains(&report.adv_acc));
    }

    #[test]
    fn report_csv_columns_are_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("report.csv");
        let r = EvalReport {
            method: "normal".into(),
            expl_at_start: 1.0,
            expl_at_end: 0.5,
            clean_acc: 0.9,
            adv_acc: 0.1,
            records: vec![],
            failures: 0,
            config_digest: "x".into(),
        };
        write_report_csv(&[r], &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("method,expl_at_start,expl_at_end,clean_acc,adv_acc\n"));
        assert!(text.contains("normal,1e0,5e-1,9e-1,1e-1"));
    }
}
