//! Server side: client selection, quality weights, the fusion classifier
//! trained by distillation, parameter momentum and central evaluation.

use crate::client::argmax;
use crate::imaging::QualityTier;
use crate::nn::loss::{distillation_kl, weighted_cross_entropy};
use crate::nn::{matmul, Mat, ModelParams, Network, NnError, Sgd, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FUSION_DIM: usize = 64;
pub const HEAD_HIDDEN: usize = 64;
pub const INITIAL_WEIGHTS: [f64; 3] = [0.6, 0.8, 1.0];

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("no eligible clients to select from")]
    NoEligibleClients,
    #[error("no training samples reached the server")]
    EmptyTrainingSet,
    #[error("no evaluation extractor available")]
    NoExtractors,
    #[error("feature dimension {actual} does not match tier {tier} ({expected})")]
    DimMismatch { tier: QualityTier, expected: usize, actual: usize },
    #[error("parameter vectors differ in length ({0} vs {1})")]
    ShapeMismatch(usize, usize),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityWeights(pub [f64; 3]);

impl Default for QualityWeights {
    fn default() -> Self {
        Self(INITIAL_WEIGHTS)
    }
}

impl QualityWeights {
    pub fn get(&self, tier: QualityTier) -> f64 {
        self.0[tier.index()]
    }
}

/// `w ← α·w + (1 − α)·acc` per tier, clamped to [0, 1]. Tiers without an
/// accuracy this round keep their weight.
pub fn update_quality_weights(weights: QualityWeights, avg_accuracy: [Option<f64>; 3], alpha: f64) -> QualityWeights {
    let mut w = weights.0;
    for (wi, acc) in w.iter_mut().zip(avg_accuracy) {
        if let Some(a) = acc {
            *wi = (alpha * *wi + (1.0 - alpha) * a).clamp(0.0, 1.0);
        }
    }
    QualityWeights(w)
}

/// `θ_t + β(θ_t − θ_prev)`.
pub fn apply_momentum(theta: &[f64], theta_prev: &[f64], beta: f64) -> Result<Vec<f64>, ServerError> {
    if theta.len() != theta_prev.len() {
        return Err(ServerError::ShapeMismatch(theta.len(), theta_prev.len()));
    }
    Ok(theta.iter().zip(theta_prev).map(|(t, p)| t + beta * (t - p)).collect())
}

/// A client the selector may choose.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub client_id: usize,
    pub tier: QualityTier,
    pub size: usize,
    /// Local accuracy after each round the client took part in.
    pub history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientScore {
    pub client_id: usize,
    pub perf_ema: f64,
    pub data_term: f64,
    pub trend: f64,
    pub diversity_bonus: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub round: usize,
    pub scores: Vec<ClientScore>,
    pub selected: Vec<usize>,
}

/// Exponentially weighted accuracy, each new value taking half the weight.
pub fn accuracy_ema(history: &[f64]) -> Option<f64> {
    let (first, rest) = history.split_first()?;
    Some(rest.iter().fold(*first, |e, a| 0.5 * e + 0.5 * a))
}

fn score_candidates(cands: &[Candidate]) -> Vec<ClientScore> {
    let max_size = cands.iter().map(|c| c.size).max().unwrap_or(1).max(1) as f64;
    let known: Vec<f64> = cands.iter().filter_map(|c| accuracy_ema(&c.history)).collect();
    let fallback = if known.is_empty() { 0.0 } else { known.iter().sum::<f64>() / known.len() as f64 };
    cands
        .iter()
        .map(|c| {
            let perf_ema = accuracy_ema(&c.history).unwrap_or(fallback);
            let data_term = c.size as f64 / max_size;
            let trend = match c.history.as_slice() {
                [.., prev, last] => (last - prev + 0.5).clamp(0.0, 1.0),
                _ => 0.5,
            };
            let diversity_bonus = 1.0 / (1.0 + c.history.len() as f64);
            let total = 0.4 * perf_ema + 0.2 * data_term + 0.2 * trend + 0.2 * diversity_bonus;
            ClientScore { client_id: c.client_id, perf_ema, data_term, trend, diversity_bonus, total }
        })
        .collect()
}

/// Picks `⌈fraction · |candidates|⌉` clients: uniformly in round 1, by score
/// afterwards. Every tier with a candidate keeps at least one seat.
pub fn select_clients<R: Rng + ?Sized>(
    candidates: &[Candidate],
    fraction: f64,
    round: usize,
    rng: &mut R,
) -> Result<SelectionRecord, ServerError> {
    if candidates.is_empty() {
        return Err(ServerError::NoEligibleClients);
    }
    assert!(fraction > 0.0 && fraction <= 1.0, "selection fraction must lie in (0, 1]");
    let k = ((fraction * candidates.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let k = k.min(candidates.len());
    let scores = score_candidates(candidates);
    // random tiebreak keys, drawn in candidate order
    let keys: Vec<u64> = candidates.iter().map(|_| rng.random()).collect();
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    if round <= 1 {
        order.shuffle(rng);
    } else {
        order.sort_by(|&a, &b| scores[b].total.total_cmp(&scores[a].total).then(keys[a].cmp(&keys[b])));
    }
    let mut chosen: Vec<usize> = order[..k].to_vec();
    for tier in QualityTier::ALL {
        if chosen.iter().any(|i| candidates[*i].tier == tier) {
            continue;
        }
        let Some(best) = order.iter().copied().find(|i| candidates[*i].tier == tier) else {
            continue;
        };
        let count = |t: QualityTier, chosen: &[usize]| chosen.iter().filter(|i| candidates[**i].tier == t).count();
        // replace the lowest-ranked pick whose tier can spare a seat
        if let Some(pos) = (0..chosen.len()).rev().find(|p| count(candidates[chosen[*p]].tier, &chosen) > 1) {
            chosen[pos] = best;
        }
    }
    let mut selected: Vec<usize> = chosen.iter().map(|i| candidates[*i].client_id).collect();
    selected.sort_unstable();
    Ok(SelectionRecord { round, scores, selected })
}

/// One training or evaluation sample as seen by the server.
#[derive(Clone, Debug, PartialEq)]
pub struct ServerSample {
    pub tier: QualityTier,
    pub features: Vec<f64>,
    pub label: usize,
}

/// Per-tier projections into a shared fusion space followed by a two-layer
/// head. Parameters live in one flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ServerModel {
    pub dims: [usize; 3],
    pub fusion: usize,
    pub hidden: usize,
    pub classes: usize,
    pub params: Vec<f64>,
}

struct Offsets {
    proj: [(usize, usize); 3],
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    total: usize,
}

impl ServerModel {
    pub fn new<R: Rng + ?Sized>(dims: [usize; 3], classes: usize, rng: &mut R) -> Self {
        let mut m = Self { dims, fusion: FUSION_DIM, hidden: HEAD_HIDDEN, classes, params: Vec::new() };
        let o = m.offsets();
        m.params = vec![0.0; o.total];
        let mut he = |start: usize, rows: usize, cols: usize, params: &mut [f64]| {
            let std = (2.0 / cols as f64).sqrt();
            for v in &mut params[start..start + rows * cols] {
                let z: f64 = rng.sample(StandardNormal);
                *v = std * z;
            }
        };
        for (t, d) in dims.iter().enumerate() {
            he(o.proj[t].0, m.fusion, *d, &mut m.params);
        }
        he(o.w1, m.hidden, m.fusion, &mut m.params);
        he(o.w2, m.classes, m.hidden, &mut m.params);
        m
    }

    /// Default dims follow the tier feature layers.
    pub fn for_tiers<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::new([16, 32, 64], 10, rng)
    }

    fn offsets(&self) -> Offsets {
        let mut at = 0;
        let mut proj = [(0, 0); 3];
        for (t, d) in self.dims.iter().enumerate() {
            proj[t] = (at, at + self.fusion * d);
            at += self.fusion * d + self.fusion;
        }
        let w1 = at;
        let b1 = w1 + self.hidden * self.fusion;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.classes * self.hidden;
        Offsets { proj, w1, b1, w2, b2, total: b2 + self.classes }
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Projection `[fusion, dim]` weights and bias of `tier`.
    pub fn projection(&self, tier: QualityTier) -> (&[f64], &[f64]) {
        let (w, b) = self.offsets().proj[tier.index()];
        (&self.params[w..b], &self.params[b..b + self.fusion])
    }

    pub fn projection_mut(&mut self, tier: QualityTier) -> &mut [f64] {
        let (w, b) = self.offsets().proj[tier.index()];
        &mut self.params[w..b + self.fusion]
    }

    /// `w_tier · project_tier(f)` for each sample, as `[n, fusion]`.
    pub fn fused(&self, samples: &[ServerSample], weights: &QualityWeights) -> Result<Vec<f64>, ServerError> {
        let f = self.fusion;
        let mut z = vec![0.0; samples.len() * f];
        for tier in QualityTier::ALL {
            let idx: Vec<usize> = (0..samples.len()).filter(|i| samples[*i].tier == tier).collect();
            if idx.is_empty() {
                continue;
            }
            let d = self.dims[tier.index()];
            let mut x = Vec::with_capacity(idx.len() * d);
            for &i in &idx {
                if samples[i].features.len() != d {
                    return Err(ServerError::DimMismatch { tier, expected: d, actual: samples[i].features.len() });
                }
                x.extend_from_slice(&samples[i].features);
            }
            let (w, b) = self.projection(tier);
            let mut out = vec![0.0; idx.len() * f];
            matmul(Mat::new(&x, idx.len(), d), Mat::new(w, f, d).t(), &mut out, false);
            let wt = weights.get(tier);
            for (row, &i) in out.chunks(f).zip(&idx) {
                for j in 0..f {
                    z[i * f + j] = wt * (row[j] + b[j]);
                }
            }
        }
        Ok(z)
    }

    /// Head applied to fused vectors: returns hidden activations and logits.
    fn head(&self, z: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
        let o = self.offsets();
        let (f, h, k) = (self.fusion, self.hidden, self.classes);
        let p = &self.params;
        let mut hid = vec![0.0; n * h];
        matmul(Mat::new(z, n, f), Mat::new(&p[o.w1..o.b1], h, f).t(), &mut hid, false);
        for row in hid.chunks_mut(h) {
            for (v, b) in row.iter_mut().zip(&p[o.b1..o.w2]) {
                *v = (*v + b).max(0.0);
            }
        }
        let mut logits = vec![0.0; n * k];
        matmul(Mat::new(&hid, n, h), Mat::new(&p[o.w2..o.b2], k, h).t(), &mut logits, false);
        for row in logits.chunks_mut(k) {
            for (v, b) in row.iter_mut().zip(&p[o.b2..o.total]) {
                *v += b;
            }
        }
        (hid, logits)
    }

    /// Logits `head(w_tier · project_tier(f))`, as `[n, classes]`.
    pub fn fuse(&self, samples: &[ServerSample], weights: &QualityWeights) -> Result<Vec<f64>, ServerError> {
        let z = self.fused(samples, weights)?;
        Ok(self.head(&z, samples.len()).1)
    }

    /// Gradient of the per-sample losses whose logit gradient is `dlogits`.
    fn backward(&self, samples: &[ServerSample], weights: &QualityWeights, z: &[f64], hid: &[f64], dlogits: &[f64]) -> Vec<f64> {
        let o = self.offsets();
        let (n, f, h, k) = (samples.len(), self.fusion, self.hidden, self.classes);
        let p = &self.params;
        let mut g = vec![0.0; o.total];
        matmul(Mat::new(dlogits, n, k).t(), Mat::new(hid, n, h), &mut g[o.w2..o.b2], false);
        for row in dlogits.chunks(k) {
            for (gb, d) in g[o.b2..o.total].iter_mut().zip(row) {
                *gb += d;
            }
        }
        let mut dh = vec![0.0; n * h];
        matmul(Mat::new(dlogits, n, k), Mat::new(&p[o.w2..o.b2], k, h), &mut dh, false);
        dh.iter_mut().zip(hid).for_each(|(d, a)| {
            if *a <= 0.0 {
                *d = 0.0;
            }
        });
        matmul(Mat::new(&dh, n, h).t(), Mat::new(z, n, f), &mut g[o.w1..o.b1], false);
        for row in dh.chunks(h) {
            for (gb, d) in g[o.b1..o.w2].iter_mut().zip(row) {
                *gb += d;
            }
        }
        let mut dz = vec![0.0; n * f];
        matmul(Mat::new(&dh, n, h), Mat::new(&p[o.w1..o.b1], h, f), &mut dz, false);
        for tier in QualityTier::ALL {
            let idx: Vec<usize> = (0..n).filter(|i| samples[*i].tier == tier).collect();
            if idx.is_empty() {
                continue;
            }
            let d = self.dims[tier.index()];
            let wt = weights.get(tier);
            let mut x = Vec::with_capacity(idx.len() * d);
            let mut dp = Vec::with_capacity(idx.len() * f);
            for &i in &idx {
                x.extend_from_slice(&samples[i].features);
                dp.extend(dz[i * f..(i + 1) * f].iter().map(|v| v * wt));
            }
            let (w, b) = o.proj[tier.index()];
            matmul(Mat::new(&dp, idx.len(), f).t(), Mat::new(&x, idx.len(), d), &mut g[w..b], false);
            for row in dp.chunks(f) {
                for (gb, v) in g[b..b + f].iter_mut().zip(row) {
                    *gb += v;
                }
            }
        }
        g
    }

    /// Distillation objective on one batch and its gradient.
    pub fn loss_and_gradient(
        &self,
        samples: &[ServerSample],
        weights: &QualityWeights,
        teacher: Option<&ServerModel>,
        kd: &DistillConfig,
    ) -> Result<(f64, Vec<f64>), ServerError> {
        let n = samples.len();
        let z = self.fused(samples, weights)?;
        let (hid, logits) = self.head(&z, n);
        let k = self.classes;
        let logits_t = Tensor::new(vec![n, k], logits)?;
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let sample_w: Vec<f64> = samples.iter().map(|s| weights.get(s.tier)).collect();
        let (ce, dce) = weighted_cross_entropy(&logits_t, &labels, &sample_w)?;
        let (loss, dlogits) = match teacher {
            Some(t) if kd.alpha > 0.0 => {
                let tl = Tensor::new(vec![n, k], t.fuse(samples, weights)?)?;
                let (kl, dkl) = distillation_kl(&logits_t, &tl, kd.temperature, &sample_w)?;
                let a = kd.alpha;
                let d: Vec<f64> = dce.data().iter().zip(dkl.data()).map(|(c, k)| (1.0 - a) * c + a * k).collect();
                ((1.0 - a) * ce + a * kl, d)
            }
            _ => (ce, dce.into_data()),
        };
        Ok((loss, self.backward(samples, weights, &z, &hid, &dlogits)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub alpha: f64,
    pub temperature: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Momentum of the SGD optimizer within a round.
    pub sgd_momentum: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { alpha: 0.5, temperature: 2.0, epochs: 5, batch: 64, lr: 0.01, sgd_momentum: 0.9 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub loss: f64,
    pub train_accuracy: f64,
    pub samples: usize,
}

/// Trains `model` in place on `samples`, distilling from `teacher` when given.
pub fn train_server<R: Rng + ?Sized>(
    model: &mut ServerModel,
    samples: &[ServerSample],
    weights: &QualityWeights,
    teacher: Option<&ServerModel>,
    kd: &DistillConfig,
    rng: &mut R,
) -> Result<TrainMetrics, ServerError> {
    if samples.is_empty() {
        return Err(ServerError::EmptyTrainingSet);
    }
    let mut opt = Sgd::<f64>::new(model.param_count(), kd.lr, kd.sgd_momentum);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut last_loss = 0.0;
    for _ in 0..kd.epochs {
        order.shuffle(rng);
        let mut sum = 0.0;
        for chunk in order.chunks(kd.batch.max(1)) {
            let batch: Vec<ServerSample> = chunk.iter().map(|i| samples[*i].clone()).collect();
            let (loss, grad) = model.loss_and_gradient(&batch, weights, teacher, kd)?;
            opt.step(&mut model.params, &grad);
            sum += loss * chunk.len() as f64;
        }
        last_loss = sum / samples.len() as f64;
    }
    let logits = model.fuse(samples, weights)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    Ok(TrainMetrics {
        loss: last_loss,
        train_accuracy: crate::client::accuracy(&logits, &labels, model.classes),
        samples: samples.len(),
    })
}

/// A tier's evaluation backbone and its copy of the degraded test images.
pub struct EvalPipeline<'a> {
    pub tier: QualityTier,
    pub net: &'a Network,
    pub params: &'a ModelParams<f32>,
    /// `[n, 784]` test images degraded for this tier.
    pub inputs: &'a Tensor<f32>,
    /// Clip norm applied to extracted features, matching private uploads.
    pub clip_norm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Accuracy when only that tier's pipeline votes.
    pub single_tier: [Option<f64>; 3],
}

/// Classifies the test set by summing `w_tier`-weighted logits over the
/// available tier pipelines.
pub fn evaluate_server(
    model: &ServerModel,
    weights: &QualityWeights,
    labels: &[usize],
    pipelines: &[EvalPipeline<'_>],
) -> Result<EvalReport, ServerError> {
    if pipelines.is_empty() {
        return Err(ServerError::NoExtractors);
    }
    let n = labels.len();
    let k = model.classes;
    let mut votes = vec![0.0; n * k];
    let mut single_tier = [None; 3];
    for p in pipelines {
        let feats = p.net.infer(p.params, p.inputs, 256)?.features;
        let d = p.net.feature_dim();
        let samples: Vec<ServerSample> = feats
            .data()
            .chunks(d)
            .zip(labels)
            .map(|(f, y)| {
                let v: Vec<f64> = f.iter().map(|x| *x as f64).collect();
                let features = match p.clip_norm {
                    Some(c) => crate::privacy::clip_features(&v, c),
                    None => v,
                };
                ServerSample { tier: p.tier, features, label: *y }
            })
            .collect();
        let logits = model.fuse(&samples, weights)?;
        single_tier[p.tier.index()] = Some(crate::client::accuracy(&logits, labels, k));
        let w = weights.get(p.tier);
        votes.iter_mut().zip(&logits).for_each(|(v, l)| *v += w * l);
    }
    let correct = votes.chunks(k).zip(labels).filter(|(row, y)| argmax(row) == **y).count();
    Ok(EvalReport { accuracy: correct as f64 / n.max(1) as f64, single_tier })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelSpec;
    use crate::seed::seed_tree;
    use proptest::prelude::*;
    use rand::Rng;

    fn cand(id: usize, tier: QualityTier, size: usize, history: Vec<f64>) -> Candidate {
        Candidate { client_id: id, tier, size, history }
    }

    fn twenty() -> Vec<Candidate> {
        (0..20)
            .map(|i| {
                let tier = QualityTier::from_index(if i < 6 { 0 } else if i < 14 { 1 } else { 2 }).unwrap();
                cand(i, tier, 200 + i, vec![0.5])
            })
            .collect()
    }

    #[test]
    fn sixteen_of_twenty() {
        for round in [1, 2, 3] {
            let r = select_clients(&twenty(), 0.8, round, &mut seed_tree(1, &["sel"])).unwrap();
            assert_eq!(r.selected.len(), 16);
        }
    }

    #[test]
    fn equal_histories_rank_by_size() {
        let r = select_clients(&twenty(), 0.8, 2, &mut seed_tree(2, &["sel"])).unwrap();
        assert_eq!(r.selected, (4..20).collect::<Vec<_>>());
    }

    #[test]
    fn weak_tier_keeps_a_seat() {
        let mut c = twenty();
        for x in c.iter_mut().filter(|x| x.tier == QualityTier::Low) {
            x.history = vec![0.9, 0.0, 0.0, 0.0];
            x.size = 10;
        }
        let r = select_clients(&c, 0.5, 3, &mut seed_tree(3, &["sel"])).unwrap();
        assert_eq!(r.selected.len(), 10);
        assert!(r.selected.iter().any(|id| *id < 6));
    }

    #[test]
    fn empty_candidates_rejected() {
        assert!(matches!(select_clients(&[], 0.8, 1, &mut seed_tree(1, &["s"])), Err(ServerError::NoEligibleClients)));
    }

    #[test]
    fn weight_update_examples() {
        let w = update_quality_weights(QualityWeights([0.6, 0.8, 1.0]), [Some(0.3383), Some(0.8), Some(0.3074)], 0.3);
        assert!((w.0[0] - 0.41681).abs() < 1e-12);
        assert!((w.0[1] - 0.8).abs() < 1e-15);
        assert!((w.0[2] - 0.51518).abs() < 1e-12);
        let kept = update_quality_weights(w, [None, None, None], 0.3);
        assert_eq!(kept, w);
    }

    #[test]
    fn momentum_examples() {
        assert_eq!(apply_momentum(&[1.0], &[0.0], 0.9).unwrap(), vec![1.9]);
        assert_eq!(apply_momentum(&[0.3, 2.0], &[0.3, 2.0], 0.9).unwrap(), vec![0.3, 2.0]);
        assert_eq!(apply_momentum(&[0.3, 2.0], &[1.0, 1.0], 0.0).unwrap(), vec![0.3, 2.0]);
        assert!(apply_momentum(&[1.0], &[], 0.9).is_err());
    }

    fn sample(tier: QualityTier, dim: usize, seed: u64) -> ServerSample {
        let mut rng = seed_tree(seed, &["f"]);
        ServerSample { tier, features: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(), label: 3 }
    }

    #[test]
    fn zero_weight_gives_constant_logits() {
        let m = ServerModel::for_tiers(&mut seed_tree(1, &["m"]));
        let w = QualityWeights([0.0, 0.8, 1.0]);
        let a = m.fuse(&[sample(QualityTier::Low, 16, 1)], &w).unwrap();
        let b = m.fuse(&[sample(QualityTier::Low, 16, 2)], &w).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fused_vector_scales_with_weight() {
        let m = ServerModel::for_tiers(&mut seed_tree(1, &["m"]));
        let s = [sample(QualityTier::Medium, 32, 3)];
        let one = m.fused(&s, &QualityWeights([0.6, 0.4, 1.0])).unwrap();
        let two = m.fused(&s, &QualityWeights([0.6, 0.8, 1.0])).unwrap();
        assert!(one.iter().zip(&two).all(|(a, b)| *b == 2.0 * *a));
    }

    #[test]
    fn identical_projections_ignore_tier_label() {
        let mut m = ServerModel::new([8, 8, 8], 10, &mut seed_tree(4, &["m"]));
        let low = m.projection_mut(QualityTier::Low).to_vec();
        m.projection_mut(QualityTier::Medium).copy_from_slice(&low);
        m.projection_mut(QualityTier::High).copy_from_slice(&low);
        let w = QualityWeights([0.7; 3]);
        let base = sample(QualityTier::Low, 8, 5);
        let outs: Vec<Vec<f64>> = QualityTier::ALL
            .iter()
            .map(|t| m.fuse(&[ServerSample { tier: *t, ..base.clone() }], &w).unwrap())
            .collect();
        assert_eq!(outs[0], outs[1]);
        assert_eq!(outs[1], outs[2]);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let m = ServerModel::for_tiers(&mut seed_tree(1, &["m"]));
        let bad = [sample(QualityTier::High, 16, 1)];
        assert!(matches!(m.fuse(&bad, &QualityWeights::default()), Err(ServerError::DimMismatch { .. })));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = ServerModel::new([3, 4, 5], 4, &mut seed_tree(6, &["m"]));
        let teacher = ServerModel::new([3, 4, 5], 4, &mut seed_tree(7, &["m"]));
        let batch: Vec<ServerSample> = (0..6)
            .map(|i| {
                let tier = QualityTier::from_index(i % 3).unwrap();
                ServerSample { label: i % 4, ..sample(tier, m.dims[i % 3], i as u64) }
            })
            .collect();
        let w = QualityWeights([0.6, 0.8, 1.0]);
        let kd = DistillConfig::default();
        let (_, g) = m.loss_and_gradient(&batch, &w, Some(&teacher), &kd).unwrap();
        let mut probe = m.clone();
        let mut worst = 0.0f64;
        for i in (0..m.param_count()).step_by(7) {
            let base = m.params[i];
            probe.params[i] = base + 1e-5;
            let up = probe.loss_and_gradient(&batch, &w, Some(&teacher), &kd).unwrap().0;
            probe.params[i] = base - 1e-5;
            let dn = probe.loss_and_gradient(&batch, &w, Some(&teacher), &kd).unwrap().0;
            probe.params[i] = base;
            let fd = (up - dn) / 2e-5;
            let scale = fd.abs().max(g[i].abs());
            if scale > 1e-8 {
                worst = worst.max((fd - g[i]).abs() / scale);
            }
        }
        assert!(worst <= 1e-4, "{worst}");
    }

    #[test]
    fn zero_kd_alpha_is_plain_ce() {
        let m = ServerModel::for_tiers(&mut seed_tree(8, &["m"]));
        let t = ServerModel::for_tiers(&mut seed_tree(9, &["m"]));
        let batch = vec![sample(QualityTier::High, 64, 1), sample(QualityTier::Low, 16, 2)];
        let w = QualityWeights::default();
        let kd = DistillConfig { alpha: 0.0, ..DistillConfig::default() };
        assert_eq!(
            m.loss_and_gradient(&batch, &w, Some(&t), &kd).unwrap(),
            m.loss_and_gradient(&batch, &w, None, &kd).unwrap()
        );
        // a teacher equal to the student adds nothing but the (1−α) scaling
        let half = DistillConfig::default();
        let (with_self, _) = m.loss_and_gradient(&batch, &w, Some(&m), &half).unwrap();
        let (plain, _) = m.loss_and_gradient(&batch, &w, None, &half).unwrap();
        assert!((with_self - 0.5 * plain).abs() < 1e-12);
    }

    #[test]
    fn server_learns_separable_features() {
        let mut rng = seed_tree(10, &["data"]);
        let samples: Vec<ServerSample> = (0..600)
            .map(|i| {
                let label = i % 10;
                let tier = QualityTier::from_index(i % 3).unwrap();
                let d = [16, 32, 64][tier.index()];
                let features = (0..d).map(|j| if j % 10 == label { 1.0 } else { 0.0 } + rng.random_range(-0.2..0.2)).collect();
                ServerSample { tier, features, label }
            })
            .collect();
        let mut m = ServerModel::for_tiers(&mut seed_tree(10, &["m"]));
        let kd = DistillConfig { epochs: 15, ..DistillConfig::default() };
        let metrics = train_server(&mut m, &samples, &QualityWeights::default(), None, &kd, &mut rng).unwrap();
        assert!(metrics.train_accuracy > 0.9, "{}", metrics.train_accuracy);
    }

    #[test]
    fn untrained_server_is_near_chance() {
        let net = Network::new(ModelSpec::low()).unwrap();
        let params = net.init_params(&mut seed_tree(11, &["p"]));
        let data = crate::partition::synth_digits(1000, &mut seed_tree(11, &["d"]));
        let labels: Vec<usize> = data.iter().map(|e| e.label).collect();
        let x: Vec<f32> = data.iter().flat_map(|e| e.image.pixels().iter().map(|v| *v as f32)).collect();
        let inputs = Tensor::new(vec![1000, 784], x).unwrap();
        let m = ServerModel::for_tiers(&mut seed_tree(11, &["m"]));
        let p = EvalPipeline { tier: QualityTier::Low, net: &net, params: &params, inputs: &inputs, clip_norm: None };
        let r = evaluate_server(&m, &QualityWeights::default(), &labels, &[p]).unwrap();
        assert!((0.0..=0.2).contains(&r.accuracy), "{}", r.accuracy);
        // one pipeline: the vote is that pipeline
        assert_eq!(r.single_tier[0], Some(r.accuracy));
        assert!(matches!(evaluate_server(&m, &QualityWeights::default(), &labels, &[]), Err(ServerError::NoExtractors)));
    }

    proptest! {
        #[test]
        fn weight_update_contracts(w in 0.0f64..=1.0, acc in 0.0f64..=1.0) {
            let next = update_quality_weights(QualityWeights([w; 3]), [Some(acc); 3], 0.3);
            prop_assert!(((next.0[0] - acc).abs() - 0.3 * (w - acc).abs()).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&next.0[0]));
        }

        #[test]
        fn selection_constraints_hold(seed in 0u64..500, round in 1usize..5, frac in 0.2f64..=1.0) {
            let mut rng = seed_tree(seed, &["cands"]);
            let n = rng.random_range(3..30);
            let cands: Vec<Candidate> = (0..n)
                .map(|i| {
                    let tier = QualityTier::from_index(rng.random_range(0..3)).unwrap();
                    let h = (0..rng.random_range(0..4)).map(|_| rng.random::<f64>()).collect();
                    cand(i, tier, rng.random_range(10..500), h)
                })
                .collect();
            let r = select_clients(&cands, frac, round, &mut rng).unwrap();
            let k = ((frac * n as f64) - 1e-9).ceil().max(1.0) as usize;
            prop_assert_eq!(r.selected.len(), k);
            let tiers_present = QualityTier::ALL.iter().filter(|t| cands.iter().any(|c| c.tier == **t)).count();
            let tiers_chosen = QualityTier::ALL.iter().filter(|t| r.selected.iter().any(|id| cands[*id].tier == **t)).count();
            prop_assert_eq!(tiers_chosen, tiers_present.min(k));
        }
    }
}
