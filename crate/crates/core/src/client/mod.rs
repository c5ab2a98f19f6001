//! Client runtime: local FedProx training under a device envelope, feature
//! extraction with optional Gaussian noise, and upload packaging.

mod packet;

pub use packet::{
    compress, dequantize, float_wire_len, int8_wire_len, keep_count, quantize, FeaturePacket, Payload, Quantization,
    HEADER_LEN,
};

use crate::device::{battery_impact, peak_memory_mb, simulate_train_time, DeviceProfile, ResourceReport};
use crate::imaging::QualityTier;
use crate::nn::serialize::serialized_mb;
use crate::nn::{Mode, ModelParams, Network, NnError, Sgd, Tensor};
use crate::partition::ClientDataset;
use crate::privacy::{clip_features, gaussian_mechanism, round_epsilon, ClientBudget, PrivacyConfig};
use rand::seq::SliceRandom;
use rand::Rng;
use std::sync::Arc;
use thiserror::Error;

/// FedProx coefficients for low, medium and high tiers.
pub const DEFAULT_MU: [f64; 3] = [0.01, 0.005, 0.003];
/// Local SGD settings.
pub const LOCAL_LR: f64 = 0.01;
pub const LOCAL_MOMENTUM: f64 = 0.9;
/// Share of each client's data held out for local accuracy.
pub const HOLDOUT_SHARE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("client {client_id}: model needs {model_mb:.3} MiB but the device allows {limit_mb} MiB")]
    ModelTooLarge { client_id: usize, model_mb: f64, limit_mb: f64 },
    #[error("client {0} has no training examples")]
    EmptyDataset(usize),
    #[error("client {client_id}: privacy is on but the features were not noised")]
    UnnoisedUpload { client_id: usize },
    #[error("corrupt packet: {0}")]
    Corrupt(String),
    #[error("invalid client setting: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Debug)]
pub struct ClientState {
    pub dataset: ClientDataset,
    pub profile: DeviceProfile,
    pub net: Arc<Network>,
    pub params: ModelParams<f32>,
    pub prev_params: ModelParams<f32>,
    /// Local holdout accuracy after each round this client trained in.
    pub history: Vec<f64>,
    inputs: Vec<f32>,
    train_idx: Vec<usize>,
    holdout_idx: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalOutcome {
    pub accuracy: f64,
    pub loss: f64,
    pub mu: f64,
    pub report: ResourceReport,
}

impl ClientState {
    /// Wraps a dataset and its starting parameters. The holdout split is drawn
    /// once from `rng`.
    pub fn new<R: Rng + ?Sized>(
        dataset: ClientDataset,
        profile: DeviceProfile,
        net: Arc<Network>,
        params: ModelParams<f32>,
        rng: &mut R,
    ) -> Result<Self, ClientError> {
        let model_mb = serialized_mb(&net);
        if model_mb > profile.max_model_mb {
            return Err(ClientError::ModelTooLarge {
                client_id: dataset.client_id,
                model_mb,
                limit_mb: profile.max_model_mb,
            });
        }
        if params.values.len() != net.param_count() || params.buffers.len() != net.buffer_count() {
            return Err(NnError::ShapeMismatch {
                expected: format!("{} params", net.param_count()),
                actual: format!("{}", params.values.len()),
            }
            .into());
        }
        let n = dataset.size();
        if n == 0 {
            return Err(ClientError::EmptyDataset(dataset.client_id));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let n_hold = if n >= 2 { ((n as f64 * HOLDOUT_SHARE).round() as usize).clamp(1, n - 1) } else { 0 };
        let holdout_idx = order[..n_hold].to_vec();
        let train_idx = order[n_hold..].to_vec();
        let inputs = dataset
            .examples
            .iter()
            .flat_map(|e| e.image.pixels().iter().map(|v| *v as f32))
            .collect();
        Ok(Self {
            dataset,
            profile,
            prev_params: params.clone(),
            params,
            net,
            history: Vec::new(),
            inputs,
            train_idx,
            holdout_idx,
        })
    }

    pub fn client_id(&self) -> usize {
        self.dataset.client_id
    }

    pub fn tier(&self) -> QualityTier {
        self.dataset.tier
    }

    pub fn train_len(&self) -> usize {
        self.train_idx.len()
    }

    fn batch_of(&self, idx: &[usize]) -> Result<(Tensor<f32>, Vec<usize>), NnError> {
        let item = self.net.input_len();
        let mut x = Vec::with_capacity(idx.len() * item);
        for &i in idx {
            x.extend_from_slice(&self.inputs[i * item..(i + 1) * item]);
        }
        let labels = idx.iter().map(|i| self.dataset.examples[*i].label).collect();
        Ok((Tensor::new(vec![idx.len(), item], x)?, labels))
    }

    /// Accuracy of the current parameters on the holdout split.
    pub fn holdout_accuracy(&self) -> Result<f64, ClientError> {
        if self.holdout_idx.is_empty() {
            return Ok(0.0);
        }
        let (x, y) = self.batch_of(&self.holdout_idx)?;
        let out = self.net.infer(&self.params, &x, 64)?;
        Ok(accuracy(out.logits.data(), &y, self.net.spec().num_classes))
    }

    /// One round of local training. The proximal term is active from round 2.
    pub fn local_train<R: Rng>(
        &mut self,
        round: usize,
        mu_by_tier: [f64; 3],
        rng: &mut R,
    ) -> Result<LocalOutcome, ClientError> {
        if self.train_idx.is_empty() {
            return Err(ClientError::EmptyDataset(self.client_id()));
        }
        let mu = if round > 1 { mu_by_tier[self.tier().index()] } else { 0.0 };
        let batch = self.profile.max_batch.max(1);
        let epochs = self.profile.max_epochs;
        let l2 = self.net.spec().l2_lambda;
        self.prev_params = self.params.clone();
        let anchor = self.prev_params.values.clone();
        let mut opt = Sgd::new(self.net.param_count(), LOCAL_LR, LOCAL_MOMENTUM);
        let mut order = self.train_idx.clone();
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for _ in 0..epochs {
            order.shuffle(rng);
            for chunk in order.chunks(batch) {
                let (x, y) = self.batch_of(chunk)?;
                let mut bufs = self.params.buffers.clone();
                let (loss, grad, _) = self.net.loss_and_gradient(
                    &self.params,
                    Some(&mut bufs),
                    &x,
                    &y,
                    Some(&anchor),
                    mu,
                    l2,
                    Mode::Train(rng),
                )?;
                self.params.buffers = bufs;
                opt.step(&mut self.params.values, &grad);
                loss_sum += loss as f64;
                steps += 1;
            }
        }
        let accuracy = self.holdout_accuracy()?;
        self.history.push(accuracy);
        let n_batches = self.train_idx.len().div_ceil(batch);
        let train_time_s = simulate_train_time(&self.profile, n_batches, epochs);
        let battery_pct = battery_impact(self.profile.power_mw, train_time_s / 3600.0, self.profile.battery_mah)
            .expect("default profiles have positive capacity");
        let report = ResourceReport {
            train_time_s,
            battery_pct,
            peak_memory_mb: peak_memory_mb(&self.net, batch),
            bytes_up: 0,
        };
        Ok(LocalOutcome { accuracy, loss: loss_sum / steps.max(1) as f64, mu, report })
    }

    /// Eval-mode features for every local example, as `[n · dim]` values.
    pub fn raw_features(&self) -> Result<Vec<f32>, ClientError> {
        let all: Vec<usize> = (0..self.dataset.size()).collect();
        let (x, _) = self.batch_of(&all)?;
        Ok(self.net.infer(&self.params, &x, 64)?.features.into_data())
    }

    /// Extracts one feature vector per local example. With privacy on, each
    /// vector is clipped and noised and the round's epsilon is charged; a
    /// client whose budget is exhausted, or would be by this release, skips.
    pub fn extract_features<R: Rng + ?Sized>(
        &self,
        round: usize,
        privacy: &PrivacyConfig,
        budget: &ClientBudget,
        rng: &mut R,
    ) -> Result<FeaturePacket, ClientError> {
        let tier = self.tier();
        let dim = self.net.feature_dim();
        let labels: Vec<u8> = self.dataset.examples.iter().map(|e| e.label as u8).collect();
        if !privacy.enabled {
            let features = self.raw_features()?;
            return FeaturePacket::new(self.client_id(), round, tier, dim, features, labels, 0.0, false, privacy);
        }
        let eps = round_epsilon(labels.len(), privacy.sigma(tier), privacy.delta);
        let cap = privacy.max_eps(tier);
        if budget.exhausted || budget.prospective(eps, privacy.composer, privacy.delta) > cap {
            return Ok(FeaturePacket::skip(self.client_id(), round, tier, dim));
        }
        let raw = self.raw_features()?;
        let (c, sigma) = (privacy.clip_norm(tier), privacy.sigma(tier));
        let mut noised = Vec::with_capacity(raw.len());
        for v in raw.chunks(dim) {
            let f: Vec<f64> = v.iter().map(|x| *x as f64).collect();
            let out = gaussian_mechanism(&clip_features(&f, c), sigma, c, rng);
            noised.extend(out.into_iter().map(|x| x as f32));
        }
        FeaturePacket::new(self.client_id(), round, tier, dim, noised, labels, eps, true, privacy)
    }
}

/// Top-1 accuracy of `[n, classes]` logits; ties go to the lowest class.
pub fn accuracy<T: PartialOrd + Copy>(logits: &[T], labels: &[usize], classes: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = logits
        .chunks(classes)
        .zip(labels)
        .filter(|(row, y)| argmax(row) == **y)
        .count();
    correct as f64 / labels.len() as f64
}

pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
