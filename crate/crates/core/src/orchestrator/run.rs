//! The federation round loop.

use super::config::{ConfigError, DataSource, RunConfig};
use crate::client::{compress, dequantize, ClientError, ClientState, FeaturePacket, LocalOutcome};
use crate::device::{transfer_time, DeviceProfile};
use crate::imaging::{QualityTier, QualityTransforms};
use crate::nn::serialize::serialized_len;
use crate::nn::{ModelParams, Network, NnError, Tensor};
use crate::partition::{load_mnist_idx, make_plan, synth_digits, FederationPlan, IdxError, LabeledExample, PartitionError};
use crate::privacy::{from_fixed, round_epsilon, secure_sum, to_fixed, PrivacyLedger, SecureAggError};
use crate::seed::seed_tree;
use crate::server::{
    apply_momentum, evaluate_server, select_clients, train_server, update_quality_weights, Candidate, EvalPipeline,
    QualityWeights, SelectionRecord, ServerError, ServerModel, ServerSample,
};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] IdxError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("image pipeline: {0}")]
    Image(#[from] crate::imaging::ImageError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoundStatus {
    Ok,
    /// Too many clients dropped for the masked sum; the server was not updated.
    Aborted,
}

/// One client's part in one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundRecord {
    pub round: usize,
    pub client_id: usize,
    pub tier: QualityTier,
    pub dropped: bool,
    pub skipped: bool,
    pub local_accuracy: f64,
    pub local_loss: f64,
    pub mu: f64,
    pub train_time_s: f64,
    pub battery_pct: f64,
    pub peak_memory_mb: f64,
    pub entries: usize,
    pub bytes_raw: u64,
    pub bytes_wire: u64,
    pub bytes_eval: u64,
    pub compression_ratio: f64,
    pub eps_round: f64,
    pub eps_total: f64,
    pub exhausted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLedger {
    pub round: usize,
    pub status: RoundStatus,
    pub server_accuracy: Option<f64>,
    pub single_tier_accuracy: [Option<f64>; 3],
    /// Mean holdout accuracy of the selected clients of each tier.
    pub tier_accuracy: [Option<f64>; 3],
    pub weights: [f64; 3],
    pub n_selected: usize,
    pub n_uploaded: usize,
    pub bytes_features: u64,
    pub bytes_eval: u64,
    pub bytes_total: u64,
    /// Mean feature-packet wire bytes over uploading clients.
    pub bytes_per_client: f64,
    pub battery_by_tier: [Option<f64>; 3],
    pub sim_seconds: f64,
    pub server_loss: Option<f64>,
    pub server_train_accuracy: Option<f64>,
    pub selection: SelectionRecord,
    pub clients: Vec<ClientRoundRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub gini: f64,
    pub tier_counts: [usize; 3],
    pub sizes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub config: RunConfig,
    pub plan: PlanSummary,
    pub rounds: Vec<RoundLedger>,
}

impl RunOutput {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.rounds.iter().rev().find_map(|r| r.server_accuracy)
    }
}

/// Training and test examples for a config.
pub fn load_data(cfg: &RunConfig) -> Result<(Vec<LabeledExample>, Vec<LabeledExample>), RunError> {
    Ok(match cfg.data_source {
        DataSource::Idx => (
            load_mnist_idx(&cfg.train_images, &cfg.train_labels, cfg.train_limit)?,
            load_mnist_idx(&cfg.test_images, &cfg.test_labels, cfg.test_limit)?,
        ),
        DataSource::Synthetic => (
            synth_digits(cfg.synthetic_train, &mut seed_tree(cfg.master_seed, &["synthetic", "train"])),
            synth_digits(cfg.synthetic_test, &mut seed_tree(cfg.master_seed, &["synthetic", "test"])),
        ),
    })
}

/// Test images degraded once per tier, as `[n, 784]` tensors.
pub fn degrade_test_set(test: &[LabeledExample], seed: u64) -> Result<Vec<Tensor<f32>>, RunError> {
    let transforms = QualityTransforms::default();
    QualityTier::ALL
        .par_iter()
        .map(|tier| {
            let mut rng = seed_tree(seed, &["test-degrade", tier.name()]);
            let mut data = Vec::with_capacity(test.len() * 784);
            let mut item = 0;
            for e in test {
                let img = transforms.degrade(&e.image, *tier, &mut rng)?;
                item = img.pixels().len();
                data.extend(img.pixels().iter().map(|v| *v as f32));
            }
            Ok(Tensor::new(vec![test.len(), item], data)?)
        })
        .collect()
}

/// Loads data from the config and runs every round.
pub fn run_federation(cfg: &RunConfig) -> Result<RunOutput, RunError> {
    cfg.validate()?;
    let (train, test) = load_data(cfg)?;
    run_with_data(cfg, &train, &test)
}

struct ClientWork {
    index: usize,
    outcome: LocalOutcome,
    packet: FeaturePacket,
}

pub fn run_with_data(cfg: &RunConfig, train: &[LabeledExample], test: &[LabeledExample]) -> Result<RunOutput, RunError> {
    cfg.validate()?;
    let seed = cfg.master_seed;
    let plan: FederationPlan = make_plan(train, &cfg.plan_config(), seed)?;
    let plan_summary = PlanSummary {
        gini: plan.gini,
        tier_counts: plan.tier_counts(),
        sizes: plan.clients.iter().map(|c| c.size()).collect(),
    };
    let privacy = cfg.privacy_config();
    let nets: Vec<Arc<Network>> = QualityTier::ALL
        .iter()
        .map(|t| Network::new(cfg.model_spec(*t)).map(Arc::new))
        .collect::<Result<_, _>>()?;
    let tier_init: Vec<ModelParams<f32>> = QualityTier::ALL
        .iter()
        .map(|t| nets[t.index()].init_params(&mut seed_tree(seed, &["init", t.name()])))
        .collect();
    let mut clients: Vec<ClientState> = plan
        .clients
        .into_iter()
        .map(|ds| {
            let t = ds.tier.index();
            let id = ds.client_id.to_string();
            ClientState::new(
                ds,
                DeviceProfile::default_for(QualityTier::ALL[t]),
                nets[t].clone(),
                tier_init[t].clone(),
                &mut seed_tree(seed, &["split", &id]),
            )
        })
        .collect::<Result<_, _>>()?;
    let test_inputs = if cfg.eval_extractors && !test.is_empty() { degrade_test_set(test, seed)? } else { Vec::new() };
    let test_labels: Vec<usize> = test.iter().map(|e| e.label).collect();
    let dims = [0, 1, 2].map(|t| nets[t].feature_dim());
    let mut server = ServerModel::new(dims, 10, &mut seed_tree(seed, &["server-init"]));
    let mut weights = if cfg.weighted() { QualityWeights(cfg.initial_weights) } else { QualityWeights([1.0; 3]) };
    let mut ledger = PrivacyLedger::default();
    let mut last_tier_acc: [Option<f64>; 3] = [None; 3];
    let mut last_extractors: [Option<ModelParams<f32>>; 3] = [None, None, None];
    let distill = cfg.distill();
    let mut rounds = Vec::with_capacity(cfg.rounds);

    for t in 1..=cfg.rounds {
        let round = t.to_string();
        if t > 1 && cfg.weighted() {
            weights = update_quality_weights(weights, last_tier_acc, cfg.alpha);
        }
        let candidates: Vec<Candidate> = clients
            .iter()
            .filter(|c| {
                if !privacy.enabled {
                    return true;
                }
                let b = ledger.budget(c.client_id());
                let eps = round_epsilon(c.dataset.size(), privacy.sigma(c.tier()), privacy.delta);
                !b.exhausted && b.prospective(eps, privacy.composer, privacy.delta) <= privacy.max_eps(c.tier())
            })
            .map(|c| Candidate { client_id: c.client_id(), tier: c.tier(), size: c.dataset.size(), history: c.history.clone() })
            .collect();
        let selection = select_clients(&candidates, cfg.selection_fraction, t, &mut seed_tree(seed, &["round", &round, "select"]))?;
        let chosen: BTreeSet<usize> = selection.selected.iter().copied().collect();

        let mu = cfg.mu();
        let work: Vec<ClientWork> = clients
            .par_iter_mut()
            .enumerate()
            .filter(|(_, c)| chosen.contains(&c.client_id()))
            .map(|(index, c)| -> Result<ClientWork, ClientError> {
                let id = c.client_id().to_string();
                let outcome = c.local_train(t, mu, &mut seed_tree(seed, &["round", &round, "client", &id, "train"]))?;
                let budget = ledger.budget(c.client_id());
                let raw = c.extract_features(t, &privacy, &budget, &mut seed_tree(seed, &["round", &round, "client", &id, "noise"]))?;
                let target = cfg.compression_target(c.tier(), t);
                let packet = compress(&raw, target, &mut seed_tree(seed, &["round", &round, "client", &id, "compress"]))?;
                Ok(ClientWork { index, outcome, packet })
            })
            .collect::<Result<_, _>>()?;

        let mut drop_rng = seed_tree(seed, &["round", &round, "dropout"]);
        let dropped: Vec<bool> = work.iter().map(|_| drop_rng.random::<f64>() < cfg.dropout_rate).collect();

        // tier accuracies feed next round's weights
        let mut tier_acc: [Option<f64>; 3] = [None; 3];
        for tier in QualityTier::ALL {
            let accs: Vec<f64> = work
                .iter()
                .filter(|w| clients[w.index].tier() == tier)
                .map(|w| w.outcome.accuracy)
                .collect();
            if !accs.is_empty() {
                tier_acc[tier.index()] = Some(accs.iter().sum::<f64>() / accs.len() as f64);
            }
        }

        // evaluation backbones: per-tier mean of the uploading clients' parameters
        let mut status = RoundStatus::Ok;
        let mut extractors: [Option<ModelParams<f32>>; 3] = [None, None, None];
        let mut eval_bytes = vec![0u64; work.len()];
        if cfg.eval_extractors {
            for tier in QualityTier::ALL {
                let members: Vec<usize> = (0..work.len())
                    .filter(|i| clients[work[*i].index].tier() == tier && !work[*i].packet.skipped)
                    .collect();
                let alive: Vec<usize> = members.iter().copied().filter(|i| !dropped[*i]).collect();
                if alive.is_empty() {
                    continue;
                }
                let mean = if cfg.use_secure_agg() {
                    let vectors: Vec<Vec<i32>> = members
                        .iter()
                        .map(|i| {
                            let p = &clients[work[*i].index].params;
                            p.values.iter().chain(&p.buffers).map(|v| to_fixed(*v as f64)).collect()
                        })
                        .collect();
                    let gone: BTreeSet<usize> = (0..members.len()).filter(|k| dropped[members[*k]]).collect();
                    let mut rng = seed_tree(seed, &["round", &round, "secure", tier.name()]);
                    match secure_sum(&vectors, &gone, cfg.secure_tolerance, &mut rng) {
                        Ok(sum) => {
                            let n = alive.len() as f64;
                            let all: Vec<f32> = sum.iter().map(|s| (from_fixed(*s) / n) as f32).collect();
                            let np = nets[tier.index()].param_count();
                            Some(ModelParams { values: all[..np].to_vec(), buffers: all[np..].to_vec() })
                        }
                        Err(SecureAggError::Abort { .. }) => {
                            status = RoundStatus::Aborted;
                            None
                        }
                        Err(e) => panic!("secure sum inputs are well formed: {e}"),
                    }
                } else {
                    let sets: Vec<&ModelParams<f32>> = alive.iter().map(|i| &clients[work[*i].index].params).collect();
                    ModelParams::mean(&sets)
                };
                for i in &alive {
                    eval_bytes[*i] = serialized_len(&nets[tier.index()]) as u64;
                }
                extractors[tier.index()] = mean;
            }
        }

        // privacy ledger: only releases that reached the server are charged
        for (w, gone) in work.iter().zip(&dropped) {
            if privacy.enabled && !gone && !w.packet.skipped {
                let c = &clients[w.index];
                ledger.record(c.client_id(), t, w.packet.eps_spent, privacy.max_eps(c.tier()), privacy.composer, privacy.delta);
            }
        }

        let mut server_loss = None;
        let mut server_train_accuracy = None;
        if status == RoundStatus::Ok {
            let mut samples = Vec::new();
            for (w, gone) in work.iter().zip(&dropped) {
                if *gone || w.packet.skipped {
                    continue;
                }
                let values = dequantize(&w.packet);
                let d = w.packet.dim;
                for (f, y) in values.chunks(d).zip(&w.packet.labels) {
                    samples.push(ServerSample {
                        tier: w.packet.tier,
                        features: f.iter().map(|v| *v as f64).collect(),
                        label: *y as usize,
                    });
                }
            }
            if !samples.is_empty() {
                let teacher = (t > 1 && distill.alpha > 0.0).then(|| server.clone());
                let theta_prev = server.params.clone();
                let metrics = train_server(
                    &mut server,
                    &samples,
                    &weights,
                    teacher.as_ref(),
                    &distill,
                    &mut seed_tree(seed, &["round", &round, "server"]),
                )?;
                if t > 1 && cfg.server_beta() > 0.0 {
                    server.params = apply_momentum(&server.params, &theta_prev, cfg.server_beta())?;
                }
                server_loss = Some(metrics.loss);
                server_train_accuracy = Some(metrics.train_accuracy);
            }
            for (slot, e) in last_extractors.iter_mut().zip(extractors) {
                if e.is_some() {
                    *slot = e;
                }
            }
            if cfg.sync_tiers {
                for c in clients.iter_mut() {
                    if let Some(m) = &last_extractors[c.tier().index()] {
                        c.params = m.clone();
                    }
                }
            }
        }

        let mut server_accuracy = None;
        let mut single_tier_accuracy = [None; 3];
        if !test_inputs.is_empty() {
            let pipelines: Vec<EvalPipeline<'_>> = QualityTier::ALL
                .iter()
                .filter_map(|tier| {
                    let params = last_extractors[tier.index()].as_ref()?;
                    Some(EvalPipeline {
                        tier: *tier,
                        net: &nets[tier.index()],
                        params,
                        inputs: &test_inputs[tier.index()],
                        clip_norm: privacy.enabled.then(|| privacy.clip_norm(*tier)),
                    })
                })
                .collect();
            if !pipelines.is_empty() {
                let report = evaluate_server(&server, &weights, &test_labels, &pipelines)?;
                server_accuracy = Some(report.accuracy);
                single_tier_accuracy = report.single_tier;
            }
        }

        let mut records = Vec::with_capacity(work.len());
        let mut battery: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        let mut sim_seconds = 0.0f64;
        for ((w, gone), eval_b) in work.iter().zip(&dropped).zip(&eval_bytes) {
            let c = &clients[w.index];
            let uploaded = !gone && !w.packet.skipped;
            let bytes_wire = if uploaded { w.packet.bytes_wire } else { 0 };
            let budget = ledger.budget(c.client_id());
            let charged = privacy.enabled && uploaded;
            battery[c.tier().index()].push(w.outcome.report.battery_pct);
            let upload_s = transfer_time(bytes_wire + eval_b, c.profile.bandwidth_mbps).expect("positive bandwidth");
            sim_seconds = sim_seconds.max(w.outcome.report.train_time_s + upload_s);
            records.push(ClientRoundRecord {
                round: t,
                client_id: c.client_id(),
                tier: c.tier(),
                dropped: *gone,
                skipped: w.packet.skipped,
                local_accuracy: w.outcome.accuracy,
                local_loss: w.outcome.loss,
                mu: w.outcome.mu,
                train_time_s: w.outcome.report.train_time_s,
                battery_pct: w.outcome.report.battery_pct,
                peak_memory_mb: w.outcome.report.peak_memory_mb,
                entries: if uploaded { w.packet.len() } else { 0 },
                bytes_raw: w.packet.bytes_raw,
                bytes_wire,
                bytes_eval: *eval_b,
                compression_ratio: if uploaded { w.packet.compression_ratio } else { 0.0 },
                eps_round: if charged { w.packet.eps_spent } else { 0.0 },
                eps_total: budget.eps_total,
                exhausted: budget.exhausted,
            });
        }
        let uploads: Vec<&ClientRoundRecord> = records.iter().filter(|r| r.bytes_wire > 0).collect();
        let bytes_features: u64 = records.iter().map(|r| r.bytes_wire).sum();
        let bytes_eval: u64 = records.iter().map(|r| r.bytes_eval).sum();
        let mean = |v: &Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        rounds.push(RoundLedger {
            round: t,
            status,
            server_accuracy,
            single_tier_accuracy,
            tier_accuracy: tier_acc,
            weights: weights.0,
            n_selected: chosen.len(),
            n_uploaded: uploads.len(),
            bytes_features,
            bytes_eval,
            bytes_total: bytes_features + bytes_eval,
            bytes_per_client: if uploads.is_empty() { 0.0 } else { bytes_features as f64 / uploads.len() as f64 },
            battery_by_tier: [mean(&battery[0]), mean(&battery[1]), mean(&battery[2])],
            sim_seconds,
            server_loss,
            server_train_accuracy,
            selection,
            clients: records,
        });
        last_tier_acc = tier_acc;
    }
    Ok(RunOutput { config: cfg.clone(), plan: plan_summary, rounds })
}
