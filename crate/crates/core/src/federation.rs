//! The collaborative round protocol and the in-process experiment driver.
//!
//! Each round has four steps:
//! 1. clients holding an un-uploaded local update send their models and
//!    encrypted features;
//! 2. the server averages the models (weights `|D_c| / Σ|D_i|`) and merges
//!    the features;
//! 3. every selected client downloads the global models and
//!    `Q_s,c = Q̄ \ Q̄_c`;
//! 4. selected clients run local contrastive learning.
//!
//! After the last round a closing upload + aggregation produces the final
//! model. [`Server`] and [`ClientNode`] hold all protocol state and are
//! shared with the wire transport, so both deployments compute identical
//! results.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytics::{self, ClientFnRatios, FnInputs, FnRatioReport, MetricsRow, ProbeReport, RemoteSource};
use crate::bank::{assemble_remote, BankTag, MemoryBank, RemoteBankSet};
use crate::config::ExperimentConfig;
use crate::data::{self, augment_two_views, ClientShard, Dataset, GaussianMixture};
use crate::math::{self, EncoderParams, FeatureVector};
use crate::objective::{TrainingMode, TrainingObjective};
use crate::privacy::encrypted_feature_batch;
use crate::rng::{self, purpose};
use crate::{Error, Result};

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "FEDCL_THREADS";

/// Uniform subset of `⌈β·C⌉` client ids, ascending.
pub fn select_clients<R: Rng + ?Sized>(clients: u32, beta: f64, rng: &mut R) -> Vec<u32> {
    let want = ((beta * clients as f64) - 1e-9).ceil().clamp(1.0, clients as f64) as usize;
    let mut ids: Vec<u32> = rand::seq::index::sample(rng, clients as usize, want)
        .into_iter()
        .map(|i| i as u32)
        .collect();
    ids.sort_unstable();
    ids
}

/// Data-size weighted parameter average, accumulated in f64 and rounded to f32.
pub fn aggregate_models(models: &[(&EncoderParams, usize)]) -> Result<EncoderParams> {
    let (first, _) = models.first().ok_or(Error::Empty("models to aggregate"))?;
    if let Some((bad, _)) = models.iter().find(|(p, _)| !p.same_shape(first)) {
        return Err(Error::ShapeMismatch(format!(
            "cannot average encoders with {} and {} parameters",
            first.num_params(),
            bad.num_params()
        )));
    }
    let total: usize = models.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("total data size is zero".into()));
    }
    let mut acc = vec![0.0f64; first.num_params()];
    for (params, n) in models {
        let w = *n as f64 / total as f64;
        acc.iter_mut().zip(params.flat()).for_each(|(a, v)| *a += w * v);
    }
    let mut out = (*first).clone();
    out.set_flat(&acc.into_iter().map(math::round_f32).collect::<Vec<_>>())?;
    Ok(out)
}

/// Everything derived deterministically from the config before round 0.
#[derive(Debug, Clone)]
pub struct Setup {
    pub dataset: Dataset,
    pub shards: Vec<ClientShard>,
    pub init_params: EncoderParams,
    pub probe: ProbeData,
}

/// Labelled sets used by the server-side probes.
#[derive(Debug, Clone)]
pub struct ProbeData {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let d = &cfg.data;
    match &d.dataset_path {
        Some(path) => data::read_dataset(path),
        None => data::generate_gaussian_mixture(
            d.num_classes,
            d.per_class_n,
            d.dim,
            d.separation,
            d.noise_sigma,
            cfg.seed,
        ),
    }
}

pub fn initial_params(cfg: &ExperimentConfig) -> Result<EncoderParams> {
    EncoderParams::init(&cfg.encoder_dims(), &mut rng::stream(cfg.seed, &[purpose::INIT]))
}

/// Held-out probe test set drawn from the same mixture as the training data.
pub fn holdout_set(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<Dataset> {
    let d = &cfg.data;
    let mix = GaussianMixture::new(dataset.num_classes, dataset.dim, d.separation, d.noise_sigma, cfg.seed)?;
    Ok(mix.sample(
        cfg.probe.holdout_per_class,
        &mut rng::stream(cfg.seed, &[purpose::HOLDOUT]),
    ))
}

impl Setup {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let dataset = load_dataset(cfg)?;
        if dataset.dim != cfg.data.dim {
            return Err(Error::Config(format!(
                "dataset has dimension {} but data.dim = {}",
                dataset.dim, cfg.data.dim
            )));
        }
        let shards = data::partition(
            &dataset,
            cfg.federation.clients as usize,
            cfg.data.partition_mode(),
            cfg.seed,
        )?;
        if let Some(s) = shards.iter().find(|s| s.len() < cfg.privacy.k_mix.max(1)) {
            return Err(Error::Config(format!(
                "client {} received {} samples; need at least k_mix = {}",
                s.client_id,
                s.len(),
                cfg.privacy.k_mix
            )));
        }
        let probe = ProbeData {
            test: holdout_set(cfg, &dataset)?,
            train: dataset.clone(),
        };
        Ok(Setup {
            init_params: initial_params(cfg)?,
            dataset,
            shards,
            probe,
        })
    }
}

/// Models and encrypted features sent in step 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpload {
    pub client: u32,
    pub params_q: EncoderParams,
    pub params_k: EncoderParams,
    pub features: Vec<FeatureVector>,
}

/// Global models and remote negatives sent in step 3.
#[derive(Debug, Clone, PartialEq)]
pub struct Download {
    pub params_q: EncoderParams,
    pub params_k: EncoderParams,
    pub remote: Vec<FeatureVector>,
}

/// What a client reports after local learning.
///
/// The label fields are analytics side-channel data: a query sample, the
/// provenance of the local bank, and the provenance of the encrypted features
/// it will upload next.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundSummary {
    pub client: u32,
    pub round: u32,
    pub steps: u32,
    pub contrast: f64,
    pub neigh: f64,
    pub total: f64,
    pub epoch_losses: Vec<f64>,
    pub query_labels: Vec<u16>,
    pub local_bank_labels: Vec<u16>,
    pub upload_labels: Vec<u16>,
    pub class_set: Vec<u16>,
}

/// Per-client training metrics kept in the round report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientMetrics {
    pub client: u32,
    pub steps: u32,
    pub contrast: f64,
    pub neigh: f64,
    pub total: f64,
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u32,
    pub mode: TrainingMode,
    pub selected: Vec<u32>,
    /// Step 1: (client, features uploaded).
    pub upload_counts: Vec<(u32, u32)>,
    /// Step 2: fingerprint of the aggregated main encoder.
    pub aggregation_hash: u64,
    /// Step 3: (client, remote negatives downloaded).
    pub download_counts: Vec<(u32, u32)>,
    /// Step 4.
    pub clients: Vec<ClientMetrics>,
    pub contrast: f64,
    pub neigh: f64,
    pub total: f64,
    pub fn_ratios: FnRatioReport,
    /// Probe of the global model aggregated in step 2.
    pub probe: ProbeReport,
    pub wall_time_s: f64,
}

impl RoundReport {
    pub fn metrics_row(&self) -> MetricsRow {
        MetricsRow {
            round: self.round,
            mode: self.mode.to_string(),
            contrast_loss: self.contrast,
            neigh_loss: self.neigh,
            fn_local_only: self.fn_ratios.empirical_local_only,
            fn_fused: self.fn_ratios.empirical_fused,
            fn_remote_only: self.fn_ratios.empirical_remote_only,
            fn_theory_fused: self.fn_ratios.theoretical_fused,
            fn_theory_remote: self.fn_ratios.theoretical_remote_only,
            knn_acc: self.probe.knn_accuracy,
            linear_acc: self.probe.linear_accuracy,
            wall_time_s: self.wall_time_s,
        }
    }

    /// Copy with timing zeroed, for equality checks.
    pub fn without_timing(&self) -> RoundReport {
        RoundReport {
            wall_time_s: 0.0,
            ..self.clone()
        }
    }
}

/// One client's training state. Training code reads `inputs` only; labels
/// stay inside `shard` for analytics.
#[derive(Debug, Clone)]
pub struct ClientNode {
    id: u32,
    shard: ClientShard,
    inputs: Vec<Vec<f32>>,
    cfg: Arc<ExperimentConfig>,
    params_q: EncoderParams,
    params_k: EncoderParams,
    local_bank: MemoryBank,
    upload_bank: MemoryBank,
    remote_bank: RemoteBankSet,
    pending_upload: bool,
}

fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

impl ClientNode {
    /// Starts from the shared initial encoder. The local bank is pre-filled
    /// with momentum-encoder keys of up to `K` augmented local samples.
    pub fn new(shard: ClientShard, init: &EncoderParams, cfg: Arc<ExperimentConfig>) -> Result<Self> {
        if shard.is_empty() {
            return Err(Error::Empty("client shard"));
        }
        let id = shard.client_id;
        let inputs = shard.inputs();
        let mut local_bank = MemoryBank::new(cfg.bank.capacity, BankTag::Local)?;
        let mut r = rng::stream(cfg.seed, &[purpose::TRAIN, id as u64, u64::MAX]);
        let mut rows: Vec<usize> = (0..inputs.len()).collect();
        rows.shuffle(&mut r);
        rows.truncate(cfg.bank.capacity);
        let mut keys = Vec::with_capacity(rows.len());
        for &i in &rows {
            let v = augment_two_views(&inputs[i], i, cfg.data.aug_sigma, cfg.data.drop_prob, &mut r)?;
            keys.push(FeatureVector::normalized(&init.encode(&to_f64(&v.view_b))?));
        }
        local_bank.enqueue_with_origins(keys, rows.iter().map(|&i| i as u32).collect())?;
        Ok(ClientNode {
            id,
            shard,
            inputs,
            params_q: init.clone(),
            params_k: init.clone(),
            local_bank,
            upload_bank: MemoryBank::new(cfg.bank.upload_size, BankTag::EncryptedLocal)?,
            remote_bank: RemoteBankSet::empty(),
            pending_upload: false,
            cfg,
        })
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn shard_size(&self) -> usize {
        self.inputs.len()
    }

    pub fn params(&self) -> (&EncoderParams, &EncoderParams) {
        (&self.params_q, &self.params_k)
    }

    pub fn local_bank(&self) -> &MemoryBank {
        &self.local_bank
    }

    pub fn upload_bank(&self) -> &MemoryBank {
        &self.upload_bank
    }

    pub fn remote_bank(&self) -> &RemoteBankSet {
        &self.remote_bank
    }

    pub fn has_pending_upload(&self) -> bool {
        self.pending_upload
    }

    /// Step 1: hands over the latest local models and encrypted features.
    pub fn take_upload(&mut self) -> ClientUpload {
        self.pending_upload = false;
        ClientUpload {
            client: self.id,
            params_q: self.params_q.clone(),
            params_k: self.params_k.clone(),
            features: self.upload_bank.snapshot(),
        }
    }

    /// Step 4: adopt the downloaded models and remote bank, then train for
    /// `E` epochs and regenerate the encrypted upload.
    pub fn local_update(&mut self, round: u32, download: Download) -> Result<ClientRoundSummary> {
        self.run_local_update(round, download).map_err(|e| Error::Client {
            client: self.id,
            round,
            source: Box::new(e),
        })
    }

    fn run_local_update(&mut self, round: u32, download: Download) -> Result<ClientRoundSummary> {
        let cfg = Arc::clone(&self.cfg);
        let fed = &cfg.federation;
        self.params_q = download.params_q;
        self.params_k = download.params_k;
        self.remote_bank = RemoteBankSet::from_flat(download.remote);

        let mut r = rng::stream(cfg.seed, &[purpose::TRAIN, self.id as u64, round as u64]);
        let ccfg = cfg.objective.contrast();
        let ncfg = cfg.objective.neighbor();
        let mut order: Vec<usize> = (0..self.inputs.len()).collect();
        let (mut steps, mut sum_c, mut sum_n, mut sum_t) = (0u32, 0.0, 0.0, 0.0);
        let mut epoch_losses = Vec::with_capacity(fed.local_epochs as usize);

        for _ in 0..fed.local_epochs {
            order.shuffle(&mut r);
            let (mut epoch_sum, mut epoch_steps) = (0.0, 0usize);
            for batch in order.chunks(fed.batch_size) {
                let mut queries_in = Vec::with_capacity(batch.len());
                let mut keys = Vec::with_capacity(batch.len());
                for &i in batch {
                    let v = augment_two_views(&self.inputs[i], i, cfg.data.aug_sigma, cfg.data.drop_prob, &mut r)?;
                    keys.push(FeatureVector::normalized(&self.params_k.encode(&to_f64(&v.view_b))?));
                    queries_in.push(to_f64(&v.view_a));
                }
                let local = self.local_bank.snapshot();
                let objective = TrainingObjective::new(
                    fed.mode,
                    ccfg,
                    ncfg,
                    &keys,
                    &local,
                    self.remote_bank.flat(),
                    &mut r,
                )?;
                let traces: Vec<_> = queries_in.iter().map(|x| self.params_q.trace(x)).collect();
                let queries: Vec<Vec<f64>> = traces.iter().map(|t| t.output.clone()).collect();
                let (loss, query_grads) = objective.breakdown_with_grad(&queries)?;
                let grads = math::backprop(&self.params_q, &traces, &query_grads);
                self.params_q = math::sgd_step(&self.params_q, &grads, fed.lr, fed.weight_decay)?;
                self.params_k = math::momentum_update(&self.params_k, &self.params_q, fed.momentum)?;
                self.local_bank
                    .enqueue_with_origins(keys, batch.iter().map(|&i| i as u32).collect())?;
                if !self.params_q.is_finite() {
                    return Err(Error::InvalidArgument("encoder parameters became non-finite".into()));
                }
                steps += 1;
                epoch_steps += 1;
                epoch_sum += loss.total;
                sum_c += loss.contrast;
                sum_n += loss.neigh;
                sum_t += loss.total;
            }
            epoch_losses.push(epoch_sum / epoch_steps.max(1) as f64);
        }

        if fed.upload_features {
            let mut pr = rng::stream(cfg.seed, &[purpose::PRIVACY, self.id as u64, round as u64]);
            let (features, rows) = encrypted_feature_batch(
                &self.inputs,
                &self.params_k,
                cfg.bank.upload_size,
                &cfg.privacy.spec(),
                &mut pr,
            )?;
            self.upload_bank.replace(features, rows)?;
        }
        self.pending_upload = true;

        let mut ar = rng::stream(cfg.seed, &[purpose::ANALYTICS, self.id as u64, round as u64]);
        let query_labels = (0..cfg.probe.fn_queries)
            .map(|_| self.shard.label(ar.random_range(0..self.inputs.len())))
            .collect();
        let labels_of = |bank: &MemoryBank| -> Vec<u16> {
            bank.origins().iter().map(|&i| self.shard.label(i as usize)).collect()
        };
        let n = steps.max(1) as f64;
        Ok(ClientRoundSummary {
            client: self.id,
            round,
            steps,
            contrast: sum_c / n,
            neigh: sum_n / n,
            total: sum_t / n,
            epoch_losses,
            query_labels,
            local_bank_labels: labels_of(&self.local_bank),
            upload_labels: labels_of(&self.upload_bank),
            class_set: self.shard.class_set.iter().copied().collect(),
        })
    }
}

/// Round plan announced in step 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundPlan {
    pub round: u32,
    pub selected: Vec<u32>,
    pub uploaders: Vec<u32>,
}

/// Server-side protocol state.
#[derive(Debug, Clone)]
pub struct Server {
    cfg: Arc<ExperimentConfig>,
    params_q: EncoderParams,
    params_k: EncoderParams,
    shard_sizes: BTreeMap<u32, usize>,
    combined: BTreeMap<u32, Vec<FeatureVector>>,
    combined_labels: BTreeMap<u32, Vec<u16>>,
    pending_labels: BTreeMap<u32, Vec<u16>>,
    class_sets: BTreeMap<u32, BTreeSet<u16>>,
    awaiting_upload: BTreeSet<u32>,
    probe: ProbeData,
    // per-round scratch
    plan: Option<RoundPlan>,
    uploads: Vec<ClientUpload>,
    aggregation_hash: u64,
    downloads: Vec<(u32, u32)>,
    summaries: Vec<ClientRoundSummary>,
}

impl Server {
    pub fn new(
        cfg: Arc<ExperimentConfig>,
        init: EncoderParams,
        shard_sizes: BTreeMap<u32, usize>,
        probe: ProbeData,
    ) -> Self {
        Server {
            cfg,
            params_k: init.clone(),
            params_q: init,
            shard_sizes,
            combined: BTreeMap::new(),
            combined_labels: BTreeMap::new(),
            pending_labels: BTreeMap::new(),
            class_sets: BTreeMap::new(),
            awaiting_upload: BTreeSet::new(),
            probe,
            plan: None,
            uploads: Vec::new(),
            aggregation_hash: 0,
            downloads: Vec::new(),
            summaries: Vec::new(),
        }
    }

    pub fn params(&self) -> (&EncoderParams, &EncoderParams) {
        (&self.params_q, &self.params_k)
    }

    pub fn combined_features(&self) -> &BTreeMap<u32, Vec<FeatureVector>> {
        &self.combined
    }

    /// Selects this round's participants; uploaders are the clients holding
    /// an update the server has not yet aggregated.
    pub fn plan_round(&mut self, round: u32) -> RoundPlan {
        let clients = self.cfg.federation.clients;
        let selected = select_clients(
            clients,
            self.cfg.federation.beta,
            &mut rng::stream(self.cfg.seed, &[purpose::SELECT, round as u64]),
        );
        let plan = RoundPlan {
            round,
            selected,
            uploaders: self.awaiting_upload.iter().copied().collect(),
        };
        self.plan = Some(plan.clone());
        self.uploads.clear();
        self.downloads.clear();
        self.summaries.clear();
        plan
    }

    /// Closing phase: collect the last updates without selecting anyone.
    pub fn plan_closing(&mut self, round: u32) -> RoundPlan {
        let plan = RoundPlan {
            round,
            selected: Vec::new(),
            uploaders: self.awaiting_upload.iter().copied().collect(),
        };
        self.plan = Some(plan.clone());
        self.uploads.clear();
        plan
    }

    /// Step 1.
    pub fn accept_upload(&mut self, upload: ClientUpload) -> Result<()> {
        if !self.awaiting_upload.remove(&upload.client) {
            return Err(Error::Protocol(format!(
                "client {} uploaded without a pending update",
                upload.client
            )));
        }
        if !upload.params_q.is_finite() || !upload.params_k.is_finite() {
            return Err(Error::Protocol(format!("client {} uploaded non-finite parameters", upload.client)));
        }
        let labels = self.pending_labels.remove(&upload.client).unwrap_or_default();
        if upload.features.is_empty() {
            self.combined.remove(&upload.client);
            self.combined_labels.remove(&upload.client);
        } else {
            if labels.len() != upload.features.len() {
                return Err(Error::Protocol(format!(
                    "client {} uploaded {} features but reported {} labels",
                    upload.client,
                    upload.features.len(),
                    labels.len()
                )));
            }
            self.combined.insert(upload.client, upload.features.clone());
            self.combined_labels.insert(upload.client, labels);
        }
        self.uploads.push(upload);
        Ok(())
    }

    /// Step 2. Returns the fingerprint of the aggregated main encoder.
    pub fn aggregate(&mut self) -> Result<u64> {
        if !self.uploads.is_empty() {
            self.uploads.sort_by_key(|u| u.client);
            let size = |c: u32| self.shard_sizes.get(&c).copied().unwrap_or(0);
            let q: Vec<(&EncoderParams, usize)> = self.uploads.iter().map(|u| (&u.params_q, size(u.client))).collect();
            let k: Vec<(&EncoderParams, usize)> = self.uploads.iter().map(|u| (&u.params_k, size(u.client))).collect();
            self.params_q = aggregate_models(&q)?;
            self.params_k = aggregate_models(&k)?;
        }
        if !self.params_q.is_finite() || !self.params_k.is_finite() {
            return Err(Error::InvalidArgument("aggregated parameters are non-finite".into()));
        }
        self.aggregation_hash = self.params_q.fingerprint();
        Ok(self.aggregation_hash)
    }

    pub fn upload_counts(&self) -> Vec<(u32, u32)> {
        self.uploads.iter().map(|u| (u.client, u.features.len() as u32)).collect()
    }

    /// Step 3 for one selected client.
    pub fn download_for(&mut self, client: u32) -> Download {
        let remote = assemble_remote(&self.combined, client);
        self.downloads.push((client, remote.len() as u32));
        Download {
            params_q: self.params_q.clone(),
            params_k: self.params_k.clone(),
            remote: remote.flat().to_vec(),
        }
    }

    /// End of step 4 for one client.
    pub fn accept_done(&mut self, summary: ClientRoundSummary) -> Result<()> {
        let plan = self.plan.as_ref().ok_or_else(|| Error::Protocol("no round in progress".into()))?;
        if !plan.selected.contains(&summary.client) {
            return Err(Error::Protocol(format!(
                "client {} reported a round it was not selected for",
                summary.client
            )));
        }
        self.class_sets
            .insert(summary.client, summary.class_set.iter().copied().collect());
        self.pending_labels.insert(summary.client, summary.upload_labels.clone());
        self.awaiting_upload.insert(summary.client);
        self.summaries.push(summary);
        Ok(())
    }

    fn fn_ratios(&self) -> FnRatioReport {
        let per_client: Vec<ClientFnRatios> = self
            .summaries
            .iter()
            .map(|s| {
                let empty = BTreeSet::new();
                let remote = self
                    .combined_labels
                    .iter()
                    .filter(|(id, _)| **id != s.client)
                    .map(|(id, labels)| RemoteSource {
                        labels,
                        classes: self.class_sets.get(id).unwrap_or(&empty),
                    })
                    .collect();
                analytics::client_fn_ratios(&FnInputs {
                    client: s.client,
                    class_count: s.class_set.len(),
                    query_labels: &s.query_labels,
                    local_labels: &s.local_bank_labels,
                    remote,
                })
            })
            .collect();
        analytics::aggregate_fn_ratios(per_client)
    }

    /// kNN (and optionally linear) probe of the current global main encoder.
    pub fn probe(&self, with_linear: bool) -> Result<ProbeReport> {
        let p = &self.cfg.probe;
        let knn = analytics::knn_probe(&self.params_q, &self.probe.train, &self.probe.test, p.knn_k)?;
        let linear = if with_linear {
            Some(analytics::linear_probe(
                &self.params_q,
                &self.probe.train,
                &self.probe.test,
                p.linear_epochs,
                p.linear_lr,
                self.cfg.seed,
            )?)
        } else {
            None
        };
        Ok(ProbeReport {
            knn_accuracy: knn,
            linear_accuracy: linear,
            config_digest: rng::fnv1a64(format!("{p:?}").as_bytes()),
        })
    }

    /// Final global models with a full probe.
    pub fn into_outcome(&self, reports: Vec<RoundReport>) -> Result<ExperimentOutcome> {
        Ok(ExperimentOutcome {
            reports,
            params_q: self.params_q.clone(),
            params_k: self.params_k.clone(),
            final_probe: self.probe(true)?,
        })
    }

    /// Assembles the report once every selected client has reported.
    pub fn finish_round(&mut self, wall_time_s: f64) -> Result<RoundReport> {
        let plan = self.plan.take().ok_or_else(|| Error::Protocol("no round in progress".into()))?;
        self.summaries.sort_by_key(|s| s.client);
        let reported: Vec<u32> = self.summaries.iter().map(|s| s.client).collect();
        if reported != plan.selected {
            return Err(Error::Protocol(format!(
                "round {}: expected reports from {:?}, got {:?}",
                plan.round, plan.selected, reported
            )));
        }
        let n = self.summaries.len().max(1) as f64;
        let mean = |f: fn(&ClientRoundSummary) -> f64| self.summaries.iter().map(f).sum::<f64>() / n;
        self.downloads.sort_unstable();
        Ok(RoundReport {
            round: plan.round,
            mode: self.cfg.federation.mode,
            selected: plan.selected.clone(),
            upload_counts: self.upload_counts(),
            aggregation_hash: self.aggregation_hash,
            download_counts: self.downloads.clone(),
            clients: self
                .summaries
                .iter()
                .map(|s| ClientMetrics {
                    client: s.client,
                    steps: s.steps,
                    contrast: s.contrast,
                    neigh: s.neigh,
                    total: s.total,
                    epoch_losses: s.epoch_losses.clone(),
                })
                .collect(),
            contrast: mean(|s| s.contrast),
            neigh: mean(|s| s.neigh),
            total: mean(|s| s.total),
            fn_ratios: self.fn_ratios(),
            probe: self.probe(self.cfg.probe.linear_every_round)?,
            wall_time_s,
        })
    }
}

/// Final state of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub reports: Vec<RoundReport>,
    pub params_q: EncoderParams,
    pub params_k: EncoderParams,
    pub final_probe: ProbeReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutcomeSummary {
    pub rounds: u32,
    pub mode: TrainingMode,
    pub seed: u64,
    pub final_knn_acc: f64,
    pub final_linear_acc: Option<f64>,
    pub initial_knn_acc: Option<f64>,
    pub model_fingerprint: u64,
}

impl ExperimentOutcome {
    pub fn summary(&self, cfg: &ExperimentConfig) -> OutcomeSummary {
        OutcomeSummary {
            rounds: self.reports.len() as u32,
            mode: cfg.federation.mode,
            seed: cfg.seed,
            final_knn_acc: self.final_probe.knn_accuracy,
            final_linear_acc: self.final_probe.linear_accuracy,
            initial_knn_acc: self.reports.first().map(|r| r.probe.knn_accuracy),
            model_fingerprint: self.params_q.fingerprint(),
        }
    }
}

/// Number of worker threads: `FEDCL_THREADS` if set and positive, else all cores.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// In-process federation: one server, `C` clients, a worker pool for step 4.
pub struct Simulation {
    cfg: Arc<ExperimentConfig>,
    server: Server,
    clients: Vec<ClientNode>,
    pool: rayon::ThreadPool,
    next_round: u32,
}

impl Simulation {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        Self::with_threads(cfg, worker_threads())
    }

    pub fn with_threads(cfg: ExperimentConfig, threads: usize) -> Result<Self> {
        let setup = Setup::from_config(&cfg)?;
        Self::from_setup(cfg, setup, threads)
    }

    pub fn from_setup(cfg: ExperimentConfig, setup: Setup, threads: usize) -> Result<Self> {
        let cfg = Arc::new(cfg);
        let clients = setup
            .shards
            .into_iter()
            .map(|s| ClientNode::new(s, &setup.init_params, Arc::clone(&cfg)))
            .collect::<Result<Vec<_>>>()?;
        let sizes = clients.iter().map(|c| (c.id(), c.shard_size())).collect();
        let server = Server::new(Arc::clone(&cfg), setup.init_params, sizes, setup.probe);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
        Ok(Simulation {
            cfg,
            server,
            clients,
            pool,
            next_round: 0,
        })
    }

    pub fn server(&self) -> &Server {
        &self.server
    }

    pub fn clients(&self) -> &[ClientNode] {
        &self.clients
    }

    fn upload_phase(&mut self, plan: &RoundPlan) -> Result<()> {
        for &c in &plan.uploaders {
            let upload = self.clients[c as usize].take_upload();
            self.server.accept_upload(upload)?;
        }
        Ok(())
    }

    /// Runs the four steps of the next round.
    pub fn run_round(&mut self) -> Result<RoundReport> {
        let start = Instant::now();
        let round = self.next_round;
        let plan = self.server.plan_round(round);
        self.upload_phase(&plan)?;
        self.server.aggregate()?;
        let mut downloads: BTreeMap<u32, Download> = plan
            .selected
            .iter()
            .map(|&c| (c, self.server.download_for(c)))
            .collect();
        let work: Vec<(&mut ClientNode, Download)> = self
            .clients
            .iter_mut()
            .filter_map(|c| downloads.remove(&c.id()).map(|d| (c, d)))
            .collect();
        let summaries: Vec<Result<ClientRoundSummary>> = self.pool.install(|| {
            work.into_par_iter()
                .map(|(client, d)| client.local_update(round, d))
                .collect()
        });
        for s in summaries {
            self.server.accept_done(s?)?;
        }
        self.next_round += 1;
        self.server.finish_round(start.elapsed().as_secs_f64())
    }

    /// Aggregates outstanding updates and probes the result.
    pub fn finish(mut self) -> Result<ExperimentOutcome> {
        self.finish_with_reports(Vec::new())
    }

    fn finish_with_reports(&mut self, reports: Vec<RoundReport>) -> Result<ExperimentOutcome> {
        let plan = self.server.plan_closing(self.next_round);
        self.upload_phase(&plan)?;
        self.server.aggregate()?;
        self.server.into_outcome(reports)
    }

    /// Runs the configured number of rounds, handing each report to `sink`.
    pub fn run(mut self, mut sink: impl FnMut(&RoundReport)) -> Result<ExperimentOutcome> {
        let mut reports = Vec::with_capacity(self.cfg.federation.rounds as usize);
        for _ in 0..self.cfg.federation.rounds {
            let report = self.run_round()?;
            sink(&report);
            reports.push(report);
        }
        self.finish_with_reports(reports)
    }
}

/// Builds and runs a simulation for `cfg`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    Simulation::new(cfg.clone())?.run(|_| {})
}
