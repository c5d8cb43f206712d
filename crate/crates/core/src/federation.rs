//! Client and server state machines, the round loop, and communication
//! accounting.
//!
//! A round: every participating client loads the broadcast model, trains
//! `E` epochs against the broadcast prototypes, and uploads its model and
//! local prototypes; the server pools prototypes per class, builds the next
//! global prototype set, and averages models weighted by sample count.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::datagen::{build_federated_dataset, FederatedDataset, Sample};
use crate::error::{Error, Result};
use crate::losses::LossHyper;
use crate::metrics::{accuracy, compute_variance_metric, DomainEvaluation, MetricsLog, RoundMetrics};
use crate::model::{aggregate_params, backward, forward_features_slice, sgd_step, ModelParams, OptimizerConfig, OptimizerState};
use crate::numerics::{normalize_slice, DenseVector, RngStream};
use crate::prototypes::{
    broadcast_local_prototypes, compute_global_prototypes, compute_local_prototypes, perturb_prototypes, ClusterSettings,
    GlobalPrototypeSet, LocalPrototypeSet, PrivacyConfig, PrototypeMode,
};

// child-stream tags of the experiment seed
pub const DATA_STREAM: u64 = 1;
const MODEL_STREAM: u64 = 2;
const SERVER_STREAM: u64 = 3;
const CLIENT_STREAM_BASE: u64 = 1 << 32;

/// Everything a client or the server needs to know about the protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundSettings {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub hyper: LossHyper,
    pub optimizer: OptimizerConfig,
    pub local_mode: PrototypeMode,
    pub global_mode: PrototypeMode,
    pub broadcast_local_prototypes: bool,
    pub clustering: ClusterSettings,
    pub member_weighted_average: bool,
    pub privacy: PrivacyConfig,
}

impl RoundSettings {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        RoundSettings {
            local_epochs: cfg.local_epochs,
            batch_size: cfg.batch_size,
            hyper: cfg.loss,
            optimizer: cfg.optimizer,
            local_mode: cfg.prototypes.local_mode,
            global_mode: cfg.prototypes.global_mode,
            broadcast_local_prototypes: cfg.prototypes.broadcast_local,
            clustering: cfg.prototypes.cluster_settings(),
            member_weighted_average: cfg.prototypes.member_weighted_average,
            privacy: cfg.privacy,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub domain_id: usize,
    pub train: Vec<Sample>,
    pub model: ModelParams,
    pub optimizer: OptimizerState,
    pub rng: RngStream,
}

impl ClientState {
    pub fn new(client_id: usize, domain_id: usize, train: Vec<Sample>, model: ModelParams, optimizer: OptimizerConfig, rng: RngStream) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptyInput("client training set"));
        }
        Ok(ClientState {
            client_id,
            domain_id,
            train,
            optimizer: OptimizerState::new(optimizer, &model),
            model,
            rng,
        })
    }

    pub fn sample_count(&self) -> usize {
        self.train.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UploadMessage {
    pub client_id: usize,
    pub params: ModelParams,
    pub prototypes: LocalPrototypeSet,
    pub sample_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DownloadMessage {
    pub params: ModelParams,
    pub prototypes: GlobalPrototypeSet,
}

/// Per-round communication record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerRecord {
    pub round: usize,
    /// `(client_id, Σ_m J_{k,m})` for every uploading client.
    pub uploaded_per_client: Vec<(usize, usize)>,
    /// Prototypes each client receives: `Σ_m C_m` of the new global set.
    pub downloaded_per_client: usize,
    pub clients: usize,
    /// Model scalars moved in both directions.
    pub model_scalars_exchanged: usize,
}

impl LedgerRecord {
    pub fn uploaded_total(&self) -> usize {
        self.uploaded_per_client.iter().map(|(_, n)| n).sum()
    }

    pub fn downloaded_total(&self) -> usize {
        self.downloaded_per_client * self.clients
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommLedger {
    pub records: Vec<LedgerRecord>,
}

impl CommLedger {
    /// Mean per-client downloaded prototype count over rounds `from..=to`.
    pub fn mean_downloaded(&self, from: usize, to: usize) -> Option<f64> {
        let picked: Vec<f64> = self
            .records
            .iter()
            .filter(|r| (from..=to).contains(&r.round))
            .map(|r| r.downloaded_per_client as f64)
            .collect();
        (!picked.is_empty()).then(|| picked.iter().sum::<f64>() / picked.len() as f64)
    }
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub global_model: ModelParams,
    pub global_prototypes: GlobalPrototypeSet,
    pub round: usize,
    pub settings: RoundSettings,
    pub ledger: CommLedger,
    pub rng: RngStream,
}

impl ServerState {
    pub fn new(global_model: ModelParams, settings: RoundSettings, rng: RngStream) -> Self {
        ServerState {
            global_model,
            global_prototypes: GlobalPrototypeSet::empty(),
            round: 0,
            settings,
            ledger: CommLedger::default(),
            rng,
        }
    }

    pub fn download(&self) -> DownloadMessage {
        DownloadMessage {
            params: self.global_model.clone(),
            prototypes: self.global_prototypes.clone(),
        }
    }
}

/// Features of `samples` grouped by label.
fn features_by_class(model: &ModelParams, samples: &[Sample]) -> Result<BTreeMap<usize, Vec<DenseVector>>> {
    let mut out: BTreeMap<usize, Vec<DenseVector>> = BTreeMap::new();
    for s in samples {
        let z = forward_features_slice(model, s.x.as_slice())?;
        out.entry(s.y).or_default().push(DenseVector::from_vec_unchecked(z));
    }
    Ok(out)
}

/// Local training followed by local prototype generation.
///
/// An empty broadcast prototype set means no prototype term this round.
pub fn local_update(client: &mut ClientState, dl: &DownloadMessage, settings: &RoundSettings) -> Result<UploadMessage> {
    if settings.local_epochs == 0 {
        return Err(Error::InvalidArgument("local_epochs must be >= 1".into()));
    }
    if !client.model.same_shape(&dl.params) {
        return Err(Error::ShapeMismatch(format!(
            "client {} model differs from the broadcast model",
            client.client_id
        )));
    }
    client.model = dl.params.clone();
    client.optimizer = OptimizerState::new(settings.optimizer, &client.model);

    let mut order: Vec<usize> = (0..client.train.len()).collect();
    let batch_size = settings.batch_size.max(1);
    for _ in 0..settings.local_epochs {
        client.rng.shuffle(&mut order);
        for chunk in order.chunks(batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| client.train[i].clone()).collect();
            let (_, grads) = backward(&client.model, &batch, &dl.prototypes, &settings.hyper)?;
            let next = sgd_step(&client.model, &mut client.optimizer, &grads)?;
            if !next.is_finite() {
                return Err(Error::NonFinite("model parameters after an SGD step"));
            }
            client.model = next;
        }
    }

    let feats = features_by_class(&client.model, &client.train)?;
    let mut prototypes = compute_local_prototypes(
        client.client_id,
        &feats,
        settings.local_mode,
        settings.clustering,
        &mut client.rng,
    )?;
    if settings.privacy.enabled {
        prototypes = perturb_prototypes(&prototypes, &settings.privacy, &mut client.rng);
    }
    Ok(UploadMessage {
        client_id: client.client_id,
        params: client.model.clone(),
        prototypes,
        sample_count: client.sample_count(),
    })
}

/// Pools prototypes, builds the next global set, averages models.
pub fn server_round(server: &mut ServerState, mut uploads: Vec<UploadMessage>) -> Result<DownloadMessage> {
    if uploads.is_empty() {
        return Err(Error::EmptyInput("uploads"));
    }
    uploads.sort_by_key(|u| u.client_id);
    for u in &uploads {
        if !u.params.same_shape(&server.global_model) {
            return Err(Error::ShapeMismatch(format!(
                "upload from client {} has a different model shape",
                u.client_id
            )));
        }
        if let Some(p) = u.prototypes.iter().find(|p| p.vector.dim() != server.global_model.feature_dim()) {
            return Err(Error::DimensionMismatch {
                expected: server.global_model.feature_dim(),
                found: p.vector.dim(),
            });
        }
    }
    let next_round = server.round + 1;
    let locals: Vec<LocalPrototypeSet> = uploads.iter().map(|u| u.prototypes.clone()).collect();
    let s = &server.settings;
    let global = if s.broadcast_local_prototypes {
        broadcast_local_prototypes(&locals, next_round)
    } else {
        compute_global_prototypes(
            &locals,
            s.global_mode,
            s.clustering,
            s.member_weighted_average,
            next_round,
            &mut server.rng,
        )?
    };
    let weighted: Vec<(&ModelParams, usize)> = uploads.iter().map(|u| (&u.params, u.sample_count)).collect();
    let model = aggregate_params(&weighted)?;

    let scalars = model.num_scalars();
    server.ledger.records.push(LedgerRecord {
        round: next_round,
        uploaded_per_client: uploads.iter().map(|u| (u.client_id, u.prototypes.total())).collect(),
        downloaded_per_client: global.total(),
        clients: uploads.len(),
        model_scalars_exchanged: 2 * scalars * uploads.len(),
    });
    server.global_model = model;
    server.global_prototypes = global;
    server.round = next_round;
    Ok(server.download())
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads <= 1 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn run_map<T: Send, R: Send>(items: &mut [T], parallel: bool, f: impl Fn(&mut T) -> R + Sync + Send) -> Vec<R> {
    if parallel {
        items.par_iter_mut().map(f).collect()
    } else {
        items.iter_mut().map(f).collect()
    }
}

/// Initial state of every client and the server for `cfg.seed`.
pub fn setup(cfg: &ExperimentConfig) -> Result<(FederatedDataset, Vec<ClientState>, ServerState)> {
    cfg.validate()?;
    let root = RngStream::new(cfg.seed);
    let dataset = build_federated_dataset(
        cfg.model.num_classes,
        cfg.model.input_dim,
        &cfg.domains,
        &cfg.clients_per_domain(),
        &cfg.partition,
        &root.derive(DATA_STREAM),
    )?;
    let model = ModelParams::init(&cfg.model, &mut root.derive(MODEL_STREAM));
    let clients = dataset
        .clients
        .iter()
        .map(|c| {
            ClientState::new(
                c.client_id,
                c.domain_id,
                c.train.clone(),
                model.clone(),
                cfg.optimizer,
                root.derive(CLIENT_STREAM_BASE + c.client_id as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let server = ServerState::new(model, RoundSettings::from_config(cfg), root.derive(SERVER_STREAM));
    Ok((dataset, clients, server))
}

fn participants(count: usize, fraction: f64, rng: &mut RngStream) -> Vec<bool> {
    if fraction >= 1.0 {
        return vec![true; count];
    }
    let take = ((fraction * count as f64).ceil() as usize).clamp(1, count);
    let mut idx: Vec<usize> = (0..count).collect();
    rng.shuffle(&mut idx);
    let mut mask = vec![false; count];
    idx[..take].iter().for_each(|&i| mask[i] = true);
    mask
}

/// Accuracy of `model` on every domain's test set.
fn evaluate_domains(model: &ModelParams, dataset: &FederatedDataset) -> Result<Vec<f64>> {
    dataset.test_sets.iter().map(|t| accuracy(model, t)).collect()
}

/// Runs `cfg.rounds` federated rounds and records metrics after each.
pub fn run_training(cfg: &ExperimentConfig) -> Result<MetricsLog> {
    let (dataset, mut clients, mut server) = setup(cfg)?;
    let parallel = cfg.parallelism > 1;
    let num_domains = dataset.test_sets.len();

    with_pool(cfg.parallelism, || -> Result<MetricsLog> {
        let initial = evaluate_domains(&server.global_model, &dataset)?;
        let mut log = MetricsLog::new(cfg.seed, dataset.domain_names.clone(), initial);
        let mut download = server.download();

        for _ in 0..cfg.rounds {
            let started = Instant::now();
            let mask = participants(clients.len(), cfg.participation, &mut server.rng);
            let settings = server.settings.clone();
            let dl = &download;
            let results = run_map(&mut clients, parallel, |c| -> Result<Option<UploadMessage>> {
                if mask[c.client_id] {
                    local_update(c, dl, &settings).map(Some)
                } else {
                    Ok(None)
                }
            });
            let uploads: Vec<UploadMessage> = results.into_iter().filter_map(Result::transpose).collect::<Result<_>>()?;

            // evaluate every client's current local model on its domain
            let evals = run_map(&mut clients, parallel, |c| -> Result<DomainEvaluation> {
                let test = &dataset.test_sets[c.domain_id];
                let feats = features_by_class(&c.model, test)?;
                Ok(DomainEvaluation {
                    client_id: c.client_id,
                    domain_id: c.domain_id,
                    accuracy: accuracy(&c.model, test)?,
                    normalized_features: feats
                        .into_values()
                        .map(|g| g.iter().map(|z| DenseVector::from_vec_unchecked(normalize_slice(z.as_slice()))).collect())
                        .collect(),
                })
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;

            let mut proto_counts = vec![Vec::new(); num_domains];
            for u in &uploads {
                let classes = u.prototypes.classes();
                if !classes.is_empty() {
                    let mean = u.prototypes.total() as f64 / classes.len() as f64;
                    proto_counts[clients[u.client_id].domain_id].push(mean);
                }
            }

            download = server_round(&mut server, uploads)?;
            let global_acc = evaluate_domains(&server.global_model, &dataset)?;
            let record = server.ledger.records.last().expect("round recorded");

            let groups: Vec<Vec<DenseVector>> = evals.iter().flat_map(|e| e.normalized_features.iter().cloned()).collect();
            log.push(RoundMetrics::assemble(
                server.round,
                &evals,
                num_domains,
                global_acc,
                compute_variance_metric(&groups)?,
                proto_counts,
                record,
                started.elapsed().as_secs_f64(),
            ));
        }
        log.ledger = server.ledger.clone();
        Ok(log)
    })?
}
