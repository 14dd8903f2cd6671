//! Federated training with client-side unlearning models and server-side
//! blending plus selective pruning.
//!
//! Each round every drone trains the learning model on its full data. A
//! drone that asked to forget part of its data also trains its own
//! persistent unlearning model on the forget set (with freshly randomised
//! labels) mixed with its retained data. Uploads are L1-pruned, the server
//! averages the learning models, blends the average with the weighted
//! unlearning models and selectively prunes the blend.
//!
//! Client work within a round runs in parallel; results are reduced in
//! ascending client order so every run is bit-reproducible.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{self, LinkBudget, Position};
use crate::dataset::{self, ClientSplit, Dataset, PartitionSpec, UnlearnTarget};
use crate::error::{Error, Result};
use crate::harness::config::{
    Aggregation, Arm, DataSource, ExperimentConfig, RetrainCharge, UnlearnInit, UnlearnWeighting,
};
use crate::harness::eval_accuracy;
use crate::nn::{local_train, Mlp, ParamVector, SgdConfig};
use crate::pruning::{self, MaskOptions, PruneMask, SparsePayload};
use crate::seed::{self, derive_seed, round_seed, Stream};

/// Unweighted mean of aligned parameter vectors.
pub fn aggregate(params: &[ParamVector]) -> Result<ParamVector> {
    let first = params
        .first()
        .ok_or_else(|| Error::EmptyInput("no client parameters".into()))?;
    let mut acc = first.clone();
    for p in &params[1..] {
        acc.add_scaled(p, 1.0)?;
    }
    let k = params.len() as f64;
    Ok(acc.map(|v| v / k))
}

/// Weighted mean; weights are normalised to sum to one.
pub fn aggregate_weighted(params: &[ParamVector], weights: &[f64]) -> Result<ParamVector> {
    if params.is_empty() {
        return Err(Error::EmptyInput("no client parameters".into()));
    }
    if params.len() != weights.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} parameter vectors, {} weights",
            params.len(),
            weights.len()
        )));
    }
    let w = normalize_weights(weights)?;
    let mut acc = params[0].zeros_like();
    for (p, wk) in params.iter().zip(&w) {
        acc.add_scaled(p, *wk)?;
    }
    Ok(acc)
}

/// Scale nonnegative weights to sum to one.
pub fn normalize_weights(basis: &[f64]) -> Result<Vec<f64>> {
    if basis.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::OutOfRange("weights must be finite and >= 0".into()));
    }
    let total: f64 = basis.iter().sum();
    if !(total > 0.0) {
        return Err(Error::OutOfRange("weights sum to zero".into()));
    }
    Ok(basis.iter().map(|w| w / total).collect())
}

/// Weighted average of the unlearning models.
pub fn average_unlearning(unlearn: &[(ParamVector, f64)]) -> Result<ParamVector> {
    if unlearn.is_empty() {
        return Err(Error::EmptyInput("no unlearning models".into()));
    }
    let (params, basis): (Vec<ParamVector>, Vec<f64>) = unlearn.iter().cloned().unzip();
    aggregate_weighted(&params, &basis)
}

/// `α·θ + (1−α)·θ̄ᵘ` without pruning.
pub fn blend(global: &ParamVector, unlearn_avg: &ParamVector, alpha: f64) -> Result<ParamVector> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::OutOfRange(format!("alpha {alpha} not in [0, 1]")));
    }
    global.zip_map(unlearn_avg, |t, u| alpha * t + (1.0 - alpha) * u)
}

/// Server unlearning step: blend the global model with the weighted
/// unlearning models, then selectively prune the blend against the
/// unlearning average. Returns the unlearned model and the pruned positions.
pub fn server_unlearn(
    global: &ParamVector,
    unlearn: &[(ParamVector, f64)],
    alpha: f64,
    beta: f64,
    mask: MaskOptions,
) -> Result<(ParamVector, PruneMask)> {
    let avg = average_unlearning(unlearn)?;
    let blended = blend(global, &avg, alpha)?;
    let sp = pruning::selective_prune(&blended, &avg, beta, mask)?;
    Ok((sp.pruned, sp.sp_mask))
}

/// One drone.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub data: Dataset,
    /// Present for unlearning clients.
    pub split: Option<ClientSplit>,
    /// Persistent unlearning model, present iff `split` is.
    pub unlearn_params: Option<ParamVector>,
    pub position: Position,
    pub link: LinkBudget,
    pub seed: u64,
}

impl ClientState {
    pub fn is_unlearning(&self) -> bool {
        self.split.is_some()
    }

    /// The data this client keeps: the retained split, or everything.
    pub fn retained(&self) -> &Dataset {
        self.split.as_ref().map_or(&self.data, |s| &s.remain)
    }
}

/// Learning step of one client: train a copy of the global model on the
/// client's full dataset.
pub fn client_learn(
    model: &Mlp,
    client: &ClientState,
    global: &ParamVector,
    sgd: &SgdConfig,
    shuffle_seed: u64,
) -> Result<ParamVector> {
    local_train(model, global, &client.data, sgd, shuffle_seed)
}

/// The relabelled-plus-retained training set an unlearning client uses in a
/// given round.
pub fn unlearning_dataset(
    client: &ClientState,
    relabel_seed: u64,
    exclude_original: bool,
) -> Result<Dataset> {
    let split = client
        .split
        .as_ref()
        .ok_or(Error::NotUnlearning(client.id))?;
    let relabeled = dataset::relabel_random(&split.unlearn, relabel_seed, exclude_original);
    dataset::combine(&relabeled, &split.remain)
}

/// Unlearning step of one client: continue training its persistent
/// unlearning model on relabelled-plus-retained data.
pub fn client_unlearn(
    model: &Mlp,
    client: &ClientState,
    sgd: &SgdConfig,
    master_seed: u64,
    round: usize,
    exclude_original: bool,
) -> Result<ParamVector> {
    let state = client
        .unlearn_params
        .as_ref()
        .ok_or(Error::NotUnlearning(client.id))?;
    let combined = unlearning_dataset(
        client,
        round_seed(master_seed, round, client.id, Stream::Relabel),
        exclude_original,
    )?;
    local_train(
        model,
        state,
        &combined,
        sgd,
        round_seed(master_seed, round, client.id, Stream::Unlearn),
    )
}

/// Per-round metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Accuracy of the output model on every client's retained data.
    pub acc_remain: f64,
    pub acc_test: f64,
    /// Accuracy on the forget sets, scored against their original labels.
    pub acc_unlearn: Option<f64>,
    /// Bytes uploaded by each client, indexed by client id.
    pub payload_bytes: Vec<usize>,
    /// Local computation time per client, seconds.
    pub compute_s: Vec<f64>,
    /// Upload time per client, seconds.
    pub comm_s: Vec<f64>,
    /// Round makespan, `max_k(compute + comm)`.
    pub total_s: f64,
    /// Scalars zeroed by selective pruning this round.
    pub selectively_pruned: usize,
}

impl RoundRecord {
    /// Client that determines the makespan (lowest id on ties).
    pub fn critical_client(&self) -> usize {
        let mut best = 0;
        for k in 1..self.compute_s.len() {
            if self.compute_s[k] + self.comm_s[k] > self.compute_s[best] + self.comm_s[best] {
                best = k;
            }
        }
        best
    }

    pub fn recomputed_total(&self) -> Result<f64> {
        let pairs: Vec<(f64, f64)> = self
            .compute_s
            .iter()
            .copied()
            .zip(self.comm_s.iter().copied())
            .collect();
        channel::round_time(&pairs)
    }
}

/// Why a client trained on a set of rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainPurpose {
    Learn,
    Unlearn,
}

/// Hooks into a run, for instrumentation in tests and tools.
pub trait RunObserver {
    /// Called once per local training call, in ascending client order, with
    /// the original-dataset ids of every row the call trained on.
    fn on_local_train(
        &mut self,
        _round: usize,
        _client: usize,
        _purpose: TrainPurpose,
        _ids: &[usize],
    ) {
    }

    fn on_round(&mut self, _record: &RoundRecord) {}
}

/// Observer that ignores everything.
pub struct NoObserver;

impl RunObserver for NoObserver {}

/// Everything fixed before round one.
#[derive(Debug, Clone)]
pub struct Setup {
    pub model: Mlp,
    pub clients: Vec<ClientState>,
    pub test: Dataset,
    pub base_station: Position,
    pub initial_params: ParamVector,
    pub run_seed: u64,
}

impl Setup {
    pub fn remain_union(&self) -> Result<Dataset> {
        let parts: Vec<&Dataset> = self.clients.iter().map(ClientState::retained).collect();
        dataset::concat(&parts)
    }

    /// Forget sets of all unlearning clients, original labels.
    pub fn unlearn_union(&self) -> Option<Dataset> {
        let parts: Vec<&Dataset> = self
            .clients
            .iter()
            .filter_map(|c| c.split.as_ref().map(|s| &s.unlearn))
            .collect();
        dataset::concat(&parts).ok()
    }

    pub fn unlearning_ids(&self) -> Vec<usize> {
        self.clients
            .iter()
            .filter(|c| c.is_unlearning())
            .map(|c| c.id)
            .collect()
    }
}

/// Seed of the `index`-th repetition of an experiment.
pub fn run_seed(cfg: &ExperimentConfig, index: u64) -> u64 {
    derive_seed(cfg.master_seed, &[index])
}

fn load_data(cfg: &ExperimentConfig, run_seed: u64) -> Result<(Dataset, Dataset)> {
    match &cfg.data {
        DataSource::Blobs {
            train_samples,
            test_samples,
            spread,
        } => {
            let all = dataset::generate_blobs(
                train_samples + test_samples,
                cfg.model.input_dim,
                cfg.model.num_classes,
                *spread,
                derive_seed(run_seed, &[Stream::Data as u64]),
            )?;
            Ok(all.split_at(*train_samples))
        }
        DataSource::Csv { train, test } => {
            let c = Some(cfg.model.num_classes);
            Ok((dataset::load_csv(train, c)?, dataset::load_csv(test, c)?))
        }
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => Ok((
            dataset::load_idx(train_images, train_labels)?,
            dataset::load_idx(test_images, test_labels)?,
        )),
    }
}

/// Data, partition, unlearning requests, drone placement and initial
/// models for one repetition.
pub fn build_setup(cfg: &ExperimentConfig, run_seed: u64) -> Result<Setup> {
    cfg.validate()?;
    let model = Mlp::new(cfg.model.clone())?;
    let (train, test) = load_data(cfg, run_seed)?;
    for ds in [&train, &test] {
        if ds.dims() != cfg.model.input_dim || ds.num_classes != cfg.model.num_classes {
            return Err(Error::InvalidConfig(format!(
                "data has {} features / {} classes, model expects {} / {}",
                ds.dims(),
                ds.num_classes,
                cfg.model.input_dim,
                cfg.model.num_classes
            )));
        }
    }
    let k = cfg.partition.num_clients;
    let parts = dataset::partition(
        &train,
        &PartitionSpec {
            seed: derive_seed(run_seed, &[Stream::Partition as u64, cfg.partition.seed]),
            ..cfg.partition.clone()
        },
    )?;

    // A seeded client order; the first `unlearn_clients` of it unlearn, so
    // sweeps over the request count use nested client sets.
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut seed::rng(derive_seed(
        run_seed,
        &[Stream::ClientPick as u64],
    )));
    let mut unlearning = vec![false; k];
    order[..cfg.unlearn_clients]
        .iter()
        .for_each(|&c| unlearning[c] = true);

    let initial_params = model.init_params_with_seed(derive_seed(
        run_seed,
        &[Stream::ModelInit as u64, cfg.model.init_seed],
    ));

    let field = cfg.field_size_m;
    let base_station = Position::new(field / 2.0, field / 2.0, 0.0);
    let mut place = seed::rng(derive_seed(run_seed, &[Stream::Placement as u64]));

    let mut clients = Vec::with_capacity(k);
    for (id, data) in parts.into_iter().enumerate() {
        let position = Position::new(
            place.random_range(0.0..field),
            place.random_range(0.0..field),
            cfg.drone_height_m,
        );
        let link = channel::link_budget(position, base_station, &cfg.channel, cfg.tx_power_w)?;
        let client_seed = derive_seed(run_seed, &[id as u64]);
        let (split, unlearn_params) = if unlearning[id] {
            let split = match cfg.unlearn_target {
                UnlearnTarget::Samples => dataset::select_unlearn(
                    &data,
                    cfg.unlearn_ratio,
                    derive_seed(run_seed, &[Stream::UnlearnSelect as u64, id as u64]),
                )?,
                UnlearnTarget::Class { class } => dataset::select_unlearn_class(&data, class)?,
            };
            let init = match cfg.unlearn_init {
                UnlearnInit::PerClient => model.init_params_with_seed(derive_seed(
                    run_seed,
                    &[Stream::UnlearnInit as u64, id as u64],
                )),
                UnlearnInit::Shared => initial_params.clone(),
            };
            (Some(split), Some(init))
        } else {
            (None, None)
        };
        clients.push(ClientState {
            id,
            data,
            split,
            unlearn_params,
            position,
            link,
            seed: client_seed,
        });
    }

    Ok(Setup {
        model,
        clients,
        test,
        base_station,
        initial_params,
        run_seed,
    })
}

struct ClientOutcome {
    upload: ParamVector,
    /// Unlearning upload and the size of the client's forget set.
    unlearn_upload: Option<(ParamVector, f64)>,
    unlearn_state: Option<ParamVector>,
    learn_weight: f64,
    payload_bytes: usize,
    compute_s: f64,
    comm_s: f64,
    trained: Vec<(TrainPurpose, Vec<usize>)>,
}

/// Compress an upload. Returns the densified parameters the server sees and
/// the bytes on the wire.
fn encode_upload(
    params: ParamVector,
    prune_fraction: Option<(f64, pruning::MaskScope)>,
) -> Result<(ParamVector, usize)> {
    match prune_fraction {
        Some((p, scope)) if p > 0.0 => {
            let pruned = pruning::l1_prune(&params, p, scope)?;
            let bytes = SparsePayload::from_params(&pruned).payload_bytes();
            Ok((pruned, bytes))
        }
        _ => {
            let bytes = SparsePayload::dense(&params).payload_bytes();
            Ok((params, bytes))
        }
    }
}

fn client_round(
    cfg: &ExperimentConfig,
    setup: &Setup,
    arm: Arm,
    client: &ClientState,
    global: &ParamVector,
    round: usize,
) -> Result<ClientOutcome> {
    let model = &setup.model;
    let master = setup.run_seed;
    let episodes = cfg.sgd.local_episodes;
    let prune = match arm {
        Arm::Soul => Some((cfg.l1_fraction, cfg.l1_scope)),
        Arm::Retrain | Arm::FedauLike => None,
    };
    let mut trained = Vec::new();
    let started = Instant::now();

    let learn_data = match arm {
        Arm::Retrain => client.retained(),
        Arm::Soul | Arm::FedauLike => &client.data,
    };
    let learned = local_train(
        model,
        global,
        learn_data,
        &cfg.sgd,
        round_seed(master, round, client.id, Stream::Learn),
    )?;
    trained.push((TrainPurpose::Learn, learn_data.ids.clone()));
    let mut samples = learn_data.len();

    let mut unlearn_state = None;
    if arm != Arm::Retrain && client.is_unlearning() {
        let combined = unlearning_dataset(
            client,
            round_seed(master, round, client.id, Stream::Relabel),
            cfg.relabel_exclude_original,
        )?;
        let state = client
            .unlearn_params
            .as_ref()
            .ok_or(Error::NotUnlearning(client.id))?;
        let updated = local_train(
            model,
            state,
            &combined,
            &cfg.sgd,
            round_seed(master, round, client.id, Stream::Unlearn),
        )?;
        trained.push((TrainPurpose::Unlearn, combined.ids.clone()));
        samples += combined.len();
        unlearn_state = Some(updated);
    }
    let measured = started.elapsed().as_secs_f64();

    let (upload, mut bytes) = encode_upload(learned, prune)?;
    let unlearn_upload = match (&unlearn_state, &client.split) {
        (Some(state), Some(split)) => {
            let (up, b) = encode_upload(state.clone(), prune)?;
            bytes += b;
            Some((up, split.unlearn.len() as f64))
        }
        _ => None,
    };

    let charge = match (arm, cfg.retrain_charge) {
        (Arm::Retrain, RetrainCharge::PerRequest) => cfg.unlearn_clients.max(1) as f64,
        _ => 1.0,
    };
    let compute_s = charge
        * cfg
            .compute
            .compute_time(client.id, samples, episodes, measured);
    let comm_s = charge * channel::comm_time(bytes, client.link.rate_bps)?;

    Ok(ClientOutcome {
        upload,
        unlearn_upload,
        unlearn_state,
        learn_weight: learn_data.len() as f64,
        payload_bytes: bytes,
        compute_s,
        comm_s,
        trained,
    })
}

/// Server side of a run.
#[derive(Debug, Clone)]
pub struct ServerState {
    /// Global learning model, sent to clients each round.
    pub global: ParamVector,
    /// Rounds completed.
    pub round: usize,
    pub alpha: f64,
    pub beta: f64,
    pub unlearn_weighting: UnlearnWeighting,
}

impl ServerState {
    pub fn new(global: ParamVector, cfg: &ExperimentConfig) -> Result<Self> {
        if !(0.0..=1.0).contains(&cfg.alpha) {
            return Err(Error::OutOfRange(format!(
                "alpha {} not in [0, 1]",
                cfg.alpha
            )));
        }
        if !(cfg.beta > 0.0 && cfg.beta <= 1.0) {
            return Err(Error::OutOfRange(format!(
                "beta {} not in (0, 1]",
                cfg.beta
            )));
        }
        Ok(Self {
            global,
            round: 0,
            alpha: cfg.alpha,
            beta: cfg.beta,
            unlearn_weighting: cfg.unlearn_weighting,
        })
    }

    /// Weight basis for an unlearning client that forgets `forget_len` rows.
    pub fn weight_basis(&self, forget_len: usize) -> f64 {
        match self.unlearn_weighting {
            UnlearnWeighting::ByUnlearnCount => forget_len as f64,
            UnlearnWeighting::Uniform => 1.0,
        }
    }
}

/// Result of one arm of one repetition.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub arm: Arm,
    /// Output model: the unlearned model of the last round (for the retrain
    /// arm, the retrained global model).
    pub final_params: ParamVector,
    /// Global learning model after the last aggregation.
    pub final_global: ParamVector,
    pub history: Vec<RoundRecord>,
    pub setup: Setup,
}

/// Run one arm on a prepared setup.
pub fn run_with_setup(
    cfg: &ExperimentConfig,
    mut setup: Setup,
    arm: Arm,
    observer: &mut dyn RunObserver,
) -> Result<RunOutcome> {
    let remain = setup.remain_union()?;
    let forget = setup.unlearn_union();
    let mut server = ServerState::new(setup.initial_params.clone(), cfg)?;
    let mut output = server.global.clone();
    let mut history = Vec::with_capacity(cfg.rounds);

    for round in 0..cfg.rounds {
        let outcomes: Vec<ClientOutcome> = setup
            .clients
            .par_iter()
            .map(|c| client_round(cfg, &setup, arm, c, &server.global, round))
            .collect::<Result<_>>()?;

        for (client, out) in setup.clients.iter_mut().zip(&outcomes) {
            for (purpose, ids) in &out.trained {
                observer.on_local_train(round, client.id, *purpose, ids);
            }
            if let Some(state) = &out.unlearn_state {
                client.unlearn_params = Some(state.clone());
            }
        }

        let uploads: Vec<ParamVector> = outcomes.iter().map(|o| o.upload.clone()).collect();
        server.global = match cfg.aggregation {
            Aggregation::Unweighted => aggregate(&uploads)?,
            Aggregation::BySize => {
                let w: Vec<f64> = outcomes.iter().map(|o| o.learn_weight).collect();
                aggregate_weighted(&uploads, &w)?
            }
        };

        let unlearn: Vec<(ParamVector, f64)> = outcomes
            .iter()
            .filter_map(|o| o.unlearn_upload.clone())
            .map(|(p, n)| (p, server.weight_basis(n as usize)))
            .collect();
        let global = &server.global;
        let mut selectively_pruned = 0;
        output = match arm {
            _ if unlearn.is_empty() => global.clone(),
            Arm::Soul => {
                let (p, mask) = server_unlearn(
                    global,
                    &unlearn,
                    server.alpha,
                    server.beta,
                    cfg.selective_mask,
                )?;
                selectively_pruned = mask.kept_count();
                p
            }
            Arm::FedauLike => blend(global, &average_unlearning(&unlearn)?, server.alpha)?,
            Arm::Retrain => global.clone(),
        };

        let compute_s: Vec<f64> = outcomes.iter().map(|o| o.compute_s).collect();
        let comm_s: Vec<f64> = outcomes.iter().map(|o| o.comm_s).collect();
        let pairs: Vec<(f64, f64)> = compute_s
            .iter()
            .copied()
            .zip(comm_s.iter().copied())
            .collect();
        let record = RoundRecord {
            round,
            acc_remain: eval_accuracy(&setup.model, &output, &remain)?,
            acc_test: eval_accuracy(&setup.model, &output, &setup.test)?,
            acc_unlearn: forget
                .as_ref()
                .map(|f| eval_accuracy(&setup.model, &output, f))
                .transpose()?,
            payload_bytes: outcomes.iter().map(|o| o.payload_bytes).collect(),
            total_s: channel::round_time(&pairs)?,
            compute_s,
            comm_s,
            selectively_pruned,
        };
        observer.on_round(&record);
        history.push(record);

        if cfg.distribute_unlearned {
            server.global = output.clone();
        }
        server.round += 1;
    }

    Ok(RunOutcome {
        arm,
        final_params: output,
        final_global: server.global,
        history,
        setup,
    })
}

/// Run `arm` for repetition `seed_index`.
pub fn run_arm(
    cfg: &ExperimentConfig,
    arm: Arm,
    seed_index: u64,
    observer: &mut dyn RunObserver,
) -> Result<RunOutcome> {
    let setup = build_setup(cfg, run_seed(cfg, seed_index))?;
    run_with_setup(cfg, setup, arm, observer)
}

/// Full unlearning pipeline, first repetition.
pub fn run_training(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    run_arm(cfg, Arm::Soul, 0, &mut NoObserver)
}

/// Federated averaging from scratch on retained data only.
pub fn run_retrain(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    run_arm(cfg, Arm::Retrain, 0, &mut NoObserver)
}

/// Blend-only baseline: no upload pruning and no selective pruning.
pub fn run_fedau_like(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    run_arm(cfg, Arm::FedauLike, 0, &mut NoObserver)
}
