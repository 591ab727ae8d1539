//! Federated Averaging over simulated clients.
//!
//! Each round samples clients without replacement, runs one local pass per
//! client from the current global weights with a fresh Adam state, and
//! replaces the global weights with the sample-count-weighted mean of the
//! client weights. Only parameters travel; optimizer moments stay local and
//! are discarded after the round.
//!
//! Aggregation accumulates in `f64` in ascending client-id order, so running
//! local updates on a thread pool gives the same result as running them
//! one after another.

use log::{debug, warn};
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ClientDataset, TokenSequence};
use crate::metrics::{evaluate, EvalTotals, MaskMode, MetricsError};
use crate::model::{init_params, Float, ModelConfig, ModelError, ModelParameters};
use crate::optim::{AdamHyper, AdamState};
use crate::seed::{self, Part};
use crate::training::{shuffled_order, train_pass, TrainOptions, TrainingError};

#[derive(Debug, thiserror::Error)]
pub enum FederationError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("round {0}: no sampled client had any data")]
    EmptyRound(usize),
    #[error("client {client}: {source}")]
    Client {
        client: String,
        source: TrainingError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

type Result<T> = std::result::Result<T, FederationError>;

/// Round-level protocol settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederatedConfig {
    pub clients_per_round: usize,
    pub batch_size: usize,
    pub total_rounds: usize,
    /// Local passes per round; only 1 is supported.
    pub local_epochs: usize,
    pub per_client_cap: usize,
    pub eval_samples: usize,
    pub eval_every: usize,
    /// Evaluation batch size; does not affect results.
    pub eval_batch_size: usize,
    pub rng_seed: u64,
}

impl Default for FederatedConfig {
    fn default() -> Self {
        FederatedConfig {
            clients_per_round: 10,
            batch_size: 16,
            total_rounds: 800,
            local_epochs: 1,
            per_client_cap: 5000,
            eval_samples: 20_000,
            eval_every: 1,
            eval_batch_size: 64,
            rng_seed: 0,
        }
    }
}

impl FederatedConfig {
    /// Settings of the adaptive-optimizer baseline comparison.
    pub fn adaptive_baseline() -> Self {
        FederatedConfig {
            clients_per_round: 50,
            per_client_cap: 128,
            total_rounds: 1500,
            eval_samples: 10_000,
            ..FederatedConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(FederationError::InvalidArgument(what.to_string()))
            }
        };
        check(
            self.clients_per_round >= 1,
            "clients_per_round must be >= 1",
        )?;
        check(self.local_epochs == 1, "local_epochs must be 1")?;
        check(self.batch_size >= 1, "batch_size must be >= 1")?;
        check(self.per_client_cap >= 1, "per_client_cap must be >= 1")?;
        check(self.eval_every >= 1, "eval_every must be >= 1")?;
        check(self.eval_batch_size >= 1, "eval_batch_size must be >= 1")
    }
}

/// Loss and accuracies for one split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub accuracy_no_oov_no_eos: f64,
}

/// What happened in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    /// 1-based.
    pub round: usize,
    /// Sample-weighted over the round's clients, from pre-update predictions.
    pub train: SplitMetrics,
    /// Present on evaluation rounds.
    pub validation: Option<SplitMetrics>,
    pub sampled_client_ids: Vec<String>,
}

/// A client's weights after its local pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate<F = f32> {
    pub params: ModelParameters<F>,
    /// Number of samples; the averaging weight.
    pub weight: usize,
    pub client_id: String,
    /// Mean training loss over the pass.
    pub local_loss: f64,
    pub totals: EvalTotals,
}

/// Picks `k` distinct clients, a deterministic function of `(rng_seed, round)`.
pub fn sample_clients(
    pool: &[ClientDataset],
    k: usize,
    round: usize,
    rng_seed: u64,
) -> Result<Vec<&ClientDataset>> {
    if k > pool.len() {
        return Err(FederationError::InvalidArgument(format!(
            "cannot sample {k} clients from a pool of {}",
            pool.len()
        )));
    }
    let mut rng = seed::stream(rng_seed, "sample-clients", &[Part::Int(round as u64)]);
    Ok(index::sample(&mut rng, pool.len(), k)
        .into_iter()
        .map(|i| &pool[i])
        .collect())
}

/// Visit order of a client's samples in a given round.
pub fn local_order(rng_seed: u64, round: usize, client_id: &str, n: usize) -> Vec<usize> {
    let mut rng = seed::stream(
        rng_seed,
        "local-shuffle",
        &[Part::Int(round as u64), Part::Str(client_id)],
    );
    shuffled_order(n, &mut rng)
}

/// One local pass from the global weights. Returns `None` (with a warning)
/// for a client without samples.
pub fn local_update<F: Float>(
    global: &ModelParameters<F>,
    client: &ClientDataset,
    round: usize,
    config: &FederatedConfig,
    hyper: &AdamHyper,
    clip_norm: Option<f64>,
) -> Result<Option<ClientUpdate<F>>> {
    if client.sequences.is_empty() {
        warn!(
            "round {round}: client {:?} has no samples; skipped",
            client.client_id
        );
        return Ok(None);
    }
    let mut params = global.clone();
    let mut adam = AdamState::for_params(&params);
    let order = local_order(
        config.rng_seed,
        round,
        &client.client_id,
        client.sequences.len(),
    );
    let options = TrainOptions {
        batch_size: config.batch_size,
        hyper: *hyper,
        clip_norm,
    };
    let totals = train_pass(&mut params, &mut adam, &client.sequences, &order, &options).map_err(
        |source| FederationError::Client {
            client: client.client_id.clone(),
            source,
        },
    )?;
    Ok(Some(ClientUpdate {
        params,
        weight: client.num_samples,
        client_id: client.client_id.clone(),
        local_loss: totals.mean_loss(),
        totals,
    }))
}

/// `Σ wᵢ·pᵢ / Σ wᵢ` elementwise, accumulated in `f64` in ascending client-id order.
pub fn weighted_average<F: Float>(updates: &[ClientUpdate<F>]) -> Result<ModelParameters<F>> {
    let first = updates
        .first()
        .ok_or_else(|| FederationError::InvalidArgument("no client updates to average".into()))?;
    if updates.iter().any(|u| !u.params.same_shape(&first.params)) {
        return Err(FederationError::InvalidArgument(
            "client updates have different shapes".into(),
        ));
    }
    if updates.iter().any(|u| u.weight == 0) {
        return Err(FederationError::InvalidArgument(
            "client weight must be >= 1".into(),
        ));
    }
    let mut ordered: Vec<&ClientUpdate<F>> = updates.iter().collect();
    ordered.sort_by(|a, b| a.client_id.cmp(&b.client_id));

    let total: f64 = ordered.iter().map(|u| u.weight as f64).sum();
    let mut out = first.params.zeros_like();
    for (k, dst) in out.slices_mut().into_iter().enumerate() {
        let mut acc = vec![0.0f64; dst.len()];
        for u in &ordered {
            let w = u.weight as f64 / total;
            for (a, &p) in acc.iter_mut().zip(u.params.slices()[k]) {
                *a += w * p.as_f64();
            }
        }
        for (d, a) in dst.iter_mut().zip(acc) {
            *d = F::of(a);
        }
    }
    Ok(out)
}

fn weighted_train_metrics<F>(updates: &[ClientUpdate<F>]) -> SplitMetrics {
    let total: f64 = updates.iter().map(|u| u.weight as f64).sum();
    let mean = |f: &dyn Fn(&ClientUpdate<F>) -> f64| {
        updates.iter().map(|u| u.weight as f64 * f(u)).sum::<f64>() / total
    };
    SplitMetrics {
        loss: mean(&|u| u.local_loss),
        accuracy: mean(&|u| u.totals.counts.accuracy_or_zero(MaskMode::All)),
        accuracy_no_oov_no_eos: mean(&|u| u.totals.counts.accuracy_or_zero(MaskMode::NoOovNoEos)),
    }
}

/// Everything a federated run needs besides data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSettings {
    pub model: ModelConfig,
    pub federation: FederatedConfig,
    pub hyper: AdamHyper,
    pub clip_norm: Option<f64>,
}

/// Result of [`run_training`].
#[derive(Debug, Clone)]
pub struct TrainingOutcome<F = f32> {
    pub final_params: ModelParameters<F>,
    /// Weights at the round with the best validation accuracy (earliest on ties).
    pub best_params: Option<ModelParameters<F>>,
    pub best_round: Option<usize>,
    pub reports: Vec<RoundReport>,
}

/// Seed used for the global model when no initial weights are given.
pub fn model_init_seed(rng_seed: u64) -> u64 {
    seed::derive(rng_seed, "model-init", &[])
}

/// Runs `total_rounds` of Federated Averaging. Local updates run on the
/// current rayon pool; `on_round` sees each report as it is produced.
pub fn run_training<F: Float>(
    settings: &RunSettings,
    clients: &[ClientDataset],
    eval_set: &[TokenSequence],
    initial_params: Option<ModelParameters<F>>,
    mut on_round: impl FnMut(&RoundReport),
) -> Result<TrainingOutcome<F>> {
    let fed = &settings.federation;
    fed.validate()?;
    let mut global = match initial_params {
        Some(p) => {
            if p.config() != settings.model {
                return Err(FederationError::InvalidArgument(format!(
                    "initial parameters {:?} do not match model config {:?}",
                    p.config(),
                    settings.model
                )));
            }
            p
        }
        None => init_params(&settings.model, model_init_seed(fed.rng_seed), None)?,
    };
    let mut reports = Vec::with_capacity(fed.total_rounds);
    let mut best: Option<(f64, usize, ModelParameters<F>)> = None;

    for round in 1..=fed.total_rounds {
        let sampled = sample_clients(clients, fed.clients_per_round, round, fed.rng_seed)?;
        let results: Vec<Result<Option<ClientUpdate<F>>>> = sampled
            .par_iter()
            .map(|c| local_update(&global, c, round, fed, &settings.hyper, settings.clip_norm))
            .collect();
        let mut updates = Vec::with_capacity(results.len());
        for r in results {
            if let Some(u) = r? {
                updates.push(u);
            }
        }
        if updates.is_empty() {
            return Err(FederationError::EmptyRound(round));
        }
        global = weighted_average(&updates)?;
        let train = weighted_train_metrics(&updates);

        let validation = if round % fed.eval_every == 0 && !eval_set.is_empty() {
            let r = evaluate(&global, eval_set, fed.eval_batch_size)?;
            Some(SplitMetrics {
                loss: r.loss,
                accuracy: r.accuracy,
                accuracy_no_oov_no_eos: r.accuracy_no_oov_no_eos,
            })
        } else {
            None
        };
        if let Some(v) = &validation {
            if best.as_ref().is_none_or(|(acc, _, _)| v.accuracy > *acc) {
                best = Some((v.accuracy, round, global.clone()));
            }
        }
        let report = RoundReport {
            round,
            train,
            validation,
            sampled_client_ids: sampled.iter().map(|c| c.client_id.clone()).collect(),
        };
        debug!("round {round}: {report:?}");
        on_round(&report);
        reports.push(report);
    }

    let (best_round, best_params) = match best {
        Some((_, r, p)) => (Some(r), Some(p)),
        None => (None, None),
    };
    Ok(TrainingOutcome {
        final_params: global,
        best_params,
        best_round,
        reports,
    })
}
