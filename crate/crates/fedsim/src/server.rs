//! Server-side orchestration: one communication round and the full
//! federation loop.
//!
//! A round trains every client, collects only their global-block values,
//! averages each position over exactly the clients that still hold it
//! globally, and hands the aggregate back. Personalized values never travel:
//! an `Upload` physically contains nothing but the global positions, so the
//! privacy boundary is enforced by construction rather than by convention.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::baselines;
use crate::config::{AlgorithmSpec, DataConfig, FLConfig};
use crate::data::{self, PartitionSpec};
use crate::error::{FedError, Result};
use crate::harness::evaluate_client;
use crate::local_update::{self, LocalConfig};
use crate::mask::{self, BinaryMask};
use crate::model::{self, ParamVector};
use crate::report::{theta_checksum, RoundReport};
use crate::seed::{
    derive_seed, STREAM_CLIENT_BASE, STREAM_DATA, STREAM_INIT, STREAM_PARTITION,
    STREAM_RANDOM_PARTITION, STREAM_SHIFT,
};

/// Everything one simulated client owns.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub theta: ParamVector,
    pub mask: BinaryMask,
    pub train: data::Dataset,
    pub test: data::Dataset,
    /// Classes present in this client's data, ascending.
    pub classes: Vec<usize>,
    pub seed: u64,
    pub rng: ChaCha8Rng,
}

/// The wire message a client sends: values of its global positions only,
/// in ascending index order, plus the mask that defines those positions.
#[derive(Debug, Clone)]
pub struct Upload {
    pub client_id: usize,
    pub mask: BinaryMask,
    pub values: Vec<f64>,
}

impl Upload {
    pub fn from_trained(client_id: usize, trained: &ParamVector, mask: &BinaryMask) -> Upload {
        assert_eq!(
            trained.dim(),
            mask.len(),
            "mask length must match parameter count"
        );
        let values = trained
            .values()
            .iter()
            .zip(mask.bits())
            .filter(|(_, &personalized)| !personalized)
            .map(|(&v, _)| v)
            .collect();
        Upload {
            client_id,
            mask: mask.clone(),
            values,
        }
    }
}

/// Result of masked aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    /// Per-position mean over contributing clients; 0.0 where nobody
    /// contributed.
    pub theta_g: Vec<f64>,
    /// Contributor count per position.
    pub omega: Vec<u32>,
    /// Positions with at least one contributor.
    pub m_g: BinaryMask,
}

/// Average uploads position-wise over exactly the clients whose mask leaves
/// that position global. Uploads must arrive in ascending client order; the
/// summation order is part of the reproducibility contract.
pub fn aggregate(uploads: &[Upload], dim: usize) -> Aggregate {
    let mut sums = vec![0.0f64; dim];
    let mut omega = vec![0u32; dim];
    for upload in uploads {
        assert_eq!(upload.mask.len(), dim, "upload mask length mismatch");
        let mut cursor = 0;
        for (i, &personalized) in upload.mask.bits().iter().enumerate() {
            if !personalized {
                sums[i] += upload.values[cursor];
                omega[i] += 1;
                cursor += 1;
            }
        }
        assert_eq!(cursor, upload.values.len(), "upload value count mismatch");
    }
    let theta_g: Vec<f64> = sums
        .iter()
        .zip(&omega)
        .map(|(&s, &w)| if w > 0 { s / f64::from(w) } else { 0.0 })
        .collect();
    let m_g = BinaryMask::from_bits(omega.iter().map(|&w| w > 0).collect());
    Aggregate {
        theta_g,
        omega,
        m_g,
    }
}

/// Merge the aggregate into one client's trained parameters: personalized
/// positions keep the client's value, aggregated global positions take the
/// server mean, and global positions nobody covered keep the client's own
/// locally trained value.
pub fn distribute(agg: &Aggregate, trained: &ParamVector, m_old: &BinaryMask) -> Vec<f64> {
    assert_eq!(
        trained.dim(),
        agg.theta_g.len(),
        "aggregate length mismatch"
    );
    assert_eq!(trained.dim(), m_old.len(), "mask length mismatch");
    trained
        .values()
        .iter()
        .enumerate()
        .map(|(i, &own)| {
            if !m_old.get(i) && agg.m_g.get(i) {
                agg.theta_g[i]
            } else {
                own
            }
        })
        .collect()
}

/// One communication round for the mask-based algorithms (growing or
/// frozen). Clients train under their current mask, upload their global
/// block, and receive the aggregate; grown masks take effect next round.
pub fn run_round(
    clients: &mut [ClientState],
    local: &LocalConfig,
    parallel: bool,
    round: usize,
) -> Result<RoundReport> {
    assert!(!clients.is_empty(), "run_round needs at least one client");
    let dim = clients[0].theta.dim();

    let train_one = |c: &mut ClientState| {
        local_update::grad_select(&c.theta, &c.mask, &c.train, &mut c.rng, local)
    };
    let results: Vec<(ParamVector, BinaryMask)> = if parallel {
        clients
            .par_iter_mut()
            .map(train_one)
            .collect::<Result<Vec<_>>>()?
    } else {
        clients
            .iter_mut()
            .map(train_one)
            .collect::<Result<Vec<_>>>()?
    };

    let uploads: Vec<Upload> = clients
        .iter()
        .zip(&results)
        .map(|(c, (trained, _))| Upload::from_trained(c.id, trained, &c.mask))
        .collect();
    let agg = aggregate(&uploads, dim);
    let checksum = theta_checksum(&agg.theta_g, &agg.m_g);

    let mut sparsities = Vec::with_capacity(clients.len());
    let mut upload_counts = Vec::with_capacity(clients.len());
    for (c, (trained, new_mask)) in clients.iter_mut().zip(results) {
        assert!(
            c.mask.is_subset_of(&new_mask),
            "mask growth must never drop a personalized position"
        );
        upload_counts.push(dim - c.mask.popcount());
        let merged = distribute(&agg, &trained, &c.mask);
        c.theta = ParamVector::from_values(Arc::clone(c.theta.layout()), merged);
        c.mask = new_mask;
        sparsities.push(c.mask.personalized_fraction());
    }

    let accuracies = clients
        .iter()
        .map(|c| evaluate_client(&c.theta, &c.test))
        .collect::<Result<Vec<_>>>()?;
    Ok(RoundReport::new(
        round,
        accuracies,
        sparsities,
        upload_counts,
        checksum,
    ))
}

fn initial_mask(cfg: &FLConfig, layout: &crate::model::Layout, dim: usize) -> Result<BinaryMask> {
    match &cfg.algorithm {
        AlgorithmSpec::Fedselect
        | AlgorithmSpec::Fedavg
        | AlgorithmSpec::FedavgFt { .. }
        | AlgorithmSpec::PersonalizeLeast => Ok(BinaryMask::zeros(dim)),
        // A local-only client is fully personalized from the start.
        AlgorithmSpec::LocalOnly => Ok(BinaryMask::ones(dim)),
        AlgorithmSpec::FixedPartition { layer, mask } => {
            let m = match (layer, mask) {
                (Some(l), None) => mask::layer_mask(layout, *l)?,
                (None, Some(rle)) => {
                    let m = BinaryMask::from_rle(rle)?;
                    if m.len() != dim {
                        return Err(FedError::Config(format!(
                            "fixed partition mask has {} bits but the model has {dim} parameters",
                            m.len()
                        )));
                    }
                    m
                }
                _ => unreachable!("validated at config load"),
            };
            Ok(m)
        }
        AlgorithmSpec::RandomPartition { fraction } => Ok(baselines::random_partition(
            dim,
            *fraction,
            derive_seed(cfg.federation.master_seed, STREAM_RANDOM_PARTITION),
        )),
    }
}

/// Materialize every client for a run: pool data, partition, per-client
/// shift, shared initial parameters, algorithm-specific initial mask, and a
/// private RNG stream per client.
pub fn build_clients(cfg: &FLConfig) -> Result<Vec<ClientState>> {
    cfg.validate()?;
    let master = cfg.federation.master_seed;
    let pool = match &cfg.data {
        DataConfig::Blobs {
            classes,
            input_dim,
            samples_per_class,
            spread,
            ..
        } => data::synth_blobs(
            *classes,
            *input_dim,
            *samples_per_class,
            *spread,
            derive_seed(master, STREAM_DATA),
        )?,
        DataConfig::Csv { path, .. } => data::load_csv(path)?,
    };
    let spec = PartitionSpec {
        n_clients: cfg.federation.n_clients,
        shard: cfg.data.shard(),
        train_size: cfg.data.train_size(),
        test_size: cfg.data.test_size(),
        seed: derive_seed(master, STREAM_PARTITION),
    };
    let splits = data::shard_partition(&pool, &spec)?;

    let arch = cfg.arch(pool.input_dim(), pool.class_count());
    let theta0 = model::init_params(&arch, derive_seed(master, STREAM_INIT))?;
    let mask0 = initial_mask(cfg, theta0.layout(), theta0.dim())?;

    let severity = cfg.data.feature_shift();
    let shift_seed = derive_seed(master, STREAM_SHIFT);
    Ok(splits
        .into_iter()
        .enumerate()
        .map(|(k, split)| {
            let seed = derive_seed(master, STREAM_CLIENT_BASE + k as u64);
            ClientState {
                id: k,
                theta: theta0.clone(),
                mask: mask0.clone(),
                train: data::apply_feature_shift(&split.train, k, severity, shift_seed),
                test: data::apply_feature_shift(&split.test, k, severity, shift_seed),
                classes: split.classes,
                seed,
                rng: ChaCha8Rng::seed_from_u64(seed),
            }
        })
        .collect())
}

/// A finished run: per-round reports plus the final client states.
#[derive(Debug)]
pub struct FederationRun {
    pub reports: Vec<RoundReport>,
    pub clients: Vec<ClientState>,
    /// Accuracy of each client's final model (after fine-tuning, for the
    /// fine-tuned baseline).
    pub final_accuracy: Vec<f64>,
}

/// Callback invoked after every round with the post-round client states.
pub type RoundObserver<'a> = dyn FnMut(usize, &[ClientState], &RoundReport) -> Result<()> + 'a;

/// Run the configured algorithm for the configured number of rounds.
pub fn run_federation(
    cfg: &FLConfig,
    mut observer: Option<&mut RoundObserver>,
) -> Result<FederationRun> {
    let mut clients = build_clients(cfg)?;
    let local = cfg.local_config(cfg.data.train_size());
    local.validate()?;
    let parallel = cfg.federation.parallel;

    let mut reports = Vec::with_capacity(cfg.federation.rounds);
    for round in 0..cfg.federation.rounds {
        let report = match &cfg.algorithm {
            AlgorithmSpec::Fedselect
            | AlgorithmSpec::PersonalizeLeast
            | AlgorithmSpec::FixedPartition { .. }
            | AlgorithmSpec::RandomPartition { .. } => {
                run_round(&mut clients, &local, parallel, round)?
            }
            AlgorithmSpec::Fedavg | AlgorithmSpec::FedavgFt { .. } => {
                baselines::fedavg_round(&mut clients, &local, parallel, round)?
            }
            AlgorithmSpec::LocalOnly => {
                baselines::local_only_round(&mut clients, &local, parallel, round)?
            }
        };
        if let Some(obs) = observer.as_deref_mut() {
            obs(round, &clients, &report)?;
        }
        reports.push(report);
    }

    if let AlgorithmSpec::FedavgFt { ft_epochs } = cfg.algorithm {
        baselines::fedavg_ft(&mut clients, &local, ft_epochs, parallel)?;
    }
    let final_accuracy = clients
        .iter()
        .map(|c| evaluate_client(&c.theta, &c.test))
        .collect::<Result<Vec<_>>>()?;
    Ok(FederationRun {
        reports,
        clients,
        final_accuracy,
    })
}
