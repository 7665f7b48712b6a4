//! Independent checkers for the simulator's two structural guarantees: the
//! round at which growing masks stop changing, and the equivalence of one
//! federated round with a block-coordinate SGD step on the union objective.
//!
//! Everything here recomputes its answer from first principles (finite
//! differences, a separate union-problem stepper, a closed-form round bound)
//! rather than calling back into the training path, so a bug in the
//! simulator cannot hide inside its own verifier.

use std::sync::Arc;

use serde::Serialize;

use crate::config::FLConfig;
use crate::error::{FedError, Result};
use crate::local_update::LocalConfig;
use crate::mask::BinaryMask;
use crate::model::{self, Batch, Layout, ParamVector};
use crate::server::{build_clients, run_round, ClientState};

/// Central-difference gradient of the batch loss, one coordinate at a time.
/// Slow by design; use it only to cross-check the analytic gradient.
pub fn finite_difference_gradient(theta: &ParamVector, batch: &Batch, step: f64) -> ParamVector {
    assert!(step > 0.0, "finite difference step must be positive");
    let mut grad = ParamVector::zeros(Arc::clone(theta.layout()));
    let mut probe = theta.clone();
    for i in 0..theta.dim() {
        let original = probe.values()[i];
        probe.values_mut()[i] = original + step;
        let up = model::forward_loss(&probe, batch).expect("probe batch must be valid");
        probe.values_mut()[i] = original - step;
        let down = model::forward_loss(&probe, batch).expect("probe batch must be valid");
        probe.values_mut()[i] = original;
        grad.values_mut()[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// The union objective: one shared global vector plus one personal block per
/// client, stitched together per client by its mask. Stepping it alternates
/// a personal-block step for every client with a single global-block step
/// whose per-position learning rate is scaled by the contributor count.
#[derive(Debug, Clone)]
pub struct UnionProblem {
    layout: Arc<Layout>,
    pub global: Vec<f64>,
    pub personal: Vec<Vec<f64>>,
    pub masks: Vec<BinaryMask>,
    /// Personal-block rate per client; uniform unless a test perturbs one.
    pub v_rates: Vec<f64>,
    pub gamma_u: f64,
}

impl UnionProblem {
    /// Snapshot a federation into union-problem coordinates. Fails if two
    /// clients disagree on a position they both consider global, because
    /// then no single global vector reproduces them.
    pub fn from_states(
        clients: &[ClientState],
        gamma_v: f64,
        gamma_u: f64,
    ) -> Result<UnionProblem> {
        if clients.is_empty() {
            return Err(FedError::Input(
                "union problem needs at least one client".into(),
            ));
        }
        let dim = clients[0].theta.dim();
        let mut global = vec![0.0f64; dim];
        let mut seen = vec![false; dim];
        for c in clients {
            for i in 0..dim {
                if c.mask.get(i) {
                    continue;
                }
                let v = c.theta.values()[i];
                if seen[i] {
                    if global[i].to_bits() != v.to_bits() {
                        return Err(FedError::Input(format!(
                            "clients disagree on shared position {i}"
                        )));
                    }
                } else {
                    global[i] = v;
                    seen[i] = true;
                }
            }
        }
        Ok(UnionProblem {
            layout: Arc::clone(clients[0].theta.layout()),
            global,
            personal: clients.iter().map(|c| c.theta.values().to_vec()).collect(),
            masks: clients.iter().map(|c| c.mask.clone()).collect(),
            v_rates: vec![gamma_v; clients.len()],
            gamma_u,
        })
    }

    pub fn client_count(&self) -> usize {
        self.masks.len()
    }

    /// Stitch client `k`'s working parameters: personal positions from its
    /// block, everything else from the shared global vector.
    pub fn client_theta(&self, k: usize) -> ParamVector {
        let values = (0..self.global.len())
            .map(|i| {
                if self.masks[k].get(i) {
                    self.personal[k][i]
                } else {
                    self.global[i]
                }
            })
            .collect();
        ParamVector::from_values(Arc::clone(&self.layout), values)
    }

    /// Contributor count per position.
    pub fn omega(&self) -> Vec<u32> {
        let mut omega = vec![0u32; self.global.len()];
        for m in &self.masks {
            for (i, w) in omega.iter_mut().enumerate() {
                if !m.get(i) {
                    *w += 1;
                }
            }
        }
        omega
    }

    /// The global-block step size actually applied at position `i`:
    /// `gamma_u * n / omega[i]`, or zero where nobody shares the position.
    pub fn effective_global_lr(&self, i: usize) -> f64 {
        let omega = self.omega();
        if omega[i] == 0 {
            0.0
        } else {
            self.gamma_u * self.client_count() as f64 / f64::from(omega[i])
        }
    }

    /// One block-coordinate round on the union objective: every client steps
    /// its personal block on its own batch, then the global vector takes a
    /// single step against the mean contributor gradient evaluated at the
    /// already-updated personal blocks.
    pub fn round(&mut self, batches: &[Batch]) -> Result<()> {
        let n = self.client_count();
        assert_eq!(batches.len(), n, "one batch per client");
        let dim = self.global.len();

        for (k, batch) in batches.iter().enumerate() {
            let grad = model::gradient(&self.client_theta(k), batch)?;
            for i in 0..dim {
                if self.masks[k].get(i) {
                    self.personal[k][i] -= self.v_rates[k] * grad.values()[i];
                }
            }
        }

        let mut sums = vec![0.0; dim];
        let mut omega = vec![0u32; dim];
        for (k, batch) in batches.iter().enumerate() {
            let grad = model::gradient(&self.client_theta(k), batch)?;
            for i in 0..dim {
                if !self.masks[k].get(i) {
                    sums[i] += grad.values()[i];
                    omega[i] += 1;
                }
            }
        }
        for i in 0..dim {
            if omega[i] > 0 {
                self.global[i] -= self.gamma_u * sums[i] / f64::from(omega[i]);
            }
        }
        Ok(())
    }
}

/// Masks splitting positions round-robin into `n + 1` groups: group 0 is
/// personal for everyone, group `k + 1` is personal for client `k` alone.
/// Every aggregated position then has exactly `n - 1` contributors, which
/// makes the scaled global step rate visible.
pub fn pattern_masks(dim: usize, n: usize) -> Vec<BinaryMask> {
    assert!(n >= 2, "pattern masks need at least two clients");
    assert!(dim > n, "pattern masks need more positions than groups");
    (0..n)
        .map(|k| {
            BinaryMask::from_bits(
                (0..dim)
                    .map(|i| i % (n + 1) == 0 || i % (n + 1) == k + 1)
                    .collect(),
            )
        })
        .collect()
}

/// Upper bound on the round index at which every client's mask has stopped
/// changing: enough growth rounds to push the personalized fraction past
/// `alpha`, plus one round for the final mask to take effect.
pub fn mask_convergence_bound(p: f64, alpha: f64, dim: usize) -> usize {
    assert!(p > 0.0 && p <= 1.0, "p must lie in (0, 1]");
    assert!((0.0..=1.0).contains(&alpha), "alpha must lie in [0, 1]");
    assert!(dim > 0, "dimension must be positive");
    if alpha == 0.0 || p == 1.0 {
        return 1;
    }
    let growth_rounds = if alpha == 1.0 {
        // Saturation needs the global count to fall below one whole
        // position; the geometric shrink rate gives a dimension-dependent
        // round count (promotion counts round up, so this over-covers).
        ((dim as f64).ln() / -(1.0 - p).ln()).ceil() as usize + 1
    } else {
        ((1.0 - alpha).ln() / (1.0 - p).ln()).ceil() as usize
    };
    growth_rounds + 1
}

/// Outcome of replaying a configured run and auditing its mask trajectory.
#[derive(Debug, Clone, Serialize)]
pub struct MaskConvergenceReport {
    /// Closed-form bound on the convergence round.
    pub bound: usize,
    /// First round index from which no client's mask changed again.
    pub converged_at: usize,
    /// Every mask contained its predecessor in every round.
    pub monotone: bool,
    pub final_fractions: Vec<f64>,
    pub fraction_low: f64,
    pub fraction_high: f64,
    pub passed: bool,
}

/// Run the configured federation and check its mask trajectory: growth must
/// be monotone, settle no later than the closed-form bound, and stop inside
/// the predicted fraction band.
pub fn verify_mask_convergence(cfg: &FLConfig) -> Result<MaskConvergenceReport> {
    let local = cfg.local_config(cfg.data.train_size());
    let Some(growth) = local.growth else {
        return Err(FedError::Config(
            "mask convergence verification needs a mask-growing algorithm".into(),
        ));
    };

    let probe = build_clients(cfg)?;
    let dim = probe[0].theta.dim();
    let bound = mask_convergence_bound(growth.p, growth.alpha, dim);
    if cfg.federation.rounds <= bound {
        return Err(FedError::Config(format!(
            "run of {} rounds cannot witness convergence by round {bound}; raise rounds",
            cfg.federation.rounds
        )));
    }

    let mut trajectory: Vec<Vec<BinaryMask>> = vec![probe.iter().map(|c| c.mask.clone()).collect()];
    crate::server::run_federation(
        cfg,
        Some(
            &mut |_, clients: &[ClientState], _: &crate::report::RoundReport| {
                trajectory.push(clients.iter().map(|c| c.mask.clone()).collect());
                Ok(())
            },
        ),
    )?;

    let mut monotone = true;
    let mut last_change = 0usize;
    for (r, window) in trajectory.windows(2).enumerate() {
        let (before, after) = (&window[0], &window[1]);
        for (b, a) in before.iter().zip(after) {
            if !b.is_subset_of(a) {
                monotone = false;
            }
        }
        if before != after {
            last_change = r + 1;
        }
    }
    // trajectory[r + 1] holds the masks after round r, so the first quiet
    // round index is the last round that changed anything.
    let converged_at = last_change;

    let final_fractions: Vec<f64> = trajectory
        .last()
        .unwrap()
        .iter()
        .map(BinaryMask::personalized_fraction)
        .collect();
    let fraction_low = final_fractions
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let fraction_high = final_fractions
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);

    let (lo_ok, hi_ok) = if growth.alpha == 0.0 {
        (fraction_low == 0.0, fraction_high == 0.0)
    } else {
        // One growth round can overshoot by at most p of the remaining
        // global block plus a single rounded-up position.
        let cap = (growth.alpha + growth.p + 1.0 / dim as f64).min(1.0);
        (fraction_low >= growth.alpha, fraction_high <= cap)
    };
    let passed = monotone && converged_at <= bound && lo_ok && hi_ok;
    Ok(MaskConvergenceReport {
        bound,
        converged_at,
        monotone,
        final_fractions,
        fraction_low,
        fraction_high,
        passed,
    })
}

/// Outcome of running the federation and the union-problem stepper side by
/// side from the same start.
#[derive(Debug, Clone, Serialize)]
pub struct BlockSgdReport {
    pub rounds: usize,
    pub per_round_deviation: Vec<f64>,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Single-epoch full-batch training settings matching one block step.
fn lockstep_local(clients: &[ClientState], gamma_v: f64, gamma_u: f64) -> LocalConfig {
    let full_batch = clients.iter().map(|c| c.train.len()).max().unwrap();
    LocalConfig {
        epochs: 1,
        batch_size: full_batch,
        tau: 1,
        gamma_v,
        gamma_u,
        momentum: 0.0,
        growth: None,
    }
}

/// Advance the federation and the union problem side by side for `rounds`
/// rounds, returning the largest parameter deviation seen after each one.
/// The oracle is handed exactly the batch each client is about to draw, so
/// both sides consume identical sample orders.
fn lockstep_deviations(
    clients: &mut [ClientState],
    oracle: &mut UnionProblem,
    local: &LocalConfig,
    rounds: usize,
) -> Result<Vec<f64>> {
    let mut per_round = Vec::with_capacity(rounds);
    for round in 0..rounds {
        let batches: Vec<Batch> = clients
            .iter()
            .map(|c| {
                let mut preview = c.rng.clone();
                let mut drawn = crate::data::batches(&c.train, local.batch_size, &mut preview)?;
                Ok(drawn.swap_remove(0))
            })
            .collect::<Result<Vec<_>>>()?;
        oracle.round(&batches)?;
        run_round(clients, local, false, round)?;

        let mut dev = 0.0f64;
        for (k, c) in clients.iter().enumerate() {
            let want = oracle.client_theta(k);
            for (a, b) in c.theta.values().iter().zip(want.values()) {
                dev = dev.max((a - b).abs());
            }
        }
        per_round.push(dev);
    }
    Ok(per_round)
}

fn block_sgd_report(per_round_deviation: Vec<f64>, tolerance: f64) -> BlockSgdReport {
    let max_deviation = per_round_deviation.iter().copied().fold(0.0, f64::max);
    BlockSgdReport {
        rounds: per_round_deviation.len(),
        per_round_deviation,
        max_deviation,
        tolerance,
        passed: max_deviation <= tolerance,
    }
}

/// Drive one federation (single local epoch, full batches, frozen
/// heterogeneous masks) and an independently coded block-coordinate SGD on
/// the matching union problem, comparing every client's stitched parameters
/// after every round. `lr_perturbation` is added to client 0's personal
/// rate on the oracle side only; pass a nonzero value to confirm the
/// comparison has teeth.
pub fn verify_block_sgd_equivalence(
    cfg: &FLConfig,
    rounds: usize,
    tolerance: f64,
    lr_perturbation: f64,
) -> Result<BlockSgdReport> {
    if cfg.federation.n_clients < 2 {
        return Err(FedError::Config(
            "equivalence check needs at least two clients".into(),
        ));
    }
    let mut clients = build_clients(cfg)?;
    let dim = clients[0].theta.dim();
    let n = clients.len();
    if dim <= n {
        return Err(FedError::Config("model too small for pattern masks".into()));
    }
    for (c, m) in clients.iter_mut().zip(pattern_masks(dim, n)) {
        c.mask = m;
    }

    let local = lockstep_local(&clients, cfg.federation.gamma_v, cfg.federation.gamma_u);
    let mut oracle =
        UnionProblem::from_states(&clients, cfg.federation.gamma_v, cfg.federation.gamma_u)?;
    oracle.v_rates[0] += lr_perturbation;

    let per_round = lockstep_deviations(&mut clients, &mut oracle, &local, rounds)?;
    Ok(block_sgd_report(per_round, tolerance))
}

/// Same comparison, but on masks the selector grew itself: run the
/// configured mask-growing federation until the closed-form bound says the
/// masks are frozen, then lockstep the frozen federation against the union
/// problem built from that exact state.
pub fn verify_block_sgd_on_grown_masks(
    cfg: &FLConfig,
    rounds: usize,
    tolerance: f64,
) -> Result<BlockSgdReport> {
    let grow_local = cfg.local_config(cfg.data.train_size());
    let Some(growth) = grow_local.growth else {
        return Err(FedError::Config(
            "grown-mask verification needs a mask-growing algorithm".into(),
        ));
    };
    let mut clients = build_clients(cfg)?;
    let dim = clients[0].theta.dim();
    for r in 0..mask_convergence_bound(growth.p, growth.alpha, dim) {
        run_round(&mut clients, &grow_local, false, r)?;
    }
    for c in &clients {
        if c.mask.personalized_fraction() < growth.alpha {
            return Err(FedError::Internal(format!(
                "client {} mask did not saturate within the bound",
                c.id
            )));
        }
    }

    let local = lockstep_local(&clients, cfg.federation.gamma_v, cfg.federation.gamma_u);
    let mut oracle =
        UnionProblem::from_states(&clients, cfg.federation.gamma_v, cfg.federation.gamma_u)?;
    let per_round = lockstep_deviations(&mut clients, &mut oracle, &local, rounds)?;
    Ok(block_sgd_report(per_round, tolerance))
}
