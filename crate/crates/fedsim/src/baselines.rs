//! Reference algorithms the selector is compared against.
//!
//! Plain federated averaging and purely local training are both degenerate
//! cases of the masked round: all-zero masks make every parameter global and
//! the aggregate a plain mean, while all-one masks make the upload empty and
//! the merge a no-op. The baselines therefore delegate to
//! [`server::run_round`] with the mask frozen. Sharing one code path is what
//! lets cross-algorithm comparisons in the tests demand bit equality instead
//! of mere closeness.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::Result;
use crate::local_update::{self, LocalConfig};
use crate::mask::BinaryMask;
use crate::report::RoundReport;
use crate::server::{run_round, ClientState};

/// One federated-averaging round: every client trains all parameters at the
/// global-block rate, the server averages everything. Client masks stay
/// all-zero throughout.
pub fn fedavg_round(
    clients: &mut [ClientState],
    local: &LocalConfig,
    parallel: bool,
    round: usize,
) -> Result<RoundReport> {
    debug_assert!(clients.iter().all(|c| c.mask.popcount() == 0));
    let frozen = LocalConfig {
        growth: None,
        ..*local
    };
    run_round(clients, &frozen, parallel, round)
}

/// One round of isolated local training at the personalized rate. Nothing is
/// uploaded and nothing is merged; the round bookkeeping still produces a
/// report so histories stay comparable across algorithms.
pub fn local_only_round(
    clients: &mut [ClientState],
    local: &LocalConfig,
    parallel: bool,
    round: usize,
) -> Result<RoundReport> {
    debug_assert!(clients.iter().all(|c| c.mask.popcount() == c.mask.len()));
    let frozen = LocalConfig {
        growth: None,
        ..*local
    };
    run_round(clients, &frozen, parallel, round)
}

/// Fine-tune every client's full model on its own data at the personalized
/// rate. Run after the last federated-averaging round to produce the
/// fine-tuned baseline.
pub fn fedavg_ft(
    clients: &mut [ClientState],
    local: &LocalConfig,
    ft_epochs: usize,
    parallel: bool,
) -> Result<()> {
    if ft_epochs == 0 {
        return Ok(());
    }
    let tune_cfg = LocalConfig {
        epochs: ft_epochs,
        growth: None,
        ..*local
    };
    let tune = |c: &mut ClientState| -> Result<()> {
        let all = BinaryMask::ones(c.theta.dim());
        let (theta, _) =
            local_update::grad_select(&c.theta, &all, &c.train, &mut c.rng, &tune_cfg)?;
        c.theta = theta;
        Ok(())
    };
    if parallel {
        clients.par_iter_mut().map(tune).collect::<Result<()>>()
    } else {
        clients.iter_mut().try_for_each(tune)
    }
}

/// A seeded mask with `ceil(fraction * dim)` personalized positions drawn
/// uniformly without replacement. Every client in a run shares the same one.
pub fn random_partition(dim: usize, fraction: f64, seed: u64) -> BinaryMask {
    assert!(
        (0.0..=1.0).contains(&fraction),
        "fraction must lie in [0, 1]"
    );
    let count = ((fraction * dim as f64).ceil() as usize).min(dim);
    let mut indices: Vec<usize> = (0..dim).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    indices.truncate(count);
    BinaryMask::from_indices(dim, &indices)
}
