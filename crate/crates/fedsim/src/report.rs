//! Per-round metrics shared by every algorithm.

use serde::{Deserialize, Serialize};

use crate::mask::BinaryMask;

/// One round's metrics. Every algorithm fills the same schema so that runs
/// can be diffed line by line; a pure-local round simply reports zero
/// uploads and an empty aggregate checksum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub per_client_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    /// Personalized fraction of each client's mask after the round.
    pub per_client_sparsity: Vec<f64>,
    /// Parameters each client sent this round (global positions of the mask
    /// the round started with).
    pub per_client_upload: Vec<usize>,
    /// Checksum of the aggregated global parameters and their coverage mask.
    pub theta_g_checksum: u64,
}

impl RoundReport {
    pub fn new(
        round: usize,
        per_client_accuracy: Vec<f64>,
        per_client_sparsity: Vec<f64>,
        per_client_upload: Vec<usize>,
        theta_g_checksum: u64,
    ) -> RoundReport {
        let mean_accuracy = mean(&per_client_accuracy);
        RoundReport {
            round,
            per_client_accuracy,
            mean_accuracy,
            per_client_sparsity,
            per_client_upload,
            theta_g_checksum,
        }
    }
}

/// Mean with a fixed left-to-right summation order.
pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// FNV-1a over the aggregate's value bytes and coverage bits. Cheap, stable
/// across platforms, and sensitive to any single-bit change.
pub fn theta_checksum(theta_g: &[f64], m_g: &BinaryMask) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut hash = OFFSET;
    let mut eat = |byte: u8| {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(PRIME);
    };
    for value in theta_g {
        for byte in value.to_le_bytes() {
            eat(byte);
        }
    }
    for &bit in m_g.bits() {
        eat(u8::from(bit));
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_is_fixed_order() {
        assert_eq!(mean(&[]), 0.0);
        assert_eq!(mean(&[0.25, 0.75]), 0.5);
    }

    #[test]
    fn checksum_reacts_to_values_and_coverage() {
        let m = BinaryMask::from_bits(vec![true, false]);
        let base = theta_checksum(&[1.0, 2.0], &m);
        assert_eq!(base, theta_checksum(&[1.0, 2.0], &m));
        assert_ne!(base, theta_checksum(&[1.0, 2.0 + 1e-12], &m));
        assert_ne!(base, theta_checksum(&[1.0, 2.0], &m.invert()));
        // 0.0 and -0.0 compare equal but are different byte patterns; the
        // checksum must see the difference.
        assert_ne!(theta_checksum(&[0.0], &m), theta_checksum(&[-0.0], &m));
    }

    #[test]
    fn report_serializes_to_stable_json() {
        let report = RoundReport::new(3, vec![0.5, 1.0], vec![0.0, 0.25], vec![17, 17], 99);
        let json = serde_json::to_string(&report).unwrap();
        let back: RoundReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
        assert_eq!(back.mean_accuracy, 0.75);
    }
}
