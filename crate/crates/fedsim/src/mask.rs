//! Binary parameter masks.
//!
//! A mask assigns every flat parameter index to one of two blocks: bit 1
//! means the parameter is personalized (kept and trained locally), bit 0
//! means it is global (trained locally but shared through aggregation).
//! Masks only ever grow through `or`, which is what makes the per-client
//! selection schedule monotone.

use crate::error::{FedError, Result};
use crate::model::Layout;

/// Flat bit vector over parameter indices. 1 = personalized, 0 = global.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    bits: Vec<bool>,
}

/// Which end of the magnitude ranking a selection keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionRule {
    LargestDelta,
    SmallestDelta,
}

impl BinaryMask {
    pub fn zeros(len: usize) -> Self {
        BinaryMask {
            bits: vec![false; len],
        }
    }

    pub fn ones(len: usize) -> Self {
        BinaryMask {
            bits: vec![true; len],
        }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        BinaryMask { bits }
    }

    /// Mask with ones exactly at `indices`.
    pub fn from_indices(len: usize, indices: &[usize]) -> Self {
        let mut bits = vec![false; len];
        for &i in indices {
            assert!(i < len, "mask index {i} out of range for length {len}");
            bits[i] = true;
        }
        BinaryMask { bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Fraction of parameters marked personalized. Empty masks count as 0.
    pub fn personalized_fraction(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.popcount() as f64 / self.bits.len() as f64
    }

    pub fn invert(&self) -> BinaryMask {
        BinaryMask {
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn or(&self, other: &BinaryMask) -> BinaryMask {
        assert_eq!(self.len(), other.len(), "mask length mismatch in or");
        BinaryMask {
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(a, b)| *a || *b)
                .collect(),
        }
    }

    pub fn and(&self, other: &BinaryMask) -> BinaryMask {
        assert_eq!(self.len(), other.len(), "mask length mismatch in and");
        BinaryMask {
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(a, b)| *a && *b)
                .collect(),
        }
    }

    /// True when every set bit of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        assert_eq!(
            self.len(),
            other.len(),
            "mask length mismatch in is_subset_of"
        );
        self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b)
    }

    /// Run-length encoded text form: `"<len>:<first_bit>:<run>,<run>,..."`.
    ///
    /// Runs alternate starting from `first_bit` and sum to `len`. The
    /// all-zero mask of length 5 reads `"5:0:5"`, `[1,1,0,0,1]` reads
    /// `"5:1:2,2,1"`.
    pub fn to_rle(&self) -> String {
        if self.bits.is_empty() {
            return "0:0:".to_string();
        }
        let first = self.bits[0];
        let mut runs: Vec<usize> = Vec::new();
        let mut current = first;
        let mut count = 0usize;
        for &b in &self.bits {
            if b == current {
                count += 1;
            } else {
                runs.push(count);
                current = b;
                count = 1;
            }
        }
        runs.push(count);
        let runs: Vec<String> = runs.iter().map(|r| r.to_string()).collect();
        format!("{}:{}:{}", self.bits.len(), u8::from(first), runs.join(","))
    }

    pub fn from_rle(text: &str) -> Result<BinaryMask> {
        let bad = |msg: &str| FedError::Input(format!("malformed mask rle {text:?}: {msg}"));
        let mut parts = text.splitn(3, ':');
        let len: usize = parts
            .next()
            .ok_or_else(|| bad("missing length"))?
            .parse()
            .map_err(|_| bad("bad length"))?;
        let first: u8 = parts
            .next()
            .ok_or_else(|| bad("missing first bit"))?
            .parse()
            .map_err(|_| bad("bad first bit"))?;
        if first > 1 {
            return Err(bad("first bit must be 0 or 1"));
        }
        let runs_text = parts.next().ok_or_else(|| bad("missing runs"))?;
        let mut bits = Vec::with_capacity(len);
        if !runs_text.is_empty() {
            let mut current = first == 1;
            for run in runs_text.split(',') {
                let count: usize = run.parse().map_err(|_| bad("bad run length"))?;
                if count == 0 {
                    return Err(bad("zero-length run"));
                }
                bits.extend(std::iter::repeat_n(current, count));
                current = !current;
            }
        }
        if bits.len() != len {
            return Err(bad("runs do not sum to length"));
        }
        Ok(BinaryMask { bits })
    }
}

/// Intersection-over-union of two masks. Both empty counts as fully
/// overlapping (1.0) so that untouched clients compare as identical.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    assert_eq!(a.len(), b.len(), "mask length mismatch in iou");
    let inter = a.and(b).popcount();
    let union = a.or(b).popcount();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Select `ceil(p * |eligible|)` eligible indices with the largest delta
/// magnitudes. Ties prefer the lower index. An empty eligible set yields the
/// all-zero mask (logged as a warning since callers normally guard it).
pub fn select_top_p(delta: &[f64], eligible: &BinaryMask, p: f64) -> BinaryMask {
    select_p(delta, eligible, p, SelectionRule::LargestDelta)
}

/// Shared core for both selection directions.
pub fn select_p(delta: &[f64], eligible: &BinaryMask, p: f64, rule: SelectionRule) -> BinaryMask {
    assert_eq!(
        delta.len(),
        eligible.len(),
        "delta length mismatch in select_p"
    );
    assert!(
        p > 0.0 && p <= 1.0,
        "selection fraction must lie in (0, 1], got {p}"
    );
    let mut candidates: Vec<(f64, usize)> = delta
        .iter()
        .zip(eligible.bits())
        .enumerate()
        .filter(|(_, (_, &e))| e)
        .map(|(i, (&d, _))| {
            debug_assert!(d >= 0.0, "delta magnitudes must be nonnegative");
            (d, i)
        })
        .collect();
    if candidates.is_empty() {
        log::warn!("select_p called with an empty eligible set; returning the all-zero mask");
        return BinaryMask::zeros(delta.len());
    }
    let count = (p * candidates.len() as f64).ceil() as usize;
    let count = count.max(1).min(candidates.len());
    match rule {
        SelectionRule::LargestDelta => {
            candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        }
        SelectionRule::SmallestDelta => {
            candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        }
    }
    let chosen: Vec<usize> = candidates[..count].iter().map(|&(_, i)| i).collect();
    BinaryMask::from_indices(delta.len(), &chosen)
}

/// Mask covering exactly the weight and bias positions of one layer.
pub fn layer_mask(layout: &Layout, layer: usize) -> Result<BinaryMask> {
    let span = layout
        .spans()
        .get(layer)
        .ok_or_else(|| FedError::Input(format!("unknown layer id {layer}")))?;
    let mut bits = vec![false; layout.dim()];
    for i in span.weights.clone().chain(span.biases.clone()) {
        bits[i] = true;
    }
    Ok(BinaryMask { bits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, LayerSpec, Layout};
    use proptest::prelude::*;

    fn mask(bits: &[u8]) -> BinaryMask {
        BinaryMask::from_bits(bits.iter().map(|&b| b == 1).collect())
    }

    #[test]
    fn invert_flips_every_bit() {
        let m = mask(&[1, 0, 1]);
        assert_eq!(m.invert(), mask(&[0, 1, 0]));
        assert_eq!(m.invert().invert(), m);
    }

    #[test]
    fn or_is_monotone_and_idempotent() {
        let a = mask(&[1, 0, 0, 1]);
        let b = mask(&[0, 1, 0, 1]);
        let joined = a.or(&b);
        assert_eq!(joined, mask(&[1, 1, 0, 1]));
        assert!(a.is_subset_of(&joined));
        assert!(b.is_subset_of(&joined));
        assert_eq!(a.or(&a), a);
    }

    #[test]
    fn personalized_fraction_counts_ones() {
        assert_eq!(BinaryMask::zeros(8).personalized_fraction(), 0.0);
        assert_eq!(BinaryMask::ones(8).personalized_fraction(), 1.0);
        assert_eq!(mask(&[1, 0, 1, 0]).personalized_fraction(), 0.5);
    }

    #[test]
    fn select_top_p_takes_largest_magnitudes() {
        let delta = [0.5, 0.1, 0.9, 0.3];
        let eligible = BinaryMask::ones(4);
        let selected = select_top_p(&delta, &eligible, 0.5);
        assert_eq!(selected, mask(&[1, 0, 1, 0]));
    }

    #[test]
    fn select_top_p_breaks_ties_by_lower_index() {
        let delta = [0.2, 0.2, 0.2, 0.2];
        let eligible = BinaryMask::ones(4);
        let selected = select_top_p(&delta, &eligible, 0.5);
        assert_eq!(selected, mask(&[1, 1, 0, 0]));
    }

    #[test]
    fn select_top_p_full_fraction_returns_eligible() {
        let delta = [0.5, 0.1, 0.9, 0.3];
        let eligible = mask(&[0, 1, 1, 0]);
        assert_eq!(select_top_p(&delta, &eligible, 1.0), eligible);
    }

    #[test]
    fn select_top_p_empty_eligible_returns_zeros() {
        let delta = [0.5, 0.1];
        let eligible = BinaryMask::zeros(2);
        assert_eq!(select_top_p(&delta, &eligible, 0.5), BinaryMask::zeros(2));
    }

    #[test]
    fn select_top_p_rounds_count_up() {
        // ceil(0.5 * 3) = 2 out of the three eligible positions.
        let delta = [0.9, 0.5, 0.0, 0.1];
        let eligible = mask(&[1, 1, 0, 1]);
        let selected = select_top_p(&delta, &eligible, 0.5);
        assert_eq!(selected.popcount(), 2);
        assert_eq!(selected, mask(&[1, 1, 0, 0]));
    }

    #[test]
    fn smallest_rule_selects_complement_of_largest() {
        let delta = [0.5, 0.1, 0.9, 0.3];
        let eligible = BinaryMask::ones(4);
        let least = select_p(&delta, &eligible, 0.5, SelectionRule::SmallestDelta);
        assert_eq!(least, mask(&[0, 1, 0, 1]));
        let top = select_top_p(&delta, &eligible, 0.5);
        assert_eq!(least.and(&top).popcount(), 0);
    }

    #[test]
    fn iou_matches_hand_counts() {
        let a = mask(&[1, 1, 0, 0]);
        let b = mask(&[1, 0, 1, 0]);
        let got = iou(&a, &b);
        assert!((got - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&BinaryMask::zeros(4), &BinaryMask::zeros(4)), 1.0);
        assert_eq!(iou(&a, &a.invert()), 0.0);
    }

    #[test]
    fn layer_mask_covers_expected_spans() {
        let layout = Layout::new(vec![
            LayerSpec {
                input_dim: 2,
                output_dim: 3,
                activation: Activation::Relu,
            },
            LayerSpec {
                input_dim: 3,
                output_dim: 2,
                activation: Activation::Identity,
            },
        ])
        .unwrap();
        let last = layer_mask(&layout, 1).unwrap();
        // Final layer holds 3*2 weights and 2 biases, the last 8 of 17 slots.
        assert_eq!(last.popcount(), 8);
        assert!(last.bits()[..9].iter().all(|&b| !b));
        assert!(last.bits()[9..].iter().all(|&b| b));

        let first = layer_mask(&layout, 0).unwrap();
        assert_eq!(first.or(&last), BinaryMask::ones(17));
        assert_eq!(first.and(&last).popcount(), 0);
        assert!(layer_mask(&layout, 2).is_err());
    }

    #[test]
    fn rle_round_trips_simple_patterns() {
        let m = mask(&[1, 1, 0, 0, 1]);
        assert_eq!(m.to_rle(), "5:1:2,2,1");
        assert_eq!(BinaryMask::from_rle("5:1:2,2,1").unwrap(), m);
        assert_eq!(BinaryMask::zeros(4).to_rle(), "4:0:4");
        assert_eq!(BinaryMask::from_rle("0:0:").unwrap(), BinaryMask::zeros(0));
        assert!(BinaryMask::from_rle("5:1:2,2").is_err());
        assert!(BinaryMask::from_rle("5:2:5").is_err());
        assert!(BinaryMask::from_rle("nonsense").is_err());
    }

    proptest! {
        #[test]
        fn prop_rle_round_trip(bits in proptest::collection::vec(any::<bool>(), 0..200)) {
            let m = BinaryMask::from_bits(bits);
            let back = BinaryMask::from_rle(&m.to_rle()).unwrap();
            prop_assert_eq!(back, m);
        }

        #[test]
        fn prop_or_only_grows(a in proptest::collection::vec(any::<bool>(), 1..64),
                              b in proptest::collection::vec(any::<bool>(), 1..64)) {
            let len = a.len().min(b.len());
            let a = BinaryMask::from_bits(a[..len].to_vec());
            let b = BinaryMask::from_bits(b[..len].to_vec());
            let joined = a.or(&b);
            prop_assert!(a.is_subset_of(&joined));
            prop_assert!(joined.popcount() >= a.popcount().max(b.popcount()));
        }

        #[test]
        fn prop_select_count_and_subset(delta in proptest::collection::vec(0.0f64..10.0, 1..80),
                                        eligible in proptest::collection::vec(any::<bool>(), 1..80),
                                        p in 0.01f64..1.0) {
            let len = delta.len().min(eligible.len());
            let delta = &delta[..len];
            let eligible = BinaryMask::from_bits(eligible[..len].to_vec());
            let selected = select_top_p(delta, &eligible, p);
            prop_assert!(selected.is_subset_of(&eligible));
            let expect = if eligible.popcount() == 0 {
                0
            } else {
                ((p * eligible.popcount() as f64).ceil() as usize).clamp(1, eligible.popcount())
            };
            prop_assert_eq!(selected.popcount(), expect);
        }

        #[test]
        fn prop_iou_symmetric_and_bounded(a in proptest::collection::vec(any::<bool>(), 1..64),
                                          b in proptest::collection::vec(any::<bool>(), 1..64)) {
            let len = a.len().min(b.len());
            let a = BinaryMask::from_bits(a[..len].to_vec());
            let b = BinaryMask::from_bits(b[..len].to_vec());
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
        }
    }
}
