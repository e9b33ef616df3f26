use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CrclError, Result};

/// Index batches covering `0..num_items` once, dropping the final short batch.
/// The order is a deterministic function of `seed` when `shuffle` is set.
pub fn epoch_batches(num_items: usize, b: usize, shuffle: bool, seed: u64) -> Result<Vec<Vec<usize>>> {
    if b < 2 {
        return Err(CrclError::InvalidArgument(format!(
            "batch size {b} < 2: column correlations over the batch are degenerate"
        )));
    }
    let mut order: Vec<usize> = (0..num_items).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks_exact(b).map(<[usize]>::to_vec).collect())
}

/// Batches of `b` consecutive items from runs of consecutive items, the layout
/// of a test window. `groups` gives the length of each run (one per video).
/// Each run starts at a seeded offset below `b` and is cut into whole windows;
/// the windows of all runs are then shuffled together.
pub fn epoch_windows(groups: &[usize], b: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if b < 2 {
        return Err(CrclError::InvalidArgument(format!(
            "batch size {b} < 2: column correlations over the batch are degenerate"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut base = 0;
    for &len in groups {
        let slack = len % b;
        let offset = if slack == 0 { 0 } else { rng.random_range(0..=slack) };
        let mut start = base + offset;
        while start + b <= base + len {
            out.push((start..start + b).collect());
            start += b;
        }
        base += len;
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// Iterate batches of borrowed items in [`epoch_batches`] order.
pub fn batch_iter<'a, T>(
    items: &'a [T],
    b: usize,
    shuffle: bool,
    seed: u64,
) -> Result<impl Iterator<Item = Vec<&'a T>> + 'a> {
    let batches = epoch_batches(items.len(), b, shuffle, seed)?;
    Ok(batches.into_iter().map(move |idx| idx.into_iter().map(|i| &items[i]).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn drops_short_tail() {
        let bs = epoch_batches(17, 8, true, 3).unwrap();
        assert_eq!(bs.len(), 2);
        assert!(bs.iter().all(|b| b.len() == 8));
    }

    #[test]
    fn same_seed_same_order() {
        assert_eq!(epoch_batches(40, 8, true, 9).unwrap(), epoch_batches(40, 8, true, 9).unwrap());
        assert_ne!(epoch_batches(40, 8, true, 9).unwrap(), epoch_batches(40, 8, true, 10).unwrap());
    }

    #[test]
    fn batch_of_one_rejected() {
        assert!(epoch_batches(10, 1, false, 0).is_err());
        assert!(batch_iter(&[1, 2, 3], 1, false, 0).is_err());
    }

    #[test]
    fn iterator_yields_items() {
        let items = ["a", "b", "c", "d", "e"];
        let got: Vec<Vec<&&str>> = batch_iter(&items, 2, false, 0).unwrap().collect();
        assert_eq!(got, vec![vec![&"a", &"b"], vec![&"c", &"d"]]);
    }

    #[test]
    fn windows_stay_inside_one_run() {
        let groups = [10, 3, 17];
        let bs = epoch_windows(&groups, 4, 5).unwrap();
        let bounds = [(0, 10), (10, 13), (13, 30)];
        assert_eq!(bs.len(), 2 + 0 + 4);
        for w in &bs {
            assert!(w.windows(2).all(|p| p[1] == p[0] + 1));
            assert!(bounds.iter().any(|&(lo, hi)| w[0] >= lo && w[3] < hi));
        }
        assert_eq!(bs, epoch_windows(&groups, 4, 5).unwrap());
        assert!(epoch_windows(&groups, 1, 5).is_err());
    }

    proptest! {
        #[test]
        fn window_count_is_whole_windows_per_run(groups in proptest::collection::vec(0usize..40, 0..6), b in 2usize..9, seed in any::<u64>()) {
            let bs = epoch_windows(&groups, b, seed).unwrap();
            prop_assert_eq!(bs.len(), groups.iter().map(|g| g / b).sum::<usize>());
            let mut seen: Vec<usize> = bs.iter().flatten().copied().collect();
            let total = seen.len();
            seen.sort_unstable();
            seen.dedup();
            prop_assert_eq!(seen.len(), total);
        }

        #[test]
        fn every_item_at_most_once_and_only_tail_dropped(n in 0usize..200, b in 2usize..12, seed in any::<u64>()) {
            let bs = epoch_batches(n, b, true, seed).unwrap();
            let mut seen: Vec<usize> = bs.iter().flatten().copied().collect();
            prop_assert_eq!(seen.len(), (n / b) * b);
            seen.sort_unstable();
            seen.dedup();
            prop_assert_eq!(seen.len(), (n / b) * b);
            prop_assert!(seen.iter().all(|&i| i < n));
        }
    }
}
