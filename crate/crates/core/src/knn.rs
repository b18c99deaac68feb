use std::num::NonZero;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::Vector3;

/// Smallest scale handed out to a Gaussian built from point spacing.
pub const MIN_SPACING: f64 = 1e-7;

/// For each point in `queries`, the mean distance to its `k` nearest points of
/// `points`, not counting the query itself when `queries` indexes into
/// `points` (pass `self_offset = Some(o)` when query `i` is `points[o + i]`).
/// `None` when `points` has no other point.
pub fn mean_neighbor_distances(
    points: &[Vector3<f64>],
    queries: &[Vector3<f64>],
    self_offset: Option<usize>,
    k: usize,
) -> Vec<Option<f64>> {
    let others = points.len() - usize::from(self_offset.is_some());
    if others == 0 || k == 0 {
        return vec![None; queries.len()];
    }
    let entries: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
    let tree: ImmutableKdTree<f64, 3> = ImmutableKdTree::new_from_slice(&entries);
    let k = k.min(others);
    let want = NonZero::new(k + usize::from(self_offset.is_some())).unwrap();
    queries
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let own = self_offset.map(|o| (o + i) as u64);
            let found = tree.nearest_n::<SquaredEuclidean>(&[q.x, q.y, q.z], want);
            let mut sum = 0.0;
            let mut taken = 0;
            for nb in found {
                if Some(nb.item) == own || taken == k {
                    continue;
                }
                sum += nb.distance.sqrt();
                taken += 1;
            }
            // `own` may be missing when it ties with other zero-distance points
            Some((sum / taken as f64).max(MIN_SPACING))
        })
        .collect()
}
