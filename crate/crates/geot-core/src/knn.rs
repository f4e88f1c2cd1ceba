//! Exact k-nearest-neighbor search over 3-D points.
//!
//! The kd-tree returns exactly the neighbors a brute-force scan would:
//! candidates are ordered by (squared distance, index), so equidistant
//! points resolve to the lower index, and subtree pruning uses a strict
//! comparison against the current worst candidate so that ties on the far
//! side of a split are still visited. Queries allocate nothing beyond the
//! result set.

use std::collections::BinaryHeap;

/// Squared Euclidean distance.
#[inline]
pub fn dist_sq(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Neighbor candidate ordered by (squared distance, index); the heap keeps
/// the worst candidate on top.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Cand {
    d2: f64,
    idx: u32,
}

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Distances are finite by the point-cloud invariant.
        self.d2
            .partial_cmp(&other.d2)
            .unwrap()
            .then(self.idx.cmp(&other.idx))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Kd-tree over a subset of points, reporting their original indices.
///
/// Layout: `order` is a permutation of the subset arranged so that the
/// node of the range (lo, hi) sits at the median position, with the left
/// and right halves forming the subtrees. Split axes cycle with depth.
pub struct KdTree<'a> {
    coords: &'a [[f64; 3]],
    order: Vec<u32>,
}

impl<'a> KdTree<'a> {
    /// Tree over every point in `coords`.
    pub fn build_all(coords: &'a [[f64; 3]]) -> Self {
        Self::build(coords, (0..coords.len() as u32).collect())
    }

    /// Tree over the points listed in `subset` (original indices).
    pub fn build(coords: &'a [[f64; 3]], mut subset: Vec<u32>) -> Self {
        build_range(coords, &mut subset, 0);
        KdTree {
            coords,
            order: subset,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// The `k` nearest members to `query`, excluding `exclude` if given,
    /// sorted ascending by (squared distance, index). Returns fewer than
    /// `k` entries when the tree is smaller.
    pub fn k_nearest(
        &self,
        query: &[f64; 3],
        k: usize,
        exclude: Option<u32>,
    ) -> Vec<(u32, f64)> {
        if k == 0 || self.order.is_empty() {
            return Vec::new();
        }
        let mut heap: BinaryHeap<Cand> = BinaryHeap::with_capacity(k + 1);
        self.search(0, self.order.len(), 0, query, k, exclude, &mut heap);
        let mut out: Vec<Cand> = heap.into_vec();
        out.sort_unstable();
        out.into_iter().map(|c| (c.idx, c.d2)).collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn search(
        &self,
        lo: usize,
        hi: usize,
        depth: usize,
        query: &[f64; 3],
        k: usize,
        exclude: Option<u32>,
        heap: &mut BinaryHeap<Cand>,
    ) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let idx = self.order[mid];
        if Some(idx) != exclude {
            let cand = Cand {
                d2: dist_sq(query, &self.coords[idx as usize]),
                idx,
            };
            if heap.len() < k {
                heap.push(cand);
            } else if cand < *heap.peek().unwrap() {
                heap.pop();
                heap.push(cand);
            }
        }
        if hi - lo == 1 {
            return;
        }
        let axis = depth % 3;
        let split = self.coords[idx as usize][axis];
        let delta = query[axis] - split;
        let (near, far) = if delta < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(near.0, near.1, depth + 1, query, k, exclude, heap);
        // The far side may hold an equal-distance, lower-index candidate,
        // so prune only on a strictly worse plane distance.
        let plane_d2 = delta * delta;
        if heap.len() < k || plane_d2 <= heap.peek().unwrap().d2 {
            self.search(far.0, far.1, depth + 1, query, k, exclude, heap);
        }
    }
}

fn build_range(coords: &[[f64; 3]], subset: &mut [u32], depth: usize) {
    if subset.len() <= 1 {
        return;
    }
    let axis = depth % 3;
    let mid = subset.len() / 2;
    // (coordinate, index) keys make the arrangement deterministic under
    // duplicate coordinates.
    subset.select_nth_unstable_by(mid, |&a, &b| {
        coords[a as usize][axis]
            .partial_cmp(&coords[b as usize][axis])
            .unwrap()
            .then(a.cmp(&b))
    });
    let (left, right) = subset.split_at_mut(mid);
    build_range(coords, left, depth + 1);
    build_range(coords, &mut right[1..], depth + 1);
}

/// Per-row neighbor lists in compressed form; row i's neighbors are a
/// contiguous slice, preserved in the order they were supplied.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborLists {
    offsets: Vec<u32>,
    targets: Vec<u32>,
}

impl NeighborLists {
    pub fn from_rows(rows: &[Vec<u32>]) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut targets = Vec::new();
        offsets.push(0);
        for row in rows {
            targets.extend_from_slice(row);
            offsets.push(targets.len() as u32);
        }
        NeighborLists { offsets, targets }
    }

    pub fn n_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.targets[self.offsets[i] as usize..self.offsets[i + 1] as usize]
    }
}

/// Spatial k-nearest lists for every point of a cloud, self excluded.
/// A single-point cloud gets itself as its only neighbor so that
/// consumers always see a non-empty list.
pub fn knn_neighbor_lists(coords: &[[f64; 3]], k: usize) -> NeighborLists {
    if coords.len() == 1 {
        return NeighborLists::from_rows(&[vec![0]]);
    }
    let tree = KdTree::build_all(coords);
    let rows: Vec<Vec<u32>> = coords
        .iter()
        .enumerate()
        .map(|(i, p)| {
            tree.k_nearest(p, k, Some(i as u32))
                .into_iter()
                .map(|(idx, _)| idx)
                .collect()
        })
        .collect();
    NeighborLists::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    /// Reference answer: full scan sorted by (distance, index).
    fn brute(
        coords: &[[f64; 3]],
        subset: &[u32],
        query: &[f64; 3],
        k: usize,
        exclude: Option<u32>,
    ) -> Vec<(u32, f64)> {
        let mut all: Vec<(u32, f64)> = subset
            .iter()
            .filter(|&&i| Some(i) != exclude)
            .map(|&i| (i, dist_sq(query, &coords[i as usize])))
            .collect();
        all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    fn random_cloud(rng: &mut ChaCha20Rng, n: usize) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect()
    }

    #[test]
    fn matches_brute_force_on_random_clouds() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for trial in 0..30 {
            let n = rng.gen_range(1..200);
            let coords = random_cloud(&mut rng, n);
            let subset: Vec<u32> = (0..n as u32).collect();
            let tree = KdTree::build_all(&coords);
            let k = rng.gen_range(1..12);
            for qi in 0..n.min(20) {
                let got = tree.k_nearest(&coords[qi], k, Some(qi as u32));
                let want = brute(&coords, &subset, &coords[qi], k, Some(qi as u32));
                assert_eq!(got, want, "trial {trial} query {qi} k {k}");
            }
        }
    }

    #[test]
    fn equidistant_ties_pick_lower_index() {
        // Four corners of a square, query at center: all at d2 = 0.5.
        let coords = [
            [0.5, 0.5, 0.0],
            [-0.5, 0.5, 0.0],
            [-0.5, -0.5, 0.0],
            [0.5, -0.5, 0.0],
        ];
        let tree = KdTree::build_all(&coords);
        let got = tree.k_nearest(&[0.0, 0.0, 0.0], 2, None);
        assert_eq!(got[0].0, 0);
        assert_eq!(got[1].0, 1);
    }

    #[test]
    fn duplicate_points_resolve_by_index() {
        let coords = [[0.1, 0.2, 0.3]; 5];
        let tree = KdTree::build_all(&coords);
        let got = tree.k_nearest(&[0.0, 0.0, 0.0], 3, Some(0));
        let idxs: Vec<u32> = got.iter().map(|&(i, _)| i).collect();
        assert_eq!(idxs, vec![1, 2, 3]);
    }

    #[test]
    fn subset_queries_report_original_indices() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let coords = random_cloud(&mut rng, 50);
        let subset: Vec<u32> = (0..50).filter(|i| i % 3 == 0).collect();
        let tree = KdTree::build(&coords, subset.clone());
        let q = [0.2, -0.1, 0.4];
        assert_eq!(
            tree.k_nearest(&q, 5, None),
            brute(&coords, &subset, &q, 5, None)
        );
    }

    #[test]
    fn fewer_points_than_k_returns_all() {
        let coords = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let tree = KdTree::build_all(&coords);
        assert_eq!(tree.k_nearest(&[0.0, 0.0, 0.0], 10, None).len(), 2);
    }

    #[test]
    fn single_point_cloud_neighbors_itself() {
        let lists = knn_neighbor_lists(&[[0.0, 0.0, 0.0]], 4);
        assert_eq!(lists.row(0), &[0]);
    }
}
