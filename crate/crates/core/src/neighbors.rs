//! Nearest-neighbor queries over Gaussian centers.

use nalgebra::Vector3;
use rstar::primitives::GeomWithData;
use rstar::RTree;

type Entry = GeomWithData<[f64; 3], usize>;

/// Spatial index over a fixed point set.
pub struct PointIndex {
    tree: RTree<Entry>,
}

impl PointIndex {
    pub fn new(points: &[Vector3<f64>]) -> Self {
        let entries = points.iter().enumerate().map(|(i, p)| Entry::new([p.x, p.y, p.z], i)).collect();
        Self { tree: RTree::bulk_load(entries) }
    }

    pub fn len(&self) -> usize {
        self.tree.size()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.size() == 0
    }

    /// Index of the point closest to `q`.
    pub fn nearest(&self, q: &Vector3<f64>) -> Option<usize> {
        self.tree.nearest_neighbor([q.x, q.y, q.z]).map(|e| e.data)
    }

    /// Distances to the `k` nearest points other than point `skip`.
    pub fn k_nearest_distances(&self, q: &Vector3<f64>, k: usize, skip: usize) -> Vec<f64> {
        self.tree
            .nearest_neighbor_iter_with_distance_2([q.x, q.y, q.z])
            .filter(|(e, _)| e.data != skip)
            .take(k)
            .map(|(_, d2)| d2.sqrt())
            .collect()
    }
}

/// Mean distance from each point to its `k` nearest neighbors, or `None`
/// for a point without neighbors.
pub fn mean_knn_distance(points: &[Vector3<f64>], k: usize) -> Vec<Option<f64>> {
    let index = PointIndex::new(points);
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let d = index.k_nearest_distances(p, k, i);
            (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
        })
        .collect()
}
