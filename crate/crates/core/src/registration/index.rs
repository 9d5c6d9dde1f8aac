use nalgebra::Vector3;

use crate::error::{Error, Result};

const LEAF_SIZE: usize = 8;

/// Exact Euclidean nearest-neighbor index over a fixed 3D point set.
///
/// A kd-tree stored implicitly in a permutation of the point indices: each
/// subrange `[lo, hi)` is either a leaf or split at its median along the
/// axis of largest spread. Ties between equidistant points resolve to the
/// lower original index.
#[derive(Debug, Clone)]
pub struct NearestNeighborIndex {
    points: Vec<Vector3<f64>>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy)]
enum Node {
    Leaf { lo: usize, hi: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance_sq: f64,
}

impl Neighbor {
    pub fn distance(&self) -> f64 {
        self.distance_sq.sqrt()
    }

    fn better_than(&self, other: &Neighbor) -> bool {
        self.distance_sq < other.distance_sq
            || (self.distance_sq == other.distance_sq && self.index < other.index)
    }
}

impl NearestNeighborIndex {
    pub fn new(points: &[Vector3<f64>]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("spatial index needs at least one point".into()));
        }
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite("indexed points".into()));
        }
        let mut index = Self {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        index.build(0, points.len());
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    fn build(&mut self, lo: usize, hi: usize) -> usize {
        let id = self.nodes.len();
        if hi - lo <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { lo, hi });
            return id;
        }
        let mut min = Vector3::repeat(f64::INFINITY);
        let mut max = Vector3::repeat(f64::NEG_INFINITY);
        for &i in &self.order[lo..hi] {
            min = min.inf(&self.points[i]);
            max = max.sup(&self.points[i]);
        }
        let axis = (max - min).imax();
        if max[axis] == min[axis] {
            // All points coincide.
            self.nodes.push(Node::Leaf { lo, hi });
            return id;
        }
        let mid = lo + (hi - lo) / 2;
        let points = &self.points;
        self.order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis])
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { lo, hi });
        let left = self.build(lo, mid);
        let right = self.build(mid, hi);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    pub fn nearest(&self, query: &Vector3<f64>) -> Neighbor {
        let mut best = Neighbor {
            index: usize::MAX,
            distance_sq: f64::INFINITY,
        };
        self.search(0, query, &mut best);
        best
    }

    fn search(&self, node: usize, q: &Vector3<f64>, best: &mut Neighbor) {
        match self.nodes[node] {
            Node::Leaf { lo, hi } => {
                for &i in &self.order[lo..hi] {
                    let cand = Neighbor {
                        index: i,
                        distance_sq: (self.points[i] - q).norm_squared(),
                    };
                    if cand.better_than(best) {
                        *best = cand;
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                // Left holds coordinates <= value, right holds >= value.
                let diff = q[axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best);
                // Non-strict so equidistant points in the far half still compete on index.
                if diff * diff <= best.distance_sq {
                    self.search(far, q, best);
                }
            }
        }
    }
}

/// Exhaustive scan with the same tie-break, for verification.
pub fn linear_scan_nearest(points: &[Vector3<f64>], query: &Vector3<f64>) -> Option<Neighbor> {
    points
        .iter()
        .enumerate()
        .map(|(index, p)| Neighbor {
            index,
            distance_sq: (p - query).norm_squared(),
        })
        .reduce(|best, cand| if cand.better_than(&best) { cand } else { best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| Vector3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()))
            .collect()
    }

    #[test]
    fn stored_point_finds_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = cloud(&mut rng, 100);
        let index = NearestNeighborIndex::new(&pts).unwrap();
        for (i, p) in pts.iter().enumerate() {
            let hit = index.nearest(p);
            assert_eq!(hit.index, i);
            assert_eq!(hit.distance_sq, 0.0);
        }
    }

    #[test]
    fn matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = cloud(&mut rng, 1000);
        let index = NearestNeighborIndex::new(&pts).unwrap();
        for q in cloud(&mut rng, 100) {
            assert_eq!(Some(index.nearest(&q)), linear_scan_nearest(&pts, &q));
        }
    }

    #[test]
    fn equidistant_tie_prefers_lower_index() {
        let pts = vec![
            Vector3::new(5.0, 5.0, 5.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(-1.0, 0.0, 0.0),
        ];
        let index = NearestNeighborIndex::new(&pts).unwrap();
        assert_eq!(index.nearest(&Vector3::zeros()).index, 1);
        let reversed = vec![pts[0], pts[2], pts[1]];
        let index = NearestNeighborIndex::new(&reversed).unwrap();
        assert_eq!(index.nearest(&Vector3::zeros()).index, 1);
    }

    #[test]
    fn duplicates_and_grid_ties() {
        // A lattice has many exact ties; compare every query against the scan.
        let pts: Vec<Vector3<f64>> = (0..125)
            .map(|i| Vector3::new((i % 5) as f64, ((i / 5) % 5) as f64, (i / 25) as f64))
            .chain(std::iter::repeat_n(Vector3::new(2.0, 2.0, 2.0), 20))
            .collect();
        let index = NearestNeighborIndex::new(&pts).unwrap();
        for i in 0..216 {
            let q = Vector3::new((i % 6) as f64 - 0.5, ((i / 6) % 6) as f64 - 0.5, (i / 36) as f64 - 0.5);
            assert_eq!(Some(index.nearest(&q)), linear_scan_nearest(&pts, &q));
        }
    }

    #[test]
    fn empty_set_rejected() {
        assert!(matches!(NearestNeighborIndex::new(&[]), Err(Error::Empty(_))));
    }
}
