//! Static 3D kd-tree for nearest-neighbour queries.
//!
//! Ties between equidistant points resolve to the smaller input index, so
//! query results do not depend on the tree layout.

use std::cmp::Ordering;

use nalgebra::Vector3;

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    /// Point indices in tree order; the node for range `[lo, hi)` sits at `(lo + hi) / 2`.
    order: Vec<usize>,
    /// Split axis of the node stored at each position of `order`.
    axis: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist_sq: f64,
}

impl Neighbor {
    pub fn dist(&self) -> f64 {
        self.dist_sq.sqrt()
    }

    fn cmp_key(&self, other: &Self) -> Ordering {
        self.dist_sq.total_cmp(&other.dist_sq).then(self.index.cmp(&other.index))
    }
}

impl KdTree {
    pub fn new(points: &[Vector3<f64>]) -> Self {
        let mut tree =
            Self { points: points.to_vec(), order: (0..points.len()).collect(), axis: vec![0; points.len()] };
        let n = tree.order.len();
        tree.build(0, n);
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &Vector3<f64> {
        &self.points[i]
    }

    fn build(&mut self, lo: usize, hi: usize) {
        if hi - lo <= 1 {
            return;
        }
        let mut min = Vector3::repeat(f64::INFINITY);
        let mut max = Vector3::repeat(f64::NEG_INFINITY);
        for &i in &self.order[lo..hi] {
            min = min.inf(&self.points[i]);
            max = max.sup(&self.points[i]);
        }
        let axis = (max - min).imax();
        let mid = (lo + hi) / 2;
        let pts = &self.points;
        self.order[lo..hi]
            .select_nth_unstable_by(mid - lo, |&a, &b| pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b)));
        self.axis[mid] = axis as u8;
        self.build(lo, mid);
        self.build(mid + 1, hi);
    }

    /// Nearest point to `q`, skipping index `exclude` if given.
    pub fn nearest(&self, q: &Vector3<f64>, exclude: Option<usize>) -> Option<Neighbor> {
        self.k_nearest(q, 1, exclude).into_iter().next()
    }

    /// Up to `k` nearest points, closest first.
    pub fn k_nearest(&self, q: &Vector3<f64>, k: usize, exclude: Option<usize>) -> Vec<Neighbor> {
        let mut best: Vec<Neighbor> = Vec::with_capacity(k + 1);
        if k > 0 {
            self.search(q, k, exclude, 0, self.order.len(), &mut best);
        }
        best
    }

    fn search(
        &self,
        q: &Vector3<f64>,
        k: usize,
        exclude: Option<usize>,
        lo: usize,
        hi: usize,
        best: &mut Vec<Neighbor>,
    ) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let idx = self.order[mid];
        if exclude != Some(idx) {
            let cand = Neighbor { index: idx, dist_sq: (self.points[idx] - q).norm_squared() };
            if best.len() < k || cand.cmp_key(best.last().unwrap()) == Ordering::Less {
                let pos = best.binary_search_by(|b| b.cmp_key(&cand)).unwrap_or_else(|p| p);
                best.insert(pos, cand);
                best.truncate(k);
            }
        }
        if hi - lo == 1 {
            return;
        }
        let axis = self.axis[mid] as usize;
        let diff = q[axis] - self.points[idx][axis];
        let (near, far) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search(q, k, exclude, near.0, near.1, best);
        // `<=` keeps equidistant candidates on the far side reachable for tie-breaking.
        if best.len() < k || diff * diff <= best.last().unwrap().dist_sq {
            self.search(q, k, exclude, far.0, far.1, best);
        }
    }
}
