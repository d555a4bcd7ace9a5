//! Static kd-tree over 3D points. Results are ordered by (squared distance, index).

use crate::linalg::Point3;
use crate::scalar::Real;

/// Implicit balanced tree: the node of range `[lo, hi)` sits at `lo + (hi - lo) / 2`.
#[derive(Debug, Clone)]
pub struct KdTree<T: Real> {
    points: Vec<Point3<T>>,
    order: Vec<usize>,
    axes: Vec<u8>,
}

fn better<T: Real>(a: (T, usize), b: (T, usize)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

impl<T: Real> KdTree<T> {
    pub fn new(points: &[Point3<T>]) -> Self {
        let mut tree = Self { points: points.to_vec(), order: (0..points.len()).collect(), axes: vec![0; points.len()] };
        let n = points.len();
        tree.build(0, n);
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3<T>] {
        &self.points
    }

    fn build(&mut self, lo: usize, hi: usize) {
        if hi <= lo + 1 {
            return;
        }
        let mut axis = 0;
        let mut best = T::neg_infinity();
        for a in 0..3 {
            let (mut mn, mut mx) = (T::infinity(), T::neg_infinity());
            for &i in &self.order[lo..hi] {
                let v = self.points[i][a];
                mn = mn.min(v);
                mx = mx.max(v);
            }
            if mx - mn > best {
                best = mx - mn;
                axis = a;
            }
        }
        let mid = lo + (hi - lo) / 2;
        let pts = &self.points;
        self.order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
            pts[a][axis].partial_cmp(&pts[b][axis]).unwrap().then(a.cmp(&b))
        });
        self.axes[mid] = axis as u8;
        self.build(lo, mid);
        self.build(mid + 1, hi);
    }

    /// Nearest point as `(index, squared distance)`.
    pub fn nearest(&self, q: &Point3<T>) -> Option<(usize, T)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (T::infinity(), usize::MAX);
        self.nearest_rec(q, 0, self.points.len(), &mut best);
        Some((best.1, best.0))
    }

    /// Nearest point with squared distance at most `max_d2`.
    pub fn nearest_within(&self, q: &Point3<T>, max_d2: T) -> Option<(usize, T)> {
        let mut best = (max_d2, usize::MAX);
        self.nearest_rec(q, 0, self.points.len(), &mut best);
        (best.1 != usize::MAX).then_some((best.1, best.0))
    }

    fn nearest_rec(&self, q: &Point3<T>, lo: usize, hi: usize, best: &mut (T, usize)) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid];
        let d2 = self.points[idx].distance_squared(q);
        if better((d2, idx), *best) {
            *best = (d2, idx);
        }
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - self.points[idx][axis];
        let (near, far) = if diff <= T::zero() { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.nearest_rec(q, near.0, near.1, best);
        if diff * diff <= best.0 {
            self.nearest_rec(q, far.0, far.1, best);
        }
    }

    /// The `k` nearest points, closest first.
    pub fn knn(&self, q: &Point3<T>, k: usize) -> Vec<(usize, T)> {
        let mut heap: Vec<(T, usize)> = Vec::with_capacity(k + 1);
        if k > 0 {
            self.knn_rec(q, k, 0, self.points.len(), &mut heap);
        }
        heap.into_iter().map(|(d, i)| (i, d)).collect()
    }

    fn knn_rec(&self, q: &Point3<T>, k: usize, lo: usize, hi: usize, heap: &mut Vec<(T, usize)>) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid];
        let d2 = self.points[idx].distance_squared(q);
        if heap.len() < k || better((d2, idx), heap[heap.len() - 1]) {
            let pos = heap.partition_point(|&e| better(e, (d2, idx)));
            heap.insert(pos, (d2, idx));
            heap.truncate(k);
        }
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - self.points[idx][axis];
        let (near, far) = if diff <= T::zero() { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.knn_rec(q, k, near.0, near.1, heap);
        if heap.len() < k || diff * diff <= heap[heap.len() - 1].0 {
            self.knn_rec(q, k, far.0, far.1, heap);
        }
    }

    /// All points with squared distance `<= radius^2`, closest first.
    pub fn within_radius(&self, q: &Point3<T>, radius: T) -> Vec<(usize, T)> {
        let mut out = Vec::new();
        self.radius_rec(q, radius * radius, 0, self.points.len(), &mut out);
        out.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        out
    }

    fn radius_rec(&self, q: &Point3<T>, r2: T, lo: usize, hi: usize, out: &mut Vec<(usize, T)>) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid];
        let d2 = self.points[idx].distance_squared(q);
        if d2 <= r2 {
            out.push((idx, d2));
        }
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - self.points[idx][axis];
        if diff <= T::zero() || diff * diff <= r2 {
            self.radius_rec(q, r2, lo, mid, out);
        }
        if diff >= T::zero() || diff * diff <= r2 {
            self.radius_rec(q, r2, mid + 1, hi, out);
        }
    }
}
