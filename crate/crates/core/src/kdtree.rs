//! Static k-d tree over points in up to three dimensions.

/// Tree stored as a permutation of point indices; the node of a slice is its
/// middle element, split along `depth % dim`.
#[derive(Clone, Debug)]
pub struct KdTree {
    dim: usize,
    points: Vec<[f64; 3]>,
    order: Vec<usize>,
}

impl KdTree {
    pub fn new(points: &[Vec<f64>]) -> Self {
        let dim = points.first().map_or(1, |p| p.len()).clamp(1, 3);
        let points: Vec<[f64; 3]> = points
            .iter()
            .map(|p| {
                let mut a = [0.0; 3];
                a[..dim].copy_from_slice(&p[..dim]);
                a
            })
            .collect();
        let mut order: Vec<usize> = (0..points.len()).collect();
        build(&points, &mut order, 0, dim);
        Self { dim, points, order }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn dist2(&self, i: usize, q: &[f64]) -> f64 {
        (0..self.dim).map(|a| (self.points[i][a] - q[a]).powi(2)).sum()
    }

    /// Nearest point accepted by `keep`, as `(index, distance)`.
    pub fn nearest_filtered(&self, q: &[f64], keep: impl Fn(usize) -> bool) -> Option<(usize, f64)> {
        let mut best = (usize::MAX, f64::INFINITY);
        self.nearest_rec(&self.order, 0, q, &keep, &mut best);
        (best.0 != usize::MAX).then(|| (best.0, best.1.sqrt()))
    }

    fn nearest_rec(&self, slice: &[usize], depth: usize, q: &[f64], keep: &dyn Fn(usize) -> bool, best: &mut (usize, f64)) {
        if slice.is_empty() {
            return;
        }
        let mid = slice.len() / 2;
        let i = slice[mid];
        let d = self.dist2(i, q);
        if d < best.1 && keep(i) {
            *best = (i, d);
        }
        let axis = depth % self.dim;
        let diff = q[axis] - self.points[i][axis];
        let (near, far) = if diff < 0.0 { (&slice[..mid], &slice[mid + 1..]) } else { (&slice[mid + 1..], &slice[..mid]) };
        self.nearest_rec(near, depth + 1, q, keep, best);
        if diff * diff < best.1 {
            self.nearest_rec(far, depth + 1, q, keep, best);
        }
    }

    /// The `k` nearest points as `(index, squared distance)`, closest first.
    pub fn k_nearest(&self, q: &[f64], k: usize) -> Vec<(usize, f64)> {
        let mut heap: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        if k > 0 {
            self.knn_rec(&self.order, 0, q, k, &mut heap);
        }
        heap
    }

    fn knn_rec(&self, slice: &[usize], depth: usize, q: &[f64], k: usize, out: &mut Vec<(usize, f64)>) {
        if slice.is_empty() {
            return;
        }
        let mid = slice.len() / 2;
        let i = slice[mid];
        let d = self.dist2(i, q);
        if out.len() < k || d < out[out.len() - 1].1 {
            let pos = out.partition_point(|e| e.1 <= d);
            out.insert(pos, (i, d));
            out.truncate(k);
        }
        let axis = depth % self.dim;
        let diff = q[axis] - self.points[i][axis];
        let (near, far) = if diff < 0.0 { (&slice[..mid], &slice[mid + 1..]) } else { (&slice[mid + 1..], &slice[..mid]) };
        self.knn_rec(near, depth + 1, q, k, out);
        if out.len() < k || diff * diff < out[out.len() - 1].1 {
            self.knn_rec(far, depth + 1, q, k, out);
        }
    }

    /// Indices within distance `r` of `q`.
    pub fn within(&self, q: &[f64], r: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.within_rec(&self.order, 0, q, r * r, &mut out);
        out
    }

    fn within_rec(&self, slice: &[usize], depth: usize, q: &[f64], r2: f64, out: &mut Vec<usize>) {
        if slice.is_empty() {
            return;
        }
        let mid = slice.len() / 2;
        let i = slice[mid];
        if self.dist2(i, q) <= r2 {
            out.push(i);
        }
        let axis = depth % self.dim;
        let diff = q[axis] - self.points[i][axis];
        if diff <= 0.0 || diff * diff <= r2 {
            self.within_rec(&slice[..mid], depth + 1, q, r2, out);
        }
        if diff >= 0.0 || diff * diff <= r2 {
            self.within_rec(&slice[mid + 1..], depth + 1, q, r2, out);
        }
    }
}

fn build(points: &[[f64; 3]], slice: &mut [usize], depth: usize, dim: usize) {
    if slice.len() <= 1 {
        return;
    }
    let axis = depth % dim;
    let mid = slice.len() / 2;
    slice.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
    let (lo, hi) = slice.split_at_mut(mid);
    build(points, lo, depth + 1, dim);
    build(points, &mut hi[1..], depth + 1, dim);
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(points: &[Vec<f64>], q: &[f64]) -> Vec<f64> {
        let mut d: Vec<f64> = points.iter().map(|p| p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum()).collect();
        d.sort_by(f64::total_cmp);
        d
    }

    proptest! {
        #[test]
        fn queries_match_brute_force(
            pts in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 1..200),
            q in prop::collection::vec(-1.5f64..1.5, 3),
            k in 1usize..10,
            r in 0.0f64..1.0,
        ) {
            let tree = KdTree::new(&pts);
            let exact = brute(&pts, &q);
            let knn = tree.k_nearest(&q, k);
            prop_assert_eq!(knn.len(), k.min(pts.len()));
            for (e, (_, d)) in exact.iter().zip(&knn) {
                prop_assert!((e - d).abs() < 1e-12);
            }
            let (_, d) = tree.nearest_filtered(&q, |_| true).unwrap();
            prop_assert!((d * d - exact[0]).abs() < 1e-12);
            prop_assert_eq!(tree.within(&q, r).len(), exact.iter().filter(|&&d| d <= r * r).count());
            let odd = tree.nearest_filtered(&q, |i| i % 2 == 1);
            prop_assert_eq!(odd.is_some(), pts.len() > 1);
        }
    }
}
