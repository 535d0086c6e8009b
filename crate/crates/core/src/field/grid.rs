use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Smallest admissible node count per axis.
pub const MIN_NODES: usize = 9;
/// Minimum node count on the normal axis, which spans half the tangential extent.
pub const MIN_NORMAL_NODES: usize = 5;

/// Parameters of a uniform half-box grid. The last axis is the normal
/// direction and always starts at 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec<T> {
    pub lo: Vec<T>,
    pub hi: Vec<T>,
    pub nodes: Vec<usize>,
}

impl<T: Real> GridSpec<T> {
    /// Default half box `[-1,1]^{n-1} x [0,1]` with `nodes` per tangential axis and
    /// `(nodes + 1) / 2` on the normal axis, so the spacing is isotropic.
    pub fn half_box(dim: usize, nodes: usize) -> Self {
        let mut lo = vec![-T::one(); dim];
        let mut hi = vec![T::one(); dim];
        lo[dim - 1] = T::zero();
        hi[dim - 1] = T::one();
        let mut n = vec![nodes; dim];
        n[dim - 1] = nodes.div_ceil(2);
        Self { lo, hi, nodes: n }
    }

    pub fn dim(&self) -> usize {
        self.nodes.len()
    }
}

/// Classification of a grid node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    Interior,
    ThinPlane,
    OuterBoundary,
}

/// A validated grid with derived spacing and strides.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    spec: GridSpec<T>,
    spacing: Vec<T>,
    strides: Vec<usize>,
    len: usize,
}

/// Validates `spec` and derives spacing, strides and node classification.
pub fn build_grid<T: Real>(spec: GridSpec<T>) -> Result<Grid<T>> {
    let dim = spec.dim();
    if !(2..=3).contains(&dim) {
        return Err(Error::InvalidGrid(format!("dimension {dim} not in {{2, 3}}")));
    }
    if spec.lo.len() != dim || spec.hi.len() != dim {
        return Err(Error::InvalidGrid("extent and node vectors differ in length".into()));
    }
    if spec.lo[dim - 1] != T::zero() {
        return Err(Error::InvalidGrid("last axis must start at 0".into()));
    }
    for axis in 0..dim {
        let min = if axis == dim - 1 { MIN_NORMAL_NODES } else { MIN_NODES };
        if spec.nodes[axis] < min {
            return Err(Error::TooFewNodes { axis, nodes: spec.nodes[axis], min });
        }
        let (lo, hi) = (spec.lo[axis], spec.hi[axis]);
        if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
            return Err(Error::DegenerateExtent { axis });
        }
    }
    let spacing = (0..dim)
        .map(|k| (spec.hi[k] - spec.lo[k]) / T::from_count(spec.nodes[k] - 1))
        .collect();
    let mut strides = vec![1; dim];
    for k in (0..dim - 1).rev() {
        strides[k] = strides[k + 1] * spec.nodes[k + 1];
    }
    let len = spec.nodes.iter().product();
    Ok(Grid { spec, spacing, strides, len })
}

impl<T: Real> Grid<T> {
    pub fn half_box(dim: usize, nodes: usize) -> Result<Self> {
        build_grid(GridSpec::half_box(dim, nodes))
    }

    pub fn spec(&self) -> &GridSpec<T> {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn nodes(&self) -> &[usize] {
        &self.spec.nodes
    }

    pub fn lo(&self) -> &[T] {
        &self.spec.lo
    }

    pub fn hi(&self) -> &[T] {
        &self.spec.hi
    }

    pub fn spacing(&self) -> &[T] {
        &self.spacing
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    /// Smallest spacing over all axes.
    pub fn min_spacing(&self) -> T {
        self.spacing.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for (k, s) in self.strides.iter().enumerate() {
            idx[k] = flat / s;
            flat %= s;
        }
        idx
    }

    pub fn coord(&self, axis: usize, i: usize) -> T {
        self.spec.lo[axis] + T::from_count(i) * self.spacing[axis]
    }

    pub fn point(&self, idx: &[usize]) -> Vec<T> {
        idx.iter().enumerate().map(|(k, &i)| self.coord(k, i)).collect()
    }

    pub fn point_of(&self, flat: usize) -> Vec<T> {
        self.point(&self.multi_index(flat))
    }

    pub fn kind_of_index(&self, idx: &[usize]) -> NodeKind {
        let d = self.dim();
        let last = d - 1;
        let lateral_edge = (0..last).any(|k| idx[k] == 0 || idx[k] == self.spec.nodes[k] - 1);
        if lateral_edge || idx[last] == self.spec.nodes[last] - 1 {
            NodeKind::OuterBoundary
        } else if idx[last] == 0 {
            NodeKind::ThinPlane
        } else {
            NodeKind::Interior
        }
    }

    pub fn kind(&self, flat: usize) -> NodeKind {
        self.kind_of_index(&self.multi_index(flat))
    }

    pub fn count(&self, kind: NodeKind) -> usize {
        (0..self.len).filter(|&i| self.kind(i) == kind).count()
    }

    /// Relative slack used when deciding whether a point lies in the extent.
    pub(crate) fn slack(&self, axis: usize) -> T {
        self.spacing[axis] * T::lit(1e-9)
    }

    pub fn contains(&self, x: &[T]) -> bool {
        x.len() == self.dim()
            && (0..self.dim()).all(|k| {
                x[k] >= self.spec.lo[k] - self.slack(k) && x[k] <= self.spec.hi[k] + self.slack(k)
            })
    }

    /// Distance from `x` to the outer (lateral and top) boundary of the box.
    pub fn distance_to_outer_boundary(&self, x: &[T]) -> T {
        let d = self.dim();
        let mut dist = self.spec.hi[d - 1] - x[d - 1];
        for k in 0..d - 1 {
            dist = dist.min(x[k] - self.spec.lo[k]).min(self.spec.hi[k] - x[k]);
        }
        dist
    }

    /// Largest radius allowed for ball functionals centred at `x0`.
    pub fn radius_cap(&self, x0: &[T]) -> T {
        T::lit(0.9) * self.distance_to_outer_boundary(x0)
    }

    /// Grid with every axis refined by a factor two (node count `2n - 1`).
    pub fn refined(&self) -> Result<Self> {
        let mut spec = self.spec.clone();
        for n in spec.nodes.iter_mut() {
            *n = 2 * *n - 1;
        }
        build_grid(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thin_plane_count_3d() {
        let g = build_grid(GridSpec { lo: vec![-1.0, -1.0, 0.0], hi: vec![1.0, 1.0, 1.0], nodes: vec![9, 9, 9] })
            .unwrap();
        assert_eq!(g.count(NodeKind::ThinPlane), 49);
    }

    #[test]
    fn thin_plane_count_2d() {
        let g = build_grid(GridSpec { lo: vec![-1.0, 0.0], hi: vec![1.0, 1.0], nodes: vec![9, 9] }).unwrap();
        assert_eq!(g.count(NodeKind::ThinPlane), 7);
    }

    #[test]
    fn classification_partitions_nodes() {
        let g = Grid::<f64>::half_box(3, 17).unwrap();
        let total = g.count(NodeKind::Interior) + g.count(NodeKind::ThinPlane) + g.count(NodeKind::OuterBoundary);
        assert_eq!(total, g.len());
        assert_eq!(g.count(NodeKind::Interior), 15 * 15 * 7);
    }

    #[test]
    fn too_few_nodes_rejected() {
        let err = build_grid(GridSpec { lo: vec![-1.0, 0.0], hi: vec![1.0, 1.0], nodes: vec![2, 9] }).unwrap_err();
        assert!(matches!(err, Error::TooFewNodes { axis: 0, nodes: 2, .. }));
        assert!(err.to_string().contains("too few nodes"));
    }

    #[test]
    fn degenerate_extent_rejected() {
        let err = build_grid(GridSpec { lo: vec![1.0, 0.0], hi: vec![1.0, 1.0], nodes: vec![9, 9] }).unwrap_err();
        assert!(matches!(err, Error::DegenerateExtent { axis: 0 }));
    }

    #[test]
    fn nonzero_normal_origin_rejected() {
        let err = build_grid(GridSpec { lo: vec![-1.0, 0.5], hi: vec![1.0, 1.0], nodes: vec![9, 9] }).unwrap_err();
        assert!(matches!(err, Error::InvalidGrid(_)));
    }

    #[test]
    fn spacing_is_exact() {
        let g = Grid::<f64>::half_box(3, 65).unwrap();
        assert_eq!(g.spacing(), &[2.0 / 64.0, 2.0 / 64.0, 1.0 / 32.0]);
        assert_eq!(g.nodes(), &[65, 65, 33]);
    }

    #[test]
    fn index_round_trip() {
        let g = Grid::<f64>::half_box(3, 9).unwrap();
        for flat in [0, 17, 200, g.len() - 1] {
            assert_eq!(g.flat_index(&g.multi_index(flat)), flat);
        }
    }
}
