//! n-dimensional points, axis-aligned boxes, integer grid keys, periodic
//! wrapping, and Hilbert space-filling-curve indexing.
//!
//! Boxes use the half-open membership convention: `p` is inside iff
//! `low[d] <= p[d] < high[d]` on every axis. Sub-domain boxes therefore tile
//! a domain with zero double-ownership.

use crate::error::{usage, Result};

/// Per-axis boundary condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bc {
    Periodic,
    NonPeriodic,
}

/// Ghost (halo) layer extent in length units. For meshes the node width is
/// `ceil(width / spacing)` per axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GhostSpec {
    pub width: f64,
}

impl GhostSpec {
    pub fn new(width: f64) -> Result<Self> {
        if !(width >= 0.0) {
            return Err(usage(format!("ghost width must be >= 0, got {width}")));
        }
        Ok(GhostSpec { width })
    }
}

/// Integer multi-index into a grid.
pub type GridKey = Vec<i64>;

/// Axis-aligned box with half-open membership.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisBox {
    low: Vec<f64>,
    high: Vec<f64>,
}

impl AxisBox {
    pub fn new(low: Vec<f64>, high: Vec<f64>) -> Result<Self> {
        if low.is_empty() || low.len() != high.len() {
            return Err(usage("box corners must be non-empty and of equal dimension"));
        }
        for d in 0..low.len() {
            if !low[d].is_finite() || !high[d].is_finite() {
                return Err(usage("box corners must be finite"));
            }
            if low[d] > high[d] {
                return Err(usage(format!(
                    "box low {} > high {} on axis {d}",
                    low[d], high[d]
                )));
            }
        }
        Ok(AxisBox { low, high })
    }

    /// Unit hypercube `[0,1)^dim`.
    pub fn unit(dim: usize) -> Self {
        AxisBox {
            low: vec![0.0; dim],
            high: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    pub fn low(&self) -> &[f64] {
        &self.low
    }

    pub fn high(&self) -> &[f64] {
        &self.high
    }

    pub fn extent(&self, d: usize) -> f64 {
        self.high[d] - self.low[d]
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|d| self.extent(d)).product()
    }

    /// Half-open membership test.
    pub fn contains(&self, p: &[f64]) -> bool {
        debug_assert_eq!(p.len(), self.dim());
        (0..self.dim()).all(|d| self.low[d] <= p[d] && p[d] < self.high[d])
    }

    /// Intersection under the half-open convention; `None` when the overlap
    /// is empty (boxes sharing only a face do not intersect).
    pub fn intersect(&self, other: &AxisBox) -> Option<AxisBox> {
        assert_eq!(self.dim(), other.dim(), "box dimension mismatch");
        let mut low = Vec::with_capacity(self.dim());
        let mut high = Vec::with_capacity(self.dim());
        for d in 0..self.dim() {
            let lo = self.low[d].max(other.low[d]);
            let hi = self.high[d].min(other.high[d]);
            if lo >= hi {
                return None;
            }
            low.push(lo);
            high.push(hi);
        }
        Some(AxisBox { low, high })
    }

    /// Box grown by the ghost width on every face.
    pub fn enlarge(&self, ghost: &GhostSpec) -> AxisBox {
        let low = self.low.iter().map(|x| x - ghost.width).collect();
        let high = self.high.iter().map(|x| x + ghost.width).collect();
        AxisBox { low, high }
    }

    /// Box translated by `shift`.
    pub fn shifted(&self, shift: &[f64]) -> AxisBox {
        debug_assert_eq!(shift.len(), self.dim());
        let low = self.low.iter().zip(shift).map(|(x, s)| x + s).collect();
        let high = self.high.iter().zip(shift).map(|(x, s)| x + s).collect();
        AxisBox { low, high }
    }
}

/// Wrap `p` into the domain on periodic axes; non-periodic axes pass through.
///
/// On a periodic axis the result lies in `[low, high)` and differs from the
/// input by an integer multiple of the extent. Out-of-domain coordinates on
/// non-periodic axes are reported by the map operation, not here.
pub fn periodic_wrap(p: &[f64], domain: &AxisBox, bc: &[Bc]) -> Vec<f64> {
    let mut out = p.to_vec();
    periodic_wrap_in_place(&mut out, domain, bc);
    out
}

/// In-place variant of [`periodic_wrap`].
pub fn periodic_wrap_in_place(p: &mut [f64], domain: &AxisBox, bc: &[Bc]) {
    debug_assert_eq!(p.len(), domain.dim());
    for d in 0..p.len() {
        if bc[d] == Bc::Periodic {
            let lo = domain.low()[d];
            let ext = domain.extent(d);
            let mut x = (p[d] - lo).rem_euclid(ext) + lo;
            // rem_euclid returns values in [0, ext) but lo + r can still round
            // up to the high face; keep the half-open invariant exact.
            if x >= domain.high()[d] {
                x = lo;
            }
            p[d] = x;
        }
    }
}

/// Hilbert curve index of `key` on the `2^order`-per-axis grid.
///
/// Bijection from the `2^(order*D)` grid keys onto `[0, 2^(order*D))`;
/// consecutive indices map to face-adjacent keys. Base orientation in 2D,
/// order 1: `(0,0) -> 0, (0,1) -> 1, (1,1) -> 2, (1,0) -> 3`.
pub fn hilbert_index(key: &[u64], order: u32) -> Result<u64> {
    let dim = key.len();
    if dim == 0 {
        return Err(usage("hilbert key must have at least one axis"));
    }
    if order as usize * dim > 63 {
        return Err(usage(format!(
            "hilbert order {order} with dimension {dim} overflows u64"
        )));
    }
    for (d, &k) in key.iter().enumerate() {
        if order < 64 && k >= (1u64 << order) {
            return Err(usage(format!(
                "hilbert key component {k} on axis {d} out of range for order {order}"
            )));
        }
    }
    if order == 0 {
        return Ok(0);
    }
    let mut x = key.to_vec();
    axes_to_transpose(&mut x, order);
    // Interleave: MSB of axis 0 first.
    let mut out = 0u64;
    for b in (0..order).rev() {
        for xi in &x {
            out = (out << 1) | ((xi >> b) & 1);
        }
    }
    Ok(out)
}

/// Skilling's in-place conversion from axis coordinates to the transposed
/// Hilbert representation ("Programming the Hilbert curve", AIP 2004).
fn axes_to_transpose(x: &mut [u64], bits: u32) {
    let n = x.len();
    let m = 1u64 << (bits - 1);
    // Inverse undo excess work.
    let mut q = m;
    while q > 1 {
        let p = q - 1;
        for i in 0..n {
            if x[i] & q != 0 {
                x[0] ^= p;
            } else {
                let t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q >>= 1;
    }
    // Gray encode.
    for i in 1..n {
        x[i] ^= x[i - 1];
    }
    let mut t = 0;
    let mut q = m;
    while q > 1 {
        if x[n - 1] & q != 0 {
            t ^= q - 1;
        }
        q >>= 1;
    }
    for xi in x.iter_mut() {
        *xi ^= t;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boxn(low: &[f64], high: &[f64]) -> AxisBox {
        AxisBox::new(low.to_vec(), high.to_vec()).unwrap()
    }

    #[test]
    fn intersect_basic() {
        let a = boxn(&[0.0, 0.0], &[2.0, 2.0]);
        let b = boxn(&[1.0, 1.0], &[3.0, 3.0]);
        let c = a.intersect(&b).unwrap();
        assert_eq!(c, boxn(&[1.0, 1.0], &[2.0, 2.0]));
    }

    #[test]
    fn intersect_shared_face_is_empty() {
        let a = boxn(&[0.0], &[1.0]);
        let b = boxn(&[1.0], &[2.0]);
        assert!(a.intersect(&b).is_none());
    }

    #[test]
    fn intersect_idempotent_commutative() {
        let a = boxn(&[0.25, -1.0, 3.0], &[0.75, 2.0, 4.5]);
        assert_eq!(a.intersect(&a).unwrap(), a);
        let b = boxn(&[0.5, 0.0, 2.0], &[1.0, 1.0, 4.0]);
        assert_eq!(a.intersect(&b), b.intersect(&a));
        let c = a.intersect(&b).unwrap();
        for p in [c.low().to_vec(), {
            let mut m = c.low().to_vec();
            m[0] = 0.5 * (c.low()[0] + c.high()[0]);
            m
        }] {
            assert!(a.contains(&p) && b.contains(&p));
        }
    }

    #[test]
    fn intersect_random_small_boxes_contained_in_both() {
        // Exhaustive over small integer corner boxes in 2D.
        for alo in 0..3i32 {
            for ahi in alo..4 {
                for blo in 0..3 {
                    for bhi in blo..4 {
                        let a = boxn(&[alo as f64, 0.0], &[ahi as f64, 1.0]);
                        let b = boxn(&[blo as f64, 0.0], &[bhi as f64, 1.0]);
                        if let Some(c) = a.intersect(&b) {
                            assert!(c.low()[0] >= a.low()[0] && c.low()[0] >= b.low()[0]);
                            assert!(c.high()[0] <= a.high()[0] && c.high()[0] <= b.high()[0]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn enlarge_by_width() {
        let b = boxn(&[0.0, 0.0], &[1.0, 1.0]);
        let g = GhostSpec::new(0.1).unwrap();
        let e = b.enlarge(&g);
        assert_eq!(e, boxn(&[-0.1, -0.1], &[1.1, 1.1]));
        let id = b.enlarge(&GhostSpec::new(0.0).unwrap());
        assert_eq!(id, b);
        let c = boxn(&[2.0], &[3.0]).enlarge(&GhostSpec::new(0.5).unwrap());
        assert_eq!(c, boxn(&[1.5], &[3.5]));
    }

    #[test]
    fn wrap_periodic() {
        let dom = boxn(&[0.0], &[1.0]);
        let w = periodic_wrap(&[1.2], &dom, &[Bc::Periodic]);
        assert!((w[0] - 0.2).abs() < 1e-12);
        let w = periodic_wrap(&[-0.3], &dom, &[Bc::Periodic]);
        assert!((w[0] - 0.7).abs() < 1e-12);
        let w = periodic_wrap(&[1.2], &dom, &[Bc::NonPeriodic]);
        assert_eq!(w[0], 1.2);
    }

    #[test]
    fn wrap_idempotent_and_in_range() {
        let dom = boxn(&[-1.0, 2.0], &[1.0, 5.0]);
        let bc = [Bc::Periodic, Bc::NonPeriodic];
        for p in [[3.7, 2.5], [-5.25, 10.0], [0.999999999, 4.9]] {
            let w1 = periodic_wrap(&p, &dom, &bc);
            let w2 = periodic_wrap(&w1, &dom, &bc);
            assert_eq!(w1, w2);
            assert!(dom.low()[0] <= w1[0] && w1[0] < dom.high()[0]);
            assert_eq!(w1[1], p[1]);
            let k = (p[0] - w1[0]) / dom.extent(0);
            assert!((k - k.round()).abs() < 1e-9);
        }
    }

    #[test]
    fn hilbert_base_orientation_2d() {
        assert_eq!(hilbert_index(&[0, 0], 1).unwrap(), 0);
        assert_eq!(hilbert_index(&[0, 1], 1).unwrap(), 1);
        assert_eq!(hilbert_index(&[1, 1], 1).unwrap(), 2);
        assert_eq!(hilbert_index(&[1, 0], 1).unwrap(), 3);
    }

    #[test]
    fn hilbert_1d_is_identity() {
        for order in 1..6u32 {
            for k in 0..(1u64 << order) {
                assert_eq!(hilbert_index(&[k], order).unwrap(), k);
            }
        }
    }

    #[test]
    fn hilbert_bijection_and_adjacency() {
        // Exhaustive bijection + face-adjacency of consecutive keys for
        // D in 1..=4 and order <= 3 (capped so the grid stays small).
        for dim in 1..=4usize {
            for order in 1..=3u32 {
                if order as usize * dim > 16 {
                    continue;
                }
                let side = 1u64 << order;
                let total = side.pow(dim as u32);
                let mut seen = vec![false; total as usize];
                let mut by_index = vec![vec![0u64; dim]; total as usize];
                let mut key = vec![0u64; dim];
                for _ in 0..total {
                    let h = hilbert_index(&key, order).unwrap();
                    assert!(h < total, "index out of range");
                    assert!(!seen[h as usize], "duplicate hilbert index");
                    seen[h as usize] = true;
                    by_index[h as usize] = key.clone();
                    // advance multi-index
                    for d in (0..dim).rev() {
                        key[d] += 1;
                        if key[d] < side {
                            break;
                        }
                        key[d] = 0;
                    }
                }
                for w in by_index.windows(2) {
                    let dist: u64 = w[0]
                        .iter()
                        .zip(&w[1])
                        .map(|(a, b)| a.abs_diff(*b))
                        .sum();
                    assert_eq!(dist, 1, "consecutive keys must be face-adjacent");
                }
            }
        }
    }

    #[test]
    fn hilbert_rejects_out_of_range_key() {
        assert!(hilbert_index(&[2, 0], 1).is_err());
        assert!(hilbert_index(&[0, 0, 0, 0], 16).is_err());
    }
}
