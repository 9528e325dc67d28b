//! Integer lattice vectors in up to three dimensions.
//!
//! A `Site` always has three components; components beyond the active
//! dimension are kept at zero.

pub type Site = [i32; 3];

pub const ORIGIN: Site = [0, 0, 0];

#[inline]
pub fn add(a: Site, b: Site) -> Site {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Site, b: Site) -> Site {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn neg(a: Site) -> Site {
    [-a[0], -a[1], -a[2]]
}

#[inline]
pub fn is_zero(a: Site) -> bool {
    a == ORIGIN
}

/// Euclidean norm.
#[inline]
pub fn norm(a: Site) -> f64 {
    let s: i64 = a.iter().map(|&x| (x as i64) * (x as i64)).sum();
    (s as f64).sqrt()
}

/// Largest absolute component.
#[inline]
pub fn sup_norm(a: Site) -> i32 {
    a.iter().map(|x| x.abs()).max().unwrap_or(0)
}

/// Builds a site from a slice of length `d` (1..=3).
pub fn from_slice(v: &[i32]) -> Option<Site> {
    if v.is_empty() || v.len() > 3 {
        return None;
    }
    let mut s = ORIGIN;
    s[..v.len()].copy_from_slice(v);
    Some(s)
}

pub fn to_vec(s: Site, d: usize) -> Vec<i32> {
    s[..d].to_vec()
}

/// Axis-aligned bounding box of a set of sites (inclusive corners).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub lo: Site,
    pub hi: Site,
}

impl BBox {
    pub fn point(s: Site) -> Self {
        BBox { lo: s, hi: s }
    }

    pub fn include(&mut self, s: Site) {
        for i in 0..3 {
            self.lo[i] = self.lo[i].min(s[i]);
            self.hi[i] = self.hi[i].max(s[i]);
        }
    }

    pub fn union(&self, o: &BBox) -> BBox {
        let mut b = *self;
        b.include(o.lo);
        b.include(o.hi);
        b
    }

    pub fn shift(&self, r: Site) -> BBox {
        BBox { lo: add(self.lo, r), hi: add(self.hi, r) }
    }

    pub fn width(&self, axis: usize) -> i32 {
        self.hi[axis] - self.lo[axis]
    }

    /// Largest per-axis gap between two boxes (0 when they overlap on every axis).
    pub fn gap(&self, o: &BBox) -> i32 {
        let mut g = 0;
        for i in 0..3 {
            let gi = (o.lo[i] - self.hi[i]).max(self.lo[i] - o.hi[i]).max(0);
            g = g.max(gi);
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bbox_gap_and_union() {
        let a = BBox { lo: [0, 0, 0], hi: [2, 0, 0] };
        let b = BBox { lo: [5, 0, 0], hi: [6, 0, 0] };
        assert_eq!(a.gap(&b), 3);
        assert_eq!(b.gap(&a), 3);
        assert_eq!(a.gap(&a), 0);
        let u = a.union(&b);
        assert_eq!(u.lo, [0, 0, 0]);
        assert_eq!(u.hi, [6, 0, 0]);
    }

    #[test]
    fn norms() {
        assert_eq!(norm([3, 4, 0]), 5.0);
        assert_eq!(sup_norm([-3, 2, 1]), 3);
        assert_eq!(from_slice(&[1, -2]), Some([1, -2, 0]));
        assert_eq!(from_slice(&[]), None);
    }
}
