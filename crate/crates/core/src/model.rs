//! Potentials, model parameters, norms and convergence radii.

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::lattice::{self, Site};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PotentialKind {
    Transverse,
    Longitudinal,
}

/// One row of a potential table as it appears in a config document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialRecord {
    pub vector: Vec<i32>,
    pub value: [f64; 2],
}

/// Finite-support symmetric function on `Z^d \ {0}`.
///
/// For longitudinal potentials the hard core at the origin is implicit.
#[derive(Clone, Debug, PartialEq)]
pub struct Potential {
    d: usize,
    kind: PotentialKind,
    entries: Vec<(Site, C64)>,
}

impl Potential {
    pub fn empty(d: usize, kind: PotentialKind) -> Self {
        Potential { d, kind, entries: Vec::new() }
    }

    /// Strict constructor: every entry must come with its mirror image.
    pub fn new(d: usize, kind: PotentialKind, entries: Vec<(Site, C64)>) -> Result<Self> {
        check_dim(d)?;
        let mut entries = entries;
        entries.sort_by_key(|e| e.0);
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 {
                return invalid(format!("duplicate potential vector {:?}", lattice::to_vec(w[0].0, d)));
            }
        }
        for &(r, v) in &entries {
            validate_vector(r, d)?;
            if !v.re.is_finite() || !v.im.is_finite() {
                return invalid("potential values must be finite");
            }
            let m = lattice::neg(r);
            match entries.binary_search_by(|e| e.0.cmp(&m)) {
                Ok(i) if entries[i].1 == v => {}
                _ => {
                    return invalid(format!(
                        "potential is not symmetric at {:?}",
                        lattice::to_vec(r, d)
                    ))
                }
            }
        }
        entries.retain(|e| e.1 != C64::new(0.0, 0.0));
        Ok(Potential { d, kind, entries })
    }

    /// Builds from config records, filling in omitted mirror partners.
    pub fn from_records(d: usize, kind: PotentialKind, records: &[PotentialRecord]) -> Result<Self> {
        check_dim(d)?;
        let mut map: std::collections::BTreeMap<Site, C64> = Default::default();
        let mut put = |r: Site, v: C64| -> Result<()> {
            if let Some(old) = map.insert(r, v) {
                if old != v {
                    return invalid(format!(
                        "contradictory values for vector {:?}",
                        lattice::to_vec(r, d)
                    ));
                }
            }
            Ok(())
        };
        for rec in records {
            if rec.vector.len() != d {
                return invalid(format!("vector {:?} has wrong dimension (d = {d})", rec.vector));
            }
            let r = lattice::from_slice(&rec.vector).expect("length checked");
            validate_vector(r, d)?;
            let v = C64::new(rec.value[0], rec.value[1]);
            put(r, v)?;
        }
        let explicit: Vec<(Site, C64)> = map.iter().map(|(k, v)| (*k, *v)).collect();
        for (r, v) in explicit {
            let m = lattice::neg(r);
            match map.get(&m) {
                Some(w) if *w != v => {
                    return invalid(format!(
                        "contradictory values for vector {:?} and its mirror",
                        lattice::to_vec(r, d)
                    ))
                }
                Some(_) => {}
                None => {
                    map.insert(m, v);
                }
            }
        }
        Potential::new(d, kind, map.into_iter().collect())
    }

    /// `value` on the 2d unit vectors ±e_i.
    pub fn nearest_neighbour(d: usize, kind: PotentialKind, value: f64) -> Result<Self> {
        check_dim(d)?;
        let mut e = Vec::new();
        for i in 0..d {
            for s in [-1, 1] {
                let mut r = lattice::ORIGIN;
                r[i] = s;
                e.push((r, C64::new(value, 0.0)));
            }
        }
        Potential::new(d, kind, e)
    }

    pub fn to_records(&self) -> Vec<PotentialRecord> {
        self.entries
            .iter()
            .map(|(r, v)| PotentialRecord { vector: lattice::to_vec(*r, self.d), value: [v.re, v.im] })
            .collect()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn kind(&self) -> PotentialKind {
        self.kind
    }

    pub fn entries(&self) -> &[(Site, C64)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_real(&self) -> bool {
        self.entries.iter().all(|e| e.1.im == 0.0)
    }

    /// Value at `r`; zero off the support (and at the origin).
    #[inline]
    pub fn get(&self, r: Site) -> C64 {
        match self.entries.binary_search_by(|e| e.0.cmp(&r)) {
            Ok(i) => self.entries[i].1,
            Err(_) => C64::new(0.0, 0.0),
        }
    }

    /// Largest |r_i| over the support; 0 when empty.
    pub fn range(&self) -> i32 {
        self.entries.iter().map(|e| lattice::sup_norm(e.0)).max().unwrap_or(0)
    }

    pub fn abs_sum(&self) -> f64 {
        self.entries.iter().fold(0.0, |acc, e| acc + e.1.norm())
    }

    pub fn weighted_abs_sum(&self, l: f64) -> f64 {
        self.entries
            .iter()
            .fold(0.0, |acc, e| acc + e.1.norm() * (1.0 + lattice::norm(e.0)).powf(l))
    }

    pub fn sum(&self) -> C64 {
        self.entries.iter().fold(C64::new(0.0, 0.0), |acc, e| acc + e.1)
    }

    /// True when symmetric under every permutation and reflection of the axes.
    pub fn lattice_symmetric(&self) -> bool {
        let d = self.d;
        let perms: Vec<Vec<usize>> = match d {
            1 => vec![vec![0]],
            2 => vec![vec![0, 1], vec![1, 0]],
            _ => vec![
                vec![0, 1, 2],
                vec![0, 2, 1],
                vec![1, 0, 2],
                vec![1, 2, 0],
                vec![2, 0, 1],
                vec![2, 1, 0],
            ],
        };
        for &(r, v) in &self.entries {
            for p in &perms {
                for signs in 0..(1u32 << d) {
                    let mut s = lattice::ORIGIN;
                    for i in 0..d {
                        let sg = if signs >> i & 1 == 1 { -1 } else { 1 };
                        s[i] = sg * r[p[i]];
                    }
                    if self.get(s) != v {
                        return false;
                    }
                }
            }
        }
        true
    }
}

fn check_dim(d: usize) -> Result<()> {
    if !(1..=3).contains(&d) {
        return invalid(format!("dimension must be 1, 2 or 3 (got {d})"));
    }
    Ok(())
}

fn validate_vector(r: Site, d: usize) -> Result<()> {
    if lattice::is_zero(r) {
        return invalid("the zero vector cannot carry a potential value");
    }
    if r[d..].iter().any(|&x| x != 0) {
        return invalid("vector has components beyond the model dimension");
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub d: usize,
    pub beta: f64,
    pub z: C64,
    pub pi: Potential,
    pub psi: Potential,
    pub l: f64,
}

impl ModelParams {
    pub fn new(d: usize, beta: f64, z: C64, pi: Potential, psi: Potential, l: f64) -> Result<Self> {
        let p = ModelParams { d, beta, z, pi, psi, l };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        check_dim(self.d)?;
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return invalid("beta must be positive and finite");
        }
        if !(self.l > self.d as f64) {
            return invalid(format!("decay exponent l must exceed d (l = {}, d = {})", self.l, self.d));
        }
        if !self.z.re.is_finite() || !self.z.im.is_finite() {
            return invalid("fugacity must be finite");
        }
        if self.pi.d() != self.d || self.psi.d() != self.d {
            return invalid("potential dimension does not match the model");
        }
        if self.pi.kind() != PotentialKind::Transverse {
            return invalid("pi must be a transverse potential");
        }
        if self.psi.kind() != PotentialKind::Longitudinal {
            return invalid("psi must be a longitudinal potential");
        }
        Ok(())
    }

    pub fn with_z(&self, z: C64) -> Self {
        ModelParams { z, ..self.clone() }
    }

    pub fn norms(&self) -> NormSet {
        compute_norms(&self.pi, &self.psi, self.l)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormSet {
    #[serde(rename = "M")]
    pub m: f64,
    #[serde(rename = "M0")]
    pub m0: C64,
    #[serde(rename = "Ml")]
    pub ml: f64,
    pub psi_norm: f64,
    pub psi_l_norm: f64,
}

pub fn compute_norms(pi: &Potential, psi: &Potential, l: f64) -> NormSet {
    NormSet {
        m: 0.5 * pi.abs_sum(),
        m0: 0.5 * pi.sum(),
        ml: 0.5 * pi.weighted_abs_sum(l),
        psi_norm: psi.abs_sum(),
        psi_l_norm: psi.weighted_abs_sum(l),
    }
}

/// Which exponent offset to use in q_l: as printed (−1) or by analogy with q (+1).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QlVariant {
    AsPrinted,
    #[default]
    Corrected,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub q: f64,
    pub q_l: f64,
    pub p: f64,
    pub p_l: f64,
    pub c_beta: f64,
    pub c_beta_l: f64,
    pub q_ok: bool,
    pub q_l_ok: bool,
    pub p_ok: bool,
    pub p_l_ok: bool,
    pub ql_variant: QlVariant,
}

impl Diagnostics {
    pub fn all_satisfied(&self) -> bool {
        self.q_ok && self.q_l_ok && self.p_ok && self.p_l_ok
    }
}

/// Σ_{j≥1} j x^j, or +∞ outside the unit disc.
pub fn sum_j_xj(x: f64) -> f64 {
    if x < 1.0 {
        x / ((1.0 - x) * (1.0 - x))
    } else {
        f64::INFINITY
    }
}

pub fn c_beta(beta: f64, n: &NormSet) -> f64 {
    let bem = beta * std::f64::consts::E * n.m;
    0.5 * (1.0 + 3.0 * bem + bem * bem + beta * n.psi_norm * (1.0 + bem))
}

pub fn c_beta_l(beta: f64, n: &NormSet) -> f64 {
    let bem = beta * std::f64::consts::E * n.ml;
    (1.0 + bem) * (2.0 + 2.0 * beta * n.psi_l_norm + bem)
}

pub fn convergence_diagnostics(params: &ModelParams, variant: QlVariant) -> Diagnostics {
    let e = std::f64::consts::E;
    let n = params.norms();
    let b = params.beta;
    let az = params.z.norm();
    let q = az * (b * (n.m * e + n.m0.re + n.psi_norm) + 1.0).exp();
    let off = match variant {
        QlVariant::AsPrinted => -1.0,
        QlVariant::Corrected => 1.0,
    };
    let q_l = az * (b * (n.ml * e + n.m0.re + n.psi_norm) + off).exp();
    let x = az * (b * (n.m * e + n.m0.re + 2.0 * n.psi_norm) + 1.0).exp();
    let x_l = az * (b * (n.ml * e + n.m0.re + 2.0 * n.psi_norm) + 1.0).exp();
    let cb = c_beta(b, &n);
    let cbl = c_beta_l(b, &n);
    let p = cb * sum_j_xj(x);
    let p_l = cbl * sum_j_xj(x_l);
    Diagnostics {
        q,
        q_l,
        p,
        p_l,
        c_beta: cb,
        c_beta_l: cbl,
        q_ok: q < 1.0,
        q_l_ok: q_l < 1.0,
        p_ok: p < 1.0,
        p_l_ok: p_l < 1.0,
        ql_variant: variant,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(x: f64) -> C64 {
        C64::new(x, 0.0)
    }

    fn test_model(z: f64) -> ModelParams {
        let pi = Potential::nearest_neighbour(1, PotentialKind::Transverse, -0.5).unwrap();
        let psi = Potential::empty(1, PotentialKind::Longitudinal);
        ModelParams::new(1, 1.0, c(z), pi, psi, 4.0).unwrap()
    }

    #[test]
    fn norms_nearest_neighbour() {
        let n = test_model(0.05).norms();
        assert_eq!(n.m, 0.5);
        assert_eq!(n.m0, c(-0.5));
        assert_eq!(n.ml, 8.0);
        assert_eq!(n.psi_norm, 0.0);
    }

    #[test]
    fn norms_empty() {
        let pi = Potential::empty(2, PotentialKind::Transverse);
        let psi = Potential::empty(2, PotentialKind::Longitudinal);
        let n = compute_norms(&pi, &psi, 4.0);
        assert_eq!((n.m, n.m0, n.ml), (0.0, c(0.0), 0.0));
    }

    #[test]
    fn norms_psi() {
        let pi = Potential::empty(1, PotentialKind::Transverse);
        let psi = Potential::nearest_neighbour(1, PotentialKind::Longitudinal, 0.3).unwrap();
        let n = compute_norms(&pi, &psi, 4.0);
        assert!((n.psi_norm - 0.6).abs() < 1e-15);
        assert!((n.psi_l_norm - 9.6).abs() < 1e-12);
    }

    #[test]
    fn asymmetric_potential_rejected() {
        let r = Potential::new(1, PotentialKind::Transverse, vec![([1, 0, 0], c(-0.5))]);
        assert!(r.is_err());
        let r = Potential::new(
            1,
            PotentialKind::Transverse,
            vec![([1, 0, 0], c(-0.5)), ([-1, 0, 0], c(-0.4))],
        );
        assert!(r.is_err());
    }

    #[test]
    fn records_autocomplete_and_contradiction() {
        let recs = vec![PotentialRecord { vector: vec![1], value: [-0.5, 0.0] }];
        let p = Potential::from_records(1, PotentialKind::Transverse, &recs).unwrap();
        assert_eq!(p.get([-1, 0, 0]), c(-0.5));
        let bad = vec![
            PotentialRecord { vector: vec![1], value: [-0.5, 0.0] },
            PotentialRecord { vector: vec![-1], value: [-0.4, 0.0] },
        ];
        assert!(Potential::from_records(1, PotentialKind::Transverse, &bad).is_err());
        let zero = vec![PotentialRecord { vector: vec![0], value: [1.0, 0.0] }];
        assert!(Potential::from_records(1, PotentialKind::Transverse, &zero).is_err());
        let wrong_d = vec![PotentialRecord { vector: vec![1, 0], value: [1.0, 0.0] }];
        assert!(Potential::from_records(1, PotentialKind::Transverse, &wrong_d).is_err());
    }

    #[test]
    fn diagnostics_zero_fugacity() {
        let dg = convergence_diagnostics(&test_model(0.0), QlVariant::Corrected);
        assert_eq!((dg.q, dg.q_l, dg.p, dg.p_l), (0.0, 0.0, 0.0, 0.0));
        assert!(dg.all_satisfied());
    }

    #[test]
    fn diagnostics_q_value() {
        // independent scalar recomputation
        let e = std::f64::consts::E;
        let expect = 0.05 * (0.5 * e - 0.5 + 1.0).exp();
        let dg = convergence_diagnostics(&test_model(0.05), QlVariant::Corrected);
        assert!((dg.q - expect).abs() < 1e-14);
        assert!((dg.q - 0.32091103001734034).abs() < 1e-12);
        assert!((dg.c_beta_l - (1.0 + 8.0 * e) * (2.0 + 8.0 * e)).abs() < 1e-10);
        assert!(!dg.q_l_ok);
    }

    #[test]
    fn ql_variants_differ_by_e_squared() {
        let m = test_model(0.01);
        let a = convergence_diagnostics(&m, QlVariant::AsPrinted).q_l;
        let b = convergence_diagnostics(&m, QlVariant::Corrected).q_l;
        assert!((b / a - std::f64::consts::E.powi(2)).abs() < 1e-10);
    }

    #[test]
    fn lattice_symmetry_detection() {
        let p = Potential::nearest_neighbour(2, PotentialKind::Transverse, -0.25).unwrap();
        assert!(p.lattice_symmetric());
        let q = Potential::new(
            2,
            PotentialKind::Transverse,
            vec![([1, 0, 0], c(-0.3)), ([-1, 0, 0], c(-0.3)), ([0, 1, 0], c(-0.1)), ([0, -1, 0], c(-0.1))],
        )
        .unwrap();
        assert!(!q.lattice_symmetric());
    }

    proptest! {
        #[test]
        fn norm_orderings(vals in proptest::collection::vec(-2.0f64..2.0, 1..4), l in 0.5f64..6.0) {
            let mut e = Vec::new();
            for (k, v) in vals.iter().enumerate() {
                let r = (k as i32) + 1;
                e.push(([r, 0, 0], c(*v)));
                e.push(([-r, 0, 0], c(*v)));
            }
            let p = Potential::new(1, PotentialKind::Transverse, e.clone()).unwrap();
            let s = Potential::new(1, PotentialKind::Longitudinal, e).unwrap();
            let n = compute_norms(&p, &s, l);
            prop_assert!(n.m + 1e-12 >= n.m0.re.abs());
            prop_assert!(n.ml + 1e-12 >= n.m);
            prop_assert!(n.psi_l_norm + 1e-12 >= n.psi_norm);
        }

        #[test]
        fn radii_increase_with_z(z1 in 0.0f64..0.05, dz in 1e-4f64..0.05) {
            let m = test_model(z1);
            let a = convergence_diagnostics(&m, QlVariant::Corrected);
            let b = convergence_diagnostics(&m.with_z(c(z1 + dz)), QlVariant::Corrected);
            prop_assert!(b.q > a.q && b.q_l > a.q_l);
            prop_assert!(b.p > a.p || b.p.is_infinite());
        }

        #[test]
        fn ln_q_affine_in_beta(b1 in 0.2f64..2.0, b2 in 0.2f64..2.0) {
            let mut m = test_model(0.01);
            m.beta = b1;
            let q1 = convergence_diagnostics(&m, QlVariant::Corrected).q;
            m.beta = b2;
            let q2 = convergence_diagnostics(&m, QlVariant::Corrected).q;
            let n = m.norms();
            let slope = n.m * std::f64::consts::E + n.m0.re + n.psi_norm;
            prop_assert!(((q2.ln() - q1.ln()) - (b2 - b1) * slope).abs() < 1e-10);
        }

        #[test]
        fn attractive_hopping_gives_minus_m(v in 0.01f64..2.0) {
            let p = Potential::nearest_neighbour(2, PotentialKind::Transverse, -v).unwrap();
            let n = compute_norms(&p, &Potential::empty(2, PotentialKind::Longitudinal), 3.0);
            prop_assert!((n.m0.re + n.m).abs() < 1e-12);
        }
    }
}
