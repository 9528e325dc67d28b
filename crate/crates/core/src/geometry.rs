//! Boxes and half-spaces, the inclusion–exclusion of the containment
//! indicator, the boundary coefficients A0–A3 and the finite-size fit.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::cluster::{self, FaceSet, SiteBox};
use crate::error::{invalid, Error, Result};
use crate::lattice::{self, BBox, Site};
use crate::loops::{CompositeLoop, LoopConfiguration};
use crate::mc::Estimate;
use crate::model::{convergence_diagnostics, ModelParams, QlVariant};
use crate::pathint::{SeriesEstimate, Truncation};
use crate::report::{CheckRow, Status};

/// Integer box {r : 0 ≤ r_i ≤ ⌊R a_i⌋}.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeBox {
    pub d: usize,
    pub extents: Vec<i32>,
    pub scale: f64,
}

impl LatticeBox {
    pub fn new(d: usize, extents: Vec<i32>, scale: f64) -> Result<Self> {
        if !(1..=3).contains(&d) {
            return invalid(format!("dimension {d} not in 1..=3"));
        }
        if extents.len() != d || extents.iter().any(|&a| a <= 0) {
            return invalid(format!("need {d} positive extents, got {extents:?}"));
        }
        if !(scale > 0.0) || !scale.is_finite() {
            return invalid(format!("scale must be positive, got {scale}"));
        }
        Ok(LatticeBox { d, extents, scale })
    }

    pub fn with_scale(&self, scale: f64) -> Self {
        LatticeBox { scale, ..self.clone() }
    }

    /// Largest coordinate along axis i.
    pub fn side(&self, i: usize) -> i32 {
        (self.scale * self.extents[i] as f64 + 1e-9).floor() as i32
    }

    pub fn site_box(&self) -> SiteBox {
        let mut hi = lattice::ORIGIN;
        for i in 0..self.d {
            hi[i] = self.side(i);
        }
        SiteBox { lo: lattice::ORIGIN, hi }
    }

    pub fn volume(&self) -> usize {
        self.site_box().volume(self.d)
    }

    fn sets_of_order(&self, k: usize) -> Vec<FaceSet> {
        FaceSet::all(self.d).into_iter().filter(|f| f.order() == k).collect()
    }

    pub fn faces(&self) -> Vec<FaceSet> {
        self.sets_of_order(1)
    }

    /// Pairs of faces on distinct axes; empty for d = 1.
    pub fn edges(&self) -> Vec<FaceSet> {
        if self.d < 2 {
            return Vec::new();
        }
        self.sets_of_order(2)
    }

    pub fn vertices(&self) -> Vec<FaceSet> {
        self.sets_of_order(self.d)
    }

    pub fn half_spaces(&self) -> Vec<HalfSpace> {
        (1..=2 * self.d).map(|l| HalfSpace::new(self, l).unwrap()).collect()
    }

    /// Number of sites of the sub-box left after fixing the axes in `s`:
    /// Π_{i∉S} (⌊R a_i⌋ + 1).
    pub fn site_multiplier(&self, s: &FaceSet) -> f64 {
        (0..self.d).filter(|&i| s.0[i] == 0).map(|i| (self.side(i) + 1) as f64).product()
    }

    /// Π_{i∉S} a_i, the unscaled face/edge measure.
    pub fn measure(&self, s: &FaceSet) -> f64 {
        (0..self.d).filter(|&i| s.0[i] == 0).map(|i| self.extents[i] as f64).product()
    }
}

/// {ℓ_l ≥ 0} with ℓ_l(r) = r_i for l = i ≤ d and ⌊R a_i⌋ − r_i for l = i + d.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HalfSpace {
    pub index: usize,
    pub axis: usize,
    pub high: bool,
    pub side: i32,
}

impl HalfSpace {
    pub fn new(bx: &LatticeBox, index: usize) -> Result<Self> {
        if index == 0 || index > 2 * bx.d {
            return invalid(format!("half-space index {index} not in 1..={}", 2 * bx.d));
        }
        let axis = (index - 1) % bx.d;
        let high = index > bx.d;
        Ok(HalfSpace { index, axis, high, side: bx.side(axis) })
    }

    pub fn value(&self, r: Site) -> i32 {
        if self.high {
            self.side - r[self.axis]
        } else {
            r[self.axis]
        }
    }

    pub fn face(&self) -> FaceSet {
        let mut f = [0u8; 3];
        f[self.axis] = if self.high { 2 } else { 1 };
        FaceSet(f)
    }
}

/// True iff some loop of X ∪ ω reaches ℓ_l ≤ −1. Paths are constant between
/// breakpoints, so the infimum is a minimum over visited sites.
pub fn config_indicator(x: &CompositeLoop, omega: &LoopConfiguration, hs: &HalfSpace) -> bool {
    std::iter::once(x)
        .chain(omega.loops.iter())
        .any(|lp| lp.visited().any(|s| hs.value(s) <= -1))
}

/// Terms of 1_{inside} = Π_l (1 − E_l) = Σ_L (−1)^{|L|} Π_{l∈L} E_l, split by
/// the order of L; sets with two parallel faces or more than d faces go to
/// the remainder.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct InclusionExclusion {
    pub orders: [f64; 4],
    pub remainder: f64,
}

impl InclusionExclusion {
    pub fn total(&self) -> f64 {
        self.orders.iter().sum::<f64>() + self.remainder
    }
}

/// `exits[l-1]` is E_l for half-space index l.
pub fn inclusion_exclusion(exits: &[bool], d: usize) -> InclusionExclusion {
    let nf = 2 * d;
    let mut out = InclusionExclusion::default();
    for set in 0u32..(1 << nf) {
        let on = (0..nf).all(|l| set >> l & 1 == 0 || exits[l]);
        if !on {
            continue;
        }
        let k = set.count_ones() as usize;
        let sign = if k.is_multiple_of(2) { 1.0 } else { -1.0 };
        let parallel = (0..d).any(|i| set >> i & 1 == 1 && set >> (i + d) & 1 == 1);
        if parallel || k > d {
            out.remainder += sign;
        } else {
            out.orders[k] += sign;
        }
    }
    out
}

/// A0 and the face, edge and vertex coefficients.
#[derive(Clone, Debug)]
pub struct GeometricCoefficients {
    pub d: usize,
    pub a0: SeriesEstimate,
    pub a1: Vec<(FaceSet, SeriesEstimate)>,
    pub a2: Vec<(FaceSet, SeriesEstimate)>,
    pub a3: Vec<(FaceSet, SeriesEstimate)>,
    pub symmetric: bool,
}

fn average(list: &[(FaceSet, SeriesEstimate)]) -> Option<SeriesEstimate> {
    let first = list.first()?;
    let n = list.len() as f64;
    let mut v = C64::new(0.0, 0.0);
    let mut err = 0.0f64;
    let mut tail = 0.0f64;
    for (_, e) in list {
        v += e.value;
        // the faces share samples, so errors are not independent
        err += e.stat_error;
        tail = tail.max(e.tail_bound);
    }
    let mut meta = first.1.meta.clone();
    meta.notes.push(format!("average over {} equivalent sets", list.len()));
    Some(SeriesEstimate::new(Estimate { value: v / n, stat_error: err / n }, tail, meta))
}

impl GeometricCoefficients {
    /// Symmetric value per order (average over the equivalent sets), if any.
    pub fn symmetric_value(&self, order: usize) -> Option<SeriesEstimate> {
        match order {
            0 => Some(self.a0.clone()),
            1 => average(&self.a1),
            2 => average(&self.a2),
            3 => average(&self.a3),
            _ => None,
        }
    }

    pub fn get(&self, set: &FaceSet) -> Option<&SeriesEstimate> {
        let list = match set.order() {
            0 => return Some(&self.a0),
            1 => &self.a1,
            2 => &self.a2,
            3 => &self.a3,
            _ => return None,
        };
        list.iter().find(|(f, _)| f == set).map(|(_, e)| e)
    }

    /// Σ_S A_S Π_{i∉S}(⌊R a_i⌋ + 1): the prediction of ln Z(Λ_R) up to o(1).
    pub fn predict_lnz(&self, bx: &LatticeBox) -> C64 {
        let mut v = self.a0.value * bx.site_multiplier(&FaceSet([0; 3]));
        for list in [&self.a1, &self.a2, &self.a3] {
            for (f, e) in list.iter() {
                v += e.value * bx.site_multiplier(f);
            }
        }
        v
    }
}

/// All coefficients from one rooted-cluster run.
pub fn geometric_coefficients(params: &ModelParams, trunc: &Truncation) -> Result<GeometricCoefficients> {
    let dg = convergence_diagnostics(params, QlVariant::Corrected);
    let res = cluster::rooted_integrals(params, trunc, &[], &[])?;
    let mut a0 = None;
    let (mut a1, mut a2, mut a3) = (Vec::new(), Vec::new(), Vec::new());
    for (fs, mut e) in res.faces {
        if !dg.q_ok || !dg.p_ok {
            e.meta.notes.push("outside the convergence radius; coefficients are formal".into());
        }
        match fs.order() {
            0 => a0 = Some(e),
            1 => a1.push((fs, e)),
            2 => a2.push((fs, e)),
            _ => a3.push((fs, e)),
        }
    }
    // in d = 2 the order-2 sets are the corners; keep them in a2
    let symmetric = params.pi.lattice_symmetric() && params.psi.lattice_symmetric();
    Ok(GeometricCoefficients { d: params.d, a0: a0.expect("empty face set"), a1, a2, a3, symmetric })
}

pub fn coeff_a0(params: &ModelParams, trunc: &Truncation) -> Result<SeriesEstimate> {
    Ok(geometric_coefficients(params, trunc)?.a0)
}

fn pick(list: Vec<(FaceSet, SeriesEstimate)>, set: Option<FaceSet>, what: &str) -> Result<SeriesEstimate> {
    match set {
        Some(f) => list
            .into_iter()
            .find(|(g, _)| *g == f)
            .map(|(_, e)| e)
            .ok_or_else(|| Error::Validation(format!("{f:?} is not a {what}"))),
        None => average(&list).ok_or_else(|| Error::Domain(format!("no {what} in this dimension"))),
    }
}

/// Per-face value, or the average over faces when `face` is None.
pub fn coeff_a1(face: Option<FaceSet>, params: &ModelParams, trunc: &Truncation) -> Result<SeriesEstimate> {
    pick(geometric_coefficients(params, trunc)?.a1, face, "face")
}

pub fn coeff_a2(edge: Option<FaceSet>, params: &ModelParams, trunc: &Truncation) -> Result<SeriesEstimate> {
    if params.d < 2 {
        return Err(Error::Domain("edge coefficients need d ≥ 2".into()));
    }
    pick(geometric_coefficients(params, trunc)?.a2, edge, "edge")
}

pub fn coeff_a3(vertex: Option<FaceSet>, params: &ModelParams, trunc: &Truncation) -> Result<SeriesEstimate> {
    if params.d < 3 {
        return Err(Error::Domain("vertex coefficients need d = 3".into()));
    }
    pick(geometric_coefficients(params, trunc)?.a3, vertex, "vertex")
}

/// ln Z(Λ_R) for each scale from the rooted clusters that fit inside the box.
pub fn rooted_box_lnz(bx: &LatticeBox, scales: &[f64], params: &ModelParams, trunc: &Truncation) -> Result<Vec<(f64, SeriesEstimate)>> {
    Ok(cluster::rooted_integrals(params, trunc, &bx.extents, scales)?.box_lnz)
}

/// Translations r ∈ [0, L] along one axis for which a cluster with hull
/// [lo, hi] relative to the root exits both faces of that axis.
fn both_faces_count(lo: i32, hi: i32, len: i32) -> f64 {
    let a = (len + 1 - hi).max(0);
    let b = (-lo - 1).min(len);
    (b - a + 1).max(0) as f64
}

/// The two-parallel-faces part of the remainder, with absolute weights,
/// against its bound through K(R) at half the box length.
pub fn remainder_bound_check(r_grid: &[f64], bx: &LatticeBox, params: &ModelParams, trunc: &Truncation) -> Result<Vec<CheckRow>> {
    if bx.d != params.d {
        return invalid(format!("box dimension {} differs from model dimension {}", bx.d, params.d));
    }
    let d = params.d;
    let boxes: Vec<LatticeBox> = r_grid.iter().map(|&r| bx.with_scale(r)).collect();
    let (vals, _) = cluster::rooted_observables(params, trunc, r_grid.len(), true, &|h: &BBox, g| {
        for (q, b) in boxes.iter().enumerate() {
            let mut c = both_faces_count(h.lo[0], h.hi[0], b.side(0));
            for i in 1..d {
                c *= (b.side(i) + 1) as f64;
            }
            g[q] = c;
        }
    })?;
    let dg = convergence_diagnostics(params, QlVariant::Corrected);
    let n = params.norms();
    let p = dg.p.max(dg.p_l);
    let inside = p < 1.0 && dg.q_l < 1.0;
    let ck = if inside {
        cluster::c_l_p(params.l, p) * (1.0 + params.beta * std::f64::consts::E * n.ml) * dg.q_l / (1.0 - dg.q_l)
    } else {
        f64::INFINITY
    };
    let shape = |r: f64| r.powi(d as i32) * (1.0 + r).powf(-params.l);
    let mut rows = Vec::new();
    for (q, b) in boxes.iter().enumerate() {
        let half = b.side(0) as f64 / 2.0;
        let bound = if inside { b.volume() as f64 * ck * (1.0 + half).powf(-params.l) } else { f64::INFINITY };
        let row = CheckRow::new("remainder", None, Some(r_grid[q]), vals[q].value, vals[q].stat_error, 0.0, bound)
            .with_note("clusters exiting both faces of axis 1, absolute weights");
        rows.push(if inside { row } else { row.not_applicable(&format!("outside the radius: max(p, p_l) = {p:.3e}, q_l = {:.3e}", dg.q_l)) });
    }
    for q in 1..r_grid.len() {
        let (a, b) = (shape(r_grid[q - 1]), shape(r_grid[q]));
        let mut row = CheckRow::new("remainder_shape", None, Some(r_grid[q]), C64::new(b, 0.0), 0.0, 0.0, a);
        row.status = if b < a { Status::Pass } else { Status::Fail };
        rows.push(row.with_note("R^d (1+R)^{-l} against the previous grid point"));
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Finite-size fit

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitPoint {
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "lnZ")]
    pub lnz: f64,
    pub err: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitBasis {
    /// R^{d−k} times the summed measure of the order-k sets.
    #[default]
    Raw,
    /// Σ_{|S|=k} Π_{i∉S}(⌊R a_i⌋ + 1): slot k is then the symmetric A_k.
    SiteCount,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitResult {
    pub names: Vec<String>,
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub residuals: Vec<f64>,
    pub chi2: f64,
    pub dof: usize,
    pub basis: FitBasis,
}

fn basis_row(bx: &LatticeBox, r: f64, basis: FitBasis) -> Vec<f64> {
    let b = bx.with_scale(r);
    (0..=bx.d)
        .map(|k| {
            let sets = if k == 0 { vec![FaceSet([0; 3])] } else { b.sets_of_order(k) };
            match basis {
                FitBasis::Raw => r.powi((bx.d - k) as i32) * sets.iter().map(|s| b.measure(s)).sum::<f64>(),
                FitBasis::SiteCount => sets.iter().map(|s| b.site_multiplier(s)).sum(),
            }
        })
        .collect()
}

impl FitResult {
    pub fn predict(&self, bx: &LatticeBox, r: f64) -> f64 {
        basis_row(bx, r, self.basis).iter().zip(&self.values).map(|(x, c)| x * c).sum()
    }
}

/// Weighted least squares of ln Z(R) on the geometric basis. Zero errors
/// mean unit weights with the covariance scaled by the residual variance.
pub fn fit_geometric(data: &[FitPoint], bx: &LatticeBox, basis: FitBasis) -> Result<FitResult> {
    let p = bx.d + 1;
    let mut rs: Vec<f64> = data.iter().map(|x| x.r).collect();
    rs.sort_by(f64::total_cmp);
    rs.dedup();
    if rs.len() < bx.d + 2 {
        return Err(Error::Validation(format!("need at least {} distinct R values, got {}", bx.d + 2, rs.len())));
    }
    if data.iter().any(|x| !x.lnz.is_finite() || !(x.err >= 0.0) || !(x.r > 0.0)) {
        return invalid("fit data must be finite with R > 0 and err ≥ 0");
    }
    let weighted = data.iter().all(|x| x.err > 0.0);
    let n = data.len();
    let mut xm = DMatrix::<f64>::zeros(n, p);
    let mut y = DVector::<f64>::zeros(n);
    for (i, pt) in data.iter().enumerate() {
        let w = if weighted { 1.0 / pt.err } else { 1.0 };
        for (k, v) in basis_row(bx, pt.r, basis).into_iter().enumerate() {
            xm[(i, k)] = v * w;
        }
        y[i] = pt.lnz * w;
    }
    // scale columns for conditioning
    let scales: Vec<f64> = (0..p).map(|k| xm.column(k).norm().max(1e-300)).collect();
    let mut xs = xm.clone();
    for k in 0..p {
        xs.column_mut(k).scale_mut(1.0 / scales[k]);
    }
    let svd = xs.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if svd.singular_values.iter().any(|&s| s <= 1e-12 * smax) {
        return Err(Error::Validation("rank-deficient design matrix".into()));
    }
    let beta_s = svd.solve(&y, 1e-14).map_err(|e| Error::Validation(e.to_string()))?;
    let xtx_inv = (xs.transpose() * &xs).try_inverse().ok_or_else(|| Error::Validation("singular normal matrix".into()))?;
    let resid_w = &y - &xs * &beta_s;
    let chi2 = resid_w.norm_squared();
    let dof = n - p;
    let s2 = if weighted { 1.0 } else if dof > 0 { chi2 / dof as f64 } else { 0.0 };
    let values: Vec<f64> = (0..p).map(|k| beta_s[k] / scales[k]).collect();
    let covariance: Vec<Vec<f64>> =
        (0..p).map(|a| (0..p).map(|b| s2 * xtx_inv[(a, b)] / (scales[a] * scales[b])).collect()).collect();
    let stderr = (0..p).map(|k| covariance[k][k].max(0.0).sqrt()).collect();
    let mut res = FitResult {
        names: (0..p).map(|k| format!("A{k}")).collect(),
        values,
        stderr,
        covariance,
        residuals: Vec::new(),
        chi2,
        dof,
        basis,
    };
    res.residuals = data.iter().map(|pt| pt.lnz - res.predict(bx, pt.r)).collect();
    Ok(res)
}

pub fn read_fit_data<R: std::io::Read>(r: R) -> Result<Vec<FitPoint>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut v = Vec::new();
    for rec in rd.deserialize() {
        v.push(rec?);
    }
    Ok(v)
}

pub fn write_fit<W: std::io::Write>(w: W, fit: &FitResult) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["coefficient_name", "value", "stderr"])?;
    for k in 0..fit.values.len() {
        wr.write_record([fit.names[k].clone(), format!("{:.17e}", fit.values[k]), format!("{:.17e}", fit.stderr[k])])?;
    }
    wr.flush()?;
    Ok(())
}

/// Columns (R, lnZ, prediction, residual) for external plotting.
pub fn write_plotdata<W: std::io::Write>(w: W, data: &[FitPoint], bx: &LatticeBox, fit: &FitResult) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["R", "lnZ", "prediction", "residual"])?;
    for pt in data {
        let pr = fit.predict(bx, pt.r);
        wr.write_record([pt.r.to_string(), format!("{:.17e}", pt.lnz), format!("{pr:.17e}"), format!("{:.17e}", pt.lnz - pr)])?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Potential, PotentialKind};
    use proptest::prelude::*;

    fn static_model(d: usize, z: f64) -> ModelParams {
        ModelParams::new(
            d,
            1.0,
            C64::new(z, 0.0),
            Potential::empty(d, PotentialKind::Transverse),
            Potential::empty(d, PotentialKind::Longitudinal),
            d as f64 + 1.0,
        )
        .unwrap()
    }

    #[test]
    fn box_counts() {
        let b = LatticeBox::new(3, vec![1, 2, 3], 1.0).unwrap();
        assert_eq!((b.faces().len(), b.edges().len(), b.vertices().len()), (6, 12, 8));
        let b2 = LatticeBox::new(2, vec![1, 1], 2.0).unwrap();
        assert_eq!((b2.faces().len(), b2.edges().len(), b2.vertices().len()), (4, 4, 4));
        assert_eq!(b2.volume(), 9);
        assert!(LatticeBox::new(2, vec![1], 1.0).is_err());
        assert!(LatticeBox::new(1, vec![0], 1.0).is_err());
    }

    #[test]
    fn box_is_intersection_of_half_spaces() {
        let b = LatticeBox::new(2, vec![2, 1], 1.5).unwrap();
        let hs = b.half_spaces();
        let sb = b.site_box();
        for x in -2..6 {
            for y in -2..5 {
                let r = [x, y, 0];
                let inside = (0..2).all(|i| r[i] >= sb.lo[i] && r[i] <= sb.hi[i]);
                assert_eq!(inside, hs.iter().all(|h| h.value(r) >= 0));
            }
        }
    }

    #[test]
    fn indicator_conventions() {
        let b = LatticeBox::new(1, vec![4], 1.0).unwrap();
        let low = HalfSpace::new(&b, 1).unwrap();
        let high = HalfSpace::new(&b, 2).unwrap();
        let empty = LoopConfiguration { loops: vec![] };
        let at = |x: i32| CompositeLoop::stationary(1, 1.0, [x, 0, 0], 1);
        assert!(!config_indicator(&at(2), &empty, &low));
        assert!(config_indicator(&at(-1), &empty, &low));
        assert!(!config_indicator(&at(0), &empty, &low));
        assert!(!config_indicator(&at(4), &empty, &high));
        assert!(config_indicator(&at(5), &empty, &high));
        let omega = LoopConfiguration { loops: vec![at(-3)] };
        assert!(config_indicator(&at(2), &omega, &low));
    }

    proptest! {
        #[test]
        fn inclusion_exclusion_resums(d in 1usize..=3, bits in 0u32..64) {
            let exits: Vec<bool> = (0..2 * d).map(|l| bits >> l & 1 == 1).collect();
            let ie = inclusion_exclusion(&exits, d);
            let inside = if exits.iter().any(|&e| e) { 0.0 } else { 1.0 };
            prop_assert_eq!(ie.total(), inside);
        }

        #[test]
        fn inclusion_exclusion_on_configurations(xs in proptest::collection::vec((-3i32..8, -3i32..8), 1..4), s in 0.5f64..2.0) {
            let b = LatticeBox::new(2, vec![2, 3], s).unwrap();
            let lps: Vec<CompositeLoop> = xs.iter().map(|&(x, y)| CompositeLoop::stationary(2, 1.0, [x, y, 0], 1)).collect();
            let omega = LoopConfiguration { loops: lps[1..].to_vec() };
            let exits: Vec<bool> = b.half_spaces().iter().map(|h| config_indicator(&lps[0], &omega, h)).collect();
            let sb = b.site_box();
            let contained = lps.iter().all(|lp| lp.visited().all(|r| (0..2).all(|i| r[i] >= sb.lo[i] && r[i] <= sb.hi[i])));
            prop_assert_eq!(inclusion_exclusion(&exits, 2).total(), if contained { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn static_coefficients() {
        let z = 0.1;
        let t = Truncation { cluster_n_max: 5, ..Default::default() };
        let g = geometric_coefficients(&static_model(2, z), &t).unwrap();
        let partial: f64 = (1..=5).map(|n| (if n % 2 == 1 { 1.0 } else { -1.0 }) * z.powi(n) / n as f64).sum();
        assert!((g.a0.value.re - partial).abs() < 1e-14);
        assert!((g.a0.value.re - (1.0 + z).ln()).abs() <= g.a0.tail_bound);
        assert!(g.a1.iter().chain(&g.a2).all(|(_, e)| e.value == C64::new(0.0, 0.0)));
        assert!(g.symmetric);
        let g0 = geometric_coefficients(&static_model(1, 0.0), &t).unwrap();
        assert_eq!(g0.a0.value, C64::new(0.0, 0.0));
        assert!(coeff_a3(None, &static_model(2, z), &t).is_err());
    }

    #[test]
    fn a0_below_q_series() {
        let pi = Potential::nearest_neighbour(1, PotentialKind::Transverse, -0.5).unwrap();
        let m = ModelParams::new(1, 1.0, C64::new(0.02, 0.0), pi, Potential::empty(1, PotentialKind::Longitudinal), 4.0).unwrap();
        let t = Truncation { cluster_n_max: 3, samples: 4000, n_max: 10, ..Default::default() };
        let a0 = coeff_a0(&m, &t).unwrap();
        let q = convergence_diagnostics(&m, QlVariant::Corrected).q;
        let bound: f64 = (1..200).map(|j| q.powi(j) / j as f64).sum();
        assert!(a0.value.norm() + 3.0 * a0.stat_error <= bound);
        let a1 = coeff_a1(None, &m, &t).unwrap();
        assert!(a1.value.re < 0.0, "{a1:?}");
    }

    #[test]
    fn box_prediction_reproduces_exact_static_ln_z() {
        let z = 0.1;
        let t = Truncation { cluster_n_max: 5, ..Default::default() };
        let m = static_model(2, z);
        let g = geometric_coefficients(&m, &t).unwrap();
        let b = LatticeBox::new(2, vec![1, 2], 2.0).unwrap();
        let direct = cluster::log_partition_cluster(&b.site_box(), &m, &t).unwrap();
        assert!((g.predict_lnz(&b) - direct.value).norm() < 1e-13);
        let rooted = rooted_box_lnz(&b, &[2.0], &m, &t).unwrap();
        assert!((rooted[0].1.value - direct.value).norm() < 1e-13);
    }

    #[test]
    fn fit_exact_cubic() {
        let b = LatticeBox::new(3, vec![1, 1, 2], 1.0).unwrap();
        let data: Vec<FitPoint> = (1..=6)
            .map(|r| {
                let r = r as f64;
                FitPoint { r, lnz: 2.0 * r.powi(3) + 3.0 * r * r, err: 0.0 }
            })
            .collect();
        let f = fit_geometric(&data, &b, FitBasis::Raw).unwrap();
        // face measure sum: 2(a2a3 + a1a3 + a1a2) = 2(2+2+1) = 10
        assert!((f.values[0] - 2.0 / 2.0).abs() < 1e-10);
        assert!((f.values[1] - 3.0 / 10.0).abs() < 1e-10);
        assert!(f.values[2].abs() < 1e-9 && f.values[3].abs() < 1e-8);
        assert!(f.residuals.iter().all(|r| r.abs() < 1e-9));
        assert!(fit_geometric(&data[..4], &b, FitBasis::Raw).is_err());
    }

    #[test]
    fn fit_static_chain() {
        let z: f64 = 0.1;
        let b = LatticeBox::new(1, vec![1], 1.0).unwrap();
        let data: Vec<FitPoint> =
            (2..=8).map(|r| FitPoint { r: r as f64, lnz: (r as f64 + 1.0) * (1.0 + z).ln(), err: 1e-3 }).collect();
        let f = fit_geometric(&data, &b, FitBasis::Raw).unwrap();
        assert!((f.values[0] - (1.0 + z).ln()).abs() < 1e-12);
        // constant slot: 2 Â1 = ln(1+z)
        assert!((2.0 * f.values[1] - (1.0 + z).ln()).abs() < 1e-12);
        let s = fit_geometric(&data, &b, FitBasis::SiteCount).unwrap();
        assert!(s.values[1].abs() < 1e-12);
        let mut buf = Vec::new();
        write_fit(&mut buf, &f).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("coefficient_name,value,stderr\n"));
    }

    #[test]
    fn fit_csv_roundtrip() {
        let text = "R,lnZ,err\n2,1.5,0.1\n3,2.0,0.1\n4,2.5,0.1\n";
        let d = read_fit_data(text.as_bytes()).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d[1], FitPoint { r: 3.0, lnz: 2.0, err: 0.1 });
    }

    #[test]
    fn remainder_rows() {
        let b = LatticeBox::new(1, vec![1], 1.0).unwrap();
        let t = Truncation { cluster_n_max: 3, ..Default::default() };
        let rows = remainder_bound_check(&[4.0, 8.0, 16.0], &b, &static_model(1, 0.0), &t).unwrap();
        let shapes: Vec<&CheckRow> = rows.iter().filter(|r| r.check_name == "remainder_shape").collect();
        assert_eq!(shapes.len(), 2);
        assert!(shapes.iter().all(|r| r.status == Status::Pass));
        // l = d + 1: shape ∝ R^{-1}
        let r0 = 8.0f64 / 9.0f64.powi(2);
        assert!((shapes[0].lhs.re - r0).abs() < 1e-15);
        assert!(rows.iter().filter(|r| r.check_name == "remainder").all(|r| r.lhs == C64::new(0.0, 0.0)));
    }

    #[test]
    fn both_faces_counting() {
        // brute force over translations
        for (lo, hi, len) in [(-3, 2, 3), (0, 5, 4), (-5, 5, 3), (-1, 1, 0), (-2, 0, 1)] {
            let brute = (0..=len).filter(|r| r + lo <= -1 && r + hi > len).count() as f64;
            assert_eq!(both_faces_count(lo, hi, len), brute);
        }
    }
}
