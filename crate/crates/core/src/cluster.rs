//! Ursell functions, cluster sums over translated loops, ln Z and Z of a
//! box, two-point functions and the assumption/proposition checks.

use num_complex::Complex64 as C64;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::lattice::{self, BBox, Site};
use crate::loops::{self, CompositeLoop};
use crate::mc::{self, Estimate};
use crate::model::{convergence_diagnostics, ModelParams, QlVariant};
use crate::pathint::{poisson_pmf, poisson_tail, EstimateMeta, LoopMeasure, SeriesEstimate, Shape, Truncation};
use crate::report::{CheckRow, Status};
use crate::rng::task_id;

/// Largest cluster handled by the connected-graph tables.
pub const MAX_CLUSTER: usize = 5;

/// Largest number of loops in any enumerated configuration.
pub const MAX_LOOPS: usize = 16;

// ---------------------------------------------------------------------------
// Ursell function

/// Connected graphs on n labeled vertices, as edge bitmasks over the pairs
/// (0,1), (0,2), …, (n−2,n−1).
#[derive(Debug)]
pub struct UrsellCache {
    graphs: Vec<Vec<u16>>,
}

fn pair_list(n: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::new();
    for i in 0..n {
        for k in i + 1..n {
            v.push((i, k));
        }
    }
    v
}

fn connected(n: usize, edges: &[(usize, usize)], mask: u32) -> bool {
    let mut seen = 1u32;
    loop {
        let mut grew = false;
        for (e, &(a, b)) in edges.iter().enumerate() {
            if mask >> e & 1 == 1 {
                let (sa, sb) = (seen >> a & 1, seen >> b & 1);
                if sa != sb {
                    seen |= (1 << a) | (1 << b);
                    grew = true;
                }
            }
        }
        if !grew {
            break;
        }
    }
    seen == (1u32 << n) - 1
}

impl UrsellCache {
    pub fn build(n_max: usize) -> Self {
        let mut graphs = vec![Vec::new()];
        for n in 1..=n_max.min(MAX_CLUSTER) {
            let edges = pair_list(n);
            let mut g = Vec::new();
            for mask in 0u32..(1u32 << edges.len()) {
                if connected(n, &edges, mask) {
                    g.push(mask as u16);
                }
            }
            graphs.push(g);
        }
        UrsellCache { graphs }
    }

    /// Shared cache up to `MAX_CLUSTER`.
    pub fn global() -> &'static UrsellCache {
        static CACHE: OnceLock<UrsellCache> = OnceLock::new();
        CACHE.get_or_init(|| UrsellCache::build(MAX_CLUSTER))
    }

    pub fn n_max(&self) -> usize {
        self.graphs.len() - 1
    }

    pub fn count(&self, n: usize) -> usize {
        self.graphs.get(n).map_or(0, |g| g.len())
    }

    pub fn graphs(&self, n: usize) -> &[u16] {
        &self.graphs[n]
    }

    /// φ (or |φ| when `signed` is false) by explicit graph summation.
    /// `zeta` is row-major n×n; the diagonal is ignored.
    pub fn ursell(&self, zeta: &[C64], n: usize, signed: bool) -> Result<C64> {
        if n == 0 || n > self.n_max() {
            return Err(Error::Domain(format!("cluster size {n} outside 1..={}", self.n_max())));
        }
        if n == 1 {
            return Ok(C64::new(1.0, 0.0));
        }
        let edges = pair_list(n);
        let vals: Vec<C64> = edges
            .iter()
            .map(|&(a, b)| {
                let z = zeta[a * n + b];
                if signed {
                    z
                } else {
                    C64::new(z.norm(), 0.0)
                }
            })
            .collect();
        let mut acc = C64::new(0.0, 0.0);
        for &g in &self.graphs[n] {
            let mut p = C64::new(1.0, 0.0);
            for (e, v) in vals.iter().enumerate() {
                if g >> e & 1 == 1 {
                    p *= v;
                }
            }
            acc += p;
        }
        Ok(acc)
    }
}

/// φ via the connected-part recursion over vertex subsets. Same value as the
/// graph sum, much cheaper for n ≥ 4.
pub fn ursell_fast(zeta: &[C64], n: usize, signed: bool) -> C64 {
    if n == 1 {
        return C64::new(1.0, 0.0);
    }
    let full = (1usize << n) - 1;
    let mut f = vec![C64::new(1.0, 0.0); full + 1];
    for s in 1..=full {
        // F(S) = Π_{i<k in S} (1 + ζ_ik), built from S minus its top vertex
        let top = usize::BITS as usize - 1 - s.leading_zeros() as usize;
        let rest = s & !(1 << top);
        let mut p = f[rest];
        for i in 0..top {
            if rest >> i & 1 == 1 {
                let z = zeta[i * n + top];
                p *= if signed { 1.0 + z } else { C64::new(1.0 + z.norm(), 0.0) };
            }
        }
        f[s] = p;
    }
    let mut c = vec![C64::new(0.0, 0.0); full + 1];
    for s in 1..=full {
        let low = s & s.wrapping_neg();
        // subtract the disconnected part: the component of the lowest vertex is T
        let mut acc = f[s];
        let others = s & !low;
        let mut sub = others;
        loop {
            // T = low ∪ sub, with sub a proper subset of others
            if sub != others {
                let t = low | sub;
                acc -= c[t] * f[s & !t];
            }
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & others;
        }
        c[s] = acc;
    }
    c[full]
}

/// Σ over set partitions of {0..n−1} of Π_blocks φ(block).
pub fn partition_sum(zeta: &[C64], n: usize) -> C64 {
    fn rec(rem: usize, zeta: &[C64], n: usize) -> C64 {
        if rem == 0 {
            return C64::new(1.0, 0.0);
        }
        let low = rem & rem.wrapping_neg();
        let others = rem & !low;
        let mut acc = C64::new(0.0, 0.0);
        let mut sub = others;
        loop {
            let block = low | sub;
            let idx: Vec<usize> = (0..n).filter(|i| block >> i & 1 == 1).collect();
            let k = idx.len();
            let mut zb = vec![C64::new(0.0, 0.0); k * k];
            for a in 0..k {
                for b in 0..k {
                    zb[a * k + b] = zeta[idx[a] * n + idx[b]];
                }
            }
            acc += ursell_fast(&zb, k, true) * rec(rem & !block, zeta, n);
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & others;
        }
        acc
    }
    rec((1usize << n) - 1, zeta, n)
}

// ---------------------------------------------------------------------------
// Translation enumeration

/// ζ(X, Y + δ) on the window of offsets where it can be nonzero.
struct ZetaTable {
    lo: Site,
    dims: [usize; 3],
    vals: Vec<C64>,
}

impl ZetaTable {
    fn new(x: &CompositeLoop, y: &CompositeLoop, rho: i32, d: usize, psi: &crate::model::Potential) -> Self {
        let (bx, by) = (x.bbox(), y.bbox());
        let mut lo = lattice::ORIGIN;
        let mut dims = [1usize; 3];
        for i in 0..d {
            lo[i] = bx.lo[i] - by.hi[i] - rho;
            let hi = bx.hi[i] - by.lo[i] + rho;
            dims[i] = (hi - lo[i] + 1) as usize;
        }
        let total = dims[0] * dims[1] * dims[2];
        let mut vals = Vec::with_capacity(total);
        for k in 0..total {
            let mut dlt = lo;
            dlt[0] += (k % dims[0]) as i32;
            dlt[1] += ((k / dims[0]) % dims[1]) as i32;
            dlt[2] += (k / (dims[0] * dims[1])) as i32;
            vals.push(loops::mayer_offset(x, y, dlt, psi));
        }
        ZetaTable { lo, dims, vals }
    }

    #[inline]
    fn get(&self, delta: Site) -> C64 {
        let mut k = 0usize;
        let mut stride = 1usize;
        for i in 0..3 {
            let off = delta[i] - self.lo[i];
            if off < 0 || off as usize >= self.dims[i] {
                return C64::new(0.0, 0.0);
            }
            k += off as usize * stride;
            stride *= self.dims[i];
        }
        self.vals[k]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Mode {
    /// Only configurations whose interaction graph is connected.
    Connected,
    /// Every configuration; the running product Π(1+ζ) prunes hard-core overlaps.
    All,
}

/// A fully placed configuration handed to the per-configuration callback.
pub(crate) struct Placement {
    pub n: usize,
    pub ts: [Site; MAX_LOOPS],
    pub zeta: [C64; MAX_LOOPS * MAX_LOOPS],
    pub bboxes: [BBox; MAX_LOOPS],
    /// Π_{i<k}(1 + ζ_ik), maintained in `Mode::All`.
    pub prod: C64,
}

impl Placement {
    /// Row-major n×n copy of the Mayer matrix.
    pub fn zeta_matrix(&self) -> Vec<C64> {
        let n = self.n;
        let mut z = vec![C64::new(0.0, 0.0); n * n];
        for i in 0..n {
            for k in 0..n {
                z[i * n + k] = self.zeta[i * MAX_LOOPS + k];
            }
        }
        z
    }

    pub fn hull(&self) -> BBox {
        let mut b = self.bboxes[0];
        for i in 1..self.n {
            b = b.union(&self.bboxes[i]);
        }
        b
    }
}

struct Enumerator<'a> {
    d: usize,
    loops: Vec<&'a CompositeLoop>,
    rects: Vec<(Site, Site)>,
    tables: Vec<Option<ZetaTable>>,
    mode: Mode,
    /// allowance[i]: how far loop i may sit from the already placed hull.
    allowance: Vec<[i32; 3]>,
    /// Rectangles that stand for all of Z^d cut at r_max.
    free: Vec<bool>,
    clipped: bool,
}

impl<'a> Enumerator<'a> {
    fn new(
        params: &ModelParams,
        loops: Vec<&'a CompositeLoop>,
        rects: Vec<(Site, Site)>,
        mode: Mode,
    ) -> Self {
        let d = params.d;
        let rho = params.psi.range();
        let n = loops.len();
        assert!(n <= MAX_LOOPS);
        let mut tables = Vec::with_capacity(n * n);
        for i in 0..n {
            for k in 0..n {
                tables.push(if i < k { Some(ZetaTable::new(loops[i], loops[k], rho, d, &params.psi)) } else { None });
            }
        }
        let mut allowance = vec![[0; 3]; n];
        for i in 0..n {
            let mut a = [rho; 3];
            for k in i + 1..n {
                let b = loops[k].bbox();
                for ax in 0..d {
                    a[ax] += b.width(ax) + rho;
                }
            }
            allowance[i] = a;
        }
        let free = vec![false; n];
        Enumerator { d, loops, rects, tables, mode, allowance, free, clipped: false }
    }

    /// `n_fixed` anchors at their own positions, the remaining loops free
    /// within |t|_∞ ≤ r_max, connected configurations only.
    fn anchored(params: &ModelParams, loops: Vec<&'a CompositeLoop>, n_fixed: usize, r_max: i32) -> Self {
        let n = loops.len();
        let rects = (0..n)
            .map(|i| if i < n_fixed { fixed_rect(lattice::ORIGIN) } else { free_rect(r_max, params.d) })
            .collect();
        let mut en = Enumerator::new(params, loops, rects, Mode::Connected);
        for i in n_fixed..n {
            en.free[i] = true;
        }
        en
    }

    #[inline]
    fn zt(&self, i: usize, k: usize) -> &ZetaTable {
        self.tables[i * self.loops.len() + k].as_ref().unwrap()
    }

    fn run(&mut self, f: &mut dyn FnMut(&Placement)) {
        let mut st = Placement {
            n: self.loops.len(),
            ts: [lattice::ORIGIN; MAX_LOOPS],
            zeta: [C64::new(0.0, 0.0); MAX_LOOPS * MAX_LOOPS],
            bboxes: [BBox::point(lattice::ORIGIN); MAX_LOOPS],
            prod: C64::new(1.0, 0.0),
        };
        let mut adj = [0u32; MAX_LOOPS];
        let mut clipped = false;
        self.level(0, &mut st, &mut adj, None, &mut clipped, f);
        self.clipped |= clipped;
    }

    fn level(
        &self,
        i: usize,
        st: &mut Placement,
        adj: &mut [u32; MAX_LOOPS],
        hull: Option<BBox>,
        clipped: &mut bool,
        f: &mut dyn FnMut(&Placement),
    ) {
        let n = self.loops.len();
        if i == n {
            if self.mode == Mode::Connected && !is_connected(adj, n) {
                return;
            }
            f(st);
            return;
        }
        let (rlo, rhi) = self.rects[i];
        let lb = self.loops[i].bbox();
        let mut lo = rlo;
        let mut hi = rhi;
        if let (Mode::Connected, Some(h)) = (self.mode, hull) {
            for ax in 0..self.d {
                let a = self.allowance[i][ax];
                let wlo = h.lo[ax] - a - lb.hi[ax];
                let whi = h.hi[ax] + a - lb.lo[ax];
                if self.free[i] && (wlo < lo[ax] || whi > hi[ax]) {
                    *clipped = true;
                }
                lo[ax] = lo[ax].max(wlo);
                hi[ax] = hi[ax].min(whi);
            }
        }
        for ax in 0..self.d {
            if lo[ax] > hi[ax] {
                return;
            }
        }
        let mut t = lo;
        loop {
            // place loop i at t
            let mut ok = true;
            let mut p = st.prod;
            adj[i] = 0;
            for k in 0..i {
                let z = self.zt(k, i).get(lattice::sub(t, st.ts[k]));
                st.zeta[k * MAX_LOOPS + i] = z;
                st.zeta[i * MAX_LOOPS + k] = z;
                if z != C64::new(0.0, 0.0) {
                    adj[i] |= 1 << k;
                }
                if self.mode == Mode::All {
                    p *= 1.0 + z;
                    if p == C64::new(0.0, 0.0) {
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                for k in 0..i {
                    if adj[i] >> k & 1 == 1 {
                        adj[k] |= 1 << i;
                    } else {
                        adj[k] &= !(1 << i);
                    }
                }
                st.ts[i] = t;
                st.bboxes[i] = lb.shift(t);
                let saved = st.prod;
                st.prod = p;
                let nh = match hull {
                    None => st.bboxes[i],
                    Some(h) => h.union(&st.bboxes[i]),
                };
                self.level(i + 1, st, adj, Some(nh), clipped, f);
                st.prod = saved;
            }
            // advance t over the rectangle [lo, hi]
            let mut ax = 0;
            loop {
                if ax == self.d {
                    return;
                }
                if t[ax] < hi[ax] {
                    t[ax] += 1;
                    break;
                }
                t[ax] = lo[ax];
                ax += 1;
            }
        }
    }
}

fn is_connected(adj: &[u32; MAX_LOOPS], n: usize) -> bool {
    let full = (1u32 << n) - 1;
    let mut seen = 1u32;
    let mut frontier = 1u32;
    while frontier != 0 {
        let mut next = 0u32;
        let mut f = frontier;
        while f != 0 {
            let v = f.trailing_zeros() as usize;
            f &= f - 1;
            next |= adj[v];
        }
        next &= !seen;
        seen |= next;
        frontier = next;
    }
    seen & full == full
}

fn free_rect(r_max: i32, d: usize) -> (Site, Site) {
    let mut lo = lattice::ORIGIN;
    let mut hi = lattice::ORIGIN;
    for i in 0..d {
        lo[i] = -r_max;
        hi[i] = r_max;
    }
    (lo, hi)
}

fn fixed_rect(t: Site) -> (Site, Site) {
    (t, t)
}

/// Translations keeping `lp` inside the integer box [lo, hi].
fn box_rect(lp: &CompositeLoop, lo: Site, hi: Site, d: usize) -> Option<(Site, Site)> {
    let b = lp.bbox();
    let mut a = lattice::ORIGIN;
    let mut c = lattice::ORIGIN;
    for i in 0..d {
        a[i] = lo[i] - b.lo[i];
        c[i] = hi[i] - b.hi[i];
        if a[i] > c[i] {
            return None;
        }
    }
    Some((a, c))
}

fn rect_count(r: &(Site, Site), d: usize) -> f64 {
    (0..d).map(|i| (r.1[i] - r.0[i] + 1) as f64).product()
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Runs `body(shapes, out)` over all tuples of `k` shapes, exactly when the
/// loop measure is a finite sum and by Monte Carlo otherwise.
fn integrate_tuples<F>(meas: &LoopMeasure, k: usize, trunc: &Truncation, task: u64, dims: usize, body: F) -> (Vec<Estimate>, bool)
where
    F: Fn(&[Shape], &mut [C64], &mut rand_chacha::ChaCha8Rng) + Sync,
{
    if let Some(list) = meas.exact_shapes() {
        let m = list.len();
        let count = m.pow(k as u32);
        let sums = mc::exact_sum(count, dims, |mut idx, out| {
            let mut shapes = Vec::with_capacity(k);
            for _ in 0..k {
                shapes.push(list[idx % m].clone());
                idx /= m;
            }
            // a dummy stream for callers that sample translations
            let mut r = crate::rng::stream(trunc.seed, task, idx as u64);
            body(&shapes, out, &mut r);
        });
        (sums.into_iter().map(Estimate::exact).collect(), true)
    } else {
        let est = mc::sample_mean(trunc.seed, task, trunc.samples, dims, |r, out| {
            let shapes: Vec<Shape> = (0..k).map(|_| meas.sample(r)).collect();
            if shapes.iter().any(|s| s.is_null()) {
                return;
            }
            body(&shapes, out, r);
        });
        (est, false)
    }
}

fn base_meta(trunc: &Truncation, exact: bool) -> EstimateMeta {
    EstimateMeta {
        truncation: *trunc,
        samples: if exact { 0 } else { trunc.samples },
        exact,
        rigorous_tail: true,
        notes: Vec::new(),
    }
}

// ---------------------------------------------------------------------------
// Box quantities

/// Integer box [lo, hi] in Z^d.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SiteBox {
    pub lo: Site,
    pub hi: Site,
}

impl SiteBox {
    pub fn volume(&self, d: usize) -> usize {
        (0..d).map(|i| (self.hi[i] - self.lo[i] + 1).max(0) as usize).product()
    }

    pub fn chain(len: usize) -> Self {
        SiteBox { lo: lattice::ORIGIN, hi: [len as i32 - 1, 0, 0] }
    }
}

/// Per-order terms (1/n!) ∫ μ_z^{⊗n} φ over loops confined to the box.
pub fn log_partition_orders(bx: &SiteBox, params: &ModelParams, trunc: &Truncation) -> Result<(Vec<Estimate>, bool)> {
    let nmax = trunc.cluster_n_max;
    if nmax > MAX_CLUSTER {
        return Err(Error::Domain(format!("cluster_n_max is limited to {MAX_CLUSTER}")));
    }
    let meas = LoopMeasure::new(params, trunc);
    let d = params.d;
    let mut out = Vec::new();
    let mut exact_all = true;
    for n in 1..=nmax {
        let (e, exact) = integrate_tuples(&meas, n, trunc, task_id(&[0x6c6e7a, n as u64]), 1, |shapes, o, _| {
            let mut rects = Vec::with_capacity(n);
            for s in shapes {
                match box_rect(&s.lp, bx.lo, bx.hi, d) {
                    Some(r) => rects.push(r),
                    None => return,
                }
            }
            let w: C64 = shapes.iter().map(|s| s.weight).product();
            if n == 1 {
                o[0] = w * rect_count(&rects[0], d);
                return;
            }
            let lps: Vec<&CompositeLoop> = shapes.iter().map(|s| &s.lp).collect();
            let mut en = Enumerator::new(params, lps, rects, Mode::Connected);
            let mut acc = C64::new(0.0, 0.0);
            en.run(&mut |pl: &Placement| {
                acc += ursell_fast(&pl.zeta_matrix(), n, true);
            });
            o[0] = w * acc;
        });
        exact_all &= exact;
        out.push(e[0].scale(1.0 / factorial(n)));
    }
    Ok((out, exact_all))
}

/// Σ_{n>N} n^{n−2} m^n / n!, or +∞ when m·e ≥ 1.
fn cayley_tail(m: f64, nmax: usize) -> f64 {
    if m == 0.0 {
        return 0.0;
    }
    if m * std::f64::consts::E >= 1.0 {
        return f64::INFINITY;
    }
    let mut acc = 0.0;
    for n in nmax + 1..nmax + 4000 {
        let nf = n as f64;
        let ln = (nf - 2.0) * nf.ln() + nf * m.ln() - crate::pathint::ln_factorial(n);
        let t = ln.exp();
        acc += t;
        if t < 1e-18 * acc {
            break;
        }
    }
    acc
}

/// Truncation tail of the cluster series in a box of `v` sites.
fn box_cluster_tail(meas: &LoopMeasure, v: f64, nmax: usize) -> (f64, bool) {
    let p = meas.params();
    let n = p.norms();
    // tree-graph bound |φ| ≤ e^{2Σb} Σ_trees Π|ζ|, |ζ| ≤ e^{b-part}; the per-loop
    // factors are folded into the mass with 2‖ψ‖ in the exponent
    let x = p.z.norm() * (p.beta * (n.m + n.m0.re + 2.0 * n.psi_norm)).exp();
    if x >= 1.0 {
        return (f64::INFINITY, false);
    }
    let m_full = v * -(1.0 - x).ln();
    let m_omit = v * meas.omitted_abs_mass_per_site(true);
    let m_kept = (m_full - m_omit).max(0.0);
    let mut t = cayley_tail(m_full, nmax);
    for k in 1..=nmax {
        let kf = k as f64;
        t += kf.powf(kf - 2.0) / factorial(k) * (m_full.powi(k as i32) - m_kept.powi(k as i32));
    }
    let rigorous = p.psi.is_real() && p.psi.entries().iter().all(|e| e.1.re >= 0.0);
    (t, rigorous)
}

/// ln Z(Λ) by the cluster series truncated at `cluster_n_max` loops.
pub fn log_partition_cluster(bx: &SiteBox, params: &ModelParams, trunc: &Truncation) -> Result<SeriesEstimate> {
    let (orders, exact) = log_partition_orders(bx, params, trunc)?;
    let mut e = Estimate::default();
    for o in &orders {
        e = e.add_indep(o);
    }
    let meas = LoopMeasure::new(params, trunc);
    let (tail, rigorous) = box_cluster_tail(&meas, bx.volume(params.d) as f64, trunc.cluster_n_max);
    let mut m = base_meta(trunc, exact);
    m.rigorous_tail = rigorous;
    if !rigorous {
        m.notes.push("tree-graph tail assumes a real non-negative ψ".into());
    }
    let dg = convergence_diagnostics(params, QlVariant::Corrected);
    if !dg.p_ok {
        m.notes.push(format!("outside the p(z) < 1 radius (p = {:.3})", dg.p));
    }
    for (k, o) in orders.iter().enumerate() {
        m.notes.push(format!("order {}: {:.12e} ± {:.2e}", k + 1, o.value.re, o.stat_error));
    }
    Ok(SeriesEstimate::new(e, tail, m))
}

/// Above this many translation tuples per sample, translations are sampled.
const EXHAUSTIVE_LIMIT: f64 = 20_000.0;

/// Z(Λ) from the defining series, truncated at `direct_n_max` (default
/// `cluster_n_max`) loops.
pub fn partition_direct(bx: &SiteBox, params: &ModelParams, trunc: &Truncation) -> Result<SeriesEstimate> {
    use rand::Rng;
    let nmax = trunc.direct_n_max.unwrap_or(trunc.cluster_n_max);
    if nmax > MAX_LOOPS {
        return Err(Error::Domain(format!("direct series limited to {MAX_LOOPS} loops")));
    }
    let meas = LoopMeasure::new(params, trunc);
    let d = params.d;
    let mut total = Estimate::exact(C64::new(1.0, 0.0));
    let mut exact_all = true;
    let mut sampled_translations = false;
    let mut notes = Vec::new();
    for n in 1..=nmax {
        let flag = std::sync::atomic::AtomicBool::new(false);
        let (e, exact) = integrate_tuples(&meas, n, trunc, task_id(&[0x64697a, n as u64]), 1, |shapes, o, rng| {
            let mut rects = Vec::with_capacity(n);
            for s in shapes {
                match box_rect(&s.lp, bx.lo, bx.hi, d) {
                    Some(r) => rects.push(r),
                    None => return,
                }
            }
            let w: C64 = shapes.iter().map(|s| s.weight).product();
            let counts: Vec<f64> = rects.iter().map(|r| rect_count(r, d)).collect();
            let tuples: f64 = counts.iter().product();
            let lps: Vec<&CompositeLoop> = shapes.iter().map(|s| &s.lp).collect();
            if tuples <= EXHAUSTIVE_LIMIT {
                let mut en = Enumerator::new(params, lps, rects, Mode::All);
                let mut acc = C64::new(0.0, 0.0);
                en.run(&mut |pl: &Placement| acc += pl.prod);
                o[0] = w * acc;
            } else {
                flag.store(true, std::sync::atomic::Ordering::Relaxed);
                let ts: Vec<Site> = rects
                    .iter()
                    .map(|r| {
                        let mut t = lattice::ORIGIN;
                        for i in 0..d {
                            t[i] = rng.random_range(r.0[i]..=r.1[i]);
                        }
                        t
                    })
                    .collect();
                let placed: Vec<CompositeLoop> = lps.iter().zip(&ts).map(|(l, t)| l.shift(*t)).collect();
                let mut p = C64::new(1.0, 0.0);
                'outer: for i in 0..n {
                    for k in i + 1..n {
                        p *= 1.0 + loops::mayer(&placed[i], &placed[k], &params.psi);
                        if p == C64::new(0.0, 0.0) {
                            break 'outer;
                        }
                    }
                }
                o[0] = w * p * tuples;
            }
        });
        if flag.load(std::sync::atomic::Ordering::Relaxed) {
            sampled_translations = true;
        }
        exact_all &= exact && !flag.load(std::sync::atomic::Ordering::Relaxed);
        let term = e[0].scale(1.0 / factorial(n));
        notes.push(format!("order {n}: {:.12e} ± {:.2e}", term.value.re, term.stat_error));
        total = total.add_indep(&term);
    }
    let p = meas.params();
    let nm = p.norms();
    let x = p.z.norm() * (p.beta * (nm.m + nm.m0.re + 2.0 * nm.psi_norm)).exp();
    let v = bx.volume(d) as f64;
    let tail = if x >= 1.0 {
        f64::INFINITY
    } else {
        let m_full = v * -(1.0 - x).ln();
        let m_kept = (m_full - v * meas.omitted_abs_mass_per_site(true)).max(0.0);
        let mut t = 0.0;
        let mut term = 1.0;
        let mut kept = 1.0;
        for k in 1..=nmax {
            term *= m_full / k as f64;
            kept *= m_kept / k as f64;
            t += term - kept;
        }
        // Σ_{k>N} m^k/k! = e^m − Σ_{k≤N} m^k/k!
        let mut head = 1.0;
        let mut tk = 1.0;
        for k in 1..=nmax {
            tk *= m_full / k as f64;
            head += tk;
        }
        t + (m_full.exp() - head).max(0.0)
    };
    let mut m = base_meta(trunc, exact_all);
    if sampled_translations {
        m.notes.push("translations sampled for large boxes".into());
    }
    m.notes.extend(notes);
    Ok(SeriesEstimate::new(total, tail, m))
}

// ---------------------------------------------------------------------------
// Stability sums feeding the infinite-volume tail bounds

/// Constants of the tree-graph tail bounds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TreeConstants {
    /// Assumption-3 constant evaluated exactly on the kept loops plus omitted part.
    pub p: f64,
    /// Part of `p` coming from loops outside the truncation.
    pub p_omit: f64,
    /// Σ_j c^j/j E_j[e^N]: the root weight ∫|μ| e^{a+2b}.
    pub root: f64,
    pub root_omit: f64,
}

/// S[g] = Σ_j (c^j/j) Σ_n pmf(jβM, n) P(closed | n) e^n g(j, n), split into
/// kept (j ≤ j_max, n ≤ n_max) and omitted parts, c = |z| e^{β(M+Re M0+‖ψ‖)+1}.
fn stability_sum(meas: &LoopMeasure, g: &dyn Fn(f64, f64) -> f64) -> (f64, f64) {
    let p = meas.params();
    let n = p.norms();
    let eng = meas.engine();
    let c = p.z.norm() * (p.beta * (n.m + n.m0.re + n.psi_norm) + 1.0).exp();
    if c == 0.0 {
        return (0.0, 0.0);
    }
    let mut kept = 0.0;
    let mut omit = 0.0;
    let mut prev = f64::INFINITY;
    for j in 1..2000u32 {
        let jf = j as f64;
        let pref = c.powi(j as i32) / jf;
        if !pref.is_finite() {
            return (kept, f64::INFINITY);
        }
        let t = eng.t(j);
        let mut head = 0.0;
        let nm = if j <= meas.j_max() { eng.n_max() } else { 0 };
        for nn in 0..=nm {
            let pc = if j <= meas.j_max() { eng.closed_prob(nn) } else if nn == 0 { 1.0 } else { 0.5 };
            head += poisson_pmf(t, nn) * pc * (nn as f64).exp() * g(jf, nn as f64);
        }
        let tail = 0.5 * poisson_tail(t, nm, |nn| (nn as f64).exp() * g(jf, nn as f64));
        let term = pref * (head + tail);
        if j <= meas.j_max() {
            kept += pref * head;
            omit += pref * tail;
        } else {
            omit += term;
            if !term.is_finite() {
                return (kept, f64::INFINITY);
            }
            if term < 1e-18 * (kept + omit) && term <= prev {
                break;
            }
            if j > 200 && term >= prev {
                return (kept, f64::INFINITY);
            }
        }
        prev = term;
    }
    (kept, omit)
}

pub fn tree_constants(meas: &LoopMeasure) -> TreeConstants {
    let p = meas.params();
    let bp = p.beta * p.psi.abs_sum();
    let (pk, po) = stability_sum(meas, &|j, n| {
        let a = j + n;
        a * a + bp * j * a * (bp * j).exp()
    });
    let (rk, ro) = stability_sum(meas, &|_, _| 1.0);
    TreeConstants { p: pk + po, p_omit: po, root: rk + ro, root_omit: ro }
}

/// Bound on the rooted cluster sum beyond order K (k > K extra loops) plus
/// the contribution of loops outside the truncation at orders ≤ K.
fn rooted_tail(tc: &TreeConstants, kmax: usize, weight: &dyn Fn(usize) -> f64) -> f64 {
    let p = tc.p;
    if !(p < 1.0) {
        return f64::INFINITY;
    }
    let mut t = 0.0;
    for k in 0..=kmax {
        let kf = k as f64;
        let omitted = tc.root_omit * p.powi(k as i32) + tc.root * kf * p.powi(k as i32 - 1).min(1.0 / p.max(1e-300)) * tc.p_omit;
        let omitted = if k == 0 { tc.root_omit } else { omitted };
        t += omitted / (kf + 1.0) * weight(k);
    }
    let mut k = kmax + 1;
    loop {
        let term = tc.root * p.powi(k as i32) / (k as f64 + 1.0) * weight(k);
        t += term;
        if term < 1e-18 * t.max(1e-300) || k > kmax + 10_000 {
            break;
        }
        k += 1;
    }
    t
}

// ---------------------------------------------------------------------------
// Rooted (infinite-volume) cluster integrals

/// Per-axis exit weights of a cluster rooted at the origin:
/// low face max(0, −min_i), high face max(0, max_i).
fn exit_weights(h: &BBox, d: usize) -> [[f64; 2]; 3] {
    let mut w = [[0.0; 2]; 3];
    for i in 0..d {
        w[i][0] = (-h.lo[i]).max(0) as f64;
        w[i][1] = h.hi[i].max(0) as f64;
    }
    w
}

/// A set of faces on distinct axes: per axis 0 = none, 1 = low face, 2 = high face.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FaceSet(pub [u8; 3]);

impl FaceSet {
    pub fn all(d: usize) -> Vec<FaceSet> {
        let mut v = Vec::new();
        for code in 0..3usize.pow(d as u32) {
            let mut f = [0u8; 3];
            let mut c = code;
            for slot in f.iter_mut().take(d) {
                *slot = (c % 3) as u8;
                c /= 3;
            }
            v.push(FaceSet(f));
        }
        v
    }

    pub fn order(&self) -> usize {
        self.0.iter().filter(|&&x| x != 0).count()
    }

    pub fn label(&self, d: usize) -> String {
        let mut s = String::new();
        for i in 0..d {
            match self.0[i] {
                1 => s.push_str(&format!("-x{}", i + 1)),
                2 => s.push_str(&format!("+x{}", i + 1)),
                _ => {}
            }
        }
        if s.is_empty() {
            "bulk".into()
        } else {
            s
        }
    }

    fn weight(&self, w: &[[f64; 2]; 3]) -> f64 {
        let mut p = 1.0;
        for i in 0..3 {
            match self.0[i] {
                1 => p *= w[i][0],
                2 => p *= w[i][1],
                _ => {}
            }
        }
        p
    }
}

/// Results of one rooted cluster run.
#[derive(Clone, Debug)]
pub struct RootedResult {
    /// (−1)^{|S|} × rooted integral with the product of exit depths, per face set.
    pub faces: Vec<(FaceSet, SeriesEstimate)>,
    /// Rooted prediction of ln Z(Λ_R) for each requested R (a_i extents).
    pub box_lnz: Vec<(f64, SeriesEstimate)>,
    pub tree: TreeConstants,
}

/// Bookkeeping from a rooted run.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct RootedInfo {
    pub exact: bool,
    pub clipped: bool,
    pub max_span: i32,
}

/// Σ_k (1/k!) ∫ W φ g(hull) / (k+1) over clusters rooted at a loop based at the
/// origin, for `dims` real multipliers g written by `obs`. With `absolute`
/// the weights are |W| and |φ|.
pub(crate) fn rooted_observables(
    params: &ModelParams,
    trunc: &Truncation,
    dims: usize,
    absolute: bool,
    obs: &(dyn Fn(&BBox, &mut [f64]) + Sync),
) -> Result<(Vec<Estimate>, RootedInfo)> {
    if trunc.cluster_n_max > MAX_CLUSTER || trunc.cluster_n_max == 0 {
        return Err(Error::Domain(format!("cluster_n_max must be in 1..={MAX_CLUSTER}")));
    }
    let kmax = trunc.cluster_n_max - 1;
    let d = params.d;
    let meas = LoopMeasure::new(params, trunc);
    let mut totals = vec![Estimate::default(); dims];
    let mut info = RootedInfo { exact: true, ..Default::default() };
    for k in 0..=kmax {
        let clipped = std::sync::atomic::AtomicBool::new(false);
        let span = std::sync::atomic::AtomicI32::new(0);
        let task = task_id(&[0x726f6f74, k as u64, absolute as u64]);
        let (e, exact) = integrate_tuples(&meas, k + 1, trunc, task, dims, |shapes, o, _| {
            let w: C64 = if absolute {
                C64::new(shapes.iter().map(|s| s.abs_weight).product(), 0.0)
            } else {
                shapes.iter().map(|s| s.weight).product()
            };
            let lps: Vec<&CompositeLoop> = shapes.iter().map(|s| &s.lp).collect();
            let mut en = Enumerator::anchored(params, lps, 1, trunc.r_max);
            let mut acc = vec![C64::new(0.0, 0.0); dims];
            let mut g = vec![0.0; dims];
            let mut local_span = 0;
            en.run(&mut |pl: &Placement| {
                let phi = ursell_fast(&pl.zeta_matrix(), k + 1, !absolute);
                let h = pl.hull();
                g.iter_mut().for_each(|x| *x = 0.0);
                obs(&h, &mut g);
                for q in 0..dims {
                    acc[q] += phi * g[q];
                }
                for i in 0..d {
                    local_span = local_span.max(h.width(i));
                }
            });
            if en.clipped {
                clipped.store(true, std::sync::atomic::Ordering::Relaxed);
            }
            span.fetch_max(local_span, std::sync::atomic::Ordering::Relaxed);
            let norm = 1.0 / (factorial(k) * (k as f64 + 1.0));
            for q in 0..dims {
                o[q] = w * acc[q] * norm;
            }
        });
        info.exact &= exact;
        info.clipped |= clipped.load(std::sync::atomic::Ordering::Relaxed);
        info.max_span = info.max_span.max(span.load(std::sync::atomic::Ordering::Relaxed));
        for q in 0..dims {
            totals[q] = totals[q].add_indep(&e[q]);
        }
    }
    Ok((totals, info))
}

/// Number of translations r ∈ Λ_R of a rooted cluster with hull `h` that keep
/// it inside the box with side lengths ⌊R a_i⌋ + 1.
pub(crate) fn box_fit_count(h: &BBox, d: usize, extents: &[i32], scale: f64) -> f64 {
    let mut c = 1.0;
    for i in 0..d {
        let len = (scale * extents[i] as f64).floor();
        c *= (len + 1.0 - h.width(i) as f64).max(0.0);
    }
    c
}

/// Rooted cluster integrals Σ_k (1/k!) ∫ μ^{⊗(k+1)} φ / (k+1) with the root
/// based at the origin and all other loops translated freely.
pub fn rooted_integrals(
    params: &ModelParams,
    trunc: &Truncation,
    extents: &[i32],
    r_grid: &[f64],
) -> Result<RootedResult> {
    let d = params.d;
    if extents.len() < d && !r_grid.is_empty() {
        return Err(Error::Validation(format!("need {d} box extents")));
    }
    let sets = FaceSet::all(d);
    let nf = sets.len();
    let dims = nf + r_grid.len();
    let (totals, info) = rooted_observables(params, trunc, dims, false, &|h, g| {
        let ew = exit_weights(h, d);
        for (s, fs) in sets.iter().enumerate() {
            g[s] = fs.weight(&ew);
        }
        for (q, &rr) in r_grid.iter().enumerate() {
            g[nf + q] = box_fit_count(h, d, extents, rr);
        }
    })?;
    let kmax = trunc.cluster_n_max - 1;
    let meas = LoopMeasure::new(params, trunc);
    let tc = tree_constants(&meas);
    let rho_pi = params.pi.range() as f64;
    let rho_psi = params.psi.range() as f64;
    let mut meta = base_meta(trunc, info.exact);
    if info.clipped {
        meta.notes.push(format!("translation window clipped at r_max = {}", trunc.r_max));
        meta.rigorous_tail = false;
    }
    meta.notes.push(format!("largest cluster span {}", info.max_span));
    let faces = sets
        .iter()
        .enumerate()
        .map(|(s, fs)| {
            let ord = fs.order();
            let sign = if ord % 2 == 1 { -1.0 } else { 1.0 };
            let wmax = |k: usize| {
                ((k as f64 + 1.0) * (trunc.n_max as f64 * rho_pi * 0.5 + rho_psi) + 1.0).powi(ord as i32)
            };
            let tail = rooted_tail(&tc, kmax, &wmax);
            let mut m = meta.clone();
            if ord > 0 {
                m.rigorous_tail = false;
                m.notes.push("weighted tail uses the largest exit depth reachable inside the truncation".into());
            }
            (*fs, SeriesEstimate::new(totals[s].scale(sign), tail, m))
        })
        .collect();
    let box_lnz = r_grid
        .iter()
        .enumerate()
        .map(|(q, &rr)| {
            let vol = box_fit_count(&BBox::point(lattice::ORIGIN), d, extents, rr);
            let tail = vol * rooted_tail(&tc, kmax, &|_| 1.0);
            (rr, SeriesEstimate::new(totals[nf + q], tail, meta.clone()))
        })
        .collect();
    Ok(RootedResult { faces, box_lnz, tree: tc })
}

// ---------------------------------------------------------------------------
// Two-point functions and checks

fn stab(x: &CompositeLoop, params: &ModelParams) -> Result<loops::Stability> {
    loops::stability_functions(x, params)
}

/// σ(X,Y) (or |σ|(X,Y)) = Σ_{m} (1/m!) ∫ W φ(X, Y, X_1..X_m).
pub fn two_point_sigma(
    x: &CompositeLoop,
    y: &CompositeLoop,
    params: &ModelParams,
    trunc: &Truncation,
    absolute: bool,
) -> Result<SeriesEstimate> {
    if !x.admissible() || !y.admissible() {
        return Err(Error::Validation("two-point function needs admissible loops".into()));
    }
    if trunc.cluster_n_max > MAX_CLUSTER || trunc.cluster_n_max < 2 {
        return Err(Error::Domain(format!("cluster_n_max must be in 2..={MAX_CLUSTER}")));
    }
    let meas = LoopMeasure::new(params, trunc);
    let z0 = loops::mayer(x, y, &params.psi);
    let mut total = Estimate::exact(if absolute { C64::new(z0.norm(), 0.0) } else { z0 });
    let mut exact_all = true;
    let mmax = trunc.cluster_n_max - 2;
    for m in 1..=mmax {
        let (e, exact) = integrate_tuples(&meas, m, trunc, task_id(&[0x7369, m as u64, absolute as u64]), 1, |shapes, o, _| {
            let w: C64 = if absolute {
                C64::new(shapes.iter().map(|s| s.abs_weight).product(), 0.0)
            } else {
                shapes.iter().map(|s| s.weight).product()
            };
            let mut lps: Vec<&CompositeLoop> = vec![x, y];
            lps.extend(shapes.iter().map(|s| &s.lp));
            let mut en = Enumerator::anchored(params, lps, 2, trunc.r_max);
            let mut acc = C64::new(0.0, 0.0);
            en.run(&mut |pl: &Placement| acc += ursell_fast(&pl.zeta_matrix(), m + 2, !absolute));
            o[0] = w * acc;
        });
        exact_all &= exact;
        total = total.add_indep(&e[0].scale(1.0 / factorial(m)));
    }
    let tc = tree_constants(&meas);
    let sx = stab(x, params)?;
    let sy = stab(y, params)?;
    let pref = (sx.a + 2.0 * sx.b + sy.a + 2.0 * sy.b).exp();
    let tail = if tc.p < 1.0 { pref * tc.p.powi(mmax as i32 + 1) / (1.0 - tc.p) } else { f64::INFINITY };
    let mut meta = base_meta(trunc, exact_all);
    meta.rigorous_tail = false;
    meta.notes.push("tail from the tree-graph estimate with both anchors as roots".into());
    Ok(SeriesEstimate::new(total, tail, meta))
}

fn ball_exits(lp: &CompositeLoop, t: Site, radius: f64) -> bool {
    lp.visited().any(|s| lattice::norm(lattice::add(s, t)) > radius)
}

/// ∫|μ_z|(dY) |ζ(X,Y)| e^{a(Y)+2b(Y)} a(Y) restricted to loops Y for which
/// `keep(Y, t)` holds; exact over translations, MC over shapes.
fn single_loop_kernel(
    x: &CompositeLoop,
    params: &ModelParams,
    trunc: &Truncation,
    task: u64,
    keep: &(dyn Fn(&CompositeLoop, Site) -> bool + Sync),
) -> (Estimate, bool) {
    let meas = LoopMeasure::new(params, trunc);
    let (e, exact) = integrate_tuples(&meas, 1, trunc, task, 1, |shapes, o, _| {
        let s = &shapes[0];
        let mut en = Enumerator::anchored(params, vec![x, &s.lp], 1, trunc.r_max);
        let mut acc = 0.0;
        en.run(&mut |pl: &Placement| {
            if keep(&s.lp, pl.ts[1]) {
                acc += pl.zeta[1].norm();
            }
        });
        o[0] = C64::new(s.abs_weight * (s.a + 2.0 * s.b).exp() * s.a * acc, 0.0);
    });
    (e[0], exact)
}

pub fn assumption3_check(x: &CompositeLoop, params: &ModelParams, trunc: &Truncation) -> Result<CheckRow> {
    let sx = stab(x, params)?;
    let (j, _) = single_loop_kernel(x, params, trunc, task_id(&[0xa3]), &|_, _| true);
    let meas = LoopMeasure::new(params, trunc);
    let tc = tree_constants(&meas);
    let dg = convergence_diagnostics(params, QlVariant::Corrected);
    let tail = sx.a * tc.p_omit;
    let row = CheckRow::new("assumption3", Some(x.windings()), None, j.value, j.stat_error, tail, dg.p * sx.a);
    let note = format!("p(z) = {:.4e}, exact kernel constant = {:.4e}", dg.p, tc.p);
    Ok(if dg.p_ok { row.with_note(&note) } else { row.not_applicable(&format!("p(z) ≥ 1; {note}")) })
}

pub fn assumption4_check(x: &CompositeLoop, radius: f64, r: f64, params: &ModelParams, trunc: &Truncation) -> Result<CheckRow> {
    if x.sup_radius() > radius {
        return Err(Error::Validation(format!("loop leaves the ball of radius {radius}")));
    }
    let sx = stab(x, params)?;
    let outer = radius + r;
    let (lv, _) = single_loop_kernel(x, params, trunc, task_id(&[0xa4, r.to_bits()]), &|lp, t| ball_exits(lp, t, outer));
    let meas = LoopMeasure::new(params, trunc);
    let tc = tree_constants(&meas);
    let dg = convergence_diagnostics(params, QlVariant::Corrected);
    let bound = dg.p_l * sx.a * (1.0 + r).powf(-params.l);
    let row = CheckRow::new("assumption4", Some(x.windings()), Some(r), lv.value, lv.stat_error, sx.a * tc.p_omit, bound);
    Ok(if dg.p_l_ok { row } else { row.not_applicable(&format!("p_l(z) = {:.3e} ≥ 1", dg.p_l)) })
}

/// Σ_{m=0}^{M} (1/m!) ∫|μ|(dY) ∫|μ|^m |φ|(X, Y, ω) g(Y), computed with k = m+1
/// exchangeable free loops as (1/k!) E[|φ| Σ_i g(L_i)].
fn abs_sigma_moment(
    anchor: &CompositeLoop,
    params: &ModelParams,
    trunc: &Truncation,
    task: u64,
    dims: usize,
    g: &(dyn Fn(&Shape, Site, &mut [f64]) + Sync),
) -> (Vec<Estimate>, bool) {
    let meas = LoopMeasure::new(params, trunc);
    let mut totals = vec![Estimate::default(); dims];
    let mut exact_all = true;
    for k in 1..trunc.cluster_n_max {
        let (e, exact) = integrate_tuples(&meas, k, trunc, task_id(&[task, k as u64]), dims, |shapes, o, _| {
            let w: f64 = shapes.iter().map(|s| s.abs_weight).product();
            let mut lps: Vec<&CompositeLoop> = vec![anchor];
            lps.extend(shapes.iter().map(|s| &s.lp));
            let mut en = Enumerator::anchored(params, lps, 1, trunc.r_max);
            let mut acc = vec![0.0; dims];
            let mut gv = vec![0.0; dims];
            en.run(&mut |pl: &Placement| {
                let phi = ursell_fast(&pl.zeta_matrix(), k + 1, false).re;
                for (i, s) in shapes.iter().enumerate() {
                    gv.iter_mut().for_each(|x| *x = 0.0);
                    g(s, pl.ts[i + 1], &mut gv);
                    for q in 0..dims {
                        acc[q] += phi * gv[q];
                    }
                }
            });
            for q in 0..dims {
                o[q] = C64::new(w * acc[q] / factorial(k), 0.0);
            }
        });
        exact_all &= exact;
        for q in 0..dims {
            totals[q] = totals[q].add_indep(&e[q]);
        }
    }
    (totals, exact_all)
}

pub fn prop3_check(x: &CompositeLoop, params: &ModelParams, trunc: &Truncation) -> Result<CheckRow> {
    let sx = stab(x, params)?;
    if trunc.cluster_n_max < 2 || trunc.cluster_n_max > MAX_CLUSTER {
        return Err(Error::Domain(format!("cluster_n_max must be in 2..={MAX_CLUSTER}")));
    }
    let (v, _) = abs_sigma_moment(x, params, trunc, 0x9303, 1, &|s, _, out| out[0] = s.a);
    let meas = LoopMeasure::new(params, trunc);
    let tc = tree_constants(&meas);
    let dg = convergence_diagnostics(params, QlVariant::Corrected);
    let pref = (sx.a + 2.0 * sx.b).exp() * sx.a;
    let m = trunc.cluster_n_max - 2;
    let tail = if tc.p < 1.0 {
        pref * (tc.p.powi(m as i32 + 2) / (1.0 - tc.p) + (m as f64 + 1.0) * tc.p_omit)
    } else {
        f64::INFINITY
    };
    let rhs = if dg.p < 1.0 { pref * dg.p / (1.0 - dg.p) } else { f64::INFINITY };
    let row = CheckRow::new("prop3", Some(x.windings()), None, v[0].value, v[0].stat_error, tail, rhs)
        .with_note("lhs uses |σ|, which dominates |σ(X,Y)|");
    Ok(if dg.p_ok { row } else { row.not_applicable(&format!("p(z) = {:.3e} ≥ 1", dg.p)) })
}

/// C(l, p) = 2^l Σ_{m≥1} m^{l+1} p^m.
pub fn c_l_p(l: f64, p: f64) -> f64 {
    if !(p < 1.0) {
        return f64::INFINITY;
    }
    if p == 0.0 {
        return 0.0;
    }
    let mut s = 0.0;
    for m in 1..1_000_000u64 {
        let t = (m as f64).powf(l + 1.0) * p.powf(m as f64);
        s += t;
        if m as f64 > (l + 1.0) / (-p.ln()) && t < 1e-17 * s {
            break;
        }
    }
    2f64.powf(l) * s
}

/// K(R, z) on a grid of radii with its bound; one extra row per adjacent
/// pair of radii checks that K(R)(1+R)^l does not increase.
pub fn prop1_decay_check(r_grid: &[f64], params: &ModelParams, trunc: &Truncation) -> Result<Vec<CheckRow>> {
    if trunc.cluster_n_max < 2 || trunc.cluster_n_max > MAX_CLUSTER {
        return Err(Error::Domain(format!("cluster_n_max must be in 2..={MAX_CLUSTER}")));
    }
    let meas = LoopMeasure::new(params, trunc);
    let dims = r_grid.len();
    let mut totals = vec![Estimate::default(); dims];
    for k in 1..trunc.cluster_n_max {
        // root + k free loops, (1/k!)|φ| Σ_i 1[L_i leaves the ball]
        let (e, _) = integrate_tuples(&meas, k + 1, trunc, task_id(&[0x9301, k as u64]), dims, |shapes, o, _| {
            let w: f64 = shapes.iter().map(|s| s.abs_weight).product();
            let lps: Vec<&CompositeLoop> = shapes.iter().map(|s| &s.lp).collect();
            let mut en = Enumerator::anchored(params, lps, 1, trunc.r_max);
            let mut acc = vec![0.0; dims];
            en.run(&mut |pl: &Placement| {
                let phi = ursell_fast(&pl.zeta_matrix(), k + 1, false).re;
                for (q, &rr) in r_grid.iter().enumerate() {
                    let cnt = (1..=k).filter(|&i| ball_exits(&shapes[i].lp, pl.ts[i], rr)).count();
                    acc[q] += phi * cnt as f64;
                }
            });
            for q in 0..dims {
                o[q] = C64::new(w * acc[q] / factorial(k), 0.0);
            }
        });
        for q in 0..dims {
            totals[q] = totals[q].add_indep(&e[q]);
        }
    }
    let tc = tree_constants(&meas);
    let dg = convergence_diagnostics(params, QlVariant::Corrected);
    let n = params.norms();
    let p = dg.p.max(dg.p_l);
    let ql = dg.q_l;
    let kmax = trunc.cluster_n_max - 1;
    let tail = rooted_tail(&tc, kmax, &|k| k as f64);
    let inside = p < 1.0 && ql < 1.0;
    let mut rows = Vec::new();
    for (q, &rr) in r_grid.iter().enumerate() {
        let bound = if inside {
            c_l_p(params.l, p) * (1.0 + params.beta * std::f64::consts::E * n.ml) * ql / (1.0 - ql) * (1.0 + rr).powf(-params.l)
        } else {
            f64::INFINITY
        };
        let row = CheckRow::new("prop1", None, Some(rr), totals[q].value, totals[q].stat_error, tail, bound);
        rows.push(if inside {
            row
        } else {
            row.not_applicable(&format!("outside the radius: max(p, p_l) = {p:.3e}, q_l = {ql:.3e}"))
        });
    }
    for q in 1..dims {
        let (r0, r1) = (r_grid[q - 1], r_grid[q]);
        let a = totals[q - 1].value.re * (1.0 + r0).powf(params.l);
        let b = totals[q].value.re * (1.0 + r1).powf(params.l);
        let ea = totals[q - 1].stat_error * (1.0 + r0).powf(params.l);
        let eb = totals[q].stat_error * (1.0 + r1).powf(params.l);
        let mut row = CheckRow::new("prop1_shape", None, Some(r1), C64::new(b, 0.0), eb, 0.0, a + 3.0 * ea);
        row.status = if b - 3.0 * eb <= a + 3.0 * ea { Status::Pass } else { Status::Fail };
        rows.push(row.with_note(&format!("K(R)(1+R)^l at R = {r1} against R = {r0}")));
    }
    Ok(rows)
}

/// D_m(X, R, r) by chain enumeration, m ∈ 0..=2.
pub fn dm_check(x: &CompositeLoop, radius: f64, r: f64, m: usize, params: &ModelParams, trunc: &Truncation) -> Result<CheckRow> {
    if x.sup_radius() > radius {
        return Err(Error::Validation(format!("loop leaves the ball of radius {radius}")));
    }
    if m > 3 {
        return Err(Error::Domain("chain length limited to 3".into()));
    }
    let sx = stab(x, params)?;
    let meas = LoopMeasure::new(params, trunc);
    let outer = radius + r;
    let (e, _) = integrate_tuples(&meas, m + 1, trunc, task_id(&[0xd0, m as u64, r.to_bits()]), 1, |shapes, o, _| {
        let w: f64 = shapes.iter().map(|s| s.abs_weight * (s.a + 2.0 * s.b).exp()).product();
        let mut lps: Vec<&CompositeLoop> = vec![x];
        lps.extend(shapes.iter().map(|s| &s.lp));
        let mut en = Enumerator::anchored(params, lps, 1, trunc.r_max);
        let mut acc = 0.0;
        en.run(&mut |pl: &Placement| {
            let mut p = 1.0;
            for i in 0..=m {
                p *= pl.zeta[i * MAX_LOOPS + i + 1].norm();
            }
            if p > 0.0 && ball_exits(&shapes[m].lp, pl.ts[m + 1], outer) {
                acc += p;
            }
        });
        o[0] = C64::new(w * acc, 0.0);
    });
    let tc = tree_constants(&meas);
    let dg = convergence_diagnostics(params, QlVariant::Corrected);
    let p = dg.p.max(dg.p_l);
    let mf = m as f64;
    let bound = sx.a * (mf + 1.0) * p.powi(m as i32 + 1) * (1.0 + r / (2.0 * (mf + 1.0))).powf(-params.l);
    let tail = sx.a * (mf + 1.0) * tc.p.powi(m as i32) * tc.p_omit;
    let row = CheckRow::new(&format!("D{m}"), None, Some(r), e[0].value, e[0].stat_error, tail, bound);
    Ok(if p < 1.0 { row } else { row.not_applicable(&format!("max(p, p_l) = {p:.3e} ≥ 1")) })
}


/// Chain sums Σ_{m ≤ m_max} ∫|μ|^m Π_i e^{a+2b}(X_i) Π|ζ(X_i, X_{i+1})| from X
/// to Y, with X_0 = X and X_{m+1} = Y.
fn chain_sum(x: &CompositeLoop, y: &CompositeLoop, m_max: usize, params: &ModelParams, trunc: &Truncation) -> Estimate {
    let meas = LoopMeasure::new(params, trunc);
    let mut total = Estimate::exact(C64::new(loops::mayer(x, y, &params.psi).norm(), 0.0));
    for m in 1..=m_max {
        let (e, _) = integrate_tuples(&meas, m, trunc, task_id(&[0xc4a1, m as u64]), 1, |shapes, o, _| {
            let w: f64 = shapes.iter().map(|s| s.abs_weight * (s.a + 2.0 * s.b).exp()).product();
            let mut lps: Vec<&CompositeLoop> = vec![x, y];
            lps.extend(shapes.iter().map(|s| &s.lp));
            let mut en = Enumerator::anchored(params, lps, 2, trunc.r_max);
            let mut acc = 0.0;
            en.run(&mut |pl: &Placement| {
                // path 0 → 2 → 3 → … → m+1 → 1
                let mut p = pl.zeta[2].norm();
                for i in 2..m + 1 {
                    p *= pl.zeta[i * MAX_LOOPS + i + 1].norm();
                }
                p *= pl.zeta[(m + 1) * MAX_LOOPS + 1].norm();
                acc += p;
            });
            o[0] = C64::new(w * acc, 0.0);
        });
        total = total.add_indep(&e[0]);
    }
    total
}

/// |σ(X,Y)| against e^{a(Y)+2b(Y)} times the chain sums truncated at the same
/// number of intermediate loops. The truncated right side only shrinks, so
/// passing it is at least as strong as the untruncated inequality.
pub fn twopoint_check(x: &CompositeLoop, y: &CompositeLoop, params: &ModelParams, trunc: &Truncation) -> Result<CheckRow> {
    let s = two_point_sigma(x, y, params, trunc, false)?;
    let sy = stab(y, params)?;
    let m_max = trunc.cluster_n_max - 2;
    let ch = chain_sum(x, y, m_max, params, trunc);
    let pref = (sy.a + 2.0 * sy.b).exp();
    let rhs = pref * (ch.value.re - 3.0 * ch.stat_error).max(0.0);
    let dist = lattice::norm(lattice::sub(y.base(), x.base()));
    Ok(CheckRow::new("twopoint", Some(y.windings()), Some(dist), s.value, s.stat_error, 0.0, rhs)
        .with_note("chain sums truncated at the same order as σ"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Potential, PotentialKind};
    use proptest::prelude::*;

    fn c(x: f64) -> C64 {
        C64::new(x, 0.0)
    }

    fn static_model(d: usize, z: f64) -> ModelParams {
        ModelParams::new(
            d,
            1.0,
            c(z),
            Potential::empty(d, PotentialKind::Transverse),
            Potential::empty(d, PotentialKind::Longitudinal),
            d as f64 + 1.0,
        )
        .unwrap()
    }

    fn hopping(z: f64) -> ModelParams {
        ModelParams::new(
            1,
            1.0,
            c(z),
            Potential::nearest_neighbour(1, PotentialKind::Transverse, -0.5).unwrap(),
            Potential::empty(1, PotentialKind::Longitudinal),
            4.0,
        )
        .unwrap()
    }

    fn rand_zeta(n: usize, vals: &[(f64, f64)]) -> Vec<C64> {
        let mut z = vec![c(0.0); n * n];
        let mut k = 0;
        for i in 0..n {
            for j in i + 1..n {
                let v = C64::new(vals[k].0, vals[k].1);
                z[i * n + j] = v;
                z[j * n + i] = v;
                k += 1;
            }
        }
        z
    }

    #[test]
    fn connected_graph_counts() {
        let cache = UrsellCache::global();
        let counts: Vec<usize> = (1..=5).map(|n| cache.count(n)).collect();
        assert_eq!(counts, vec![1, 1, 4, 38, 728]);
    }

    #[test]
    fn ursell_small_cases() {
        let cache = UrsellCache::global();
        assert_eq!(cache.ursell(&[c(0.0)], 1, true).unwrap(), c(1.0));
        let z = rand_zeta(3, &[(-1.0, 0.0); 3]);
        assert_eq!(cache.ursell(&z, 3, true).unwrap(), c(2.0));
        assert_eq!(ursell_fast(&z, 3, true), c(2.0));
        // vertex 3 isolated
        let mut z = rand_zeta(4, &[(0.3, 0.1); 6]);
        for k in 0..4 {
            z[3 * 4 + k] = c(0.0);
            z[k * 4 + 3] = c(0.0);
        }
        assert_eq!(cache.ursell(&z, 4, true).unwrap(), c(0.0));
        assert!(cache.ursell(&z, 6, true).is_err());
    }

    #[test]
    fn same_site_cluster_values() {
        // ζ ≡ −1: φ = (−1)^{n−1}(n−1)!
        for n in 1..=5 {
            let z = vec![c(-1.0); n * n];
            let expect = if n % 2 == 1 { 1.0 } else { -1.0 } * factorial(n - 1);
            assert_eq!(UrsellCache::global().ursell(&z, n, true).unwrap(), c(expect));
            assert!((ursell_fast(&z, n, true) - c(expect)).norm() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn partition_identity(n in 1usize..=4, vals in proptest::collection::vec((-1.5f64..1.5, -1.5f64..1.5), 6)) {
            let z = rand_zeta(n, &vals);
            let mut prod = c(1.0);
            for i in 0..n {
                for j in i + 1..n {
                    prod *= 1.0 + z[i * n + j];
                }
            }
            let s = partition_sum(&z, n);
            prop_assert!((s - prod).norm() <= 1e-12 * prod.norm().max(1.0));
        }

        #[test]
        fn graph_sum_matches_recursion(n in 1usize..=5, vals in proptest::collection::vec((-1.5f64..1.5, -1.5f64..1.5), 10), signed in any::<bool>()) {
            let z = rand_zeta(n, &vals);
            let a = UrsellCache::global().ursell(&z, n, signed).unwrap();
            let b = ursell_fast(&z, n, signed);
            prop_assert!((a - b).norm() <= 1e-11 * a.norm().max(1.0));
        }

        #[test]
        fn abs_ursell_dominates(n in 2usize..=5, vals in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 10)) {
            let z = rand_zeta(n, &vals);
            prop_assert!(ursell_fast(&z, n, true).norm() <= ursell_fast(&z, n, false).re + 1e-12);
        }
    }

    #[test]
    fn static_cluster_partial_sums() {
        let z = 0.1;
        let t = Truncation { cluster_n_max: 5, j_max: 3, ..Default::default() };
        for v in [1usize, 2, 3] {
            let bx = SiteBox::chain(v);
            let e = log_partition_cluster(&bx, &static_model(1, z), &t).unwrap();
            let oracle: f64 = (1..=5).map(|n| (if n % 2 == 1 { 1.0 } else { -1.0 }) * z.powi(n) / n as f64).sum::<f64>() * v as f64;
            assert!((e.value.re - oracle).abs() <= 1e-12 * oracle, "V={v}: {} vs {oracle}", e.value.re);
            assert!(e.meta.exact);
            assert!((e.value.re - v as f64 * (1.0 + z).ln()).abs() <= e.tail_bound);
        }
        assert_eq!(log_partition_cluster(&SiteBox::chain(3), &static_model(1, 0.0), &t).unwrap().value, c(0.0));
    }

    #[test]
    fn static_direct_is_truncated_binomial() {
        let z = 0.1;
        let t = Truncation { cluster_n_max: 4, ..Default::default() };
        let v = 3usize;
        let e = partition_direct(&SiteBox::chain(v), &static_model(1, z), &t).unwrap();
        // Σ_{n≤4} C(V,n) z^n
        let oracle = 1.0 + 3.0 * z + 3.0 * z * z + z * z * z;
        assert!((e.value.re - oracle).abs() < 1e-14);
        let e0 = partition_direct(&SiteBox::chain(v), &static_model(1, 0.0), &t).unwrap();
        assert_eq!(e0.value, c(1.0));
    }

    #[test]
    fn cluster_matches_direct_two_sites() {
        let t = Truncation { cluster_n_max: 5, samples: 20_000, n_max: 10, ..Default::default() };
        let m = hopping(0.05);
        let bx = SiteBox::chain(2);
        let a = log_partition_cluster(&bx, &m, &t).unwrap();
        let b = partition_direct(&bx, &m, &t).unwrap();
        let lb = b.value.re.ln();
        let err = 3.0 * (a.stat_error + b.stat_error / b.value.re) + a.tail_bound + b.tail_bound / b.value.re;
        assert!((a.value.re - lb).abs() <= err, "{} vs {lb} (err {err})", a.value.re);
    }

    #[test]
    fn enumerator_window_is_complete() {
        // compare the windowed connected enumeration with brute force over a wide rectangle
        let m = hopping(0.05);
        let meas = LoopMeasure::new(&m, &Truncation { n_max: 8, ..Default::default() });
        let mut r = crate::rng::stream(4, 4, 4);
        for _ in 0..20 {
            let shapes: Vec<Shape> = (0..3).map(|_| meas.sample(&mut r)).collect();
            if shapes.iter().any(|s| s.is_null()) {
                continue;
            }
            let lps: Vec<&CompositeLoop> = shapes.iter().map(|s| &s.lp).collect();
            let rects = vec![fixed_rect(lattice::ORIGIN), free_rect(30, 1), free_rect(30, 1)];
            let mut en = Enumerator::new(&m, lps.clone(), rects.clone(), Mode::Connected);
            let mut a = c(0.0);
            en.run(&mut |pl: &Placement| a += ursell_fast(&pl.zeta_matrix(), 3, true));
            let mut b = c(0.0);
            for t1 in -30..=30 {
                for t2 in -30..=30 {
                    let p = [lps[0].clone(), lps[1].shift([t1, 0, 0]), lps[2].shift([t2, 0, 0])];
                    let mut z = vec![c(0.0); 9];
                    for i in 0..3 {
                        for k in 0..3 {
                            if i != k {
                                z[i * 3 + k] = loops::mayer(&p[i], &p[k], &m.psi);
                            }
                        }
                    }
                    b += ursell_fast(&z, 3, true);
                }
            }
            assert!((a - b).norm() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn static_rooted_bulk_is_log_one_plus_z() {
        let z = 0.1;
        let t = Truncation { cluster_n_max: 5, ..Default::default() };
        let res = rooted_integrals(&static_model(1, z), &t, &[1], &[]).unwrap();
        let a0 = &res.faces[0].1;
        let partial: f64 = (1..=5).map(|n| (if n % 2 == 1 { 1.0 } else { -1.0 }) * z.powi(n) / n as f64).sum();
        assert!((a0.value.re - partial).abs() < 1e-14);
        for (fs, e) in &res.faces[1..] {
            assert_eq!(e.value, c(0.0), "{fs:?}");
        }
    }

    #[test]
    fn sigma_at_zero_fugacity_is_mayer() {
        let m = hopping(0.0);
        let t = Truncation { cluster_n_max: 4, samples: 512, ..Default::default() };
        let x = CompositeLoop::stationary(1, 1.0, [0, 0, 0], 1);
        let y = CompositeLoop::stationary(1, 1.0, [0, 0, 0], 1);
        let s = two_point_sigma(&x, &y, &m, &t, false).unwrap();
        assert_eq!(s.value, c(-1.0));
        let far = CompositeLoop::stationary(1, 1.0, [5, 0, 0], 1);
        assert_eq!(two_point_sigma(&x, &far, &m, &t, false).unwrap().value, c(0.0));
    }

    #[test]
    fn abs_sigma_dominates_sigma() {
        let m = hopping(0.05);
        let t = Truncation { cluster_n_max: 4, samples: 4000, n_max: 10, ..Default::default() };
        let x = CompositeLoop::stationary(1, 1.0, [0, 0, 0], 1);
        for yb in [0, 1, 2] {
            let y = CompositeLoop::stationary(1, 1.0, [yb, 0, 0], 1);
            let s = two_point_sigma(&x, &y, &m, &t, false).unwrap();
            let a = two_point_sigma(&x, &y, &m, &t, true).unwrap();
            assert!(s.value.norm() <= a.value.re + 3.0 * (s.stat_error + a.stat_error));
        }
    }

    #[test]
    fn assumption3_static_closed_form() {
        // static j=1 loop, π ≡ 0, hard core: J = z e (only the same-site j=1 loop)
        let z = 0.01;
        let m = static_model(1, z);
        let x = CompositeLoop::stationary(1, 1.0, [0, 0, 0], 1);
        let row = assumption3_check(&x, &m, &Truncation::default()).unwrap();
        assert!((row.lhs.re - z * std::f64::consts::E).abs() < 1e-15);
        let row0 = assumption3_check(&x, &static_model(1, 0.0), &Truncation::default()).unwrap();
        assert_eq!(row0.lhs, c(0.0));
        assert_eq!(row0.status, Status::Pass);
    }

    #[test]
    fn assumption4_far_annulus_is_zero() {
        let psi = Potential::nearest_neighbour(1, PotentialKind::Longitudinal, 0.1).unwrap();
        let m = ModelParams::new(1, 1.0, c(0.05), Potential::empty(1, PotentialKind::Transverse), psi, 4.0).unwrap();
        let x = CompositeLoop::stationary(1, 1.0, [0, 0, 0], 1);
        let row = assumption4_check(&x, 1.0, 3.0, &m, &Truncation::default()).unwrap();
        assert_eq!(row.lhs, c(0.0));
        assert!(assumption4_check(&CompositeLoop::stationary(1, 1.0, [3, 0, 0], 1), 1.0, 3.0, &m, &Truncation::default()).is_err());
    }

    #[test]
    fn prop3_static_closed_form() {
        // static model: only same-site j=1 loops interact, |σ| at m=0 is 1, a(Y)=1
        let z = 0.01;
        let m = static_model(1, z);
        let x = CompositeLoop::stationary(1, 1.0, [0, 0, 0], 1);
        let t = Truncation { cluster_n_max: 2, ..Default::default() };
        let row = prop3_check(&x, &m, &t).unwrap();
        assert!((row.lhs.re - z).abs() < 1e-15);
    }

    #[test]
    fn prop1_zero_fugacity_and_far_radius() {
        let t = Truncation { cluster_n_max: 3, samples: 256, n_max: 6, ..Default::default() };
        let rows = prop1_decay_check(&[1.0, 2.0], &hopping(0.0), &t).unwrap();
        assert!(rows.iter().filter(|r| r.check_name == "prop1").all(|r| r.lhs == c(0.0)));
        let rows = prop1_decay_check(&[100.0], &hopping(0.02), &t).unwrap();
        assert_eq!(rows[0].lhs, c(0.0));
    }

    #[test]
    fn twopoint_bound_on_random_pairs() {
        let m = hopping(0.02);
        let t = Truncation { cluster_n_max: 3, samples: 2000, n_max: 8, ..Default::default() };
        let meas = LoopMeasure::new(&m, &t);
        let mut r = crate::rng::stream(9, 9, 9);
        let mut done = 0;
        while done < 4 {
            let (a, b) = (meas.sample(&mut r), meas.sample(&mut r));
            if a.is_null() || b.is_null() {
                continue;
            }
            let y = b.lp.shift([done % 2, 0, 0]);
            let row = twopoint_check(&a.lp, &y, &m, &t).unwrap();
            assert_eq!(row.status, Status::Pass, "{row:?}");
            done += 1;
        }
    }

    #[test]
    fn rooted_box_matches_box_cluster_static() {
        let z = 0.1;
        let m = static_model(1, z);
        let t = Truncation { cluster_n_max: 5, ..Default::default() };
        let res = rooted_integrals(&m, &t, &[1], &[2.0, 4.0]).unwrap();
        for (rr, e) in &res.box_lnz {
            let b = log_partition_cluster(&SiteBox::chain(*rr as usize + 1), &m, &t).unwrap();
            assert!((e.value - b.value).norm() < 1e-13);
        }
    }

    #[test]
    fn c_l_p_closed_form() {
        // l = 1: 2 Σ m² p^m = 2 p(1+p)/(1-p)^3
        let p: f64 = 0.3;
        let expect = 2.0 * p * (1.0 + p) / (1.0 - p).powi(3);
        assert!((c_l_p(1.0, p) - expect).abs() < 1e-12);
        assert!(c_l_p(4.0, 1.2).is_infinite());
    }
}
