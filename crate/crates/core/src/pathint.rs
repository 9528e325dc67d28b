//! Path measures: exact jump-count enumeration, closed-loop sampling,
//! the one-loop measure μ_z and the large-loop estimates.

use num_complex::Complex64 as C64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::lattice::{self, Site};
use crate::loops::{self, CompositeLoop, Energy, Jump};
use crate::mc::{self, Estimate};
use crate::model::ModelParams;
use crate::report::CheckRow;

/// Truncation parameters shared by every series evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Truncation {
    pub j_max: u32,
    pub n_max: usize,
    pub r_max: i32,
    pub cluster_n_max: usize,
    pub samples: u64,
    pub seed: u64,
    /// Loop count of the direct Z series when it should exceed `cluster_n_max`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub direct_n_max: Option<usize>,
}

impl Default for Truncation {
    fn default() -> Self {
        Truncation { j_max: 3, n_max: 12, r_max: 24, cluster_n_max: 4, samples: 20_000, seed: 1, direct_n_max: None }
    }
}

impl Truncation {
    pub fn validate(&self) -> Result<()> {
        if self.j_max == 0 || self.n_max == 0 || self.r_max <= 0 || self.cluster_n_max == 0 || self.samples == 0 {
            return invalid("truncation parameters must be positive");
        }
        if self.cluster_n_max > crate::cluster::MAX_CLUSTER {
            return invalid(format!("cluster_n_max is limited to {}", crate::cluster::MAX_CLUSTER));
        }
        if self.direct_n_max.is_some_and(|n| n == 0 || n > crate::cluster::MAX_LOOPS) {
            return invalid(format!("direct_n_max must be in 1..={}", crate::cluster::MAX_LOOPS));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateMeta {
    pub truncation: Truncation,
    pub samples: u64,
    pub exact: bool,
    pub rigorous_tail: bool,
    #[serde(default)]
    pub notes: Vec<String>,
}

/// Value, standard error and truncation-tail bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesEstimate {
    pub value: C64,
    pub stat_error: f64,
    pub tail_bound: f64,
    pub meta: EstimateMeta,
}

impl SeriesEstimate {
    pub fn new(e: Estimate, tail: f64, meta: EstimateMeta) -> Self {
        SeriesEstimate { value: e.value, stat_error: e.stat_error, tail_bound: tail, meta }
    }

    /// |value − x| ≤ k σ + tail + slack.
    pub fn consistent_with(&self, x: C64, k: f64, slack: f64) -> bool {
        (self.value - x).norm() <= k * self.stat_error + self.tail_bound + slack
    }
}

/// e^{−t} t^n / n!.
pub fn poisson_pmf(t: f64, n: usize) -> f64 {
    if t == 0.0 {
        return if n == 0 { 1.0 } else { 0.0 };
    }
    let ln = -t + n as f64 * t.ln() - ln_factorial(n);
    ln.exp()
}

pub fn ln_factorial(n: usize) -> f64 {
    (1..=n).map(|k| (k as f64).ln()).sum()
}

/// Σ_{n>n0} pmf(t, n) g(n), summed until the terms are negligible.
pub fn poisson_tail(t: f64, n0: usize, g: impl Fn(usize) -> f64) -> f64 {
    if t == 0.0 {
        return 0.0;
    }
    let mut acc = 0.0;
    let mut prev = f64::INFINITY;
    for n in n0 + 1..n0 + 5000 {
        let term = poisson_pmf(t, n) * g(n);
        if !term.is_finite() {
            return f64::INFINITY;
        }
        acc += term;
        if n as f64 > 2.0 * t + 10.0 && term < 1e-18 * acc.max(1e-300) && term <= prev {
            break;
        }
        prev = term;
    }
    acc
}

/// Jump law |π(r)|/2M with its phases −π(r)/|π(r)|.
#[derive(Clone, Debug)]
pub struct JumpLaw {
    pub vectors: Vec<Site>,
    pub probs: Vec<f64>,
    pub phases: Vec<C64>,
    pub m: f64,
    pub m0: C64,
    pub range: i32,
    pub all_positive: bool,
}

impl JumpLaw {
    pub fn new(params: &ModelParams) -> Self {
        let n = params.norms();
        let mut vectors = Vec::new();
        let mut probs = Vec::new();
        let mut phases = Vec::new();
        for &(r, v) in params.pi.entries() {
            let a = v.norm();
            if a == 0.0 {
                continue;
            }
            vectors.push(r);
            probs.push(a / (2.0 * n.m));
            phases.push(-v / a);
        }
        let all_positive = phases.iter().all(|p| *p == C64::new(1.0, 0.0));
        JumpLaw { vectors, probs, phases, m: n.m, m0: n.m0, range: params.pi.range(), all_positive }
    }
}

/// Dense array over the cube [−half, half]^d.
#[derive(Clone, Debug)]
struct Grid {
    d: usize,
    half: i32,
    side: usize,
}

impl Grid {
    fn new(d: usize, half: i32) -> Self {
        Grid { d, half, side: (2 * half + 1) as usize }
    }

    fn len(&self) -> usize {
        self.side.pow(self.d as u32)
    }

    #[inline]
    fn idx(&self, x: Site) -> Option<usize> {
        let mut k = 0usize;
        for i in 0..self.d {
            if x[i].abs() > self.half {
                return None;
            }
            k = k * self.side + (x[i] + self.half) as usize;
        }
        Some(k)
    }

    fn site(&self, mut k: usize) -> Site {
        let mut s = lattice::ORIGIN;
        for i in (0..self.d).rev() {
            s[i] = (k % self.side) as i32 - self.half;
            k /= self.side;
        }
        s
    }
}

/// Convolution powers p^{*k}, k = 0..=kmax, of the jump law (and of its
/// signed version when some phase differs from 1).
#[derive(Clone, Debug)]
struct ConvTables {
    grid: Grid,
    pos: Vec<Vec<f64>>,
    signed: Option<Vec<Vec<C64>>>,
}

impl ConvTables {
    fn new(d: usize, law: &JumpLaw, kmax: usize) -> Self {
        let grid = Grid::new(d, law.range.max(1) * kmax as i32);
        let origin = grid.idx(lattice::ORIGIN).unwrap();
        let mut pos = vec![vec![0.0; grid.len()]];
        pos[0][origin] = 1.0;
        let mut signed = if law.all_positive {
            None
        } else {
            let mut v = vec![vec![C64::new(0.0, 0.0); grid.len()]];
            v[0][origin] = C64::new(1.0, 0.0);
            Some(v)
        };
        for k in 1..=kmax {
            let prev = &pos[k - 1];
            let mut next = vec![0.0; grid.len()];
            let mut snext = signed.as_ref().map(|_| vec![C64::new(0.0, 0.0); grid.len()]);
            for (i, &w) in prev.iter().enumerate() {
                let sw = signed.as_ref().map(|s| s[k - 1][i]);
                if w == 0.0 {
                    continue;
                }
                let x = grid.site(i);
                for (q, &r) in law.vectors.iter().enumerate() {
                    if let Some(t) = grid.idx(lattice::add(x, r)) {
                        next[t] += w * law.probs[q];
                        if let (Some(sn), Some(sw)) = (snext.as_mut(), sw) {
                            sn[t] += sw * law.probs[q] * law.phases[q];
                        }
                    }
                }
            }
            pos.push(next);
            if let (Some(s), Some(sn)) = (signed.as_mut(), snext) {
                s.push(sn);
            }
        }
        ConvTables { grid, pos, signed }
    }

    #[inline]
    fn get(&self, k: usize, x: Site) -> f64 {
        match self.grid.idx(x) {
            Some(i) => self.pos[k][i],
            None => 0.0,
        }
    }

    fn get_signed(&self, k: usize, x: Site) -> C64 {
        match &self.signed {
            None => C64::new(self.get(k, x), 0.0),
            Some(s) => match self.grid.idx(x) {
                Some(i) => s[k][i],
                None => C64::new(0.0, 0.0),
            },
        }
    }
}

/// Everything needed to integrate against P^{jβ}_{0,0}.
#[derive(Clone, Debug)]
pub struct PathEngine {
    d: usize,
    beta: f64,
    law: JumpLaw,
    n_max: usize,
    tables: ConvTables,
}

/// Which path measure: the signed P (with the Radon–Nikodym factor) or P_+.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathMeasure {
    Signed,
    Positive,
}

pub enum JumpFn<'a> {
    /// Depends on the jump count only.
    Count(&'a (dyn Fn(usize) -> C64 + Sync)),
    /// Depends on the ordered jump vectors.
    Sequence(&'a (dyn Fn(&[Site]) -> C64 + Sync)),
}

/// A jump-only functional with a caller-supplied bound sup|h(n)|.
pub struct JumpFunctional<'a> {
    pub h: JumpFn<'a>,
    pub sup_abs: &'a (dyn Fn(usize) -> f64 + Sync),
}

impl PathEngine {
    pub fn new(params: &ModelParams, n_max: usize) -> Self {
        let law = JumpLaw::new(params);
        let kmax = if law.m > 0.0 { n_max } else { 0 };
        let tables = ConvTables::new(params.d, &law, kmax);
        PathEngine { d: params.d, beta: params.beta, law, n_max, tables }
    }

    pub fn law(&self) -> &JumpLaw {
        &self.law
    }

    pub fn n_max(&self) -> usize {
        if self.law.m > 0.0 {
            self.n_max
        } else {
            0
        }
    }

    /// Mean jump count jβM.
    pub fn t(&self, j: u32) -> f64 {
        j as f64 * self.beta * self.law.m
    }

    /// P(S_n = 0) for the jump walk.
    pub fn closed_prob(&self, n: usize) -> f64 {
        if n > self.n_max() {
            return 0.0;
        }
        self.tables.get(n, lattice::ORIGIN)
    }

    pub fn closed_signed(&self, n: usize) -> C64 {
        if n > self.n_max() {
            return C64::new(0.0, 0.0);
        }
        self.tables.get_signed(n, lattice::ORIGIN)
    }

    /// e^{jβ(M+M0)}.
    pub fn rn_prefactor(&self, j: u32) -> C64 {
        (j as f64 * self.beta * (self.law.m + self.law.m0)).exp()
    }

    /// P_+ mass of closed loops with at most n_max jumps.
    pub fn positive_mass(&self, j: u32) -> f64 {
        let t = self.t(j);
        (0..=self.n_max()).map(|n| poisson_pmf(t, n) * self.closed_prob(n)).sum()
    }

    /// Bound on the P_+ mass of closed loops with more than n_max jumps.
    pub fn omitted_positive_mass(&self, j: u32) -> f64 {
        0.5 * poisson_tail(self.t(j), self.n_max(), |_| 1.0)
    }

    /// Enumerates closed jump sequences of length n with their P_+ weights.
    pub fn for_each_closed_sequence(&self, n: usize, mut f: impl FnMut(&[usize], f64)) {
        if n > self.n_max() {
            return;
        }
        let mut seq = Vec::with_capacity(n);
        self.dfs(n, lattice::ORIGIN, 1.0, &mut seq, &mut f);
    }

    fn dfs(&self, n: usize, x: Site, w: f64, seq: &mut Vec<usize>, f: &mut impl FnMut(&[usize], f64)) {
        let rem = n - seq.len();
        if rem == 0 {
            if lattice::is_zero(x) {
                f(seq, w);
            }
            return;
        }
        for (q, &r) in self.law.vectors.iter().enumerate() {
            let y = lattice::add(x, r);
            if self.tables.get(rem - 1, lattice::neg(y)) == 0.0 {
                continue;
            }
            seq.push(q);
            self.dfs(n, y, w * self.law.probs[q], seq, f);
            seq.pop();
        }
    }

    /// Exact jump-truncated integral of a jump-only functional.
    pub fn integrate(&self, j: u32, h: &JumpFunctional, measure: PathMeasure) -> (C64, f64) {
        let t = self.t(j);
        let pref = match measure {
            PathMeasure::Signed => self.rn_prefactor(j),
            PathMeasure::Positive => C64::new(1.0, 0.0),
        };
        let mut acc = C64::new(0.0, 0.0);
        for n in 0..=self.n_max() {
            let w = poisson_pmf(t, n);
            if w == 0.0 {
                continue;
            }
            let s = match &h.h {
                JumpFn::Count(g) => {
                    let c = match measure {
                        PathMeasure::Signed => self.closed_signed(n),
                        PathMeasure::Positive => C64::new(self.closed_prob(n), 0.0),
                    };
                    if c == C64::new(0.0, 0.0) {
                        C64::new(0.0, 0.0)
                    } else {
                        c * g(n)
                    }
                }
                JumpFn::Sequence(g) => {
                    let mut s = C64::new(0.0, 0.0);
                    let mut rs = Vec::with_capacity(n);
                    self.for_each_closed_sequence(n, |seq, p| {
                        rs.clear();
                        rs.extend(seq.iter().map(|&q| self.law.vectors[q]));
                        let ph = match measure {
                            PathMeasure::Signed => seq.iter().map(|&q| self.law.phases[q]).product(),
                            PathMeasure::Positive => C64::new(1.0, 0.0),
                        };
                        s += ph * p * g(&rs);
                    });
                    s
                }
            };
            acc += w * s;
        }
        let tail = pref.norm() * 0.5 * poisson_tail(t, self.n_max(), |n| (h.sup_abs)(n));
        (pref * acc, tail)
    }

    /// Draws a closed loop from P^{jβ}_{0,0,+} (conditioned on n ≤ n_max,
    /// normalized) and returns it with the weight mass·f so that weighted
    /// averages integrate against P^{jβ}_{0,0}.
    pub fn sample_closed(&self, j: u32, rng: &mut ChaCha8Rng) -> (CompositeLoop, C64) {
        let len = j as f64 * self.beta;
        if self.law.m == 0.0 {
            return (CompositeLoop::stationary(self.d, self.beta, lattice::ORIGIN, j), self.rn_prefactor(j));
        }
        let t = self.t(j);
        let ws: Vec<f64> = (0..=self.n_max).map(|n| poisson_pmf(t, n) * self.closed_prob(n)).collect();
        let mass: f64 = ws.iter().sum();
        let mut u = rng.random::<f64>() * mass;
        let mut n = 0;
        for (k, w) in ws.iter().enumerate() {
            n = k;
            if u < *w {
                break;
            }
            u -= w;
        }
        while ws[n] == 0.0 {
            n -= 1;
        }
        let mut x = lattice::ORIGIN;
        let mut seq = Vec::with_capacity(n);
        let mut phase = C64::new(1.0, 0.0);
        for step in 0..n {
            let rem = n - step;
            let norm = self.tables.get(rem, lattice::neg(x));
            let mut u = rng.random::<f64>() * norm;
            let mut pick = None;
            let mut last = None;
            for (q, &r) in self.law.vectors.iter().enumerate() {
                let y = lattice::add(x, r);
                let w = self.law.probs[q] * self.tables.get(rem - 1, lattice::neg(y));
                if w == 0.0 {
                    continue;
                }
                last = Some(q);
                if u < w {
                    pick = Some(q);
                    break;
                }
                u -= w;
            }
            let q = pick.or(last).expect("a closed continuation exists");
            x = lattice::add(x, self.law.vectors[q]);
            phase *= self.law.phases[q];
            seq.push(self.law.vectors[q]);
        }
        let times = sorted_times(n, len, rng);
        let jumps = seq.into_iter().zip(times).map(|(r, t)| Jump { t, r }).collect();
        let lp = CompositeLoop::build(self.d, self.beta, lattice::ORIGIN, j, jumps);
        (lp, self.rn_prefactor(j) * phase * mass)
    }
}

fn sorted_times(n: usize, len: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let mut ts: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * len).collect();
        ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let ok = ts.first().is_none_or(|&t| t > 0.0) && ts.windows(2).all(|w| w[0] < w[1]);
        if ok {
            return ts;
        }
    }
}

fn meta(trunc: &Truncation, exact: bool, samples: u64) -> EstimateMeta {
    EstimateMeta { truncation: *trunc, samples, exact, rigorous_tail: true, notes: Vec::new() }
}

/// e^{−Mjβ} Σ_{n≤n_max} (Mjβ)^n/n! Σ_{closed sequences} Π(|π(r_i)|/2M) h, with
/// the Radon–Nikodym factor for the signed measure.
pub fn integrate_jump_functional(
    j: u32,
    h: &JumpFunctional,
    params: &ModelParams,
    trunc: &Truncation,
    measure: PathMeasure,
) -> SeriesEstimate {
    let eng = PathEngine::new(params, trunc.n_max);
    let (v, tail) = eng.integrate(j, h, measure);
    let mut m = meta(trunc, true, 0);
    if tail > 1e-8 * v.norm().max(1e-300) {
        m.notes.push(format!("n_max = {} leaves a relative tail of {:.2e}", trunc.n_max, tail / v.norm().max(1e-300)));
    }
    SeriesEstimate { value: v, stat_error: 0.0, tail_bound: tail, meta: m }
}

/// One closed-loop draw with its reweighting factor; requires M > 0.
pub fn sample_closed_loop(j: u32, params: &ModelParams, trunc: &Truncation, rng: &mut ChaCha8Rng) -> Result<(CompositeLoop, C64)> {
    let eng = PathEngine::new(params, trunc.n_max);
    if eng.law.m == 0.0 {
        return Err(crate::Error::Domain("closed-loop sampling needs M > 0".into()));
    }
    Ok(eng.sample_closed(j, rng))
}

pub fn lemma1_check(j: u32, params: &ModelParams, trunc: &Truncation) -> Vec<CheckRow> {
    let e = std::f64::consts::E;
    let eng = PathEngine::new(params, trunc.n_max);
    let t = eng.t(j);
    let growth = (t * (e - 1.0)).exp();
    let bounds = [0.5 * growth, 0.5 * t * e * growth, 0.5 * t * e * (t * e + 1.0) * growth];
    let names = ["lemma1_a", "lemma1_b", "lemma1_c"];
    let mut rows = Vec::new();
    for k in 0..3 {
        let g = move |n: usize| C64::new((n as f64).exp() * (n as f64).powi(k as i32), 0.0);
        let sup = move |n: usize| (n as f64).exp() * (n as f64).powi(k as i32);
        let h = JumpFunctional { h: JumpFn::Count(&g), sup_abs: &sup };
        let (v, tail) = eng.integrate(j, &h, PathMeasure::Positive);
        let row = CheckRow::new(names[k], Some(j), None, v, 0.0, tail, bounds[k]);
        rows.push(if eng.law.m == 0.0 { row.not_applicable("M = 0: the path measure is a point mass") } else { row });
    }
    rows
}

/// P_+-weighted counts of closed sequences with sup_t|X(t)| ≥ R, per jump count.
pub fn exit_closed_probs(eng: &PathEngine, radius: f64) -> Vec<f64> {
    let nmax = eng.n_max();
    let grid = eng.tables.grid.clone();
    let o = grid.idx(lattice::ORIGIN).unwrap();
    let reach = |s: Site| lattice::norm(s) >= radius;
    let mut free = vec![0.0; grid.len()];
    let mut hit = vec![0.0; grid.len()];
    if reach(lattice::ORIGIN) {
        hit[o] = 1.0;
    } else {
        free[o] = 1.0;
    }
    let mut out = vec![hit[o]];
    for _ in 1..=nmax {
        let mut nf = vec![0.0; grid.len()];
        let mut nh = vec![0.0; grid.len()];
        for i in 0..grid.len() {
            if free[i] == 0.0 && hit[i] == 0.0 {
                continue;
            }
            let x = grid.site(i);
            for (q, &r) in eng.law.vectors.iter().enumerate() {
                let y = lattice::add(x, r);
                let Some(t) = grid.idx(y) else { continue };
                let p = eng.law.probs[q];
                nh[t] += hit[i] * p;
                if reach(y) {
                    nh[t] += free[i] * p;
                } else {
                    nf[t] += free[i] * p;
                }
            }
        }
        free = nf;
        hit = nh;
        out.push(hit[o]);
    }
    out
}

pub fn lemma2_check(j: u32, radius: f64, params: &ModelParams, trunc: &Truncation) -> Vec<CheckRow> {
    let e = std::f64::consts::E;
    let eng = PathEngine::new(params, trunc.n_max);
    let n = params.norms();
    let t = eng.t(j);
    let jbml = j as f64 * params.beta * e * n.ml;
    let base = (j as f64 * params.beta * (n.ml * e - n.m)).exp() * (1.0 + radius).powf(-params.l);
    let bounds = [base, jbml * base, jbml * (jbml + 1.0) * base];
    let names = ["lemma2_a", "lemma2_b", "lemma2_c"];
    let probs = exit_closed_probs(&eng, radius);
    let mut rows = Vec::new();
    for k in 0..3 {
        let mut v = 0.0;
        for (nn, p) in probs.iter().enumerate() {
            v += poisson_pmf(t, nn) * p * (nn as f64).exp() * (nn as f64).powi(k as i32);
        }
        let tail = 0.5 * poisson_tail(t, eng.n_max(), |nn| (nn as f64).exp() * (nn as f64).powi(k as i32));
        let row = CheckRow::new(names[k], Some(j), Some(radius), C64::new(v, 0.0), 0.0, tail, bounds[k]);
        rows.push(if eng.law.m == 0.0 { row.not_applicable("M = 0: the path measure is a point mass") } else { row });
    }
    rows
}

/// A loop based at the origin drawn from the one-loop measure, with weights
/// normalized so that E[weight · h(X)] = ∫ μ_z(dX) h(X) over origin-based loops.
#[derive(Clone, Debug)]
pub struct Shape {
    pub lp: CompositeLoop,
    pub weight: C64,
    pub abs_weight: f64,
    pub a: f64,
    pub b: f64,
}

impl Shape {
    pub fn is_null(&self) -> bool {
        self.abs_weight == 0.0
    }
}

/// The measure μ_z on loops based at the origin, truncated at j_max
/// windings and n_max jumps.
#[derive(Clone, Debug)]
pub struct LoopMeasure {
    params: ModelParams,
    engine: PathEngine,
    j_max: u32,
    lambda: Vec<f64>,
    total: f64,
    psi_norm: f64,
}

impl LoopMeasure {
    pub fn new(params: &ModelParams, trunc: &Truncation) -> Self {
        let engine = PathEngine::new(params, trunc.n_max);
        let n = params.norms();
        let az = params.z.norm();
        let lambda: Vec<f64> = (1..=trunc.j_max)
            .map(|j| {
                let jf = j as f64;
                az.powi(j as i32) / jf * engine.positive_mass(j) * (jf * params.beta * (n.m + n.m0.re)).exp()
            })
            .collect();
        let total = lambda.iter().sum();
        LoopMeasure { params: params.clone(), engine, j_max: trunc.j_max, lambda, total, psi_norm: n.psi_norm }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn engine(&self) -> &PathEngine {
        &self.engine
    }

    pub fn j_max(&self) -> u32 {
        self.j_max
    }

    /// True when loops never jump, so the measure is a finite sum over j.
    pub fn deterministic(&self) -> bool {
        self.engine.law.m == 0.0
    }

    /// Total |·| weight of kept origin-based loops before the e^{−Re v} factor.
    pub fn total(&self) -> f64 {
        self.total
    }

    fn finish(&self, lp: CompositeLoop, j: u32, f: C64, norm: f64) -> Shape {
        let jf = j as f64;
        let zphase = if self.params.z.norm() > 0.0 { (self.params.z / self.params.z.norm()).powi(j as i32) } else { C64::new(0.0, 0.0) };
        match loops::self_energy(&lp, &self.params.psi) {
            Energy::Infinite => Shape { lp, weight: C64::new(0.0, 0.0), abs_weight: 0.0, a: 0.0, b: 0.0 },
            Energy::Finite(v) => {
                let a = jf + lp.n_jumps() as f64;
                let b = 0.5 * v.re + 0.5 * self.params.beta * self.psi_norm * jf;
                let fn_ = f.norm();
                let fphase = if fn_ > 0.0 { f / fn_ } else { C64::new(0.0, 0.0) };
                let ev = (-v).exp();
                Shape { lp, weight: norm * zphase * fphase * ev, abs_weight: norm * ev.norm(), a, b }
            }
        }
    }

    /// One Monte Carlo draw.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Shape {
        if self.total == 0.0 {
            let lp = CompositeLoop::stationary(self.params.d, self.params.beta, lattice::ORIGIN, 1);
            return Shape { lp, weight: C64::new(0.0, 0.0), abs_weight: 0.0, a: 1.0, b: 0.0 };
        }
        let mut u = rng.random::<f64>() * self.total;
        let mut j = 1;
        for (k, l) in self.lambda.iter().enumerate() {
            j = k as u32 + 1;
            if u < *l {
                break;
            }
            u -= l;
        }
        let (lp, w) = self.engine.sample_closed(j, rng);
        // w = mass · f; its modulus is already inside lambda
        self.finish(lp, j, w, self.total)
    }

    /// All kept loops with nonzero weight when the measure is a finite sum.
    pub fn exact_shapes(&self) -> Option<Vec<Shape>> {
        if !self.deterministic() {
            return None;
        }
        let mut out = Vec::new();
        for j in 1..=self.j_max {
            let lp = CompositeLoop::stationary(self.params.d, self.params.beta, lattice::ORIGIN, j);
            let s = self.finish(lp, j, self.engine.rn_prefactor(j), self.lambda[j as usize - 1]);
            if !s.is_null() {
                out.push(s);
            }
        }
        Some(out)
    }

    /// Per-site bound Σ_j (|z| e^{β(M + Re M0 + ‖ψ‖)})^j / j on |μ_z| of all loops.
    pub fn abs_mass_bound_per_site(&self) -> f64 {
        let x = self.x_abs(1.0);
        if x >= 1.0 {
            f64::INFINITY
        } else {
            -(1.0 - x).ln()
        }
    }

    fn x_abs(&self, psi_factor: f64) -> f64 {
        let n = self.params.norms();
        self.params.z.norm() * (self.params.beta * (n.m + n.m0.re + psi_factor * n.psi_norm)).exp()
    }

    /// Per-site bound on the |μ_z| mass (times e^{2b} when `stab`) of loops
    /// outside the truncation (j > j_max or more than n_max jumps).
    pub fn omitted_abs_mass_per_site(&self, stab: bool) -> f64 {
        let x = self.x_abs(if stab { 2.0 } else { 1.0 });
        if x >= 1.0 {
            return f64::INFINITY;
        }
        let mut kept_part = 0.0;
        for j in 1..=self.j_max {
            kept_part += x.powi(j as i32) / j as f64 * self.engine.omitted_positive_mass(j);
        }
        let all: f64 = -(1.0 - x).ln();
        let head: f64 = (1..=self.j_max).map(|j| x.powi(j as i32) / j as f64).sum();
        kept_part + (all - head).max(0.0)
    }
}

/// Integration region for μ_z.
#[derive(Clone, Debug, PartialEq)]
pub enum Region {
    /// Every base site with sup-norm at most r_max (the truncated Z^d).
    AllSpace,
    /// Integer box `lo ≤ r ≤ hi`; loops must stay inside.
    Box { lo: Site, hi: Site },
}

fn box_translations(lp: &CompositeLoop, lo: Site, hi: Site, d: usize) -> Vec<Site> {
    let bb = lp.bbox();
    let mut ranges = Vec::new();
    for i in 0..d {
        let a = lo[i] - bb.lo[i];
        let b = hi[i] - bb.hi[i];
        if a > b {
            return Vec::new();
        }
        ranges.push((a, b));
    }
    cube_points(d, &ranges)
}

pub(crate) fn cube_points(d: usize, ranges: &[(i32, i32)]) -> Vec<Site> {
    let mut out = vec![lattice::ORIGIN];
    for i in 0..d {
        let (a, b) = ranges[i];
        let mut next = Vec::with_capacity(out.len() * (b - a + 1).max(0) as usize);
        for s in &out {
            for v in a..=b {
                let mut t = *s;
                t[i] = v;
                next.push(t);
            }
        }
        out = next;
    }
    out
}

/// ∫ μ_z(dX) h(X) over loops in `region`.
///
/// `sup_abs_h` bounds |h| and feeds the truncation tail.
pub fn mu_z_integral(
    region: &Region,
    h: &(dyn Fn(&CompositeLoop) -> C64 + Sync),
    sup_abs_h: f64,
    params: &ModelParams,
    trunc: &Truncation,
) -> SeriesEstimate {
    let meas = LoopMeasure::new(params, trunc);
    let d = params.d;
    let (lo, hi) = match region {
        Region::AllSpace => ([-trunc.r_max; 3], [trunc.r_max; 3]),
        Region::Box { lo, hi } => (*lo, *hi),
    };
    let mut lo = lo;
    let mut hi = hi;
    for i in d..3 {
        lo[i] = 0;
        hi[i] = 0;
    }
    let volume: f64 = (0..d).map(|i| (hi[i] - lo[i] + 1).max(0) as f64).product();
    let eval = |s: &Shape| -> C64 {
        if s.is_null() {
            return C64::new(0.0, 0.0);
        }
        let mut acc = C64::new(0.0, 0.0);
        match region {
            Region::AllSpace => {
                let ranges: Vec<(i32, i32)> = (0..d).map(|i| (lo[i], hi[i])).collect();
                for r in cube_points(d, &ranges) {
                    acc += h(&s.lp.shift(r));
                }
            }
            Region::Box { .. } => {
                for r in box_translations(&s.lp, lo, hi, d) {
                    acc += h(&s.lp.shift(r));
                }
            }
        }
        s.weight * acc
    };
    let (est, exact, samples) = match meas.exact_shapes() {
        Some(shapes) => (Estimate::exact(shapes.iter().map(eval).sum()), true, 0),
        None => {
            let e = mc::sample_mean(trunc.seed, crate::rng::task_id(&[0x6d75]), trunc.samples, 1, |r, out| {
                out[0] = eval(&meas.sample(r));
            });
            (e[0], false, trunc.samples)
        }
    };
    let tail = volume * sup_abs_h * meas.omitted_abs_mass_per_site(false);
    let mut m = meta(trunc, exact, samples);
    if matches!(region, Region::AllSpace) {
        m.rigorous_tail = false;
        m.notes.push(format!("translations truncated at sup-norm {}", trunc.r_max));
    }
    SeriesEstimate::new(est, tail, m)
}
