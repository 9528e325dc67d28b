//! Exact diagonalization of the hard-core lattice Hamiltonian on small boxes.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::cluster::SiteBox;
use crate::error::{invalid, Error, Result};
use crate::lattice::{self, Site};
use crate::model::{ModelParams, Potential};

pub const MAX_SITES: usize = 14;

/// Treatment of the on-site kinetic term for hops leaving the box.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Sums over r, s restricted to the box.
    #[default]
    Open,
    /// On-site term −M0 per particle as in infinite volume; hops out of the
    /// box are removed. This is the Hamiltonian the loop gas in a box
    /// represents.
    Embedded,
}

/// Occupation basis of a set of sites, grouped by particle number.
#[derive(Clone, Debug)]
pub struct HardCoreBasis {
    sites: Vec<Site>,
    /// states[N] = bitmasks with N particles, ascending.
    states: Vec<Vec<u32>>,
}

impl HardCoreBasis {
    pub fn new(sites: Vec<Site>) -> Result<Self> {
        if sites.len() > MAX_SITES {
            return invalid(format!("at most {MAX_SITES} sites, got {}", sites.len()));
        }
        let v = sites.len();
        let mut states = vec![Vec::new(); v + 1];
        for s in 0u32..(1u32 << v) {
            states[s.count_ones() as usize].push(s);
        }
        Ok(HardCoreBasis { sites, states })
    }

    pub fn from_box(bx: &SiteBox, d: usize) -> Result<Self> {
        let mut sites = Vec::new();
        let mut t = bx.lo;
        if bx.volume(d) == 0 {
            return Self::new(sites);
        }
        if bx.volume(d) > MAX_SITES {
            return invalid(format!("box has {} sites, limit {MAX_SITES}", bx.volume(d)));
        }
        loop {
            sites.push(t);
            let mut ax = 0;
            loop {
                if ax == d {
                    return Self::new(sites);
                }
                if t[ax] < bx.hi[ax] {
                    t[ax] += 1;
                    break;
                }
                t[ax] = bx.lo[ax];
                ax += 1;
            }
        }
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn dim(&self) -> usize {
        1 << self.sites.len()
    }

    pub fn sector(&self, n: usize) -> &[u32] {
        &self.states[n]
    }
}

fn real_entries(p: &Potential, what: &str) -> Result<()> {
    if !p.is_real() {
        return Err(Error::Domain(format!("{what} must be real for the Hamiltonian to be Hermitian")));
    }
    Ok(())
}

/// Per-particle diagonal kinetic energy at site r.
fn onsite(basis: &HardCoreBasis, r: usize, pi: &Potential, boundary: Boundary) -> f64 {
    match boundary {
        Boundary::Embedded => -0.5 * pi.sum().re,
        Boundary::Open => {
            let sr = basis.sites[r];
            -0.5 * basis
                .sites
                .iter()
                .enumerate()
                .filter(|&(s, _)| s != r)
                .map(|(_, &ss)| pi.get(lattice::sub(sr, ss)).re)
                .sum::<f64>()
        }
    }
}

/// Energy matrix of the N-particle sector (without the −μN term).
fn sector_matrix(basis: &HardCoreBasis, n: usize, pi: &Potential, psi: &Potential, boundary: Boundary) -> DMatrix<f64> {
    let states = basis.sector(n);
    let dim = states.len();
    let v = basis.sites.len();
    let diag1: Vec<f64> = (0..v).map(|r| onsite(basis, r, pi, boundary)).collect();
    let mut h = DMatrix::<f64>::zeros(dim, dim);
    for (i, &s) in states.iter().enumerate() {
        let mut e = 0.0;
        for r in 0..v {
            if s >> r & 1 == 1 {
                e += diag1[r];
                for q in r + 1..v {
                    if s >> q & 1 == 1 {
                        e += psi.get(lattice::sub(basis.sites[r], basis.sites[q])).re;
                    }
                }
            }
        }
        h[(i, i)] = e;
        // hopping s → s − r + q carries +½π(r−q) (the ¼ appears twice)
        for r in 0..v {
            if s >> r & 1 == 0 {
                continue;
            }
            for q in 0..v {
                if s >> q & 1 == 1 {
                    continue;
                }
                let amp = 0.5 * pi.get(lattice::sub(basis.sites[r], basis.sites[q])).re;
                if amp == 0.0 {
                    continue;
                }
                let t = (s & !(1 << r)) | (1 << q);
                let k = states.binary_search(&t).expect("same sector");
                h[(k, i)] += amp;
            }
        }
    }
    h
}

/// Dense Hamiltonian on all 2^V occupation states, ordered by bitmask,
/// including the chemical term −μN.
pub fn build_hamiltonian(basis: &HardCoreBasis, pi: &Potential, psi: &Potential, mu: f64, boundary: Boundary) -> Result<DMatrix<f64>> {
    real_entries(pi, "π")?;
    real_entries(psi, "ψ")?;
    let dim = basis.dim();
    let mut h = DMatrix::<f64>::zeros(dim, dim);
    for n in 0..=basis.sites.len() {
        let block = sector_matrix(basis, n, pi, psi, boundary);
        let st = basis.sector(n);
        for (i, &a) in st.iter().enumerate() {
            for (k, &b) in st.iter().enumerate() {
                h[(a as usize, b as usize)] = block[(i, k)];
            }
            h[(a as usize, a as usize)] -= mu * n as f64;
        }
    }
    Ok(h)
}

/// ln Z = ln Σ_N z^N Σ_k e^{−βE_k(N)}, eigenvalues per particle-number sector.
pub fn log_partition_ed(basis: &HardCoreBasis, params: &ModelParams, boundary: Boundary) -> Result<f64> {
    if params.z.im != 0.0 || params.z.re <= 0.0 {
        return Err(Error::Domain(format!("exact diagonalization needs real z > 0, got {}", params.z)));
    }
    real_entries(&params.pi, "π")?;
    real_entries(&params.psi, "ψ")?;
    let lnz = params.z.re.ln();
    let mut terms = Vec::new();
    for n in 0..=basis.sites.len() {
        let h = sector_matrix(basis, n, &params.pi, &params.psi, boundary);
        let ev = SymmetricEigen::new(h).eigenvalues;
        terms.extend(ev.iter().map(|&e| n as f64 * lnz - params.beta * e));
    }
    let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln())
}

pub fn partition_ed(basis: &HardCoreBasis, params: &ModelParams, boundary: Boundary) -> Result<f64> {
    Ok(log_partition_ed(basis, params, boundary)?.exp())
}
