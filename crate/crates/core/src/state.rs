//! Configurations of the restricted space.
//!
//! Spin convention: `σ = +1` is the ground state `g` (spin up), `σ = −1` the
//! Rydberg state `r`, and `n = (1 − σ)/2`.

use std::fmt;

use crate::error::{Error, Result};
use crate::lattice::RubyLattice;

#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Configuration {
    n: usize,
    bits: Vec<u64>,
}

impl Configuration {
    pub fn ground(n: usize) -> Self {
        Self { n, bits: vec![0; n.div_ceil(64)] }
    }

    pub fn from_occupations(occ: &[bool]) -> Self {
        let mut c = Self::ground(occ.len());
        for (i, &o) in occ.iter().enumerate() {
            c.set(i, o);
        }
        c
    }

    pub fn from_spins(spins: &[i8]) -> Self {
        let mut c = Self::ground(spins.len());
        for (i, &s) in spins.iter().enumerate() {
            c.set(i, s < 0);
        }
        c
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        (self.bits[i >> 6] >> (i & 63)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, occupied: bool) {
        let m = 1u64 << (i & 63);
        if occupied {
            self.bits[i >> 6] |= m;
        } else {
            self.bits[i >> 6] &= !m;
        }
    }

    #[inline]
    pub fn flip(&mut self, i: usize) {
        self.bits[i >> 6] ^= 1u64 << (i & 63);
    }

    pub fn n_excitations(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Occupied slot of triangle `t` (sites `3t..3t+3`), if any.
    /// Returns `Err` when the triangle holds more than one excitation.
    #[inline]
    pub fn triangle_state(&self, t: usize) -> std::result::Result<Option<usize>, ()> {
        let (a, b, c) = (self.get(3 * t), self.get(3 * t + 1), self.get(3 * t + 2));
        match (a, b, c) {
            (false, false, false) => Ok(None),
            (true, false, false) => Ok(Some(0)),
            (false, true, false) => Ok(Some(1)),
            (false, false, true) => Ok(Some(2)),
            _ => Err(()),
        }
    }

    pub fn is_restricted(&self) -> bool {
        self.n % 3 == 0 && (0..self.n / 3).all(|t| self.triangle_state(t).is_ok())
    }

    pub fn occupations(&self) -> Vec<bool> {
        (0..self.n).map(|i| self.get(i)).collect()
    }

    pub fn spins(&self) -> Vec<i8> {
        (0..self.n).map(|i| spin_of(self, i)).collect()
    }

    pub fn write_spins(&self, out: &mut [i8]) {
        for (i, s) in out.iter_mut().enumerate() {
            *s = spin_of(self, i);
        }
    }

    /// One character per site, `1` for a Rydberg excitation.
    pub fn to_bitstring(&self) -> String {
        (0..self.n).map(|i| if self.get(i) { '1' } else { '0' }).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let occ: Vec<bool> = text
            .trim()
            .chars()
            .map(|ch| match ch {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Format(format!("unexpected character `{other}` in configuration"))),
            })
            .collect::<Result<_>>()?;
        let c = Self::from_occupations(&occ);
        if !c.is_restricted() {
            return Err(Error::Format("configuration violates the triangle constraint".into()));
        }
        Ok(c)
    }
}

impl fmt::Debug for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Configuration({})", self.to_bitstring())
    }
}

#[inline]
pub fn spin_of(c: &Configuration, i: usize) -> i8 {
    if c.get(i) {
        -1
    } else {
        1
    }
}

/// `4^(N/3)`, or `None` if it does not fit in a `u64`.
pub fn restricted_dimension(lat: &RubyLattice) -> Option<u64> {
    4u64.checked_pow(lat.n_triangles() as u32)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VertexClass {
    Monomer,
    Dimer,
    DoubleDimer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VertexOccupancy {
    pub counts: Vec<u8>,
}

impl VertexOccupancy {
    pub fn class(&self, v: usize) -> VertexClass {
        match self.counts[v] {
            0 => VertexClass::Monomer,
            1 => VertexClass::Dimer,
            _ => VertexClass::DoubleDimer,
        }
    }

    /// Numbers of monomer, dimer and double-dimer vertices.
    pub fn tally(&self) -> [usize; 3] {
        let mut t = [0; 3];
        for v in 0..self.counts.len() {
            t[self.class(v) as usize] += 1;
        }
        t
    }

    pub fn is_perfect(&self) -> bool {
        self.counts.iter().all(|&c| c == 1)
    }
}

pub fn classify_vertices(c: &Configuration, lat: &RubyLattice) -> VertexOccupancy {
    let counts = lat.vertices.iter().map(|v| v.sites.iter().filter(|&&s| c.get(s)).count() as u8).collect();
    VertexOccupancy { counts }
}

/// All perfect dimer coverings (one excitation at every kagome vertex) by
/// depth-first search over triangles.
pub fn perfect_coverings(lat: &RubyLattice) -> Vec<Configuration> {
    let nv = lat.n_vertices();
    let mut remaining = vec![0usize; nv];
    for v in 0..nv {
        remaining[v] = lat.vertices[v].triangles.len();
    }
    let mut used = vec![0u8; nv];
    let mut cfg = Configuration::ground(lat.n_sites());
    let mut out = Vec::new();
    fn rec(t: usize, lat: &RubyLattice, used: &mut [u8], remaining: &mut [usize], cfg: &mut Configuration, out: &mut Vec<Configuration>) {
        if t == lat.n_triangles() {
            if used.iter().all(|&u| u == 1) {
                out.push(cfg.clone());
            }
            return;
        }
        let tri = &lat.triangles[t];
        for &c in &tri.corners {
            remaining[c] -= 1;
        }
        for choice in 0..4usize {
            let ok = if choice == 3 {
                tri.corners.iter().all(|&c| remaining[c] > 0 || used[c] == 1)
            } else {
                let [a, b] = lat.site_vertices[tri.sites[choice]];
                let third = tri.corners[choice];
                used[a] == 0 && used[b] == 0 && (remaining[third] > 0 || used[third] == 1)
            };
            if !ok {
                continue;
            }
            if choice < 3 {
                let [a, b] = lat.site_vertices[tri.sites[choice]];
                used[a] += 1;
                used[b] += 1;
                cfg.set(tri.sites[choice], true);
            }
            rec(t + 1, lat, used, remaining, cfg, out);
            if choice < 3 {
                let [a, b] = lat.site_vertices[tri.sites[choice]];
                used[a] -= 1;
                used[b] -= 1;
                cfg.set(tri.sites[choice], false);
            }
        }
        for &c in &tri.corners {
            remaining[c] += 1;
        }
    }
    rec(0, lat, &mut used, &mut remaining, &mut cfg, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_lattice, LatticeSpec};

    #[test]
    fn dimensions() {
        let lat = |name| build_lattice(&LatticeSpec::preset(name).unwrap()).unwrap();
        assert_eq!(restricted_dimension(&lat("torus-24")), Some(65536));
        assert_eq!(restricted_dimension(&lat("triangle-3")), Some(4));
        assert_eq!(restricted_dimension(&lat("torus-12")), Some(256));
    }

    #[test]
    fn spin_mapping() {
        let c = Configuration::ground(6);
        assert!(c.spins().iter().all(|&s| s == 1));
        let t = Configuration::parse("100").unwrap();
        assert_eq!(t.spins(), vec![-1, 1, 1]);
        let round = Configuration::from_spins(&t.spins());
        assert_eq!(round, t);
        for i in 0..3 {
            let n = u8::from(t.get(i)) as i8;
            assert_eq!(n, (1 - spin_of(&t, i)) / 2);
        }
    }

    #[test]
    fn parse_rejects_double_excitation() {
        assert!(Configuration::parse("110").is_err());
        assert!(Configuration::parse("10x").is_err());
        assert_eq!(Configuration::parse("010001").unwrap().to_bitstring(), "010001");
    }

    #[test]
    fn triangle_state_decoding() {
        let mut c = Configuration::ground(6);
        c.set(4, true);
        assert_eq!(c.triangle_state(0), Ok(None));
        assert_eq!(c.triangle_state(1), Ok(Some(1)));
        c.set(5, true);
        assert!(c.triangle_state(1).is_err());
        assert!(!c.is_restricted());
    }

    #[test]
    fn vertex_classes() {
        let lat = build_lattice(&LatticeSpec::preset("torus-24").unwrap()).unwrap();
        let g = Configuration::ground(24);
        assert_eq!(classify_vertices(&g, &lat).tally(), [12, 0, 0]);
        let covers = perfect_coverings(&lat);
        assert!(!covers.is_empty());
        for c in &covers {
            let occ = classify_vertices(c, &lat);
            assert!(occ.is_perfect());
            assert_eq!(occ.tally().iter().sum::<usize>(), lat.n_vertices());
        }
        // Two dimers meeting at vertex 0 from its two triangles.
        let v = &lat.vertices[0];
        let mut c = Configuration::ground(24);
        let s1 = v.sites.iter().copied().find(|&s| s / 3 == v.triangles[0]).unwrap();
        let s2 = v.sites.iter().copied().find(|&s| s / 3 == v.triangles[1]).unwrap();
        c.set(s1, true);
        c.set(s2, true);
        assert!(c.is_restricted());
        assert_eq!(classify_vertices(&c, &lat).class(0), VertexClass::DoubleDimer);
    }
}
