//! Disk tripartitions for the Kitaev-Preskill construction.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{norm, RubyLattice, Vec2};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tripartition {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
    pub c: Vec<usize>,
    pub center: Vec2,
    pub radius: f64,
}

/// Radius the default construction tries to get closest to.
const PREFERRED_RADIUS: f64 = 4.5;
const SECTOR_OFFSET: f64 = std::f64::consts::PI / 12.0;

impl Tripartition {
    /// The seven regions of the Kitaev-Preskill sum, in the order A, B, C, AB, BC, CA, ABC.
    pub fn regions(&self) -> Vec<(&'static str, Vec<usize>)> {
        let join = |x: &[usize], y: &[usize]| {
            let mut v: Vec<usize> = x.iter().chain(y).copied().collect();
            v.sort_unstable();
            v
        };
        vec![
            ("A", self.a.clone()),
            ("B", self.b.clone()),
            ("C", self.c.clone()),
            ("AB", join(&self.a, &self.b)),
            ("BC", join(&self.b, &self.c)),
            ("CA", join(&self.c, &self.a)),
            ("ABC", join(&join(&self.a, &self.b), &self.c)),
        ]
    }
}

/// Disk centred on the bulk hexagon nearest to the lattice centre, split into
/// three 120° sectors. Among admissible radii the one closest to 4.5a is used.
pub fn make_tripartition(lat: &RubyLattice) -> Result<Tripartition> {
    let bulk = lat.bulk_hexagons();
    let h = bulk
        .iter()
        .copied()
        .min_by(|&x, &y| {
            let dx = lat.norm_displacement(lat.center, lat.hexagons[x].center);
            let dy = lat.norm_displacement(lat.center, lat.hexagons[y].center);
            dx.total_cmp(&dy).then(x.cmp(&y))
        })
        .ok_or_else(|| Error::Geometry("bulk too small to host a tripartition".into()))?;
    let center = lat.hexagons[h].center;
    let mut best: Option<Tripartition> = None;
    for step in 0..=60 {
        let r = 1.8 + 0.1 * step as f64;
        if let Ok(tp) = tripartition_with(lat, center, r) {
            let better = match &best {
                None => true,
                Some(b) => (r - PREFERRED_RADIUS).abs() < (b.radius - PREFERRED_RADIUS).abs() - 1e-9,
            };
            if better {
                best = Some(tp);
            }
        }
    }
    best.ok_or_else(|| Error::Geometry("bulk too small to host a tripartition".into()))
}

/// Tripartition of the sites within `radius` of `center`, validated against
/// the disk invariants.
pub fn tripartition_with(lat: &RubyLattice, center: Vec2, radius: f64) -> Result<Tripartition> {
    let mut regions = [Vec::new(), Vec::new(), Vec::new()];
    for s in 0..lat.n_sites() {
        let d = lat.displacement(center, lat.positions[s]);
        if norm(d) <= radius {
            let ang = (d[1].atan2(d[0]) - SECTOR_OFFSET).rem_euclid(2.0 * std::f64::consts::PI);
            let k = ((ang / (2.0 * std::f64::consts::PI / 3.0)).floor() as usize).min(2);
            regions[k].push(s);
        }
    }
    let [a, b, c] = regions;
    let tp = Tripartition { a, b, c, center, radius };
    check(lat, &tp)?;
    Ok(tp)
}

fn check(lat: &RubyLattice, tp: &Tripartition) -> Result<()> {
    let bad = |m: &str| Err(Error::Geometry(format!("tripartition: {m}")));
    let n = lat.n_sites();
    if tp.a.is_empty() || tp.b.is_empty() || tp.c.is_empty() {
        return bad("empty region");
    }
    let mut label = vec![0u8; n];
    for (k, r) in [&tp.a, &tp.b, &tp.c].iter().enumerate() {
        for &s in r.iter() {
            if label[s] != 0 {
                return bad("regions overlap");
            }
            label[s] = k as u8 + 1;
        }
    }
    if label.iter().enumerate().any(|(s, &l)| l != 0 && lat.boundary[s]) {
        return bad("region touches the physical boundary");
    }
    if lat.periodic.iter().any(|&p| p) {
        let shortest = lat
            .periods
            .iter()
            .zip(lat.periodic)
            .filter(|(_, p)| *p)
            .map(|(t, _)| norm(*t))
            .fold(f64::INFINITY, f64::min)
            .min(norm([lat.periods[0][0] - lat.periods[1][0], lat.periods[0][1] - lat.periods[1][1]]));
        if 2.0 * tp.radius + 2.0 >= shortest {
            return bad("disk wraps around a periodic direction");
        }
    }
    let all: Vec<usize> = (0..n).filter(|&s| label[s] != 0).collect();
    let rest: Vec<usize> = (0..n).filter(|&s| label[s] == 0).collect();
    if rest.is_empty() {
        return bad("disk covers the whole lattice");
    }
    for set in [&tp.a, &tp.b, &tp.c, &all, &rest] {
        if !connected(lat, set) {
            return bad("region or complement disconnected");
        }
    }
    for (x, y) in [(&tp.a, &tp.b), (&tp.b, &tp.c), (&tp.c, &tp.a)] {
        let touch = x.iter().any(|&s| lat.vertex_neighbors(s).iter().any(|t| y.contains(t)));
        if !touch {
            return bad("regions do not meet");
        }
    }
    Ok(())
}

fn connected(lat: &RubyLattice, set: &[usize]) -> bool {
    if set.is_empty() {
        return false;
    }
    let mut inset = vec![false; lat.n_sites()];
    for &s in set {
        inset[s] = true;
    }
    let mut seen = vec![false; lat.n_sites()];
    let mut queue = VecDeque::from([set[0]]);
    seen[set[0]] = true;
    let mut count = 1;
    while let Some(s) = queue.pop_front() {
        for t in lat.vertex_neighbors(s) {
            if inset[t] && !seen[t] {
                seen[t] = true;
                count += 1;
                queue.push_back(t);
            }
        }
    }
    count == set.len()
}
