//! String operator paths.
//!
//! A P string is a set of crossed links; its value is the product of
//! `1 − 2n` over them. A Q string is a chain of triangles glued at kagome
//! vertices: it enters triangle `t` at corner `entry` and leaves at corner
//! `exit`. On each triangle it exchanges the empty state with the link
//! `entry–exit` and exchanges the two links touching the third corner. This
//! reverses the dimer arrows of the visited vertices, so perfect coverings
//! map to perfect coverings and the map is an involution.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{norm, RubyLattice, Vec2};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StringKind {
    P,
    Q,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QStep {
    pub triangle: usize,
    pub entry: usize,
    pub exit: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StringPath {
    pub kind: StringKind,
    pub closed: bool,
    pub crossed_edges: Vec<usize>,
    pub steps: Vec<QStep>,
    pub enclosed_vertices: Option<usize>,
}

/// Number of rays used for the logical Z strings; `LogicalZ(j)` takes `j` in `1..=LOGICAL_RAYS`.
pub const LOGICAL_RAYS: usize = 6;
const RAY_OFFSET: f64 = 0.13;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Template {
    HexagonLoop(usize),
    HalfHexagon {
        hexagon: usize,
        start: usize,
    },
    /// Boundary of a set of kagome vertices.
    DualLoop(Vec<usize>),
    LogicalX,
    LogicalZ(usize),
    /// Shortest non-contractible Q loop along a periodic axis.
    WindingLoop(usize),
    CustomP {
        sites: Vec<usize>,
        closed: bool,
    },
    CustomQ {
        steps: Vec<QStep>,
        closed: bool,
    },
}

impl StringPath {
    fn p(sites: Vec<usize>, closed: bool, enclosed: Option<usize>) -> Self {
        Self { kind: StringKind::P, closed, crossed_edges: sites, steps: Vec::new(), enclosed_vertices: enclosed }
    }

    fn q(steps: Vec<QStep>, closed: bool) -> Self {
        Self { kind: StringKind::Q, closed, crossed_edges: Vec::new(), steps, enclosed_vertices: None }
    }

    /// Sites whose occupation the Q action toggles, given the current occupations.
    pub fn q_flips(&self, lat: &RubyLattice, occupied: impl Fn(usize) -> bool) -> Vec<usize> {
        let mut flips = Vec::with_capacity(2 * self.steps.len());
        for st in &self.steps {
            let tri = &lat.triangles[st.triangle];
            let slot = |v: usize| tri.corners.iter().position(|&c| c == v).unwrap();
            let (kp, kq) = (slot(st.entry), slot(st.exit));
            let kc = 3 - kp - kq;
            let local = (0..3).find(|&k| occupied(tri.sites[k]));
            let target = match local {
                None => Some(kc),
                Some(k) if k == kc => None,
                Some(k) if k == kq => Some(kp),
                Some(_) => Some(kq),
            };
            if let Some(k) = local {
                flips.push(tri.sites[k]);
            }
            if let Some(k) = target {
                flips.push(tri.sites[k]);
            }
        }
        flips
    }

    /// Product of `1 − 2n` over the crossed links.
    pub fn p_value(&self, occupied: impl Fn(usize) -> bool) -> f64 {
        let odd = self.crossed_edges.iter().filter(|&&s| occupied(s)).count() % 2 == 1;
        if odd {
            -1.0
        } else {
            1.0
        }
    }

    fn validate(&self, lat: &RubyLattice) -> Result<()> {
        match self.kind {
            StringKind::P => {
                if self.crossed_edges.is_empty() {
                    return Err(Error::Template("empty path".into()));
                }
                let mut s = self.crossed_edges.clone();
                s.sort_unstable();
                s.dedup();
                if s.len() != self.crossed_edges.len() || s.iter().any(|&i| i >= lat.n_sites()) {
                    return Err(Error::Template("P path must list distinct valid sites".into()));
                }
            }
            StringKind::Q => {
                if self.steps.is_empty() {
                    return Err(Error::Template("empty path".into()));
                }
                let mut tris: Vec<usize> = self.steps.iter().map(|s| s.triangle).collect();
                tris.sort_unstable();
                tris.dedup();
                if tris.len() != self.steps.len() {
                    return Err(Error::Template("Q path visits a triangle twice".into()));
                }
                for st in &self.steps {
                    let tri = lat.triangles.get(st.triangle).ok_or_else(|| Error::Template("bad triangle".into()))?;
                    if st.entry == st.exit || !tri.corners.contains(&st.entry) || !tri.corners.contains(&st.exit) {
                        return Err(Error::Template("Q step must join two distinct corners".into()));
                    }
                }
                for w in self.steps.windows(2) {
                    if w[0].exit != w[1].entry {
                        return Err(Error::Template("consecutive Q steps must share a vertex".into()));
                    }
                }
                if self.closed && self.steps.last().unwrap().exit != self.steps[0].entry {
                    return Err(Error::Template("closed Q path must return to its first vertex".into()));
                }
            }
        }
        Ok(())
    }
}

pub fn make_string(lat: &RubyLattice, kind: StringKind, template: &Template) -> Result<StringPath> {
    let path = match (kind, template) {
        (StringKind::P, Template::HexagonLoop(h)) => {
            let hex = lat.hexagons.get(*h).ok_or_else(|| Error::Template("no such hexagon".into()))?;
            let sites = cut_of(lat, &hex.corners);
            let enclosed = enclosed_by_polygon(lat, &sites, Some(hex.center));
            StringPath::p(sites, true, Some(enclosed))
        }
        (StringKind::Q, Template::HexagonLoop(h)) => {
            let hex = lat.hexagons.get(*h).ok_or_else(|| Error::Template("no such hexagon".into()))?;
            let steps = (0..6).map(|k| QStep { triangle: hex.triangles[k], entry: hex.corners[k], exit: hex.corners[(k + 1) % 6] }).collect();
            StringPath::q(steps, true)
        }
        (_, Template::HalfHexagon { hexagon, start }) => {
            let hex = lat.hexagons.get(*hexagon).ok_or_else(|| Error::Template("no such hexagon".into()))?;
            let ks: Vec<usize> = (0..3).map(|d| (start + d) % 6).collect();
            match kind {
                StringKind::P => {
                    let mut sites = Vec::new();
                    for &k in &ks {
                        for &s in &lat.triangles[hex.triangles[k]].sites {
                            let inside = lat.site_vertices[s].iter().filter(|v| hex.corners.contains(v)).count();
                            if inside == 1 {
                                sites.push(s);
                            }
                        }
                    }
                    StringPath::p(sites, false, None)
                }
                StringKind::Q => {
                    let steps = ks.iter().map(|&k| QStep { triangle: hex.triangles[k], entry: hex.corners[k], exit: hex.corners[(k + 1) % 6] }).collect();
                    StringPath::q(steps, false)
                }
            }
        }
        (StringKind::P, Template::DualLoop(set)) => {
            if set.iter().any(|&v| v >= lat.n_vertices()) {
                return Err(Error::Template("vertex index out of range".into()));
            }
            let mut s = set.clone();
            s.sort_unstable();
            s.dedup();
            StringPath::p(cut_of(lat, &s), true, Some(s.len()))
        }
        (StringKind::Q, Template::LogicalX) => {
            let c = lat.hole_center.ok_or_else(|| Error::Template("logical X needs a hole".into()))?;
            let theta = RAY_OFFSET + std::f64::consts::PI / LOGICAL_RAYS as f64;
            let crosses = |a: Vec2, b: Vec2| u8::from(segment_crosses_ray(c, theta, a, b));
            let mut starts: Vec<usize> = (0..lat.n_triangles()).collect();
            starts.sort_by(|&x, &y| {
                let dx = norm(sub(lat.triangles[x].centroid, c));
                let dy = norm(sub(lat.triangles[y].centroid, c));
                dx.total_cmp(&dy).then(x.cmp(&y))
            });
            starts.truncate(6);
            let steps = shortest_cycle(lat, &starts, 1, &|a, b| crosses(a, b)).ok_or_else(|| Error::Template("no loop encircles the hole".into()))?;
            StringPath::q(steps, true)
        }
        (StringKind::P, Template::LogicalZ(j)) => {
            let c = lat.hole_center.ok_or_else(|| Error::Template("logical Z needs a hole".into()))?;
            if *j < 1 || *j > LOGICAL_RAYS {
                return Err(Error::Template(format!("logical Z index must be in 1..={LOGICAL_RAYS}")));
            }
            let theta = logical_ray_angle(*j);
            let sites: Vec<usize> = (0..lat.n_sites())
                .filter(|&s| {
                    let [a, b] = lat.site_vertices[s];
                    segment_crosses_ray(c, theta, lat.vertices[a].position, lat.vertices[b].position)
                })
                .collect();
            StringPath::p(sites, false, None)
        }
        (StringKind::Q, Template::WindingLoop(axis)) => {
            if *axis > 1 || !lat.periodic[*axis] {
                return Err(Error::Template("winding loop needs a periodic axis".into()));
            }
            let bit = 1u8 << axis;
            let crosses = |a: Vec2, b: Vec2| {
                let w = lat.wraps(a, b);
                let n = if *axis == 0 { w.0 } else { w.1 };
                if n.rem_euclid(2) == 1 {
                    bit
                } else {
                    0
                }
            };
            let steps = shortest_cycle(lat, &[0], bit, &crosses).ok_or_else(|| Error::Template("no winding loop".into()))?;
            StringPath::q(steps, true)
        }
        (StringKind::P, Template::CustomP { sites, closed }) => {
            let enclosed = if *closed && !sites.is_empty() { Some(enclosed_by_polygon(lat, sites, None)) } else { None };
            StringPath::p(sites.clone(), *closed, enclosed)
        }
        (StringKind::Q, Template::CustomQ { steps, closed }) => StringPath::q(steps.clone(), *closed),
        (k, t) => return Err(Error::Template(format!("template {t:?} has no {k:?} realization"))),
    };
    path.validate(lat)?;
    Ok(path)
}

pub fn logical_ray_angle(j: usize) -> f64 {
    RAY_OFFSET + (j - 1) as f64 * 2.0 * std::f64::consts::PI / LOGICAL_RAYS as f64
}

fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

/// Links with exactly one endpoint in `set`.
fn cut_of(lat: &RubyLattice, set: &[usize]) -> Vec<usize> {
    (0..lat.n_sites()).filter(|&s| lat.site_vertices[s].iter().filter(|v| set.contains(v)).count() == 1).collect()
}

/// Even-odd count of kagome vertices inside the polygon through the crossed
/// link midpoints, ordered by angle around their mean.
fn enclosed_by_polygon(lat: &RubyLattice, sites: &[usize], hint: Option<Vec2>) -> usize {
    // Re-centre a few times so minimal images are taken about the loop centre.
    let mut centre = hint.unwrap_or(lat.positions[sites[0]]);
    for _ in 0..if hint.is_some() { 1 } else { 4 } {
        let m = sites.iter().fold([0.0, 0.0], |acc, &s| {
            let d = lat.displacement(centre, lat.positions[s]);
            [acc[0] + d[0], acc[1] + d[1]]
        });
        centre = [centre[0] + m[0] / sites.len() as f64, centre[1] + m[1] / sites.len() as f64];
    }
    let mut poly: Vec<Vec2> = sites.iter().map(|&s| lat.displacement(centre, lat.positions[s])).collect();
    poly.sort_by(|a, b| a[1].atan2(a[0]).total_cmp(&b[1].atan2(b[0])));
    lat.vertices.iter().filter(|v| point_in_polygon(lat.displacement(centre, v.position), &poly)).count()
}

fn point_in_polygon(p: Vec2, poly: &[Vec2]) -> bool {
    // Nudge the query point off the lattice's rational heights.
    let p = [p[0] + 1.3e-7, p[1] + 0.7e-7];
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + n - 1) % n]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Whether the segment `a–b` crosses the ray from `o` at angle `theta`.
pub fn segment_crosses_ray(o: Vec2, theta: f64, a: Vec2, b: Vec2) -> bool {
    let d = [theta.cos(), theta.sin()];
    let e = sub(b, a);
    let denom = d[0] * (-e[1]) - d[1] * (-e[0]);
    if denom.abs() < 1e-14 {
        return false;
    }
    let r = sub(a, o);
    // Solve o + s d = a + u e.
    let s = (r[0] * (-e[1]) - r[1] * (-e[0])) / denom;
    let u = (d[0] * r[1] - d[1] * r[0]) / denom;
    s > 0.0 && (0.0..=1.0).contains(&u)
}

/// Shortest simple cycle in the triangle graph whose accumulated crossing mask
/// equals `target`; edges of the graph are shared kagome vertices.
fn shortest_cycle(lat: &RubyLattice, starts: &[usize], target: u8, crossing: &dyn Fn(Vec2, Vec2) -> u8) -> Option<Vec<QStep>> {
    let nt = lat.n_triangles();
    let mut adj: Vec<Vec<(usize, usize, u8)>> = vec![Vec::new(); nt];
    for (v, vert) in lat.vertices.iter().enumerate() {
        if let [t1, t2] = vert.triangles[..] {
            let (c1, c2) = (lat.triangles[t1].centroid, lat.triangles[t2].centroid);
            let mask = crossing(c1, c2);
            adj[t1].push((t2, v, mask));
            adj[t2].push((t1, v, mask));
        }
    }
    let mut best: Option<Vec<QStep>> = None;
    for &s in starts {
        let states = nt * 4;
        let mut prev: Vec<Option<(usize, usize)>> = vec![None; states];
        let mut seen = vec![false; states];
        let mut queue = VecDeque::new();
        seen[s * 4] = true;
        queue.push_back((s, 0u8));
        let goal = s * 4 + target as usize;
        while let Some((t, m)) = queue.pop_front() {
            if seen[goal] {
                break;
            }
            for &(u, v, mask) in &adj[t] {
                let nm = m ^ mask;
                let id = u * 4 + nm as usize;
                if !seen[id] {
                    seen[id] = true;
                    prev[id] = Some((t * 4 + m as usize, v));
                    queue.push_back((u, nm));
                }
            }
        }
        if !seen[goal] {
            continue;
        }
        // Walk back: sequence of (triangle, vertex used to enter it).
        let mut hops: Vec<(usize, usize)> = Vec::new();
        let mut cur = goal;
        while let Some((p, v)) = prev[cur] {
            hops.push((cur / 4, v));
            cur = p;
        }
        hops.reverse();
        // hops[k] = (t_{k+1}, u_{k+1}); the last triangle is s itself.
        let m = hops.len();
        let tris: Vec<usize> = std::iter::once(s).chain(hops.iter().take(m - 1).map(|h| h.0)).collect();
        let entries: Vec<usize> = std::iter::once(hops[m - 1].1).chain(hops.iter().take(m - 1).map(|h| h.1)).collect();
        let mut sorted = tris.clone();
        sorted.sort_unstable();
        sorted.dedup();
        let mut verts = entries.clone();
        verts.sort_unstable();
        verts.dedup();
        if sorted.len() != m || verts.len() != m || m < 2 {
            continue;
        }
        let steps: Vec<QStep> = (0..m).map(|k| QStep { triangle: tris[k], entry: entries[k], exit: entries[(k + 1) % m] }).collect();
        if best.as_ref().map_or(true, |b| steps.len() < b.len()) {
            best = Some(steps);
        }
    }
    best
}
