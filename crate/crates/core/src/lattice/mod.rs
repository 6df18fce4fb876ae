//! Ruby lattice geometry.
//!
//! Atoms sit on the links of a kagome lattice whose edge length is `2a`, so
//! neighbouring atoms are separated by `a`, `√3a` and `2a`. Positions are in
//! units of `a`. Site `3t + k` is the link of triangle `t` opposite to its
//! corner `k`.

mod partition;
mod strings;

pub use partition::{make_tripartition, tripartition_with, Tripartition};
pub use strings::{make_string, QStep, StringKind, StringPath, Template};

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = [f64; 2];

pub const SQRT3: f64 = 1.732_050_807_568_877_2;
/// Bravais vectors of the kagome lattice.
pub const A1: Vec2 = [4.0, 0.0];
pub const A2: Vec2 = [2.0, 2.0 * SQRT3];
const OFFSETS: [Vec2; 3] = [[0.0, 0.0], [2.0, 0.0], [1.0, SQRT3]];
/// Length of one unit cell, used as the bulk margin.
pub const CELL_LENGTH: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Planar,
    Cylinder,
    Torus,
    PlanarWithHole,
}

/// Which triangles of the generating window are kept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum Outline {
    /// All up and down triangles of the `L1 × L2` cell parallelogram.
    Cells,
    /// Triangles whose centroid lies in a box centred on the parallelogram
    /// centre plus `shift`.
    Box {
        half_width: f64,
        half_height: f64,
        #[serde(default)]
        shift: Vec2,
    },
}

/// Triangles whose centroid lies within `radius` of the hole centre are removed.
/// The centre is the triangle centroid closest to the lattice centre plus `offset`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HoleSpec {
    pub radius: f64,
    #[serde(default)]
    pub offset: Vec2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSpec {
    pub shape: Shape,
    pub extent: (usize, usize),
    #[serde(default = "default_outline")]
    pub outline: Outline,
    #[serde(default)]
    pub hole: Option<HoleSpec>,
    #[serde(default = "default_spacing")]
    pub spacing_um: f64,
    /// Number of triangles removed from the end of the generation order
    /// (rightmost triangles of the top row), to reach odd triangle counts.
    #[serde(default)]
    pub trim: usize,
}

fn default_outline() -> Outline {
    Outline::Cells
}

fn default_spacing() -> f64 {
    3.9
}

impl LatticeSpec {
    pub fn new(shape: Shape, l1: usize, l2: usize) -> Self {
        Self { shape, extent: (l1, l2), outline: Outline::Cells, hole: None, spacing_um: default_spacing(), trim: 0 }
    }

    pub fn torus(l1: usize, l2: usize) -> Self {
        Self::new(Shape::Torus, l1, l2)
    }

    pub fn cylinder(l1: usize, l2: usize) -> Self {
        Self::new(Shape::Cylinder, l1, l2)
    }

    pub fn planar(l1: usize, l2: usize) -> Self {
        Self::new(Shape::Planar, l1, l2)
    }

    /// Named geometries. See the README for the outline parameters.
    pub fn preset(name: &str) -> Result<Self> {
        let boxed = |l1, l2, hw, hh, shift, trim| Self {
            shape: Shape::Planar,
            extent: (l1, l2),
            outline: Outline::Box { half_width: hw, half_height: hh, shift },
            hole: None,
            spacing_um: default_spacing(),
            trim,
        };
        let spec = match name {
            "triangle-3" => Self { trim: 1, ..Self::planar(1, 1) },
            "torus-12" => Self::torus(2, 1),
            "torus-24" => Self::torus(2, 2),
            "experiment-219" => boxed(8, 8, 15.0, 9.0, [1.0, 1.5], 1),
            "pierced-285" => boxed(8, 8, 15.0, 11.0, [0.0, 1.25], 0).with_hole(1.0),
            "planar-288" => Self::planar(6, 8),
            "cylinder-288" => Self::cylinder(6, 8),
            "torus-288" => Self::torus(6, 8),
            "hole-288" => Self { trim: 1, ..Self::planar(7, 7).with_hole(1.0) },
            "pierced-81" => Self::planar(3, 3).with_box(6.0, 6.0).with_hole(1.0),
            "planar-72" => Self::planar(3, 4),
            "cylinder-72" => Self::cylinder(3, 4),
            "torus-72" => Self::torus(3, 4),
            _ => return Err(Error::Parameter(format!("unknown lattice preset `{name}`"))),
        };
        Ok(spec)
    }

    pub fn with_box(mut self, half_width: f64, half_height: f64) -> Self {
        self.outline = Outline::Box { half_width, half_height, shift: [0.0, 0.0] };
        self
    }

    pub fn with_hole(mut self, radius: f64) -> Self {
        self.shape = Shape::PlanarWithHole;
        self.hole = Some(HoleSpec { radius, offset: [0.0, 0.0] });
        self
    }

    pub fn periodic(&self) -> [bool; 2] {
        match self.shape {
            Shape::Torus => [true, true],
            Shape::Cylinder => [true, false],
            _ => [false, false],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.extent.0 < 1 || self.extent.1 < 1 {
            return Err(Error::Geometry("extent must be at least 1 in both directions".into()));
        }
        if !(self.spacing_um > 0.0) {
            return Err(Error::Geometry("spacing must be positive".into()));
        }
        match (&self.hole, self.shape) {
            (Some(_), Shape::PlanarWithHole) | (None, Shape::Planar | Shape::Cylinder | Shape::Torus) => {}
            (None, Shape::PlanarWithHole) => return Err(Error::Geometry("planar-with-hole needs a hole".into())),
            (Some(_), _) => return Err(Error::Geometry("a hole requires the planar-with-hole shape".into())),
        }
        if matches!(self.outline, Outline::Box { .. }) && self.shape != Shape::Planar && self.shape != Shape::PlanarWithHole {
            return Err(Error::Geometry("box outlines are only available for planar shapes".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triangle {
    /// `sites[k]` is the link opposite to `corners[k]`.
    pub sites: [usize; 3],
    pub corners: [usize; 3],
    pub centroid: Vec2,
    pub up: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vertex {
    pub position: Vec2,
    pub sites: Vec<usize>,
    pub triangles: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hexagon {
    pub center: Vec2,
    /// Corners in cyclic order.
    pub corners: [usize; 6],
    /// `triangles[k]` contains `corners[k]` and `corners[(k + 1) % 6]`.
    pub triangles: [usize; 6],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RubyLattice {
    pub spec: LatticeSpec,
    pub positions: Vec<Vec2>,
    pub triangles: Vec<Triangle>,
    pub vertices: Vec<Vertex>,
    pub site_vertices: Vec<[usize; 2]>,
    pub boundary: Vec<bool>,
    pub bulk_sites: Vec<bool>,
    pub bulk_vertices: Vec<bool>,
    pub hexagons: Vec<Hexagon>,
    pub genus: u8,
    pub periodic: [bool; 2],
    pub periods: [Vec2; 2],
    pub center: Vec2,
    pub hole_center: Option<Vec2>,
}

type CellKey = (i64, i64);
type VertexKey = (i64, i64, u8);

fn cell_origin(i: i64, j: i64) -> Vec2 {
    [i as f64 * A1[0] + j as f64 * A2[0], i as f64 * A1[1] + j as f64 * A2[1]]
}

fn vertex_position(k: VertexKey) -> Vec2 {
    let o = cell_origin(k.0, k.1);
    let d = OFFSETS[k.2 as usize];
    [o[0] + d[0], o[1] + d[1]]
}

fn triangle_corner_keys(i: i64, j: i64, up: bool) -> [VertexKey; 3] {
    if up {
        [(i, j, 0), (i, j, 1), (i, j, 2)]
    } else {
        [(i, j, 1), (i + 1, j, 0), (i + 1, j - 1, 2)]
    }
}

fn centroid3(p: &[Vec2; 3]) -> Vec2 {
    [(p[0][0] + p[1][0] + p[2][0]) / 3.0, (p[0][1] + p[1][1] + p[2][1]) / 3.0]
}

pub fn norm(v: Vec2) -> f64 {
    v[0].hypot(v[1])
}

struct Reducer {
    l: (i64, i64),
    periodic: [bool; 2],
}

impl Reducer {
    fn cell(&self, i: i64, j: i64) -> CellKey {
        let i = if self.periodic[0] { i.rem_euclid(self.l.0) } else { i };
        let j = if self.periodic[1] { j.rem_euclid(self.l.1) } else { j };
        (i, j)
    }

    fn vertex(&self, k: VertexKey) -> VertexKey {
        let (i, j) = self.cell(k.0, k.1);
        (i, j, k.2)
    }
}

pub fn build_lattice(spec: &LatticeSpec) -> Result<RubyLattice> {
    spec.validate()?;
    let (l1, l2) = (spec.extent.0 as i64, spec.extent.1 as i64);
    let periodic = spec.periodic();
    let red = Reducer { l: (l1, l2), periodic };
    let periods = [[A1[0] * l1 as f64, A1[1] * l1 as f64], [A2[0] * l2 as f64, A2[1] * l2 as f64]];
    let mut center = [(periods[0][0] + periods[1][0]) / 2.0, (periods[0][1] + periods[1][1]) / 2.0];

    // Candidate triangles in deterministic (row, column, up/down) order.
    let mut keys: Vec<(i64, i64, bool)> = Vec::new();
    match &spec.outline {
        Outline::Cells => {
            for j in 0..l2 {
                for i in 0..l1 {
                    keys.push((i, j, true));
                    keys.push((i, j, false));
                }
            }
        }
        Outline::Box { half_width, half_height, shift } => {
            if !(*half_width > 0.0 && *half_height > 0.0) {
                return Err(Error::Geometry("box half sizes must be positive".into()));
            }
            let reach = ((half_width + half_height + norm(center)) / 2.0).ceil() as i64 + 4;
            for j in -reach..=reach {
                for i in -2 * reach..=2 * reach {
                    for up in [true, false] {
                        let c = centroid3(&triangle_corner_keys(i, j, up).map(vertex_position));
                        let (dx, dy) = (c[0] - center[0] - shift[0], c[1] - center[1] - shift[1]);
                        if dx.abs() <= *half_width && dy.abs() <= *half_height {
                            keys.push((i, j, up));
                        }
                    }
                }
            }
        }
    }
    if spec.trim >= keys.len() {
        return Err(Error::Geometry("outline contains no triangles".into()));
    }
    keys.truncate(keys.len() - spec.trim);
    if keys.is_empty() {
        return Err(Error::Geometry("outline contains no triangles".into()));
    }
    let centroid_of = |k: &(i64, i64, bool)| centroid3(&triangle_corner_keys(k.0, k.1, k.2).map(vertex_position));

    let mut hole_center = None;
    if let Some(hole) = &spec.hole {
        if !(hole.radius > 0.0) {
            return Err(Error::Geometry("hole radius must be positive".into()));
        }
        let target = [center[0] + hole.offset[0], center[1] + hole.offset[1]];
        let mut best = centroid_of(&keys[0]);
        for k in &keys {
            let c = centroid_of(k);
            if norm([c[0] - target[0], c[1] - target[1]]) < norm([best[0] - target[0], best[1] - target[1]]) - 1e-9 {
                best = c;
            }
        }
        // The hole must leave at least one cell of lattice between it and the outer edge.
        let outer_vertices = outer_boundary_positions(&keys);
        for p in &outer_vertices {
            if norm([p[0] - best[0], p[1] - best[1]]) <= hole.radius + CELL_LENGTH {
                return Err(Error::Geometry("hole is not strictly inside the bulk".into()));
            }
        }
        keys.retain(|k| {
            let c = centroid_of(k);
            norm([c[0] - best[0], c[1] - best[1]]) > hole.radius
        });
        hole_center = Some(best);
        center = best;
    }

    let mut vertex_ids: HashMap<VertexKey, usize> = HashMap::new();
    let mut vertices: Vec<Vertex> = Vec::new();
    let mut triangles = Vec::with_capacity(keys.len());
    let mut positions = Vec::with_capacity(3 * keys.len());
    let mut site_vertices = Vec::with_capacity(3 * keys.len());
    let mut tri_ids: HashMap<(i64, i64, bool), usize> = HashMap::new();
    for &(i, j, up) in &keys {
        let (i, j) = red.cell(i, j);
        if tri_ids.contains_key(&(i, j, up)) {
            return Err(Error::Geometry("duplicate triangle after periodic reduction".into()));
        }
        let t = triangles.len();
        tri_ids.insert((i, j, up), t);
        let ck = triangle_corner_keys(i, j, up);
        let cp = ck.map(vertex_position);
        let mut corners = [0usize; 3];
        for (slot, key) in ck.iter().enumerate() {
            let rk = red.vertex(*key);
            let next = vertices.len();
            let id = *vertex_ids.entry(rk).or_insert(next);
            if id == next {
                vertices.push(Vertex { position: vertex_position(rk), sites: Vec::new(), triangles: Vec::new() });
            }
            corners[slot] = id;
        }
        if corners[0] == corners[1] || corners[1] == corners[2] || corners[0] == corners[2] {
            return Err(Error::Geometry("extent too small: triangle corners coincide".into()));
        }
        let mut sites = [0usize; 3];
        for k in 0..3 {
            let (a, b) = ((k + 1) % 3, (k + 2) % 3);
            let s = 3 * t + k;
            sites[k] = s;
            positions.push([(cp[a][0] + cp[b][0]) / 2.0, (cp[a][1] + cp[b][1]) / 2.0]);
            site_vertices.push([corners[a], corners[b]]);
            vertices[corners[a]].sites.push(s);
            vertices[corners[b]].sites.push(s);
        }
        for &c in &corners {
            vertices[c].triangles.push(t);
        }
        triangles.push(Triangle { sites, corners, centroid: centroid3(&cp), up });
    }

    let n = positions.len();
    let boundary_vertex: Vec<bool> = vertices.iter().map(|v| v.triangles.len() < 2).collect();
    let boundary: Vec<bool> = site_vertices.iter().map(|v| boundary_vertex[v[0]] || boundary_vertex[v[1]]).collect();

    let mut lat = RubyLattice {
        spec: spec.clone(),
        positions,
        triangles,
        vertices,
        site_vertices,
        boundary,
        bulk_sites: vec![true; n],
        bulk_vertices: Vec::new(),
        hexagons: Vec::new(),
        genus: u8::from(spec.hole.is_some()),
        periodic,
        periods,
        center,
        hole_center,
    };

    let bpos: Vec<Vec2> = lat.vertices.iter().zip(&boundary_vertex).filter(|(_, &b)| b).map(|(v, _)| v.position).collect();
    lat.bulk_vertices = lat.vertices.iter().map(|v| bpos.iter().all(|p| lat.norm_displacement(*p, v.position) > CELL_LENGTH)).collect();
    lat.bulk_sites = lat.site_vertices.iter().map(|v| lat.bulk_vertices[v[0]] && lat.bulk_vertices[v[1]]).collect();

    // Hexagonal faces whose six surrounding triangles are all present.
    let mut cells: Vec<CellKey> = Vec::new();
    let mut seen = HashSet::new();
    for &(i, j, _) in &keys {
        for (di, dj) in [(0, 0), (0, 1), (-1, 1), (1, 0), (1, 1), (-1, 0)] {
            let c = red.cell(i + di, j + dj);
            if seen.insert(c) {
                cells.push(c);
            }
        }
    }
    let mut hex_seen = HashSet::new();
    for (i, j) in cells {
        let tkeys = [(i, j, true), (i, j, false), (i + 1, j - 1, true), (i, j - 1, false), (i, j - 1, true), (i - 1, j, false)];
        let ckeys = [(i, j, 0u8), (i, j, 1), (i + 1, j - 1, 2), (i + 1, j - 1, 0), (i, j - 1, 1), (i, j - 1, 2)];
        let mut tris = [0usize; 6];
        let mut ok = true;
        for (k, &(a, b, up)) in tkeys.iter().enumerate() {
            let (a, b) = red.cell(a, b);
            match tri_ids.get(&(a, b, up)) {
                Some(&t) => tris[k] = t,
                None => ok = false,
            }
        }
        if !ok {
            continue;
        }
        let corners = ckeys.map(|k| vertex_ids.get(&red.vertex(k)).copied());
        if corners.iter().any(|c| c.is_none()) {
            continue;
        }
        let corners = corners.map(|c| c.unwrap());
        let distinct_t: HashSet<_> = tris.iter().collect();
        let distinct_c: HashSet<_> = corners.iter().collect();
        if distinct_t.len() != 6 || distinct_c.len() != 6 {
            continue;
        }
        let mut sorted = tris;
        sorted.sort_unstable();
        if !hex_seen.insert(sorted) {
            continue;
        }
        let o = vertex_position((i, j, 0));
        lat.hexagons.push(Hexagon { center: [o[0] + 1.0, o[1] - SQRT3], corners, triangles: tris });
    }

    lat.validate()?;
    Ok(lat)
}

/// Positions of corners that belong to a single triangle of the candidate set.
fn outer_boundary_positions(keys: &[(i64, i64, bool)]) -> Vec<Vec2> {
    let mut count: HashMap<VertexKey, usize> = HashMap::new();
    for &(i, j, up) in keys {
        for k in triangle_corner_keys(i, j, up) {
            *count.entry(k).or_default() += 1;
        }
    }
    let mut out: Vec<Vec2> = count.into_iter().filter(|(_, c)| *c < 2).map(|(k, _)| vertex_position(k)).collect();
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    out
}

impl RubyLattice {
    pub fn n_sites(&self) -> usize {
        self.positions.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn triangle_of(&self, site: usize) -> usize {
        site / 3
    }

    pub fn is_boundary_vertex(&self, v: usize) -> bool {
        self.vertices[v].triangles.len() < 2
    }

    /// Minimal-image displacement from `p` to `q`.
    pub fn displacement(&self, p: Vec2, q: Vec2) -> Vec2 {
        let d = [q[0] - p[0], q[1] - p[1]];
        if !self.periodic[0] && !self.periodic[1] {
            return d;
        }
        let r0: i64 = if self.periodic[0] { 2 } else { 0 };
        let r1: i64 = if self.periodic[1] { 2 } else { 0 };
        let mut best = d;
        let mut best_n = norm(d);
        for n0 in -r0..=r0 {
            for n1 in -r1..=r1 {
                let c = [
                    d[0] + n0 as f64 * self.periods[0][0] + n1 as f64 * self.periods[1][0],
                    d[1] + n0 as f64 * self.periods[0][1] + n1 as f64 * self.periods[1][1],
                ];
                let cn = norm(c);
                if cn < best_n - 1e-12 {
                    best = c;
                    best_n = cn;
                }
            }
        }
        best
    }

    pub fn norm_displacement(&self, p: Vec2, q: Vec2) -> f64 {
        norm(self.displacement(p, q))
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.norm_displacement(self.positions[i], self.positions[j])
    }

    /// Integer period combination `(n0, n1)` with `q − p = min_image + n0·T0 + n1·T1`.
    pub fn wraps(&self, p: Vec2, q: Vec2) -> (i64, i64) {
        let raw = [q[0] - p[0], q[1] - p[1]];
        let mi = self.displacement(p, q);
        let w = [raw[0] - mi[0], raw[1] - mi[1]];
        let [t0, t1] = self.periods;
        let det = t0[0] * t1[1] - t0[1] * t1[0];
        let n0 = (w[0] * t1[1] - w[1] * t1[0]) / det;
        let n1 = (t0[0] * w[1] - t0[1] * w[0]) / det;
        (n0.round() as i64, n1.round() as i64)
    }

    pub fn share_vertex(&self, i: usize, j: usize) -> bool {
        let (a, b) = (self.site_vertices[i], self.site_vertices[j]);
        a.iter().any(|v| b.contains(v))
    }

    /// Sites that share a kagome vertex with `i`.
    pub fn vertex_neighbors(&self, i: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for &v in &self.site_vertices[i] {
            for &s in &self.vertices[v].sites {
                if s != i && !out.contains(&s) {
                    out.push(s);
                }
            }
        }
        out.sort_unstable();
        out
    }

    pub fn bulk_hexagons(&self) -> Vec<usize> {
        (0..self.hexagons.len()).filter(|&h| self.hexagons[h].corners.iter().all(|&c| self.bulk_vertices[c])).collect()
    }

    fn validate(&self) -> Result<()> {
        let n = self.n_sites();
        if n == 0 || n % 3 != 0 || self.triangles.len() * 3 != n {
            return Err(Error::Geometry("site count must be three per triangle".into()));
        }
        for (t, tri) in self.triangles.iter().enumerate() {
            for k in 0..3 {
                if tri.sites[k] != 3 * t + k {
                    return Err(Error::Geometry("site numbering must follow triangles".into()));
                }
            }
        }
        let mut memberships = vec![0usize; n];
        for v in &self.vertices {
            for &s in &v.sites {
                memberships[s] += 1;
            }
        }
        if memberships.iter().any(|&m| m != 2) {
            return Err(Error::Geometry("every link must have two endpoints".into()));
        }
        for (v, vert) in self.vertices.iter().enumerate() {
            if vert.sites.len() != 2 * vert.triangles.len() {
                return Err(Error::Geometry(format!("vertex {v} has inconsistent memberships")));
            }
        }
        for i in 0..n {
            if self.bulk_sites[i] && self.boundary[i] {
                return Err(Error::Geometry("bulk site flagged as boundary".into()));
            }
            let reg = self.site_vertices[i].iter().all(|&v| self.vertices[v].sites.contains(&i));
            if !reg {
                return Err(Error::Geometry("site-vertex tables disagree".into()));
            }
        }
        // Pairwise distinct positions: hash on a fine grid of wrapped coordinates.
        let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for i in 0..n {
            let p = self.displacement(self.center, self.positions[i]);
            grid.entry(((p[0] * 4.0).floor() as i64, (p[1] * 4.0).floor() as i64)).or_default().push(i);
        }
        for i in 0..n {
            let p = self.displacement(self.center, self.positions[i]);
            let (gx, gy) = ((p[0] * 4.0).floor() as i64, (p[1] * 4.0).floor() as i64);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    if let Some(list) = grid.get(&(gx + dx, gy + dy)) {
                        if list.iter().any(|&j| j != i && self.distance(i, j) < 1e-6) {
                            return Err(Error::Geometry("two sites share a position".into()));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let lat: RubyLattice = serde_json::from_str(text)?;
        let n = lat.n_sites();
        if lat.site_vertices.len() != n || lat.boundary.len() != n || lat.bulk_sites.len() != n {
            return Err(Error::Format("per-site tables have inconsistent lengths".into()));
        }
        if lat.bulk_vertices.len() != lat.vertices.len() {
            return Err(Error::Format("per-vertex tables have inconsistent lengths".into()));
        }
        let nv = lat.vertices.len();
        let nt = lat.triangles.len();
        let bad_index = lat.site_vertices.iter().flatten().any(|&v| v >= nv)
            || lat.vertices.iter().any(|v| v.sites.iter().any(|&s| s >= n) || v.triangles.iter().any(|&t| t >= nt))
            || lat.triangles.iter().any(|t| t.corners.iter().any(|&c| c >= nv))
            || lat.hexagons.iter().any(|h| h.corners.iter().any(|&c| c >= nv) || h.triangles.iter().any(|&t| t >= nt));
        if bad_index {
            return Err(Error::Format("index out of range".into()));
        }
        lat.validate()?;
        Ok(lat)
    }
}

/// Distance classes of all site pairs, excluding self pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceTable {
    n: usize,
    class_of: Vec<u32>,
    pub class_distance: Vec<f64>,
}

impl DistanceTable {
    pub fn class_of(&self, i: usize, j: usize) -> usize {
        debug_assert!(i != j);
        self.class_of[i * self.n + j] as usize
    }

    pub fn n_classes(&self) -> usize {
        self.class_distance.len()
    }

    pub fn n_sites(&self) -> usize {
        self.n
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.class_distance[self.class_of(i, j)]
    }
}

pub fn distance_classes(lat: &RubyLattice) -> DistanceTable {
    let n = lat.n_sites();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * (n.saturating_sub(1)) / 2);
    for i in 0..n {
        for j in i + 1..n {
            pairs.push((lat.distance(i, j), i, j));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut class_of = vec![u32::MAX; n * n];
    let mut class_distance: Vec<f64> = Vec::new();
    for (d, i, j) in pairs {
        let new_class = match class_distance.last() {
            Some(&last) => (d - last) > 1e-9 * d.max(last),
            None => true,
        };
        if new_class {
            class_distance.push(d);
        }
        let c = (class_distance.len() - 1) as u32;
        class_of[i * n + j] = c;
        class_of[j * n + i] = c;
    }
    DistanceTable { n, class_of, class_distance }
}
