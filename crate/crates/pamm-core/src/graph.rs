//! Periodic structures, exact supercell neighbor enumeration, and the
//! per-edge triplet sets that key the motif memory.
//!
//! Edges are directed (source j → target i) and carry the integer image
//! shift of the source atom, so self-edges (j == i with a nonzero shift)
//! exist for small cells. Edge order is canonical — sorted by
//! (target, source, shift) — which makes every downstream computation
//! deterministic.

use crate::{Error, Result};

// ---------------------------------------------------------------------------
// small 3-vector / 3x3 helpers (kept local; nothing here warrants a dependency)

pub(crate) fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    dot3(m[0], cross3(m[1], m[2]))
}

/// Inverse of a 3x3 matrix via the adjugate. Caller guarantees |det| > 0.
fn inv3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let d = det3(m);
    let c0 = cross3(m[1], m[2]);
    let c1 = cross3(m[2], m[0]);
    let c2 = cross3(m[0], m[1]);
    // rows of the inverse are cofactor columns / det
    [
        [c0[0] / d, c1[0] / d, c2[0] / d],
        [c0[1] / d, c1[1] / d, c2[1] / d],
        [c0[2] / d, c1[2] / d, c2[2] / d],
    ]
}

// ---------------------------------------------------------------------------

pub const MIN_CELL_DET: f64 = 1e-8;

/// Periodic cell; rows are the lattice vectors a1, a2, a3 in Å.
///
/// Construction canonicalizes to a right-handed basis (negating a3 if the
/// determinant is negative — same lattice, positive orientation) and rejects
/// degenerate cells.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    vectors: [[f64; 3]; 3],
    inverse: [[f64; 3]; 3],
    det: f64,
}

impl Cell {
    pub fn new(mut vectors: [[f64; 3]; 3]) -> Result<Cell> {
        for row in &vectors {
            for &v in row {
                if !v.is_finite() {
                    return Err(Error::Data("cell contains a non-finite entry".into()));
                }
            }
        }
        let mut det = det3(&vectors);
        if det < 0.0 {
            for k in 0..3 {
                vectors[2][k] = -vectors[2][k];
            }
            det = -det;
        }
        if det <= MIN_CELL_DET {
            return Err(Error::Data(format!(
                "degenerate cell: |det| = {det:.3e} Å³ ≤ {MIN_CELL_DET:.0e}"
            )));
        }
        let inverse = inv3(&vectors);
        Ok(Cell { vectors, inverse, det })
    }

    pub fn vectors(&self) -> &[[f64; 3]; 3] {
        &self.vectors
    }

    pub fn det(&self) -> f64 {
        self.det
    }

    /// Cartesian coordinates of fractional coordinates `f` (row-vector × matrix).
    pub fn to_cartesian(&self, f: [f64; 3]) -> [f64; 3] {
        let a = &self.vectors;
        [
            f[0] * a[0][0] + f[1] * a[1][0] + f[2] * a[2][0],
            f[0] * a[0][1] + f[1] * a[1][1] + f[2] * a[2][1],
            f[0] * a[0][2] + f[1] * a[1][2] + f[2] * a[2][2],
        ]
    }

    pub fn to_fractional(&self, x: [f64; 3]) -> [f64; 3] {
        let m = &self.inverse;
        [
            x[0] * m[0][0] + x[1] * m[1][0] + x[2] * m[2][0],
            x[0] * m[0][1] + x[1] * m[1][1] + x[2] * m[2][1],
            x[0] * m[0][2] + x[1] * m[1][2] + x[2] * m[2][2],
        ]
    }

    /// Distance between adjacent lattice planes perpendicular to each
    /// reciprocal direction: h_k = |det| / |a_i × a_j|. Lower-bounds how far
    /// a k-step image shift moves any point.
    pub fn plane_spacings(&self) -> [f64; 3] {
        let a = &self.vectors;
        [
            self.det / norm3(cross3(a[1], a[2])),
            self.det / norm3(cross3(a[2], a[0])),
            self.det / norm3(cross3(a[0], a[1])),
        ]
    }

    pub fn min_vector_length(&self) -> f64 {
        self.vectors.iter().map(|v| norm3(*v)).fold(f64::INFINITY, f64::min)
    }
}

/// A periodic structure: the unit of prediction.
#[derive(Clone, Debug)]
pub struct Structure {
    pub cell: Cell,
    pub species: Vec<u32>,
    pub positions: Vec<[f64; 3]>,
    pub family: String,
    pub id: String,
}

impl Structure {
    pub fn new(
        cell: Cell,
        species: Vec<u32>,
        positions: Vec<[f64; 3]>,
        family: impl Into<String>,
        id: impl Into<String>,
    ) -> Result<Structure> {
        let family = family.into();
        let id = id.into();
        if species.is_empty() || species.len() != positions.len() {
            return Err(Error::Data(format!(
                "structure '{id}': need |species| == |positions| ≥ 1, got {} and {}",
                species.len(),
                positions.len()
            )));
        }
        if let Some(z) = species.iter().find(|&&z| z < 1 || z > 118) {
            return Err(Error::Data(format!(
                "structure '{id}': atomic number {z} outside [1, 118]"
            )));
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("structure '{id}': non-finite position")));
        }
        if family.is_empty() {
            return Err(Error::Data(format!("structure '{id}': empty family tag")));
        }
        Ok(Structure { cell, species, positions, family, id })
    }

    pub fn n_atoms(&self) -> usize {
        self.species.len()
    }
}

/// Directed periodic edge j → i. `u` is the unit vector from atom i to the
/// selected image of atom j; `shift` is that image's integer lattice offset
/// relative to the stored (unwrapped) position of j.
#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
    pub shift: [i32; 3],
    pub r: f64,
    pub u: [f64; 3],
}

#[derive(Clone, Debug)]
pub struct NeighborGraph {
    pub edges: Vec<Edge>,
    /// offsets[i]..offsets[i+1] indexes the edges targeting atom i
    pub target_offsets: Vec<usize>,
    pub cutoff: f64,
}

impl NeighborGraph {
    pub fn n_atoms(&self) -> usize {
        self.target_offsets.len() - 1
    }

    pub fn edge_range(&self, target: usize) -> std::ops::Range<usize> {
        self.target_offsets[target]..self.target_offsets[target + 1]
    }

    pub fn in_degree(&self, target: usize) -> usize {
        self.edge_range(target).len()
    }
}

pub const DEFAULT_CUTOFF_SAFETY_FACTOR: f64 = 3.0;

/// Exact periodic neighbor search by supercell enumeration: every image pair
/// with 0 < distance ≤ cutoff appears exactly once, in canonical
/// (target, source, shift) order.
pub fn build_neighbor_list(structure: &Structure, cutoff: f64) -> Result<NeighborGraph> {
    build_neighbor_list_with_bound(structure, cutoff, DEFAULT_CUTOFF_SAFETY_FACTOR)
}

pub fn build_neighbor_list_with_bound(
    structure: &Structure,
    cutoff: f64,
    safety_factor: f64,
) -> Result<NeighborGraph> {
    if !(cutoff > 0.0) || !cutoff.is_finite() {
        return Err(Error::Data(format!("cutoff must be positive and finite, got {cutoff}")));
    }
    let bound = safety_factor * structure.cell.min_vector_length();
    if cutoff > bound {
        return Err(Error::Data(format!(
            "cutoff {cutoff} Å exceeds the safety bound {bound:.3} Å \
             ({safety_factor}× the shortest lattice vector); raise the bound \
             explicitly if the supercell enumeration cost is acceptable"
        )));
    }

    let n = structure.n_atoms();
    let cell = &structure.cell;

    // Wrap positions into the unit cell so the shift bound derived from plane
    // spacings is valid, remembering each atom's integer wrap offset so edge
    // shifts can be re-based to the caller's unwrapped coordinates.
    let mut wrapped = Vec::with_capacity(n);
    let mut wrap_offsets = Vec::with_capacity(n);
    for &x in &structure.positions {
        let f = cell.to_fractional(x);
        let w = [f[0].floor(), f[1].floor(), f[2].floor()];
        if w == [0.0; 3] {
            // already in-cell: keep the exact caller coordinates (no
            // fractional round-trip jitter)
            wrapped.push(x);
        } else {
            wrapped.push(cell.to_cartesian([f[0] - w[0], f[1] - w[1], f[2] - w[2]]));
        }
        wrap_offsets.push([w[0] as i64, w[1] as i64, w[2] as i64]);
    }

    // With both endpoints wrapped, the fractional separation lies in (-1, 1)
    // per axis, so a shift n with (|n| - 1) · h_k > cutoff cannot reach.
    let h = cell.plane_spacings();
    let n_max: [i64; 3] = [
        (cutoff / h[0]).floor() as i64 + 1,
        (cutoff / h[1]).floor() as i64 + 1,
        (cutoff / h[2]).floor() as i64 + 1,
    ];

    let mut edges = Vec::new();
    for target in 0..n {
        for source in 0..n {
            let base = [
                wrapped[source][0] - wrapped[target][0],
                wrapped[source][1] - wrapped[target][1],
                wrapped[source][2] - wrapped[target][2],
            ];
            for s0 in -n_max[0]..=n_max[0] {
                for s1 in -n_max[1]..=n_max[1] {
                    for s2 in -n_max[2]..=n_max[2] {
                        if source == target && s0 == 0 && s1 == 0 && s2 == 0 {
                            continue;
                        }
                        let t = cell.to_cartesian([s0 as f64, s1 as f64, s2 as f64]);
                        let v = [base[0] + t[0], base[1] + t[1], base[2] + t[2]];
                        let r = norm3(v);
                        if r > 0.0 && r <= cutoff {
                            let rebased = [
                                s0 + wrap_offsets[target][0] - wrap_offsets[source][0],
                                s1 + wrap_offsets[target][1] - wrap_offsets[source][1],
                                s2 + wrap_offsets[target][2] - wrap_offsets[source][2],
                            ];
                            let shift = [rebased[0] as i32, rebased[1] as i32, rebased[2] as i32];
                            edges.push(Edge {
                                source,
                                target,
                                shift,
                                r,
                                u: [v[0] / r, v[1] / r, v[2] / r],
                            });
                        }
                    }
                }
            }
        }
    }

    edges.sort_by(|a, b| {
        (a.target, a.source, a.shift).partial_cmp(&(b.target, b.source, b.shift)).unwrap()
    });

    let mut target_offsets = vec![0usize; n + 1];
    for e in &edges {
        target_offsets[e.target + 1] += 1;
    }
    for i in 0..n {
        target_offsets[i + 1] += target_offsets[i];
    }

    Ok(NeighborGraph { edges, target_offsets, cutoff })
}

/// One angular triplet (j, i, k): `edge` is j→i, `other` is k→i, and `theta`
/// is the angle at the center atom i between the two image directions.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub edge: usize,
    pub other: usize,
    pub theta: f64,
}

#[derive(Clone, Debug)]
pub struct TripletSet {
    pub triplets: Vec<Triplet>,
    /// edge_offsets[e]..edge_offsets[e+1] indexes the triplets of edge e
    pub edge_offsets: Vec<usize>,
}

impl TripletSet {
    pub fn of_edge(&self, edge: usize) -> &[Triplet] {
        &self.triplets[self.edge_offsets[edge]..self.edge_offsets[edge + 1]]
    }

    pub fn total(&self) -> usize {
        self.triplets.len()
    }
}

/// For each edge j→i, list every other edge k→i once with the angle θ_jik.
/// An edge whose center has in-degree 1 gets an empty list.
pub fn enumerate_triplets(graph: &NeighborGraph) -> TripletSet {
    let mut triplets = Vec::new();
    let mut edge_offsets = Vec::with_capacity(graph.edges.len() + 1);
    edge_offsets.push(0);
    for i in 0..graph.n_atoms() {
        let range = graph.edge_range(i);
        for e in range.clone() {
            for o in range.clone() {
                if o == e {
                    continue;
                }
                let c = dot3(graph.edges[e].u, graph.edges[o].u).clamp(-1.0, 1.0);
                triplets.push(Triplet { edge: e, other: o, theta: c.acos() });
            }
            edge_offsets.push(triplets.len());
        }
    }
    TripletSet { triplets, edge_offsets }
}
