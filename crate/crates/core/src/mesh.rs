//! Admissible tetrahedral meshes with face adjacency and boundary classification.
//!
//! A [`TetMesh`] is immutable once built. Every face carries one fixed normal
//! `n_σ`: on the boundary it is the outer normal, on an interior face it
//! points out of the lower-numbered incident element (the *owner*) into the
//! higher-numbered one (the *neighbor*). Jumps `⟦g⟧ = g⁺ − g⁻` are taken
//! relative to this normal, so `g⁻` is always the owner value.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use log::debug;
use nalgebra::Vector3;
use thiserror::Error;

use crate::spaces::CrField;

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("tetrahedron {tet} references vertex {vertex}, but only {count} vertices exist")]
    IndexOutOfRange { tet: usize, vertex: usize, count: usize },
    #[error("tetrahedron {tet} is degenerate (volume {volume:e})")]
    Degenerate { tet: usize, volume: f64 },
    #[error("tetrahedron {tet} repeats vertex {vertex}")]
    RepeatedVertex { tet: usize, vertex: usize },
    #[error("malformed connectivity: face {vertices:?} is shared by more than two tetrahedra")]
    Malformed { vertices: [usize; 3] },
    #[error("mesh file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone)]
pub struct Face {
    /// Sorted vertex triple; the face identity.
    pub vertices: [usize; 3],
    pub area: f64,
    /// Fixed unit normal `n_σ`, outward from `owner`.
    pub normal: Vec3,
    pub barycenter: Vec3,
    pub owner: usize,
    pub neighbor: Option<usize>,
}

impl Face {
    pub fn is_interior(&self) -> bool {
        self.neighbor.is_some()
    }

    /// `+1` if `n_σ` is outward from `elem`, `-1` if inward.
    ///
    /// Panics if `elem` is not incident to the face.
    pub fn orientation(&self, elem: usize) -> f64 {
        if elem == self.owner {
            1.0
        } else if self.neighbor == Some(elem) {
            -1.0
        } else {
            panic!("element {elem} is not incident to face {:?}", self.vertices)
        }
    }

    /// The element on the other side, if any.
    pub fn other(&self, elem: usize) -> Option<usize> {
        if elem == self.owner {
            self.neighbor
        } else {
            Some(self.owner)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Element {
    pub vertices: [usize; 4],
    /// `faces[i]` is the face opposite local vertex `i`.
    pub faces: [usize; 4],
    pub volume: f64,
    pub barycenter: Vec3,
    pub diameter: f64,
    pub inradius: f64,
}

#[derive(Debug, Clone)]
pub struct TetMesh {
    pub vertices: Vec<Vec3>,
    pub elements: Vec<Element>,
    pub faces: Vec<Face>,
    interior: Vec<usize>,
    boundary: Vec<usize>,
    interior_index: Vec<Option<usize>>,
    h: f64,
    inradius_min: f64,
}

const FACE_OF_VERTEX: [[usize; 3]; 4] = [[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]];

fn signed_volume(p: &[Vec3; 4]) -> f64 {
    (p[1] - p[0]).cross(&(p[2] - p[0])).dot(&(p[3] - p[0])) / 6.0
}

fn sorted3(mut v: [usize; 3]) -> [usize; 3] {
    v.sort_unstable();
    v
}

/// Builds a mesh from raw coordinates and tetrahedra (zero-based indices).
///
/// Negatively oriented tetrahedra are silently flipped.
pub fn build_mesh(vertices: Vec<Vec3>, tets: &[[usize; 4]]) -> Result<TetMesh, MeshError> {
    let nv = vertices.len();
    let scale = bounding_box_diameter(&vertices).max(f64::MIN_POSITIVE);

    let mut oriented = Vec::with_capacity(tets.len());
    for (t, tet) in tets.iter().enumerate() {
        for &v in tet {
            if v >= nv {
                return Err(MeshError::IndexOutOfRange { tet: t, vertex: v, count: nv });
            }
        }
        for i in 0..4 {
            for j in i + 1..4 {
                if tet[i] == tet[j] {
                    return Err(MeshError::RepeatedVertex { tet: t, vertex: tet[i] });
                }
            }
        }
        let p = tet.map(|v| vertices[v]);
        let vol = signed_volume(&p);
        if vol.abs() <= 1e-14 * scale.powi(3) {
            return Err(MeshError::Degenerate { tet: t, volume: vol });
        }
        let mut tet = *tet;
        if vol < 0.0 {
            tet.swap(2, 3);
        }
        oriented.push(tet);
    }

    let mut face_map: HashMap<[usize; 3], usize> = HashMap::new();
    let mut faces: Vec<Face> = Vec::new();
    let mut elements = Vec::with_capacity(oriented.len());

    for (k, tet) in oriented.iter().enumerate() {
        let p = tet.map(|v| vertices[v]);
        let volume = signed_volume(&p);
        let barycenter = (p[0] + p[1] + p[2] + p[3]) / 4.0;
        let mut diameter: f64 = 0.0;
        for i in 0..4 {
            for j in i + 1..4 {
                diameter = diameter.max((p[i] - p[j]).norm());
            }
        }
        let mut local_faces = [0usize; 4];
        let mut surface = 0.0;
        for (i, local) in FACE_OF_VERTEX.iter().enumerate() {
            let key = sorted3(local.map(|l| tet[l]));
            let (a, b, c) = (p[local[0]], p[local[1]], p[local[2]]);
            let cross = (b - a).cross(&(c - a));
            let area = 0.5 * cross.norm();
            surface += area;
            match face_map.get(&key) {
                Some(&f) => {
                    let face = &mut faces[f];
                    if face.neighbor.is_some() {
                        return Err(MeshError::Malformed { vertices: key });
                    }
                    // Owner is always the lower element id because elements
                    // are visited in increasing order.
                    face.neighbor = Some(k);
                    local_faces[i] = f;
                }
                None => {
                    let mut normal = cross / cross.norm();
                    if normal.dot(&(p[i] - a)) > 0.0 {
                        normal = -normal;
                    }
                    let f = faces.len();
                    faces.push(Face {
                        vertices: key,
                        area,
                        normal,
                        barycenter: (a + b + c) / 3.0,
                        owner: k,
                        neighbor: None,
                    });
                    face_map.insert(key, f);
                    local_faces[i] = f;
                }
            }
        }
        elements.push(Element {
            vertices: *tet,
            faces: local_faces,
            volume,
            barycenter,
            diameter,
            inradius: 3.0 * volume / surface,
        });
    }

    let mut interior = Vec::new();
    let mut boundary = Vec::new();
    let mut interior_index = vec![None; faces.len()];
    for (f, face) in faces.iter().enumerate() {
        if face.is_interior() {
            interior_index[f] = Some(interior.len());
            interior.push(f);
        } else {
            boundary.push(f);
        }
    }
    let h = elements.iter().map(|e| e.diameter).fold(0.0, f64::max);
    let inradius_min = elements.iter().map(|e| e.inradius).fold(f64::INFINITY, f64::min);

    Ok(TetMesh { vertices, elements, faces, interior, boundary, interior_index, h, inradius_min })
}

fn bounding_box_diameter(vertices: &[Vec3]) -> f64 {
    if vertices.is_empty() {
        return 0.0;
    }
    let mut lo = vertices[0];
    let mut hi = vertices[0];
    for v in vertices {
        lo = lo.inf(v);
        hi = hi.sup(v);
    }
    (hi - lo).norm()
}

/// Kuhn (Freudenthal) split of an axis-aligned box: every cube is cut into
/// six tetrahedra sharing its main diagonal, which keeps the mesh conforming
/// across cubes.
pub fn structured_box_mesh(n: [usize; 3], lo: Vec3, hi: Vec3) -> TetMesh {
    assert!(n.iter().all(|&c| c >= 1), "box mesh needs at least one cell per direction");
    let [nx, ny, nz] = n;
    let idx = |i: usize, j: usize, k: usize| i + (nx + 1) * (j + (ny + 1) * k);
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1) * (nz + 1));
    for k in 0..=nz {
        for j in 0..=ny {
            for i in 0..=nx {
                let t = Vec3::new(i as f64 / nx as f64, j as f64 / ny as f64, k as f64 / nz as f64);
                vertices.push(lo + (hi - lo).component_mul(&t));
            }
        }
    }
    const PERMS: [[usize; 3]; 6] =
        [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut tets = Vec::with_capacity(6 * nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                for perm in PERMS {
                    let mut c = [i, j, k];
                    let mut tet = [idx(c[0], c[1], c[2]); 4];
                    for (step, &axis) in perm.iter().enumerate() {
                        c[axis] += 1;
                        tet[step + 1] = idx(c[0], c[1], c[2]);
                    }
                    tets.push(tet);
                }
            }
        }
    }
    build_mesh(vertices, &tets).expect("structured box mesh is always admissible")
}

/// Unit cube `[0,1]³` with `n` cells per direction.
pub fn unit_cube(n: usize) -> TetMesh {
    structured_box_mesh([n, n, n], Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0))
}

impl TetMesh {
    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn interior_faces(&self) -> &[usize] {
        &self.interior
    }

    pub fn boundary_faces(&self) -> &[usize] {
        &self.boundary
    }

    /// Position of `face` in [`Self::interior_faces`], `None` on the boundary.
    pub fn interior_index(&self, face: usize) -> Option<usize> {
        self.interior_index[face]
    }

    /// Mesh size `h = max h_K`.
    pub fn h(&self) -> f64 {
        self.h
    }

    /// Smallest inradius over all elements.
    pub fn inradius_min(&self) -> f64 {
        self.inradius_min
    }

    /// Shape-regularity ratio `h / 𝔥`.
    pub fn shape_ratio(&self) -> f64 {
        self.h / self.inradius_min
    }

    pub fn total_volume(&self) -> f64 {
        self.elements.iter().map(|e| e.volume).sum()
    }

    /// Outward unit normal of `face` with respect to `elem`.
    pub fn normal_from(&self, face: usize, elem: usize) -> Vec3 {
        self.faces[face].normal * self.faces[face].orientation(elem)
    }

    pub fn element_points(&self, elem: usize) -> [Vec3; 4] {
        self.elements[elem].vertices.map(|v| self.vertices[v])
    }

    pub fn face_points(&self, face: usize) -> [Vec3; 3] {
        self.faces[face].vertices.map(|v| self.vertices[v])
    }

    /// Local slot (0..4) of `face` within `elem`.
    pub fn local_face_index(&self, elem: usize, face: usize) -> Option<usize> {
        self.elements[elem].faces.iter().position(|&f| f == face)
    }

    /// `Σ_σ |σ| n_{σ,K}` for one element; zero up to rounding.
    pub fn closure_defect(&self, elem: usize) -> Vec3 {
        self.elements[elem]
            .faces
            .iter()
            .map(|&f| self.normal_from(f, elem) * self.faces[f].area)
            .sum()
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, MeshError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| MeshError::Io { path: path.display().to_string(), source })?;
        parse_mesh(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), MeshError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text())
            .map_err(|source| MeshError::Io { path: path.display().to_string(), source })
    }

    /// Serializes to the plain-text mesh format read by [`parse_mesh`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} {}", self.vertices.len(), self.elements.len());
        for v in &self.vertices {
            let _ = writeln!(out, "{:e} {:e} {:e}", v.x, v.y, v.z);
        }
        for e in &self.elements {
            let t = e.vertices;
            let _ = writeln!(out, "{} {} {} {}", t[0], t[1], t[2], t[3]);
        }
        out
    }
}

/// Parses the plain-text mesh format: a header line `nv nt`, then `nv` lines of
/// three coordinates, then `nt` lines of four zero-based vertex indices.
/// Everything after `#` on a line is ignored.
pub fn parse_mesh(text: &str) -> Result<TetMesh, MeshError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());

    let parse_err = |line: usize, message: String| MeshError::Parse { line, message };
    let (hline, header) = lines.next().ok_or_else(|| parse_err(0, "empty mesh file".into()))?;
    let counts: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| parse_err(hline, format!("bad header: {e}")))?;
    let [nv, nt] = counts[..] else {
        return Err(parse_err(hline, "header must be `nv nt`".into()));
    };

    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (ln, l) = lines.next().ok_or_else(|| parse_err(0, "unexpected end of file in vertex block".into()))?;
        let c: Vec<f64> = l
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| parse_err(ln, format!("bad coordinate: {e}")))?;
        let [x, y, z] = c[..] else {
            return Err(parse_err(ln, "expected 3 coordinates".into()));
        };
        vertices.push(Vec3::new(x, y, z));
    }
    let mut tets = Vec::with_capacity(nt);
    for _ in 0..nt {
        let (ln, l) = lines.next().ok_or_else(|| parse_err(0, "unexpected end of file in element block".into()))?;
        let c: Vec<usize> = l
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| parse_err(ln, format!("bad vertex index: {e}")))?;
        let [a, b, cc, d] = c[..] else {
            return Err(parse_err(ln, "expected 4 vertex indices".into()));
        };
        tets.push([a, b, cc, d]);
    }
    if let Some((ln, _)) = lines.next() {
        return Err(parse_err(ln, "trailing data after element block".into()));
    }
    build_mesh(vertices, &tets)
}

/// Inflow/outflow partition of the boundary faces.
#[derive(Debug, Clone)]
pub struct BoundaryClassification {
    pub inflow: Vec<usize>,
    pub outflow: Vec<usize>,
    is_inflow: Vec<bool>,
    /// Boundary faces whose vertex-sampled normal velocity changes sign.
    pub sign_changing: Vec<usize>,
}

impl BoundaryClassification {
    pub fn is_inflow(&self, face: usize) -> bool {
        self.is_inflow[face]
    }
}

/// Splits the boundary into `E_in = {σ : u_{B,σ}·n_σ < 0}` and its
/// complement. Zero normal flux counts as outflow.
pub fn classify_boundary(mesh: &TetMesh, u_b: &CrField) -> BoundaryClassification {
    let mut inflow = Vec::new();
    let mut outflow = Vec::new();
    let mut sign_changing = Vec::new();
    let mut is_inflow = vec![false; mesh.num_faces()];
    for &f in mesh.boundary_faces() {
        let face = &mesh.faces[f];
        let un = u_b.values[f].dot(&face.normal);
        if un < 0.0 {
            inflow.push(f);
            is_inflow[f] = true;
        } else {
            outflow.push(f);
        }
        let samples = face.vertices.map(|v| u_b.evaluate(mesh, face.owner, &mesh.vertices[v]).dot(&face.normal));
        let tol = 1e-12 * samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        let pos = samples.iter().any(|&s| s > tol);
        let neg = samples.iter().any(|&s| s < -tol);
        if pos && neg {
            sign_changing.push(f);
        }
    }
    if !sign_changing.is_empty() {
        debug!(
            "{} boundary faces have a sign change of u_B·n inside the face; classified by face mean",
            sign_changing.len()
        );
    }
    BoundaryClassification { inflow, outflow, is_inflow, sign_changing }
}
