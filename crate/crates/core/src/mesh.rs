//! Conforming triangular meshes.
//!
//! Meshes come from two places: the structured unit-square generator used by
//! the convergence study and the GMSH ASCII reader used for the offset
//! cylinder. Both end up in [`Mesh::new`], which orients every triangle
//! counterclockwise, builds the unique edge list (the P2 midpoint registry)
//! and tags the boundary edges.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

/// A point in the plane.
pub type Point = [f64; 2];

/// Tag given to boundary edges that carry no physical group.
pub const UNTAGGED: i32 = 0;

#[derive(thiserror::Error, Debug)]
pub enum MeshError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported MSH format version {0} (supported: 2.2, 4.1)")]
    UnsupportedVersion(String),
    #[error("binary MSH files are not supported")]
    BinaryFormat,
    #[error("line {line}: unsupported element type {element_type}; only 2-node lines and 3-node triangles are accepted")]
    UnsupportedElement { line: usize, element_type: i64 },
    #[error("mesh has no triangles")]
    Empty,
    #[error("triangle {0} has zero area")]
    DegenerateTriangle(usize),
    #[error("triangle {triangle} references node {node} out of range")]
    NodeOutOfRange { triangle: usize, node: usize },
    #[error("edge ({0}, {1}) is shared by more than two triangles")]
    NonManifoldEdge(usize, usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Size and shape diagnostics of a mesh.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshQuality {
    /// Largest element diameter (longest edge).
    pub h_max: f64,
    /// Characteristic size: `1/m` for structured meshes, the target size for
    /// unstructured ones.
    pub h_char: f64,
    /// Smallest interior angle, in degrees.
    pub min_angle: f64,
}

#[derive(Debug, Clone)]
pub struct Mesh {
    nodes: Vec<Point>,
    triangles: Vec<[usize; 3]>,
    edges: Vec<[usize; 2]>,
    triangle_edges: Vec<[usize; 3]>,
    edge_triangles: Vec<u8>,
    boundary_tags: BTreeMap<usize, i32>,
    physical_names: BTreeMap<i32, String>,
    h_char: f64,
}

/// Boundary degrees-of-freedom locations of the P2 space, with their tags.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BoundaryDofs {
    /// Boundary vertices.
    pub vertices: BTreeMap<usize, i32>,
    /// Boundary edges, whose midpoints carry a P2 node.
    pub edges: BTreeMap<usize, i32>,
}

impl BoundaryDofs {
    pub fn len(&self) -> usize {
        self.vertices.len() + self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty() && self.edges.is_empty()
    }

    /// Node ids in the P2 numbering (vertices first, then edge midpoints).
    pub fn p2_nodes(&self, num_vertices: usize) -> BTreeSet<usize> {
        self.vertices
            .keys()
            .copied()
            .chain(self.edges.keys().map(|e| num_vertices + e))
            .collect()
    }
}

fn signed_area(a: Point, b: Point, c: Point) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn edge_key(a: usize, b: usize) -> [usize; 2] {
    if a < b {
        [a, b]
    } else {
        [b, a]
    }
}

impl Mesh {
    /// Builds a mesh from raw nodes and triangles.
    ///
    /// Clockwise triangles are reoriented. `boundary_hint` carries tags for
    /// boundary edges (by endpoint pair, any order); boundary edges not listed
    /// get [`UNTAGGED`]. Hints for interior edges are ignored.
    pub fn new(
        nodes: Vec<Point>,
        triangles: Vec<[usize; 3]>,
        boundary_hint: &[([usize; 2], i32)],
    ) -> Result<Self, MeshError> {
        if triangles.is_empty() {
            return Err(MeshError::Empty);
        }
        let mut triangles = triangles;
        let scale = nodes
            .iter()
            .fold(0.0_f64, |acc, p| acc.max(p[0].abs()).max(p[1].abs()))
            .max(1.0);
        for (t, tri) in triangles.iter_mut().enumerate() {
            for &n in tri.iter() {
                if n >= nodes.len() {
                    return Err(MeshError::NodeOutOfRange { triangle: t, node: n });
                }
            }
            let area = signed_area(nodes[tri[0]], nodes[tri[1]], nodes[tri[2]]);
            if area.abs() <= 1e-14 * scale * scale {
                return Err(MeshError::DegenerateTriangle(t));
            }
            if area < 0.0 {
                tri.swap(1, 2);
            }
        }

        let mut edge_index: HashMap<[usize; 2], usize> = HashMap::new();
        let mut edges = Vec::new();
        let mut edge_triangles: Vec<u8> = Vec::new();
        let mut triangle_edges = Vec::with_capacity(triangles.len());
        for tri in &triangles {
            let mut local = [0usize; 3];
            for k in 0..3 {
                let key = edge_key(tri[k], tri[(k + 1) % 3]);
                let idx = *edge_index.entry(key).or_insert_with(|| {
                    edges.push(key);
                    edge_triangles.push(0);
                    edges.len() - 1
                });
                edge_triangles[idx] += 1;
                if edge_triangles[idx] > 2 {
                    return Err(MeshError::NonManifoldEdge(key[0], key[1]));
                }
                local[k] = idx;
            }
            triangle_edges.push(local);
        }

        let hints: HashMap<[usize; 2], i32> = boundary_hint
            .iter()
            .map(|(e, tag)| (edge_key(e[0], e[1]), *tag))
            .collect();
        let boundary_tags = edges
            .iter()
            .enumerate()
            .filter(|(i, _)| edge_triangles[*i] == 1)
            .map(|(i, e)| (i, hints.get(e).copied().unwrap_or(UNTAGGED)))
            .collect();

        let mut mesh = Mesh {
            nodes,
            triangles,
            edges,
            triangle_edges,
            edge_triangles,
            boundary_tags,
            physical_names: BTreeMap::new(),
            h_char: 0.0,
        };
        mesh.h_char = mesh.h_max();
        Ok(mesh)
    }

    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    /// Unique edges as sorted endpoint pairs.
    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    /// Edge ids of each triangle; local edge `k` joins local vertices `k` and `k+1`.
    pub fn triangle_edges(&self) -> &[[usize; 3]] {
        &self.triangle_edges
    }

    /// Tags of boundary edges, keyed by edge id.
    pub fn boundary_tags(&self) -> &BTreeMap<usize, i32> {
        &self.boundary_tags
    }

    pub fn physical_names(&self) -> &BTreeMap<i32, String> {
        &self.physical_names
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn is_boundary_edge(&self, edge: usize) -> bool {
        self.edge_triangles[edge] == 1
    }

    pub fn edge_midpoint(&self, edge: usize) -> Point {
        let [a, b] = self.edges[edge];
        let (p, q) = (self.nodes[a], self.nodes[b]);
        [0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])]
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        signed_area(self.nodes[a], self.nodes[b], self.nodes[c])
    }

    pub fn area(&self) -> f64 {
        (0..self.num_triangles()).map(|t| self.triangle_area(t)).sum()
    }

    pub fn h_max(&self) -> f64 {
        self.edges
            .iter()
            .map(|&[a, b]| dist(self.nodes[a], self.nodes[b]))
            .fold(0.0, f64::max)
    }

    /// Overrides the characteristic size (e.g. with the GMSH target size `lc`).
    pub fn with_h_char(mut self, h: f64) -> Self {
        self.h_char = h;
        self
    }

    pub fn h_char(&self) -> f64 {
        self.h_char
    }

    pub fn quality(&self) -> MeshQuality {
        let mut min_angle = f64::INFINITY;
        for tri in &self.triangles {
            for k in 0..3 {
                let p = self.nodes[tri[k]];
                let a = self.nodes[tri[(k + 1) % 3]];
                let b = self.nodes[tri[(k + 2) % 3]];
                let u = [a[0] - p[0], a[1] - p[1]];
                let v = [b[0] - p[0], b[1] - p[1]];
                let cos = (u[0] * v[0] + u[1] * v[1]) / (u[0].hypot(u[1]) * v[0].hypot(v[1]));
                min_angle = min_angle.min(cos.clamp(-1.0, 1.0).acos().to_degrees());
            }
        }
        MeshQuality {
            h_max: self.h_max(),
            h_char: self.h_char,
            min_angle,
        }
    }

    /// Checks every structural invariant. Meshes built through [`Mesh::new`]
    /// always pass; this exists for tests and for `check-mesh`.
    pub fn validate(&self) -> Result<(), MeshError> {
        let mut counts: HashMap<[usize; 2], u8> = HashMap::new();
        for (t, tri) in self.triangles.iter().enumerate() {
            if tri.iter().any(|&n| n >= self.nodes.len()) {
                return Err(MeshError::NodeOutOfRange {
                    triangle: t,
                    node: *tri.iter().max().unwrap(),
                });
            }
            if self.triangle_area(t) <= 0.0 {
                return Err(MeshError::DegenerateTriangle(t));
            }
            for k in 0..3 {
                let c = counts.entry(edge_key(tri[k], tri[(k + 1) % 3])).or_insert(0);
                *c += 1;
                if *c > 2 {
                    return Err(MeshError::NonManifoldEdge(tri[k], tri[(k + 1) % 3]));
                }
            }
        }
        let boundary: BTreeSet<usize> = self
            .edges
            .iter()
            .enumerate()
            .filter(|(_, e)| counts.get(*e) == Some(&1))
            .map(|(i, _)| i)
            .collect();
        let tagged: BTreeSet<usize> = self.boundary_tags.keys().copied().collect();
        if boundary != tagged || counts.len() != self.edges.len() {
            return Err(MeshError::InvalidArgument(
                "boundary tags do not match the boundary edges".into(),
            ));
        }
        Ok(())
    }

    /// Retags boundary edges with a geometric predicate applied to both
    /// endpoints. The first tag whose predicate accepts both endpoints wins;
    /// edges matched by no predicate keep their current tag.
    pub fn classify_boundary(&mut self, predicates: &[(i32, &dyn Fn(Point) -> bool)]) {
        for (&edge, tag) in self.boundary_tags.iter_mut() {
            let [a, b] = self.edges[edge];
            let (p, q) = (self.nodes[a], self.nodes[b]);
            if let Some((t, _)) = predicates.iter().find(|(_, f)| f(p) && f(q)) {
                *tag = *t;
            }
        }
    }

    /// Boundary vertices and boundary edges (P2 midpoints), each with a tag.
    /// A vertex takes the tag of its lowest-numbered boundary edge.
    pub fn boundary_dofs(&self) -> BoundaryDofs {
        let mut out = BoundaryDofs::default();
        for (&edge, &tag) in &self.boundary_tags {
            out.edges.insert(edge, tag);
            for &v in &self.edges[edge] {
                out.vertices.entry(v).or_insert(tag);
            }
        }
        out
    }

    /// Plain-text dump: node list, triangle list, tagged boundary edges.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "nodes {}", self.nodes.len());
        for p in &self.nodes {
            let _ = writeln!(s, "{:.17e} {:.17e}", p[0], p[1]);
        }
        let _ = writeln!(s, "triangles {}", self.triangles.len());
        for t in &self.triangles {
            let _ = writeln!(s, "{} {} {}", t[0], t[1], t[2]);
        }
        let _ = writeln!(s, "boundary {}", self.boundary_tags.len());
        for (&e, &tag) in &self.boundary_tags {
            let [a, b] = self.edges[e];
            let _ = writeln!(s, "{a} {b} {tag}");
        }
        s
    }

    /// Reads the format written by [`Mesh::to_text`]. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn from_text(text: &str) -> Result<Self, MeshError> {
        let lines: Vec<(usize, &str)> = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
            .collect();
        let mut cursor = lines.iter().copied();
        let last_line = lines.last().map_or(0, |l| l.0);
        let mut next = || {
            cursor.next().ok_or(MeshError::Parse {
                line: last_line,
                message: "unexpected end of file".into(),
            })
        };
        fn header(line: usize, l: &str, name: &str) -> Result<usize, MeshError> {
            l.strip_prefix(name)
                .and_then(|r| r.trim().parse().ok())
                .ok_or(MeshError::Parse {
                    line,
                    message: format!("expected '{name} <count>'"),
                })
        }
        fn fields<T: std::str::FromStr>(line: usize, l: &str, n: usize) -> Result<Vec<T>, MeshError> {
            let v: Result<Vec<T>, _> = l.split_whitespace().map(str::parse).collect();
            match v {
                Ok(v) if v.len() == n => Ok(v),
                _ => Err(MeshError::Parse {
                    line,
                    message: format!("expected {n} fields"),
                }),
            }
        }

        let (line, l) = next()?;
        let n_nodes = header(line, l, "nodes")?;
        let mut nodes = Vec::with_capacity(n_nodes);
        for _ in 0..n_nodes {
            let (line, l) = next()?;
            let v: Vec<f64> = fields(line, l, 2)?;
            nodes.push([v[0], v[1]]);
        }
        let (line, l) = next()?;
        let n_tri = header(line, l, "triangles")?;
        let mut triangles = Vec::with_capacity(n_tri);
        for _ in 0..n_tri {
            let (line, l) = next()?;
            let v: Vec<usize> = fields(line, l, 3)?;
            triangles.push([v[0], v[1], v[2]]);
        }
        let mut hints = Vec::new();
        if let Ok((line, l)) = next() {
            let n_b = header(line, l, "boundary")?;
            for _ in 0..n_b {
                let (line, l) = next()?;
                let v: Vec<i64> = fields(line, l, 3)?;
                hints.push(([v[0] as usize, v[1] as usize], v[2] as i32));
            }
        }
        Mesh::new(nodes, triangles, &hints)
    }
}

/// Structured mesh of the unit square with `m` cells per side; every cell is
/// split along its lower-left to upper-right diagonal.
///
/// Boundary tags: 1 bottom, 2 right, 3 top, 4 left.
pub fn generate_unit_square(m: usize) -> Result<Mesh, MeshError> {
    if m == 0 {
        return Err(MeshError::InvalidArgument("m must be at least 1".into()));
    }
    let n = m + 1;
    let id = |i: usize, j: usize| j * n + i;
    let nodes = (0..n)
        .flat_map(|j| (0..n).map(move |i| [i as f64 / m as f64, j as f64 / m as f64]))
        .collect();
    let mut triangles = Vec::with_capacity(2 * m * m);
    for j in 0..m {
        for i in 0..m {
            let (p00, p10, p01, p11) = (id(i, j), id(i + 1, j), id(i, j + 1), id(i + 1, j + 1));
            triangles.push([p00, p10, p11]);
            triangles.push([p00, p11, p01]);
        }
    }
    let mut hints = Vec::with_capacity(4 * m);
    for k in 0..m {
        hints.push(([id(k, 0), id(k + 1, 0)], 1));
        hints.push(([id(m, k), id(m, k + 1)], 2));
        hints.push(([id(k, m), id(k + 1, m)], 3));
        hints.push(([id(0, k), id(0, k + 1)], 4));
    }
    Ok(Mesh::new(nodes, triangles, &hints)?.with_h_char(1.0 / m as f64))
}

/// Reads a GMSH file from disk.
pub fn read_gmsh(path: impl AsRef<Path>) -> Result<Mesh, MeshError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| MeshError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_gmsh(&text)
}

struct Section<'a> {
    name: &'a str,
    header_line: usize,
    body: Vec<(usize, &'a str)>,
}

impl Section<'_> {
    fn tokens(&self) -> Tokens<'_> {
        Tokens {
            items: self
                .body
                .iter()
                .flat_map(|&(line, l)| l.split_whitespace().map(move |t| (line, t)))
                .collect(),
            pos: 0,
            end_line: self.header_line + self.body.len() + 1,
        }
    }
}

struct Tokens<'a> {
    items: Vec<(usize, &'a str)>,
    pos: usize,
    end_line: usize,
}

impl Tokens<'_> {
    fn next_raw(&mut self, what: &str) -> Result<(usize, &str), MeshError> {
        let t = self.items.get(self.pos).copied().ok_or(MeshError::Parse {
            line: self.end_line,
            message: format!("unexpected end of section, expected {what}"),
        })?;
        self.pos += 1;
        Ok(t)
    }

    fn int(&mut self, what: &str) -> Result<i64, MeshError> {
        let (line, t) = self.next_raw(what)?;
        t.parse().map_err(|_| MeshError::Parse {
            line,
            message: format!("expected integer {what}, found '{t}'"),
        })
    }

    fn count(&mut self, what: &str) -> Result<usize, MeshError> {
        let (line, t) = self.next_raw(what)?;
        t.parse().map_err(|_| MeshError::Parse {
            line,
            message: format!("expected count {what}, found '{t}'"),
        })
    }

    fn real(&mut self, what: &str) -> Result<f64, MeshError> {
        let (line, t) = self.next_raw(what)?;
        t.parse().map_err(|_| MeshError::Parse {
            line,
            message: format!("expected number {what}, found '{t}'"),
        })
    }

    fn line(&self) -> usize {
        self.items.get(self.pos).map_or(self.end_line, |t| t.0)
    }
}

fn split_sections(text: &str) -> Result<Vec<Section<'_>>, MeshError> {
    let mut sections = Vec::new();
    let mut current: Option<Section> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = raw.trim();
        if let Some(name) = l.strip_prefix("$End") {
            match current.take() {
                Some(s) if s.name == name => sections.push(s),
                Some(s) => {
                    return Err(MeshError::Parse {
                        line,
                        message: format!("'$End{name}' closes section '${}'", s.name),
                    })
                }
                None => {
                    return Err(MeshError::Parse {
                        line,
                        message: format!("'$End{name}' without opening '${name}'"),
                    })
                }
            }
        } else if let Some(name) = l.strip_prefix('$') {
            if let Some(s) = &current {
                return Err(MeshError::Parse {
                    line,
                    message: format!("section '${name}' opened inside unterminated '${}'", s.name),
                });
            }
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(MeshError::Parse {
                    line,
                    message: format!("malformed section header '{l}'"),
                });
            }
            current = Some(Section {
                name,
                header_line: line,
                body: Vec::new(),
            });
        } else if let Some(s) = current.as_mut() {
            if !l.is_empty() {
                s.body.push((line, l));
            }
        } else if !l.is_empty() {
            return Err(MeshError::Parse {
                line,
                message: "content outside of any section".into(),
            });
        }
    }
    if let Some(s) = current {
        return Err(MeshError::Parse {
            line: s.header_line,
            message: format!("section '${}' is never closed", s.name),
        });
    }
    Ok(sections)
}

/// Nodes per element for the element types the reader accepts or skips.
fn element_nodes(element_type: i64) -> Option<usize> {
    match element_type {
        1 => Some(2),
        2 => Some(3),
        15 => Some(1),
        _ => None,
    }
}

#[derive(Default)]
struct RawMesh {
    nodes: BTreeMap<i64, Point>,
    triangles: Vec<[i64; 3]>,
    lines: Vec<([i64; 2], i32)>,
}

/// Parses a GMSH MSH ASCII document (format 2.2 or 4.1).
///
/// Triangles come from 3-node elements and boundary tags from the physical
/// groups of 2-node line elements. Nodes not used by any triangle are dropped.
pub fn parse_gmsh(text: &str) -> Result<Mesh, MeshError> {
    let sections = split_sections(text)?;
    let format = sections
        .iter()
        .find(|s| s.name == "MeshFormat")
        .ok_or(MeshError::Parse {
            line: 1,
            message: "missing $MeshFormat section".into(),
        })?;
    let (fline, fmt) = format.body.first().copied().ok_or(MeshError::Parse {
        line: format.header_line + 1,
        message: "empty $MeshFormat section".into(),
    })?;
    let mut fields = fmt.split_whitespace();
    let version = fields.next().unwrap_or("").to_string();
    let file_type = fields.next().ok_or(MeshError::Parse {
        line: fline,
        message: "missing file type in $MeshFormat".into(),
    })?;
    let v4 = match version.as_str() {
        "2.2" => false,
        "4.1" => true,
        _ => return Err(MeshError::UnsupportedVersion(version)),
    };
    if file_type != "0" {
        return Err(MeshError::BinaryFormat);
    }

    let mut physical_names = BTreeMap::new();
    if let Some(s) = sections.iter().find(|s| s.name == "PhysicalNames") {
        for &(line, l) in s.body.iter().skip(1) {
            let mut it = l.splitn(3, char::is_whitespace);
            let (_dim, tag, name) = (it.next(), it.next(), it.next());
            let tag: i32 = tag.and_then(|t| t.parse().ok()).ok_or(MeshError::Parse {
                line,
                message: "malformed physical name entry".into(),
            })?;
            physical_names.insert(tag, name.unwrap_or("").trim().trim_matches('"').to_string());
        }
    }

    let nodes_sec = sections.iter().find(|s| s.name == "Nodes").ok_or(MeshError::Parse {
        line: format.header_line,
        message: "missing $Nodes section".into(),
    })?;
    let elems_sec = sections.iter().find(|s| s.name == "Elements").ok_or(MeshError::Parse {
        line: nodes_sec.header_line,
        message: "missing $Elements section".into(),
    })?;

    let raw = if v4 {
        let curve_physical = match sections.iter().find(|s| s.name == "Entities") {
            Some(s) => parse_entities_v4(s)?,
            None => HashMap::new(),
        };
        let mut raw = RawMesh::default();
        parse_nodes_v4(nodes_sec, &mut raw)?;
        parse_elements_v4(elems_sec, &curve_physical, &mut raw)?;
        raw
    } else {
        let mut raw = RawMesh::default();
        parse_nodes_v2(nodes_sec, &mut raw)?;
        parse_elements_v2(elems_sec, &mut raw)?;
        raw
    };

    if raw.triangles.is_empty() {
        return Err(MeshError::Empty);
    }
    let used: BTreeSet<i64> = raw.triangles.iter().flatten().copied().collect();
    let mut index = HashMap::with_capacity(used.len());
    let mut nodes = Vec::with_capacity(used.len());
    for tag in &used {
        let p = raw.nodes.get(tag).ok_or(MeshError::Parse {
            line: elems_sec.header_line,
            message: format!("triangle references undefined node {tag}"),
        })?;
        index.insert(*tag, nodes.len());
        nodes.push(*p);
    }
    let triangles = raw
        .triangles
        .iter()
        .map(|t| [index[&t[0]], index[&t[1]], index[&t[2]]])
        .collect();
    let hints: Vec<([usize; 2], i32)> = raw
        .lines
        .iter()
        .filter_map(|([a, b], tag)| Some(([*index.get(a)?, *index.get(b)?], *tag)))
        .collect();
    let mut mesh = Mesh::new(nodes, triangles, &hints)?;
    mesh.physical_names = physical_names;
    Ok(mesh)
}

fn parse_nodes_v2(sec: &Section, raw: &mut RawMesh) -> Result<(), MeshError> {
    let mut tok = sec.tokens();
    let n = tok.count("number of nodes")?;
    for _ in 0..n {
        let tag = tok.int("node tag")?;
        let x = tok.real("x")?;
        let y = tok.real("y")?;
        tok.real("z")?;
        raw.nodes.insert(tag, [x, y]);
    }
    Ok(())
}

fn parse_elements_v2(sec: &Section, raw: &mut RawMesh) -> Result<(), MeshError> {
    for &(line, l) in sec.body.iter().skip(1) {
        let v: Result<Vec<i64>, _> = l.split_whitespace().map(str::parse).collect();
        let v = v.map_err(|_| MeshError::Parse {
            line,
            message: "non-integer field in element".into(),
        })?;
        if v.len() < 3 {
            return Err(MeshError::Parse {
                line,
                message: "element line too short".into(),
            });
        }
        let (ty, ntags) = (v[1], v[2] as usize);
        let nn = element_nodes(ty).ok_or(MeshError::UnsupportedElement {
            line,
            element_type: ty,
        })?;
        if v.len() != 3 + ntags + nn {
            return Err(MeshError::Parse {
                line,
                message: format!("element of type {ty} expects {nn} nodes"),
            });
        }
        let physical = if ntags > 0 { v[3] as i32 } else { UNTAGGED };
        let nodes = &v[3 + ntags..];
        match ty {
            1 => raw.lines.push(([nodes[0], nodes[1]], physical)),
            2 => raw.triangles.push([nodes[0], nodes[1], nodes[2]]),
            _ => {}
        }
    }
    let declared = sec.body.first().and_then(|(_, l)| l.trim().parse::<usize>().ok());
    match declared {
        Some(n) if n == sec.body.len() - 1 => Ok(()),
        _ => Err(MeshError::Parse {
            line: sec.header_line + 1,
            message: "element count does not match the number of element lines".into(),
        }),
    }
}

/// Maps curve entity tags to their first physical tag.
fn parse_entities_v4(sec: &Section) -> Result<HashMap<i64, i32>, MeshError> {
    let mut tok = sec.tokens();
    let n_points = tok.count("number of points")?;
    let n_curves = tok.count("number of curves")?;
    let n_surfaces = tok.count("number of surfaces")?;
    let _n_volumes = tok.count("number of volumes")?;
    for _ in 0..n_points {
        tok.int("point tag")?;
        for _ in 0..3 {
            tok.real("coordinate")?;
        }
        let np = tok.count("number of physical tags")?;
        for _ in 0..np {
            tok.int("physical tag")?;
        }
    }
    let mut curves = HashMap::new();
    let bounded = |tok: &mut Tokens, out: Option<&mut HashMap<i64, i32>>| -> Result<(), MeshError> {
        let tag = tok.int("entity tag")?;
        for _ in 0..6 {
            tok.real("bounding box")?;
        }
        let np = tok.count("number of physical tags")?;
        let mut first = None;
        for _ in 0..np {
            let p = tok.int("physical tag")? as i32;
            first.get_or_insert(p);
        }
        let nb = tok.count("number of bounding entities")?;
        for _ in 0..nb {
            tok.int("bounding entity")?;
        }
        if let (Some(out), Some(p)) = (out, first) {
            out.insert(tag, p);
        }
        Ok(())
    };
    for _ in 0..n_curves {
        bounded(&mut tok, Some(&mut curves))?;
    }
    for _ in 0..n_surfaces {
        bounded(&mut tok, None)?;
    }
    Ok(curves)
}

fn parse_nodes_v4(sec: &Section, raw: &mut RawMesh) -> Result<(), MeshError> {
    let mut tok = sec.tokens();
    let blocks = tok.count("number of entity blocks")?;
    let _total = tok.count("number of nodes")?;
    tok.int("min node tag")?;
    tok.int("max node tag")?;
    for _ in 0..blocks {
        let dim = tok.count("entity dimension")?;
        tok.int("entity tag")?;
        let parametric = tok.int("parametric flag")? != 0;
        let n = tok.count("nodes in block")?;
        let tags: Vec<i64> = (0..n).map(|_| tok.int("node tag")).collect::<Result<_, _>>()?;
        for tag in tags {
            let x = tok.real("x")?;
            let y = tok.real("y")?;
            tok.real("z")?;
            if parametric {
                for _ in 0..dim {
                    tok.real("parametric coordinate")?;
                }
            }
            raw.nodes.insert(tag, [x, y]);
        }
    }
    Ok(())
}

fn parse_elements_v4(
    sec: &Section,
    curve_physical: &HashMap<i64, i32>,
    raw: &mut RawMesh,
) -> Result<(), MeshError> {
    let mut tok = sec.tokens();
    let blocks = tok.count("number of entity blocks")?;
    let _total = tok.count("number of elements")?;
    tok.int("min element tag")?;
    tok.int("max element tag")?;
    for _ in 0..blocks {
        tok.int("entity dimension")?;
        let entity = tok.int("entity tag")?;
        let line = tok.line();
        let ty = tok.int("element type")?;
        let nn = element_nodes(ty).ok_or(MeshError::UnsupportedElement {
            line,
            element_type: ty,
        })?;
        let n = tok.count("elements in block")?;
        for _ in 0..n {
            tok.int("element tag")?;
            let nodes: Vec<i64> = (0..nn).map(|_| tok.int("element node")).collect::<Result<_, _>>()?;
            match ty {
                1 => raw.lines.push((
                    [nodes[0], nodes[1]],
                    curve_physical.get(&entity).copied().unwrap_or(UNTAGGED),
                )),
                2 => raw.triangles.push([nodes[0], nodes[1], nodes[2]]),
                _ => {}
            }
        }
    }
    if tok.pos != tok.items.len() {
        return Err(MeshError::Parse {
            line: tok.line(),
            message: "trailing data in $Elements".into(),
        });
    }
    Ok(())
}
