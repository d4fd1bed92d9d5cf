//! Occupancy grids, smoothing, marching cubes and mesh files.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Similarity;
use crate::linalg::Vec3;
use crate::mc_tables::{CORNERS, EDGES, TRIANGLES};
use crate::network::{InputKind, OccupancyModel, Workspace};
use crate::phantom::{AcousticProperties, PhantomSpec};
use crate::real::Real;

/// Scalar samples on a regular lattice; `x` varies fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid<T> {
    pub resolution: [usize; 3],
    pub origin: Vec3<T>,
    pub spacing: Vec3<T>,
    pub values: Vec<T>,
}

impl<T: Real> OccupancyGrid<T> {
    /// Lattice spanning the unit cube with `resolution` nodes per axis.
    pub fn unit_cube(resolution: [usize; 3], values: Vec<T>) -> Result<Self> {
        if resolution.iter().any(|&n| n < 2) {
            return Err(Error::invalid("grid resolution must be >= 2 on every axis"));
        }
        if values.len() != resolution.iter().product::<usize>() {
            return Err(Error::invalid("grid value count does not match its resolution"));
        }
        let spacing = Vec3::new(
            T::one() / T::lit((resolution[0] - 1) as f64),
            T::one() / T::lit((resolution[1] - 1) as f64),
            T::one() / T::lit((resolution[2] - 1) as f64),
        );
        Ok(Self { resolution, origin: Vec3::zero(), spacing, values })
    }

    /// Unit-cube lattice filled by evaluating `f` at every node.
    ///
    /// # Panics
    /// If any resolution entry is below 2.
    pub fn from_fn(resolution: [usize; 3], f: impl Fn(Vec3<T>) -> T) -> Self {
        let mut g = Self::unit_cube(resolution, vec![T::zero(); resolution.iter().product()]).expect("resolution >= 2");
        for idx in 0..g.values.len() {
            g.values[idx] = f(g.node_position(idx));
        }
        g
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.resolution[1] + j) * self.resolution[0] + i
    }

    pub fn node(&self, idx: usize) -> [usize; 3] {
        let [nx, ny, _] = self.resolution;
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    pub fn node_position(&self, idx: usize) -> Vec3<T> {
        let [i, j, k] = self.node(idx);
        self.position(i, j, k)
    }

    pub fn position(&self, i: usize, j: usize, k: usize) -> Vec3<T> {
        self.origin
            + Vec3::new(
                self.spacing.x * T::lit(i as f64),
                self.spacing.y * T::lit(j as f64),
                self.spacing.z * T::lit(k as f64),
            )
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.values[self.index(i, j, k)]
    }
}

/// Supplies acoustic features at query points.
pub trait FeatureSource<T> {
    fn features(&self, x: Vec3<T>) -> AcousticProperties<T>;
}

/// The phantom's jittered field under a fixed seed.
#[derive(Debug, Clone, Copy)]
pub struct PhantomField<'a> {
    pub phantom: &'a PhantomSpec,
    pub seed: u64,
}

impl<T: Real> FeatureSource<T> for PhantomField<'_> {
    fn features(&self, x: Vec3<T>) -> AcousticProperties<T> {
        self.phantom.features_at(x, self.seed)
    }
}

const GRID_CHUNK: usize = 4096;

/// Evaluates the model on a unit-cube lattice and shifts by `-0.5`, so the
/// decision boundary becomes the zero level set.
///
/// Feature models read `theta` from `source`; coordinate models ignore it.
pub fn sample_grid<T: Real>(
    model: &OccupancyModel<T>,
    source: &dyn FeatureSource<T>,
    resolution: [usize; 3],
) -> Result<OccupancyGrid<T>> {
    let mut grid = OccupancyGrid::unit_cube(resolution, vec![T::zero(); resolution.iter().product()])?;
    let mut ws = Workspace::default();
    let mut inputs = Vec::with_capacity(GRID_CHUNK * model.encoded_dim());
    let blank = AcousticProperties::new(T::zero(), T::zero(), T::zero());
    let half = T::lit(0.5);
    let total = grid.values.len();
    let mut start = 0;
    while start < total {
        let end = (start + GRID_CHUNK).min(total);
        inputs.clear();
        for idx in start..end {
            let x = grid.node_position(idx);
            let theta = match model.config.input_kind {
                InputKind::AcousticFeatures => source.features(x),
                InputKind::Coordinates => blank,
            };
            model.encode_into(x, &theta, &mut inputs);
        }
        let probs = model.forward_batch(&inputs, &mut ws)?;
        for (v, &p) in grid.values[start..end].iter_mut().zip(probs) {
            *v = p - half;
        }
        start = end;
    }
    Ok(grid)
}

/// Normalized, truncated 1-D Gaussian taps for offsets `-radius..=radius`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    if sigma <= 0.0 || radius == 0 {
        return vec![1.0];
    }
    let taps: Vec<f64> = (-(radius as i64)..=radius as i64)
        .map(|o| (-(o * o) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable Gaussian blur, `sigma` and `radius` in cells, replicate padding.
pub fn smooth<T: Real>(grid: &OccupancyGrid<T>, sigma: f64, radius: usize) -> Result<OccupancyGrid<T>> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid("smoothing sigma must be >= 0"));
    }
    let kernel: Vec<T> = gaussian_kernel(sigma, radius).into_iter().map(T::lit).collect();
    if kernel.len() == 1 {
        return Ok(grid.clone());
    }
    let r = radius as i64;
    let mut out = grid.clone();
    let mut scratch = grid.values.clone();
    for axis in 0..3 {
        let n = grid.resolution[axis] as i64;
        let stride = match axis {
            0 => 1,
            1 => grid.resolution[0],
            _ => grid.resolution[0] * grid.resolution[1],
        } as i64;
        for idx in 0..out.values.len() {
            let pos = grid.node(idx)[axis] as i64;
            let mut acc = T::zero();
            for (t, &w) in kernel.iter().enumerate() {
                let q = (pos + t as i64 - r).clamp(0, n - 1);
                acc += w * out.values[(idx as i64 + (q - pos) * stride) as usize];
            }
            scratch[idx] = acc;
        }
        std::mem::swap(&mut out.values, &mut scratch);
    }
    Ok(out)
}

/// Indexed triangle list.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriangleMesh<T> {
    pub vertices: Vec<Vec3<T>>,
    pub triangles: Vec<[u32; 3]>,
}

/// Triangles below this area are dropped after extraction.
pub const DEGENERATE_AREA: f64 = 1e-12;

impl<T: Real> TriangleMesh<T> {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn corners(&self, t: usize) -> [Vec3<T>; 3] {
        self.triangles[t].map(|i| self.vertices[i as usize])
    }

    pub fn triangle_area(&self, t: usize) -> T {
        let [a, b, c] = self.corners(t);
        (b - a).cross(c - a).norm() * T::lit(0.5)
    }

    pub fn surface_area(&self) -> T {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Signed enclosed volume; positive for outward-facing triangles.
    pub fn signed_volume(&self) -> T {
        let sixth = T::one() / T::lit(6.0);
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.corners(t);
                a.dot(b.cross(c)) * sixth
            })
            .sum()
    }

    /// Undirected edge → incident triangle count.
    pub fn edge_incidence(&self) -> HashMap<(u32, u32), usize> {
        let mut edges = HashMap::new();
        for tri in &self.triangles {
            for e in 0..3 {
                let (a, b) = (tri[e], tri[(e + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        edges
    }

    /// Every edge shared by exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        !self.is_empty() && self.edge_incidence().values().all(|&c| c == 2)
    }

    /// `V - E + F` over referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        self.triangles.iter().flatten().for_each(|&i| used[i as usize] = true);
        let v = used.iter().filter(|&&u| u).count() as i64;
        v - self.edge_incidence().len() as i64 + self.triangles.len() as i64
    }

    pub fn map_vertices(&self, f: impl Fn(Vec3<T>) -> Vec3<T>) -> Self {
        Self { vertices: self.vertices.iter().map(|&v| f(v)).collect(), triangles: self.triangles.clone() }
    }

    pub fn cast<U: Real>(&self) -> TriangleMesh<U> {
        TriangleMesh { vertices: self.vertices.iter().map(|v| v.cast()).collect(), triangles: self.triangles.clone() }
    }
}

/// Marching cubes over `grid`, treating values above `iso` as inside.
///
/// Edge crossings are linearly interpolated and welded per lattice edge, so
/// vertices are shared between neighbouring cells; ids follow cell scan
/// order. Triangles face outward (towards decreasing values). A grid with a
/// single sign yields an empty mesh.
pub fn marching_cubes<T: Real>(grid: &OccupancyGrid<T>, iso: T) -> TriangleMesh<T> {
    let [nx, ny, nz] = grid.resolution;
    let mut mesh = TriangleMesh::default();
    let mut welded: HashMap<(usize, u8), u32> = HashMap::new();
    for k in 0..nz.saturating_sub(1) {
        for j in 0..ny.saturating_sub(1) {
            for i in 0..nx.saturating_sub(1) {
                let mut vals = [T::zero(); 8];
                let mut case = 0usize;
                for (c, off) in CORNERS.iter().enumerate() {
                    vals[c] = grid.get(i + off[0], j + off[1], k + off[2]);
                    if vals[c] > iso {
                        case |= 1 << c;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                let mut edge_vertex = |e: usize| -> u32 {
                    let [a, b] = EDGES[e];
                    let (ca, cb) = (CORNERS[a], CORNERS[b]);
                    let axis = (0..3).find(|&d| ca[d] != cb[d]).expect("edge spans one axis") as u8;
                    let lo = if ca[axis as usize] < cb[axis as usize] { ca } else { cb };
                    let key = (grid.index(i + lo[0], j + lo[1], k + lo[2]), axis);
                    *welded.entry(key).or_insert_with(|| {
                        let pa = grid.position(i + ca[0], j + ca[1], k + ca[2]);
                        let pb = grid.position(i + cb[0], j + cb[1], k + cb[2]);
                        let t = (iso - vals[a]) / (vals[b] - vals[a]);
                        mesh.vertices.push(pa + (pb - pa) * t);
                        (mesh.vertices.len() - 1) as u32
                    })
                };
                for tri in TRIANGLES[case].chunks_exact(3).take_while(|t| t[0] >= 0) {
                    let v = [edge_vertex(tri[0] as usize), edge_vertex(tri[1] as usize), edge_vertex(tri[2] as usize)];
                    mesh.triangles.push([v[0], v[2], v[1]]);
                }
            }
        }
    }
    let min_area = T::lit(DEGENERATE_AREA);
    let keep: Vec<bool> = (0..mesh.triangles.len()).map(|t| mesh.triangle_area(t) > min_area).collect();
    let mut it = keep.into_iter();
    mesh.triangles.retain(|_| it.next().unwrap());
    mesh
}

/// Header tag carrying the unit-cube transform (`p_unit = scale · p_mm + t`).
pub const MM_TRANSFORM_TAG: &str = "mm_to_unit_cube";

fn transform_line(t: &Similarity<f64>) -> String {
    format!("{MM_TRANSFORM_TAG} {} {} {} {}", t.scale, t.translation.x, t.translation.y, t.translation.z)
}

fn parse_transform(rest: &str) -> Option<Similarity<f64>> {
    let v: Vec<f64> = rest.split_whitespace().map(str::parse).collect::<std::result::Result<_, _>>().ok()?;
    (v.len() == 4).then(|| Similarity { scale: v[0], translation: Vec3::new(v[1], v[2], v[3]) })
}

/// ASCII PLY text.
pub fn ply_string<T: Real>(mesh: &TriangleMesh<T>, transform: Option<&Similarity<f64>>) -> String {
    let mut s = String::from("ply\nformat ascii 1.0\n");
    if let Some(t) = transform {
        let _ = writeln!(s, "comment {}", transform_line(t));
    }
    let _ = writeln!(s, "element vertex {}", mesh.vertices.len());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    let _ = writeln!(s, "element face {}", mesh.triangles.len());
    s.push_str("property list uchar int vertex_indices\nend_header\n");
    for v in &mesh.vertices {
        let _ = writeln!(s, "{} {} {}", v.x.as_f64(), v.y.as_f64(), v.z.as_f64());
    }
    for t in &mesh.triangles {
        let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
    }
    s
}

/// Wavefront OBJ text.
pub fn obj_string<T: Real>(mesh: &TriangleMesh<T>, transform: Option<&Similarity<f64>>) -> String {
    let mut s = String::new();
    if let Some(t) = transform {
        let _ = writeln!(s, "# {}", transform_line(t));
    }
    for v in &mesh.vertices {
        let _ = writeln!(s, "v {} {} {}", v.x.as_f64(), v.y.as_f64(), v.z.as_f64());
    }
    for t in &mesh.triangles {
        let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    s
}

/// Writes PLY or OBJ according to the file extension.
pub fn write_mesh<T: Real>(path: &Path, mesh: &TriangleMesh<T>, transform: Option<&Similarity<f64>>) -> Result<()> {
    let text = match extension(path).as_deref() {
        Some("ply") => ply_string(mesh, transform),
        Some("obj") => obj_string(mesh, transform),
        _ => return Err(Error::invalid(format!("{}: mesh files must end in .ply or .obj", path.display()))),
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn extension(path: &Path) -> Option<String> {
    path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase())
}

/// Reads an ASCII PLY or OBJ written by [`write_mesh`] (or any triangle-only
/// file in the same dialect).
pub fn read_mesh(path: &Path) -> Result<(TriangleMesh<f64>, Option<Similarity<f64>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parsed = match extension(path).as_deref() {
        Some("ply") => parse_ply(&text),
        Some("obj") => parse_obj(&text),
        _ => Err("mesh files must end in .ply or .obj".to_string()),
    };
    let (mesh, tf) = parsed.map_err(|m| Error::format(path, m))?;
    let n = mesh.vertices.len() as u32;
    if mesh.triangles.iter().flatten().any(|&i| i >= n) {
        return Err(Error::format(path, "face index out of range"));
    }
    Ok((mesh, tf))
}

fn parse_ply(text: &str) -> std::result::Result<(TriangleMesh<f64>, Option<Similarity<f64>>), String> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err("missing ply magic".into());
    }
    let (mut nv, mut nf, mut tf) = (None, None, None);
    for line in lines.by_ref() {
        let mut w = line.split_whitespace();
        match (w.next(), w.next()) {
            (Some("format"), Some(f)) if f != "ascii" => return Err("only ascii PLY is supported".into()),
            (Some("comment"), Some(tag)) if tag == MM_TRANSFORM_TAG => {
                tf = Some(parse_transform(&w.collect::<Vec<_>>().join(" ")).ok_or("bad transform comment")?)
            }
            (Some("element"), Some("vertex")) => nv = w.next().and_then(|c| c.parse::<usize>().ok()),
            (Some("element"), Some("face")) => nf = w.next().and_then(|c| c.parse::<usize>().ok()),
            (Some("end_header"), _) => break,
            _ => {}
        }
    }
    let (nv, nf) = (nv.ok_or("missing vertex count")?, nf.ok_or("missing face count")?);
    let mut mesh = TriangleMesh::default();
    for _ in 0..nv {
        let line = lines.next().ok_or("truncated vertex list")?;
        let c: Vec<f64> = line.split_whitespace().take(3).map(str::parse).collect::<std::result::Result<_, _>>().map_err(|e| format!("{e}"))?;
        if c.len() != 3 {
            return Err("vertex needs three coordinates".into());
        }
        mesh.vertices.push(Vec3::new(c[0], c[1], c[2]));
    }
    for _ in 0..nf {
        let line = lines.next().ok_or("truncated face list")?;
        let c: Vec<u32> = line.split_whitespace().map(str::parse).collect::<std::result::Result<_, _>>().map_err(|e| format!("{e}"))?;
        if c.len() != 4 || c[0] != 3 {
            return Err("only triangular faces are supported".into());
        }
        mesh.triangles.push([c[1], c[2], c[3]]);
    }
    Ok((mesh, tf))
}

fn parse_obj(text: &str) -> std::result::Result<(TriangleMesh<f64>, Option<Similarity<f64>>), String> {
    let mut mesh = TriangleMesh::default();
    let mut tf = None;
    for line in text.lines() {
        let mut w = line.split_whitespace();
        match w.next() {
            Some("#") => {
                if w.next() == Some(MM_TRANSFORM_TAG) {
                    tf = Some(parse_transform(&w.collect::<Vec<_>>().join(" ")).ok_or("bad transform comment")?);
                }
            }
            Some("v") => {
                let c: Vec<f64> = w.take(3).map(str::parse).collect::<std::result::Result<_, _>>().map_err(|e| format!("{e}"))?;
                if c.len() != 3 {
                    return Err("vertex needs three coordinates".into());
                }
                mesh.vertices.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx: Vec<u32> = w
                    .map(|t| t.split('/').next().unwrap_or("").parse::<u32>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| format!("{e}"))?;
                if idx.len() != 3 || idx.contains(&0) {
                    return Err("only 1-based triangular faces are supported".into());
                }
                mesh.triangles.push([idx[0] - 1, idx[1] - 1, idx[2] - 1]);
            }
            _ => {}
        }
    }
    Ok((mesh, tf))
}
