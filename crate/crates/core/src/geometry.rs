//! Point-cloud surfaces, tangent frames, neighbor search and tangent-plane
//! projection.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

const NORMAL_UNIT_TOL: f64 = 1e-12;
const DEGENERATE_NORMAL: f64 = 1e-8;
const PARALLEL_NORMAL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("degenerate normal at node {node} (length {length:e})")]
    DegenerateNormal { node: usize, length: f64 },
    #[error(
        "normal of node {neighbor} is nearly parallel to the tangent plane of node {center} (|n_k . n_c| = {dot:e})"
    )]
    ParallelNormal { center: usize, neighbor: usize, dot: f64 },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid point cloud: {0}")]
    Invalid(String),
    #[error("cannot read point cloud: {0}")]
    Io(#[from] std::io::Error),
}

/// Intrinsic dimension of the sampled manifold.
///
/// `PlanarCurve` is a closed curve in the `z = 0` plane whose normals lie in
/// that plane; its tangent is `e_z x n`. It carries the one-dimensional
/// validation problems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ManifoldKind {
    Surface,
    PlanarCurve,
}

impl ManifoldKind {
    pub fn tangent_dim(self) -> usize {
        match self {
            ManifoldKind::Surface => 2,
            ManifoldKind::PlanarCurve => 1,
        }
    }
}

/// How neighbors are mapped onto the center's tangent plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum ProjectionMode {
    /// Intersect the line through the neighbor along its own normal with the
    /// tangent plane.
    #[default]
    AlongNormal,
    /// Orthogonal projection onto the tangent plane; tolerant of noisy normals.
    Orthogonal,
    /// Keep the direction of the orthogonal projection but set the radius to
    /// the arc length estimated from the chord and the angle between the two
    /// normals. Exact on circles and spheres; on curves this is the isometric
    /// arc-length chart.
    ArcLength,
}

/// Sample sites with unit normals and per-node quadrature weights.
#[derive(Debug, Clone)]
pub struct PointCloud {
    points: Vec<Vec3>,
    normals: Vec<Vec3>,
    weights: Vec<f64>,
    label: String,
    kind: ManifoldKind,
}

impl PointCloud {
    /// Builds a cloud with uniform quadrature weights `total_area / N`.
    pub fn new(
        points: Vec<Vec3>,
        normals: Vec<Vec3>,
        total_area: f64,
        label: impl Into<String>,
        kind: ManifoldKind,
    ) -> Result<Self, GeometryError> {
        if points.len() != normals.len() {
            return Err(GeometryError::Invalid(format!("{} points but {} normals", points.len(), normals.len())));
        }
        if points.is_empty() {
            return Err(GeometryError::Invalid("empty cloud".into()));
        }
        if !(total_area > 0.0 && total_area.is_finite()) {
            return Err(GeometryError::Invalid(format!("total area must be positive, got {total_area}")));
        }
        for (node, n) in normals.iter().enumerate() {
            let length = n.norm();
            if (length - 1.0).abs() > NORMAL_UNIT_TOL {
                return Err(GeometryError::Invalid(format!("normal of node {node} has length {length}")));
            }
            if kind == ManifoldKind::PlanarCurve && n.z.abs() > NORMAL_UNIT_TOL {
                return Err(GeometryError::Invalid(format!(
                    "planar curve normal of node {node} leaves the z = 0 plane"
                )));
            }
        }
        let weights = quadrature_weights(points.len(), total_area);
        Ok(Self { points, normals, weights, label: label.into(), kind })
    }

    /// Parses the plain-text `x y z nx ny nz` format. Normals with length in
    /// `[0.9, 1.1]` are renormalized; anything else is rejected.
    pub fn parse(text: &str, total_area: f64, label: impl Into<String>) -> Result<Self, GeometryError> {
        let mut points = Vec::new();
        let mut normals = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let values: Vec<f64> = line
                .split_whitespace()
                .map(|tok| tok.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| GeometryError::Parse { line: lineno + 1, message: e.to_string() })?;
            if values.len() != 6 {
                return Err(GeometryError::Parse {
                    line: lineno + 1,
                    message: format!("expected 6 values, found {}", values.len()),
                });
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(GeometryError::Parse { line: lineno + 1, message: "non-finite value".into() });
            }
            let n = Vec3::new(values[3], values[4], values[5]);
            let length = n.norm();
            if !(0.9..=1.1).contains(&length) {
                return Err(GeometryError::Parse {
                    line: lineno + 1,
                    message: format!("normal length {length} outside [0.9, 1.1]"),
                });
            }
            points.push(Vec3::new(values[0], values[1], values[2]));
            normals.push(n / length);
        }
        Self::new(points, normals, total_area, label, ManifoldKind::Surface)
    }

    pub fn load(path: &Path, total_area: f64) -> Result<Self, GeometryError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, total_area, path.display().to_string())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn normals(&self) -> &[Vec3] {
        &self.normals
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn kind(&self) -> ManifoldKind {
        self.kind
    }

    pub fn total_area(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Uniform quadrature: every node carries `total_area / n`.
pub fn quadrature_weights(n: usize, total_area: f64) -> Vec<f64> {
    let mut w = vec![total_area / n as f64; n];
    // Put the rounding remainder on the last node so the sum is exact.
    let head: f64 = w[..n - 1].iter().sum();
    w[n - 1] = total_area - head;
    w
}

/// Local orthonormal frame `{s1, s2, n}` at a node.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentFrame {
    pub s1: Vec3,
    pub s2: Vec3,
    pub normal: Vec3,
    /// Rows `(s1, s2, n)`.
    pub rotation: Matrix3<f64>,
    /// Orthogonal projector onto the tangent space: `I - n n^T` on surfaces,
    /// `s1 s1^T` on planar curves.
    pub projector: Matrix3<f64>,
    pub tangent_dim: usize,
}

impl TangentFrame {
    pub fn from_normal(normal: Vec3, kind: ManifoldKind) -> Option<Self> {
        let length = normal.norm();
        if !(length >= DEGENERATE_NORMAL) {
            return None;
        }
        let n = normal / length;
        let s1 = match kind {
            ManifoldKind::Surface => {
                // Cartesian axis least aligned with n, lower index on ties.
                let abs = [n.x.abs(), n.y.abs(), n.z.abs()];
                let mut axis = 0;
                for i in 1..3 {
                    if abs[i] < abs[axis] {
                        axis = i;
                    }
                }
                let e = Vec3::ith(axis, 1.0);
                let t = e - n * n.dot(&e);
                t / t.norm()
            }
            ManifoldKind::PlanarCurve => {
                let t = Vec3::z().cross(&n);
                t / t.norm()
            }
        };
        let s2 = n.cross(&s1);
        let rotation = Matrix3::from_rows(&[s1.transpose(), s2.transpose(), n.transpose()]);
        let projector = match kind {
            ManifoldKind::Surface => Matrix3::identity() - n * n.transpose(),
            ManifoldKind::PlanarCurve => s1 * s1.transpose(),
        };
        Some(Self { s1, s2, normal: n, rotation, projector, tangent_dim: kind.tangent_dim() })
    }

    /// Coordinates of an ambient displacement in the `(s1, s2)` basis.
    pub fn tangent_coords(&self, v: &Vec3) -> [f64; 2] {
        [self.s1.dot(v), self.s2.dot(v)]
    }
}

pub fn build_frames(cloud: &PointCloud) -> Result<Vec<TangentFrame>, GeometryError> {
    cloud
        .normals()
        .iter()
        .enumerate()
        .map(|(node, n)| {
            TangentFrame::from_normal(*n, cloud.kind())
                .ok_or(GeometryError::DegenerateNormal { node, length: n.norm() })
        })
        .collect()
}

/// Tangent coordinates of `neighbor_point` after mapping it onto the tangent
/// plane at `center_point`.
///
/// Returns `None` when the neighbor normal is nearly parallel to the plane
/// (only possible in [`ProjectionMode::AlongNormal`]).
pub fn project_to_tangent(
    frame: &TangentFrame,
    neighbor_point: &Vec3,
    neighbor_normal: &Vec3,
    center_point: &Vec3,
    mode: ProjectionMode,
) -> Option<[f64; 2]> {
    let d = neighbor_point - center_point;
    let on_plane = match mode {
        ProjectionMode::AlongNormal => {
            let dot = neighbor_normal.dot(&frame.normal);
            if dot.abs() <= PARALLEL_NORMAL {
                return None;
            }
            let t = -d.dot(&frame.normal) / dot;
            d + neighbor_normal * t
        }
        ProjectionMode::Orthogonal => d - frame.normal * d.dot(&frame.normal),
        ProjectionMode::ArcLength => {
            let flat = d - frame.normal * d.dot(&frame.normal);
            let len = flat.norm();
            if len == 0.0 {
                return None;
            }
            let theta = neighbor_normal.dot(&frame.normal).clamp(-1.0, 1.0).acos();
            let half = 0.5 * theta;
            let ratio = if half < 1e-8 { 1.0 } else { half / half.sin() };
            flat * (d.norm() * ratio / len)
        }
    };
    let mut uv = frame.tangent_coords(&on_plane);
    if frame.tangent_dim == 1 {
        uv[1] = 0.0;
    }
    Some(uv)
}

/// A center node, its nearest neighbors (center first) and their projected
/// tangent coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet {
    pub center: usize,
    pub neighbors: Vec<usize>,
    pub projected: Vec<[f64; 2]>,
}

impl NeighborSet {
    pub fn build(
        cloud: &PointCloud,
        frames: &[TangentFrame],
        center: usize,
        neighbors: Vec<usize>,
        mode: ProjectionMode,
    ) -> Result<Self, GeometryError> {
        let frame = &frames[center];
        let pc = cloud.points()[center];
        let projected = neighbors
            .iter()
            .map(|&k| {
                if k == center {
                    return Ok([0.0, 0.0]);
                }
                let nk = cloud.normals()[k];
                project_to_tangent(frame, &cloud.points()[k], &nk, &pc, mode).ok_or(GeometryError::ParallelNormal {
                    center,
                    neighbor: k,
                    dot: nk.dot(&frame.normal),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { center, neighbors, projected })
    }
}

/// Uniform-grid spatial index for exact k-nearest-neighbor queries.
///
/// Results are identical to an exhaustive sort on `(squared distance, index)`.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<Vec3>,
    origin: Vec3,
    cell: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
    max_ring: i64,
}

impl SpatialIndex {
    pub fn new(points: &[Vec3]) -> Self {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let extent = (hi - lo).max().max(f64::MIN_POSITIVE);
        // Points sample a surface, so aim for a handful per occupied cell.
        let cell = (extent / (points.len() as f64).sqrt() * 2.0).max(extent * 1e-9);
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(&lo, cell, p)).or_default().push(i);
        }
        let max_ring = (extent / cell).ceil() as i64 + 1;
        Self { points: points.to_vec(), origin: lo, cell, cells, max_ring }
    }

    fn key(origin: &Vec3, cell: f64, p: &Vec3) -> [i64; 3] {
        let r = (p - origin) / cell;
        [r.x.floor() as i64, r.y.floor() as i64, r.z.floor() as i64]
    }

    /// The `k` nodes nearest to node `center`, center first, ties broken by
    /// index.
    pub fn nearest(&self, center: usize, k: usize) -> Vec<usize> {
        let k = k.min(self.points.len());
        let q = self.points[center];
        let base = Self::key(&self.origin, self.cell, &q);
        let mut cand: Vec<(f64, usize)> = Vec::new();
        let mut ring = 0i64;
        loop {
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        let key = [base[0] + dx, base[1] + dy, base[2] + dz];
                        if let Some(ids) = self.cells.get(&key) {
                            cand.extend(ids.iter().map(|&i| (squared_distance(&q, &self.points[i]), i)));
                        }
                    }
                }
            }
            if cand.len() >= k {
                sort_candidates(&mut cand, center);
                let covered = ring as f64 * self.cell;
                if cand[k - 1].0 <= covered * covered || ring >= self.max_ring {
                    break;
                }
            } else if ring >= self.max_ring {
                break;
            }
            ring += 1;
        }
        sort_candidates(&mut cand, center);
        cand.truncate(k);
        cand.into_iter().map(|(_, i)| i).collect()
    }
}

impl SpatialIndex {
    /// The `k` nearest nodes plus every further node whose distance matches
    /// the `k`-th one to relative tolerance `rel_tol`.
    pub fn nearest_with_ties(&self, center: usize, k: usize, rel_tol: f64) -> Vec<usize> {
        let n = self.points.len();
        let k = k.min(n);
        if k <= 1 {
            return self.nearest(center, k);
        }
        let q = self.points[center];
        let mut want = (k + 8).min(n);
        loop {
            let ids = self.nearest(center, want);
            let dk = squared_distance(&q, &self.points[ids[k - 1]]);
            let bound = dk * (1.0 + rel_tol).powi(2);
            let cut = k + ids[k..].iter().take_while(|&&i| squared_distance(&q, &self.points[i]) <= bound).count();
            if cut < ids.len() || want == n {
                return ids[..cut].to_vec();
            }
            want = (want * 2).min(n);
        }
    }
}

fn squared_distance(a: &Vec3, b: &Vec3) -> f64 {
    let d = a - b;
    d.x * d.x + d.y * d.y + d.z * d.z
}

fn sort_candidates(cand: &mut [(f64, usize)], center: usize) {
    cand.sort_by(|a, b| (a.1 != center).cmp(&(b.1 != center)).then(a.0.total_cmp(&b.0)).then(a.1.cmp(&b.1)));
}

/// Exhaustive O(N) neighbor sort with the same ordering contract as
/// [`SpatialIndex::nearest`].
pub fn brute_force_neighbors(points: &[Vec3], center: usize, k: usize) -> Vec<usize> {
    let q = points[center];
    let mut cand: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| (squared_distance(&q, p), i)).collect();
    sort_candidates(&mut cand, center);
    cand.truncate(k);
    cand.into_iter().map(|(_, i)| i).collect()
}

/// Convenience single query; builds a fresh index.
pub fn knn_neighbors(cloud: &PointCloud, center: usize, n: usize) -> Vec<usize> {
    SpatialIndex::new(cloud.points()).nearest(center, n)
}
