//! Random planar truss generation and finite-element modal analysis.
//!
//! Trusses live inside a convex trapezoid. Nodes are the four corners, a few
//! points on the bottom and top chords, and interior points; members come from
//! a Delaunay triangulation of that point set. Every member is a two-node bar
//! with axial stiffness only and lumped mass.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag, StreamRng};

const MAX_TRUSS_ATTEMPTS: u64 = 100;
const MAX_DAMPING_ATTEMPTS: usize = 50;

/// Closed interval used for uniform sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn sample(&self, rng: &mut StreamRng) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }

    fn is_positive(&self) -> bool {
        self.lo > 0.0 && self.hi >= self.lo && self.hi.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrussGenConfig {
    /// Corners in counter-clockwise order: bottom-left, bottom-right,
    /// top-right, top-left.
    pub trapezoid: [[f64; 2]; 4],
    pub nodes_min: usize,
    pub nodes_max: usize,
    /// Pa
    pub youngs_modulus: Range,
    /// m²
    pub area: Range,
    /// kg/m³
    pub density: Range,
    /// Mass-proportional Rayleigh coefficient, 1/s.
    pub rayleigh_a0: Range,
    /// Stiffness-proportional Rayleigh coefficient, s.
    pub rayleigh_a1: Range,
    /// Accepted damping ratio band for the target modes.
    pub damping_band: Range,
    /// Node indices pinned in both directions (corners are nodes 0..4).
    pub supports: Vec<usize>,
    pub n_modes: usize,
    pub seed: u64,
}

impl Default for TrussGenConfig {
    fn default() -> Self {
        Self {
            trapezoid: [[0.0, 0.0], [10.0, 0.0], [8.0, 3.0], [2.0, 3.0]],
            nodes_min: 8,
            nodes_max: 30,
            youngs_modulus: Range::new(180e9, 220e9),
            area: Range::new(5e-4, 2e-3),
            density: Range::new(7600.0, 8100.0),
            rayleigh_a0: Range::new(0.2, 12.0),
            rayleigh_a1: Range::new(1e-6, 4e-5),
            damping_band: Range::new(0.005, 0.05),
            supports: vec![0, 1],
            n_modes: 4,
            seed: 42,
        }
    }
}

impl TrussGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nodes_min < 4 || self.nodes_max < self.nodes_min {
            return Err(Error::Config(format!(
                "node range [{}, {}] must satisfy 4 <= min <= max",
                self.nodes_min, self.nodes_max
            )));
        }
        if self.n_modes == 0 {
            return Err(Error::Config("n_modes must be >= 1".into()));
        }
        for (name, r) in [
            ("youngs_modulus", self.youngs_modulus),
            ("area", self.area),
            ("density", self.density),
            ("rayleigh_a0", self.rayleigh_a0),
            ("rayleigh_a1", self.rayleigh_a1),
            ("damping_band", self.damping_band),
        ] {
            if !r.is_positive() {
                return Err(Error::Config(format!("{name} range must be positive, got {r:?}")));
            }
        }
        if self.damping_band.hi >= 1.0 {
            return Err(Error::Config("damping band must lie inside (0, 1)".into()));
        }
        let supported: BTreeSet<usize> = self.supports.iter().copied().collect();
        if supported.len() < 2 {
            return Err(Error::Config("at least 2 supported nodes are required".into()));
        }
        if supported.iter().any(|&s| s >= 4) {
            return Err(Error::Config("supports must reference corner nodes 0..4".into()));
        }
        trapezoid_area(&self.trapezoid)?;
        Ok(())
    }
}

/// Signed-area check that also rejects non-convex corner orderings.
fn trapezoid_area(corners: &[[f64; 2]; 4]) -> Result<f64> {
    let mut area = 0.0;
    for i in 0..4 {
        let [x0, y0] = corners[i];
        let [x1, y1] = corners[(i + 1) % 4];
        area += x0 * y1 - x1 * y0;
    }
    area *= 0.5;
    if !(area > 1e-9) {
        return Err(Error::Generation(format!("degenerate trapezoid (signed area {area})")));
    }
    for i in 0..4 {
        if cross(corners[i], corners[(i + 1) % 4], corners[(i + 2) % 4]) <= 0.0 {
            return Err(Error::Generation("trapezoid must be convex and counter-clockwise".into()));
        }
    }
    Ok(area)
}

fn cross(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Element {
    pub nodes: [usize; 2],
    pub youngs_modulus: f64,
    pub area: f64,
    pub density: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Rayleigh {
    pub a0: f64,
    pub a1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrussModel {
    pub coords: Vec<[f64; 2]>,
    pub elements: Vec<Element>,
    /// One flag per DOF (`2 * node + direction`), `true` when fixed.
    pub support_mask: Vec<bool>,
    pub rayleigh: Rayleigh,
}

impl TrussModel {
    pub fn n_nodes(&self) -> usize {
        self.coords.len()
    }

    /// Undirected member list as node pairs.
    pub fn member_pairs(&self) -> Vec<[usize; 2]> {
        self.elements.iter().map(|e| e.nodes).collect()
    }

    pub fn is_connected(&self) -> bool {
        is_connected(self.n_nodes(), &self.member_pairs())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_nodes();
        if self.support_mask.len() != 2 * n {
            return Err(Error::Shape(format!(
                "support mask has {} entries for {n} nodes",
                self.support_mask.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for e in &self.elements {
            let [a, b] = e.nodes;
            if a >= n || b >= n {
                return Err(Error::Assembly(format!("element {:?} references node >= {n}", e.nodes)));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::Assembly(format!("duplicate element {:?}", e.nodes)));
            }
            if dist(self.coords[a], self.coords[b]) <= 1e-12 {
                return Err(Error::Assembly(format!("zero-length element {:?}", e.nodes)));
            }
        }
        Ok(())
    }
}

/// Breadth-first connectivity test over an undirected edge list.
pub fn is_connected(n: usize, edges: &[[usize; 2]]) -> bool {
    if n == 0 {
        return false;
    }
    let mut adj = vec![Vec::new(); n];
    for &[a, b] in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                count += 1;
                queue.push_back(v);
            }
        }
    }
    count == n
}

/// Bowyer-Watson Delaunay triangulation. Returns counter-clockwise triangles.
pub fn delaunay(points: &[[f64; 2]]) -> Vec<[usize; 3]> {
    let n = points.len();
    if n < 3 {
        return Vec::new();
    }
    let (mut min_x, mut min_y, mut max_x, mut max_y) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for p in points {
        min_x = min_x.min(p[0]);
        min_y = min_y.min(p[1]);
        max_x = max_x.max(p[0]);
        max_y = max_y.max(p[1]);
    }
    let span = (max_x - min_x).max(max_y - min_y).max(1e-9);
    let (cx, cy) = (0.5 * (min_x + max_x), 0.5 * (min_y + max_y));
    let mut pts = points.to_vec();
    pts.push([cx - 40.0 * span, cy - 30.0 * span]);
    pts.push([cx + 40.0 * span, cy - 30.0 * span]);
    pts.push([cx, cy + 40.0 * span]);

    let ccw = |t: [usize; 3], pts: &[[f64; 2]]| -> [usize; 3] {
        if cross(pts[t[0]], pts[t[1]], pts[t[2]]) < 0.0 {
            [t[0], t[2], t[1]]
        } else {
            t
        }
    };
    let in_circumcircle = |t: &[usize; 3], p: [f64; 2], pts: &[[f64; 2]]| -> bool {
        let [a, b, c] = [pts[t[0]], pts[t[1]], pts[t[2]]];
        let (adx, ady) = (a[0] - p[0], a[1] - p[1]);
        let (bdx, bdy) = (b[0] - p[0], b[1] - p[1]);
        let (cdx, cdy) = (c[0] - p[0], c[1] - p[1]);
        let det = (adx * adx + ady * ady) * (bdx * cdy - cdx * bdy)
            - (bdx * bdx + bdy * bdy) * (adx * cdy - cdx * ady)
            + (cdx * cdx + cdy * cdy) * (adx * bdy - bdx * ady);
        det > 1e-12 * span.powi(4)
    };

    let mut triangles: Vec<[usize; 3]> = vec![[n, n + 1, n + 2]];
    for i in 0..n {
        let p = pts[i];
        let (bad, good): (Vec<[usize; 3]>, Vec<[usize; 3]>) =
            triangles.into_iter().partition(|t| in_circumcircle(t, p, &pts));
        let mut boundary: Vec<[usize; 2]> = Vec::new();
        for t in &bad {
            for k in 0..3 {
                let e = [t[k], t[(k + 1) % 3]];
                let shared = bad.iter().any(|o| {
                    o != t && (0..3).any(|m| o[m] == e[1] && o[(m + 1) % 3] == e[0])
                });
                if !shared {
                    boundary.push(e);
                }
            }
        }
        triangles = good;
        for e in boundary {
            triangles.push(ccw([e[0], e[1], i], &pts));
        }
    }
    triangles.retain(|t| t.iter().all(|&v| v < n));
    triangles
}

fn point_in_convex(poly: &[[f64; 2]; 4], p: [f64; 2], margin: f64) -> bool {
    (0..4).all(|i| {
        let a = poly[i];
        let b = poly[(i + 1) % 4];
        cross(a, b, p) / dist(a, b) >= margin
    })
}

fn lerp(a: [f64; 2], b: [f64; 2], t: f64) -> [f64; 2] {
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
}

fn sample_nodes(cfg: &TrussGenConfig, rng: &mut StreamRng) -> Option<Vec<[f64; 2]>> {
    let corners = cfg.trapezoid;
    let area = trapezoid_area(&corners).ok()?;
    let n = rng.random_range(cfg.nodes_min..=cfg.nodes_max);
    let spacing = 0.6 * (area / n as f64).sqrt();

    let mut pts: Vec<[f64; 2]> = corners.to_vec();
    let rest = n - 4;
    let n_bottom = (rest as f64 * 0.3).round() as usize;
    let n_top = ((rest as f64 * 0.25).round() as usize).min(rest - n_bottom);
    let n_inner = rest - n_bottom - n_top;

    let far_enough = |pts: &[[f64; 2]], p: [f64; 2]| pts.iter().all(|&q| dist(p, q) >= spacing);
    for (count, a, b) in [(n_bottom, corners[0], corners[1]), (n_top, corners[3], corners[2])] {
        for _ in 0..count {
            let mut placed = false;
            for _ in 0..500 {
                let p = lerp(a, b, rng.random_range(0.0..1.0));
                if far_enough(&pts, p) {
                    pts.push(p);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return None;
            }
        }
    }
    let (mut lo_x, mut lo_y, mut hi_x, mut hi_y) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for c in corners {
        lo_x = lo_x.min(c[0]);
        lo_y = lo_y.min(c[1]);
        hi_x = hi_x.max(c[0]);
        hi_y = hi_y.max(c[1]);
    }
    for _ in 0..n_inner {
        let mut placed = false;
        for _ in 0..2000 {
            let p = [rng.random_range(lo_x..hi_x), rng.random_range(lo_y..hi_y)];
            if point_in_convex(&corners, p, 0.5 * spacing) && far_enough(&pts, p) {
                pts.push(p);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(pts)
}

/// Draws one truss from `seed`. Deterministic for a given `(seed, cfg)`.
///
/// The Rayleigh coefficients are left at zero; [`synthesize`] picks them once
/// the natural frequencies are known.
pub fn generate_truss(seed: u64, cfg: &TrussGenConfig) -> Result<TrussModel> {
    trapezoid_area(&cfg.trapezoid)?;
    cfg.validate()?;
    for attempt in 0..MAX_TRUSS_ATTEMPTS {
        let mut rng = rng::stream(seed, attempt, tag::TRUSS);
        let Some(coords) = sample_nodes(cfg, &mut rng) else {
            continue;
        };
        let tris = delaunay(&coords);
        let mut edges = BTreeSet::new();
        for t in &tris {
            let area = 0.5 * cross(coords[t[0]], coords[t[1]], coords[t[2]]).abs();
            if area < 1e-6 {
                continue;
            }
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                edges.insert((a.min(b), a.max(b)));
            }
        }
        // members must stay inside the domain
        edges.retain(|&(a, b)| point_in_convex(&cfg.trapezoid, lerp(coords[a], coords[b], 0.5), -1e-9));
        let pairs: Vec<[usize; 2]> = edges.iter().map(|&(a, b)| [a, b]).collect();
        if !is_connected(coords.len(), &pairs) {
            continue;
        }
        let elements = pairs
            .iter()
            .map(|&nodes| Element {
                nodes,
                youngs_modulus: cfg.youngs_modulus.sample(&mut rng),
                area: cfg.area.sample(&mut rng),
                density: cfg.density.sample(&mut rng),
            })
            .collect();
        let mut support_mask = vec![false; 2 * coords.len()];
        for &s in &cfg.supports {
            support_mask[2 * s] = true;
            support_mask[2 * s + 1] = true;
        }
        let truss = TrussModel { coords, elements, support_mask, rayleigh: Rayleigh::default() };
        // a triangulated truss may still be a mechanism if slivers were dropped
        if assemble_system(&truss).is_ok() {
            return Ok(truss);
        }
    }
    Err(Error::Generation(format!(
        "no connected, stable truss after {MAX_TRUSS_ATTEMPTS} attempts (seed {seed})"
    )))
}

/// Reduced mass and stiffness matrices with supported DOFs eliminated.
#[derive(Debug, Clone)]
pub struct SystemMatrices {
    pub mass: DMatrix<f64>,
    pub stiffness: DMatrix<f64>,
    /// Global DOF (`2 * node + direction`) to reduced row, `None` if fixed.
    pub dof_map: Vec<Option<usize>>,
}

impl SystemMatrices {
    pub fn n_dof(&self) -> usize {
        self.mass.nrows()
    }
}

pub fn assemble_system(truss: &TrussModel) -> Result<SystemMatrices> {
    truss.validate()?;
    let n_global = 2 * truss.n_nodes();
    let mut dof_map = vec![None; n_global];
    let mut next = 0;
    for (g, slot) in dof_map.iter_mut().enumerate() {
        if !truss.support_mask[g] {
            *slot = Some(next);
            next += 1;
        }
    }
    if next == 0 {
        return Err(Error::Assembly("every DOF is supported".into()));
    }
    let mut k = DMatrix::<f64>::zeros(next, next);
    let mut m = DMatrix::<f64>::zeros(next, next);
    for e in &truss.elements {
        let [a, b] = e.nodes;
        let (pa, pb) = (truss.coords[a], truss.coords[b]);
        let len = dist(pa, pb);
        if len <= 1e-12 {
            return Err(Error::Assembly(format!("zero-length element {:?}", e.nodes)));
        }
        let c = (pb[0] - pa[0]) / len;
        let s = (pb[1] - pa[1]) / len;
        let ea_l = e.youngs_modulus * e.area / len;
        let dir = [c, s];
        let dofs = [2 * a, 2 * a + 1, 2 * b, 2 * b + 1];
        let sign = [1.0, 1.0, -1.0, -1.0];
        for i in 0..4 {
            let Some(ri) = dof_map[dofs[i]] else { continue };
            for j in 0..4 {
                let Some(rj) = dof_map[dofs[j]] else { continue };
                k[(ri, rj)] += ea_l * sign[i] * sign[j] * dir[i % 2] * dir[j % 2];
            }
        }
        let half_mass = 0.5 * e.density * e.area * len;
        for &d in &dofs {
            if let Some(r) = dof_map[d] {
                m[(r, r)] += half_mass;
            }
        }
    }
    let sys = SystemMatrices { mass: m, stiffness: k, dof_map };
    check_finite(&sys)?;
    let eig = SymmetricEigen::new(sys.stiffness.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::MAX, |acc, &v| acc.min(v));
    if !(min > 1e-10 * max) {
        return Err(Error::Assembly(format!(
            "stiffness matrix is singular (min eigenvalue {min:.3e}, max {max:.3e}): rigid-body or mechanism mode"
        )));
    }
    Ok(sys)
}

fn check_finite(sys: &SystemMatrices) -> Result<()> {
    if sys.mass.iter().chain(sys.stiffness.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Eigen("non-finite matrix entry".into()));
    }
    Ok(())
}

/// Mass-normalized eigenpairs of `K φ = ω² M φ`, ascending.
#[derive(Debug, Clone)]
pub struct EigenModes {
    pub omega_sq: Vec<f64>,
    /// Reduced-DOF eigenvectors, one column per mode, `φᵀ M φ = I`.
    pub vectors: DMatrix<f64>,
}

impl EigenModes {
    pub fn omegas(&self) -> Vec<f64> {
        self.omega_sq.iter().map(|w| w.sqrt()).collect()
    }

    pub fn frequencies_hz(&self) -> Vec<f64> {
        self.omega_sq.iter().map(|w| w.sqrt() / (2.0 * std::f64::consts::PI)).collect()
    }
}

pub fn solve_modes(sys: &SystemMatrices, n_modes: usize) -> Result<EigenModes> {
    let n = sys.n_dof();
    if n_modes == 0 || n_modes > n {
        return Err(Error::Eigen(format!("requested {n_modes} modes from {n} DOFs")));
    }
    check_finite(sys)?;
    let chol = sys
        .mass
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Eigen("mass matrix is not positive definite".into()))?;
    let l = chol.l();
    let l_inv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Eigen("mass factor is singular".into()))?;
    let mut a = &l_inv * &sys.stiffness * l_inv.transpose();
    a = 0.5 * (&a + a.transpose());
    let eig = SymmetricEigen::new(a);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let l_inv_t = l_inv.transpose();
    let mut omega_sq = Vec::with_capacity(n_modes);
    let mut vectors = DMatrix::<f64>::zeros(n, n_modes);
    for (col, &idx) in order.iter().take(n_modes).enumerate() {
        let lambda = eig.eigenvalues[idx];
        if !(lambda > 0.0) {
            return Err(Error::Eigen(format!("non-positive eigenvalue {lambda:.3e}")));
        }
        omega_sq.push(lambda);
        let v = &l_inv_t * eig.eigenvectors.column(idx);
        vectors.set_column(col, &v);
    }
    Ok(EigenModes { omega_sq, vectors })
}

/// Rayleigh modal damping `ζ = a0 / (2ω) + a1 ω / 2`, without range checks.
pub fn rayleigh_damping(a0: f64, a1: f64, omegas: &[f64]) -> Vec<f64> {
    omegas.iter().map(|&w| a0 / (2.0 * w) + a1 * w / 2.0).collect()
}

/// Rayleigh damping that rejects any ratio outside `(0, 1)` so the caller
/// can resample the coefficients.
pub fn assign_damping(a0: f64, a1: f64, omegas: &[f64]) -> Result<Vec<f64>> {
    if let Some(w) = omegas.iter().find(|w| !(**w > 0.0)) {
        return Err(Error::InvalidParams(format!("angular frequency must be positive, got {w}")));
    }
    let zeta = rayleigh_damping(a0, a1, omegas);
    for (mode, &z) in zeta.iter().enumerate() {
        if !(z > 0.0 && z < 1.0) {
            return Err(Error::Damping { mode, zeta: z });
        }
    }
    Ok(zeta)
}

/// Ground-truth modal properties for the first `M` modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalSolution {
    pub frequencies: Vec<f64>,
    pub damping: Vec<f64>,
    /// `N × M`: vertical displacement per node, unit columns.
    pub shapes: Array2<f64>,
    pub omegas: Vec<f64>,
}

impl ModalSolution {
    pub fn n_modes(&self) -> usize {
        self.frequencies.len()
    }
}

/// Vertical component of each eigenvector, one value per node (zero at
/// vertically fixed nodes), normalized to unit length with the largest
/// magnitude entry made positive.
pub fn extract_mode_shapes(truss: &TrussModel, sys: &SystemMatrices, modes: &EigenModes, n_modes: usize) -> Result<Array2<f64>> {
    let n = truss.n_nodes();
    if n_modes > modes.vectors.ncols() {
        return Err(Error::Shape(format!("{n_modes} shapes requested from {} modes", modes.vectors.ncols())));
    }
    let mut shapes = Array2::<f64>::zeros((n, n_modes));
    for m in 0..n_modes {
        for node in 0..n {
            if let Some(r) = sys.dof_map[2 * node + 1] {
                shapes[(node, m)] = modes.vectors[(r, m)];
            }
        }
        let mut col = shapes.column_mut(m);
        let norm = col.dot(&col).sqrt();
        if !(norm > 1e-300) {
            return Err(Error::Eigen(format!("mode {m} has no vertical motion")));
        }
        let mut peak = 0usize;
        for i in 0..n {
            if col[i].abs() > col[peak].abs() + 1e-12 * norm {
                peak = i;
            }
        }
        let scale = col[peak].signum() / norm;
        col.mapv_inplace(|v| v * scale);
    }
    Ok(shapes)
}

/// A truss together with everything needed to simulate and label it.
#[derive(Debug, Clone)]
pub struct Structure {
    pub truss: TrussModel,
    pub system: SystemMatrices,
    /// All eigenpairs, used for response simulation.
    pub modes: EigenModes,
    pub modal: ModalSolution,
}

impl Structure {
    /// Rayleigh damping of every computed mode (for simulation).
    pub fn all_damping(&self) -> Vec<f64> {
        rayleigh_damping(self.truss.rayleigh.a0, self.truss.rayleigh.a1, &self.modes.omegas())
    }
}

/// Generates truss `index` of the family keyed by `cfg.seed`, solves its
/// modes and draws Rayleigh coefficients until the first `M` damping ratios
/// land inside the configured band.
pub fn synthesize(index: u64, cfg: &TrussGenConfig) -> Result<Structure> {
    cfg.validate()?;
    let mut last_err = None;
    for attempt in 0..MAX_TRUSS_ATTEMPTS {
        let truss_seed = rng::derive_seed(cfg.seed, index, tag::TRUSS ^ attempt);
        let mut truss = generate_truss(truss_seed, cfg)?;
        let system = assemble_system(&truss)?;
        if system.n_dof() < cfg.n_modes {
            last_err = Some(Error::Generation("fewer DOFs than requested modes".into()));
            continue;
        }
        let modes = solve_modes(&system, system.n_dof())?;
        let omegas = modes.omegas();
        let target = &omegas[..cfg.n_modes];
        let mut rng = rng::stream(cfg.seed, index, tag::DAMPING ^ attempt);
        let mut damping = None;
        for _ in 0..MAX_DAMPING_ATTEMPTS {
            let a0 = cfg.rayleigh_a0.sample(&mut rng);
            let a1 = cfg.rayleigh_a1.sample(&mut rng);
            if let Ok(z) = assign_damping(a0, a1, target) {
                if z.iter().all(|&v| v >= cfg.damping_band.lo && v <= cfg.damping_band.hi) {
                    truss.rayleigh = Rayleigh { a0, a1 };
                    damping = Some(z);
                    break;
                }
            }
        }
        let Some(damping) = damping else {
            last_err = Some(Error::Generation("no Rayleigh coefficients inside the damping band".into()));
            continue;
        };
        let shapes = match extract_mode_shapes(&truss, &system, &modes, cfg.n_modes) {
            Ok(s) => s,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        let modal = ModalSolution {
            frequencies: modes.frequencies_hz()[..cfg.n_modes].to_vec(),
            damping,
            shapes,
            omegas: target.to_vec(),
        };
        return Ok(Structure { truss, system, modes, modal });
    }
    Err(last_err.unwrap_or_else(|| Error::Generation(format!("truss {index} could not be synthesized"))))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_bar() -> TrussModel {
        // node 0 pinned, node 1 restrained vertically: one axial DOF left
        TrussModel {
            coords: vec![[0.0, 0.0], [2.0, 0.0]],
            elements: vec![Element { nodes: [0, 1], youngs_modulus: 200e9, area: 1e-3, density: 7850.0 }],
            support_mask: vec![true, true, false, true],
            rayleigh: Rayleigh::default(),
        }
    }

    #[test]
    fn single_bar_reduces_to_one_dof() {
        let sys = assemble_system(&single_bar()).unwrap();
        assert_eq!(sys.n_dof(), 1);
        let ea_l = 200e9 * 1e-3 / 2.0;
        let m = 7850.0 * 1e-3 * 2.0 / 2.0;
        assert!((sys.stiffness[(0, 0)] - ea_l).abs() < 1e-6 * ea_l);
        assert!((sys.mass[(0, 0)] - m).abs() < 1e-12 * m);
    }

    #[test]
    fn unsupported_truss_is_flagged() {
        let mut t = single_bar();
        t.support_mask = vec![false; 4];
        assert!(matches!(assemble_system(&t), Err(Error::Assembly(_))));
    }

    #[test]
    fn zero_length_element_rejected() {
        let mut t = single_bar();
        t.coords[1] = [0.0, 0.0];
        assert!(assemble_system(&t).is_err());
    }

    #[test]
    fn decoupled_dofs_give_sqrt_k() {
        let k = [4.0, 1.0, 9.0];
        let sys = SystemMatrices {
            mass: DMatrix::identity(3, 3),
            stiffness: DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&k)),
            dof_map: vec![Some(0), Some(1), Some(2)],
        };
        let modes = solve_modes(&sys, 3).unwrap();
        let f = modes.frequencies_hz();
        let expect = [1.0f64, 2.0, 3.0].map(|s| s / (2.0 * std::f64::consts::PI));
        for (a, b) in f.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(solve_modes(&sys, 4).is_err());
    }

    #[test]
    fn damping_examples() {
        assert_eq!(rayleigh_damping(0.0, 0.0, &[3.0, 7.0]), vec![0.0, 0.0]);
        assert!(assign_damping(0.0, 0.0, &[3.0]).is_err());
        let w1 = 12.5;
        let z = rayleigh_damping(2.0 * w1, 0.0, &[w1]);
        assert!((z[0] - 1.0).abs() < 1e-15);
        assert!(assign_damping(2.0 * w1, 0.0, &[w1]).is_err());
        let z = assign_damping(0.5, 1e-4, &[10.0]).unwrap();
        assert!((z[0] - 0.0255).abs() < 1e-15);
    }

    #[test]
    fn degenerate_trapezoid_rejected() {
        let cfg = TrussGenConfig {
            trapezoid: [[0.0, 0.0], [10.0, 0.0], [8.0, 0.0], [2.0, 0.0]],
            ..Default::default()
        };
        assert!(matches!(generate_truss(42, &cfg), Err(Error::Generation(_))));
    }

    #[test]
    fn delaunay_square_has_two_triangles() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.1], [0.0, 1.0]];
        let tris = delaunay(&pts);
        assert_eq!(tris.len(), 2);
    }

    #[test]
    fn shapes_are_unit_and_sign_fixed() {
        let s = synthesize(0, &TrussGenConfig::default()).unwrap();
        for col in s.modal.shapes.columns() {
            assert!((col.dot(&col) - 1.0).abs() < 1e-12);
            let peak = col.iter().cloned().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            assert!(peak > 0.0);
        }
        assert!(s.modal.frequencies.windows(2).all(|w| w[0] < w[1]));
        assert!(s.modal.damping.iter().all(|&z| (0.005..=0.05).contains(&z)));
    }
}
