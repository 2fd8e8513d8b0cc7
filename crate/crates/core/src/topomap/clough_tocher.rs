//! Clough–Tocher C1 piecewise-cubic interpolation on a triangulation.
//!
//! Every triangle is split at its centroid into three cubic Bézier
//! patches. Vertex gradients come from a weighted least-squares plane fit
//! over incident edges. The inner control points follow from C1 continuity
//! across the split edges, and the edge-adjacent ones from requiring the
//! normal derivative along every outer edge to be linear, which makes
//! neighbouring macro-triangles join with C1 continuity.

use super::delaunay::Triangulation;
use crate::error::{Error, Result};

/// Least-squares vertex gradients: for vertex `i`, minimise
/// `Σ_j w_ij (f_j - f_i - g·(p_j - p_i))²` with `w_ij = 1/|p_j - p_i|²`
/// over the triangulation neighbours `j`.
pub fn estimate_gradients(tri: &Triangulation, values: &[f64]) -> Vec<[f64; 2]> {
    let neighbors = tri.neighbors();
    neighbors
        .iter()
        .enumerate()
        .map(|(i, nb)| {
            let (mut sxx, mut sxy, mut syy, mut rx, mut ry) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for &j in nb {
                let dx = tri.points[j][0] - tri.points[i][0];
                let dy = tri.points[j][1] - tri.points[i][1];
                let w = 1.0 / (dx * dx + dy * dy);
                let df = values[j] - values[i];
                sxx += w * dx * dx;
                sxy += w * dx * dy;
                syy += w * dy * dy;
                rx += w * dx * df;
                ry += w * dy * df;
            }
            let det = sxx * syy - sxy * sxy;
            if det.abs() <= 1e-14 * (sxx + syy).powi(2) {
                return [0.0, 0.0];
            }
            [(syy * rx - sxy * ry) / det, (sxx * ry - sxy * rx) / det]
        })
        .collect()
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

/// Control net of one macro-triangle (vertices `P0, P1, P2`, centroid `C`).
#[derive(Debug, Clone, Copy)]
struct MacroPatch {
    /// f at `P_i`.
    vertex: [f64; 3],
    /// `edge[i][0]`: point at `(2P_i + P_j)/3`, `edge[i][1]`: at
    /// `(P_i + 2P_j)/3`, with `j = i + 1`.
    edge: [[f64; 2]; 3],
    /// Point at `(2P_i + C)/3`.
    inner: [f64; 3],
    /// Point at `(P_i + P_j + C)/3`, `j = i + 1`.
    mid: [f64; 3],
    /// Point at `(P_i + 2C)/3`.
    ring: [f64; 3],
    center: f64,
}

impl MacroPatch {
    fn build(p: [[f64; 2]; 3], f: [f64; 3], g: [[f64; 2]; 3]) -> Self {
        let c = [(p[0][0] + p[1][0] + p[2][0]) / 3.0, (p[0][1] + p[1][1] + p[2][1]) / 3.0];
        let mut edge = [[0.0; 2]; 3];
        let mut inner = [0.0; 3];
        for i in 0..3 {
            let j = (i + 1) % 3;
            edge[i][0] = f[i] + dot(g[i], sub(p[j], p[i])) / 3.0;
            edge[i][1] = f[j] + dot(g[j], sub(p[i], p[j])) / 3.0;
            inner[i] = f[i] + dot(g[i], sub(c, p[i])) / 3.0;
        }

        // Normal direction w = C - (1-s) P_i - s P_j is perpendicular to
        // edge ij; linear normal derivative fixes the mid control point.
        let mut mid = [0.0; 3];
        for i in 0..3 {
            let j = (i + 1) % 3;
            let e = sub(p[j], p[i]);
            let s = dot(sub(c, p[i]), e) / dot(e, e);
            let (eij, eji) = (edge[i][0], edge[i][1]);
            let d0 = -(1.0 - s) * f[i] - s * eij + inner[i];
            let d2 = -(1.0 - s) * eji - s * f[j] + inner[j];
            mid[i] = 0.5 * (d0 + d2) + (1.0 - s) * eij + s * eji;
        }

        let mut ring = [0.0; 3];
        for i in 0..3 {
            let k = (i + 2) % 3;
            ring[i] = (inner[i] + mid[i] + mid[k]) / 3.0;
        }
        let center = (ring[0] + ring[1] + ring[2]) / 3.0;
        MacroPatch {
            vertex: f,
            edge,
            inner,
            mid,
            ring,
            center,
        }
    }

    /// Evaluates at macro barycentric coordinates `l`.
    fn eval(&self, l: [f64; 3]) -> f64 {
        // sub-triangle (P_i, P_j, C) lies opposite the smallest coordinate
        let k = (0..3).min_by(|&a, &b| l[a].total_cmp(&l[b])).unwrap();
        let i = (k + 1) % 3;
        let j = (k + 2) % 3;
        let (u, v, w) = (l[i] - l[k], l[j] - l[k], 3.0 * l[k]);

        let b300 = self.vertex[i];
        let b030 = self.vertex[j];
        let b003 = self.center;
        let b210 = self.edge[i][0];
        let b120 = self.edge[i][1];
        let b201 = self.inner[i];
        let b021 = self.inner[j];
        let b111 = self.mid[i];
        let b102 = self.ring[i];
        let b012 = self.ring[j];

        b300 * u * u * u
            + b030 * v * v * v
            + b003 * w * w * w
            + 3.0 * (b210 * u * u * v + b120 * u * v * v + b201 * u * u * w + b021 * v * v * w)
            + 3.0 * (b102 * u * w * w + b012 * v * w * w)
            + 6.0 * b111 * u * v * w
    }
}

/// Clough–Tocher interpolant of per-vertex values.
#[derive(Debug, Clone)]
pub struct CloughTocher<'a> {
    tri: &'a Triangulation,
    patches: Vec<MacroPatch>,
}

impl<'a> CloughTocher<'a> {
    pub fn new(tri: &'a Triangulation, values: &[f64]) -> Result<Self> {
        let grads = estimate_gradients(tri, values);
        Self::with_gradients(tri, values, &grads)
    }

    pub fn with_gradients(tri: &'a Triangulation, values: &[f64], grads: &[[f64; 2]]) -> Result<Self> {
        if values.len() != tri.points.len() || grads.len() != tri.points.len() {
            return Err(Error::invalid(format!(
                "expected {} values, got {}",
                tri.points.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite value at electrode {i}")));
        }
        let patches = tri
            .triangles
            .iter()
            .map(|&[a, b, c]| {
                let p = [tri.points[a], tri.points[b], tri.points[c]];
                if super::delaunay::orient(p[0], p[1], p[2]).abs() < 1e-300 {
                    return Err(Error::invalid("degenerate triangle"));
                }
                Ok(MacroPatch::build(p, [values[a], values[b], values[c]], [grads[a], grads[b], grads[c]]))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CloughTocher { tri, patches })
    }

    /// Value at `p`, or `None` outside the convex hull.
    pub fn eval(&self, p: [f64; 2]) -> Option<f64> {
        self.tri.locate(p).map(|(t, l)| self.patches[t].eval(l))
    }

    /// Value at `p` using triangle `t` (extrapolating if `p` is outside).
    pub fn eval_in(&self, t: usize, p: [f64; 2]) -> f64 {
        self.patches[t].eval(self.tri.barycentric(t, p))
    }
}

/// Piecewise-linear interpolation on the same triangulation.
pub fn linear_eval(tri: &Triangulation, values: &[f64], p: [f64; 2]) -> Option<f64> {
    let (t, l) = tri.locate(p)?;
    let [a, b, c] = tri.triangles[t];
    Some(l[0] * values[a] + l[1] * values[b] + l[2] * values[c])
}
