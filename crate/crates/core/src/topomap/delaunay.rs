//! Planar Delaunay triangulation for small point sets.
//!
//! Points are inserted in lexicographic order, each new point attached to
//! the visible part of the current convex hull, and the result is made
//! Delaunay with Lawson edge flips.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Signed twice-area of (a, b, c); positive when counter-clockwise.
pub fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// Positive when `d` lies strictly inside the circumcircle of the
/// counter-clockwise triangle (a, b, c).
pub fn incircle(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> f64 {
    let row = |p: [f64; 2]| {
        let (x, y) = (p[0] - d[0], p[1] - d[1]);
        (x, y, x * x + y * y)
    };
    let (ax, ay, aw) = row(a);
    let (bx, by, bw) = row(b);
    let (cx, cy, cw) = row(c);
    ax * (by * cw - bw * cy) - ay * (bx * cw - bw * cx) + aw * (bx * cy - by * cx)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Triangulation {
    pub points: Vec<[f64; 2]>,
    /// Counter-clockwise vertex triples.
    pub triangles: Vec<[usize; 3]>,
    /// Convex hull, counter-clockwise, including collinear boundary points.
    pub hull: Vec<usize>,
}

impl Triangulation {
    /// Barycentric coordinates of `p` in triangle `t`.
    pub fn barycentric(&self, t: usize, p: [f64; 2]) -> [f64; 3] {
        let [i, j, k] = self.triangles[t];
        let (a, b, c) = (self.points[i], self.points[j], self.points[k]);
        let area = orient(a, b, c);
        [orient(p, b, c) / area, orient(a, p, c) / area, orient(a, b, p) / area]
    }

    /// First triangle containing `p` (boundary inclusive) with its
    /// barycentric coordinates.
    pub fn locate(&self, p: [f64; 2]) -> Option<(usize, [f64; 3])> {
        const EPS: f64 = 1e-12;
        (0..self.triangles.len()).find_map(|t| {
            let l = self.barycentric(t, p);
            l.iter().all(|&v| v >= -EPS).then_some((t, l))
        })
    }

    /// Undirected edges, each once, as (min, max).
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut edges: Vec<_> = self
            .triangles
            .iter()
            .flat_map(|t| (0..3).map(move |e| (t[e].min(t[(e + 1) % 3]), t[e].max(t[(e + 1) % 3]))))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut nb = vec![Vec::new(); self.points.len()];
        for (a, b) in self.edges() {
            nb[a].push(b);
            nb[b].push(a);
        }
        nb
    }
}

fn ccw(points: &[[f64; 2]], t: [usize; 3]) -> [usize; 3] {
    if orient(points[t[0]], points[t[1]], points[t[2]]) < 0.0 {
        [t[0], t[2], t[1]]
    } else {
        t
    }
}

pub fn triangulate(points: &[[f64; 2]]) -> Result<Triangulation> {
    let n = points.len();
    if n < 3 {
        return Err(Error::invalid(format!("triangulation needs at least 3 points, got {n}")));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite point"));
    }
    let scale = points
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    let eps = 1e-12 * scale * scale;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        points[a][0]
            .total_cmp(&points[b][0])
            .then(points[a][1].total_cmp(&points[b][1]))
    });
    for w in order.windows(2) {
        let (p, q) = (points[w[0]], points[w[1]]);
        if (p[0] - q[0]).abs() <= 1e-12 * scale && (p[1] - q[1]).abs() <= 1e-12 * scale {
            return Err(Error::invalid(format!("duplicate points {} and {}", w[0], w[1])));
        }
    }

    let p0 = points[order[0]];
    let p1 = points[order[1]];
    let k = (2..n)
        .find(|&k| orient(p0, p1, points[order[k]]).abs() > eps)
        .ok_or_else(|| Error::invalid("all points are collinear"))?;
    let apex = order[k];
    let mut triangles: Vec<[usize; 3]> = (0..k - 1)
        .map(|i| ccw(points, [order[i], order[i + 1], apex]))
        .collect();
    let mut hull: Vec<usize> = if orient(p0, p1, points[apex]) > 0.0 {
        order[..k].iter().copied().chain([apex]).collect()
    } else {
        order[..k].iter().rev().copied().chain([apex]).collect()
    };

    for &pi in &order[k + 1..] {
        let p = points[pi];
        let m = hull.len();
        let visible: Vec<bool> = (0..m)
            .map(|i| orient(points[hull[i]], points[hull[(i + 1) % m]], p) < -eps)
            .collect();
        let start = (0..m)
            .find(|&i| visible[i] && !visible[(i + m - 1) % m])
            .ok_or_else(|| Error::invalid("degenerate point configuration"))?;
        let run = (0..m).take_while(|&r| visible[(start + r) % m]).count();
        for r in 0..run {
            let a = hull[(start + r) % m];
            let b = hull[(start + r + 1) % m];
            triangles.push(ccw(points, [a, b, pi]));
        }
        // drop the hull vertices strictly inside the visible chain
        let mut next = Vec::with_capacity(m + 1);
        let keep_from = (start + run) % m;
        let kept = m - (run - 1);
        for r in 0..kept {
            next.push(hull[(keep_from + r) % m]);
        }
        next.push(pi);
        hull = next;
    }

    lawson_flip(points, &mut triangles, eps * scale * scale);
    Ok(Triangulation {
        points: points.to_vec(),
        triangles,
        hull,
    })
}

fn lawson_flip(points: &[[f64; 2]], triangles: &mut [[usize; 3]], eps: f64) {
    loop {
        let mut edge_owner: HashMap<(usize, usize), (usize, usize)> = HashMap::new();
        for (t, tri) in triangles.iter().enumerate() {
            for e in 0..3 {
                edge_owner.insert((tri[e], tri[(e + 1) % 3]), (t, (e + 2) % 3));
            }
        }
        let mut touched = vec![false; triangles.len()];
        let mut flipped = false;
        for t1 in 0..triangles.len() {
            for e in 0..3 {
                if touched[t1] {
                    break;
                }
                let tri = triangles[t1];
                let (a, b, c) = (tri[e], tri[(e + 1) % 3], tri[(e + 2) % 3]);
                let Some(&(t2, opp)) = edge_owner.get(&(b, a)) else {
                    continue;
                };
                if touched[t2] {
                    continue;
                }
                let d = triangles[t2][opp];
                if incircle(points[a], points[b], points[c], points[d]) > eps {
                    triangles[t1] = ccw(points, [c, a, d]);
                    triangles[t2] = ccw(points, [d, b, c]);
                    touched[t1] = true;
                    touched[t2] = true;
                    flipped = true;
                }
            }
        }
        if !flipped {
            break;
        }
    }
}
