//! Electrode projection and EEG video rendering.
//!
//! Electrodes are mapped to the plane with an azimuthal equidistant
//! projection about the montage vertex, triangulated, and every
//! time-segment snapshot of channel values is interpolated onto a square
//! pixel grid with Clough–Tocher patches.

pub mod clough_tocher;
pub mod delaunay;

use ndarray::{Array2, Array4};

use crate::bandfilter::EpochBands;
use crate::error::{Error, Result};
use crate::ingest::Montage;

pub use clough_tocher::CloughTocher;
pub use delaunay::{triangulate, Triangulation};

/// Default number of video frames per epoch.
pub const FRAMES: usize = 13;
/// Default frame resolution (pixels per side).
pub const GRID: usize = 32;

const ANTIPODE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedMontage {
    /// Plane coordinates in radians, montage order.
    pub points: Vec<[f64; 2]>,
    pub center: [f64; 3],
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot3(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Tangent basis at `center`: `e1` is the projection of the x axis (or the
/// y axis when the center is nearly parallel to x), `e2 = center × e1`.
pub fn tangent_basis(center: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let reference = if center[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let along = dot3(reference, center);
    let e1 = normalize([
        reference[0] - along * center[0],
        reference[1] - along * center[1],
        reference[2] - along * center[2],
    ]);
    (e1, cross(center, e1))
}

/// Direction of the topmost electrode (largest z), the conventional map
/// center.
pub fn vertex_center(montage: &Montage) -> [f64; 3] {
    montage
        .positions()
        .max_by(|a, b| a[2].total_cmp(&b[2]))
        .map(normalize)
        .unwrap_or([0.0, 0.0, 1.0])
}

/// Azimuthal equidistant projection about `center`: an electrode at
/// great-circle angle `ρ` and tangent-plane azimuth `θ` maps to
/// `(ρ cos θ, ρ sin θ)`.
pub fn aep_project(montage: &Montage, center: [f64; 3]) -> Result<ProjectedMontage> {
    let norm = dot3(center, center).sqrt();
    if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("projection center must be a unit vector (norm {norm})")));
    }
    let center = normalize(center);
    let (e1, e2) = tangent_basis(center);
    let mut points = Vec::with_capacity(montage.len());
    for e in montage.electrodes() {
        let p = normalize(e.pos);
        let cos_rho = dot3(p, center);
        let sin_rho = dot3(cross(p, center), cross(p, center)).sqrt();
        let rho = sin_rho.atan2(cos_rho);
        if std::f64::consts::PI - rho < ANTIPODE_TOL {
            return Err(Error::invalid(format!(
                "electrode {:?} is antipodal to the projection center",
                e.name
            )));
        }
        if sin_rho == 0.0 {
            points.push([0.0, 0.0]);
            continue;
        }
        let (x, y) = (dot3(p, e1), dot3(p, e2));
        let r = (x * x + y * y).sqrt();
        points.push([rho * x / r, rho * y / r]);
    }
    Ok(ProjectedMontage { points, center })
}

/// Square pixel grid; row 0 is the top (largest v), column 0 the left.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub size: usize,
    pub u0: f64,
    pub v_top: f64,
    pub step: f64,
}

impl GridSpec {
    /// Tight bounding square of the points plus a 5% margin on each side.
    pub fn fit(points: &[[f64; 2]], size: usize) -> GridSpec {
        let (mut umin, mut umax, mut vmin, mut vmax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in points {
            umin = umin.min(p[0]);
            umax = umax.max(p[0]);
            vmin = vmin.min(p[1]);
            vmax = vmax.max(p[1]);
        }
        let side = (umax - umin).max(vmax - vmin) * 1.1;
        let (uc, vc) = ((umin + umax) / 2.0, (vmin + vmax) / 2.0);
        GridSpec {
            size,
            u0: uc - side / 2.0,
            v_top: vc + side / 2.0,
            step: side / size as f64,
        }
    }

    /// Plane coordinates of the center of pixel (row, col).
    pub fn pixel_center(&self, row: usize, col: usize) -> [f64; 2] {
        [
            self.u0 + (col as f64 + 0.5) * self.step,
            self.v_top - (row as f64 + 0.5) * self.step,
        ]
    }
}

/// Evaluates the Clough–Tocher interpolant of `values` at every grid pixel
/// center; pixels outside the convex hull are 0.
pub fn ct_interpolate(tri: &Triangulation, values: &[f64], grid: &GridSpec) -> Result<Array2<f64>> {
    let ct = CloughTocher::new(tri, values)?;
    Ok(Array2::from_shape_fn((grid.size, grid.size), |(r, c)| {
        ct.eval(grid.pixel_center(r, c)).unwrap_or(0.0)
    }))
}

/// The Clough–Tocher interpolant is linear in the electrode values, so for
/// a fixed montage and grid it is a pixels × electrodes matrix. Built once
/// per montage and shared by every frame.
#[derive(Debug, Clone)]
pub struct TopoMapper {
    pub projection: ProjectedMontage,
    pub triangulation: Triangulation,
    pub grid: GridSpec,
    weights: Array2<f64>,
    inside: Vec<bool>,
}

impl TopoMapper {
    pub fn new(montage: &Montage, size: usize) -> Result<Self> {
        let projection = aep_project(montage, vertex_center(montage))?;
        Self::from_projection(projection, size)
    }

    pub fn from_projection(projection: ProjectedMontage, size: usize) -> Result<Self> {
        let triangulation = triangulate(&projection.points)?;
        let grid = GridSpec::fit(&projection.points, size);
        let n = projection.points.len();
        let pixels: Vec<Option<(usize, [f64; 2])>> = (0..size * size)
            .map(|i| {
                let p = grid.pixel_center(i / size, i % size);
                triangulation.locate(p).map(|(t, _)| (t, p))
            })
            .collect();
        let mut weights = Array2::zeros((size * size, n));
        let mut unit = vec![0.0; n];
        for e in 0..n {
            unit[e] = 1.0;
            let ct = CloughTocher::new(&triangulation, &unit)?;
            for (i, px) in pixels.iter().enumerate() {
                if let Some((t, p)) = px {
                    weights[[i, e]] = ct.eval_in(*t, *p);
                }
            }
            unit[e] = 0.0;
        }
        let inside = pixels.iter().map(Option::is_some).collect();
        Ok(TopoMapper {
            projection,
            triangulation,
            grid,
            weights,
            inside,
        })
    }

    pub fn size(&self) -> usize {
        self.grid.size
    }

    pub fn channels(&self) -> usize {
        self.weights.ncols()
    }

    /// Whether pixel (row, col) lies inside the convex hull.
    pub fn inside(&self, row: usize, col: usize) -> bool {
        self.inside[row * self.grid.size + col]
    }

    /// Interpolated frame for one snapshot of channel values.
    pub fn frame(&self, values: &[f64]) -> Result<Array2<f64>> {
        if values.len() != self.channels() {
            return Err(Error::invalid(format!(
                "expected {} channel values, got {}",
                self.channels(),
                values.len()
            )));
        }
        let v = ndarray::ArrayView1::from(values);
        let flat = self.weights.dot(&v);
        Ok(flat.into_shape_with_order((self.grid.size, self.grid.size)).expect("grid shape"))
    }
}

/// How each time segment is reduced to one value per channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SegmentStat {
    #[default]
    Amplitude,
    Power,
}

/// Per-band interpolated frames, `bands × frames × size × size`.
#[derive(Debug, Clone, PartialEq)]
pub struct EegVideo {
    pub data: Array4<f64>,
}

impl EegVideo {
    pub fn bands(&self) -> usize {
        self.data.dim().0
    }

    pub fn frames(&self) -> usize {
        self.data.dim().1
    }

    pub fn frame(&self, band: usize, t: usize) -> Array2<f64> {
        self.data.slice(ndarray::s![band, t, .., ..]).to_owned()
    }
}

/// Segment `t` of `frames` over `len` samples: `[t·len/frames, (t+1)·len/frames)`.
pub fn segment_bounds(len: usize, frames: usize, t: usize) -> (usize, usize) {
    (t * len / frames, (t + 1) * len / frames)
}

/// Splits each band into `frames` contiguous segments, reduces each
/// channel per segment, and interpolates every snapshot.
pub fn render_video(bands: &EpochBands, mapper: &TopoMapper, frames: usize, stat: SegmentStat) -> Result<EegVideo> {
    let len = bands.len();
    if frames == 0 || len < frames {
        return Err(Error::invalid(format!("epoch of {len} samples cannot form {frames} frames")));
    }
    let size = mapper.size();
    let mut data = Array4::zeros((bands.bands.len(), frames, size, size));
    let mut snapshot = vec![0.0; mapper.channels()];
    for (b, band) in bands.bands.iter().enumerate() {
        if band.nrows() != mapper.channels() {
            return Err(Error::invalid(format!(
                "band has {} channels, montage has {}",
                band.nrows(),
                mapper.channels()
            )));
        }
        for t in 0..frames {
            let (lo, hi) = segment_bounds(len, frames, t);
            let n = (hi - lo) as f64;
            for (c, s) in snapshot.iter_mut().enumerate() {
                let seg = band.slice(ndarray::s![c, lo..hi]);
                *s = match stat {
                    SegmentStat::Amplitude => seg.sum() / n,
                    SegmentStat::Power => seg.iter().map(|v| v * v).sum::<f64>() / n,
                };
            }
            let frame = mapper.frame(&snapshot)?;
            data.slice_mut(ndarray::s![b, t, .., ..]).assign(&frame);
        }
    }
    Ok(EegVideo { data })
}
