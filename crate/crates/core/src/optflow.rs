//! Two-frame Farnebäck optical flow over EEG video, plus the u8 and HSV
//! encodings used for storage and figures.
//!
//! Each frame is locally approximated by `f(x) ≈ xᵀAx + bᵀx + c` with a
//! Gaussian-weighted least-squares fit. For a displacement `d` between
//! frames, `b₂ = b₁ − 2Ad`, so `d` solves `A d = −(b₂ − b₁)/2`, which is
//! accumulated over a smoothing window and refined by warping the second
//! frame's expansion with the current estimate.

use ndarray::{Array2, Array5};

use crate::error::{Error, Result};
use crate::formats::pnm::RgbImage;
use crate::topomap::EegVideo;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FarnebackParams {
    /// Gaussian applicability width of the polynomial expansion.
    pub sigma: f64,
    /// Half-size of the expansion neighborhood.
    pub radius: usize,
    /// Half-size of the displacement averaging window; also bounds the
    /// flow magnitude.
    pub smooth_radius: usize,
    pub iterations: usize,
    /// Relative Tikhonov term added to the averaged normal matrix.
    pub epsilon: f64,
}

impl Default for FarnebackParams {
    fn default() -> Self {
        FarnebackParams {
            sigma: 1.1,
            radius: 3,
            smooth_radius: 5,
            iterations: 3,
            epsilon: 1e-6,
        }
    }
}

impl FarnebackParams {
    pub fn validate(&self) -> Result<()> {
        if self.radius < 1 || self.smooth_radius < 1 || self.iterations < 1 || !(self.sigma > 0.0) {
            return Err(Error::invalid(format!("invalid flow parameters {self:?}")));
        }
        Ok(())
    }
}

/// Per-pixel quadratic coefficients, stored as `[c, bx, by, axx, ayy, axy]`
/// so that `f(x, y) ≈ c + bx·x + by·y + axx·x² + ayy·y² + axy·xy`, with `x`
/// the column offset and `y` the row offset.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyExpansion {
    pub height: usize,
    pub width: usize,
    pub coeffs: Vec<[f64; 6]>,
}

impl PolyExpansion {
    pub fn c(&self, row: usize, col: usize) -> f64 {
        self.coeffs[row * self.width + col][0]
    }

    pub fn b(&self, row: usize, col: usize) -> [f64; 2] {
        let k = &self.coeffs[row * self.width + col];
        [k[1], k[2]]
    }

    /// Symmetric 2×2 quadratic form, `[[axx, axy/2], [axy/2, ayy]]`.
    pub fn a(&self, row: usize, col: usize) -> [[f64; 2]; 2] {
        let k = &self.coeffs[row * self.width + col];
        [[k[3], k[5] / 2.0], [k[5] / 2.0, k[4]]]
    }

    /// Bilinear sample of (A, b) at a fractional position, clamped to the
    /// frame.
    fn sample(&self, y: f64, x: f64) -> ([f64; 3], [f64; 2]) {
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let mut out = [0.0; 6];
        for (r, c, w) in [
            (y0, x0, (1.0 - fy) * (1.0 - fx)),
            (y0, x1, (1.0 - fy) * fx),
            (y1, x0, fy * (1.0 - fx)),
            (y1, x1, fy * fx),
        ] {
            let k = &self.coeffs[r * self.width + c];
            for (o, v) in out.iter_mut().zip(k) {
                *o += w * v;
            }
        }
        ([out[3], out[5] / 2.0, out[4]], [out[1], out[2]])
    }
}

/// Reflects an out-of-range index back into `[0, n)` without repeating the
/// edge sample.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

fn gaussian(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    (-r..=r)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Solves the small dense system `m x = rhs` in place by Gaussian
/// elimination with partial pivoting.
pub(crate) fn solve_dense<const N: usize>(mut m: [[f64; N]; N], mut rhs: [f64; N]) -> Option<[f64; N]> {
    for col in 0..N {
        let piv = (col..N).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[piv][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, piv);
        rhs.swap(col, piv);
        for row in col + 1..N {
            let f = m[row][col] / m[col][col];
            for k in col..N {
                m[row][k] -= f * m[col][k];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = [0.0; N];
    for row in (0..N).rev() {
        let s: f64 = (row + 1..N).map(|k| m[row][k] * x[k]).sum();
        x[row] = (rhs[row] - s) / m[row][row];
    }
    Some(x)
}

/// Inverse of the 6×6 weighted Gram matrix of the quadratic basis.
fn expansion_inverse(sigma: f64, radius: usize) -> [[f64; 6]; 6] {
    let g = gaussian(sigma, radius);
    let total: f64 = g.iter().sum::<f64>().powi(2);
    let r = radius as isize;
    let mut gram = [[0.0; 6]; 6];
    for (iy, y) in (-r..=r).enumerate() {
        for (ix, x) in (-r..=r).enumerate() {
            let w = g[iy] * g[ix] / total;
            let (x, y) = (x as f64, y as f64);
            let phi = [1.0, x, y, x * x, y * y, x * y];
            for a in 0..6 {
                for b in 0..6 {
                    gram[a][b] += w * phi[a] * phi[b];
                }
            }
        }
    }
    let mut inv = [[0.0; 6]; 6];
    for col in 0..6 {
        let mut e = [0.0; 6];
        e[col] = 1.0;
        let x = solve_dense(gram, e).expect("quadratic basis Gram matrix is nonsingular");
        for row in 0..6 {
            inv[row][col] = x[row];
        }
    }
    inv
}

/// Separable correlation of `src` (h×w, row-major) with `kx` along rows and
/// `ky` along columns, reflecting at the borders.
fn correlate(src: &[f64], h: usize, w: usize, kx: &[f64], ky: &[f64]) -> Vec<f64> {
    let r = kx.len() / 2;
    let mut padded = vec![0.0; w + 2 * r];
    let mut tmp = vec![0.0; h * w];
    for row in 0..h {
        for (i, p) in padded.iter_mut().enumerate() {
            *p = src[row * w + reflect(i as isize - r as isize, w)];
        }
        let dst = &mut tmp[row * w..(row + 1) * w];
        for (j, &kv) in kx.iter().enumerate() {
            axpy_shifted(dst, &padded[j..j + w], kv, 0);
        }
    }
    let mut out = vec![0.0; h * w];
    for row in 0..h {
        for (k, &kv) in ky.iter().enumerate() {
            let src_row = reflect(row as isize + k as isize - r as isize, h);
            axpy_shifted(&mut out[row * w..(row + 1) * w], &tmp[src_row * w..(src_row + 1) * w], kv, 0);
        }
    }
    out
}

/// Gaussian-weighted least-squares quadratic fit at every pixel over the
/// `(2r+1)²` neighborhood, borders sampled by reflection.
pub fn poly_expansion(frame: &Array2<f64>, sigma: f64, radius: usize) -> PolyExpansion {
    let (h, w) = frame.dim();
    let src: Vec<f64> = frame.iter().copied().collect();
    let inv = expansion_inverse(sigma, radius);
    let g = gaussian(sigma, radius);
    let total: f64 = g.iter().sum::<f64>().powi(2);
    let g: Vec<f64> = g.iter().map(|v| v / total.sqrt()).collect();
    let r = radius as isize;
    let xg: Vec<f64> = (-r..=r).zip(&g).map(|(x, v)| x as f64 * v).collect();
    let xxg: Vec<f64> = (-r..=r).zip(&g).map(|(x, v)| (x * x) as f64 * v).collect();

    // moments Σ w φ_m f for φ = [1, x, y, x², y², xy]
    let moments = [
        correlate(&src, h, w, &g, &g),
        correlate(&src, h, w, &xg, &g),
        correlate(&src, h, w, &g, &xg),
        correlate(&src, h, w, &xxg, &g),
        correlate(&src, h, w, &g, &xxg),
        correlate(&src, h, w, &xg, &xg),
    ];
    let coeffs = (0..h * w)
        .map(|p| {
            let mut k = [0.0; 6];
            for (a, ka) in k.iter_mut().enumerate() {
                *ka = (0..6).map(|b| inv[a][b] * moments[b][p]).sum();
            }
            k
        })
        .collect();
    PolyExpansion { height: h, width: w, coeffs }
}

/// Dense displacement field in pixels per frame step; `dx` along columns,
/// `dy` along rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub dx: Array2<f64>,
    pub dy: Array2<f64>,
}

impl FlowField {
    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField {
            dx: Array2::zeros((h, w)),
            dy: Array2::zeros((h, w)),
        }
    }

    pub fn max_magnitude(&self) -> f64 {
        self.dx
            .iter()
            .zip(self.dy.iter())
            .map(|(x, y)| x.hypot(*y))
            .fold(0.0, f64::max)
    }
}

/// `dst[i] += k · src[i + shift]` wherever both indices are in range.
fn axpy_shifted(dst: &mut [f64], src: &[f64], k: f64, shift: isize) {
    let n = dst.len();
    let s = shift.unsigned_abs();
    if s >= n {
        return;
    }
    let (d, src) = if shift >= 0 { (&mut dst[..n - s], &src[s..]) } else { (&mut dst[s..], &src[..n - s]) };
    for (d, v) in d.iter_mut().zip(src) {
        *d += k * v;
    }
}

/// Truncated separable smoothing of several planes at once.
fn smooth_planes(planes: &mut [Vec<f64>], h: usize, w: usize, kernel: &[f64]) {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for plane in planes.iter_mut() {
        tmp.fill(0.0);
        for row in 0..h {
            let span = row * w..(row + 1) * w;
            for (j, &kv) in kernel.iter().enumerate() {
                axpy_shifted(&mut tmp[span.clone()], &plane[span.clone()], kv, j as isize - r);
            }
        }
        plane.fill(0.0);
        for row in 0..h {
            for (j, &kv) in kernel.iter().enumerate() {
                let src = row as isize + j as isize - r;
                if (0..h as isize).contains(&src) {
                    let src = src as usize;
                    axpy_shifted(&mut plane[row * w..(row + 1) * w], &tmp[src * w..(src + 1) * w], kv, 0);
                }
            }
        }
    }
}

/// Farnebäck displacement from expansions of two frames.
pub fn flow_from_expansions(e1: &PolyExpansion, e2: &PolyExpansion, params: &FarnebackParams) -> Result<FlowField> {
    params.validate()?;
    if (e1.height, e1.width) != (e2.height, e2.width) {
        return Err(Error::invalid("flow frames differ in shape"));
    }
    let (h, w) = (e1.height, e1.width);
    let n = h * w;
    let bound = params.smooth_radius as f64;
    let kernel = gaussian(params.smooth_radius as f64 / 2.0, params.smooth_radius);
    let mut dx = vec![0.0; n];
    let mut dy = vec![0.0; n];

    for _ in 0..params.iterations {
        // G = AᵀA (xx, xy, yy) and h = AᵀΔb (x, y)
        let mut planes = vec![vec![0.0; n]; 5];
        for row in 0..h {
            for col in 0..w {
                let p = row * w + col;
                let (a2, b2) = e2.sample(row as f64 + dy[p], col as f64 + dx[p]);
                let a1 = e1.a(row, col);
                let b1 = e1.b(row, col);
                let (axx, axy, ayy) = ((a1[0][0] + a2[0]) / 2.0, (a1[0][1] + a2[1]) / 2.0, (a1[1][1] + a2[2]) / 2.0);
                let rx = -0.5 * (b2[0] - b1[0]) + axx * dx[p] + axy * dy[p];
                let ry = -0.5 * (b2[1] - b1[1]) + axy * dx[p] + ayy * dy[p];
                planes[0][p] = axx * axx + axy * axy;
                planes[1][p] = axx * axy + axy * ayy;
                planes[2][p] = axy * axy + ayy * ayy;
                planes[3][p] = axx * rx + axy * ry;
                planes[4][p] = axy * rx + ayy * ry;
            }
        }
        smooth_planes(&mut planes, h, w, &kernel);

        let mean_trace = (0..n).map(|p| planes[0][p] + planes[2][p]).sum::<f64>() / n as f64;
        let reg = params.epsilon * mean_trace;
        for p in 0..n {
            let (gxx, gxy, gyy) = (planes[0][p] + reg, planes[1][p], planes[2][p] + reg);
            let det = gxx * gyy - gxy * gxy;
            let (mut ux, mut uy) = if det > 0.0 && det.is_finite() {
                (
                    (gyy * planes[3][p] - gxy * planes[4][p]) / det,
                    (gxx * planes[4][p] - gxy * planes[3][p]) / det,
                )
            } else {
                (0.0, 0.0)
            };
            let mag = (ux * ux + uy * uy).sqrt();
            if mag > bound {
                ux *= bound / mag;
                uy *= bound / mag;
            }
            dx[p] = ux;
            dy[p] = uy;
        }
    }

    let field = FlowField {
        dx: Array2::from_shape_vec((h, w), dx).expect("shape"),
        dy: Array2::from_shape_vec((h, w), dy).expect("shape"),
    };
    if field.dx.iter().chain(field.dy.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite optical flow".into()));
    }
    Ok(field)
}

pub fn flow_two_frame(f1: &Array2<f64>, f2: &Array2<f64>, params: &FarnebackParams) -> Result<FlowField> {
    if f1.dim() != f2.dim() {
        return Err(Error::invalid("flow frames differ in shape"));
    }
    params.validate()?;
    let e1 = poly_expansion(f1, params.sigma, params.radius);
    let e2 = poly_expansion(f2, params.sigma, params.radius);
    flow_from_expansions(&e1, &e2, params)
}

/// Global min/max affine map of an epoch's flow to `0..=255`.
#[derive(Debug, Clone, PartialEq)]
pub struct U8Encoding {
    pub data: Vec<u8>,
    pub min: f64,
    pub max: f64,
}

impl U8Encoding {
    /// Approximate inverse; exact to `(max - min) / 255`.
    pub fn decode(&self) -> Vec<f64> {
        let span = self.max - self.min;
        self.data
            .iter()
            .map(|&q| if span > 0.0 { self.min + q as f64 / 255.0 * span } else { self.min })
            .collect()
    }
}

/// Maps the global `(min, max)` of `values` to `(0, 255)`, rounding half
/// to even. A degenerate range maps everything to 0.
pub fn rescale_u8(values: &[f64]) -> Result<U8Encoding> {
    if values.is_empty() {
        return Err(Error::invalid("cannot rescale an empty flow"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite flow value".into()));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let data = values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - min) / span * 255.0).round_ties_even().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect();
    Ok(U8Encoding { data, min, max })
}

/// Standard HSV to 8-bit RGB; `hue` in degrees.
pub fn hsv_to_rgb(hue: f64, sat: f64, val: f64) -> [u8; 3] {
    let c = val * sat;
    let hp = hue.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = val - c;
    let q = |v: f64| ((v + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [q(r), q(g), q(b)]
}

/// Flow direction as hue in `[0, 360)` degrees.
pub fn flow_hue(dx: f64, dy: f64) -> f64 {
    dy.atan2(dx).to_degrees().rem_euclid(360.0)
}

/// Direction to hue, magnitude (relative to the field maximum) to value,
/// full saturation.
pub fn flow_to_hsv(flow: &FlowField) -> RgbImage {
    let (h, w) = flow.dx.dim();
    let max = flow.max_magnitude();
    let mut img = RgbImage::new(w, h);
    for r in 0..h {
        for c in 0..w {
            let (x, y) = (flow.dx[[r, c]], flow.dy[[r, c]]);
            let val = if max > 0.0 { x.hypot(y) / max } else { 0.0 };
            img.set(c, r, hsv_to_rgb(flow_hue(x, y), 1.0, val));
        }
    }
    img
}

/// Flow over consecutive frame pairs of every band.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowVideo {
    /// `bands × pairs × 2 × h × w`, channel 0 = dx, 1 = dy.
    pub data: Array5<f64>,
    pub u8_encoding: U8Encoding,
    /// `hsv[band][pair]`.
    pub hsv: Vec<Vec<RgbImage>>,
}

impl FlowVideo {
    pub fn from_data(data: Array5<f64>) -> Result<Self> {
        let flat: Vec<f64> = data.iter().copied().collect();
        let u8_encoding = rescale_u8(&flat)?;
        let (bands, pairs, ..) = data.dim();
        let mut hsv = Vec::with_capacity(bands);
        for b in 0..bands {
            let mut row = Vec::with_capacity(pairs);
            for p in 0..pairs {
                row.push(flow_to_hsv(&field_of(&data, b, p)));
            }
            hsv.push(row);
        }
        Ok(FlowVideo { data, u8_encoding, hsv })
    }

    pub fn bands(&self) -> usize {
        self.data.dim().0
    }

    pub fn pairs(&self) -> usize {
        self.data.dim().1
    }

    pub fn field(&self, band: usize, pair: usize) -> FlowField {
        field_of(&self.data, band, pair)
    }
}

fn field_of(data: &Array5<f64>, band: usize, pair: usize) -> FlowField {
    FlowField {
        dx: data.slice(ndarray::s![band, pair, 0, .., ..]).to_owned(),
        dy: data.slice(ndarray::s![band, pair, 1, .., ..]).to_owned(),
    }
}

pub fn video_to_flow(video: &EegVideo, params: &FarnebackParams) -> Result<FlowVideo> {
    FlowVideo::from_data(video_flow_data(video, params)?)
}

/// Raw flow of every consecutive frame pair, `bands × pairs × 2 × h × w`,
/// without the 8-bit and HSV encodings.
pub fn video_flow_data(video: &EegVideo, params: &FarnebackParams) -> Result<Array5<f64>> {
    let (bands, frames, h, w) = video.data.dim();
    if frames < 2 {
        return Err(Error::invalid(format!("flow needs at least 2 frames, got {frames}")));
    }
    params.validate()?;
    let mut data = Array5::zeros((bands, frames - 1, 2, h, w));
    for b in 0..bands {
        let expansions: Vec<PolyExpansion> = (0..frames)
            .map(|t| poly_expansion(&video.frame(b, t), params.sigma, params.radius))
            .collect();
        for p in 0..frames - 1 {
            let f = flow_from_expansions(&expansions[p], &expansions[p + 1], params)?;
            data.slice_mut(ndarray::s![b, p, 0, .., ..]).assign(&f.dx);
            data.slice_mut(ndarray::s![b, p, 1, .., ..]).assign(&f.dy);
        }
    }
    Ok(data)
}
