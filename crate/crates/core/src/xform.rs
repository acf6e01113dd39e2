//! Projective and functional transforms.
//!
//! Coordinates follow the pixel-center convention: pixel `(i, j)` has its
//! center at integer coordinates `(i, j)` and an image of width `W` covers
//! `[-0.5, W - 0.5]` horizontally. A [`Homography`] always stores the
//! forward matrix `M` (source to target) together with its inverse; warping
//! evaluates the inverse through a [`BackwardMap`].

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const W_EPS: f64 = 1e-12;
const DET_EPS: f64 = 1e-12;

/// A point (or 2-vector) in pixel coordinates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

pub type Mat3 = [[f64; 3]; 3];

const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = a[r][0] * b[0][c] + a[r][1] * b[1][c] + a[r][2] * b[2][c];
        }
    }
    out
}

fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn normalize(mut m: Mat3) -> Mat3 {
    let d = m[2][2];
    if d.abs() > W_EPS {
        for row in m.iter_mut() {
            for v in row.iter_mut() {
                *v /= d;
            }
        }
    }
    m
}

fn invert(m: &Mat3) -> Option<Mat3> {
    let det = det3(m);
    if !det.is_finite() || det.abs() <= DET_EPS {
        return None;
    }
    let adj = [
        [
            m[1][1] * m[2][2] - m[1][2] * m[2][1],
            m[0][2] * m[2][1] - m[0][1] * m[2][2],
            m[0][1] * m[1][2] - m[0][2] * m[1][1],
        ],
        [
            m[1][2] * m[2][0] - m[1][0] * m[2][2],
            m[0][0] * m[2][2] - m[0][2] * m[2][0],
            m[0][2] * m[1][0] - m[0][0] * m[1][2],
        ],
        [
            m[1][0] * m[2][1] - m[1][1] * m[2][0],
            m[0][1] * m[2][0] - m[0][0] * m[2][1],
            m[0][0] * m[1][1] - m[0][1] * m[1][0],
        ],
    ];
    let mut inv = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            inv[r][c] = adj[r][c] / det;
        }
    }
    Some(normalize(inv))
}

fn project(m: &Mat3, p: Point2) -> Result<Point2> {
    let w = m[2][0] * p.x + m[2][1] * p.y + m[2][2];
    if !w.is_finite() || w.abs() < W_EPS {
        return Err(Error::DegeneratePoint { w });
    }
    Ok(Point2::new(
        (m[0][0] * p.x + m[0][1] * p.y + m[0][2]) / w,
        (m[1][0] * p.x + m[1][1] * p.y + m[1][2]) / w,
    ))
}

/// A 3×3 projective transform with its cached inverse.
///
/// Both matrices are normalized so that entry (3,3) is one whenever it is
/// not numerically zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography {
    m: Mat3,
    m_inv: Mat3,
}

impl Homography {
    /// Builds a homography from a row-major forward matrix.
    pub fn new(m: Mat3) -> Result<Self> {
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("matrix has non-finite entries".into()));
        }
        let m = normalize(m);
        let det = det3(&m);
        let m_inv = invert(&m).ok_or_else(|| Error::Degenerate(format!("matrix is singular (det = {det:e})")))?;
        Ok(Self { m, m_inv })
    }

    pub fn identity() -> Self {
        Self {
            m: IDENTITY,
            m_inv: IDENTITY,
        }
    }

    /// Pixel-area aligned scaling: `[[sx,0,(sx-1)/2],[0,sy,(sy-1)/2],[0,0,1]]`.
    pub fn scale_matrix(sx: f64, sy: f64) -> Result<Self> {
        if !(sx > 0.0 && sy > 0.0) || !sx.is_finite() || !sy.is_finite() {
            return Err(Error::InvalidScale { sx, sy });
        }
        Self::new([
            [sx, 0.0, 0.5 * (sx - 1.0)],
            [0.0, sy, 0.5 * (sy - 1.0)],
            [0.0, 0.0, 1.0],
        ])
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: [[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]],
            m_inv: [[1.0, 0.0, -tx], [0.0, 1.0, -ty], [0.0, 0.0, 1.0]],
        }
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.m
    }

    pub fn inverse_matrix(&self) -> &Mat3 {
        &self.m_inv
    }

    pub fn inverse(&self) -> Self {
        Self {
            m: self.m_inv,
            m_inv: self.m,
        }
    }

    pub fn det(&self) -> f64 {
        det3(&self.m)
    }

    /// Maps a source point to the target domain.
    pub fn apply_forward(&self, p: Point2) -> Result<Point2> {
        project(&self.m, p)
    }

    /// Maps a target point back to the source domain.
    pub fn apply_backward(&self, p: Point2) -> Result<Point2> {
        project(&self.m_inv, p)
    }

    /// Matrix product `self · other`: apply `other`, then `self`.
    pub fn compose(&self, other: &Homography) -> Result<Self> {
        Self::new(mat_mul(&self.m, &other.m))
            .map_err(|e| Error::Degenerate(format!("composition lost invertibility: {e}")))
    }

    /// True if the bottom row is `(0, 0, 1)`.
    pub fn is_affine(&self) -> bool {
        self.m[2][0] == 0.0 && self.m[2][1] == 0.0 && self.m[2][2] == 1.0
    }
}

/// The target-to-source mapping used for warping.
#[derive(Clone, Debug, PartialEq)]
pub enum BackwardMap {
    /// Inverse of a forward homography.
    Homography(Homography),
    /// `(x, y) = (x', y' + a·sin(2πx'/λ))`.
    Sine { amplitude: f64, wavelength: f64 },
    /// Radial polynomial distortion around `center`, normalized by `radius`.
    Barrel {
        k1: f64,
        k2: f64,
        center: Point2,
        radius: f64,
    },
    /// `second(first(p))`.
    Composite {
        first: Box<BackwardMap>,
        second: Box<BackwardMap>,
    },
}

impl BackwardMap {
    pub fn identity() -> Self {
        BackwardMap::Homography(Homography::identity())
    }

    pub fn from_homography(h: Homography) -> Self {
        BackwardMap::Homography(h)
    }

    pub fn kind(&self) -> &'static str {
        match self {
            BackwardMap::Homography(_) => "homography",
            BackwardMap::Sine { .. } => "sine",
            BackwardMap::Barrel { .. } => "barrel",
            BackwardMap::Composite { .. } => "composite",
        }
    }

    /// Evaluates the map at a target point.
    pub fn eval(&self, p: Point2) -> Result<Point2> {
        let q = match self {
            BackwardMap::Homography(h) => h.apply_backward(p).map_err(|_| Error::OutOfDomain { x: p.x, y: p.y })?,
            BackwardMap::Sine { amplitude, wavelength } => {
                Point2::new(p.x, p.y + amplitude * (2.0 * PI * p.x / wavelength).sin())
            }
            BackwardMap::Barrel { k1, k2, center, radius } => {
                let dx = p.x - center.x;
                let dy = p.y - center.y;
                let rho2 = (dx * dx + dy * dy) / (radius * radius);
                let g = 1.0 + k1 * rho2 + k2 * rho2 * rho2;
                Point2::new(center.x + dx * g, center.y + dy * g)
            }
            BackwardMap::Composite { first, second } => second.eval(first.eval(p)?)?,
        };
        if q.x.is_finite() && q.y.is_finite() {
            Ok(q)
        } else {
            Err(Error::OutOfDomain { x: p.x, y: p.y })
        }
    }

    /// `second ∘ self`.
    pub fn then(self, second: BackwardMap) -> BackwardMap {
        BackwardMap::Composite {
            first: Box::new(self),
            second: Box::new(second),
        }
    }

    /// The map onto a source that has been upsampled by an integer factor
    /// `s` with pixel-area alignment, i.e. the backward map of `M·M_{1/s}`.
    pub fn onto_scaled_source(&self, s: f64) -> Result<BackwardMap> {
        let down = Homography::scale_matrix(1.0 / s, 1.0 / s)?;
        Ok(match self {
            BackwardMap::Homography(h) => BackwardMap::Homography(h.compose(&down)?),
            other => other.clone().then(BackwardMap::Homography(down)),
        })
    }
}

/// Local linearization of a backward map: `u = ∂(x,y)/∂x'`, `v = ∂(x,y)/∂y'`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jacobian2 {
    pub u: [f64; 2],
    pub v: [f64; 2],
}

impl Jacobian2 {
    pub const fn new(u: [f64; 2], v: [f64; 2]) -> Self {
        Self { u, v }
    }

    pub const fn identity() -> Self {
        Self::new([1.0, 0.0], [0.0, 1.0])
    }

    pub fn det(&self) -> f64 {
        self.u[0] * self.v[1] - self.v[0] * self.u[1]
    }

    /// `J · c` with `u` and `v` as columns.
    pub fn apply(&self, c: [f64; 2]) -> [f64; 2] {
        [self.u[0] * c[0] + self.v[0] * c[1], self.u[1] * c[0] + self.v[1] * c[1]]
    }
}

/// Default central-difference step.
pub const JACOBIAN_EPS: f64 = 0.5;

/// Central-difference Jacobian of `map` at `p` with step `eps`.
pub fn jacobian(map: &BackwardMap, p: Point2, eps: f64) -> Result<Jacobian2> {
    let xp = map.eval(Point2::new(p.x + eps, p.y))?;
    let xm = map.eval(Point2::new(p.x - eps, p.y))?;
    let yp = map.eval(Point2::new(p.x, p.y + eps))?;
    let ym = map.eval(Point2::new(p.x, p.y - eps))?;
    let d = 2.0 * eps;
    Ok(Jacobian2::new(
        [(xp.x - xm.x) / d, (xp.y - xm.y) / d],
        [(yp.x - ym.x) / d, (yp.y - ym.y) / d],
    ))
}

/// Log local magnification `-ln|det J|` of a backward map.
pub fn scale_feature(j: &Jacobian2) -> Result<f64> {
    let det = j.det();
    if !(det.abs() > DET_EPS) {
        return Err(Error::SingularJacobian { det });
    }
    Ok(-det.abs().ln())
}

/// Target canvas for a forward homography applied to a `src_w × src_h` image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OutputBounds {
    pub width: usize,
    pub height: usize,
    /// Translation folded into `transform` so the box starts at `-0.5`.
    pub offset: Point2,
    /// `T(offset) · h`.
    pub transform: Homography,
}

pub fn output_bounds(h: &Homography, src_w: usize, src_h: usize) -> Result<OutputBounds> {
    let (x1, y1) = (src_w as f64 - 0.5, src_h as f64 - 0.5);
    let corners = [(-0.5, -0.5), (x1, -0.5), (-0.5, y1), (x1, y1)];
    let m = h.matrix();
    let mut sign = 0.0;
    let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
    let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (x, y) in corners {
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        if w.abs() < W_EPS || (sign != 0.0 && w.signum() != sign) {
            return Err(Error::Degenerate(
                "source rectangle crosses the line at infinity".into(),
            ));
        }
        sign = w.signum();
        let q = h.apply_forward(Point2::new(x, y))?;
        min_x = min_x.min(q.x);
        min_y = min_y.min(q.y);
        max_x = max_x.max(q.x);
        max_y = max_y.max(q.y);
    }
    let extent = |lo: f64, hi: f64| ((hi - lo) - 1e-9).ceil().max(1.0) as usize;
    let offset = Point2::new(-0.5 - min_x, -0.5 - min_y);
    let transform = Homography::translation(offset.x, offset.y).compose(h)?;
    Ok(OutputBounds {
        width: extent(min_x, max_x),
        height: extent(min_y, max_y),
        offset,
        transform,
    })
}

/// Parameters of the random training transform `M⁻¹ = H·R·S·P`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    pub h_x: f64,
    pub h_y: f64,
    pub theta: f64,
    pub s_x: f64,
    pub s_y: f64,
    pub t_x: f64,
    pub t_y: f64,
    pub p_x: f64,
    pub p_y: f64,
}

/// Sampling intervals for the random transform, for an HR patch of `w × h`.
#[derive(Clone, Copy, Debug)]
pub struct ParamRanges {
    pub shear: (f64, f64),
    pub theta_std: f64,
    pub scale: (f64, f64),
    pub t_x: (f64, f64),
    pub t_y: (f64, f64),
    pub p_x: (f64, f64),
    pub p_y: (f64, f64),
}

impl ParamRanges {
    pub fn for_patch(w: usize, h: usize) -> Self {
        let (w, h) = (w as f64, h as f64);
        Self {
            shear: (-0.25, 0.25),
            theta_std: 15f64.to_radians(),
            scale: (0.35, 0.5),
            t_x: (-0.75 * w, 0.125 * w),
            t_y: (-0.75 * h, 0.125 * h),
            p_x: (-0.6 / w, 0.6 / w),
            p_y: (-0.6 / h, 0.6 / h),
        }
    }

    /// True when every uniformly drawn parameter lies in its interval and θ is finite.
    pub fn contains(&self, p: &TransformParams) -> bool {
        let inside = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        inside(p.h_x, self.shear)
            && inside(p.h_y, self.shear)
            && p.theta.is_finite()
            && inside(p.s_x, self.scale)
            && inside(p.s_y, self.scale)
            && inside(p.t_x, self.t_x)
            && inside(p.t_y, self.t_y)
            && inside(p.p_x, self.p_x)
            && inside(p.p_y, self.p_y)
    }
}

impl TransformParams {
    /// The identity parameter set (no shear, rotation, scaling or projection).
    pub fn neutral() -> Self {
        Self {
            h_x: 0.0,
            h_y: 0.0,
            theta: 0.0,
            s_x: 1.0,
            s_y: 1.0,
            t_x: 0.0,
            t_y: 0.0,
            p_x: 0.0,
            p_y: 0.0,
        }
    }

    /// `H·R·S·P`, the HR-to-LR matrix.
    pub fn inverse_matrix(&self) -> Mat3 {
        let shear = [[1.0, self.h_x, 0.0], [self.h_y, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let (s, c) = self.theta.sin_cos();
        let rot = [[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]];
        let scale = [[self.s_x, 0.0, 0.0], [0.0, self.s_y, 0.0], [0.0, 0.0, 1.0]];
        let proj = [[1.0, 0.0, self.t_x], [0.0, 1.0, self.t_y], [self.p_x, self.p_y, 1.0]];
        mat_mul(&mat_mul(&mat_mul(&shear, &rot), &scale), &proj)
    }

    /// The forward (LR-to-HR) homography `M`.
    pub fn homography(&self) -> Result<Homography> {
        Ok(Homography::new(self.inverse_matrix())?.inverse())
    }
}

const MAX_DRAWS: usize = 16;
/// Minimum homogeneous weight of `M⁻¹` over the HR patch corners.
const MIN_CORNER_W: f64 = 0.1;

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn gaussian(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    // Box–Muller; 1 - u keeps the log argument in (0, 1].
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    std * (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

fn draw_params(rng: &mut ChaCha8Rng, r: &ParamRanges) -> TransformParams {
    TransformParams {
        h_x: uniform(rng, r.shear),
        h_y: uniform(rng, r.shear),
        theta: gaussian(rng, r.theta_std),
        s_x: uniform(rng, r.scale),
        s_y: uniform(rng, r.scale),
        t_x: uniform(rng, r.t_x),
        t_y: uniform(rng, r.t_y),
        p_x: uniform(rng, r.p_x),
        p_y: uniform(rng, r.p_y),
    }
}

/// Draws a random training transform for an `hr_w × hr_h` patch.
///
/// Returns the parameters and the forward homography `M` (LR to HR).
/// Draws whose `M⁻¹` is near-singular or folds the patch across the line at
/// infinity are redrawn.
pub fn sample_transform(rng_seed: u64, hr_w: usize, hr_h: usize) -> Result<(TransformParams, Homography)> {
    if hr_w == 0 || hr_h == 0 {
        return Err(Error::InvalidParams("patch size must be positive".into()));
    }
    let ranges = ParamRanges::for_patch(hr_w, hr_h);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let (x1, y1) = (hr_w as f64 - 0.5, hr_h as f64 - 0.5);
    for _ in 0..MAX_DRAWS {
        let params = draw_params(&mut rng, &ranges);
        let m_inv = params.inverse_matrix();
        if det3(&m_inv).abs() < 1e-9 {
            continue;
        }
        let folds = [(-0.5, -0.5), (x1, -0.5), (-0.5, y1), (x1, y1)]
            .iter()
            .any(|&(x, y)| m_inv[2][0] * x + m_inv[2][1] * y + m_inv[2][2] < MIN_CORNER_W);
        if folds {
            continue;
        }
        if let Ok(h) = params.homography() {
            return Ok((params, h));
        }
    }
    Err(Error::ResampleRejected { attempts: MAX_DRAWS })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FunctionalKind {
    Sine,
    Barrel,
}

/// Parameters of a functional map. Unused fields are ignored per kind;
/// barrel center and radius default to the source image center and half
/// of its larger side.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionalParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitude: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wavelength: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cx: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
}

/// Builds a functional backward map for a `src_w × src_h` source enlarged by `scale`.
///
/// The target point is first mapped through the inverse of
/// `scale_matrix(scale, scale)` and then displaced in source coordinates.
pub fn make_functional(
    kind: FunctionalKind,
    params: &FunctionalParams,
    scale: f64,
    src_w: usize,
    src_h: usize,
) -> Result<BackwardMap> {
    let finite = |name: &str, v: Option<f64>, default: f64| -> Result<f64> {
        let v = v.unwrap_or(default);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::InvalidParams(format!("{name} must be finite")))
        }
    };
    let scaling = Homography::scale_matrix(scale, scale)
        .map_err(|_| Error::InvalidParams(format!("scale must be positive, got {scale}")))?;
    let distortion = match kind {
        FunctionalKind::Sine => {
            let amplitude = finite("amplitude", params.amplitude, 0.0)?;
            let wavelength = finite("wavelength", params.wavelength, 32.0)?;
            if wavelength == 0.0 {
                return Err(Error::InvalidParams("wavelength must be nonzero".into()));
            }
            BackwardMap::Sine { amplitude, wavelength }
        }
        FunctionalKind::Barrel => {
            let k1 = finite("k1", params.k1, 0.0)?;
            let k2 = finite("k2", params.k2, 0.0)?;
            let cx = finite("cx", params.cx, 0.5 * (src_w as f64 - 1.0))?;
            let cy = finite("cy", params.cy, 0.5 * (src_h as f64 - 1.0))?;
            let radius = finite("radius", params.radius, 0.5 * src_w.max(src_h) as f64)?;
            if radius <= 0.0 {
                return Err(Error::InvalidParams("radius must be positive".into()));
            }
            BackwardMap::Barrel {
                k1,
                k2,
                center: Point2::new(cx, cy),
                radius,
            }
        }
    };
    Ok(BackwardMap::Homography(scaling).then(distortion))
}

/// On-disk transform description.
///
/// `{"matrix": [[..], [..], [..]]}` holds a forward homography `M`;
/// `{"kind": "sine" | "barrel", "params": {..}, "scale": s}` a functional map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TransformFile {
    Matrix {
        matrix: Mat3,
    },
    Functional {
        kind: FunctionalKind,
        #[serde(default)]
        params: FunctionalParams,
        #[serde(default = "unit_scale")]
        scale: f64,
    },
}

fn unit_scale() -> f64 {
    1.0
}

/// A backward map together with the target canvas it should be evaluated on.
#[derive(Clone, Debug)]
pub struct ResolvedTransform {
    pub map: BackwardMap,
    pub width: usize,
    pub height: usize,
}

impl TransformFile {
    pub fn from_homography(h: &Homography) -> Self {
        TransformFile::Matrix { matrix: *h.matrix() }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Binds the transform to a source size: homographies are placed on
    /// their output bounding box, functional maps on the scaled canvas.
    pub fn resolve(&self, src_w: usize, src_h: usize) -> Result<ResolvedTransform> {
        match self {
            TransformFile::Matrix { matrix } => {
                let h = Homography::new(*matrix)?;
                let bounds = output_bounds(&h, src_w, src_h)?;
                Ok(ResolvedTransform {
                    map: BackwardMap::Homography(bounds.transform),
                    width: bounds.width,
                    height: bounds.height,
                })
            }
            TransformFile::Functional { kind, params, scale } => {
                let map = make_functional(*kind, params, *scale, src_w, src_h)?;
                Ok(ResolvedTransform {
                    map,
                    width: ((src_w as f64) * scale).round().max(1.0) as usize,
                    height: ((src_h as f64) * scale).round().max(1.0) as usize,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Point2, b: Point2, tol: f64) -> bool {
        (a.x - b.x).abs() <= tol && (a.y - b.y).abs() <= tol
    }

    #[test]
    fn forward_examples() {
        let id = Homography::identity();
        assert_eq!(id.apply_forward(Point2::new(3.5, 2.0)).unwrap(), Point2::new(3.5, 2.0));
        let s = Homography::scale_matrix(2.0, 2.0).unwrap();
        assert_eq!(s.apply_forward(Point2::new(0.0, 0.0)).unwrap(), Point2::new(0.5, 0.5));
        assert_eq!(
            s.apply_forward(Point2::new(15.0, 15.0)).unwrap(),
            Point2::new(30.5, 30.5)
        );
    }

    #[test]
    fn backward_examples() {
        let id = Homography::identity();
        assert_eq!(id.apply_backward(Point2::new(1.0, 1.0)).unwrap(), Point2::new(1.0, 1.0));
        let s = Homography::scale_matrix(2.0, 2.0).unwrap();
        assert_eq!(s.apply_backward(Point2::new(0.5, 0.5)).unwrap(), Point2::new(0.0, 0.0));
    }

    #[test]
    fn degenerate_point_is_reported() {
        let h = Homography::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 1.0]]).unwrap();
        assert!(matches!(
            h.apply_forward(Point2::new(-1.0, 3.0)),
            Err(Error::DegeneratePoint { .. })
        ));
    }

    #[test]
    fn scale_matrix_entries() {
        assert_eq!(*Homography::scale_matrix(1.0, 1.0).unwrap().matrix(), IDENTITY);
        assert_eq!(
            *Homography::scale_matrix(2.0, 2.0).unwrap().matrix(),
            [[2.0, 0.0, 0.5], [0.0, 2.0, 0.5], [0.0, 0.0, 1.0]]
        );
        assert_eq!(
            *Homography::scale_matrix(4.0, 2.0).unwrap().matrix(),
            [[4.0, 0.0, 1.5], [0.0, 2.0, 0.5], [0.0, 0.0, 1.0]]
        );
        assert!(matches!(
            Homography::scale_matrix(0.0, 1.0),
            Err(Error::InvalidScale { .. })
        ));
        assert!(matches!(
            Homography::scale_matrix(1.0, -2.0),
            Err(Error::InvalidScale { .. })
        ));
    }

    #[test]
    fn compose_examples() {
        let up = Homography::scale_matrix(2.0, 2.0).unwrap();
        let down = Homography::scale_matrix(0.5, 0.5).unwrap();
        let prod = up.compose(&down).unwrap();
        for (r, row) in prod.matrix().iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                assert!((v - IDENTITY[r][c]).abs() < 1e-12, "{prod:?}");
            }
        }
        let h = Homography::new([[1.2, 0.1, 3.0], [-0.2, 0.9, 1.0], [1e-3, 2e-3, 1.0]]).unwrap();
        assert_eq!(Homography::identity().compose(&h).unwrap(), h);
        let back = h.compose(&h.inverse()).unwrap();
        for (r, row) in back.matrix().iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                assert!((v - IDENTITY[r][c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn singular_matrix_rejected() {
        let err = Homography::new([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0], [0.0, 0.0, 1.0]]);
        assert!(matches!(err, Err(Error::Degenerate(_))));
        let a = Homography::new([[1.0, 0.0, 0.0], [0.0, 1e-7, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        assert!(matches!(a.compose(&a), Err(Error::Degenerate(_))));
    }

    #[test]
    fn jacobian_examples() {
        let map = BackwardMap::Homography(Homography::scale_matrix(2.0, 2.0).unwrap());
        let j = jacobian(&map, Point2::new(7.3, -2.1), JACOBIAN_EPS).unwrap();
        assert_eq!(j, Jacobian2::new([0.5, 0.0], [0.0, 0.5]));
        let j = jacobian(&BackwardMap::identity(), Point2::new(1.0, 2.0), 0.5).unwrap();
        assert_eq!(j, Jacobian2::identity());
    }

    #[test]
    fn jacobian_out_of_domain() {
        // w = 1 - x' vanishes at x' = 1, which the stencil around (0.5, 0) hits.
        let h = Homography::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 1.0]]).unwrap();
        let inv = h.inverse();
        assert_eq!(inv.inverse_matrix()[2], [-1.0, 0.0, 1.0]);
        let map = BackwardMap::Homography(inv);
        let err = jacobian(&map, Point2::new(0.5, 0.0), 0.5);
        assert!(matches!(err, Err(Error::OutOfDomain { .. })));
    }

    #[test]
    fn scale_feature_examples() {
        assert_eq!(scale_feature(&Jacobian2::identity()).unwrap(), 0.0);
        let half = Jacobian2::new([0.5, 0.0], [0.0, 0.5]);
        assert!((scale_feature(&half).unwrap() - 4f64.ln()).abs() < 1e-15);
        let aniso = Jacobian2::new([1.0, 0.0], [0.0, 0.25]);
        assert!((scale_feature(&aniso).unwrap() - 1.3862943611198906).abs() < 1e-12);
        let sing = Jacobian2::new([1.0, 2.0], [2.0, 4.0]);
        assert!(matches!(scale_feature(&sing), Err(Error::SingularJacobian { .. })));
    }

    #[test]
    fn bounds_examples() {
        let s = Homography::scale_matrix(2.0, 2.0).unwrap();
        let b = output_bounds(&s, 16, 16).unwrap();
        assert_eq!((b.width, b.height), (32, 32));
        assert_eq!(b.offset, Point2::new(0.0, 0.0));
        let b = output_bounds(&Homography::identity(), 7, 5).unwrap();
        assert_eq!((b.width, b.height), (7, 5));
        for s in 1..=4 {
            let h = Homography::scale_matrix(s as f64, s as f64).unwrap();
            let b = output_bounds(&h, 13, 9).unwrap();
            assert_eq!((b.width, b.height), (13 * s, 9 * s));
        }
        let shifted = Homography::translation(10.0, -3.0);
        let b = output_bounds(&shifted, 8, 8).unwrap();
        assert_eq!(b.offset, Point2::new(-10.0, 3.0));
        assert!(close(
            b.transform.apply_forward(Point2::new(0.0, 0.0)).unwrap(),
            Point2::new(0.0, 0.0),
            1e-12
        ));
    }

    #[test]
    fn bounds_reject_horizon_crossing() {
        let h = Homography::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-0.1, 0.0, 1.0]]).unwrap();
        assert!(matches!(output_bounds(&h, 32, 32), Err(Error::Degenerate(_))));
    }

    #[test]
    fn neutral_params_give_identity() {
        let m = TransformParams::neutral().inverse_matrix();
        assert_eq!(m, IDENTITY);
    }

    #[test]
    fn sampling_is_deterministic_and_in_range() {
        let (p1, h1) = sample_transform(42, 384, 384).unwrap();
        let (p2, h2) = sample_transform(42, 384, 384).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(h1.matrix(), h2.matrix());
        assert!(ParamRanges::for_patch(384, 384).contains(&p1));
        assert!(p1.theta.abs() <= 90f64.to_radians());
        assert!(matches!(sample_transform(1, 0, 4), Err(Error::InvalidParams(_))));
    }

    #[test]
    fn functional_reductions() {
        let scale = BackwardMap::Homography(Homography::scale_matrix(2.0, 2.0).unwrap());
        let sine = make_functional(
            FunctionalKind::Sine,
            &FunctionalParams {
                amplitude: Some(0.0),
                wavelength: Some(16.0),
                ..Default::default()
            },
            2.0,
            16,
            16,
        )
        .unwrap();
        let barrel = make_functional(FunctionalKind::Barrel, &FunctionalParams::default(), 2.0, 16, 16).unwrap();
        for &(x, y) in &[(0.0, 0.0), (3.25, 17.0), (31.0, 31.0)] {
            let p = Point2::new(x, y);
            let want = scale.eval(p).unwrap();
            assert!(close(sine.eval(p).unwrap(), want, 1e-12));
            assert!(close(barrel.eval(p).unwrap(), want, 1e-12));
        }
        let wave = make_functional(
            FunctionalKind::Sine,
            &FunctionalParams {
                amplitude: Some(4.0),
                wavelength: Some(32.0),
                ..Default::default()
            },
            1.0,
            64,
            64,
        )
        .unwrap();
        assert!(close(
            wave.eval(Point2::new(16.0, 0.0)).unwrap(),
            Point2::new(16.0, 0.0),
            1e-12
        ));
        assert!(close(
            wave.eval(Point2::new(8.0, 1.0)).unwrap(),
            Point2::new(8.0, 5.0),
            1e-12
        ));
        let bad = make_functional(
            FunctionalKind::Barrel,
            &FunctionalParams {
                k1: Some(f64::NAN),
                ..Default::default()
            },
            1.0,
            8,
            8,
        );
        assert!(matches!(bad, Err(Error::InvalidParams(_))));
    }

    #[test]
    fn transform_file_round_trip() {
        let h = Homography::scale_matrix(2.0, 2.0).unwrap();
        let text = TransformFile::from_homography(&h).to_json().unwrap();
        assert_eq!(text, r#"{"matrix":[[2.0,0.0,0.5],[0.0,2.0,0.5],[0.0,0.0,1.0]]}"#);
        let parsed = TransformFile::from_json(&text).unwrap();
        let r = parsed.resolve(16, 16).unwrap();
        assert_eq!((r.width, r.height), (32, 32));

        let f = TransformFile::from_json(r#"{"kind":"barrel","params":{"k1":0.1,"k2":-0.01},"scale":2}"#).unwrap();
        let r = f.resolve(10, 6).unwrap();
        assert_eq!((r.width, r.height), (20, 12));
        assert_eq!(r.map.kind(), "composite");
        assert!(TransformFile::from_json(r#"{"kind":"sine","params":{"bogus":1}}"#).is_err());
    }

    #[test]
    fn scaled_source_composition_is_exact_for_homographies() {
        let h = Homography::new([[1.5, 0.2, 1.0], [-0.1, 1.8, 2.0], [1e-3, -2e-3, 1.0]]).unwrap();
        let map = BackwardMap::Homography(h);
        let m2 = map.onto_scaled_source(2.0).unwrap();
        let up = Homography::scale_matrix(2.0, 2.0).unwrap();
        let p = Point2::new(12.0, 7.0);
        let want = up.apply_forward(map.eval(p).unwrap()).unwrap();
        assert!(close(m2.eval(p).unwrap(), want, 1e-9));
        let sine = BackwardMap::Sine {
            amplitude: 2.0,
            wavelength: 10.0,
        };
        let s2 = sine.onto_scaled_source(4.0).unwrap();
        let up4 = Homography::scale_matrix(4.0, 4.0).unwrap();
        let want = up4.apply_forward(sine.eval(p).unwrap()).unwrap();
        assert!(close(s2.eval(p).unwrap(), want, 1e-12));
    }
}
