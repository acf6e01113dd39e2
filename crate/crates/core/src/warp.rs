//! Backward-mapping resampling engine.
//!
//! Every output pixel is mapped into the source image and reconstructed from
//! a small window of source taps. Windows are anchored at the rounded source
//! position (`round` is half-away-from-zero), taps outside the source are
//! clamped to the nearest edge, and output pixels whose source position falls
//! outside `[0, W-1] × [0, H-1]` are void: value zero, mask zero.
//!
//! Per-pixel work is independent and runs on the rayon pool; results do not
//! depend on the number of worker threads.

use rayon::prelude::*;

use crate::adaptive_grid::{principal_axes, rescale_offset, AdaptiveBasis};
use crate::error::{Error, Result};
use crate::xform::{jacobian, BackwardMap, Point2, JACOBIAN_EPS};

/// Window size of the adaptive and learned kernels.
pub const KERNEL_SIZE: usize = 3;
/// Number of taps in a `KERNEL_SIZE × KERNEL_SIZE` window.
pub const KERNEL_TAPS: usize = KERNEL_SIZE * KERNEL_SIZE;
/// Keys cubic convolution parameter.
pub const KEYS_A: f64 = -0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub width: usize,
    pub height: usize,
}

impl Dims {
    pub const fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A multi-channel image stored channel-planar: `data[(c * height + y) * width + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Plane {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
                "plane {width}x{height}x{channels} needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Copies the rectangle `[x0, x0+w) × [y0, y0+h)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Plane> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::ShapeMismatch(format!(
                "crop {w}x{h}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut out = Plane::zeros(w, h, self.channels);
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    out.set(c, y, x, self.get(c, y0 + y, x0 + x));
                }
            }
        }
        Ok(out)
    }
}

/// Binary validity mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![1; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height || data.iter().any(|&v| v > 1) {
            return Err(Error::ShapeMismatch(format!(
                "mask {width}x{height} needs {} binary values",
                width * height
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.width, self.height)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v as u8;
    }

    /// Number of valid pixels.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

/// Per-output-pixel kernels, laid out `[y][x][channel][ky][kx]`.
///
/// `channels` is 1 for kernels shared across feature channels.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelField {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl KernelField {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels * KERNEL_TAPS],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels * KERNEL_TAPS {
            return Err(Error::ShapeMismatch("kernel field size".into()));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.width, self.height)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Kernels of pixel `(x, y)`, `channels * 9` values.
    pub fn at(&self, x: usize, y: usize) -> &[f64] {
        let n = self.channels * KERNEL_TAPS;
        let i = (y * self.width + x) * n;
        &self.data[i..i + n]
    }

    pub fn at_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let n = self.channels * KERNEL_TAPS;
        let i = (y * self.width + x) * n;
        &mut self.data[i..i + n]
    }
}

/// A valid output pixel and the source position it samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Site {
    /// Row-major index into the output grid.
    pub index: usize,
    pub dst: [usize; 2],
    pub src: Point2,
    /// Window anchor `(round(x), round(y))`.
    pub base: [i64; 2],
}

impl Site {
    pub fn new(index: usize, dst: [usize; 2], src: Point2) -> Self {
        Self {
            index,
            dst,
            src,
            base: [src.x.round() as i64, src.y.round() as i64],
        }
    }

    pub fn dst_point(&self) -> Point2 {
        Point2::new(self.dst[0] as f64, self.dst[1] as f64)
    }

    /// Offsets `tap − src` of the 3×3 window, `y` outer, `x` inner.
    pub fn window_offsets(&self) -> [[f64; 2]; KERNEL_TAPS] {
        let mut out = [[0.0; 2]; KERNEL_TAPS];
        for j in -1i64..=1 {
            for i in -1i64..=1 {
                let t = ((j + 1) * 3 + (i + 1)) as usize;
                out[t] = [
                    (self.base[0] + i) as f64 - self.src.x,
                    (self.base[1] + j) as f64 - self.src.y,
                ];
            }
        }
        out
    }
}

#[inline]
fn inside(p: Point2, src: Dims) -> bool {
    p.x >= 0.0 && p.y >= 0.0 && p.x <= src.width as f64 - 1.0 && p.y <= src.height as f64 - 1.0
}

#[inline]
fn clamp_tap(v: i64, len: usize) -> usize {
    v.clamp(0, len as i64 - 1) as usize
}

/// Output pixels whose backward-mapped centers land inside the source.
pub fn sample_sites(map: &BackwardMap, src: Dims, dst: Dims) -> (Vec<Site>, Mask) {
    let rows: Vec<Vec<Site>> = (0..dst.height)
        .into_par_iter()
        .map(|y| {
            (0..dst.width)
                .filter_map(|x| {
                    let p = map.eval(Point2::new(x as f64, y as f64)).ok()?;
                    inside(p, src).then(|| Site::new(y * dst.width + x, [x, y], p))
                })
                .collect()
        })
        .collect();
    let sites: Vec<Site> = rows.into_iter().flatten().collect();
    let mut mask = Mask::zeros(dst.width, dst.height);
    for s in &sites {
        mask.data[s.index] = 1;
    }
    (sites, mask)
}

/// Sites of `map` restricted to the pixels valid in `mask`, without a domain check.
///
/// Used for maps onto upsampled copies of a source whose validity was
/// already decided at the base resolution.
pub fn sites_on_mask(map: &BackwardMap, mask: &Mask) -> Result<Vec<Site>> {
    let w = mask.width;
    let rows: Vec<Result<Vec<Site>>> = (0..mask.height)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .filter(|&x| mask.get(x, y))
                .map(|x| {
                    let p = map.eval(Point2::new(x as f64, y as f64))?;
                    Ok(Site::new(y * w + x, [x, y], p))
                })
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    for r in rows {
        out.extend(r?);
    }
    Ok(out)
}

/// Validity mask of a backward map.
pub fn compute_mask(map: &BackwardMap, src: Dims, dst: Dims) -> Mask {
    sample_sites(map, src, dst).1
}

/// Keys cubic convolution kernel with `a = -0.5`.
#[inline]
pub fn keys_cubic(t: f64) -> f64 {
    let a = KEYS_A;
    let t = t.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    } else {
        0.0
    }
}

fn scatter(sites: &[Site], values: &[f64], channels: usize, dst: Dims) -> Plane {
    let mut out = Plane::zeros(dst.width, dst.height, channels);
    let n = dst.len();
    for (s, v) in sites.iter().zip(values.chunks_exact(channels)) {
        for (c, &val) in v.iter().enumerate() {
            out.data[c * n + s.index] = val;
        }
    }
    out
}

/// Bicubic (Keys, 4×4) backward warp.
pub fn warp_bicubic(img: &Plane, map: &BackwardMap, dst: Dims) -> (Plane, Mask) {
    let (sites, mask) = sample_sites(map, img.dims(), dst);
    (bicubic_at_sites(img, &sites, dst), mask)
}

/// Bicubic resampling at precomputed sites.
pub fn bicubic_at_sites(img: &Plane, sites: &[Site], dst: Dims) -> Plane {
    let ch = img.channels;
    let (w, h) = (img.width, img.height);
    let mut values = vec![0.0; sites.len() * ch];
    values
        .par_chunks_mut(ch.max(1))
        .zip(sites.par_iter())
        .for_each(|(out, s)| {
            let x0 = s.src.x.floor();
            let y0 = s.src.y.floor();
            let mut wx = [0.0; 4];
            let mut wy = [0.0; 4];
            let mut cols = [0usize; 4];
            let mut rows = [0usize; 4];
            for k in 0..4 {
                let tx = x0 + k as f64 - 1.0;
                let ty = y0 + k as f64 - 1.0;
                wx[k] = keys_cubic(s.src.x - tx);
                wy[k] = keys_cubic(s.src.y - ty);
                cols[k] = clamp_tap(tx as i64, w);
                rows[k] = clamp_tap(ty as i64, h);
            }
            for (c, o) in out.iter_mut().enumerate() {
                let plane = img.channel(c);
                let mut acc = 0.0;
                for r in 0..4 {
                    let row = &plane[rows[r] * w..(rows[r] + 1) * w];
                    let mut line = 0.0;
                    for k in 0..4 {
                        line += wx[k] * row[cols[k]];
                    }
                    acc += wy[r] * line;
                }
                *o = acc;
            }
        });
    scatter(sites, &values, ch, dst)
}

/// Source-tap indices of a site's 3×3 window, clamped to the source.
#[inline]
pub(crate) fn window_taps(s: &Site, src: Dims) -> [usize; KERNEL_TAPS] {
    let mut taps = [0usize; KERNEL_TAPS];
    for j in 0..3 {
        let y = clamp_tap(s.base[1] + j as i64 - 1, src.height);
        for i in 0..3 {
            let x = clamp_tap(s.base[0] + i as i64 - 1, src.width);
            taps[j * 3 + i] = y * src.width + x;
        }
    }
    taps
}

/// Applies per-site kernels to a channel-planar feature map.
///
/// `kernels` holds `kernel_channels * 9` values per site, where
/// `kernel_channels` is either 1 (shared) or `channels` (depthwise).
/// Returns `sites.len() * channels` values, site-major.
pub(crate) fn apply_site_kernels(
    feat: &[f64],
    src: Dims,
    channels: usize,
    sites: &[Site],
    kernels: &[f64],
    kernel_channels: usize,
) -> Vec<f64> {
    let n = src.len();
    let per_site = kernel_channels * KERNEL_TAPS;
    let mut values = vec![0.0; sites.len() * channels];
    values
        .par_chunks_mut(channels.max(1))
        .zip(sites.par_iter().zip(kernels.par_chunks(per_site.max(1))))
        .for_each(|(out, (s, k))| {
            let taps = window_taps(s, src);
            for (c, o) in out.iter_mut().enumerate() {
                let kc = if kernel_channels == 1 { 0 } else { c };
                let kern = &k[kc * KERNEL_TAPS..(kc + 1) * KERNEL_TAPS];
                let plane = &feat[c * n..(c + 1) * n];
                let mut acc = 0.0;
                for t in 0..KERNEL_TAPS {
                    acc += kern[t] * plane[taps[t]];
                }
                *o = acc;
            }
        });
    values
}

/// Warps `feat` with explicit per-pixel kernels (no normalization).
pub fn warp_with_kernels(feat: &Plane, map: &BackwardMap, kernels: &KernelField, dst: Dims) -> Result<(Plane, Mask)> {
    if kernels.dims() != dst {
        return Err(Error::ShapeMismatch(format!(
            "kernel field is {}x{}, output is {}x{}",
            kernels.width, kernels.height, dst.width, dst.height
        )));
    }
    if kernels.channels != 1 && kernels.channels != feat.channels {
        return Err(Error::ShapeMismatch(format!(
            "kernel channels {} do not match feature channels {}",
            kernels.channels, feat.channels
        )));
    }
    let (sites, mask) = sample_sites(map, feat.dims(), dst);
    let per_site: Vec<f64> = sites
        .iter()
        .flat_map(|s| kernels.at(s.dst[0], s.dst[1]).iter().copied())
        .collect();
    let values = apply_site_kernels(
        &feat.data,
        feat.dims(),
        feat.channels,
        &sites,
        &per_site,
        kernels.channels,
    );
    Ok((scatter(&sites, &values, feat.channels, dst), mask))
}

/// Local ellipse basis of a backward map at an output pixel.
pub fn site_basis(map: &BackwardMap, s: &Site) -> Result<AdaptiveBasis> {
    principal_axes(&jacobian(map, s.dst_point(), JACOBIAN_EPS)?)
}

/// Window offsets rescaled into the adaptive grid, flattened as
/// `[o0x, o0y, o1x, o1y, ..]` in window order.
pub fn rescaled_offsets(s: &Site, basis: &AdaptiveBasis) -> [f64; 2 * KERNEL_TAPS] {
    let mut out = [0.0; 2 * KERNEL_TAPS];
    for (t, o) in s.window_offsets().iter().enumerate() {
        let r = rescale_offset(*o, basis);
        out[2 * t] = r[0];
        out[2 * t + 1] = r[1];
    }
    out
}

/// Fixed adaptive-grid weights: separable cubic on rescaled offsets, normalized to sum 1.
///
/// Falls back to the center tap when every weight vanishes.
pub fn adaptive_fixed_weights(offsets: &[f64; 2 * KERNEL_TAPS]) -> [f64; KERNEL_TAPS] {
    let mut w = [0.0; KERNEL_TAPS];
    let mut sum = 0.0;
    for t in 0..KERNEL_TAPS {
        w[t] = keys_cubic(offsets[2 * t]) * keys_cubic(offsets[2 * t + 1]);
        sum += w[t];
    }
    if sum.abs() < 1e-12 {
        let mut one_hot = [0.0; KERNEL_TAPS];
        one_hot[KERNEL_TAPS / 2] = 1.0;
        return one_hot;
    }
    w.iter_mut().for_each(|v| *v /= sum);
    w
}

/// Shared-kernel field of the fixed adaptive resampler, with its mask.
///
/// Pixels whose Jacobian is singular or undefined are void.
pub fn adaptive_fixed_kernels(map: &BackwardMap, src: Dims, dst: Dims) -> (KernelField, Mask) {
    let (sites, mut mask) = sample_sites(map, src, dst);
    let weights: Vec<Option<[f64; KERNEL_TAPS]>> = sites
        .par_iter()
        .map(|s| {
            site_basis(map, s)
                .ok()
                .map(|b| adaptive_fixed_weights(&rescaled_offsets(s, &b)))
        })
        .collect();
    let mut field = KernelField::zeros(dst.width, dst.height, 1);
    for (s, w) in sites.iter().zip(weights) {
        match w {
            Some(w) => field.at_mut(s.dst[0], s.dst[1]).copy_from_slice(&w),
            None => mask.set(s.dst[0], s.dst[1], false),
        }
    }
    (field, mask)
}

/// Fixed adaptive-grid warp: 3×3 window with cubic weights on rescaled offsets.
pub fn warp_adaptive_fixed(img: &Plane, map: &BackwardMap, dst: Dims) -> (Plane, Mask) {
    let (field, mask) = adaptive_fixed_kernels(map, img.dims(), dst);
    let (sites, _) = sample_sites(map, img.dims(), dst);
    let sites: Vec<Site> = sites.into_iter().filter(|s| mask.get(s.dst[0], s.dst[1])).collect();
    let per_site: Vec<f64> = sites
        .iter()
        .flat_map(|s| field.at(s.dst[0], s.dst[1]).iter().copied())
        .collect();
    let values = apply_site_kernels(&img.data, img.dims(), img.channels, &sites, &per_site, 1);
    (scatter(&sites, &values, img.channels, dst), mask)
}
