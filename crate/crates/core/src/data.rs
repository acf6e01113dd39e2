//! Synthetic warped training pairs, valid-region cropping and image I/O.
//!
//! A split directory has the layout
//!
//! ```text
//! hr/<id>.png      8-bit RGB HR patch
//! lr/<id>.png      16-bit RGB LR crop
//! mask/<id>.png    8-bit gray validity mask on the HR frame (0 or 255)
//! tf/<id>.json     {"matrix": ..} forward map from LR-crop to HR coordinates
//! manifest.jsonl   one ManifestEntry per line, in id order
//! ```

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::warp::{compute_mask, warp_bicubic, Dims, Mask, Plane};
use crate::xform::{
    output_bounds, sample_transform, BackwardMap, Homography, Mat3, Point2, TransformFile, TransformParams,
};

/// Manifest file name inside a split directory.
pub const MANIFEST_FILE: &str = "manifest.jsonl";
/// Side of the HR patches.
pub const HR_PATCH: usize = 96;
/// Largest LR crop side.
pub const MAX_CROP: usize = 24;
/// Smallest acceptable LR crop side.
pub const MIN_CROP: usize = 8;
/// Transform draws per sample before giving up.
const MAX_ATTEMPTS: usize = 64;

/// Axis-aligned square `[x, x+side) × [y, y+side)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Square {
    pub x: usize,
    pub y: usize,
    pub side: usize,
}

/// Largest all-ones square; ties go to the smallest `(row, col)` of the top-left corner.
pub fn largest_valid_square(m: &Mask) -> Result<Square> {
    let (w, h) = (m.width(), m.height());
    if m.count() == 0 {
        return Err(Error::EmptyMask);
    }
    // dp[y][x] = side of the largest square with bottom-right corner (x, y).
    let mut dp = vec![0usize; w * h];
    let mut best = Square { x: 0, y: 0, side: 0 };
    for y in 0..h {
        for x in 0..w {
            if !m.get(x, y) {
                continue;
            }
            let v = if x == 0 || y == 0 {
                1
            } else {
                1 + dp[(y - 1) * w + x].min(dp[y * w + x - 1]).min(dp[(y - 1) * w + x - 1])
            };
            dp[y * w + x] = v;
            let cand = Square {
                x: x + 1 - v,
                y: y + 1 - v,
                side: v,
            };
            if v > best.side || (v == best.side && (cand.y, cand.x) < (best.y, best.x)) {
                best = cand;
            }
        }
    }
    Ok(best)
}

/// A supervised pair: a valid LR crop and the HR patch it was synthesized from.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub hr: Plane,
    /// Forward map HR → full LR canvas.
    pub lr_transform: Homography,
    pub lr: Plane,
    pub lr_crop: Plane,
    pub crop_offset: Point2,
    /// Forward map LR crop → HR.
    pub crop_transform: Homography,
    /// Validity of HR pixels under the backward map of `crop_transform`.
    pub mask: Mask,
}

impl TrainSample {
    /// Backward map from the HR frame into LR-crop coordinates.
    pub fn backward_map(&self) -> BackwardMap {
        BackwardMap::Homography(self.crop_transform)
    }
}

/// Warps `hr` by the HR→LR homography `m_inv` and crops a random valid square.
pub fn synthesize_pair<R: Rng>(hr: &Plane, m_inv: &Homography, rng: &mut R) -> Result<TrainSample> {
    let bounds = output_bounds(m_inv, hr.width(), hr.height())?;
    let g = bounds.transform;
    let lr_dims = Dims::new(bounds.width, bounds.height);
    let (lr, lr_mask) = warp_bicubic(hr, &BackwardMap::Homography(g), lr_dims);
    let square = largest_valid_square(&lr_mask).map_err(|_| Error::NoValidSquare { min_side: MIN_CROP })?;
    if square.side < MIN_CROP {
        return Err(Error::NoValidSquare { min_side: MIN_CROP });
    }
    let side = square.side.min(MAX_CROP);
    let slack = square.side - side;
    let cx = square.x + rng.random_range(0..=slack);
    let cy = square.y + rng.random_range(0..=slack);
    let lr_crop = lr.crop(cx, cy, side, side)?;
    let crop_transform = g.inverse().compose(&Homography::translation(cx as f64, cy as f64))?;
    let mask = compute_mask(
        &BackwardMap::Homography(crop_transform),
        Dims::new(side, side),
        hr.dims(),
    );
    if mask.count() == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(TrainSample {
        hr: hr.clone(),
        lr_transform: g,
        lr,
        lr_crop,
        crop_offset: Point2::new(cx as f64, cy as f64),
        crop_transform,
        mask,
    })
}

/// PNG sample depth used when saving.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

/// Decodes a PNG into `[0, 1]` planes: gray gives one channel, color three; alpha is dropped.
pub fn decode_image(bytes: &[u8]) -> Result<Plane> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::UnsupportedFormat(e.to_string()))?;
    dynamic_to_plane(img)
}

pub fn load_image(path: &Path) -> Result<Plane> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|e| match e {
        Error::UnsupportedFormat(msg) => Error::UnsupportedFormat(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn dynamic_to_plane(img: DynamicImage) -> Result<Plane> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let gray = matches!(
        img,
        DynamicImage::ImageLuma8(_)
            | DynamicImage::ImageLumaA8(_)
            | DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
    );
    let sixteen = matches!(
        img,
        DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
            | DynamicImage::ImageRgb16(_)
            | DynamicImage::ImageRgba16(_)
    );
    let channels = if gray { 1 } else { 3 };
    let raw: Vec<f64> = match (gray, sixteen) {
        (true, false) => img.to_luma8().into_raw().iter().map(|&v| v as f64 / 255.0).collect(),
        (true, true) => img.to_luma16().into_raw().iter().map(|&v| v as f64 / 65535.0).collect(),
        (false, false) => img.to_rgb8().into_raw().iter().map(|&v| v as f64 / 255.0).collect(),
        (false, true) => img.to_rgb16().into_raw().iter().map(|&v| v as f64 / 65535.0).collect(),
    };
    let mut plane = Plane::zeros(w, h, channels);
    for (i, v) in raw.iter().enumerate() {
        let (p, c) = (i / channels, i % channels);
        plane.set(c, p / w, p % w, *v);
    }
    Ok(plane)
}

fn quantize(v: f64, max: f64) -> f64 {
    // `round` is half-away-from-zero, and values are non-negative here.
    (v.clamp(0.0, 1.0) * max).round()
}

/// Encodes a one- or three-channel plane as PNG, clamping to `[0, 1]`.
pub fn encode_image(plane: &Plane, depth: BitDepth) -> Result<Vec<u8>> {
    let (w, h, c) = (plane.width(), plane.height(), plane.channels());
    if c != 1 && c != 3 {
        return Err(Error::UnsupportedFormat(format!("cannot store {c}-channel images")));
    }
    let interleaved = |max: f64| -> Vec<f64> {
        let mut out = Vec::with_capacity(w * h * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out.push(quantize(plane.get(ch, y, x), max));
                }
            }
        }
        out
    };
    let (w32, h32) = (w as u32, h as u32);
    let dynimg = match (depth, c) {
        (BitDepth::Eight, 1) => DynamicImage::ImageLuma8(
            ImageBuffer::<Luma<u8>, _>::from_raw(w32, h32, interleaved(255.0).iter().map(|&v| v as u8).collect())
                .unwrap(),
        ),
        (BitDepth::Eight, _) => DynamicImage::ImageRgb8(
            ImageBuffer::<Rgb<u8>, _>::from_raw(w32, h32, interleaved(255.0).iter().map(|&v| v as u8).collect())
                .unwrap(),
        ),
        (BitDepth::Sixteen, 1) => DynamicImage::ImageLuma16(
            ImageBuffer::<Luma<u16>, _>::from_raw(w32, h32, interleaved(65535.0).iter().map(|&v| v as u16).collect())
                .unwrap(),
        ),
        (BitDepth::Sixteen, _) => DynamicImage::ImageRgb16(
            ImageBuffer::<Rgb<u16>, _>::from_raw(w32, h32, interleaved(65535.0).iter().map(|&v| v as u16).collect())
                .unwrap(),
        ),
    };
    let mut buf = Cursor::new(Vec::new());
    dynimg
        .write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| Error::UnsupportedFormat(e.to_string()))?;
    Ok(buf.into_inner())
}

/// Writes `bytes` to a temporary sibling, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_image(plane: &Plane, path: &Path, depth: BitDepth) -> Result<()> {
    write_atomic(path, &encode_image(plane, depth)?)
}

pub fn mask_to_plane(m: &Mask) -> Plane {
    Plane::from_data(m.width(), m.height(), 1, m.as_f64()).expect("mask dims")
}

pub fn save_mask(m: &Mask, path: &Path) -> Result<()> {
    save_image(&mask_to_plane(m), path, BitDepth::Eight)
}

/// Loads a mask PNG; any nonzero gray value is valid.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let p = load_image(path)?;
    if p.channels() != 1 {
        return Err(Error::UnsupportedFormat(format!(
            "{}: masks must be grayscale",
            path.display()
        )));
    }
    Mask::from_data(
        p.width(),
        p.height(),
        p.data().iter().map(|&v| (v > 0.0) as u8).collect(),
    )
}

/// Random piecewise-smooth RGB image, quantized to 8-bit levels.
///
/// Overlapping ellipses, polygons and striped disks over a gradient
/// background, with 2×2 supersampled edges and mild grain.
pub fn procedural_image<R: Rng>(rng: &mut R, width: usize, height: usize) -> Plane {
    let color = |rng: &mut R| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
    let (wf, hf) = (width as f64, height as f64);
    let bg0 = color(rng);
    let bg1 = color(rng);
    let bg_dir = rng.random_range(0.0..std::f64::consts::TAU);

    enum Shape {
        Ellipse { c: [f64; 2], r: [f64; 2], rot: f64 },
        Polygon { pts: Vec<[f64; 2]> },
        Stripes { c: [f64; 2], r: f64, freq: f64, dir: f64 },
    }
    struct Layer {
        shape: Shape,
        c0: [f64; 3],
        c1: [f64; 3],
        dir: f64,
    }
    let n = rng.random_range(8..16);
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let c = [rng.random_range(0.0..wf), rng.random_range(0.0..hf)];
        let size = rng.random_range(0.05..0.3) * wf.min(hf);
        let shape = match rng.random_range(0..3) {
            0 => Shape::Ellipse {
                c,
                r: [size, size * rng.random_range(0.3..1.0)],
                rot: rng.random_range(0.0..std::f64::consts::PI),
            },
            1 => {
                let k = rng.random_range(3..7);
                let mut angles: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
                angles.sort_by(f64::total_cmp);
                let pts = angles
                    .iter()
                    .map(|a| {
                        let r = size * rng.random_range(0.5..1.3);
                        [c[0] + r * a.cos(), c[1] + r * a.sin()]
                    })
                    .collect();
                Shape::Polygon { pts }
            }
            _ => Shape::Stripes {
                c,
                r: size,
                freq: rng.random_range(0.15..0.6),
                dir: rng.random_range(0.0..std::f64::consts::PI),
            },
        };
        layers.push(Layer {
            shape,
            c0: color(rng),
            c1: color(rng),
            dir: rng.random_range(0.0..std::f64::consts::TAU),
        });
    }

    let inside_poly = |pts: &[[f64; 2]], x: f64, y: f64| {
        let mut inside = false;
        let mut j = pts.len() - 1;
        for i in 0..pts.len() {
            let (a, b) = (pts[i], pts[j]);
            if (a[1] > y) != (b[1] > y) && x < (b[0] - a[0]) * (y - a[1]) / (b[1] - a[1]) + a[0] {
                inside = !inside;
            }
            j = i;
        }
        inside
    };
    let shade = |x: f64, y: f64| -> [f64; 3] {
        let t = (0.5 + ((x / wf - 0.5) * bg_dir.cos() + (y / hf - 0.5) * bg_dir.sin())).clamp(0.0, 1.0);
        let mut px = [0.0; 3];
        for k in 0..3 {
            px[k] = bg0[k] * (1.0 - t) + bg1[k] * t;
        }
        for l in &layers {
            let (hit, alpha) = match &l.shape {
                Shape::Ellipse { c, r, rot } => {
                    let (dx, dy) = (x - c[0], y - c[1]);
                    let (s, co) = rot.sin_cos();
                    let u = (co * dx + s * dy) / r[0];
                    let v = (-s * dx + co * dy) / r[1];
                    (u * u + v * v <= 1.0, 1.0)
                }
                Shape::Polygon { pts } => (inside_poly(pts, x, y), 1.0),
                Shape::Stripes { c, r, freq, dir } => {
                    let (dx, dy) = (x - c[0], y - c[1]);
                    let hit = dx * dx + dy * dy <= r * r;
                    let phase = (dx * dir.cos() + dy * dir.sin()) * freq;
                    (hit, if phase.sin() > 0.0 { 1.0 } else { 0.0 })
                }
            };
            if hit && alpha > 0.0 {
                let t = 0.5 + 0.5 * ((x / wf) * l.dir.cos() + (y / hf) * l.dir.sin()).sin();
                for (k, p) in px.iter_mut().enumerate() {
                    *p = l.c0[k] * (1.0 - t) + l.c1[k] * t;
                }
            }
        }
        px
    };
    let mut out = Plane::zeros(width, height, 3);
    for y in 0..height {
        for x in 0..width {
            let mut acc = [0.0; 3];
            for (ox, oy) in [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)] {
                let px = shade(x as f64 + ox, y as f64 + oy);
                for k in 0..3 {
                    acc[k] += 0.25 * px[k];
                }
            }
            for (k, a) in acc.iter().enumerate() {
                let grain = 0.02 * (rng.random::<f64>() - 0.5);
                out.set(k, y, x, quantize(a + grain, 255.0) / 255.0);
            }
        }
    }
    out
}

/// Writes `count` procedural images `img_<k>.png` of `size × size` into `dir`.
pub fn write_procedural_hr(dir: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..count)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let img = procedural_image(&mut rng, size, size);
            let path = dir.join(format!("img_{k:04}.png"));
            save_image(&img, &path, BitDepth::Eight)?;
            Ok(path)
        })
        .collect()
}

/// Sorted PNG files of a directory.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// One line of `manifest.jsonl`. Paths are relative to the split directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Source HR image, as given on the command line.
    pub source: String,
    pub patch_origin: [usize; 2],
    pub hr: String,
    pub lr: String,
    pub mask: String,
    pub tf: String,
    pub seed: u64,
    pub params: TransformParams,
    /// HR → full LR forward matrix.
    pub lr_matrix: Mat3,
    pub crop_offset: [usize; 2],
    pub crop_side: usize,
}

/// Options of [`build_split`].
#[derive(Clone, Copy, Debug)]
pub struct SplitOptions {
    pub patch: usize,
}

impl Default for SplitOptions {
    fn default() -> Self {
        Self { patch: HR_PATCH }
    }
}

struct Built {
    entry: ManifestEntry,
    files: Vec<(PathBuf, Vec<u8>)>,
}

fn build_one(sources: &[(PathBuf, Plane)], out_dir: &Path, seed: u64, index: usize, patch: usize) -> Result<Built> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let mut last_err = None;
    for _ in 0..MAX_ATTEMPTS {
        let src_idx = rng.random_range(0..sources.len());
        let (src_path, img) = &sources[src_idx];
        if img.width() < patch || img.height() < patch {
            return Err(Error::ShapeMismatch(format!(
                "{} is smaller than the {patch}px patch",
                src_path.display()
            )));
        }
        let px = rng.random_range(0..=img.width() - patch);
        let py = rng.random_range(0..=img.height() - patch);
        let hr = img.crop(px, py, patch, patch)?;
        let hr = if hr.channels() == 1 { gray_to_rgb(&hr) } else { hr };
        let tf_seed = rng.next_u64();
        let (params, m) = match sample_transform(tf_seed, patch, patch) {
            Ok(v) => v,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        let sample = match synthesize_pair(&hr, &m.inverse(), &mut rng) {
            Ok(s) => s,
            Err(e @ (Error::NoValidSquare { .. } | Error::EmptyMask | Error::Degenerate(_))) => {
                last_err = Some(e);
                continue;
            }
            Err(e) => return Err(e),
        };
        let id = format!("{index:05}");
        let rel = |sub: &str, ext: &str| format!("{sub}/{id}.{ext}");
        let tf = TransformFile::from_homography(&sample.crop_transform).to_json()?;
        let entry = ManifestEntry {
            id: id.clone(),
            source: src_path.display().to_string(),
            patch_origin: [px, py],
            hr: rel("hr", "png"),
            lr: rel("lr", "png"),
            mask: rel("mask", "png"),
            tf: rel("tf", "json"),
            seed: tf_seed,
            params,
            lr_matrix: *sample.lr_transform.matrix(),
            crop_offset: [sample.crop_offset.x as usize, sample.crop_offset.y as usize],
            crop_side: sample.lr_crop.width(),
        };
        let files = vec![
            (out_dir.join(&entry.hr), encode_image(&sample.hr, BitDepth::Eight)?),
            (
                out_dir.join(&entry.lr),
                encode_image(&sample.lr_crop, BitDepth::Sixteen)?,
            ),
            (
                out_dir.join(&entry.mask),
                encode_image(&mask_to_plane(&sample.mask), BitDepth::Eight)?,
            ),
            (out_dir.join(&entry.tf), tf.into_bytes()),
        ];
        return Ok(Built { entry, files });
    }
    Err(last_err.unwrap_or(Error::ResampleRejected { attempts: MAX_ATTEMPTS }))
}

pub fn gray_to_rgb(p: &Plane) -> Plane {
    let mut data = Vec::with_capacity(p.data().len() * 3);
    for _ in 0..3 {
        data.extend_from_slice(p.channel(0));
    }
    Plane::from_data(p.width(), p.height(), 3, data).expect("same dims")
}

/// Synthesizes `count` samples from the PNGs in `hr_dir` into `out_dir`.
///
/// Sample `i` draws from its own stream of a ChaCha8 generator seeded with
/// `seed`, so the output is independent of the thread count.
pub fn build_split(
    hr_dir: &Path,
    out_dir: &Path,
    count: usize,
    seed: u64,
    opts: SplitOptions,
) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let manifest_path = out_dir.join(MANIFEST_FILE);
    if count == 0 {
        write_atomic(&manifest_path, b"")?;
        return Ok(Vec::new());
    }
    let paths = list_pngs(hr_dir)?;
    if paths.is_empty() {
        return Err(Error::io(
            hr_dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no PNG images"),
        ));
    }
    let sources: Vec<(PathBuf, Plane)> = paths
        .into_par_iter()
        .map(|p| load_image(&p).map(|img| (p, img)))
        .collect::<Result<_>>()?;
    for sub in ["hr", "lr", "mask", "tf"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let built: Vec<Built> = (0..count)
        .into_par_iter()
        .map(|i| {
            let b = build_one(&sources, out_dir, seed, i, opts.patch)?;
            for (path, bytes) in &b.files {
                write_atomic(path, bytes)?;
            }
            Ok(b)
        })
        .collect::<Result<_>>()?;
    let mut manifest = String::new();
    let mut entries = Vec::with_capacity(built.len());
    for b in built {
        manifest.push_str(&serde_json::to_string(&b.entry)?);
        manifest.push('\n');
        entries.push(b.entry);
    }
    write_atomic(&manifest_path, manifest.as_bytes())?;
    Ok(entries)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// A training/validation example loaded from a split directory.
#[derive(Clone, Debug)]
pub struct PairSample {
    pub id: String,
    pub lr: Plane,
    pub hr: Plane,
    pub mask: Mask,
    /// Forward map LR crop → HR.
    pub transform: Homography,
}

impl PairSample {
    pub fn backward_map(&self) -> BackwardMap {
        BackwardMap::Homography(self.transform)
    }
}

/// Loads every sample listed in a split's manifest.
pub fn load_split(dir: &Path) -> Result<Vec<PairSample>> {
    read_manifest(dir)?
        .into_par_iter()
        .map(|e| {
            let tf_path = dir.join(&e.tf);
            let text = fs::read_to_string(&tf_path).map_err(|err| Error::io(&tf_path, err))?;
            let transform = match TransformFile::from_json(&text)? {
                TransformFile::Matrix { matrix } => Homography::new(matrix)?,
                TransformFile::Functional { .. } => {
                    return Err(Error::UnsupportedFormat(format!(
                        "{}: training transforms must be matrices",
                        tf_path.display()
                    )))
                }
            };
            Ok(PairSample {
                id: e.id,
                lr: load_image(&dir.join(&e.lr))?,
                hr: load_image(&dir.join(&e.hr))?,
                mask: load_mask(&dir.join(&e.mask))?,
                transform,
            })
        })
        .collect()
}
