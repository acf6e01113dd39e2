//! The warping super-resolution network.
//!
//! An LR image passes through a shared residual trunk with ×1, ×2 and ×4
//! heads. Each scale is resampled onto the output grid by an adaptive
//! warping layer whose per-pixel kernels are predicted from the offsets of
//! the 3×3 window measured in the local ellipse basis. The three warped
//! features are blended per pixel, refined by masked residual blocks and
//! added to the bicubic warp of the input.
//!
//! All per-pixel geometry (validity mask, sampling sites, rescaled
//! offsets, scale feature and the bicubic image) depends only on the map,
//! so it is computed once per sample in a [`WarpPlan`]. Convolutions after
//! warping run on the bounding box of the mask plus a one-pixel margin,
//! which is exact because every void pixel is zeroed after each layer.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptive_grid::principal_axes;
use crate::diffnet::{
    init_residual_block, kaiming_uniform, load_params, save_params, Adam, Grads, Graph, ParamStore, SitePlan, Tensor,
    Var,
};
use crate::error::{Error, Result};
use crate::metrics::{mpsnr, EvalReport};
use crate::warp::{bicubic_at_sites, rescaled_offsets, sample_sites, Dims, Mask, Plane, Site, KERNEL_TAPS};
use crate::xform::{jacobian, scale_feature, BackwardMap, JACOBIAN_EPS};

/// Feature scales of the extractor.
pub const SCALES: [usize; 3] = [1, 2, 4];
pub const LEAKY_SLOPE: f64 = 0.2;
const HEAD_GAIN: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendMode {
    Learned,
    Average,
    Concat,
    NoContent,
    NoScale,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub trunk_blocks: usize,
    pub channels: usize,
    pub estimator_hidden: usize,
    /// One kernel per channel (true) or one shared across channels.
    pub depthwise: bool,
    /// A separate kernel estimator for each scale.
    pub per_scale_estimators: bool,
    pub blend_mode: BlendMode,
    pub recon_blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            trunk_blocks: 4,
            channels: 16,
            estimator_hidden: 64,
            depthwise: true,
            per_scale_estimators: true,
            blend_mode: BlendMode::Learned,
            recon_blocks: 5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.estimator_hidden == 0 {
            return Err(Error::InvalidParams(
                "channels and estimator_hidden must be positive".into(),
            ));
        }
        Ok(())
    }

    fn kernel_width(&self) -> usize {
        if self.depthwise {
            self.channels * KERNEL_TAPS
        } else {
            KERNEL_TAPS
        }
    }

    fn estimator_prefix(&self, scale: usize) -> String {
        if self.per_scale_estimators {
            format!("awl.x{scale}")
        } else {
            "awl.shared".to_string()
        }
    }
}

fn conv_params<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    gain: f64,
) -> Result<()> {
    store.insert(
        format!("{name}.w"),
        kaiming_uniform(rng, &[cout, cin, k, k], cin * k * k, gain),
    )?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[cout]))
}

fn fc_params<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    nout: usize,
    nin: usize,
    gain: f64,
) -> Result<()> {
    store.insert(format!("{name}.w"), kaiming_uniform(rng, &[nout, nin], nin, gain))?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[nout]))
}

/// Fresh parameters: Kaiming-uniform weights, zero biases, final layers of
/// the kernel estimators and blend head scaled by 0.1, and a zero
/// reconstruction tail so the untrained model reproduces the bicubic warp.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let c = cfg.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    conv_params(&mut s, &mut rng, "ext.head", c, 3, 3, 1.0)?;
    for i in 0..cfg.trunk_blocks {
        init_residual_block(&mut s, &mut rng, &format!("ext.trunk{i}"), c, 3)?;
    }
    conv_params(&mut s, &mut rng, "ext.trunk_tail", c, c, 3, 1.0)?;
    conv_params(&mut s, &mut rng, "ext.x1", c, c, 3, 1.0)?;
    conv_params(&mut s, &mut rng, "ext.x2.up0", 4 * c, c, 3, 1.0)?;
    conv_params(&mut s, &mut rng, "ext.x4.up0", 4 * c, c, 3, 1.0)?;
    conv_params(&mut s, &mut rng, "ext.x4.up1", 4 * c, c, 3, 1.0)?;

    let estimators: Vec<String> = if cfg.per_scale_estimators {
        SCALES.iter().map(|&sc| cfg.estimator_prefix(sc)).collect()
    } else {
        vec![cfg.estimator_prefix(1)]
    };
    let hid = cfg.estimator_hidden;
    for p in estimators {
        fc_params(&mut s, &mut rng, &format!("{p}.fc0"), hid, 2 * KERNEL_TAPS, 1.0)?;
        fc_params(&mut s, &mut rng, &format!("{p}.fc1"), hid, hid, 1.0)?;
        fc_params(
            &mut s,
            &mut rng,
            &format!("{p}.fc2"),
            cfg.kernel_width(),
            hid,
            HEAD_GAIN,
        )?;
    }

    match cfg.blend_mode {
        BlendMode::Average => {}
        BlendMode::Concat => conv_params(&mut s, &mut rng, "blend.concat", c, 3 * c, 1, 1.0)?,
        mode => {
            if mode != BlendMode::NoContent {
                for sc in SCALES {
                    conv_params(&mut s, &mut rng, &format!("blend.c{sc}"), c, c, 3, 1.0)?;
                }
                conv_params(&mut s, &mut rng, "blend.global", c, 3 * c, 3, 1.0)?;
            }
            let fuse_in = match mode {
                BlendMode::NoContent => 1,
                BlendMode::NoScale => c,
                _ => c + 1,
            };
            conv_params(&mut s, &mut rng, "blend.fuse0", c, fuse_in, 1, 1.0)?;
            conv_params(&mut s, &mut rng, "blend.fuse1", SCALES.len(), c, 1, HEAD_GAIN)?;
            s.get_mut("blend.fuse1.b")
                .expect("just inserted")
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 1.0 / SCALES.len() as f64);
        }
    }

    for i in 0..cfg.recon_blocks {
        init_residual_block(&mut s, &mut rng, &format!("rec.rb{i}"), c, 3)?;
    }
    s.insert("rec.tail.w", Tensor::zeros(&[3, c, 3, 3]))?;
    s.insert("rec.tail.b", Tensor::zeros(&[3]))?;
    Ok(s)
}

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn dims(&self) -> Dims {
        Dims::new(self.width, self.height)
    }
}

/// Per-scale resampling inputs of the adaptive warping layer.
#[derive(Clone, Debug)]
pub struct ScalePlan {
    pub scale: usize,
    pub sites: Arc<SitePlan>,
    /// Rescaled window offsets, `[n_sites, 18]`.
    pub offsets: Tensor,
}

/// Map-dependent, parameter-free inputs of a forward pass.
#[derive(Clone, Debug)]
pub struct WarpPlan {
    pub src: Dims,
    pub dst: Dims,
    /// Shared validity mask on the full output frame.
    pub mask: Mask,
    /// Region of the output frame the network computes on.
    pub region: Rect,
    /// `mask` restricted to `region`.
    pub region_mask: Mask,
    pub scales: Vec<ScalePlan>,
    /// `−ln|det J|` on `region`, zero at void pixels, `[1, h, w]`.
    pub scale_feature: Tensor,
    /// Bicubic warp of the input image on `region`.
    pub bicubic: Plane,
}

fn reindex(s: &Site, region: Rect) -> Site {
    let (x, y) = (s.dst[0] - region.x, s.dst[1] - region.y);
    Site {
        index: y * region.width + x,
        dst: [x, y],
        ..*s
    }
}

impl WarpPlan {
    /// Pixels whose source center is inside the image and whose Jacobian is
    /// invertible at every scale are valid.
    pub fn new(img: &Plane, map: &BackwardMap, dst: Dims) -> Result<Self> {
        let src = img.dims();
        let (sites, _) = sample_sites(map, src, dst);
        let maps: Vec<BackwardMap> = SCALES
            .iter()
            .map(|&s| {
                if s == 1 {
                    Ok(map.clone())
                } else {
                    map.onto_scaled_source(s as f64)
                }
            })
            .collect::<Result<_>>()?;

        struct SiteGeom {
            site: Site,
            scaled: Vec<(Site, [f64; 2 * KERNEL_TAPS])>,
            s_feat: f64,
        }
        let geoms: Vec<Option<SiteGeom>> = sites
            .par_iter()
            .map(|site| {
                let p = site.dst_point();
                let mut scaled = Vec::with_capacity(SCALES.len());
                let mut s_feat = 0.0;
                for (k, m) in maps.iter().enumerate() {
                    let j = jacobian(m, p, JACOBIAN_EPS).ok()?;
                    let basis = principal_axes(&j).ok()?;
                    if k == 0 {
                        s_feat = scale_feature(&j).ok()?;
                    }
                    let q = if k == 0 { site.src } else { m.eval(p).ok()? };
                    let ss = Site::new(site.index, site.dst, q);
                    let offsets = rescaled_offsets(&ss, &basis);
                    if !offsets.iter().all(|v| v.is_finite()) {
                        return None;
                    }
                    scaled.push((ss, offsets));
                }
                Some(SiteGeom {
                    site: *site,
                    scaled,
                    s_feat,
                })
            })
            .collect();
        let geoms: Vec<SiteGeom> = geoms.into_iter().flatten().collect();
        let mut mask = Mask::zeros(dst.width, dst.height);
        for g in &geoms {
            mask.set(g.site.dst[0], g.site.dst[1], true);
        }
        if geoms.is_empty() {
            return Err(Error::EmptyMask);
        }

        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for g in &geoms {
            x0 = x0.min(g.site.dst[0]);
            y0 = y0.min(g.site.dst[1]);
            x1 = x1.max(g.site.dst[0]);
            y1 = y1.max(g.site.dst[1]);
        }
        let (x0, y0) = (x0.saturating_sub(1), y0.saturating_sub(1));
        let (x1, y1) = ((x1 + 1).min(dst.width - 1), (y1 + 1).min(dst.height - 1));
        let region = Rect {
            x: x0,
            y: y0,
            width: x1 - x0 + 1,
            height: y1 - y0 + 1,
        };
        let rdims = region.dims();
        let mut region_mask = Mask::zeros(region.width, region.height);
        let mut sf = vec![0.0; rdims.len()];
        let base_sites: Vec<Site> = geoms.iter().map(|g| reindex(&g.site, region)).collect();
        for (g, s) in geoms.iter().zip(&base_sites) {
            region_mask.set(s.dst[0], s.dst[1], true);
            sf[s.index] = g.s_feat;
        }
        let scales = SCALES
            .iter()
            .enumerate()
            .map(|(k, &scale)| {
                let mut offsets = Vec::with_capacity(geoms.len() * 2 * KERNEL_TAPS);
                let sites: Vec<Site> = geoms
                    .iter()
                    .map(|g| {
                        let (s, o) = &g.scaled[k];
                        offsets.extend_from_slice(o);
                        reindex(s, region)
                    })
                    .collect();
                let n = sites.len();
                Ok(ScalePlan {
                    scale,
                    sites: Arc::new(SitePlan {
                        sites,
                        src: Dims::new(src.width * scale, src.height * scale),
                        dst: rdims,
                    }),
                    offsets: Tensor::new(vec![n, 2 * KERNEL_TAPS], offsets)?,
                })
            })
            .collect::<Result<_>>()?;
        let bicubic = bicubic_at_sites(img, &base_sites, rdims);
        Ok(Self {
            src,
            dst,
            mask,
            region,
            region_mask,
            scales,
            scale_feature: Tensor::new(vec![1, region.height, region.width], sf)?,
            bicubic,
        })
    }

    /// Restricts a full-frame plane to the plan's region.
    pub fn crop(&self, p: &Plane) -> Result<Plane> {
        if p.dims() != self.dst {
            return Err(Error::ShapeMismatch(format!(
                "plane is {}x{}, plan frame is {}x{}",
                p.width(),
                p.height(),
                self.dst.width,
                self.dst.height
            )));
        }
        p.crop(self.region.x, self.region.y, self.region.width, self.region.height)
    }

    /// Places region values into a zero full-frame plane.
    pub fn paste(&self, region_values: &[f64], channels: usize) -> Plane {
        let r = self.region;
        let mut out = Plane::zeros(self.dst.width, self.dst.height, channels);
        for c in 0..channels {
            for y in 0..r.height {
                for x in 0..r.width {
                    let v = region_values[(c * r.height + y) * r.width + x];
                    out.set(c, r.y + y, r.x + x, v);
                }
            }
        }
        out
    }

    /// The bicubic baseline on the full frame.
    pub fn bicubic_full(&self) -> Plane {
        self.paste(self.bicubic.data(), self.bicubic.channels())
    }

    fn mask_f64(&self) -> Arc<[f64]> {
        self.region_mask.as_f64().into()
    }
}

pub fn plane_to_tensor(p: &Plane) -> Tensor {
    Tensor::new(vec![p.channels(), p.height(), p.width()], p.data().to_vec()).expect("plane layout is [C,H,W]")
}

fn conv(g: &mut Graph, s: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(s, &format!("{name}.w"))?;
    let b = g.param(s, &format!("{name}.b"))?;
    g.conv2d(x, w, Some(b))
}

fn pconv(g: &mut Graph, s: &ParamStore, name: &str, x: Var, m: &Mask, mf: &Arc<[f64]>) -> Result<Var> {
    let w = g.param(s, &format!("{name}.w"))?;
    let b = g.param(s, &format!("{name}.b"))?;
    let (y, _) = g.pconv2d(x, m, w, b)?;
    g.mask_mul(y, mf.clone())
}

fn linear(g: &mut Graph, s: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(s, &format!("{name}.w"))?;
    let b = g.param(s, &format!("{name}.b"))?;
    g.linear(x, w, Some(b))
}

/// ×1, ×2 and ×4 features of a `[3, H, W]` input.
pub fn extract_multiscale(g: &mut Graph, s: &ParamStore, cfg: &ModelConfig, x: Var) -> Result<[Var; 3]> {
    if g.value(x).shape().first() != Some(&3) {
        return Err(Error::ShapeMismatch(format!(
            "extractor expects 3 channels, got {:?}",
            g.value(x).shape()
        )));
    }
    let head = conv(g, s, "ext.head", x)?;
    let mut t = head;
    for i in 0..cfg.trunk_blocks {
        t = g.residual_block(s, &format!("ext.trunk{i}"), t)?;
    }
    let t = conv(g, s, "ext.trunk_tail", t)?;
    let feat = g.add(head, t)?;
    let f1 = conv(g, s, "ext.x1", feat)?;
    let u = conv(g, s, "ext.x2.up0", feat)?;
    let f2 = g.depth_to_space(u, 2)?;
    let u = conv(g, s, "ext.x4.up0", feat)?;
    let u = g.depth_to_space(u, 2)?;
    let u = conv(g, s, "ext.x4.up1", u)?;
    let f4 = g.depth_to_space(u, 2)?;
    Ok([f1, f2, f4])
}

/// Per-site kernels `[n, C·9]` (depthwise) or `[n, 9]` from rescaled offsets `[n, 18]`.
pub fn kernel_estimator(g: &mut Graph, s: &ParamStore, cfg: &ModelConfig, scale: usize, offsets: Var) -> Result<Var> {
    let p = cfg.estimator_prefix(scale);
    let h = linear(g, s, &format!("{p}.fc0"), offsets)?;
    let h = g.leaky_relu(h, LEAKY_SLOPE);
    let h = linear(g, s, &format!("{p}.fc1"), h)?;
    let h = g.leaky_relu(h, LEAKY_SLOPE);
    linear(g, s, &format!("{p}.fc2"), h)
}

/// Adaptive warping layer: resamples `feat` onto the plan region with predicted kernels.
pub fn awl(g: &mut Graph, s: &ParamStore, cfg: &ModelConfig, feat: Var, plan: &ScalePlan) -> Result<Var> {
    let offsets = g.input(plan.offsets.clone());
    let kernels = kernel_estimator(g, s, cfg, plan.scale, offsets)?;
    g.site_warp(feat, kernels, plan.sites.clone())
}

/// Blends the three warped features on the region.
pub fn blend(
    g: &mut Graph,
    s: &ParamStore,
    cfg: &ModelConfig,
    warped: [Var; 3],
    scale_feature: Var,
    m: &Mask,
) -> Result<Var> {
    let mf: Arc<[f64]> = m.as_f64().into();
    match cfg.blend_mode {
        BlendMode::Average => {
            let sum = g.add(warped[0], warped[1])?;
            let sum = g.add(sum, warped[2])?;
            Ok(g.scale(sum, 1.0 / 3.0))
        }
        BlendMode::Concat => {
            let cat = g.concat(&warped)?;
            let y = conv(g, s, "blend.concat", cat)?;
            g.mask_mul(y, mf)
        }
        mode => {
            let content = if mode == BlendMode::NoContent {
                None
            } else {
                let mut per_scale = Vec::with_capacity(3);
                for (k, &sc) in SCALES.iter().enumerate() {
                    let y = pconv(g, s, &format!("blend.c{sc}"), warped[k], m, &mf)?;
                    per_scale.push(g.leaky_relu(y, LEAKY_SLOPE));
                }
                let cat = g.concat(&per_scale)?;
                let y = pconv(g, s, "blend.global", cat, m, &mf)?;
                Some(g.leaky_relu(y, LEAKY_SLOPE))
            };
            let fuse_in = match (content, mode) {
                (None, _) => scale_feature,
                (Some(c), BlendMode::NoScale) => c,
                (Some(c), _) => g.concat(&[c, scale_feature])?,
            };
            let h = conv(g, s, "blend.fuse0", fuse_in)?;
            let h = g.leaky_relu(h, LEAKY_SLOPE);
            let weights = conv(g, s, "blend.fuse1", h)?;
            let weights = g.mask_mul(weights, mf)?;
            let mut acc: Option<Var> = None;
            for (k, &w_s) in warped.iter().enumerate() {
                let wk = g.slice(weights, k, 1)?;
                let term = g.channel_scale(w_s, wk)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => g.add(a, term)?,
                });
            }
            Ok(acc.expect("three scales"))
        }
    }
}

/// Masked residual refinement plus the bicubic image.
pub fn reconstruct(
    g: &mut Graph,
    s: &ParamStore,
    cfg: &ModelConfig,
    blended: Var,
    bicubic: Var,
    m: &Mask,
) -> Result<Var> {
    let mf: Arc<[f64]> = m.as_f64().into();
    let mut h = g.mask_mul(blended, mf.clone())?;
    for i in 0..cfg.recon_blocks {
        h = g.masked_residual_block(s, &format!("rec.rb{i}"), h, m)?;
    }
    let r = pconv(g, s, "rec.tail", h, m, &mf)?;
    g.add(r, bicubic)
}

/// Builds the forward graph; returns the `[3, h, w]` output on the plan region.
pub fn forward_graph(g: &mut Graph, s: &ParamStore, cfg: &ModelConfig, img: &Plane, plan: &WarpPlan) -> Result<Var> {
    if img.dims() != plan.src {
        return Err(Error::ShapeMismatch("input does not match the plan source".into()));
    }
    let x = g.input(plane_to_tensor(img));
    let feats = extract_multiscale(g, s, cfg, x)?;
    let mut warped = [feats[0]; 3];
    for (k, sp) in plan.scales.iter().enumerate() {
        warped[k] = awl(g, s, cfg, feats[k], sp)?;
    }
    let sf = g.input(plan.scale_feature.clone());
    let blended = blend(g, s, cfg, warped, sf, &plan.region_mask)?;
    let bic = g.input(plane_to_tensor(&plan.bicubic));
    reconstruct(g, s, cfg, blended, bic, &plan.region_mask)
}

/// Appends the masked L1 loss against a full-frame target.
pub fn loss_graph(g: &mut Graph, out: Var, plan: &WarpPlan, target: &Plane) -> Result<Var> {
    let t = plan.crop(target)?;
    let valid = plan.region_mask.count();
    if valid == 0 {
        return Err(Error::EmptyMask);
    }
    let norm = (valid * t.channels()) as f64;
    g.masked_l1(out, t.into_data().into(), plan.mask_f64(), norm)
}

/// Configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Sidecar describing a saved model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub num_values: usize,
}

const MODEL_FORMAT: &str = "warpcore-model";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const MODEL_FILE: &str = "model.json";

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Output on the plan region, `[3, h, w]`.
    pub fn forward_region(&self, img: &Plane, plan: &WarpPlan) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = forward_graph(&mut g, &self.params, &self.config, img, plan)?;
        Ok(g.value(out).clone())
    }

    /// Super-resolved warp of `img` onto `dst` with its validity mask.
    pub fn forward(&self, img: &Plane, map: &BackwardMap, dst: Dims) -> Result<(Plane, Mask)> {
        let plan = WarpPlan::new(img, map, dst)?;
        let region = self.forward_region(img, &plan)?;
        Ok((plan.paste(region.data(), 3), plan.mask))
    }

    /// Loss and parameter gradients for one sample, with the backward seed `seed`.
    pub fn loss_and_grads(&self, img: &Plane, plan: &WarpPlan, target: &Plane, seed: f64) -> Result<(f64, Grads)> {
        let mut g = Graph::new();
        let out = forward_graph(&mut g, &self.params, &self.config, img, plan)?;
        let loss = loss_graph(&mut g, out, plan, target)?;
        g.backward_seeded(loss, seed)?;
        let mut grads = g.param_grads();
        for (name, t) in self.params.iter() {
            if grads.get(name).is_none() {
                grads.insert(name.clone(), vec![0.0; t.len()]);
            }
        }
        Ok((g.value(loss).item(), grads))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_params(&self.params, &dir.join(WEIGHTS_FILE))?;
        let manifest = ModelManifest {
            format: MODEL_FORMAT.into(),
            version: 1,
            config: self.config.clone(),
            num_values: self.params.num_values(),
        };
        let path = dir.join(MODEL_FILE);
        crate::data::write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())
    }

    /// Loads `model.json` and `weights.bin`, checking names and shapes against the config.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MODEL_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: ModelManifest = serde_json::from_str(&text)?;
        if manifest.format != MODEL_FORMAT || manifest.version != 1 {
            return Err(Error::UnsupportedFormat(format!(
                "{}: not a version 1 {MODEL_FORMAT} manifest",
                path.display()
            )));
        }
        let params = load_params(&dir.join(WEIGHTS_FILE))?;
        let reference = init_params(&manifest.config, 0)?;
        let same_layout = reference.len() == params.len()
            && reference
                .iter()
                .zip(params.iter())
                .all(|((an, at), (bn, bt))| an == bn && at.shape() == bt.shape());
        if !same_layout {
            return Err(Error::UnsupportedFormat(
                "weights do not match the model configuration".into(),
            ));
        }
        Ok(Self {
            config: manifest.config,
            params,
        })
    }
}

/// A training or validation example with its cached plan.
#[derive(Clone, Debug)]
pub struct Example {
    pub lr: Plane,
    pub hr: Plane,
    pub plan: Arc<WarpPlan>,
}

impl Example {
    pub fn new(lr: Plane, hr: Plane, map: &BackwardMap) -> Result<Self> {
        let plan = WarpPlan::new(&lr, map, hr.dims())?;
        Ok(Self {
            lr,
            hr,
            plan: Arc::new(plan),
        })
    }
}

/// Builds examples from loaded split samples, in parallel.
pub fn examples_from_split(samples: &[crate::data::PairSample]) -> Result<Vec<Example>> {
    samples
        .par_iter()
        .map(|s| Example::new(s.lr.clone(), s.hr.clone(), &s.backward_map()))
        .collect()
}

/// Model and optimizer state of a training run.
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
}

impl Trainer {
    pub fn new(model: Model, lr: f64) -> Self {
        Self {
            model,
            adam: Adam::new(lr),
        }
    }

    /// One Adam step on the mean per-sample loss of `batch`; returns that mean.
    ///
    /// Samples run in parallel; their gradients are summed in batch order.
    pub fn train_step(&mut self, batch: &[&Example]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidParams("empty batch".into()));
        }
        let k = 1.0 / batch.len() as f64;
        let results: Vec<(f64, Grads)> = batch
            .par_iter()
            .map(|ex| self.model.loss_and_grads(&ex.lr, &ex.plan, &ex.hr, k))
            .collect::<Result<_>>()?;
        let mut total = Grads::default();
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l * k;
            total.add_scaled(g, 1.0);
        }
        self.adam.step(&mut self.model.params, &total)?;
        if !self.model.params.all_finite() {
            return Err(Error::InvalidParams("parameters became non-finite".into()));
        }
        Ok(loss)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 4,
            lr: 1e-4,
            seed: 0,
            log_every: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
}

/// Trains from scratch; batches are drawn uniformly with replacement.
///
/// `on_log` is called every `log_every` steps (and after the last step) with
/// the mean loss since the previous call.
pub fn train(
    config: ModelConfig,
    examples: &[Example],
    opts: &TrainOptions,
    mut on_log: impl FnMut(LogEntry),
) -> Result<(Model, Vec<LogEntry>)> {
    if examples.is_empty() {
        return Err(Error::InvalidParams("no training examples".into()));
    }
    let model = Model::new(config, opts.seed)?;
    let mut trainer = Trainer::new(model, opts.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_ba7c);
    let mut log = Vec::new();
    let (mut acc, mut n) = (0.0, 0usize);
    let every = opts.log_every.max(1);
    for step in 1..=opts.steps {
        let batch: Vec<&Example> = (0..opts.batch.max(1))
            .map(|_| &examples[rng.random_range(0..examples.len())])
            .collect();
        acc += trainer.train_step(&batch)?;
        n += 1;
        if step % every == 0 || step == opts.steps {
            let e = LogEntry {
                step,
                loss: acc / n as f64,
            };
            on_log(e);
            log.push(e);
            acc = 0.0;
            n = 0;
        }
    }
    Ok((trainer.model, log))
}

fn clamp01(p: &Plane) -> Plane {
    let data = p.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Plane::from_data(p.width(), p.height(), p.channels(), data).expect("same dims")
}

/// Per-example reports of the model's output, clamped to `[0, 1]`.
pub fn evaluate(model: &Model, examples: &[Example]) -> Result<Vec<EvalReport>> {
    examples
        .par_iter()
        .map(|ex| {
            let region = model.forward_region(&ex.lr, &ex.plan)?;
            let out = clamp01(&ex.plan.paste(region.data(), 3));
            EvalReport::compute(&out, &ex.hr, &ex.plan.mask)
        })
        .collect()
}

/// Per-example reports of the bicubic warp baseline, clamped to `[0, 1]`.
pub fn evaluate_bicubic(examples: &[Example]) -> Result<Vec<EvalReport>> {
    examples
        .par_iter()
        .map(|ex| EvalReport::compute(&clamp01(&ex.plan.bicubic_full()), &ex.hr, &ex.plan.mask))
        .collect()
}

/// Mean mPSNR of a report list.
pub fn mean_mpsnr(reports: &[EvalReport]) -> f64 {
    reports.iter().map(|r| r.mpsnr_db).sum::<f64>() / reports.len().max(1) as f64
}

/// mPSNR of the model output against a reference, without clamping.
pub fn output_mpsnr(model: &Model, ex: &Example) -> Result<f64> {
    let region = model.forward_region(&ex.lr, &ex.plan)?;
    mpsnr(&ex.plan.paste(region.data(), 3), &ex.hr, &ex.plan.mask)
}
