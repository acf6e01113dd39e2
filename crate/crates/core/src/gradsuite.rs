//! Finite-difference checks of every differentiable op and of each model stage.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diffnet::{
    grad_check, init_residual_block, GradCheckOptions, GradCheckReport, Graph, ParamStore, Tensor, Var,
};
use crate::error::Result;
use crate::model::{
    awl, blend, extract_multiscale, forward_graph, init_params, kernel_estimator, loss_graph, reconstruct, BlendMode,
    ModelConfig, WarpPlan, SCALES,
};
use crate::warp::{Dims, Mask, Plane};
use crate::xform::{output_bounds, BackwardMap, Homography};

/// Relative-error bound every case must meet.
pub const SUITE_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_param: Option<String>,
    /// Coordinates re-estimated with a smaller step.
    pub refined: usize,
    pub passed: bool,
}

type Objective = Box<dyn Fn(&mut Graph, &ParamStore) -> Result<Var> + Sync>;

struct Case {
    name: String,
    store: ParamStore,
    f: Objective,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], r: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-r..r)).collect()).expect("shape matches")
}

fn weights(rng: &mut ChaCha8Rng, n: usize) -> Arc<[f64]> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Mask {
    let mut m = Mask::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            m.set(x, y, rng.random_bool(0.6));
        }
    }
    m.set(w / 2, h / 2, true);
    m
}

/// Projects `v` onto fixed random weights, giving a smooth scalar objective.
fn project(g: &mut Graph, v: Var, w: &Arc<[f64]>) -> Result<Var> {
    g.dot(v, w.clone())
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut cases = Vec::new();

    let mut s = ParamStore::new();
    s.insert("x", uniform(rng, &[2, 5, 4], 1.0)).unwrap();
    s.insert("w", uniform(rng, &[3, 2, 3, 3], 0.5)).unwrap();
    s.insert("b", uniform(rng, &[3], 0.5)).unwrap();
    s.insert("w1", uniform(rng, &[2, 2, 1, 1], 0.5)).unwrap();
    let p = weights(rng, 3 * 20);
    let p1 = weights(rng, 2 * 20);
    cases.push(Case {
        name: "conv2d".into(),
        store: s,
        f: Box::new(move |g, s| {
            let (x, w, b, w1) = (g.param(s, "x")?, g.param(s, "w")?, g.param(s, "b")?, g.param(s, "w1")?);
            let y = g.conv2d(x, w, Some(b))?;
            let a = project(g, y, &p)?;
            let y1 = g.conv2d(x, w1, None)?;
            let b1 = project(g, y1, &p1)?;
            g.add(a, b1)
        }),
    });

    let mut s = ParamStore::new();
    s.insert("x", uniform(rng, &[2, 6, 6], 1.0)).unwrap();
    s.insert("w", uniform(rng, &[3, 2, 3, 3], 0.5)).unwrap();
    s.insert("b", uniform(rng, &[3], 0.5)).unwrap();
    let mask = random_mask(rng, 6, 6);
    let mf: Arc<[f64]> = mask.as_f64().into();
    let p = weights(rng, 3 * 36);
    cases.push(Case {
        name: "pconv2d+mask_mul".into(),
        store: s,
        f: Box::new(move |g, s| {
            let (x, w, b) = (g.param(s, "x")?, g.param(s, "w")?, g.param(s, "b")?);
            let (y, _) = g.pconv2d(x, &mask, w, b)?;
            let y = g.mask_mul(y, mf.clone())?;
            project(g, y, &p)
        }),
    });

    let mut s = ParamStore::new();
    s.insert("x", uniform(rng, &[4, 5], 1.0)).unwrap();
    s.insert("w", uniform(rng, &[3, 5], 0.7)).unwrap();
    s.insert("b", uniform(rng, &[3], 0.5)).unwrap();
    let p = weights(rng, 12);
    cases.push(Case {
        name: "linear+relu+leaky_relu".into(),
        store: s,
        f: Box::new(move |g, s| {
            let (x, w, b) = (g.param(s, "x")?, g.param(s, "w")?, g.param(s, "b")?);
            let y = g.linear(x, w, Some(b))?;
            let r = g.relu(y);
            let l = g.leaky_relu(y, 0.2);
            let y = g.add(r, l)?;
            project(g, y, &p)
        }),
    });

    let mut s = ParamStore::new();
    s.insert("x", uniform(rng, &[8, 3, 2], 1.0)).unwrap();
    let p = weights(rng, 48);
    cases.push(Case {
        name: "depth_to_space+reshape".into(),
        store: s,
        f: Box::new(move |g, s| {
            let x = g.param(s, "x")?;
            let y = g.depth_to_space(x, 2)?;
            let y = g.flatten(y)?;
            project(g, y, &p)
        }),
    });

    let mut s = ParamStore::new();
    s.insert("a", uniform(rng, &[3, 4, 4], 1.0)).unwrap();
    s.insert("m", uniform(rng, &[1, 4, 4], 1.0)).unwrap();
    let p = weights(rng, 2 * 16);
    cases.push(Case {
        name: "concat+slice+channel_scale+add+scale".into(),
        store: s,
        f: Box::new(move |g, s| {
            let (a, m) = (g.param(s, "a")?, g.param(s, "m")?);
            let cat = g.concat(&[a, m])?;
            let head = g.slice(cat, 1, 2)?;
            let tail = g.slice(cat, 3, 1)?;
            let y = g.channel_scale(head, tail)?;
            let z = g.scale(head, -0.7);
            let y = g.add(y, z)?;
            let q = project(g, y, &p)?;
            let sq = g.sum_squares(m);
            let sq = g.scale(sq, 0.1);
            g.add(q, sq)
        }),
    });

    let mut s = ParamStore::new();
    init_residual_block(&mut s, rng, "rb", 3, 3).unwrap();
    s.insert("x", uniform(rng, &[3, 5, 5], 1.0)).unwrap();
    let mask = random_mask(rng, 5, 5);
    let p = weights(rng, 75);
    let p2 = weights(rng, 75);
    cases.push(Case {
        name: "residual_block+masked_residual_block".into(),
        store: s,
        f: Box::new(move |g, s| {
            let x = g.param(s, "x")?;
            let y = g.residual_block(s, "rb", x)?;
            let a = project(g, y, &p)?;
            let z = g.masked_residual_block(s, "rb", x, &mask)?;
            let b = project(g, z, &p2)?;
            g.add(a, b)
        }),
    });

    let mut s = ParamStore::new();
    s.insert("x", uniform(rng, &[3, 4, 4], 1.0)).unwrap();
    let target: Arc<[f64]> = (0..48).map(|i| if i % 2 == 0 { 3.0 } else { -3.0 }).collect();
    let mask = random_mask(rng, 4, 4);
    let mf: Arc<[f64]> = mask.as_f64().into();
    let norm = (mask.count() * 3) as f64;
    cases.push(Case {
        name: "masked_l1".into(),
        store: s,
        f: Box::new(move |g, s| {
            let x = g.param(s, "x")?;
            g.masked_l1(x, target.clone(), mf.clone(), norm)
        }),
    });

    cases
}

/// A small projective example shared by the model cases.
pub struct ToyProblem {
    pub config: ModelConfig,
    pub lr: Plane,
    pub hr: Plane,
    pub plan: WarpPlan,
}

impl ToyProblem {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (6, 6);
        let lr = Plane::from_data(w, h, 3, (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect())?;
        let m = Homography::new([[1.4, 0.25, 0.0], [-0.15, 1.3, 0.0], [0.01, 0.015, 1.0]])?;
        let bounds = output_bounds(&m, w, h)?;
        let dst = Dims::new(bounds.width, bounds.height);
        let map = BackwardMap::Homography(bounds.transform);
        let plan = WarpPlan::new(&lr, &map, dst)?;
        let hr = Plane::from_data(
            dst.width,
            dst.height,
            3,
            (0..dst.len() * 3).map(|_| rng.random_range(0.0..1.0)).collect(),
        )?;
        Ok(Self { config, lr, hr, plan })
    }

    pub fn tiny_config() -> ModelConfig {
        ModelConfig {
            trunk_blocks: 1,
            channels: 4,
            estimator_hidden: 8,
            recon_blocks: 1,
            ..ModelConfig::default()
        }
    }

    /// Initial parameters plus uniform noise, so zero-initialised layers
    /// do not hide upstream gradients.
    pub fn params(&self, seed: u64) -> Result<ParamStore> {
        let mut s = init_params(&self.config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa11c);
        for (_, t) in s.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        }
        Ok(s)
    }
}

fn subset(s: &ParamStore, prefixes: &[&str]) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, t) in s.iter() {
        if prefixes.iter().any(|p| name.starts_with(p)) {
            out.insert(name.clone(), t.clone()).unwrap();
        }
    }
    out
}

fn model_cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    let mut cases = Vec::new();
    let toy = Arc::new(ToyProblem::new(ToyProblem::tiny_config(), 3)?);
    let params = toy.params(4)?;
    let c = toy.config.channels;
    let r = toy.plan.region.dims();
    let (lw, lh) = (toy.lr.width(), toy.lr.height());

    let pw: Vec<Arc<[f64]>> = SCALES.iter().map(|s| weights(rng, c * lw * lh * s * s)).collect();
    let t = toy.clone();
    cases.push(Case {
        name: "model.extract_multiscale".into(),
        store: subset(&params, &["ext."]),
        f: Box::new(move |g, s| {
            let x = g.input(crate::model::plane_to_tensor(&t.lr));
            let feats = extract_multiscale(g, s, &t.config, x)?;
            let mut acc = project(g, feats[0], &pw[0])?;
            for k in 1..3 {
                let v = project(g, feats[k], &pw[k])?;
                acc = g.add(acc, v)?;
            }
            Ok(acc)
        }),
    });

    for depthwise in [true, false] {
        let cfg = ModelConfig {
            depthwise,
            ..toy.config.clone()
        };
        let mut store = subset(&init_params(&cfg, 5)?, &["awl."]);
        for (_, t) in store.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        }
        for &sc in &SCALES {
            store.insert(format!("feat.x{sc}"), uniform(rng, &[c, lh * sc, lw * sc], 1.0))?;
        }
        let p = weights(rng, c * r.len());
        let t = toy.clone();
        cases.push(Case {
            name: format!("model.awl(depthwise={depthwise})"),
            store,
            f: Box::new(move |g, s| {
                let mut acc: Option<Var> = None;
                for sp in &t.plan.scales {
                    let feat = g.param(s, &format!("feat.x{}", sp.scale))?;
                    let y = awl(g, s, &cfg, feat, sp)?;
                    let v = project(g, y, &p)?;
                    acc = Some(match acc {
                        None => v,
                        Some(a) => g.add(a, v)?,
                    });
                }
                Ok(acc.expect("three scales"))
            }),
        });
    }

    let n_sites = toy.plan.scales[0].offsets.shape()[0];
    let p = weights(rng, n_sites * c * 9);
    let t = toy.clone();
    cases.push(Case {
        name: "model.kernel_estimator".into(),
        store: subset(&params, &["awl.x2."]),
        f: Box::new(move |g, s| {
            let off = g.input(t.plan.scales[1].offsets.clone());
            let k = kernel_estimator(g, s, &t.config, 2, off)?;
            project(g, k, &p)
        }),
    });

    for mode in [
        BlendMode::Learned,
        BlendMode::Average,
        BlendMode::Concat,
        BlendMode::NoContent,
        BlendMode::NoScale,
    ] {
        let cfg = ModelConfig {
            blend_mode: mode,
            ..toy.config.clone()
        };
        let mut store = subset(&init_params(&cfg, 6)?, &["blend."]);
        for (_, t) in store.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        }
        for k in 0..3 {
            store.insert(format!("warped{k}"), uniform(rng, &[c, r.height, r.width], 1.0))?;
        }
        let p = weights(rng, c * r.len());
        let t = toy.clone();
        cases.push(Case {
            name: format!("model.blend({})", serde_json::to_string(&mode)?.trim_matches('"')),
            store,
            f: Box::new(move |g, s| {
                let w = [g.param(s, "warped0")?, g.param(s, "warped1")?, g.param(s, "warped2")?];
                let sf = g.input(t.plan.scale_feature.clone());
                let y = blend(g, s, &cfg, w, sf, &t.plan.region_mask)?;
                project(g, y, &p)
            }),
        });
    }

    let mut store = subset(&params, &["rec."]);
    store.insert("blended", uniform(rng, &[c, r.height, r.width], 1.0))?;
    let p = weights(rng, 3 * r.len());
    let t = toy.clone();
    cases.push(Case {
        name: "model.reconstruct".into(),
        store,
        f: Box::new(move |g, s| {
            let b = g.param(s, "blended")?;
            let bic = g.input(crate::model::plane_to_tensor(&t.plan.bicubic));
            let y = reconstruct(g, s, &t.config, b, bic, &t.plan.region_mask)?;
            project(g, y, &p)
        }),
    });

    let t = toy.clone();
    cases.push(Case {
        name: "model.full_pipeline+loss".into(),
        store: params,
        f: Box::new(move |g, s| {
            let out = forward_graph(g, s, &t.config, &t.lr, &t.plan)?;
            loss_graph(g, out, &t.plan, &t.hr)
        }),
    });
    Ok(cases)
}

/// Runs every case with central differences of step `step` (all
/// coordinates of op cases, up to `model_coords` per model tensor).
pub fn run_suite(step: f64, model_coords: Option<usize>, seed: u64) -> Result<Vec<SuiteResult>> {
    use rayon::prelude::*;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ops = op_cases(&mut rng);
    let models = model_cases(&mut rng)?;
    let n_ops = ops.len();
    let all: Vec<Case> = ops.into_iter().chain(models).collect();
    all.par_iter()
        .enumerate()
        .map(|(i, case)| {
            let opts = GradCheckOptions {
                step,
                max_coords_per_tensor: if i < n_ops { None } else { model_coords },
                refine_above: Some(SUITE_TOLERANCE),
                seed: seed.wrapping_add(i as u64),
                ..Default::default()
            };
            let report: GradCheckReport = grad_check(&case.store, &case.f, &opts)?;
            Ok(SuiteResult {
                name: case.name.clone(),
                checked: report.checked,
                max_rel_err: report.max_rel_err,
                worst_param: report.worst.map(|w| w.param),
                refined: report.refined,
                passed: report.max_rel_err <= SUITE_TOLERANCE && report.checked > 0,
            })
        })
        .collect()
}
