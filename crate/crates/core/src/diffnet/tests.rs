use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::warp::{sample_sites, Dims, Mask};
use crate::xform::{BackwardMap, Homography};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64]) -> Vec<f64> {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let mut out = vec![0.0; cout * h * wd];
    for co in 0..cout {
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = b[co];
                for ci in 0..cin {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let sy = y as isize + ky as isize - (kh / 2) as isize;
                            let sx = xx as isize + kx as isize - (kw / 2) as isize;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                continue;
                            }
                            acc += w.data()[((co * cin + ci) * kh + ky) * kw + kx]
                                * x.data()[(ci * h + sy as usize) * wd + sx as usize];
                        }
                    }
                }
                out[(co * h + y) * wd + xx] = acc;
            }
        }
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

#[test]
fn conv2d_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &(cin, cout, k, h, w) in &[(3, 4, 3, 5, 7), (2, 3, 1, 4, 4), (1, 2, 5, 6, 3)] {
        let x = rand_tensor(&mut rng, &[cin, h, w]);
        let wt = rand_tensor(&mut rng, &[cout, cin, k, k]);
        let b = rand_tensor(&mut rng, &[cout]);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.input(x.clone()), g.input(wt.clone()), g.input(b.clone()));
        let y = g.conv2d(xv, wv, Some(bv)).unwrap();
        assert_eq!(g.value(y).shape(), &[cout, h, w]);
        assert!(max_diff(g.value(y).data(), &naive_conv(&x, &wt, b.data())) <= 1e-12);
    }
}

#[test]
fn conv2d_unit_kernel_and_delta() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[1, 4, 5]);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let w = g.input(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
    let y = g.conv2d(xv, w, None).unwrap();
    assert_eq!(g.value(y), &x);

    let mut delta = Tensor::zeros(&[1, 5, 5]);
    delta.data_mut()[12] = 1.0;
    let k = rand_tensor(&mut rng, &[1, 1, 3, 3]);
    let dv = g.input(delta);
    let kv = g.input(k.clone());
    let y = g.conv2d(dv, kv, None).unwrap();
    // Cross-correlation imprints the kernel flipped around the delta.
    for ky in 0..3 {
        for kx in 0..3 {
            let v = g.value(y).data()[(3 - ky) * 5 + (3 - kx)];
            assert_eq!(v, k.data()[ky * 3 + kx]);
        }
    }
}

#[test]
fn conv2d_rejects_bad_shapes() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[2, 3, 3]));
    let w = g.input(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(matches!(g.conv2d(x, w, None), Err(Error::ShapeMismatch(_))));
    let w = g.input(Tensor::zeros(&[1, 2, 2, 2]));
    assert!(matches!(g.conv2d(x, w, None), Err(Error::ShapeMismatch(_))));
}

#[test]
fn pconv_all_ones_is_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[3, 6, 5]);
    let w = rand_tensor(&mut rng, &[2, 3, 3, 3]);
    let b = rand_tensor(&mut rng, &[2]);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.input(x), g.input(w), g.input(b));
    let (p, m) = g.pconv2d(xv, &Mask::ones(5, 6), wv, bv).unwrap();
    let c = g.conv2d(xv, wv, Some(bv)).unwrap();
    assert_eq!(g.value(p), g.value(c));
    assert_eq!(m, Mask::ones(5, 6));
}

#[test]
fn pconv_all_zeros_is_void() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::new();
    let xv = g.input(rand_tensor(&mut rng, &[2, 4, 4]));
    let wv = g.input(rand_tensor(&mut rng, &[3, 2, 3, 3]));
    let bv = g.input(rand_tensor(&mut rng, &[3]));
    let (p, m) = g.pconv2d(xv, &Mask::zeros(4, 4), wv, bv).unwrap();
    assert!(g.value(p).data().iter().all(|&v| v == 0.0));
    assert_eq!(m.count(), 0);
}

#[test]
fn pconv_half_masked_constant() {
    // Left half valid; a normalized box filter returns the constant wherever
    // any window tap is valid. Pixels on the image border are excluded since
    // zero padding counts toward the normalizer (keeping all-ones = conv2d).
    let (w, h) = (8, 6);
    let mut mask = Mask::zeros(w, h);
    for y in 0..h {
        for x in 0..w / 2 {
            mask.set(x, y, true);
        }
    }
    let mut x = Tensor::zeros(&[1, h, w]);
    for y in 0..h {
        for xx in 0..w {
            x.data_mut()[y * w + xx] = if xx < w / 2 { 0.7 } else { 123.0 };
        }
    }
    let mut g = Graph::new();
    let xv = g.input(x);
    let wv = g.input(Tensor::new(vec![1, 1, 3, 3], vec![1.0 / 9.0; 9]).unwrap());
    let bv = g.input(Tensor::zeros(&[1]));
    let (p, m) = g.pconv2d(xv, &mask, wv, bv).unwrap();
    for y in 0..h {
        for xx in 0..w {
            let v = g.value(p).data()[y * w + xx];
            let border = xx == 0 || y == 0 || y == h - 1;
            if xx <= w / 2 {
                assert!(m.get(xx, y));
                if !border {
                    assert!((v - 0.7).abs() < 1e-12, "({xx},{y}) = {v}");
                }
            } else {
                assert!(!m.get(xx, y));
                assert_eq!(v, 0.0);
            }
        }
    }
}

#[test]
fn linear_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[4]);
    let mut eye = Tensor::zeros(&[4, 4]);
    for i in 0..4 {
        eye.data_mut()[i * 5] = 1.0;
    }
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let e = g.input(eye);
    let b0 = g.input(Tensor::zeros(&[4]));
    let y = g.linear(xv, e, Some(b0)).unwrap();
    assert_eq!(g.value(y), &x);

    let z = g.input(Tensor::zeros(&[3, 4]));
    let c = g.input(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
    let y = g.linear(xv, z, Some(c)).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, -2.0, 0.5]);

    let xs = rand_tensor(&mut rng, &[5, 7]);
    let w = rand_tensor(&mut rng, &[3, 7]);
    let b = rand_tensor(&mut rng, &[3]);
    let (xv, wv, bv) = (g.input(xs.clone()), g.input(w.clone()), g.input(b.clone()));
    let y = g.linear(xv, wv, Some(bv)).unwrap();
    let mut want = vec![0.0; 15];
    for r in 0..5 {
        for o in 0..3 {
            want[r * 3 + o] = b.data()[o] + (0..7).map(|i| w.data()[o * 7 + i] * xs.data()[r * 7 + i]).sum::<f64>();
        }
    }
    assert!(max_diff(g.value(y).data(), &want) <= 1e-12);
}

#[test]
fn depth_to_space_cases() {
    let x = Tensor::new(vec![4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = depth_to_space(&x, 2).unwrap();
    assert_eq!(y.shape(), &[1, 2, 2]);
    assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[8, 3, 5]);
    assert_eq!(depth_to_space(&x, 1).unwrap(), x);
    let y = depth_to_space(&x, 2).unwrap();
    assert_eq!(y.shape(), &[2, 6, 10]);
    assert_eq!(space_to_depth(&y, 2).unwrap(), x);
    assert!(depth_to_space(&Tensor::zeros(&[3, 2, 2]), 2).is_err());
}

#[test]
fn residual_blocks_with_zero_weights_are_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    for k in 0..3 {
        let [w1, b1, w2, b2] = residual_block_names(&format!("rb{k}"));
        store.insert(w1, Tensor::zeros(&[4, 4, 3, 3])).unwrap();
        store.insert(b1, Tensor::zeros(&[4])).unwrap();
        store.insert(w2, Tensor::zeros(&[4, 4, 3, 3])).unwrap();
        store.insert(b2, Tensor::zeros(&[4])).unwrap();
    }
    let x = rand_tensor(&mut rng, &[4, 5, 5]);
    let mut g = Graph::new();
    let mut h = g.input(x.clone());
    for k in 0..3 {
        h = g.residual_block(&store, &format!("rb{k}"), h).unwrap();
        assert_eq!(g.value(h), &x);
    }
}

fn check(store: &ParamStore, f: impl Fn(&mut Graph, &ParamStore) -> Result<Var>, tol: f64) {
    let opts = GradCheckOptions {
        step: 1e-5,
        ..Default::default()
    };
    let r = grad_check(store, f, &opts).unwrap();
    assert!(r.checked > 0);
    assert!(r.max_rel_err <= tol, "{r:?}");
}

fn weights_for(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arc<[f64]> {
    rand_tensor(rng, shape).into_data().into()
}

#[test]
fn grad_check_quadratic() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    store.insert("theta", rand_tensor(&mut rng, &[5, 3])).unwrap();
    let r = grad_check(
        &store,
        |g, s| {
            let t = g.param(s, "theta")?;
            Ok(g.sum_squares(t))
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(r.max_rel_err <= 1e-8, "{r:?}");
    let mut g = Graph::new();
    let t = g.param(&store, "theta").unwrap();
    let l = g.sum_squares(t);
    g.backward(l).unwrap();
    let want: Vec<f64> = store.get("theta").unwrap().data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(g.param_grads().get("theta").unwrap(), &want[..]);
}

#[test]
fn grad_check_conv_relu_fc() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    store.insert("x", rand_tensor(&mut rng, &[2, 5, 4])).unwrap();
    store.insert("c.w", rand_tensor(&mut rng, &[3, 2, 3, 3])).unwrap();
    store.insert("c.b", rand_tensor(&mut rng, &[3])).unwrap();
    store.insert("f.w", rand_tensor(&mut rng, &[4, 60])).unwrap();
    store.insert("f.b", rand_tensor(&mut rng, &[4])).unwrap();
    let proj = weights_for(&mut rng, &[4]);
    check(
        &store,
        move |g, s| {
            let x = g.param(s, "x")?;
            let (w, b) = (g.param(s, "c.w")?, g.param(s, "c.b")?);
            let h = g.conv2d(x, w, Some(b))?;
            let h = g.relu(h);
            let v = reshape_rows(g, h, 60)?;
            let (fw, fb) = (g.param(s, "f.w")?, g.param(s, "f.b")?);
            let y = g.linear(v, fw, Some(fb))?;
            g.dot(y, proj.clone())
        },
        1e-5,
    );
}

/// Flattens `[C,H,W]` into a single row by slicing and concatenating,
/// exercising both ops.
fn reshape_rows(g: &mut Graph, x: Var, n: usize) -> Result<Var> {
    let c = g.value(x).shape()[0];
    let parts: Vec<Var> = (0..c).map(|i| g.slice(x, i, 1)).collect::<Result<_>>()?;
    let joined = g.concat(&parts)?;
    assert_eq!(g.value(joined).len(), n);
    g.flatten(joined)
}

#[test]
fn grad_check_pconv_mixed_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::new();
    store.insert("x", rand_tensor(&mut rng, &[2, 6, 6])).unwrap();
    store.insert("w", rand_tensor(&mut rng, &[3, 2, 3, 3])).unwrap();
    store.insert("b", rand_tensor(&mut rng, &[3])).unwrap();
    let mut mask = Mask::zeros(6, 6);
    for y in 0..6 {
        for x in 0..6 {
            mask.set(x, y, rng.random_bool(0.5));
        }
    }
    let proj = weights_for(&mut rng, &[3, 6, 6]);
    check(
        &store,
        move |g, s| {
            let (x, w, b) = (g.param(s, "x")?, g.param(s, "w")?, g.param(s, "b")?);
            let (y, _) = g.pconv2d(x, &mask, w, b)?;
            g.dot(y, proj.clone())
        },
        1e-5,
    );
}

#[test]
fn grad_check_shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    store.insert("a", rand_tensor(&mut rng, &[8, 3, 3])).unwrap();
    store.insert("b", rand_tensor(&mut rng, &[2, 6, 6])).unwrap();
    store.insert("s", rand_tensor(&mut rng, &[1, 6, 6])).unwrap();
    let proj = weights_for(&mut rng, &[3, 6, 6]);
    let target: Arc<[f64]> = weights_for(&mut rng, &[3, 6, 6]);
    let mut m = vec![1.0; 36];
    m[5] = 0.0;
    m[20] = 0.0;
    let m: Arc<[f64]> = m.into();
    check(
        &store,
        move |g, s| {
            let a = g.param(s, "a")?;
            let b = g.param(s, "b")?;
            let w = g.param(s, "s")?;
            let d = g.depth_to_space(a, 2)?;
            let d = g.leaky_relu(d, 0.2);
            let c = g.concat(&[d, b])?;
            let c = g.slice(c, 1, 3)?;
            let c = g.channel_scale(c, w)?;
            let c = g.scale(c, 1.5);
            let c2 = g.mask_mul(c, m.clone())?;
            let sum = g.add(c, c2)?;
            let l1 = g.masked_l1(sum, target.clone(), m.clone(), 10.0)?;
            let dp = g.dot(sum, proj.clone())?;
            g.add(l1, dp)
        },
        1e-5,
    );
}

#[test]
fn grad_check_site_warp() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let src = Dims::new(7, 6);
    let dst = Dims::new(9, 8);
    let h = Homography::new([[1.2, 0.2, 0.3], [-0.1, 1.1, 0.4], [0.01, 0.005, 1.0]]).unwrap();
    let (sites, _) = sample_sites(&BackwardMap::Homography(h), src, dst);
    assert!(sites.len() > 10);
    let plan = Arc::new(SitePlan { sites, src, dst });
    for kc in [2, 1] {
        let mut store = ParamStore::new();
        store.insert("f", rand_tensor(&mut rng, &[2, 6, 7])).unwrap();
        store
            .insert("k", rand_tensor(&mut rng, &[plan.sites.len(), kc * 9]))
            .unwrap();
        let proj = weights_for(&mut rng, &[2, 8, 9]);
        let plan = plan.clone();
        check(
            &store,
            move |g, s| {
                let (f, k) = (g.param(s, "f")?, g.param(s, "k")?);
                let y = g.site_warp(f, k, plan.clone())?;
                g.dot(y, proj.clone())
            },
            1e-5,
        );
    }
}

#[test]
fn residual_block_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new();
    init_residual_block(&mut store, &mut rng, "rb", 3, 3).unwrap();
    store.insert("x", rand_tensor(&mut rng, &[3, 5, 5])).unwrap();
    let proj = weights_for(&mut rng, &[3, 5, 5]);
    check(
        &store,
        move |g, s| {
            let x = g.param(s, "x")?;
            let y = g.residual_block(s, "rb", x)?;
            g.dot(y, proj.clone())
        },
        1e-5,
    );
}

#[test]
fn backward_of_independent_sum_concatenates() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut store = ParamStore::new();
    store.insert("a", rand_tensor(&mut rng, &[4])).unwrap();
    store.insert("b", rand_tensor(&mut rng, &[3])).unwrap();
    let wa = weights_for(&mut rng, &[4]);
    let grads_of = |use_a: bool, use_b: bool| {
        let mut g = Graph::new();
        let a = g.param(&store, "a").unwrap();
        let b = g.param(&store, "b").unwrap();
        let la = g.dot(a, wa.clone()).unwrap();
        let lb = g.sum_squares(b);
        let root = match (use_a, use_b) {
            (true, true) => g.add(la, lb).unwrap(),
            (true, false) => la,
            _ => lb,
        };
        g.backward(root).unwrap();
        g.param_grads()
    };
    let both = grads_of(true, true);
    let only_a = grads_of(true, false);
    let only_b = grads_of(false, true);
    assert_eq!(both.get("a"), only_a.get("a"));
    assert_eq!(both.get("b"), only_b.get("b"));
    assert!(only_a.get("b").unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn adam_zero_gradient_keeps_params() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut store = ParamStore::new();
    store.insert("p", rand_tensor(&mut rng, &[6])).unwrap();
    let before = store.clone();
    let mut grads = Grads::default();
    grads.insert("p", vec![0.0; 6]);
    let mut adam = Adam::new(1e-2);
    for _ in 0..5 {
        adam.step(&mut store, &grads).unwrap();
    }
    assert_eq!(store, before);
}

#[test]
fn adam_first_step_is_sign_step() {
    let mut store = ParamStore::new();
    store.insert("p", Tensor::zeros(&[3])).unwrap();
    let mut grads = Grads::default();
    grads.insert("p", vec![0.3, -2.0, 50.0]);
    let mut adam = Adam::new(1e-3);
    adam.step(&mut store, &grads).unwrap();
    for (v, s) in store.get("p").unwrap().data().iter().zip([-1.0, 1.0, -1.0]) {
        assert!((v - s * 1e-3).abs() < 1e-9, "{v}");
    }
}

#[test]
fn adam_minimizes_quadratic() {
    let mut store = ParamStore::new();
    store.insert("p", Tensor::new(vec![1], vec![3.0]).unwrap()).unwrap();
    let loss = |s: &ParamStore| (s.get("p").unwrap().item() - 1.0).powi(2);
    let initial = loss(&store);
    let mut adam = Adam::new(0.05);
    for _ in 0..200 {
        let p = store.get("p").unwrap().item();
        let mut grads = Grads::default();
        grads.insert("p", vec![2.0 * (p - 1.0)]);
        adam.step(&mut store, &grads).unwrap();
    }
    assert!(loss(&store) < 1e-3 * initial, "{}", loss(&store));
    assert_eq!(adam.steps(), 200);
}

#[test]
fn weights_round_trip_and_corruption() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut store = ParamStore::new();
    store.insert("a.w", rand_tensor(&mut rng, &[2, 3, 3, 3])).unwrap();
    store.insert("b", Tensor::scalar(-0.25)).unwrap();
    let bytes = params_to_bytes(&store);
    assert_eq!(&bytes[..8], WEIGHTS_MAGIC);
    assert_eq!(params_from_bytes(&bytes).unwrap(), store);
    for bad in [&bytes[..bytes.len() - 3], &bytes[1..], b"nonsense".as_slice()] {
        assert!(matches!(params_from_bytes(bad), Err(Error::UnsupportedFormat(_))));
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(params_from_bytes(&extra).is_err());
}

#[test]
fn unknown_param_is_reported() {
    let mut g = Graph::new();
    assert!(matches!(
        g.param(&ParamStore::new(), "nope"),
        Err(Error::UnknownParam(_))
    ));
}
