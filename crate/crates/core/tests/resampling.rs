use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use warpcore::metrics::mpsnr;
use warpcore::warp::{compute_mask, warp_adaptive_fixed, warp_bicubic, Dims, Mask, Plane};
use warpcore::xform::{make_functional, BackwardMap, FunctionalKind, FunctionalParams, Homography, Point2};

fn random_plane(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> Plane {
    Plane::from_data(w, h, c, (0..w * h * c).map(|_| rng.random::<f64>()).collect()).unwrap()
}

/// Keys cubic with a = -0.5, written out piecewise.
fn keys(t: f64) -> f64 {
    let t = t.abs();
    if t < 1.0 {
        1.5 * t * t * t - 2.5 * t * t + 1.0
    } else if t < 2.0 {
        -0.5 * t * t * t + 2.5 * t * t - 4.0 * t + 2.0
    } else {
        0.0
    }
}

/// Separable bicubic resize by an integer factor with half-pixel alignment.
fn reference_resize(img: &Plane, s: usize) -> Plane {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let coeffs = |n_out: usize, n_in: usize| -> Vec<Vec<(usize, f64)>> {
        (0..n_out)
            .map(|o| {
                let u = (o as f64 + 0.5) / s as f64 - 0.5;
                let f = u.floor() as i64;
                (f - 1..=f + 2)
                    .map(|t| (t.clamp(0, n_in as i64 - 1) as usize, keys(u - t as f64)))
                    .collect()
            })
            .collect()
    };
    let (cx, cy) = (coeffs(w * s, w), coeffs(h * s, h));
    let mut tmp = Plane::zeros(w * s, h, c);
    for ch in 0..c {
        for y in 0..h {
            for (x, taps) in cx.iter().enumerate() {
                tmp.set(ch, y, x, taps.iter().map(|&(i, k)| k * img.get(ch, y, i)).sum());
            }
        }
    }
    let mut out = Plane::zeros(w * s, h * s, c);
    for ch in 0..c {
        for (y, taps) in cy.iter().enumerate() {
            for x in 0..w * s {
                out.set(ch, y, x, taps.iter().map(|&(i, k)| k * tmp.get(ch, i, x)).sum());
            }
        }
    }
    out
}

#[test]
fn scale_two_matches_separable_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let img = random_plane(&mut rng, 32, 32, 3);
        let map = BackwardMap::Homography(Homography::scale_matrix(2.0, 2.0).unwrap());
        let (out, mask) = warp_bicubic(&img, &map, Dims::new(64, 64));
        let want = reference_resize(&img, 2);
        let mut worst: f64 = 0.0;
        for c in 0..3 {
            for y in 4..60 {
                for x in 4..60 {
                    assert!(mask.get(x, y));
                    worst = worst.max((out.get(c, y, x) - want.get(c, y, x)).abs());
                }
            }
        }
        assert!(worst <= 1e-6, "max interior deviation {worst:e}");
    }
}

#[test]
fn identity_warps_reproduce_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let img = random_plane(&mut rng, 17, 11, 3);
    let id = BackwardMap::identity();
    for (out, mask) in [
        warp_bicubic(&img, &id, img.dims()),
        warp_adaptive_fixed(&img, &id, img.dims()),
    ] {
        assert_eq!(mask.count(), 17 * 11);
        let dev = out
            .data()
            .iter()
            .zip(img.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(dev <= 1e-12, "{dev:e}");
        assert_eq!(mpsnr(&out, &img, &mask).unwrap(), f64::INFINITY);
    }
}

fn brute_mask(map: &BackwardMap, src: Dims, dst: Dims) -> Mask {
    let mut m = Mask::zeros(dst.width, dst.height);
    for y in 0..dst.height {
        for x in 0..dst.width {
            if let Ok(p) = map.eval(Point2::new(x as f64, y as f64)) {
                let ok =
                    (0.0..=src.width as f64 - 1.0).contains(&p.x) && (0.0..=src.height as f64 - 1.0).contains(&p.y);
                m.set(x, y, ok);
            }
        }
    }
    m
}

#[test]
fn functional_masks_match_brute_force() {
    let src = Dims::new(40, 30);
    for kind in [FunctionalKind::Sine, FunctionalKind::Barrel] {
        for scale in [1.0, 1.7] {
            let map = make_functional(kind, &FunctionalParams::default(), scale, src.width, src.height).unwrap();
            let dst = Dims::new((40.0 * scale) as usize, (30.0 * scale) as usize);
            assert_eq!(compute_mask(&map, src, dst), brute_mask(&map, src, dst));
        }
    }
}

#[test]
fn warps_ignore_thread_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let img = random_plane(&mut rng, 31, 27, 3);
    let h = Homography::new([[1.3, 0.2, 2.0], [-0.1, 1.1, 1.0], [1e-3, -2e-3, 1.0]]).unwrap();
    let map = BackwardMap::Homography(h);
    let dst = Dims::new(40, 36);
    let run = |n: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
        pool.install(|| (warp_bicubic(&img, &map, dst), warp_adaptive_fixed(&img, &map, dst)))
    };
    let (a, b) = (run(1), run(5));
    assert_eq!(a.0 .0.data(), b.0 .0.data());
    assert_eq!(a.1 .0.data(), b.1 .0.data());
    assert_eq!(a.0 .1, b.0 .1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn constants_survive_any_warp(
        v in 0.0f64..1.0,
        d in prop::array::uniform2(0.6f64..1.8),
        o in prop::array::uniform2(-0.3f64..0.3),
        t in prop::array::uniform2(-4.0f64..4.0),
    ) {
        let img = Plane::filled(12, 10, 2, v);
        let h = Homography::new([[d[0], o[0], t[0]], [o[1], d[1], t[1]], [0.0, 0.0, 1.0]]).unwrap();
        let map = BackwardMap::Homography(h);
        let dst = Dims::new(16, 14);
        for (out, mask) in [warp_bicubic(&img, &map, dst), warp_adaptive_fixed(&img, &map, dst)] {
            for y in 0..dst.height {
                for x in 0..dst.width {
                    for c in 0..2 {
                        let want = if mask.get(x, y) { v } else { 0.0 };
                        prop_assert!((out.get(c, y, x) - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn homography_masks_match_brute_force(
        d in prop::array::uniform2(0.5f64..2.0),
        o in prop::array::uniform2(-0.4f64..0.4),
        t in prop::array::uniform2(-6.0f64..6.0),
        p in prop::array::uniform2(-0.01f64..0.01),
    ) {
        let h = Homography::new([[d[0], o[0], t[0]], [o[1], d[1], t[1]], [p[0], p[1], 1.0]]).unwrap();
        let map = BackwardMap::Homography(h);
        let (src, dst) = (Dims::new(13, 9), Dims::new(20, 18));
        prop_assert_eq!(compute_mask(&map, src, dst), brute_mask(&map, src, dst));
    }
}
