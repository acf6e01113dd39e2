use nalgebra::{Matrix2, Matrix3, Vector3};
use proptest::prelude::*;
use warpcore::adaptive_grid::{adapt_offset, principal_axes, rescale_offset};
use warpcore::xform::{
    jacobian, output_bounds, sample_transform, scale_feature, BackwardMap, Homography, Jacobian2, Mat3, ParamRanges,
    Point2,
};

fn to_na(m: &Mat3) -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| m[r][c])
}

fn apply_na(m: &Matrix3<f64>, x: f64, y: f64) -> (f64, f64) {
    let v = m * Vector3::new(x, y, 1.0);
    (v.x / v.z, v.y / v.z)
}

fn jac_strategy() -> impl Strategy<Value = Jacobian2> {
    (prop::array::uniform2(-3.0f64..3.0), prop::array::uniform2(-3.0f64..3.0))
        .prop_map(|(u, v)| Jacobian2::new(u, v))
        .prop_filter("nonsingular", |j| j.det().abs() > 1e-3)
}

fn projective_strategy() -> impl Strategy<Value = Mat3> {
    (
        prop::array::uniform2(0.5f64..2.0),
        prop::array::uniform2(-0.4f64..0.4),
        prop::array::uniform2(-5.0f64..5.0),
        prop::array::uniform2(-2e-3f64..2e-3),
    )
        .prop_map(|(d, o, t, p)| [[d[0], o[0], t[0]], [o[1], d[1], t[1]], [p[0], p[1], 1.0]])
}

proptest! {
    #[test]
    fn axes_match_singular_values(j in jac_strategy()) {
        let m = Matrix2::new(j.u[0], j.v[0], j.u[1], j.v[1]);
        let svd = m.svd(true, false);
        let (s0, s1) = (svd.singular_values[0].max(svd.singular_values[1]), svd.singular_values[0].min(svd.singular_values[1]));
        let basis = principal_axes(&j).unwrap();
        prop_assert!((basis.a - s0).abs() <= 1e-9 * s0);
        prop_assert!((basis.b - s1).abs() <= 1e-9 * s0);
        prop_assert!((basis.a * basis.b - j.det().abs()).abs() <= 1e-9 * j.det().abs().max(1.0));
    }

    #[test]
    fn adapted_offsets_invert_the_ellipse(j in jac_strategy(), o in prop::array::uniform2(-2.0f64..2.0)) {
        // Mapping the adapted coordinates back through the basis vectors recovers `o`.
        let basis = principal_axes(&j).unwrap();
        let q = adapt_offset(o, &basis);
        let back = [q[0] * basis.e_x[0] + q[1] * basis.e_y[0], q[0] * basis.e_x[1] + q[1] * basis.e_y[1]];
        prop_assert!((back[0] - o[0]).abs() < 1e-9 && (back[1] - o[1]).abs() < 1e-9);
        let r = rescale_offset(o, &basis);
        // Same direction, length equal to the adapted length.
        prop_assert!((r[0] * o[1] - r[1] * o[0]).abs() < 1e-9);
        prop_assert!((r[0].hypot(r[1]) - q[0].hypot(q[1])).abs() < 1e-9);
    }

    #[test]
    fn homography_round_trips(m in projective_strategy(), x in -10.0f64..40.0, y in -10.0f64..40.0) {
        let h = Homography::new(m).unwrap();
        let p = Point2::new(x, y);
        if let Ok(f) = h.apply_forward(p) {
            if let Ok(b) = h.apply_backward(f) {
                prop_assert!((b.x - x).abs() < 1e-7 && (b.y - y).abs() < 1e-7);
            }
        }
        let (ex, ey) = apply_na(&to_na(&m), x, y);
        if let Ok(f) = h.apply_forward(p) {
            prop_assert!((f.x - ex).abs() < 1e-8 * ex.abs().max(1.0));
            prop_assert!((f.y - ey).abs() < 1e-8 * ey.abs().max(1.0));
        }
    }

    #[test]
    fn compose_matches_matrix_product(a in projective_strategy(), b in projective_strategy()) {
        let (ha, hb) = (Homography::new(a).unwrap(), Homography::new(b).unwrap());
        let c = ha.compose(&hb).unwrap();
        let mut prod = to_na(&a) * to_na(&b);
        prod /= prod[(2, 2)];
        for r in 0..3 {
            for k in 0..3 {
                prop_assert!((c.matrix()[r][k] - prod[(r, k)]).abs() < 1e-9 * prod[(r, k)].abs().max(1.0));
            }
        }
    }

    #[test]
    fn projective_jacobian_matches_analytic(m in projective_strategy(), x in 0.0f64..30.0, y in 0.0f64..30.0) {
        let h = Homography::new(m).unwrap();
        let map = BackwardMap::Homography(h);
        let j = jacobian(&map, Point2::new(x, y), 1e-4).unwrap();
        // Analytic derivative of the backward map q = N(x, y) with N = M⁻¹.
        let n = to_na(h.inverse_matrix());
        let v = n * Vector3::new(x, y, 1.0);
        let d = |c: usize| -> [f64; 2] {
            let w2 = v.z * v.z;
            [
                (n[(0, c)] * v.z - v.x * n[(2, c)]) / w2,
                (n[(1, c)] * v.z - v.y * n[(2, c)]) / w2,
            ]
        };
        let (u, w) = (d(0), d(1));
        for (got, want) in [(j.u, u), (j.v, w)] {
            for k in 0..2 {
                prop_assert!((got[k] - want[k]).abs() < 1e-6 * want[k].abs().max(1.0), "{got:?} vs {want:?}");
            }
        }
        let sf = scale_feature(&j).unwrap();
        prop_assert!((sf + (u[0] * w[1] - u[1] * w[0]).abs().ln()).abs() < 1e-6);
    }

    #[test]
    fn bounds_cover_the_dense_image(m in projective_strategy(), w in 4usize..24, h in 4usize..24) {
        let hm = Homography::new(m).unwrap();
        let Ok(b) = output_bounds(&hm, w, h) else { return Ok(()); };
        // Every forward-mapped source pixel center, shifted by the bounds
        // translation, lands inside the output canvas.
        let t = to_na(b.transform.matrix());
        for y in 0..h {
            for x in 0..w {
                let (fx, fy) = apply_na(&t, x as f64, y as f64);
                prop_assert!(fx >= -0.5 - 1e-9 && fy >= -0.5 - 1e-9, "({fx}, {fy})");
                prop_assert!(fx <= b.width as f64 - 0.5 + 1e-9 && fy <= b.height as f64 - 0.5 + 1e-9);
            }
        }
    }

    #[test]
    fn sampled_transforms_respect_ranges(seed in any::<u64>()) {
        let (p, h) = sample_transform(seed, 96, 96).unwrap();
        prop_assert!(ParamRanges::for_patch(96, 96).contains(&p));
        let n = to_na(&p.inverse_matrix());
        let mut mh = to_na(h.matrix()) * n;
        mh /= mh[(2, 2)];
        prop_assert!((mh - Matrix3::identity()).abs().max() < 1e-9);
    }
}

#[test]
fn affine_jacobian_is_exact() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let m: Mat3 = [
            [
                rng.random_range(0.3..3.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-20.0..20.0),
            ],
            [
                rng.random_range(-1.0..1.0),
                rng.random_range(0.3..3.0),
                rng.random_range(-20.0..20.0),
            ],
            [0.0, 0.0, 1.0],
        ];
        let Ok(h) = Homography::new(m) else { continue };
        let n = h.inverse_matrix();
        let p = Point2::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
        let j = jacobian(&BackwardMap::Homography(h), p, 0.5).unwrap();
        let want_u = [n[0][0], n[1][0]];
        let want_v = [n[0][1], n[1][1]];
        for k in 0..2 {
            assert!((j.u[k] - want_u[k]).abs() <= 1e-12 * want_u[k].abs().max(1.0));
            assert!((j.v[k] - want_v[k]).abs() <= 1e-12 * want_v[k].abs().max(1.0));
        }
    }
}
