use nalgebra::UnitQuaternion;
use neurok_core::geometry::{blend, chamfer, fit_dualquat, DualQuat, Vec3};
use proptest::prelude::*;

fn vec3(r: f64) -> impl Strategy<Value = Vec3> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn rigid() -> impl Strategy<Value = (UnitQuaternion<f64>, Vec3)> {
    (vec3(3.0), vec3(2.0)).prop_map(|(axis_angle, t)| (UnitQuaternion::from_scaled_axis(axis_angle), t))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dualquat_apply_matches_rotation_then_translation((r, t) in rigid(), p in vec3(2.0)) {
        let dq = DualQuat::from_rotation_translation(&r, &t);
        let got = dq.apply(&p).unwrap();
        prop_assert!((got - (r * p + t)).norm() < 1e-10);
        prop_assert!((dq.translation() - t).norm() < 1e-10);
    }

    #[test]
    fn compose_with_inverse_is_identity((r, t) in rigid(), p in vec3(2.0)) {
        let dq = DualQuat::from_rotation_translation(&r, &t);
        let back = dq.compose(&dq.inverse()).apply(&p).unwrap();
        prop_assert!((back - p).norm() < 1e-9);
    }

    #[test]
    fn blend_of_one_transform_is_that_transform((r, t) in rigid(), p in vec3(2.0), w in 0.1f64..3.0) {
        let dq = DualQuat::from_rotation_translation(&r, &t);
        let b = blend(&[w], &[dq]).unwrap();
        prop_assert!((b.apply(&p).unwrap() - dq.apply(&p).unwrap()).norm() < 1e-9);
    }

    #[test]
    fn procrustes_recovers_rigid_motion((r, t) in rigid(), pts in prop::collection::vec(vec3(1.0), 6..20)) {
        let moved: Vec<Vec3> = pts.iter().map(|p| r * p + t).collect();
        let fit = fit_dualquat(&pts, &moved).unwrap();
        prop_assume!(!fit.degenerate);
        prop_assert!(fit.residual < 1e-8);
        for (p, q) in pts.iter().zip(&moved) {
            prop_assert!((fit.dq.apply(p).unwrap() - q).norm() < 1e-8);
        }
    }

    #[test]
    fn chamfer_is_symmetric_and_zero_on_self(
        a in prop::collection::vec(vec3(1.0), 1..30),
        b in prop::collection::vec(vec3(1.0), 1..30),
    ) {
        let ab = chamfer(&a, &b).unwrap();
        let ba = chamfer(&b, &a).unwrap();
        prop_assert!((ab.l1 - ba.l1).abs() < 1e-12);
        prop_assert!((ab.l2 - ba.l2).abs() < 1e-12);
        prop_assert_eq!(chamfer(&a, &a).unwrap().l1, 0.0);
    }

    #[test]
    fn chamfer_of_translated_copy_is_bounded_by_shift(a in prop::collection::vec(vec3(1.0), 1..30), s in vec3(0.5)) {
        let b: Vec<Vec3> = a.iter().map(|p| p + s).collect();
        prop_assert!(chamfer(&a, &b).unwrap().l1 <= s.norm() + 1e-12);
    }
}
