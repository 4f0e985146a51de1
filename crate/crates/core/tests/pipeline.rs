//! Cross-module checks: camera motion, projection and metrics agree with each other.

use nalgebra::{Matrix4, Vector3};
use proptest::prelude::*;
use videopose_core::geometry::{
    project_center, recover_translation, relative_transform, CameraExtrinsic, CameraIntrinsics, Pose, Quaternion,
};
use videopose_core::metrics::{add_metric, add_s_metric};
use videopose_core::objects::ObjectModel;

fn unit_quat() -> impl Strategy<Value = Quaternion> {
    (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
        .prop_filter("away from zero", |(w, x, y, z)| w * w + x * x + y * y + z * z > 1e-2)
        .prop_map(|(w, x, y, z)| Quaternion::new(w, x, y, z).normalized().unwrap())
}

fn rigid() -> impl Strategy<Value = CameraExtrinsic> {
    (unit_quat(), -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64).prop_map(|(q, x, y, z)| {
        CameraExtrinsic::from_rotation_translation(&q.to_rotation_matrix().unwrap(), &Vector3::new(x, y, z)).unwrap()
    })
}

fn as_extrinsic(p: &Pose) -> CameraExtrinsic {
    CameraExtrinsic::new(p.to_matrix()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    // A static object seen from a moving camera: warping the previous pose by the
    // relative camera motion gives the current pose, so both metrics vanish.
    #[test]
    fn camera_motion_carries_pose(obj_q in unit_quat(), obj_t in (-0.3..0.3f64, -0.3..0.3f64, -0.3..0.3f64),
                                  prev in rigid(), curr in rigid()) {
        let world = Pose::new(obj_q, Vector3::new(obj_t.0, obj_t.1, obj_t.2)).unwrap();
        let in_prev = world.left_compose(&prev);
        let in_curr = world.left_compose(&curr);
        let warped = in_prev.left_compose(&relative_transform(&prev, &curr));
        let cube = ObjectModel::unit_cube("cube", false);
        prop_assert!(add_metric(&cube, &in_curr, &warped) < 1e-9);
        prop_assert!(add_s_metric(&cube, &in_curr, &warped) < 1e-9);
        let diff = as_extrinsic(&in_curr).matrix() - as_extrinsic(&warped).matrix();
        prop_assert!(diff.abs().max() < 1e-9);
    }

    #[test]
    fn metrics_invariant_under_common_motion(gq in unit_quat(), pq in unit_quat(), m in rigid(),
                                            shift in (-0.2..0.2f64, -0.2..0.2f64, -0.2..0.2f64)) {
        let gt = Pose::new(gq, Vector3::new(0.0, 0.0, 1.0)).unwrap();
        let pred = Pose::new(pq, Vector3::new(shift.0, shift.1, 1.0 + shift.2)).unwrap();
        for symmetric in [false, true] {
            let model = ObjectModel::unit_cube("cube", symmetric);
            let (a, s) = (add_metric(&model, &gt, &pred), add_s_metric(&model, &gt, &pred));
            let (gm, pm) = (gt.left_compose(&m), pred.left_compose(&m));
            prop_assert!((add_metric(&model, &gm, &pm) - a).abs() < 1e-9);
            prop_assert!((add_s_metric(&model, &gm, &pm) - s).abs() < 1e-9);
            prop_assert!(s <= a + 1e-12);
        }
    }

    // Projecting a posed object's origin and recovering it from the pixel and
    // the true depth returns the pose translation.
    #[test]
    fn pixel_center_recovers_pose(q in unit_quat(), x in -0.5..0.5f64, y in -0.5..0.5f64, z in 0.3..3.0f64) {
        let k = CameraIntrinsics::new(500.0, 480.0, 320.0, 240.0).unwrap();
        let pose = Pose::new(q, Vector3::new(x, y, z)).unwrap();
        let origin = pose.transform_point(&Vector3::zeros());
        let c = project_center(&origin, &k).unwrap();
        let t = recover_translation(c, (0.0, 0.0), z, &k).unwrap();
        prop_assert!((t - pose.translation).norm() < 1e-9);
    }
}

#[test]
fn relative_transform_of_identity_is_identity() {
    let m = CameraExtrinsic::new(Matrix4::identity()).unwrap();
    assert_eq!(relative_transform(&m, &m).matrix(), &Matrix4::identity());
}
