use std::path::Path;

use gibr_core::geometry::{
    format_pose, parse_pose, pose_flatten, pose_unflatten, relative_poses, rigid_inverse, CameraPose,
};
use nalgebra::{Matrix4, Vector3};
use proptest::prelude::*;

fn arb_pose() -> impl Strategy<Value = CameraPose> {
    (
        prop::array::uniform3(-4.0f64..4.0),
        prop::array::uniform3(-0.5f64..0.5),
        20.0f64..80.0,
        8usize..48,
        8usize..48,
    )
        .prop_filter_map("degenerate eye", |(eye, target, f, w, h)| {
            let eye = Vector3::from(eye);
            let target = Vector3::from(target);
            if (eye - target).norm() < 0.5 || (eye - target).normalize().dot(&Vector3::y()).abs() > 0.99 {
                return None;
            }
            CameraPose::look_at(eye, target, Vector3::y(), CameraPose::pinhole(f, w, h), w, h).ok()
        })
}

proptest! {
    #[test]
    fn pixel_rays_project_back_to_their_pixel(pose in arb_pose(), u in 0.0f64..1.0, v in 0.0f64..1.0, dist in 0.1f64..20.0) {
        let row = ((v * pose.height as f64) as usize).min(pose.height - 1);
        let col = ((u * pose.width as f64) as usize).min(pose.width - 1);
        let ray = pose.ray_for_pixel(row, col).unwrap();
        prop_assert!((ray.direction.norm() - 1.0).abs() < 1e-12);
        let p = ray.origin + dist * ray.direction;
        let (px, _) = pose.project(&p).unwrap();
        prop_assert!((px.x - (col as f64 + 0.5)).abs() < 1e-8);
        prop_assert!((px.y - (row as f64 + 0.5)).abs() < 1e-8);
    }

    #[test]
    fn rigid_inverse_is_an_inverse(pose in arb_pose()) {
        let prod = rigid_inverse(&pose.extrinsics) * pose.extrinsics;
        prop_assert!((prod - Matrix4::identity()).abs().max() < 1e-12);
    }

    #[test]
    fn relative_poses_preserve_projections(a in arb_pose(), b in arb_pose(), p in prop::array::uniform3(-1.0f64..1.0)) {
        let rel = relative_poses(&[a.clone(), b.clone()], 0).unwrap();
        prop_assert_eq!(rel[0].extrinsics, Matrix4::identity());
        // a world point expressed in camera-0 coordinates
        let p = Vector3::from(p);
        let q = a.to_camera(&p);
        for (orig, new) in [(&a, &rel[0]), (&b, &rel[1])] {
            match (orig.project(&p), new.project(&q)) {
                (Some((x, d)), Some((y, e))) => {
                    prop_assert!((x - y).norm() < 1e-6 * (1.0 + x.norm()));
                    prop_assert!((d - e).abs() < 1e-9);
                }
                (None, None) => {}
                (x, y) => prop_assert!(false, "visibility changed: {:?} vs {:?}", x, y),
            }
        }
    }

    #[test]
    fn flatten_round_trips(pose in arb_pose()) {
        let back = pose_unflatten(&pose_flatten(&pose), pose.width, pose.height);
        prop_assert_eq!(back.extrinsics, pose.extrinsics);
        prop_assert!((back.intrinsics - pose.intrinsics).abs().max() < 1e-12);
    }

    #[test]
    fn text_format_is_exact(pose in arb_pose()) {
        let back = parse_pose(&format_pose(&pose), Path::new("p.txt")).unwrap();
        prop_assert_eq!(back, pose);
    }

    #[test]
    fn equirect_ranges(pose in arb_pose(), p in prop::array::uniform3(-3.0f64..3.0)) {
        if let Some((az, el)) = pose.equirect_project(&Vector3::from(p)) {
            prop_assert!((-std::f64::consts::PI..std::f64::consts::PI).contains(&az));
            prop_assert!(el.abs() <= std::f64::consts::FRAC_PI_2);
        }
    }

    #[test]
    fn resizing_keeps_ray_directions(pose in arb_pose(), u in 0.0f64..1.0, v in 0.0f64..1.0) {
        // pixel centres of a 2x image map onto the same rays as sub-pixel
        // positions of the original
        let big = pose.resized(2 * pose.width, 2 * pose.height);
        let row = ((v * big.height as f64) as usize).min(big.height - 1);
        let col = ((u * big.width as f64) as usize).min(big.width - 1);
        let ray = big.ray_for_pixel(row, col).unwrap();
        let (px, _) = pose.project(&(ray.origin + ray.direction)).unwrap();
        prop_assert!((px.x - (col as f64 + 0.5) / 2.0).abs() < 1e-8);
        prop_assert!((px.y - (row as f64 + 0.5) / 2.0).abs() < 1e-8);
    }
}

#[test]
fn malformed_pose_is_rejected() {
    let mut e = Matrix4::identity();
    e[(0, 0)] = 2.0;
    assert!(CameraPose::new(e, CameraPose::pinhole(10.0, 8, 8), 8, 8).is_err());
}
