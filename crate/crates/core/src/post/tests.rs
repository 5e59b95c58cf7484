use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::splat::rasterize;
use crate::splat::tests::axis_camera;

fn seg_of(membership: Vec<bool>) -> Segmentation {
    Segmentation {
        scores: vec![0.0; membership.len()],
        membership,
        stage: Stage::Raw,
        prompt_id: String::new(),
    }
}

fn cloud_of(points: Vec<Vector3<f64>>) -> GaussianCloud {
    GaussianCloud::from_positions(points, 0.05, 0.8, 2)
}

fn ball(rng: &mut ChaCha8Rng, center: Vector3<f64>, radius: f64, n: usize) -> Vec<Vector3<f64>> {
    let mut out = Vec::new();
    while out.len() < n {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if v.norm() <= 1.0 {
            out.push(center + v * radius);
        }
    }
    out
}

#[test]
fn far_outlier_removed_cluster_kept() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut pts = ball(&mut rng, Vector3::zeros(), 1.0, 100);
    pts.push(Vector3::new(50.0, 0.0, 0.0));
    let cloud = cloud_of(pts);
    let out = statistical_filter(&cloud, &seg_of(vec![true; 101])).unwrap();
    assert!(!out.membership[100]);
    assert_eq!(out.count(), 100);
    assert_eq!(out.stage, Stage::Filtered);
}

#[test]
fn evenly_spaced_ring_keeps_everything() {
    let ring: Vec<Vector3<f64>> = (0..40)
        .map(|i| {
            let a = i as f64 / 40.0 * std::f64::consts::TAU;
            Vector3::new(a.cos() * 10.0, a.sin() * 10.0, 0.0)
        })
        .collect();
    let cloud = cloud_of(ring);
    let out = statistical_filter(&cloud, &seg_of(vec![true; 40])).unwrap();
    assert_eq!(out.count(), 40);
}

#[test]
fn mirrored_clusters_share_fate() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let half = ball(&mut rng, Vector3::new(5.0, 0.0, 0.0), 1.5, 60);
    let mut pts = half.clone();
    pts.extend(half.iter().map(|p| Vector3::new(-p.x, p.y, p.z)));
    let cloud = cloud_of(pts);
    let out = statistical_filter(&cloud, &seg_of(vec![true; 120])).unwrap();
    for i in 0..60 {
        assert_eq!(out.membership[i], out.membership[i + 60], "point {}", i);
    }
}

#[test]
fn tiny_segmentation_unchanged() {
    let cloud = cloud_of(vec![Vector3::zeros(), Vector3::x()]);
    let out = statistical_filter(&cloud, &seg_of(vec![true, false])).unwrap();
    assert_eq!(out.membership, vec![true, false]);
}

fn grid_scene() -> (GaussianCloud, Camera) {
    // a 10x10 sheet of Gaussians facing an axis-aligned camera
    let mut pts = Vec::new();
    for y in 0..10 {
        for x in 0..10 {
            pts.push(Vector3::new(x as f64 * 0.2 - 0.9, y as f64 * 0.2 - 0.9, 5.0));
        }
    }
    let cam = axis_camera(40, 40.0);
    (cloud_of(pts), cam)
}

#[test]
fn full_mask_validates_visible_members() {
    let (cloud, cam) = grid_scene();
    let trace = rasterize(&cloud, &cam);
    let seg = seg_of((0..100).map(|i| i % 2 == 0).collect());
    let p = project_mask_to_gaussians(&cloud, &cam, &trace, &Mask::full(40, 40), &seg).unwrap();
    assert_eq!(p.validated, seg.membership);
    assert!(!p.unwanted.iter().any(|&u| u));
}

#[test]
fn empty_mask_is_an_error() {
    let (cloud, cam) = grid_scene();
    let trace = rasterize(&cloud, &cam);
    let seg = seg_of(vec![true; 100]);
    assert!(project_mask_to_gaussians(&cloud, &cam, &trace, &Mask::empty(40, 40), &seg).is_err());
}

#[test]
fn half_mask_matches_projected_means() {
    let (cloud, cam) = grid_scene();
    let trace = rasterize(&cloud, &cam);
    let mut left = Mask::empty(40, 40);
    for y in 0..40 {
        for x in 0..20 {
            left.set(x, y, true);
        }
    }
    let seg = seg_of(vec![true; 100]);
    let p = project_mask_to_gaussians(&cloud, &cam, &trace, &left, &seg).unwrap();
    for proj in project(&cloud, &cam) {
        let g = proj.gaussian_index;
        assert_eq!(p.validated[g], proj.mean2d.x < 20.0, "gaussian {}", g);
        assert_eq!(p.unwanted[g], proj.mean2d.x >= 20.0);
    }
}

#[test]
fn occluded_gaussian_not_validated() {
    let positions = vec![Vector3::new(0.0, 0.0, 3.0), Vector3::new(0.0, 0.0, 3.5), Vector3::new(0.0, 0.0, 6.0)];
    let cloud = GaussianCloud::from_positions(positions, 0.3, 0.99, 2);
    let cam = axis_camera(32, 32.0);
    let trace = rasterize(&cloud, &cam);
    let p = project_mask_to_gaussians(&cloud, &cam, &trace, &Mask::full(32, 32), &seg_of(vec![true; 3])).unwrap();
    assert_eq!(p.validated, vec![true, true, false]);
    assert!(!p.unwanted.iter().any(|&u| u));
}

#[test]
fn growing_from_all_members_is_a_fixpoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cloud = cloud_of(ball(&mut rng, Vector3::zeros(), 2.0, 80));
    let membership: Vec<bool> = (0..80).map(|i| i % 3 != 0).collect();
    let seg = seg_of(membership.clone());
    let out = region_grow_filter(&cloud, &seg, &membership, &[false; 80]).unwrap();
    assert_eq!(out.membership, membership);
}

#[test]
fn growth_stays_in_the_seeded_cluster() {
    let mut pts: Vec<Vector3<f64>> = (0..10).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
    pts.extend((0..10).map(|i| Vector3::new(i as f64 + 100.0, 0.0, 0.0)));
    let cloud = cloud_of(pts);
    let mut seeds = vec![false; 20];
    seeds[2] = true;
    seeds[3] = true;
    let out = region_grow_filter(&cloud, &seg_of(vec![true; 20]), &seeds, &[false; 20]).unwrap();
    assert_eq!(out.members(), (0..10).collect::<Vec<_>>());
}

#[test]
fn chain_at_exact_threshold_is_reached() {
    let pts: Vec<Vector3<f64>> = (0..30).map(|i| Vector3::new(i as f64 * 0.5, 0.0, 0.0)).collect();
    let cloud = cloud_of(pts);
    let mut seeds = vec![false; 30];
    seeds[0] = true;
    seeds[1] = true;
    let out = region_grow_filter(&cloud, &seg_of(vec![true; 30]), &seeds, &[false; 30]).unwrap();
    assert_eq!(out.count(), 30);
}

#[test]
fn unwanted_members_block_growth() {
    let pts: Vec<Vector3<f64>> = (0..10).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
    let cloud = cloud_of(pts);
    let mut seeds = vec![false; 10];
    seeds[0] = true;
    seeds[1] = true;
    let mut unwanted = vec![false; 10];
    unwanted[5] = true;
    let out = region_grow_filter(&cloud, &seg_of(vec![true; 10]), &seeds, &unwanted).unwrap();
    assert_eq!(out.members(), (0..5).collect::<Vec<_>>());
}

#[test]
fn single_seed_uses_mean_member_spacing() {
    let pts: Vec<Vector3<f64>> = (0..6).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
    let cloud = cloud_of(pts);
    let mut seeds = vec![false; 6];
    seeds[0] = true;
    let seg = seg_of(vec![true; 6]);
    assert_eq!(growth_distance(&cloud, &seg, &seeds), 1.0);
    assert_eq!(region_grow_filter(&cloud, &seg, &seeds, &[false; 6]).unwrap().count(), 6);
}

#[test]
fn empty_or_foreign_seeds_rejected() {
    let cloud = cloud_of(vec![Vector3::zeros(), Vector3::x()]);
    let seg = seg_of(vec![true, false]);
    assert!(region_grow_filter(&cloud, &seg, &[false, false], &[false, false]).is_err());
    assert!(region_grow_filter(&cloud, &seg, &[false, true], &[false, false]).is_err());
}

#[test]
fn duplicate_points_do_not_grow() {
    let cloud = cloud_of(vec![Vector3::zeros(), Vector3::zeros(), Vector3::new(0.1, 0.0, 0.0)]);
    let out = ball_grow(&cloud, &seg_of(vec![true, true, false]), None).unwrap();
    assert_eq!(out.membership, vec![true, true, false]);
    assert_eq!(out.stage, Stage::Grown);
}

#[test]
fn ball_grow_recovers_near_and_ignores_far() {
    let mut pts: Vec<Vector3<f64>> = (0..5).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
    pts.push(Vector3::new(2.0, 0.9, 0.0));
    pts.push(Vector3::new(100.0, 0.0, 0.0));
    let cloud = cloud_of(pts);
    let out = ball_grow(&cloud, &seg_of(vec![true, true, true, true, true, false, false]), None).unwrap();
    assert!(out.membership[5]);
    assert!(!out.membership[6]);
}

#[test]
fn postprocess_rejects_empty_and_mismatched_inputs() {
    let cloud = cloud_of(vec![Vector3::zeros(), Vector3::x()]);
    assert!(postprocess(&cloud, &seg_of(vec![false, false]), PromptKind::Points, None, None).is_err());
    assert!(postprocess(&cloud, &seg_of(vec![true, true]), PromptKind::Mask, None, None).is_err());
}

#[test]
fn point_pipeline_drops_outliers_and_recovers_neighbors() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut pts = ball(&mut rng, Vector3::zeros(), 1.0, 300);
    pts.push(Vector3::new(40.0, 0.0, 0.0));
    pts.push(Vector3::new(0.0, -40.0, 3.0));
    let cloud = cloud_of(pts);
    let mut membership = vec![true; 302];
    for i in (0..300).step_by(10) {
        membership[i] = false;
    }
    let out = postprocess(&cloud, &seg_of(membership), PromptKind::Points, None, None).unwrap();
    assert!(!out.grown.membership[300] && !out.grown.membership[301]);
    assert!((0..300).all(|i| out.grown.membership[i]));
    assert!(out.filtered.count() <= 300);
}

#[test]
fn mask_pipeline_keeps_its_seeds() {
    let (cloud, cam) = grid_scene();
    let trace = rasterize(&cloud, &cam);
    let mut left = Mask::empty(40, 40);
    for y in 0..40 {
        for x in 0..20 {
            left.set(x, y, true);
        }
    }
    let seg = seg_of(vec![true; 100]);
    let seeds = project_mask_to_gaussians(&cloud, &cam, &trace, &left, &seg).unwrap().validated;
    let ctx = MaskContext {
        camera: &cam,
        trace: &trace,
        mask: &left,
    };
    let out = postprocess(&cloud, &seg, PromptKind::Mask, Some(ctx), None).unwrap();
    assert!(seeds.iter().zip(&out.grown.membership).all(|(&s, &m)| !s || m));
}
