//! Fixtures and oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeSet;

use gsseg_core::distill::{correspondence_loss, guidance_loss};
use gsseg_core::masks::{Mask, MaskStack, PixelPair};
use gsseg_core::matching::{Segmentation, Stage};
use gsseg_core::post::{ball_grow, region_grow_filter, statistical_filter};
use gsseg_core::scene::{synth_scene, Camera, GaussianCloud, SceneSpec};
use gsseg_core::splat::{backward_features, feature_map_from_trace, rasterize, FeatureMap};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub struct GradCase {
    pub cloud: GaussianCloud,
    pub camera: Camera,
    pub mask: Mask,
    pub query: Vec<f64>,
    pub pairs: Vec<PixelPair>,
}

/// At most 30 Gaussians on a view of at most 16 x 16 pixels, with O(1)
/// features. Pairs only use pixels with enough coverage that the rendered
/// feature norm keeps the cosine well conditioned.
pub fn grad_case(seed: u64) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        if let Some(c) = try_grad_case(&mut rng, seed) {
            return c;
        }
    }
}

fn try_grad_case(rng: &mut ChaCha8Rng, seed: u64) -> Option<GradCase> {
    let objects = rng.random_range(1..=3);
    let per = rng.random_range(4..=30 / objects);
    let mut spec = SceneSpec::new(objects, per, 2.5, seed);
    spec.image_size = rng.random_range(8..=16);
    spec.feature_dim = rng.random_range(2..=5);
    spec.views = 1;
    spec.held_out_views = 0;
    let mut s = synth_scene(&spec).unwrap();
    for v in s.cloud.features.as_mut_slice() {
        *v = rng.random_range(-1.0..1.0);
    }
    let camera = s.cameras[0].clone();
    let n = camera.pixel_count();
    let trace = rasterize(&s.cloud, &camera);
    let map = feature_map_from_trace(&trace, s.cloud.features.as_slice(), spec.feature_dim);
    let well_posed: Vec<usize> = (0..n)
        .filter(|&p| trace.alpha()[p] > 0.3 && map.pixel(p).iter().map(|v| v * v).sum::<f64>().sqrt() > 0.2)
        .collect();
    if well_posed.len() < 4 {
        return None;
    }
    let mask = Mask::new(camera.width, camera.height, (0..n).map(|_| rng.random_bool(0.4)).collect()).unwrap();
    let query = (0..spec.feature_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let pairs = (0..40)
        .map(|_| PixelPair {
            p1: well_posed[rng.random_range(0..well_posed.len())],
            p2: well_posed[rng.random_range(0..well_posed.len())],
            corr: [-1.0, 0.0, 0.25, 0.5, 1.0][rng.random_range(0..5)],
        })
        .collect();
    Some(GradCase {
        cloud: s.cloud,
        camera,
        mask,
        query,
        pairs,
    })
}

pub fn numeric_gradient(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + FD_STEP;
            let up = f(&x);
            x[i] = orig - FD_STEP;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Largest entry-wise deviation, relative to the largest gradient entry.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().chain(analytic).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return f64::INFINITY;
    }
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

fn with_data(map: &FeatureMap, data: &[f64]) -> FeatureMap {
    FeatureMap {
        data: data.to_vec(),
        ..map.clone()
    }
}

fn rendered(c: &GradCase) -> FeatureMap {
    let trace = rasterize(&c.cloud, &c.camera);
    feature_map_from_trace(&trace, c.cloud.features.as_slice(), c.cloud.feature_dim())
}

/// Errors of the rendered-feature and query gradients.
pub fn guidance_errors(c: &GradCase) -> (f64, f64) {
    let map = rendered(c);
    let out = guidance_loss(&c.query, &map, &c.mask);
    let num_f = numeric_gradient(&map.data, |d| guidance_loss(&c.query, &with_data(&map, d), &c.mask).loss);
    let num_q = numeric_gradient(&c.query, |q| guidance_loss(q, &map, &c.mask).loss);
    (relative_error(&out.grad_rendered, &num_f), relative_error(&out.grad_query, &num_q))
}

pub fn correspondence_error(c: &GradCase) -> f64 {
    let map = rendered(c);
    let out = correspondence_loss(&map, &c.pairs);
    assert!(out.used_pairs > 0);
    let num = numeric_gradient(&map.data, |d| correspondence_loss(&with_data(&map, d), &c.pairs).loss);
    relative_error(&out.grad_rendered, &num)
}

/// Both losses chained through the rasterizer to per-Gaussian features.
pub fn backward_error(c: &GradCase) -> f64 {
    const WEIGHT: f64 = 0.7;
    let dim = c.cloud.feature_dim();
    let trace = rasterize(&c.cloud, &c.camera);
    let loss = |features: &[f64]| {
        let map = feature_map_from_trace(&trace, features, dim);
        guidance_loss(&c.query, &map, &c.mask).loss + WEIGHT * correspondence_loss(&map, &c.pairs).loss
    };
    let features = c.cloud.features.as_slice();
    let map = feature_map_from_trace(&trace, features, dim);
    let g = guidance_loss(&c.query, &map, &c.mask).grad_rendered;
    let k = correspondence_loss(&map, &c.pairs).grad_rendered;
    let upstream: Vec<f64> = g.iter().zip(&k).map(|(a, b)| a + WEIGHT * b).collect();
    let analytic = backward_features(&c.cloud, &c.camera, &upstream).unwrap();
    relative_error(&analytic, &numeric_gradient(features, loss))
}

#[derive(Debug, Default, Clone, Copy)]
pub struct RasterErrors {
    /// `render(a x + b y)` against `a render(x) + b render(y)`.
    pub linearity: f64,
    /// Per-pixel weight sum against accumulated alpha, and coverage render.
    pub weight_sum: f64,
    /// Count of weights outside (0, 1] and sums above 1.
    pub out_of_range: usize,
    /// `<render(x), u>` against `<x, backward(u)>`, relative.
    pub adjoint: f64,
}

/// Checks one random scene of up to 240 Gaussians on two views.
pub fn raster_errors(seed: u64) -> RasterErrors {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = SceneSpec::new(
        rng.random_range(1..=4),
        rng.random_range(5..=60),
        rng.random_range(1.5..6.0),
        seed,
    );
    spec.blob_radius = rng.random_range(0.3..1.5);
    spec.image_size = rng.random_range(12..=32);
    spec.views = 2;
    spec.held_out_views = 0;
    let s = synth_scene(&spec).unwrap();
    let n = s.cloud.len();
    let dim = rng.random_range(1..=4);
    let mut values = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let mut e = RasterErrors::default();

    for cam in &s.cameras {
        let trace = rasterize(&s.cloud, cam);
        for p in 0..trace.pixel_count() {
            let mut sum = 0.0;
            for (_, w) in trace.contributors(p) {
                if !(w > 0.0 && w <= 1.0) {
                    e.out_of_range += 1;
                }
                sum += w;
            }
            if sum > 1.0 + 1e-12 {
                e.out_of_range += 1;
            }
            e.weight_sum = e.weight_sum.max((sum - trace.alpha()[p]).abs());
        }
        let coverage = trace.render(&vec![1.0; n], 1);
        for (c, a) in coverage.iter().zip(trace.alpha()) {
            e.weight_sum = e.weight_sum.max((c - a).abs());
        }

        let (x, y, u) = (values(n * dim), values(n * dim), values(trace.pixel_count() * dim));
        let (a, b) = (1.7, -2.3);
        let mixed: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let (rx, ry, rm) = (trace.render(&x, dim), trace.render(&y, dim), trace.render(&mixed, dim));
        for i in 0..rm.len() {
            e.linearity = e.linearity.max((rm[i] - (a * rx[i] + b * ry[i])).abs());
        }
        let grad = trace.backward(&u, dim).unwrap();
        let lhs: f64 = rx.iter().zip(&u).map(|(r, v)| r * v).sum();
        let rhs: f64 = x.iter().zip(&grad).map(|(r, v)| r * v).sum();
        e.adjoint = e.adjoint.max((lhs - rhs).abs() / lhs.abs().max(1.0));
    }
    e
}

pub const CORR_SIDE: usize = 8;

/// Membership sets by direct mask lookup.
pub fn membership_sets(masks: &[Mask]) -> Vec<BTreeSet<usize>> {
    (0..CORR_SIDE * CORR_SIDE)
        .map(|p| (0..masks.len()).filter(|&m| masks[m].bits[p]).collect())
        .collect()
}

/// Set IoU with the empty-intersection remap to -1; 0 when neither pixel
/// lies in any mask.
pub fn corr_oracle(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.union(b).count();
    if union == 0 {
        0.0
    } else if inter == 0 {
        -1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn random_mask(rng: &mut ChaCha8Rng) -> Mask {
    let mut m = Mask::empty(CORR_SIDE, CORR_SIDE);
    if rng.random_bool(1.0 / 3.0) {
        let density = rng.random_range(0.05..0.9);
        for b in m.bits.iter_mut() {
            *b = rng.random_bool(density);
        }
    } else {
        let (x0, y0) = (rng.random_range(0..CORR_SIDE), rng.random_range(0..CORR_SIDE));
        let (x1, y1) = (rng.random_range(x0..CORR_SIDE), rng.random_range(y0..CORR_SIDE));
        for y in y0..=y1 {
            for x in x0..=x1 {
                m.set(x, y, true);
            }
        }
    }
    m
}

pub fn random_stack(rng: &mut ChaCha8Rng, max_masks: usize) -> MaskStack {
    let count = rng.random_range(0..=max_masks);
    let masks: Vec<Mask> = (0..count).map(|_| random_mask(rng)).collect();
    MaskStack::new("v", CORR_SIDE, CORR_SIDE, masks).unwrap()
}

/// Pixel pairs (out of all 64 x 64) whose correspondence differs from the
/// oracle, plus pixels whose membership index differs.
pub fn corr_mismatches(stack: &MaskStack) -> usize {
    let truth = membership_sets(stack.masks());
    let mut bad = 0;
    for p1 in 0..CORR_SIDE * CORR_SIDE {
        let got: BTreeSet<usize> = stack.membership(p1).iter().map(|&m| m as usize).collect();
        bad += usize::from(got != truth[p1]);
        for p2 in 0..CORR_SIDE * CORR_SIDE {
            bad += usize::from(stack.corr(p1, p2) != corr_oracle(&truth[p1], &truth[p2]));
        }
    }
    bad
}

fn seg_of(membership: Vec<bool>) -> Segmentation {
    Segmentation {
        scores: vec![0.0; membership.len()],
        membership,
        stage: Stage::Raw,
        prompt_id: String::new(),
    }
}

fn dist2(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    (a - b).norm_squared()
}

/// Brute-force distance from each listed point to its nearest other listed point.
fn brute_nearest(points: &[Vector3<f64>], ids: &[usize]) -> Vec<f64> {
    ids.iter()
        .map(|&i| {
            ids.iter()
                .filter(|&&j| j != i)
                .map(|&j| dist2(&points[i], &points[j]))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

fn object_points(objects: usize, per: usize, separation: f64, seed: u64) -> Vec<Vector3<f64>> {
    synth_scene(&SceneSpec::new(objects, per, separation, seed)).unwrap().cloud.positions
}

#[derive(Debug, Clone, Copy)]
pub struct FilterTrial {
    pub inliers: usize,
    pub outliers: usize,
    pub outliers_removed: usize,
    pub inliers_removed: usize,
}

/// One synthetic object plus 1-5% injected outliers at 10 to 20 standard
/// deviations (of the inlier positions) from the object centroid.
pub fn filter_trial(seed: u64) -> FilterTrial {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(100..=1500);
    let mut points = object_points(1, n, 5.0, seed);
    let centroid = points.iter().sum::<Vector3<f64>>() / n as f64;
    let sigma = (points.iter().map(|p| dist2(p, &centroid)).sum::<f64>() / (3.0 * n as f64)).sqrt();
    let m = ((n as f64 * rng.random_range(0.01..0.05)).round() as usize).max(1);
    for _ in 0..m {
        let dir: Vector3<f64> = loop {
            let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if v.norm() > 0.1 && v.norm() <= 1.0 {
                break v.normalize();
            }
        };
        points.push(centroid + dir * sigma * rng.random_range(10.0..20.0));
    }
    let cloud = GaussianCloud::from_positions(points, 0.05, 0.8, 1);
    let out = statistical_filter(&cloud, &seg_of(vec![true; n + m])).unwrap();
    FilterTrial {
        inliers: n,
        outliers: m,
        outliers_removed: (n..n + m).filter(|&i| !out.membership[i]).count(),
        inliers_removed: (0..n).filter(|&i| !out.membership[i]).count(),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GrowTrial {
    /// Withheld Gaussians within the growth radius of some member.
    pub reachable: usize,
    pub recovered: usize,
    /// Output entries that differ from the brute-force oracle.
    pub mismatches: usize,
}

/// An object with 10% of its Gaussians withheld, next to a second object
/// that is never a member.
pub fn grow_trial(seed: u64) -> GrowTrial {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = rng.random_range(50..=800);
    let points = object_points(2, per, rng.random_range(2.5..8.0), seed);
    let membership: Vec<bool> = (0..2 * per).map(|i| i < per && !rng.random_bool(0.1)).collect();
    let cloud = GaussianCloud::from_positions(points.clone(), 0.05, 0.8, 1);
    let out = ball_grow(&cloud, &seg_of(membership.clone()), None).unwrap();

    let members: Vec<usize> = (0..points.len()).filter(|&i| membership[i]).collect();
    let r = brute_nearest(&points, &members).into_iter().fold(0.0, f64::max);
    let expected: Vec<bool> = (0..points.len())
        .map(|j| membership[j] || members.iter().any(|&i| dist2(&points[i], &points[j]) <= r * r))
        .collect();
    let withheld_reachable: Vec<usize> = (0..per).filter(|&j| !membership[j] && expected[j]).collect();
    GrowTrial {
        reachable: withheld_reachable.len(),
        recovered: withheld_reachable.iter().filter(|&&j| out.membership[j]).count(),
        mismatches: (0..points.len()).filter(|&j| out.membership[j] != expected[j]).count(),
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Region growing against a union-find oracle on up to 2000 Gaussians.
/// Returns (universe size, entries that differ).
pub fn region_trial(seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects = rng.random_range(1..=5);
    let per = rng.random_range(20..=2000 / objects);
    let points = object_points(objects, per, rng.random_range(1.5..6.0), seed);
    let n = points.len();
    let membership: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
    let members: Vec<usize> = (0..n).filter(|&i| membership[i]).collect();
    let mut seeds = vec![false; n];
    for _ in 0..rng.random_range(1..=12) {
        seeds[members[rng.random_range(0..members.len())]] = true;
    }
    let unwanted: Vec<bool> = (0..n).map(|i| membership[i] && !seeds[i] && rng.random_bool(0.05)).collect();
    let cloud = GaussianCloud::from_positions(points.clone(), 0.05, 0.8, 1);
    let out = region_grow_filter(&cloud, &seg_of(membership.clone()), &seeds, &unwanted).unwrap();

    let seed_ids: Vec<usize> = (0..n).filter(|&i| seeds[i]).collect();
    let t = if seed_ids.len() >= 2 {
        brute_nearest(&points, &seed_ids).into_iter().fold(0.0, f64::max)
    } else {
        let d = brute_nearest(&points, &members);
        d.iter().sum::<f64>() / d.len() as f64
    };
    let universe: Vec<usize> = (0..n).filter(|&i| seeds[i] || (membership[i] && !unwanted[i])).collect();
    let mut parent: Vec<usize> = (0..n).collect();
    for (a, &i) in universe.iter().enumerate() {
        for &j in &universe[a + 1..] {
            if dist2(&points[i], &points[j]) <= t * t {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                parent[ri] = rj;
            }
        }
    }
    let seeded: BTreeSet<usize> = seed_ids.iter().map(|&s| find(&mut parent, s)).collect();
    let in_universe: BTreeSet<usize> = universe.iter().copied().collect();
    let mismatches = (0..n)
        .filter(|&i| {
            let expected = in_universe.contains(&i) && seeded.contains(&find(&mut parent, i));
            out.membership[i] != expected
        })
        .count();
    (universe.len(), mismatches)
}
