use super::*;
use crate::splat::tests::axis_camera;

fn gradient_map(width: usize, height: usize) -> FeatureMap {
    let mut data = Vec::new();
    for p in 0..width * height {
        data.extend([(p % width) as f64, (p / width) as f64, 1.0]);
    }
    FeatureMap {
        width,
        height,
        dim: 3,
        data,
        alpha: vec![1.0; width * height],
    }
}

fn camera(id: &str, size: usize) -> Camera {
    let mut c = axis_camera(size, size as f64);
    c.id = id.into();
    c
}

#[test]
fn parse_points_prompt() {
    let p = Prompt::from_json(r#"{"view":"t00","kind":"points","positives":[[1,2],[3,4]],"negatives":[[0,0]]}"#)
        .unwrap();
    assert_eq!(p.kind, PromptKind::Points);
    assert_eq!(p.config, PromptConfig::default());
    let r = resolve(&p, &camera("t00", 8), None, None).unwrap();
    assert_eq!(r.positive, vec![2 * 8 + 1, 4 * 8 + 3]);
    assert_eq!(r.negative, vec![0]);
}

#[test]
fn parse_errors_name_the_field() {
    let err = Prompt::from_json(r#"{"view":"t00","kind":"lasso","positives":[[1,2]]}"#).unwrap_err();
    assert!(err.to_string().contains("kind"), "{}", err);
    let err = Prompt::from_json(r#"{"view":"t00","kind":"points","positives":[[1,2]],"config":{"k":0}}"#)
        .unwrap_err();
    assert!(err.to_string().contains("config.k"), "{}", err);
}

#[test]
fn out_of_bounds_click_rejected() {
    let p = Prompt::points("t00", &[[8.0, 1.0]], &[]);
    let err = resolve(&p, &camera("t00", 8), None, None).unwrap_err();
    assert!(err.to_string().contains("positives[0]"), "{}", err);
}

#[test]
fn wrong_view_rejected() {
    let p = Prompt::points("t01", &[[1.0, 1.0]], &[]);
    assert!(resolve(&p, &camera("t00", 8), None, None).is_err());
}

#[test]
fn no_positives_rejected() {
    let p = Prompt::points("t00", &[], &[]);
    assert!(resolve(&p, &camera("t00", 8), None, None).is_err());
}

#[test]
fn scribble_is_a_dilated_line() {
    let mut m = Mask::empty(10, 10);
    rasterize_stroke(&mut m, &[2 * 10 + 2, 2 * 10 + 6]);
    let mut expected = Mask::empty(10, 10);
    for y in 1..=3 {
        for x in 1..=7 {
            expected.set(x, y, true);
        }
    }
    assert_eq!(m, expected);
}

#[test]
fn diagonal_scribble_is_connected() {
    let mut m = Mask::empty(12, 12);
    rasterize_stroke(&mut m, &[0, 11 * 12 + 7]);
    assert!(m.get(0, 0) && m.get(7, 11));
    for y in 0..12 {
        assert!((0..12).any(|x| m.get(x, y)), "row {} empty", y);
    }
}

#[test]
fn mask_prompt_from_stack_and_inline() {
    let mut a = Mask::empty(4, 4);
    a.set(1, 1, true);
    a.set(2, 1, true);
    let stack = MaskStack::new("t00", 4, 4, vec![a.clone()]).unwrap();
    let mut p = Prompt::mask("t00", PromptKind::Mask, &a);
    let cam = camera("t00", 4);
    let inline = resolve(&p, &cam, None, None).unwrap();
    p.positives = Region::Mask(MaskRef::StackIndex(0));
    let indexed = resolve(&p, &cam, Some(&stack), None).unwrap();
    assert_eq!(inline.positive, vec![5, 6]);
    assert_eq!(inline.positive, indexed.positive);
    assert_eq!(indexed.positive_mask(), a);
    p.positives = Region::Mask(MaskRef::StackIndex(1));
    assert!(resolve(&p, &cam, Some(&stack), None).is_err());
}

#[test]
fn mask_prompt_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = vec![0u8; 16];
    bytes[5] = 1;
    Tensor::u8(vec![4, 4], bytes).unwrap().save(dir.path().join("m.gsten")).unwrap();
    let p = Prompt::from_json(r#"{"view":"t00","kind":"mask","positives":{"file":"m.gsten"}}"#).unwrap();
    let r = resolve(&p, &camera("t00", 4), None, Some(dir.path())).unwrap();
    assert_eq!(r.positive, vec![5]);
}

#[test]
fn prompt_json_roundtrip() {
    let p = Prompt::points("t02", &[[1.0, 2.0]], &[[3.0, 3.0]]);
    let text = serde_json::to_string(&p).unwrap();
    assert_eq!(Prompt::from_json(&text).unwrap(), p);
}

#[test]
fn point_queries_are_direct_lookups() {
    let fm = gradient_map(6, 6);
    let p = Prompt::points("t00", &[[1.0, 2.0], [5.0, 0.0]], &[[3.0, 4.0]]);
    let r = resolve(&p, &camera("t00", 6), None, None).unwrap();
    let q = point_queries(&fm, &r).unwrap();
    assert_eq!(q.positive, vec![vec![1.0, 2.0, 1.0], vec![5.0, 0.0, 1.0]]);
    assert_eq!(q.negative, vec![vec![3.0, 4.0, 1.0]]);
    assert_eq!(q.metric, Metric::Cosine);
}

#[test]
fn constant_region_gives_one_query() {
    let fm = FeatureMap {
        width: 4,
        height: 4,
        dim: 2,
        data: [0.5, -1.0].repeat(16),
        alpha: vec![1.0; 16],
    };
    let p = Prompt::mask("t00", PromptKind::Mask, &Mask::full(4, 4));
    let r = resolve(&p, &camera("t00", 4), None, None).unwrap();
    let q = kmeans_queries(&fm, &r).unwrap();
    assert_eq!(q.positive, vec![vec![0.5, -1.0]]);
}

#[test]
fn kmeans_ignores_pixel_order() {
    let fm = gradient_map(8, 8);
    let mut r = resolve(
        &Prompt::mask("t00", PromptKind::Mask, &Mask::full(8, 8)),
        &camera("t00", 8),
        None,
        None,
    )
    .unwrap();
    let a = kmeans_queries(&fm, &r).unwrap();
    r.positive.reverse();
    assert_eq!(kmeans_queries(&fm, &r).unwrap(), a);
    assert_eq!(a.positive.len(), 5);
}

fn two_part_fixture() -> (FeatureGrid, FeatureMap, Mask) {
    // left half of the view carries +u, right half -u
    let grid = FeatureGrid {
        width: 2,
        height: 2,
        dim: 2,
        data: vec![1.0, 0.0, -1.0, 0.0, 1.0, 0.0, -1.0, 0.0],
    };
    let mut data = Vec::new();
    for p in 0..64 {
        data.extend(if p % 8 < 4 { [1.0, 0.0] } else { [-1.0, 0.0] });
    }
    let rendered = FeatureMap {
        width: 8,
        height: 8,
        dim: 2,
        data,
        alpha: vec![1.0; 64],
    };
    (grid, rendered, Mask::full(8, 8))
}

#[test]
fn sam_accepts_consistent_reference() {
    let (grid, rendered, _) = two_part_fixture();
    let mut left = Mask::empty(8, 8);
    for y in 0..8 {
        for x in 0..4 {
            left.set(x, y, true);
        }
    }
    let q = sam_based_queries(&grid, &rendered, &left, &PromptConfig::default()).unwrap();
    assert!(q.accepted);
    assert_eq!(q.overlap, 1.0);
    assert_eq!(q.queries.positive, vec![vec![1.0, 0.0]]);
    assert_eq!(q.queries.metric, Metric::Dot);
}

#[test]
fn sam_falls_back_on_opposed_parts() {
    let (grid, rendered, full) = two_part_fixture();
    let cfg = PromptConfig {
        k: 2,
        ..Default::default()
    };
    // pooled query is zero, every dot product is 0 and passes; perturb one side
    let mut rendered = rendered;
    for p in 0..64 {
        if p % 8 >= 4 {
            rendered.data[p * 2 + 1] = -1.0;
        }
    }
    let mut grid = grid;
    grid.data = vec![1.0, 0.2, -1.0, 0.0, 1.0, 0.2, -1.0, 0.0];
    let q = sam_based_queries(&grid, &rendered, &full, &cfg).unwrap();
    assert!(!q.accepted, "overlap {}", q.overlap);
    assert_eq!(q.queries.positive.len(), 2);
    let zero = PromptConfig {
        ratio: 0.0,
        ..cfg
    };
    assert!(sam_based_queries(&grid, &rendered, &full, &zero).unwrap().accepted);
}

#[test]
fn sam_rejects_empty_reference() {
    let (grid, rendered, _) = two_part_fixture();
    assert!(sam_based_queries(&grid, &rendered, &Mask::empty(8, 8), &PromptConfig::default()).is_err());
}
