use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn obj(shape: Shape, color: Color, size: Size, texture: Texture, x: f64, y: f64) -> ObjectSpec {
    let cfg = SceneConfig::default();
    ObjectSpec {
        shape,
        color,
        size,
        texture,
        center: [x, y],
        radius: cfg.radius(size),
    }
}

fn scene_of(objects: Vec<ObjectSpec>) -> SceneSpec {
    SceneSpec {
        objects,
        canvas: (64, 64),
        seed: 0,
    }
}

#[test]
fn sample_scene_count_in_range_and_deterministic() {
    let cfg = SceneConfig::default();
    let a = sample_scene(7, &cfg).unwrap();
    let b = sample_scene(7, &cfg).unwrap();
    assert!((3..=8).contains(&a.objects.len()));
    assert_eq!(a, b);
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
}

#[test]
fn thousand_scenes_respect_separation_and_bounds() {
    let cfg = SceneConfig::default();
    let mut counts = [0usize; 9];
    for seed in 0..1000 {
        let s = sample_scene(seed, &cfg).unwrap();
        counts[s.objects.len()] += 1;
        for (i, a) in s.objects.iter().enumerate() {
            assert!(a.center[0] - a.radius >= 0.0 && a.center[0] + a.radius <= 1.0);
            assert!(a.center[1] - a.radius >= 0.0 && a.center[1] + a.radius <= 1.0);
            for b in &s.objects[i + 1..] {
                let d = ((a.center[0] - b.center[0]).powi(2) + (a.center[1] - b.center[1]).powi(2)).sqrt();
                assert!(d >= cfg.min_separation, "seed {seed}: distance {d}");
            }
        }
    }
    // Uniform over 6 counts: each should be near 1000/6.
    for &c in &counts[3..=8] {
        assert!((110..230).contains(&c), "{counts:?}");
    }
}

#[test]
fn crowded_config_reports_retry_limit() {
    let cfg = SceneConfig {
        min_objects: 8,
        max_objects: 8,
        min_separation: 0.6,
        max_retries: 25,
        ..SceneConfig::default()
    };
    match sample_scene(3, &cfg) {
        Err(DtcError::Placement { retries, .. }) => assert_eq!(retries, 25),
        other => panic!("expected placement error, got {other:?}"),
    }
}

#[test]
fn empty_scene_renders_uniform_background() {
    let img = render_scene(&scene_of(vec![])).unwrap();
    assert!(img.pixels().all(|p| p.0 == BACKGROUND));
    let t = image_to_tensor::<f64>(&img);
    assert!(t.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
}

#[test]
fn centre_pixel_takes_object_colour() {
    let s = scene_of(vec![obj(Shape::Square, Color::Red, Size::Large, Texture::Solid, 0.5, 0.5)]);
    let img = render_scene(&s).unwrap();
    assert_eq!(img.get_pixel(32, 32).0, Color::Red.rgb());
    assert_eq!(img.get_pixel(0, 0).0, BACKGROUND);
    assert_eq!(render_scene(&s).unwrap().as_raw(), img.as_raw());
}

#[test]
fn outlined_shapes_are_hollow() {
    for shape in Shape::ALL {
        let s = scene_of(vec![obj(*shape, Color::Blue, Size::Large, Texture::Outlined, 0.5, 0.5)]);
        let img = render_scene(&s).unwrap();
        assert_eq!(img.get_pixel(32, 32).0, BACKGROUND, "{shape}");
        let coloured = img.pixels().filter(|p| p.0 == Color::Blue.rgb()).count();
        assert!(coloured > 10, "{shape}: {coloured}");
    }
}

#[test]
fn later_objects_draw_on_top() {
    let a = obj(Shape::Circle, Color::Red, Size::Large, Texture::Solid, 0.5, 0.5);
    let b = obj(Shape::Circle, Color::Green, Size::Small, Texture::Solid, 0.5, 0.5);
    let img = render_scene(&scene_of(vec![a, b])).unwrap();
    assert_eq!(img.get_pixel(32, 32).0, Color::Green.rgb());
}

#[test]
fn tensor_image_round_trip() {
    let s = sample_scene(11, &SceneConfig::default()).unwrap();
    let img = render_scene(&s).unwrap();
    let back = tensor_to_image(&image_to_tensor::<f32>(&img)).unwrap();
    assert_eq!(back.as_raw(), img.as_raw());
}

#[test]
fn caption_grammar() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let o = obj(Shape::Circle, Color::Red, Size::Small, Texture::Solid, 0.3, 0.3);
    assert_eq!(describe_region(&[&o], None, 1.0, &mut rng).unwrap(), "a small red solid circle");
    assert_eq!(describe_region(&[&o], None, 0.0, &mut rng).unwrap(), "a small red circle");

    let b = obj(Shape::Square, Color::Blue, Size::Large, Texture::Outlined, 0.7, 0.32);
    let cap = describe_region(&[&o, &b], None, 0.0, &mut rng).unwrap();
    assert_eq!(cap, "a small red circle left of a large blue square");
    assert!(describe_region(&[&o, &b], Some(Relation::RightOf), 0.0, &mut rng).is_err());
    assert!(describe_region(&[&o, &b], Some(Relation::Above), 0.0, &mut rng).is_ok());
    assert!(describe_region(&[&o], Some(Relation::Above), 0.0, &mut rng).is_err());
    assert!(describe_region(&[], None, 0.0, &mut rng).is_err());
}

#[test]
fn relations_follow_image_axes() {
    let a = obj(Shape::Circle, Color::Red, Size::Small, Texture::Solid, 0.5, 0.2);
    let b = obj(Shape::Circle, Color::Red, Size::Small, Texture::Solid, 0.52, 0.8);
    assert_eq!(Relation::between(&a, &b), Relation::Above);
    assert_eq!(Relation::between(&b, &a), Relation::Below);
}

#[test]
fn parser_rejects_malformed_captions() {
    for bad in [
        "",
        "a red circle",
        "a small red circle near a large blue square",
        "a small red circle left a large blue square",
        "a small red circle above a large blue square extra",
        "the small red circle",
    ] {
        assert!(parse_caption(bad).is_err(), "{bad}");
    }
}

/// Collects every caption of `n` sampled layouts with its member objects.
fn sampled_captions(n: u64) -> Vec<(String, Vec<ObjectSpec>)> {
    let cfg = SceneConfig::default();
    let mut out = Vec::new();
    let mut seed = 0;
    while out.len() < n as usize {
        let (scene, layout) = synthesize(seed, &cfg).unwrap();
        for r in layout.regions {
            out.push((r.caption, r.members.iter().map(|&i| scene.objects[i].clone()).collect()));
        }
        seed += 1;
    }
    out
}

#[test]
fn ten_thousand_captions_parse_back_to_their_objects() {
    let caps = sampled_captions(10_000);
    let mut pairs = 0;
    for (cap, members) in &caps {
        let p = parse_caption(cap).unwrap_or_else(|e| panic!("{cap}: {e}"));
        let mentioned_texture = cap.contains("solid") || cap.contains("outlined");
        assert!(p.first.matches(&members[0]), "{cap}");
        assert_eq!(p.first.size, members[0].size);
        match (&p.second, members.len()) {
            (None, 1) => {}
            (Some((rel, second)), 2) => {
                pairs += 1;
                assert!(second.matches(&members[1]), "{cap}");
                assert!(rel.holds(&members[0], &members[1]), "{cap}");
            }
            _ => panic!("arity mismatch for '{cap}'"),
        }
        if !mentioned_texture {
            assert!(p.first.texture.is_none());
        }
    }
    assert!(pairs > 500, "too few relational captions: {pairs}");
}

#[test]
fn distant_objects_stay_singletons() {
    let cfg = SceneConfig::default();
    let s = scene_of(vec![
        obj(Shape::Circle, Color::Red, Size::Small, Texture::Solid, 0.15, 0.15),
        obj(Shape::Square, Color::Blue, Size::Small, Texture::Solid, 0.85, 0.85),
    ]);
    for seed in 0..50 {
        let l = build_layout(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(l.len(), 2);
        assert!(l.regions.iter().all(|r| r.members.len() == 1));
    }
}

#[test]
fn grouped_box_is_padded_union() {
    let cfg = SceneConfig {
        group_probability: 1.0,
        ..SceneConfig::default()
    };
    let a = obj(Shape::Circle, Color::Red, Size::Small, Texture::Solid, 0.4, 0.5);
    let b = obj(Shape::Square, Color::Blue, Size::Large, Texture::Solid, 0.65, 0.55);
    let l = build_layout(&scene_of(vec![a, b]), &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(l.len(), 1);
    let r = &l.regions[0];
    assert_eq!(r.members, vec![0, 1]);
    // Recomputed by hand: x from 0.4-0.07 to 0.65+0.12, y from 0.5-0.07 to 0.55+0.12.
    let expect = [0.33 - 0.06, 0.43 - 0.06, 0.77 + 0.06, 0.67 + 0.06];
    for (got, want) in r.bbox.0.iter().zip(expect) {
        assert!((got - want).abs() < 1e-12, "{:?}", r.bbox);
    }
    assert!(r.caption.contains("left of"));
}

#[test]
fn boxes_clip_to_canvas() {
    let cfg = SceneConfig::default();
    let s = scene_of(vec![obj(Shape::Circle, Color::Red, Size::Large, Texture::Solid, 0.12, 0.88)]);
    let l = build_layout(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let b = l.regions[0].bbox;
    assert_eq!(b.x1(), 0.0);
    assert_eq!(b.y2(), 1.0);
}

#[test]
fn layouts_never_exceed_region_cap() {
    let cfg = SceneConfig {
        group_probability: 0.0,
        ..SceneConfig::default()
    };
    for seed in 0..300 {
        let s = sample_scene(seed, &cfg).unwrap();
        let l = build_layout(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert!(l.len() <= cfg.max_regions && !l.is_empty());
        if s.objects.len() <= cfg.max_regions {
            assert_eq!(l.len(), s.objects.len());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn layout_partitions_and_covers(seed in any::<u64>()) {
        let cfg = SceneConfig::default();
        let (scene, layout) = synthesize(seed, &cfg).unwrap();
        prop_assert!(scene.validate(&cfg).is_ok());
        prop_assert!(!layout.is_empty() && layout.len() <= cfg.max_regions);
        let mut seen = vec![0usize; scene.objects.len()];
        for r in &layout.regions {
            prop_assert!(!r.caption.is_empty());
            prop_assert!(matches!(r.members.len(), 1 | 2));
            let b = r.bbox.0;
            prop_assert!(0.0 <= b[0] && b[0] < b[2] && b[2] <= 1.0);
            prop_assert!(0.0 <= b[1] && b[1] < b[3] && b[3] <= 1.0);
            for &m in &r.members {
                seen[m] += 1;
                prop_assert!(r.bbox.contains(&scene.objects[m].extent()));
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }
}

#[test]
fn dataset_is_deterministic_and_split() {
    let cfg = SceneConfig::default();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = build_dataset(100, a.path(), 1, SplitRatios::default(), &cfg).unwrap();
    build_dataset(100, b.path(), 1, SplitRatios::default(), &cfg).unwrap();
    for f in [MANIFEST_FILE, HEADER_FILE] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap()
        );
    }
    for r in &ma.records {
        assert_eq!(
            std::fs::read(a.path().join(&r.image)).unwrap(),
            std::fs::read(b.path().join(&r.image)).unwrap()
        );
    }
    assert_eq!(ma.split(Split::Train).len(), 80);
    assert_eq!(ma.split(Split::Val).len(), 10);
    assert_eq!(ma.split(Split::Test).len(), 10);

    // Recount regions from the files on disk.
    let text = std::fs::read_to_string(a.path().join(MANIFEST_FILE)).unwrap();
    let mut from_files = 0;
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        from_files += v["regions"].as_array().unwrap().len();
        assert!(a.path().join(v["image"].as_str().unwrap()).exists());
    }
    let per_image: usize = ma.records.iter().map(|r| r.layout().len()).sum();
    assert_eq!(from_files, per_image);

    let loaded = DatasetManifest::load(a.path()).unwrap();
    assert_eq!(loaded, ma);
    let img = loaded.load_image(&loaded.records[0]).unwrap();
    assert_eq!(img.dimensions(), (64, 64));
    assert_eq!(img.as_raw(), render_scene(&loaded.scene(&loaded.records[0])).unwrap().as_raw());
}

#[test]
fn dataset_rejects_empty_request() {
    let d = tempfile::tempdir().unwrap();
    assert!(build_dataset(0, d.path(), 1, SplitRatios::default(), &SceneConfig::default()).is_err());
}

#[test]
fn derived_seeds_are_order_independent() {
    let cfg = SceneConfig::default();
    let direct = synthesize(derive_seed(5, 42), &cfg).unwrap();
    for i in (0..42).rev() {
        synthesize(derive_seed(5, i), &cfg).unwrap();
    }
    assert_eq!(synthesize(derive_seed(5, 42), &cfg).unwrap(), direct);
    assert_ne!(derive_seed(5, 42), derive_seed(5, 43));
}
