use super::*;

#[test]
fn ubc_analog_preset_shape() {
    let s = ubc_analog();
    assert_eq!(s.categories.len(), 1);
    assert_eq!(s.seen.len(), 4);
    assert_eq!(s.unseen.len(), 12);
    assert_eq!(s.total_compositions(), 16);
    // the four retained pairs are the diagonal ones
    for (i, comp) in s.seen.iter().enumerate() {
        assert_eq!(comp.attributes, vec![i, i]);
    }
    s.check_invariants().unwrap();
}

#[test]
fn minimal_two_by_two_space() {
    let s = build_space(1, &[2, 2], 0.5, 7).unwrap();
    assert_eq!(s.seen.len(), 2);
    assert_eq!(s.unseen.len(), 2);
    s.check_invariants().unwrap();
}

#[test]
fn seen_fraction_rounds_up_and_covers_atoms() {
    let s = build_space(3, &[5, 5], 0.1, 11).unwrap();
    assert_eq!(s.total_compositions(), 75);
    assert_eq!(s.seen.len(), 8); // ceil(0.1 * 75)
    s.check_invariants().unwrap();
}

#[test]
fn build_space_is_deterministic() {
    let a = build_space(2, &[3, 3], 0.3, 13).unwrap();
    let b = build_space(2, &[3, 3], 0.3, 13).unwrap();
    assert_eq!(a.seen, b.seen);
    assert_eq!(a.unseen, b.unseen);
}

#[test]
fn build_space_rejects_degenerate_inputs() {
    assert!(build_space(0, &[2], 0.5, 1).is_err());
    assert!(build_space(1, &[1, 2], 0.5, 1).is_err());
    assert!(build_space(1, &[2, 2], 0.0, 1).is_err());
    // too small a fraction to cover every atom
    assert!(matches!(
        build_space(1, &[4, 4], 0.07, 1),
        Err(SynthError::CoverageUnsatisfiable(_))
    ));
}

fn default_cfg() -> RenderConfig {
    RenderConfig::default()
}

#[test]
fn render_is_deterministic_bit_for_bit() {
    let space = ubc_analog();
    let a = render_scene(&space, Split::Train, 42, &default_cfg(), None).unwrap();
    let b = render_scene(&space, Split::Train, 42, &default_cfg(), None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn train_scenes_contain_only_seen_compositions() {
    let space = ubc_analog();
    for seed in 0..20 {
        let scene = render_scene(&space, Split::Train, seed, &default_cfg(), None).unwrap();
        for inst in &scene.instances {
            assert!(space.is_seen(&inst.composition));
        }
    }
}

#[test]
fn test_unseen_scenes_contain_an_unseen_composition() {
    let space = ubc_analog();
    for seed in 0..20 {
        let scene = render_scene(&space, Split::TestUnseen, seed, &default_cfg(), Some(seed as usize)).unwrap();
        assert!(scene.instances.iter().any(|i| space.unseen.contains(&i.composition)));
    }
}

#[test]
fn masks_are_disjoint_and_large_enough() {
    let space = ubc_analog();
    for seed in 100..120 {
        let scene = render_scene(&space, Split::Train, seed, &default_cfg(), None).unwrap();
        assert!(scene.instances.len() >= 2);
        let mut occupancy = vec![0u8; scene.height * scene.width];
        for inst in &scene.instances {
            assert!(inst.area() >= 16, "instance below 16 px");
            for (o, &m) in occupancy.iter_mut().zip(&inst.mask) {
                *o += u8::from(m);
            }
        }
        assert!(occupancy.iter().all(|&c| c <= 1), "overlapping masks");
    }
}

#[test]
fn image_values_stay_in_unit_range() {
    let space = ubc_analog();
    let scene = render_scene(&space, Split::Train, 5, &default_cfg(), None).unwrap();
    assert!(scene.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert_eq!(scene.image.len(), 3 * 64 * 64);
}

#[test]
fn tier1_targets_every_instance_of_the_category() {
    let space = ubc_analog();
    let scene = {
        let mut s = render_scene(&space, Split::Train, 9, &default_cfg(), None).unwrap();
        s.id = "t".into();
        s
    };
    let prompt = PromptSpec::category_only(0, 2);
    let targets = targets_for_prompt(&scene, &prompt);
    assert_eq!(targets, (0..scene.instances.len()).collect::<Vec<_>>());
}

#[test]
fn targets_match_brute_force_filter() {
    let space = ubc_analog();
    for seed in 0..30u64 {
        let mut scene = render_scene(&space, Split::Train, seed, &default_cfg(), None).unwrap();
        scene.id = format!("s{seed}");
        let mut tier_rng = crate::rng::stream(seed, "tier");
        for sample in make_labels(&scene, &space, &mut tier_rng) {
            let brute: Vec<usize> = scene
                .instances
                .iter()
                .enumerate()
                .filter(|(_, inst)| {
                    let cat_ok = inst.composition.category == sample.prompt.category;
                    let attr_ok = sample.prompt.attributes.iter().enumerate().all(|(g, a)| {
                        a.is_none() || inst.composition.attributes[g] == a.unwrap()
                    });
                    cat_ok && attr_ok
                })
                .map(|(i, _)| i)
                .collect();
            assert_eq!(sample.targets, brute);
        }
    }
}

#[test]
fn absent_attribute_prompt_can_have_empty_targets() {
    let space = ubc_analog();
    let mut scene = render_scene(&space, Split::Train, 3, &default_cfg(), None).unwrap();
    scene.id = "empty".into();
    // ask for an attribute value no instance carries
    let present: Vec<usize> = scene.instances.iter().map(|i| i.composition.attributes[0]).collect();
    let missing = (0..4).find(|v| !present.contains(v));
    if let Some(missing) = missing {
        let prompt = PromptSpec { category: 0, attributes: vec![Some(missing), None] };
        assert!(targets_for_prompt(&scene, &prompt).is_empty());
    }
}

#[test]
fn composed_prompts_never_encode_unseen_pairs() {
    let space = ubc_analog();
    let spec = DatasetSpec {
        space: space.clone(),
        train_scenes: 60,
        test_seen_scenes: 2,
        test_unseen_scenes: 2,
        seed: 77,
        render: default_cfg(),
    };
    let ds = generate(&spec).unwrap();
    let mut composed = 0;
    for sample in &ds.samples {
        if let Some(comp) = sample.prompt.full_composition() {
            assert!(space.is_seen(&comp), "training prompt leaks an unseen composition");
            composed += 1;
        }
    }
    assert!(composed > 0, "tier-3 should emit composed prompts");
}

#[test]
fn corpus_generation_is_deterministic() {
    let spec = DatasetSpec {
        space: ubc_analog(),
        train_scenes: 5,
        test_seen_scenes: 3,
        test_unseen_scenes: 3,
        seed: 123,
        render: default_cfg(),
    };
    let a = generate(&spec).unwrap();
    let b = generate(&spec).unwrap();
    assert_eq!(a.scenes, b.scenes);
    assert_eq!(a.samples, b.samples);
}

#[test]
fn unseen_compositions_recur_across_the_unseen_split() {
    let spec = DatasetSpec {
        space: ubc_analog(),
        train_scenes: 0,
        test_seen_scenes: 0,
        test_unseen_scenes: 60,
        seed: 9,
        render: default_cfg(),
    };
    let ds = generate(&spec).unwrap();
    for comp in &spec.space.unseen {
        let count: usize = ds
            .scenes
            .iter()
            .map(|s| s.instances.iter().filter(|i| &i.composition == comp).count())
            .sum();
        assert!(count >= 3, "composition {comp:?} appears only {count} times");
    }
}

#[test]
fn tier_distribution_is_roughly_uniform() {
    let spec = DatasetSpec {
        space: ubc_analog(),
        train_scenes: 300,
        test_seen_scenes: 0,
        test_unseen_scenes: 0,
        seed: 55,
        render: default_cfg(),
    };
    let ds = generate(&spec).unwrap();
    let mut counts = [0usize; 3];
    let mut seen_scene = std::collections::BTreeSet::new();
    for s in &ds.samples {
        if seen_scene.insert(s.scene_id.clone()) {
            counts[(s.tier - 1) as usize] += 1;
        }
    }
    for c in counts {
        assert!((60..=140).contains(&c), "tier counts {counts:?}");
    }
}
