mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use uwsplat::backward::{backward_full, ViewInputs};
use uwsplat::checkpoint::Checkpoint;
use uwsplat::densify::{densify_and_prune, DensifyConfig, GradStats};
use uwsplat::gaussian::{logit, quat_norm};
use uwsplat::gradcheck::GradCheckScene;
use uwsplat::losses::{compose_final, LossParts, LossWeights};
use uwsplat::medium::{apply_medium, restore_true_color};
use uwsplat::raster::rasterize_with;
use uwsplat::scene::{load_scene, MANIFEST_NAME};
use uwsplat::schedule::{stage_schedule, Stage, StageConfig};
use uwsplat::semantics::{
    pseudo_embedding, region_membership, semantic_loss, BBox, EmbeddingProjector, Membership, Reduction, SemanticRegion,
};
use uwsplat::sh::eval_sh_unclamped;
use uwsplat::{Image, MediumParams, ParamGroup, Plane, RasterOptions, SEMANTIC_DIM};

fn cloud_seed() -> impl Strategy<Value = (u64, usize)> {
    (any::<u64>(), 1usize..24)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn accumulated_alpha_is_bounded_and_monotone_in_opacity(
        (seed, n) in cloud_seed(), pick in any::<prop::sample::Index>(), bump in 0.01f64..3.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cloud = common::random_cloud(&mut rng, n, 0);
        let camera = common::camera(20, 18);
        let options = RasterOptions::exact();
        let before = rasterize_with(&cloud, &camera, &options);
        prop_assert!(before.alpha_accum.as_slice().iter().all(|&a| (0.0..=1.0).contains(&a)));
        let i = pick.index(n);
        cloud.opacity_logits[i] += bump;
        let after = rasterize_with(&cloud, &camera, &options);
        for (a, b) in before.alpha_accum.as_slice().iter().zip(after.alpha_accum.as_slice()) {
            prop_assert!(*b >= *a - 1e-12, "alpha fell from {} to {}", a, b);
            prop_assert!(*b <= 1.0);
        }
    }

    #[test]
    fn storage_order_does_not_change_the_render((seed, n) in cloud_seed(), shuffle in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cloud = common::random_cloud(&mut rng, n, 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle));
        let permuted = cloud.select(&order);
        let camera = common::camera(24, 20);
        let a = rasterize_with(&cloud, &camera, &RasterOptions::default());
        let b = rasterize_with(&permuted, &camera, &RasterOptions::default());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn sh_is_linear_before_clamping(
        a in prop::collection::vec(-1.0f64..1.0, 48),
        b in prop::collection::vec(-1.0f64..1.0, 48),
        dir in prop::array::uniform3(-1.0f64..1.0).prop_filter("nonzero", |d| d.iter().any(|v| v.abs() > 0.1)),
    ) {
        let n = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
        let dir = dir.map(|v| v / n);
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let (fa, fb, fs) = (
            eval_sh_unclamped(&a, dir).unwrap(),
            eval_sh_unclamped(&b, dir).unwrap(),
            eval_sh_unclamped(&sum, dir).unwrap(),
        );
        for c in 0..3 {
            prop_assert!((fs[c] - fa[c] - fb[c]).abs() <= 1e-12);
        }
    }

    #[test]
    fn medium_inverts_on_the_valid_mask(
        seed in any::<u64>(),
        bd in prop::array::uniform3(0.0f64..3.0),
        bb in prop::array::uniform3(0.0f64..3.0),
        binf in prop::array::uniform3(0.0f64..1.0),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clean = Image::from_fn(6, 5, |_, _, _| rng.random_range(0.0..1.0));
        let depth = Plane::from_vec(6, 5, (0..30).map(|_| rng.random_range(0.0..8.0)).collect()).unwrap();
        let medium = MediumParams::from_physical(bd, bb, binf).unwrap();
        let observed = apply_medium(&clean, &depth, &medium).unwrap();
        let restored = restore_true_color(&observed, &depth, &medium).unwrap();
        for i in 0..30 {
            if restored.unrecoverable[i] {
                continue;
            }
            let (r, c) = (restored.image.pixel(i), clean.pixel(i));
            for k in 0..3 {
                prop_assert!((r[k] - c[k]).abs() <= 1e-6, "pixel {}: {} vs {}", i, r[k], c[k]);
            }
        }
    }

    #[test]
    fn semantic_loss_is_nonnegative_and_zero_only_at_targets(
        seed in any::<u64>(), members in prop::collection::btree_set(0usize..10, 1..6), offset in -0.5f64..0.5,
    ) {
        let projector = EmbeddingProjector::new(7);
        let region = SemanticRegion::new(
            "v", BBox::new(0.0, 0.0, 4.0, 4.0).unwrap(), pseudo_embedding(seed, 0, projector.raw_dim()), &projector,
        ).unwrap();
        let members: Vec<usize> = members.into_iter().collect();
        let m = [Membership { members: members.clone(), target: region.f_ref }];
        let mut features = vec![[0.25; SEMANTIC_DIM]; 10];
        for &i in &members {
            features[i] = region.f_ref;
        }
        let at_target = semantic_loss(&features, &m, Reduction::Sum);
        prop_assert_eq!(at_target.value, 0.0);
        features[members[0]][3] += offset;
        let off = semantic_loss(&features, &m, Reduction::Sum);
        prop_assert!(off.value >= 0.0);
        prop_assert_eq!(off.value == 0.0, offset == 0.0);
    }

    #[test]
    fn membership_ignores_storage_order((seed, n) in cloud_seed(), shuffle in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cloud = common::random_cloud(&mut rng, n, 0);
        let camera = common::camera(24, 20);
        let projector = EmbeddingProjector::new(7);
        let region = SemanticRegion::new(
            "v", BBox::new(4.0, 3.0, 17.0, 15.0).unwrap(), pseudo_embedding(1, 0, projector.raw_dim()), &projector,
        ).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle));
        let mut direct = region_membership(&cloud, &camera, &region);
        let mut permuted: Vec<usize> =
            region_membership(&cloud.select(&order), &camera, &region).into_iter().map(|k| order[k]).collect();
        direct.sort();
        permuted.sort();
        prop_assert_eq!(direct, permuted);
    }

    #[test]
    fn composed_terms_are_nonnegative(
        l1 in 0.0f64..2.0, l2 in 0.0f64..2.0, ssim in -1.0f64..1.0, depth in 0.0f64..5.0,
        grey in 0.0f64..1.0, smooth in 0.0f64..1.0, semantic in 0.0f64..50.0, stage2 in any::<bool>(),
    ) {
        let parts = LossParts { l1, l2, ssim, depth, grey, smooth, semantic };
        let stage = if stage2 { Stage::Two } else { Stage::One };
        let b = compose_final(&parts, &LossWeights::default(), stage, &StageConfig::default());
        for v in [b.l_rec, b.l_depth, b.l_g, b.l_smooth, b.l_s, b.l_2, b.l_final] {
            prop_assert!(v >= 0.0 && v.is_finite());
        }
        prop_assert!((b.recompose() - b.l_final).abs() <= 1e-12 * b.l_final.max(1.0));
    }

    #[test]
    fn densify_keeps_the_cloud_valid(
        (seed, n) in cloud_seed(), grads in prop::collection::vec(0.0f64..1e-3, 24), iteration in 0usize..5000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cloud = common::random_cloud(&mut rng, n, 1);
        cloud.opacity_logits[0] = logit(1e-3);
        let stats = GradStats { accum: grads[..n].to_vec(), count: vec![1; n] };
        let report = densify_and_prune(&mut cloud, &stats, &DensifyConfig::default(), 2.0, seed, iteration).unwrap();
        prop_assert_eq!(report.remap.len(), cloud.len());
        prop_assert!(report.pruned >= 1);
        prop_assert!(cloud.validate().is_ok());
        for i in 0..cloud.len() {
            prop_assert!((quat_norm(cloud.rotations[i]) - 1.0).abs() < 1e-9);
            prop_assert!(cloud.scale(i).iter().all(|&s| s > 0.0 && s.is_finite()));
        }
    }

    #[test]
    fn checkpoint_parsing_is_total(noise in prop::collection::vec(any::<u8>(), 0..256), cut in any::<prop::sample::Index>()) {
        let _ = Checkpoint::from_bytes(&noise);
        let mut bytes = sample_checkpoint_bytes();
        let k = cut.index(bytes.len());
        bytes[k] = bytes[k].wrapping_add(1 + noise.first().copied().unwrap_or(0) % 255);
        prop_assert!(Checkpoint::from_bytes(&bytes).is_err());
        prop_assert!(Checkpoint::from_bytes(&bytes[..k]).is_err());
    }

    #[test]
    fn manifest_parsing_is_total(text in ".{0,200}", number in any::<f64>()) {
        let dir = tempfile::tempdir().unwrap();
        let projector = EmbeddingProjector::new(7);
        std::fs::write(dir.path().join(MANIFEST_NAME), &text).unwrap();
        prop_assert!(load_scene(dir.path(), &projector).is_err());
        let json = format!(r#"{{"width": {number}, "height": 2, "views": [{{"id": "a", "image": "x.png"}}]}}"#);
        std::fs::write(dir.path().join(MANIFEST_NAME), json).unwrap();
        prop_assert!(load_scene(dir.path(), &projector).is_err());
    }
}

fn sample_checkpoint_bytes() -> Vec<u8> {
    use uwsplat::optim::OptimizerState;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cloud = common::random_cloud(&mut rng, 3, 1);
    Checkpoint {
        iteration: 4,
        optimizer: OptimizerState::new(&cloud),
        grad_stats: GradStats::new(3),
        cloud,
        medium: common::synth_medium(),
        log_gamma: 0.0,
        projector_seed: 7,
        cameras: vec![common::camera(8, 8)],
        config_json: "{}".into(),
    }
    .to_bytes()
}

fn standard_inputs(scene: &GradCheckScene) -> (Vec<&SemanticRegion>, uwsplat::backward::ObjectiveConfig) {
    (scene.regions.iter().collect(), scene.config.clone())
}

#[test]
fn frozen_groups_report_exactly_zero_gradient() {
    let scene = GradCheckScene::standard();
    let (refs, objective) = standard_inputs(&scene);
    let inputs = ViewInputs {
        camera: &scene.camera,
        target: &scene.target,
        depth_prior: scene.depth_prior.as_ref(),
        regions: &refs,
        frame_kind: scene.frame_kind,
    };
    let mut stages = objective.stages.clone();
    stages.total_iterations = 10;
    let plan = stage_schedule(9, &stages);
    assert_eq!(plan.stage, Stage::Two);
    let frozen = backward_full(&scene.cloud, &scene.medium, &inputs, &objective, &plan, scene.gamma)
        .unwrap()
        .grads;
    let free = backward_full(
        &scene.cloud,
        &scene.medium,
        &inputs,
        &objective,
        &stage_schedule(0, &stages),
        scene.gamma,
    )
    .unwrap()
    .grads;
    for g in [
        ParamGroup::Position,
        ParamGroup::Rotation,
        ParamGroup::Scale,
        ParamGroup::Semantic,
    ] {
        assert!(frozen.group(g).iter().all(|&v| v == 0.0), "{g} not masked");
        assert!(free.group(g).iter().any(|&v| v != 0.0), "{g} has no gradient to mask");
    }
    assert!(frozen.group(ParamGroup::Sh).iter().any(|&v| v != 0.0));
}

#[test]
fn gradients_do_not_depend_on_thread_count() {
    let scene = GradCheckScene::with_ssim();
    let (refs, objective) = standard_inputs(&scene);
    let inputs = ViewInputs {
        camera: &scene.camera,
        target: &scene.target,
        depth_prior: scene.depth_prior.as_ref(),
        regions: &refs,
        frame_kind: scene.frame_kind,
    };
    let plan = stage_schedule(0, &objective.stages);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| backward_full(&scene.cloud, &scene.medium, &inputs, &objective, &plan, scene.gamma).unwrap())
    };
    let (a, b) = (run(1), run(4));
    for g in ParamGroup::ALL {
        let (ga, gb) = (a.grads.group(g), b.grads.group(g));
        assert!(
            ga.iter().zip(gb).all(|(x, y)| x.to_bits() == y.to_bits()),
            "{g} differs across thread counts"
        );
    }
    assert_eq!(a.breakdown.l_objective.to_bits(), b.breakdown.l_objective.to_bits());
}
