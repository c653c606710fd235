use std::sync::OnceLock;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trilayer::deform::{compute_weights, forward_skin, Pose, PoseSpace, Rigid, Skeleton};
use trilayer::eval::{mask_iou, masked_psnr, psnr, ssim};
use trilayer::fields::{FieldSet, Gradients, Mat, NetworkSpec, Tape};
use trilayer::geometry::{
    find_inner_radius, occlusion_first_hit, param_background, param_occlusion, Camera, Jitter,
    SampleCounts, SphereLayout, Vec3,
};
use trilayer::io::Dataset;
use trilayer::losses::{LossWeights, OcclusionPrior};
use trilayer::optim::{batch_objective, Denominators, TrainConfig, Trainer};
use trilayer::par::Exec;
use trilayer::raster::Image;
use trilayer::render::{build_samples, integrate_ray, Deformer, LayerMode, SampleBatch};
use trilayer::synth::{generate, AnalyticScene, SceneSpec};

fn small_spec() -> SceneSpec {
    let mut spec = SceneSpec {
        frames: 2,
        width: 32,
        height: 32,
        ..SceneSpec::default()
    };
    spec.camera.focal = 90.0;
    spec
}

fn dataset() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| generate(&small_spec(), 4, Exec::Parallel).unwrap())
}

fn fields() -> &'static FieldSet {
    static FIELDS: OnceLock<FieldSet> = OnceLock::new();
    FIELDS.get_or_init(|| FieldSet::new(NetworkSpec::desk(), 2, 9).unwrap())
}

fn camera_from(seed: u64) -> (Camera, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let outer = rng.random_range(0.5..3.0);
    let dist = rng.random_range(1.5 * outer..5.0 * outer);
    let dir = Vec3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let origin = if dir.norm() < 1e-3 {
        Vec3::new(0.0, 0.0, -dist)
    } else {
        dir.normalize() * dist
    };
    let up = if origin.normalize().y.abs() > 0.9 {
        Vec3::x()
    } else {
        Vec3::y()
    };
    let (w, h) = (rng.random_range(8..40), rng.random_range(8..40));
    let half_diag = 0.5 * ((w * w + h * h) as f64).sqrt();
    let angle = rng.random_range(0.2..0.95) * (0.8 * outer / dist).asin();
    (
        Camera::look_at(origin, Vec3::zeros(), up, half_diag / angle.tan(), w, h),
        outer,
    )
}

/// A four-ray batch from frame 0 with its targets.
fn micro_batch(mode: LayerMode, jitter: u64) -> (SampleBatch, Mat, Vec<bool>) {
    let d = dataset();
    let cam = &d.cameras[0];
    let layout = SphereLayout::for_camera(cam, d.spec.outer_radius).unwrap();
    let deform = Deformer::new(&d.spec.skeleton, &d.poses[0]).unwrap();
    let pixels = [(16, 14), (15, 20), (12, 9), (3, 28)];
    let rays: Vec<_> = pixels
        .iter()
        .map(|&(x, y)| cam.pixel_ray(x, y).unwrap())
        .collect();
    let counts = SampleCounts {
        occlusion: 6,
        foreground: 10,
        background: 6,
    };
    let cfg = TrainConfig {
        near_band: 0.3,
        ..TrainConfig::desk()
    };
    let batch = build_samples(
        &rays,
        0,
        &layout,
        Some(&deform),
        &cfg.sampling(counts),
        mode,
        Jitter::Seeded(jitter),
    )
    .unwrap();
    let f = &d.frames[0];
    let w = f.rgb.width;
    let target = Mat::from_vec(
        4,
        3,
        pixels
            .iter()
            .flat_map(|&(x, y)| f.rgb.pixel(y * w + x).to_vec())
            .collect(),
    );
    let mask = pixels.iter().map(|&(x, y)| f.mask[y * w + x]).collect();
    (batch, target, mask)
}

fn group_is_zero(g: &Gradients, fields: &FieldSet, prefix: &str) -> bool {
    fields
        .store
        .groups
        .iter()
        .zip(&g.0)
        .filter(|(p, _)| p.name.starts_with(prefix))
        .all(|(_, m)| m.data.iter().all(|&v| v == 0.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn every_frustum_ray_meets_the_inner_sphere(seed in any::<u64>()) {
        let (cam, outer) = camera_from(seed);
        let layout = SphereLayout::for_camera(&cam, outer).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        for _ in 0..100 {
            let ray = cam.ray_through(rng.random_range(0.0..cam.width as f64), rng.random_range(0.0..cam.height as f64));
            prop_assert!(occlusion_first_hit(&ray, &layout).is_ok());
        }
    }

    #[test]
    fn inner_radius_matches_perpendicular_distance(seed in any::<u64>()) {
        let (cam, outer) = camera_from(seed);
        let rays = cam.corner_rays();
        let r = find_inner_radius(&rays, outer, 1e-9).unwrap();
        let exact = rays.iter().map(|ray| (ray.origin.norm_squared() - ray.origin.dot(&ray.dir).powi(2)).sqrt()).fold(0.0, f64::max);
        prop_assert!((r - exact).abs() < 1e-8, "{r} vs {exact}");
    }

    #[test]
    fn layer_depths_have_disjoint_signs(
        d in proptest::array::uniform3(-1.0..1.0f64),
        ratio in 0.05..0.95f64,
        scale in 1.0..50.0f64,
    ) {
        let dir = Vec3::from(d);
        prop_assume!(dir.norm() > 1e-3);
        let layout = SphereLayout::new(2.0, 2.0 * ratio).unwrap();
        let o = param_occlusion(&(dir.normalize() * layout.inner * scale), &layout).unwrap();
        let b = param_background(&(dir.normalize() * layout.outer * scale), &layout).unwrap();
        prop_assert!(o.depth < 0.0 && o.depth >= -1.0);
        prop_assert!(b.depth > 0.0 && b.depth <= 1.0);
        prop_assert!((o.dir.norm() - 1.0).abs() < 1e-9 && (b.dir.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn skinning_commutes_with_global_motion(
        x in proptest::array::uniform3(-1.0..1.0f64),
        angles in proptest::array::uniform4(-0.8..0.8f64),
        g_angle in -3.0..3.0f64,
        g_shift in proptest::array::uniform3(-1.0..1.0f64),
    ) {
        let sk = Skeleton::default_rig();
        let pose = Pose(angles.iter().map(|&a| Rigid::rotation_about(Vec3::new(0.3, 1.0, -0.2).normalize(), a, Vec3::zeros())).collect());
        let g = Rigid::translation(Vec3::from(g_shift)).compose(&Rigid::rotation_about(Vec3::z(), g_angle, Vec3::zeros()));
        let moved = Pose(pose.0.iter().map(|b| g.compose(b)).collect());
        let xc = Vec3::from(x);
        let w = compute_weights(&xc, &sk, PoseSpace::Canonical);
        let a = g.apply(&forward_skin(&xc, &pose, &w));
        let b = forward_skin(&xc, &moved, &w);
        prop_assert!((a - b).norm() < 1e-12);
    }

    #[test]
    fn transmittance_never_increases(
        samples in prop::collection::vec((0.0..20.0f64, 1e-3..0.5f64), 1..40),
    ) {
        let sigma: Vec<f64> = samples.iter().map(|s| s.0).collect();
        let delta: Vec<f64> = samples.iter().map(|s| s.1).collect();
        let r = integrate_ray(&sigma, &vec![[0.5; 3]; sigma.len()], &delta).unwrap();
        prop_assert!(r.transmittance.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!((0.0..=1.0).contains(&r.alpha));
    }

    #[test]
    fn masked_psnr_over_everything_is_psnr(seed in any::<u64>(), w in 11..20usize, h in 11..20usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f64> = (0..2 * w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        let a = Image::from_fn(w, h, 3, |x, y, c| vals[(y * w + x) * 3 + c]);
        let b = Image::from_fn(w, h, 3, |x, y, c| vals[w * h * 3 + (y * w + x) * 3 + c]);
        prop_assert_eq!(masked_psnr(&a, &b, &vec![true; w * h]).unwrap(), Some(psnr(&a, &b).unwrap()));
        prop_assert_eq!(ssim(&a, &b).unwrap(), ssim(&a, &b).unwrap());
        let ma = a.threshold(0.5);
        let mb = b.threshold(0.5);
        prop_assert_eq!(mask_iou(&ma, &mb).unwrap(), mask_iou(&mb, &ma).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn initial_sdf_changes_sign_across_half_radius(d in proptest::array::uniform3(-1.0..1.0f64)) {
        let dir = Vec3::from(d);
        prop_assume!(dir.norm() > 1e-2);
        let f = fields();
        let inside = f.eval_fg_point(&(dir.normalize() * 0.3)).0;
        let outside = f.eval_fg_point(&(dir.normalize() * 0.7)).0;
        prop_assert!(inside < 0.0 && outside > 0.0, "{inside} {outside}");
    }

    #[test]
    fn occlusion_loss_leaves_the_body_alone(jitter in any::<u64>()) {
        let f = fields();
        let (batch, target, mask) = micro_batch(LayerMode::Full, jitter);
        let cfg = TrainConfig::desk();
        let mut tape = Tape::new();
        let pv = f.store.bind(&mut tape);
        let (lv, _) = batch_objective(&mut tape, &pv, f, &batch, &target, &mask, &cfg, &Denominators::of(&[&batch])).unwrap();
        prop_assert!(tape.value(lv.occ).data[0] > 0.0);
        let g = Gradients::from_tape(&f.store, tape.backward(lv.occ).unwrap());
        prop_assert!(group_is_zero(&g, f, "fg."));
        prop_assert!(group_is_zero(&g, f, "density.log_beta"));
        prop_assert!(!group_is_zero(&g, f, "latent.occlusion"));
    }

    #[test]
    fn unused_parameters_get_zero_gradient(jitter in any::<u64>()) {
        let f = fields();
        let (batch, target, mask) = micro_batch(LayerMode::NoOcclusionLayer, jitter);
        let cfg = TrainConfig::desk();
        let mut tape = Tape::new();
        let pv = f.store.bind(&mut tape);
        let (lv, _) = batch_objective(&mut tape, &pv, f, &batch, &target, &mask, &cfg, &Denominators::of(&[&batch])).unwrap();
        let root = lv.total(&mut tape, &cfg.weights);
        let g = Gradients::from_tape(&f.store, tape.backward(root).unwrap());
        prop_assert!(group_is_zero(&g, f, "latent.occlusion"));
        // Only frame 0 is in the batch.
        let bg = f.store.find("latent.background").unwrap();
        let row = f.spec.latent_dim;
        prop_assert!(g.0[bg].data[row..].iter().all(|&v| v == 0.0));
        prop_assert!(g.0[bg].data[..row].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn bypassing_the_occlusion_layer_gives_the_two_part_objective(jitter in any::<u64>()) {
        let f = fields();
        let cfg = TrainConfig { weights: LossWeights { occ: 0.0, ..LossWeights::default() }, ..TrainConfig::desk() };
        let (full, target, mask) = micro_batch(LayerMode::Full, jitter);
        let (two, ..) = micro_batch(LayerMode::NoOcclusionLayer, jitter);
        let eval = |batch: &SampleBatch| {
            let mut tape = Tape::new();
            let pv = f.store.bind(&mut tape);
            let (lv, tr) = batch_objective(&mut tape, &pv, f, batch, &target, &mask, &cfg, &Denominators::of(&[batch])).unwrap();
            (lv.values(&tape), tape.value(tr.fg_only).clone())
        };
        let (pf, fg_only) = eval(&full);
        let (pt, composed_two) = eval(&two);
        prop_assert_eq!(fg_only, composed_two);
        prop_assert_eq!(pt.occ, 0.0);
        prop_assert_eq!((pf.eik, pf.dec, pf.comp), (pt.eik, pt.dec, pt.comp));
    }

    #[test]
    fn zero_weights_leave_only_the_photometric_term(jitter in any::<u64>()) {
        let f = fields();
        let zero = LossWeights { eik: 0.0, dec: 0.0, comp: 0.0, occ: 0.0 };
        let cfg = TrainConfig { weights: zero, ..TrainConfig::desk() };
        let (batch, target, mask) = micro_batch(LayerMode::Full, jitter);
        let mut tape = Tape::new();
        let pv = f.store.bind(&mut tape);
        let (lv, _) = batch_objective(&mut tape, &pv, f, &batch, &target, &mask, &cfg, &Denominators::of(&[&batch])).unwrap();
        let root = lv.total(&mut tape, &cfg.weights);
        prop_assert_eq!(tape.value(root).data[0], tape.value(lv.rgb).data[0]);
        let g_total = Gradients::from_tape(&f.store, tape.backward(root).unwrap());
        let g_rgb = Gradients::from_tape(&f.store, tape.backward(lv.rgb).unwrap());
        for (a, b) in g_total.0.iter().zip(&g_rgb.0) {
            for (x, y) in a.data.iter().zip(&b.data) {
                prop_assert!((x - y).abs() <= 1e-15 * y.abs().max(1e-300), "{x} vs {y}");
            }
        }
    }
}

#[test]
fn identity_pose_round_trip_is_exact() {
    let sk = Skeleton::default_rig();
    let d = Deformer::new(&sk, &Pose::identity(sk.bones.len())).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let x = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        assert!((d.canonical(&x) - x).norm() <= 1e-12);
    }
}

#[test]
fn generated_frames_are_consistent() {
    let d = dataset();
    let scene = AnalyticScene::new(&d.spec).unwrap();
    for (i, f) in d.frames.iter().enumerate() {
        for p in 0..f.mask.len() {
            let (x, y) = (p % f.rgb.width, p / f.rgb.width);
            let t = scene.trace_pixel(i, x, y).unwrap();
            assert_eq!(f.silhouette[p], t.silhouette);
            assert_eq!(f.mask[p], f.silhouette[p] && t.visible);
            if f.mask[p] {
                assert_eq!(f.rgb.pixel(p), f.gt_human.pixel(p), "frame {i} pixel {p}");
            }
        }
    }
    let again = generate(&small_spec(), 4, Exec::Sequential).unwrap();
    assert_eq!(again.frames.len(), d.frames.len());
    for (a, b) in again.frames.iter().zip(&d.frames) {
        assert_eq!(a.rgb.data, b.rgb.data);
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.gt_human.data, b.gt_human.data);
    }
}

#[test]
fn occlusion_prior_targets_follow_the_threshold() {
    let prior = OcclusionPrior::default();
    let t = trilayer::losses::occlusion_targets(
        &[0.5, 0.05, 0.5, 0.11],
        &[false, false, true, false],
        &prior,
    );
    assert_eq!(t, vec![1.0, 0.0, 0.0, 1.0]);
}

#[test]
fn training_lowers_the_objective() {
    let cfg = TrainConfig {
        rays_per_step: 64,
        chunk_rays: 64,
        steps: 100,
        checkpoint_every: 0,
        ..TrainConfig::desk()
    };
    let mut t = Trainer::new(dataset(), cfg).unwrap();
    let logs: Vec<f64> = (0..100)
        .map(|_| t.advance(Exec::Parallel).unwrap().total)
        .collect();
    let head = logs[..10].iter().sum::<f64>() / 10.0;
    let tail = logs[90..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "first ten {head}, last ten {tail}");
}
