mod common;

use nalgebra::{Matrix4, Rotation3, Vector2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use guided_depth::diffusion::{
    ddim_unguided, median_depth, Denoiser, Field, NoiseSchedule, ScheduleConfig, Timestep,
};
use guided_depth::eval::{abs_rel, delta1};
use guided_depth::io::{decode_pfm, encode_pfm, format_calibration, parse_calibration, Mode, RunConfig};
use guided_depth::metric_param::{
    global_scale_search, log_spaced, softplus, to_metric, update_params, RelativeDepth, ScaleShiftParams,
};
use guided_depth::photometric::{geo_loss, photometric_loss, GeoLossConfig};
use guided_depth::prior::{AnalyticGaussianDenoiser, ToyArchitecture, ToyDenoiser};
use guided_depth::scene::{
    project_point, relative_transform, unproject_pixel, CameraView, DepthMap, Image, Intrinsics,
};
use guided_depth::synth::{generate_scene, Layout, SceneSpec, Texture};
use guided_depth::warp::WarpResult;

fn rigid(angles: (f64, f64, f64), t: (f64, f64, f64)) -> Matrix4<f64> {
    let r = Rotation3::from_euler_angles(angles.0, angles.1, angles.2);
    let mut e = Matrix4::identity();
    e.fixed_view_mut::<3, 3>(0, 0).copy_from(r.matrix());
    e[(0, 3)] = t.0;
    e[(1, 3)] = t.1;
    e[(2, 3)] = t.2;
    e
}

fn image_from(seed: u64, w: usize, h: usize, c: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(w, h, c, |_, _, _| rng.random_range(0.0..1.0)).unwrap()
}

/// Standalone box-window SSIM averaged over all windows fully inside the image.
fn reference_ssim(a: &Image, b: &Image, win: usize, c1: f64, c2: f64) -> f64 {
    let (w, h, ch) = (a.width(), a.height(), a.channels());
    let n = (win * win) as f64;
    let mut vals = Vec::new();
    for i0 in 0..=h - win {
        for j0 in 0..=w - win {
            for c in 0..ch {
                let xs: Vec<f64> = (i0..i0 + win).flat_map(|i| (j0..j0 + win).map(move |j| (i, j))).map(|(i, j)| a.get(i, j, c)).collect();
                let ys: Vec<f64> = (i0..i0 + win).flat_map(|i| (j0..j0 + win).map(move |j| (i, j))).map(|(i, j)| b.get(i, j, c)).collect();
                let mx = xs.iter().sum::<f64>() / n;
                let my = ys.iter().sum::<f64>() / n;
                let vx = xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / n;
                let vy = ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / n;
                let cov = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n;
                vals.push((2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)));
            }
        }
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn project_unproject_round_trip(
        fx in 5.0..3000.0f64, fy in 5.0..3000.0f64, cx in -50.0..1500.0f64, cy in -50.0..1500.0f64,
        u in -100.0..2000.0f64, v in -100.0..2000.0f64, d in 1e-3..1e3f64,
    ) {
        let view = CameraView::at_origin(Intrinsics::new(fx, fy, cx, cy)).unwrap();
        let p = unproject_pixel(&view, &Vector2::new(u, v), d).unwrap();
        let (c, z) = project_point(&view, &p).unwrap();
        prop_assert!((c.x - u).abs() <= 1e-12 * u.abs().max(1.0));
        prop_assert!((c.y - v).abs() <= 1e-12 * v.abs().max(1.0));
        prop_assert!((z - d).abs() <= 1e-12 * d);
    }

    #[test]
    fn relative_transforms_compose_to_identity(
        a in (-3.0..3.0f64, -1.5..1.5f64, -3.0..3.0f64), ta in (-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64),
        b in (-3.0..3.0f64, -1.5..1.5f64, -3.0..3.0f64), tb in (-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64),
    ) {
        let k = Intrinsics::new(50.0, 50.0, 10.0, 10.0);
        let va = CameraView::new(k, rigid(a, ta)).unwrap();
        let vb = CameraView::new(k, rigid(b, tb)).unwrap();
        let prod = relative_transform(&va, &vb) * relative_transform(&vb, &va);
        prop_assert!((prod - Matrix4::identity()).abs().max() < 1e-12);
        prop_assert!((relative_transform(&va, &va) - Matrix4::identity()).abs().max() < 1e-12);
    }

    #[test]
    fn constructors_reject_non_finite(k in 0usize..12, bad in prop_oneof![Just(f64::NAN), Just(f64::INFINITY), Just(f64::NEG_INFINITY)]) {
        let mut data = vec![0.5; 12];
        data[k] = bad;
        prop_assert!(Image::new(4, 3, 1, data.clone()).is_err());
        let mut depth = vec![2.0; 12];
        depth[k] = bad;
        prop_assert!(DepthMap::new(4, 3, depth).is_err());
    }

    #[test]
    fn loss_ignores_invalid_pixels_and_is_nonnegative(seed in any::<u64>(), gamma in 0.0..0.1f64, eta in 0.0..=1.0f64) {
        let (w, h) = (12, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reference = image_from(seed, w, h, 1);
        let rendered = image_from(seed.wrapping_add(1), w, h, 1);
        let valid: Vec<bool> = (0..w * h).map(|_| rng.random_bool(0.8)).collect();
        prop_assume!(valid.iter().any(|v| *v));
        let scrambled = Image::new(
            w, h, 1,
            rendered.data().iter().zip(&valid).map(|(x, v)| if *v { *x } else { rng.random_range(0.0..1.0) }).collect(),
        ).unwrap();
        let cfg = GeoLossConfig { eta, gamma, ..GeoLossConfig::default() };
        let params = ScaleShiftParams::with_raw(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), 1.0, 1e-2).unwrap();
        let wrap = |img: &Image| WarpResult { image: img.clone(), valid: valid.clone(), depth_jacobian: vec![0.0; w * h] };
        let l1 = geo_loss(&reference, &wrap(&rendered), &cfg, &params).unwrap();
        let l2 = geo_loss(&reference, &wrap(&scrambled), &cfg, &params).unwrap();
        prop_assert_eq!(l1.total, l2.total);
        prop_assert!(l1.total >= 0.0);
        for (g, v) in l1.grad_wrt_rendered.iter().zip(&valid) {
            if !v { prop_assert_eq!(*g, 0.0); }
        }
    }

    #[test]
    fn loss_endpoints_match_standalone_terms(seed in any::<u64>(), channels in prop_oneof![Just(1usize), Just(3)]) {
        let (w, h) = (11, 9);
        let a = image_from(seed, w, h, channels);
        let b = image_from(seed ^ 0xabc, w, h, channels);
        let all = WarpResult { image: b.clone(), valid: vec![true; w * h], depth_jacobian: vec![0.0; w * h * channels] };
        let base = GeoLossConfig::default();
        let l1_only = photometric_loss(&a, &all, &GeoLossConfig { eta: 0.0, ..base }).unwrap();
        let mean_l1 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data().len() as f64;
        prop_assert!((l1_only.total - mean_l1).abs() < 1e-14);
        let ssim_only = photometric_loss(&a, &all, &GeoLossConfig { eta: 1.0, ..base }).unwrap();
        let s = reference_ssim(&a, &b, base.ssim_window, base.ssim_c1, base.ssim_c2);
        prop_assert!((ssim_only.total - (1.0 - s) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn metric_map_is_positive_and_monotone(
        x in 0.0..=1.0f64, dx in 1e-6..0.5f64, s_raw in -30.0..30.0f64, t_raw in -30.0..30.0f64,
        g in 1e-3..1e3f64, ds in 1e-3..2.0f64, dg in 1e-3..2.0f64,
    ) {
        let p = ScaleShiftParams::with_raw(s_raw, t_raw, g, 1e-2).unwrap();
        let map = |x: f64, p: &ScaleShiftParams| {
            to_metric(&RelativeDepth::new(1, 1, vec![x]).unwrap(), p).unwrap().data()[0]
        };
        let d = map(x, &p);
        prop_assert!(d > 0.0);
        prop_assume!(x + dx <= 1.0);
        prop_assert!(map(x + dx, &p) > d);
        let p_s = ScaleShiftParams::with_raw(s_raw + ds, t_raw, g, 1e-2).unwrap();
        prop_assert!(softplus(p_s.s_raw) > softplus(p.s_raw));
        prop_assert!(map(x, &p_s) >= d);
        let p_g = ScaleShiftParams::with_raw(s_raw, t_raw, g + dg, 1e-2).unwrap();
        prop_assert!(map(x, &p_g) > d);
    }

    #[test]
    fn zero_gradient_updates_are_identity(s in -10.0..10.0f64, t in -10.0..10.0f64, lr in 1e-4..1.0f64, n in 1usize..50) {
        let p0 = ScaleShiftParams::with_raw(s, t, 2.0, lr).unwrap();
        let mut p = p0;
        for _ in 0..n {
            p = update_params(&p, 0.0, 0.0).unwrap();
        }
        prop_assert_eq!(p, p0);
        let q = update_params(&p0, 0.3, -0.7).unwrap();
        prop_assert_eq!(q.s_raw, s - lr * 0.3);
        prop_assert_eq!(q.t_raw, t + lr * 0.7);
    }

    #[test]
    fn metrics_invariant_to_joint_rescale(seed in any::<u64>(), k in 1e-3..1e3f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = DepthMap::from_fn(7, 5, |_, _| rng.random_range(1.0..50.0)).unwrap();
        let pred = gt.map_valid(|d| d * rng.random_range(0.6..1.6)).unwrap();
        let (gs, ps) = (gt.map_valid(|d| d * k).unwrap(), pred.map_valid(|d| d * k).unwrap());
        prop_assert!((abs_rel(&ps, &gs).unwrap() - abs_rel(&pred, &gt).unwrap()).abs() < 1e-12);
        prop_assert_eq!(delta1(&ps, &gs).unwrap(), delta1(&pred, &gt).unwrap());
    }

    #[test]
    fn delta1_non_increasing_in_error_factor(seed in any::<u64>(), f1 in 1.0..3.0f64, df in 0.0..2.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = DepthMap::from_fn(6, 6, |_, _| rng.random_range(1.0..20.0)).unwrap();
        let noise: Vec<f64> = (0..36).map(|_| rng.random_range(0.5..1.5)).collect();
        let pred = |f: f64| DepthMap::new(6, 6, gt.data().iter().zip(&noise).map(|(g, n)| g * f.powf(*n)).collect()).unwrap();
        prop_assert!(delta1(&pred(f1 + df), &gt).unwrap() <= delta1(&pred(f1), &gt).unwrap());
    }

    #[test]
    fn median_lies_within_members(seed in any::<u64>(), n in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let maps: Vec<DepthMap> = (0..n).map(|_| DepthMap::from_fn(5, 4, |_, _| rng.random_range(1.0..9.0)).unwrap()).collect();
        let refs: Vec<&DepthMap> = maps.iter().collect();
        let med = median_depth(&refs).unwrap();
        for k in 0..20 {
            let lo = maps.iter().map(|m| m.data()[k]).fold(f64::INFINITY, f64::min);
            let hi = maps.iter().map(|m| m.data()[k]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(med.data()[k] >= lo && med.data()[k] <= hi);
        }
        let same = vec![&maps[0]; n];
        let med_same = median_depth(&same).unwrap();
        prop_assert_eq!(med_same.data(), maps[0].data());
    }

    #[test]
    fn pfm_round_trip(seed in any::<u64>(), w in 1usize..20, h in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth = DepthMap::from_fn(w, h, |_, _| rng.random_range(0.01..500.0)).unwrap();
        let back = decode_pfm(&encode_pfm(&depth)).unwrap();
        for (a, b) in depth.data().iter().zip(back.data()) {
            prop_assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn calibration_round_trip(a in (-3.0..3.0f64, -1.5..1.5f64, -3.0..3.0f64), t in (-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64), f in 10.0..2000.0f64) {
        let k = Intrinsics::new(f, f * 1.01, 320.5, 240.25);
        let left = CameraView::at_origin(k).unwrap();
        let right = CameraView::new(k, rigid(a, t)).unwrap();
        let (l2, r2) = parse_calibration(&format_calibration(&left, &right)).unwrap();
        prop_assert!((r2.extrinsic() - right.extrinsic()).abs().max() < 1e-12);
        prop_assert_eq!(l2.intrinsics(), left.intrinsics());
    }

    #[test]
    fn config_round_trip(
        seed in any::<u64>(), lambda in 0.0..1e4f64, steps in 1usize..1000, ensemble in 1usize..64,
        eta in 0.0..=1.0f64, gamma in 0.0..1.0f64, lr in 1e-6..10.0f64, grid in 1usize..100,
        mode in prop_oneof![Just(Mode::Full), Just(Mode::ScaleShiftOnly), Just(Mode::ReprojectionOnly)],
        gs in proptest::option::of(0.1..100.0f64),
    ) {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.mode = mode;
        cfg.guidance.lambda = lambda;
        cfg.guidance.steps = steps;
        cfg.guidance.ensemble_size = ensemble;
        cfg.loss.eta = eta;
        cfg.loss.gamma = gamma;
        cfg.params.lr = lr;
        cfg.scale_search.grid_size = grid;
        cfg.scale_search.global_scale = gs;
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn scale_search_ignores_candidate_order(seed in 0u64..1000, shuffle in any::<u64>()) {
        let scene = common::small_scene(seed, 16);
        let mut grid = log_spaced(0.5, 100.0, 12);
        let a = global_scale_search(&scene.pair, &scene.gt_relative, &grid, &GeoLossConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle);
        for i in (1..grid.len()).rev() {
            grid.swap(i, rng.random_range(0..=i));
        }
        let b = global_scale_search(&scene.pair, &scene.gt_relative, &grid, &GeoLossConfig::default()).unwrap();
        prop_assert_eq!(a.best, b.best);
    }

    #[test]
    fn synthetic_depth_in_range(seed in any::<u64>(), layout in 0usize..4, texture in 0usize..3, d_min in 1.0..20.0f64, ratio in 1.2..3.0f64) {
        let spec = SceneSpec {
            layout: Layout::ALL[layout],
            texture: Texture::ALL[texture],
            d_min,
            d_max: d_min * ratio,
            width: 24,
            height: 20,
            seed,
            ..SceneSpec::default()
        };
        let s = generate_scene(&spec).unwrap();
        for d in s.gt_depth.data() {
            prop_assert!(*d >= d_min * (1.0 - 1e-12) && *d <= d_min * ratio * (1.0 + 1e-12));
        }
    }
}

#[test]
fn schedule_is_monotone_and_variance_preserving() {
    let s = NoiseSchedule::linear(&ScheduleConfig::default()).unwrap();
    assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 100_000;
    for t in [1, 100, 500, 1000] {
        let ab = s.alpha_bar(t);
        let z0 = Field::standard_normal(n, 1, &mut rng);
        let eps = Field::standard_normal(n, 1, &mut rng);
        let zt: Vec<f64> = z0.data().iter().zip(eps.data()).map(|(z, e)| ab.sqrt() * z + (1.0 - ab).sqrt() * e).collect();
        let mean = zt.iter().sum::<f64>() / n as f64;
        let var = zt.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((var - 1.0).abs() < 0.02, "t = {t}: variance {var}");
    }
}

/// For a Gaussian prior every DDIM step scales the deviation `z_t − √ᾱ_t μ` by
/// `(√(ᾱ_t ᾱ_p) σ₀² + √((1−ᾱ_t)(1−ᾱ_p))) / (ᾱ_t σ₀² + 1 − ᾱ_t)`, so the final latent is
/// `μ + κ (z_T − √ᾱ_T μ)` with κ the product of those factors.
#[test]
fn unguided_sampling_with_gaussian_prior_has_closed_form_endpoint() {
    let schedule = NoiseSchedule::linear(&ScheduleConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for &sigma0 in &[0.02, 0.1, 0.5, 1.0] {
        for &steps in &[10, 50, 200] {
            let mu = Field::new(6, 5, (0..30).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let z_t = Field::standard_normal(6, 5, &mut rng);
            let model = AnalyticGaussianDenoiser::new(mu.clone(), sigma0).unwrap();
            let out = ddim_unguided(&model, &schedule, steps, z_t.clone(), None).unwrap();
            let ts = schedule.ddim_timesteps(steps).unwrap();
            let v = sigma0 * sigma0;
            let mut kappa = 1.0;
            for w in ts.windows(2) {
                let (a, p) = (schedule.alpha_bar(w[0]), schedule.alpha_bar(w[1]));
                kappa *= ((a * p).sqrt() * v + ((1.0 - a) * (1.0 - p)).sqrt()) / (a * v + 1.0 - a);
            }
            let a_t = schedule.alpha_bar(ts[0]);
            assert!(kappa <= sigma0 / (a_t * v + 1.0 - a_t).sqrt() + 1e-15);
            for k in 0..30 {
                let want = mu.data()[k] + kappa * (z_t.data()[k] - a_t.sqrt() * mu.data()[k]);
                assert!((out.data()[k] - want).abs() < 1e-10, "σ₀ {sigma0} steps {steps}");
            }
        }
    }
}

#[test]
fn toy_prediction_is_a_pure_function() {
    let model = ToyDenoiser::new(ToyArchitecture::default(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let z = Field::standard_normal(16, 12, &mut ChaCha8Rng::seed_from_u64(5));
    let t = Timestep { index: 321, alpha_bar: 0.4 };
    let a = model.predict(&z, t, None).unwrap();
    let b = model.predict(&z, t, None).unwrap();
    assert_eq!(a, b);
}
