//! Acceptance criteria 1-10. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::path::Path;
use std::time::{Duration, Instant};

use hoikit::cli::{run_suite, Suite, GRADCHECK_TOLERANCE};
use hoikit::fit::{
    fit_joint_hoi, fit_object_track, held_out_frames, predict_frame, track_rmse, training_frames, JointFitOptions,
    ObjectFitOptions, PoseFitOptions,
};
use hoikit::geom::{estimate_scale, from_world, project_bbox_area, to_world, CameraPose, Intrinsics, UnitRotation, Vec3};
use hoikit::hoi::{distance_mask, mutual_attention, mutual_attention_with_weights, HoiModule};
use hoikit::metrics::{cd_best, chamfer, dssim, l1_image, psnr, total_loss, Image, LossParts, LossWeights};
use hoikit::nn::Tensor;
use hoikit::spline::{chs_derivative, chs_eval, hermite_basis, ChsTrack, TimeGrid};
use hoikit::synth::{generate_scene, SynthConfig, Template};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rand_vec(rng: &mut ChaCha8Rng, r: f64) -> Vec3 {
    Vec3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r))
}

fn random_track(grid: &TimeGrid, rng: &mut ChaCha8Rng) -> ChsTrack {
    let n = grid.n_keys();
    ChsTrack {
        positions: (0..n).map(|_| rand_vec(rng, 1.0)).collect(),
        velocities: (0..n).map(|_| rand_vec(rng, 0.3)).collect(),
        ..ChsTrack::stationary(n, Vec3::zeros())
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> UnitRotation {
    let axis = rand_vec(rng, 1.0).normalize();
    UnitRotation::from_axis_angle(axis, rng.random_range(-3.0..3.0))
}

fn c1_hermite() -> Outcome {
    let grid = TimeGrid::with_stride(33, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let exact_basis = hermite_basis(0.0) == [1.0, 0.0, 0.0, 0.0] && hermite_basis(1.0) == [0.0, 0.0, 1.0, 0.0];
    let mut key_err: f64 = 0.0;
    let mut c0: f64 = 0.0;
    let mut c1: f64 = 0.0;
    let delta = 1e-12;
    for _ in 0..100 {
        let tr = random_track(&grid, &mut rng);
        for k in 0..grid.n_keys() {
            let t = grid.key_frame(k);
            key_err = key_err.max((chs_eval(&tr, t, &grid).unwrap() - tr.positions[k]).amax());
            if k > 0 && k + 1 < grid.n_keys() {
                let l = chs_eval(&tr, t - delta, &grid).unwrap();
                let r = chs_eval(&tr, t + delta, &grid).unwrap();
                c0 = c0.max((l - r).amax());
                let dl = chs_derivative(&tr, t - delta, &grid).unwrap();
                let dr = chs_derivative(&tr, t + delta, &grid).unwrap();
                c1 = c1.max((dl - dr).amax());
            }
        }
    }
    outcome(
        exact_basis && key_err <= 4.0 * f64::EPSILON && c0 < 1e-9 && c1 < 1e-9,
        format!("exact basis at t_r in {{0,1}}: {exact_basis}, keyframe error {key_err:.1e}, C0 jump {c0:.1e}, C1 jump {c1:.1e}"),
    )
}

fn c2_gradients() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for s in [Suite::Chs, Suite::Lbs, Suite::Hexplane, Suite::Hoi] {
        let e = run_suite(s).unwrap();
        worst = worst.max(e);
        parts.push(format!("{}={e:.1e}", hoikit::cli::suite_name(s)));
    }
    outcome(worst < GRADCHECK_TOLERANCE, format!("max relative error {}", parts.join(", ")))
}

fn c3_scale() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let intr = Intrinsics {
        fx: 200.0,
        fy: 200.0,
        cx: 64.0,
        cy: 64.0,
    };
    let mut scale_err: f64 = 0.0;
    let mut trip_err: f64 = 0.0;
    for _ in 0..10 {
        let planted = rng.random_range(0.2..3.0);
        // Canonical means on the plane z = 0 so the projected box scales
        // exactly with the object scale.
        let means: Vec<Vec3> = (0..40)
            .map(|_| Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), 0.0))
            .collect();
        let cams: Vec<CameraPose> = (0..6)
            .map(|_| {
                let shift = Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(3.0..6.0));
                CameraPose::new(random_rotation(&mut rng).to_matrix(), rand_vec(&mut rng, 2.0), intr, shift).unwrap()
            })
            .collect();
        let masks: Vec<_> = cams
            .iter()
            .map(|c| {
                let placed: Vec<Vec3> = means.iter().map(|m| to_world(m, planted, c)).collect();
                project_bbox_area(&placed, c).unwrap().0
            })
            .collect();
        let s = estimate_scale(&means, &masks, &cams).unwrap();
        scale_err = scale_err.max((s - planted).abs());
        for c in &cams {
            for _ in 0..20 {
                let p = rand_vec(&mut rng, 2.0);
                trip_err = trip_err.max((from_world(&to_world(&p, planted, c), planted, c) - p).amax());
                trip_err = trip_err.max((to_world(&from_world(&p, planted, c), planted, c) - p).amax());
            }
        }
    }
    outcome(
        scale_err < 1e-6 && trip_err < 1e-9,
        format!("scale error {scale_err:.1e} over 10 camera sets, round trip {trip_err:.1e}"),
    )
}

fn attention_inputs(n: usize, seed: u64) -> (HoiModule, Tensor, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let module = HoiModule::new(96, 16, 18, 0.53, seed);
    let fh = Tensor::from_fn(16, 96, |_, _| rng.random_range(-0.5..0.5));
    let fo = Tensor::from_fn(n, 32, |_, _| rng.random_range(-0.5..0.5));
    let pelvis = Vec3::new(0.0, 0.9, 0.0);
    let centers: Vec<Vec3> = (0..n).map(|_| pelvis + rand_vec(&mut rng, 0.6)).collect();
    let bias = distance_mask(&centers, &pelvis, 0.53, 16);
    (module, fh, fo, bias)
}

fn time_attention(n: usize) -> Duration {
    let (module, fh, fo, bias) = attention_inputs(n, 40);
    let reps = 20;
    (0..15)
        .map(|_| {
            let start = Instant::now();
            for _ in 0..reps {
                std::hint::black_box(mutual_attention(&fh, &fo, &bias, &module).unwrap());
            }
            start.elapsed() / reps
        })
        .min()
        .unwrap()
}

fn c4_attention() -> Outcome {
    let (module, fh, fo, bias) = attention_inputs(200, 4);
    let (_, oo, ah, ao) = mutual_attention_with_weights(&fh, &fo, &bias, &module).unwrap();
    let mut sum_err: f64 = 0.0;
    let mut masked_ok = true;
    let mut masked_cols = 0;
    for j in 0..200 {
        let masked = bias.get(0, j) == f64::NEG_INFINITY;
        if masked {
            masked_cols += 1;
            masked_ok &= (0..16).all(|i| ah.get(i, j) == 0.0);
            masked_ok &= ao.row_slice(j).iter().all(|v| *v == 0.0);
            masked_ok &= oo.row_slice(j).iter().all(|v| *v == 0.0);
        } else {
            sum_err = sum_err.max((ao.row_slice(j).iter().sum::<f64>() - 1.0).abs());
        }
    }
    for i in 0..16 {
        sum_err = sum_err.max((ah.row_slice(i).iter().sum::<f64>() - 1.0).abs());
    }
    let all_masked = Tensor::filled(16, 200, f64::NEG_INFINITY);
    let (zh, zo) = mutual_attention(&fh, &fo, &all_masked, &module).unwrap();
    let zero_rows = zh.data().iter().chain(zo.data()).all(|v| *v == 0.0);

    let times: Vec<Duration> = [256, 512, 1024].iter().map(|&n| time_attention(n)).collect();
    let r1 = times[1].as_secs_f64() / times[0].as_secs_f64();
    let r2 = times[2].as_secs_f64() / times[1].as_secs_f64();
    outcome(
        sum_err < 1e-9 && masked_ok && masked_cols > 0 && zero_rows && r1 <= 2.5 && r2 <= 2.5,
        format!(
            "row sums within {sum_err:.1e}, {masked_cols} masked columns zero: {masked_ok}, fully masked rows zero: {zero_rows}, \
             time ratios N 256->512 {r1:.2}, 512->1024 {r2:.2}"
        ),
    )
}

fn exhaustive_chamfer(o: &[Vec3], h: &[Vec3]) -> f64 {
    let directed = |a: &[Vec3], b: &[Vec3]| {
        let mut s = 0.0;
        for p in a {
            let mut best = f64::INFINITY;
            for q in b {
                let d = (p - q).norm_squared();
                if d < best {
                    best = d;
                }
            }
            s += best;
        }
        s / a.len() as f64
    };
    0.5 * (directed(o, h) + directed(h, o))
}

fn c5_chamfer() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut bitwise = true;
    let mut best_ok = true;
    let mut invariance: f64 = 0.0;
    for _ in 0..100 {
        let a: Vec<Vec3> = (0..50).map(|_| rand_vec(&mut rng, 1.0)).collect();
        let b: Vec<Vec3> = (0..50).map(|_| rand_vec(&mut rng, 1.0)).collect();
        let c: Vec<Vec3> = (0..50).map(|_| rand_vec(&mut rng, 1.0)).collect();
        let ab = chamfer(&a, &b).unwrap();
        bitwise &= ab.to_bits() == exhaustive_chamfer(&a, &b).to_bits();
        let ac = chamfer(&a, &c).unwrap();
        best_ok &= cd_best(&a, &b, &c).unwrap() == ab.min(ac);
        let r = random_rotation(&mut rng);
        let t = rand_vec(&mut rng, 3.0);
        let tf = |p: &Vec3| r.rotate(p) + t;
        let ta: Vec<Vec3> = a.iter().map(tf).collect();
        let tb: Vec<Vec3> = b.iter().map(tf).collect();
        invariance = invariance.max((chamfer(&ta, &tb).unwrap() - ab).abs());
    }
    outcome(
        bitwise && best_ok && invariance < 1e-9,
        format!("bitwise equal to scan: {bitwise}, CD^best = min branch: {best_ok}, rigid invariance {invariance:.1e}"),
    )
}

fn c6_trajectory() -> Outcome {
    let grid = TimeGrid::with_stride(33, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let tracks: Vec<ChsTrack> = (0..20).map(|_| random_track(&grid, &mut rng)).collect();
    let obs: Vec<Vec<Vec3>> = (0..33)
        .map(|f| tracks.iter().map(|tr| chs_eval(tr, f as f64, &grid).unwrap()).collect())
        .collect();
    let fit = fit_object_track(&obs, &grid, &ObjectFitOptions::default()).unwrap();
    let all: Vec<usize> = (0..33).collect();
    let clean = track_rmse(&fit.tracks, &grid, &obs, &all).unwrap();

    let sigma = 0.01;
    let held: Vec<(f64, f64)> = (0..10u64)
        .into_par_iter()
        .map(|seed| {
            let scene = generate_scene(
                &SynthConfig {
                    noise: sigma,
                    ..Default::default()
                },
                seed,
            )
            .unwrap();
            let n = scene.n_frames();
            let opts = ObjectFitOptions {
                train_frames: Some(training_frames(n)),
                ..Default::default()
            };
            let fit = fit_object_track(&scene.observations.object, &scene.grid, &opts).unwrap();
            let held = held_out_frames(n);
            let gt: Vec<Vec<Vec3>> = (0..n).map(|f| scene.gt_object_points(f)).collect();
            (
                track_rmse(&fit.tracks, &scene.grid, &scene.observations.object, &held).unwrap(),
                track_rmse(&fit.tracks, &scene.grid, &gt, &held).unwrap(),
            )
        })
        .collect();
    let worst_obs = held.iter().map(|h| h.0).fold(0.0, f64::max);
    let worst_gt = held.iter().map(|h| h.1).fold(0.0, f64::max);
    outcome(
        clean < 1e-3 && worst_obs <= 3.0 * sigma,
        format!(
            "noiseless RMSE {clean:.1e}; sigma 0.01 held-out RMSE worst {worst_obs:.4} vs observations, {worst_gt:.4} vs truth (bound {:.2})",
            3.0 * sigma
        ),
    )
}

fn c7_hoi_benefit() -> Outcome {
    let pairs: Vec<(f64, f64)> = (0..10u64)
        .into_par_iter()
        .map(|seed| {
            let scene = generate_scene(&SynthConfig::with_template(Template::Carry), seed).unwrap();
            let fit = fit_joint_hoi(
                &scene,
                &JointFitOptions {
                    seed,
                    ..Default::default()
                },
            )
            .unwrap();
            let hoi = fit.report.hoi.unwrap();
            (fit.report.baseline.contact_cd_best, hoi.contact_cd_best)
        })
        .collect();
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        0.5 * (v[4] + v[5])
    };
    let base = median(pairs.iter().map(|p| p.0).collect());
    let hoi = median(pairs.iter().map(|p| p.1).collect());
    let wins = pairs.iter().filter(|p| p.1 < p.0).count();
    outcome(
        hoi <= base && wins >= 7,
        format!("median contact CD^best baseline {base:.3e} -> hoi {hoi:.3e}, strictly lower in {wins}/10 seeds"),
    )
}

fn c8_residual_identity() -> Outcome {
    let results: Vec<bool> = (0..5u64)
        .into_par_iter()
        .map(|seed| {
            let template = [Template::Carry, Template::Place, Template::Swing][seed as usize % 3];
            let scene = generate_scene(&SynthConfig::with_template(template), 100 + seed).unwrap();
            let opts = JointFitOptions {
                pose: PoseFitOptions {
                    iters: 100,
                    ..Default::default()
                },
                object: ObjectFitOptions {
                    iters: 100,
                    ..Default::default()
                },
                hoi_iters: 10,
                train_heads: false,
                seed,
                ..Default::default()
            };
            let fit = fit_joint_hoi(&scene, &opts).unwrap();
            let model = fit.model.as_ref().unwrap();
            (0..scene.n_frames()).all(|f| {
                let out = predict_frame(&scene, &fit.baseline, model, f).unwrap();
                out.human_points == fit.baseline.human_points(&scene, f).unwrap()
                    && out.object_points == fit.baseline.object_points(&scene, f).unwrap()
            }) && fit.report.hoi.as_ref() == Some(&fit.report.baseline)
        })
        .collect();
    let n = results.iter().filter(|b| **b).count();
    outcome(n == 5, format!("{n}/5 scenes bit-identical to the spline + skinning baseline"))
}

fn run_cli(args: &[&str]) -> i32 {
    std::process::Command::new(env!("CARGO_BIN_EXE_hoikit"))
        .args(args)
        .output()
        .map(|o| o.status.code().unwrap_or(-1))
        .unwrap_or(-1)
}

fn run_all_commands(dir: &Path) -> bool {
    let p = |name: &str| dir.join(name).display().to_string();
    let scene = p("scene.json");
    let run = p("run");
    [
        run_cli(&["synth", "--template", "carry", "--seed", "9", "--out", &scene]),
        run_cli(&["fit-object", "--scene", &scene, "--iters", "300", "--out", &p("track.json"), "--trace", &p("object_trace.csv")]),
        run_cli(&["fit-joint", "--scene", &scene, "--out", &run, "--hoi-iters", "10"]),
        run_cli(&["eval", "--scene", &scene, "--run", &run, "--csv", &p("metrics.csv")]),
        run_cli(&["render", "--scene", &scene, "--run", &run, "--frame", "12", "--out", &p("frame.ppm"), "--depth", &p("depth.pgm")]),
        run_cli(&["gradcheck", "--suite", "chs"]),
    ]
    .iter()
    .all(|c| *c == 0)
}

fn c9_determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    if !(run_all_commands(a.path()) && run_all_commands(b.path())) {
        return outcome(false, "a command exited non-zero".into());
    }
    let files = [
        "scene.json",
        "track.json",
        "object_trace.csv",
        "run/config.json",
        "run/checkpoint.json",
        "run/report.json",
        "run/trace.csv",
        "metrics.csv",
        "frame.ppm",
        "depth.pgm",
    ];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| {
            let x = std::fs::read(a.path().join(f)).unwrap_or_default();
            let y = std::fs::read(b.path().join(f)).unwrap_or_default();
            x.is_empty() || x != y
        })
        .collect();
    // config.json records the scene path, which differs between the two
    // directories; compare it with the path removed.
    let strip = |d: &Path| {
        let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("run/config.json")).unwrap()).unwrap();
        v["scene"] = serde_json::Value::Null;
        v
    };
    let differing: Vec<&str> = differing
        .into_iter()
        .filter(|f| *f != "run/config.json" || strip(a.path()) != strip(b.path()))
        .collect();
    outcome(
        differing.is_empty(),
        format!("{} artifacts byte-identical across reruns; differing: {differing:?}", files.len() - differing.len()),
    )
}

fn c10_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let data: Vec<f64> = (0..32 * 32 * 3).map(|_| rng.random_range(0.0..0.9)).collect();
    let a = Image::from_data(32, 32, 3, data.clone()).unwrap();
    let b = Image::from_data(32, 32, 3, data.iter().map(|v| v + 0.1).collect()).unwrap();
    let d0 = dssim(&a, &a).unwrap();
    let l0 = l1_image(&a, &a).unwrap();
    let p = psnr(&a, &b).unwrap();
    let unit = LossParts {
        human: 1.0,
        object: 1.0,
        scene: 1.0,
        depth: 1.0,
    };
    let total = total_loss(&unit, &LossWeights::default()).unwrap();
    outcome(
        d0 == 0.0 && l0 == 0.0 && (p - 20.0).abs() < 1e-9 && total == 2.75,
        format!("dssim(a,a) {d0}, l1(a,a) {l0}, psnr at 0.1 error {p:.12} dB, total loss {total}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Option<Duration>); 10] = [
        ("hermite correctness", c1_hermite, Some(Duration::from_secs(1))),
        ("gradient suite", c2_gradients, Some(Duration::from_secs(30))),
        ("scale and world alignment", c3_scale, Some(Duration::from_secs(1))),
        ("attention contracts", c4_attention, None),
        ("chamfer oracle", c5_chamfer, None),
        ("trajectory recovery", c6_trajectory, Some(Duration::from_secs(120))),
        ("hoi benefit", c7_hoi_benefit, Some(Duration::from_secs(600))),
        ("residual identity", c8_residual_identity, Some(Duration::from_secs(30))),
        ("determinism", c9_determinism, None),
        ("metric sanity", c10_metrics, None),
    ];
    let mut failed = 0;
    for (i, (name, f, limit)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let mut o = f();
        let elapsed = start.elapsed();
        if let Some(l) = limit {
            if elapsed > *l {
                o.pass = false;
                o.detail.push_str(&format!("; over the {:.0} s limit", l.as_secs_f64()));
            }
        }
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} criterion {:>2} {name}: {} ({:.2} s)",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail,
            elapsed.as_secs_f64()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
