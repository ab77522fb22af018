//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 data
//! error, 3 diverged fit or failed gradient check.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::fit::{
    final_points, fit_joint_hoi, fit_object_track, track_rmse, write_trace_csv, Baseline, FitError, HoiModel,
    JointFitOptions, ObjectFitOptions, TraceRow,
};
use crate::geom::Vec3;
use crate::hexplane::{part_features_tape, HexPlaneGrid};
use crate::hoi::{HoiModule, ValueSource, ATTENTION_DIM, OBJECT_FEATURE_DIM};
use crate::metrics::{cd_best, chamfer, dssim, l1_image, psnr, write_metrics_csv, MetricsRow};
use crate::nn::{grad_check_with, Coverage, Mlp, NnError, Tape, Tensor, Var};
use crate::render::{render_splats, write_depth_pgm, write_ppm, Splat};
use crate::skeleton::{lbs_tape, Skeleton};
use crate::spline::{basis_matrices, TimeGrid, TrackFile};
use crate::synth::{generate_scene, SynthConfig, SyntheticScene, Template};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const SPLAT_RADIUS: f64 = 0.02;
const SPLAT_OPACITY: f64 = 0.9;
const OBJECT_COLOR: [f64; 3] = [0.95, 0.55, 0.1];

#[derive(Parser, Debug)]
#[command(name = "hoikit", version, about = "Spline object motion, skinned avatars and interaction refinement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic scene.
    Synth {
        #[arg(long, value_enum, default_value = "carry")]
        template: Template,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        noise: f64,
        #[arg(long, default_value_t = 33)]
        frames: usize,
    },
    /// Fit spline tracks to the observed object points.
    FitObject {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 2000)]
        iters: usize,
        #[arg(long, default_value_t = 1e-2)]
        lr: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Fit baselines, then train the interaction module.
    FitJoint {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_hoi: bool,
        #[arg(long)]
        conventional_values: bool,
        #[arg(long)]
        hoi_iters: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-frame image and geometry metrics of a fitted run.
    Eval {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Render one frame of a fitted run.
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        out: PathBuf,
        /// Optional 16-bit depth PGM.
        #[arg(long)]
        depth: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long, value_enum, default_value = "all")]
        suite: Suite,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    All,
    Chs,
    Lbs,
    Hexplane,
    Hoi,
}

#[derive(Debug)]
pub enum CliError {
    Data(String),
    Diverged(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Data(_) => EXIT_DATA,
            CliError::Diverged(_) => EXIT_DIVERGED,
        }
    }
}

impl From<FitError> for CliError {
    fn from(e: FitError) -> Self {
        match e {
            FitError::DivergedLoss { .. } => CliError::Diverged(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

fn data<E: std::fmt::Display>(what: &str) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::Data(format!("{what}: {e}"))
}

/// Run configuration echoed into every run directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub scene: String,
    pub options: JointFitOptions,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub baseline: Baseline,
    pub model: Option<HoiModel>,
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            match &e {
                CliError::Data(m) => eprintln!("error: {m}"),
                CliError::Diverged(m) => eprintln!("diverged: {m}"),
            }
            e.code()
        }
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var("HOIKIT_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // Fails harmlessly when a pool already exists (repeated in-process runs).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(data(&path.display().to_string()))?;
    serde_json::from_str(&text).map_err(data(&path.display().to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(data("serialise"))?;
    s.push('\n');
    fs::write(path, s).map_err(data(&path.display().to_string()))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, CliError> {
    Ok(BufWriter::new(
        fs::File::create(path).map_err(data(&path.display().to_string()))?,
    ))
}

fn load_scene(path: &Path) -> Result<SyntheticScene, CliError> {
    let scene: SyntheticScene = read_json(path)?;
    scene.rig.validate(&scene.skeleton).map_err(data("scene rig"))?;
    let n = scene.n_frames();
    if scene.gt_poses.len() != n
        || scene.gt_object.len() != n
        || scene.cameras.len() != n
        || scene.contacts.len() != n
        || scene.observations.human.len() != n
        || scene.observations.object.len() != n
    {
        return Err(CliError::Data(format!("scene has inconsistent per-frame arrays for {n} frames")));
    }
    Ok(scene)
}

fn execute(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Synth {
            template,
            seed,
            out,
            noise,
            frames,
        } => {
            let config = SynthConfig {
                template,
                noise,
                n_frames: frames,
                ..Default::default()
            };
            let scene = generate_scene(&config, seed).map_err(data("synth"))?;
            write_json(&out, &scene)
        }
        Command::FitObject {
            scene,
            iters,
            lr,
            out,
            trace,
        } => {
            let scene = load_scene(&scene)?;
            let opts = ObjectFitOptions {
                iters,
                lr,
                ..Default::default()
            };
            let fit = fit_object_track(&scene.observations.object, &scene.grid, &opts)?;
            let gt: Vec<Vec<Vec3>> = (0..scene.n_frames()).map(|f| scene.gt_object_points(f)).collect();
            let all: Vec<usize> = (0..scene.n_frames()).collect();
            let rmse = track_rmse(&fit.tracks, &scene.grid, &gt, &all)?;
            println!("object rmse vs ground truth: {rmse:.6e}");
            write_json(
                &out,
                &TrackFile {
                    grid: scene.grid,
                    tracks: fit.tracks,
                },
            )?;
            if let Some(p) = trace {
                write_trace(&p, &fit.trace)?;
            }
            Ok(())
        }
        Command::FitJoint {
            scene: scene_path,
            out,
            no_hoi,
            conventional_values,
            hoi_iters,
            seed,
        } => {
            let scene = load_scene(&scene_path)?;
            let defaults = JointFitOptions::default();
            let options = JointFitOptions {
                no_hoi,
                values: if conventional_values {
                    ValueSource::Conventional
                } else {
                    ValueSource::OwnEntity
                },
                hoi_iters: hoi_iters.unwrap_or(defaults.hoi_iters),
                seed,
                ..defaults
            };
            fs::create_dir_all(&out).map_err(data(&out.display().to_string()))?;
            write_json(
                &out.join("config.json"),
                &RunConfig {
                    scene: scene_path.display().to_string(),
                    options: options.clone(),
                },
            )?;
            let fit = fit_joint_hoi(&scene, &options)?;
            write_trace(&out.join("trace.csv"), &fit.trace)?;
            write_json(
                &out.join("checkpoint.json"),
                &Checkpoint {
                    baseline: fit.baseline.clone(),
                    model: fit.model.clone(),
                },
            )?;
            let mut report = serde_json::to_value(&fit.report).map_err(data("serialise"))?;
            report["trace"] = "trace.csv".into();
            report["checkpoint"] = "checkpoint.json".into();
            write_json(&out.join("report.json"), &report)?;
            let b = &fit.report.baseline;
            println!("baseline contact CD^best {:.6e}", b.contact_cd_best);
            if let Some(h) = &fit.report.hoi {
                println!("hoi      contact CD^best {:.6e}", h.contact_cd_best);
            }
            Ok(())
        }
        Command::Eval { scene, run, csv } => {
            let scene = load_scene(&scene)?;
            let ck: Checkpoint = read_json(&run.join("checkpoint.json"))?;
            let mut rows = eval_rows(&scene, &ck.baseline, None, "baseline")?;
            if let Some(m) = &ck.model {
                rows.extend(eval_rows(&scene, &ck.baseline, Some(m), "hoi")?);
            }
            let w = create(&csv)?;
            write_metrics_csv(w, &rows).map_err(data(&csv.display().to_string()))
        }
        Command::Render {
            scene,
            run,
            frame,
            out,
            depth,
        } => {
            let scene = load_scene(&scene)?;
            if frame >= scene.n_frames() {
                return Err(CliError::Data(format!("frame {frame} outside 0..{}", scene.n_frames())));
            }
            let ck: Checkpoint = read_json(&run.join("checkpoint.json"))?;
            let (human, object) = final_points(&scene, &ck.baseline, ck.model.as_ref(), frame)?;
            let [w, h] = scene.image_size;
            let (rgb, d) = render_splats(&splats(&scene, &human, &object), &scene.cameras[frame], w, h);
            let mut f = create(&out)?;
            write_ppm(&mut f, &rgb).map_err(data(&out.display().to_string()))?;
            f.flush().map_err(data(&out.display().to_string()))?;
            if let Some(p) = depth {
                let mut f = create(&p)?;
                write_depth_pgm(&mut f, &d).map_err(data(&p.display().to_string()))?;
                f.flush().map_err(data(&p.display().to_string()))?;
            }
            Ok(())
        }
        Command::Gradcheck { suite } => {
            let suites: Vec<Suite> = match suite {
                Suite::All => vec![Suite::Chs, Suite::Lbs, Suite::Hexplane, Suite::Hoi],
                s => vec![s],
            };
            let mut ok = true;
            for s in suites {
                let err = run_suite(s).map_err(data("gradcheck"))?;
                let pass = err < GRADCHECK_TOLERANCE;
                ok &= pass;
                println!("{:<9} max_rel_err={err:.3e} {}", suite_name(s), if pass { "ok" } else { "FAIL" });
            }
            if ok {
                Ok(())
            } else {
                Err(CliError::Diverged("gradient check above tolerance".into()))
            }
        }
    }
}

fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<(), CliError> {
    let w = create(path)?;
    write_trace_csv(w, trace).map_err(data(&path.display().to_string()))
}

/// Splats for avatar points (rig colours) and object points.
pub fn splats(scene: &SyntheticScene, human: &[Vec3], object: &[Vec3]) -> Vec<Splat> {
    let mut out: Vec<Splat> = human
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let c = scene.rig.colors.get(i).copied().unwrap_or(Vec3::repeat(0.7));
            Splat::isotropic(i as u64, *p, SPLAT_RADIUS, SPLAT_OPACITY, [c.x, c.y, c.z])
        })
        .collect();
    let base = human.len() as u64;
    out.extend(
        object
            .iter()
            .enumerate()
            .map(|(i, p)| Splat::isotropic(base + i as u64, *p, SPLAT_RADIUS, SPLAT_OPACITY, OBJECT_COLOR)),
    );
    out
}

/// One row per frame comparing renders and geometry with ground truth.
pub fn eval_rows(
    scene: &SyntheticScene,
    baseline: &Baseline,
    model: Option<&HoiModel>,
    phase: &str,
) -> Result<Vec<MetricsRow>, CliError> {
    let (left, right) = scene.hand_indices().map_err(data("hands"))?;
    let [w, h] = scene.image_size;
    (0..scene.n_frames())
        .map(|f| {
            let (human, object) = final_points(scene, baseline, model, f)?;
            let gt_h = scene.gt_human_points(f).map_err(data("ground truth"))?;
            let gt_o = scene.gt_object_points(f);
            let cam = &scene.cameras[f];
            let (img, _) = render_splats(&splats(scene, &human, &object), cam, w, h);
            let (gt, _) = render_splats(&splats(scene, &gt_h, &gt_o), cam, w, h);
            let hl: Vec<Vec3> = left.iter().map(|&i| human[i]).collect();
            let hr: Vec<Vec3> = right.iter().map(|&i| human[i]).collect();
            let m = |e| CliError::Data(format!("metrics: {e}"));
            Ok(MetricsRow {
                scene_id: scene.id.clone(),
                frame: f,
                phase: phase.to_string(),
                psnr: psnr(&gt, &img).map_err(m)?,
                dssim: dssim(&gt, &img).map_err(m)?,
                l1: l1_image(&gt, &img).map_err(m)?,
                chamfer: chamfer(&object, &gt_o).map_err(m)?,
                cd_best: cd_best(&object, &hl, &hr).map_err(m)?,
            })
        })
        .collect()
}

pub fn suite_name(s: Suite) -> &'static str {
    match s {
        Suite::All => "all",
        Suite::Chs => "chs",
        Suite::Lbs => "lbs",
        Suite::Hexplane => "hexplane",
        Suite::Hoi => "hoi",
    }
}

fn random_tensor(rows: usize, cols: usize, scale: f64, seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-scale..=scale))
}

fn sum_sq(tape: &mut Tape, a: Var, target: &Tensor) -> Result<Var, NnError> {
    let t = tape.constant(target.clone());
    let d = tape.sub(a, t)?;
    let s = tape.square(d);
    Ok(tape.sum(s))
}

/// Maximum relative gradient error of one suite.
pub fn run_suite(suite: Suite) -> Result<f64, NnError> {
    let sampled = Coverage::Sampled {
        per_tensor: 24,
        seed: 5,
    };
    match suite {
        Suite::All => {
            let mut worst: f64 = 0.0;
            for s in [Suite::Chs, Suite::Lbs, Suite::Hexplane, Suite::Hoi] {
                worst = worst.max(run_suite(s)?);
            }
            Ok(worst)
        }
        Suite::Chs => {
            let grid = TimeGrid::with_stride(33, 4).map_err(|_| NnError::NonFiniteValue("grid"))?;
            let times: Vec<f64> = (0..33).map(|f| f as f64 * 0.97 + 0.3).filter(|t| *t <= 32.0).collect();
            let (hm, ht) = basis_matrices(&grid, &times).map_err(|_| NnError::NonFiniteValue("basis"))?;
            let target = random_tensor(times.len(), 6, 1.0, 1);
            grad_check_with(
                |tape, v| {
                    let a = tape.constant(hm.clone());
                    let b = tape.constant(ht.clone());
                    let p = tape.matmul(a, v[0])?;
                    let q = tape.matmul(b, v[1])?;
                    let s = tape.add(p, q)?;
                    sum_sq(tape, s, &target)
                },
                &[random_tensor(9, 6, 1.0, 2), random_tensor(9, 6, 0.3, 3)],
                1e-6,
                Coverage::All,
            )
        }
        Suite::Lbs => {
            let skel = Skeleton::upper_body();
            let rest = skel.rest_positions().map_err(|_| NnError::NonFiniteValue("rest"))?;
            let canon = Tensor::from_fn(20, 3, |i, c| rest[i % 7][c] + 0.03 * ((i * 3 + c) as f64).sin());
            let weights = Tensor::from_fn(20, 7, |i, j| {
                if j == i % 7 {
                    0.7
                } else if j == (i + 1) % 7 {
                    0.3
                } else {
                    0.0
                }
            });
            let target = random_tensor(20, 3, 1.0, 4);
            grad_check_with(
                |tape, v| {
                    let c = tape.constant(canon.clone());
                    let pts = tape.add(c, v[2])?;
                    let (p, _) = lbs_tape(tape, &skel, &rest, pts, &weights, v[0], v[1])
                        .map_err(|_| NnError::NonFiniteValue("lbs"))?;
                    sum_sq(tape, p, &target)
                },
                &[random_tensor(7, 3, 0.8, 5), Tensor::scalar(1.1), random_tensor(20, 3, 0.02, 6)],
                1e-6,
                Coverage::All,
            )
        }
        Suite::Hexplane => {
            let pts: Vec<Vec3> = (0..40)
                .map(|i| Vec3::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos(), (i as f64 * 0.23).sin()))
                .collect();
            let grid = HexPlaneGrid::for_points(&pts, 8, 4, 7);
            let parts = crate::hexplane::PartPartition::contiguous(&(0..40).collect::<Vec<_>>(), 8)
                .map_err(|_| NnError::NonFiniteValue("partition"))?;
            let maps = crate::hexplane::part_feature_maps(&grid, &pts, &parts, 0.4)
                .map_err(|_| NnError::NonFiniteValue("maps"))?;
            let target = random_tensor(8, 24, 0.5, 8);
            grad_check_with(
                |tape, v| {
                    let f = part_features_tape(tape, v, &maps).map_err(|_| NnError::NonFiniteValue("hexplane"))?;
                    sum_sq(tape, f, &target)
                },
                &grid.planes,
                1e-6,
                sampled,
            )
        }
        Suite::Hoi => hoi_suite(sampled),
    }
}

/// Attention, residual heads, skinning with `θ + Δθ` and a hand-object
/// Chamfer loss, differentiated w.r.t. every projection and head weight.
fn hoi_suite(coverage: Coverage) -> Result<f64, NnError> {
    let skel = Skeleton::upper_body();
    let rest = skel.rest_positions().map_err(|_| NnError::NonFiniteValue("rest"))?;
    let n_obj = 14;
    let mut module = HoiModule::new(96, 16, 3 * skel.partition.len(), 0.53, 9);
    module.mlp_hum = Mlp::new(&[16 * ATTENTION_DIM, 16, 3 * skel.partition.len()], 10);
    module.mlp_obj = Mlp::new(&[ATTENTION_DIM, 16, 3], 11);
    for t in module.mlp_hum.tensors_mut().into_iter().chain(module.mlp_obj.tensors_mut()) {
        t.scale_assign(0.3);
    }
    let fh = random_tensor(16, 96, 1.0, 12);
    let fo = random_tensor(n_obj, OBJECT_FEATURE_DIM, 1.0, 13);
    let mut bias = Tensor::zeros(16, n_obj);
    for i in 0..16 {
        bias.set(i, 3, f64::NEG_INFINITY);
    }
    let hand = skel.joint_index("right_hand").map_err(|_| NnError::NonFiniteValue("hand"))?;
    let canon = Tensor::from_fn(12, 3, |i, c| rest[hand][c] + 0.04 * ((i * 5 + c) as f64).cos());
    let weights = Tensor::from_fn(12, 7, |_, j| if j == hand { 0.8 } else if j == hand - 1 { 0.2 } else { 0.0 });
    let base_theta = random_tensor(7, 3, 0.3, 14);
    let obj = Tensor::from_fn(n_obj, 3, |i, c| rest[hand][c] + 0.05 * ((i * 7 + c) as f64).sin());
    let joints = skel.partition.joints();
    let params: Vec<Tensor> = module.tensors().into_iter().cloned().collect();
    let nh = module.mlp_hum.tensors().len();
    grad_check_with(
        |tape, v| {
            let vars = crate::hoi::HoiVars {
                proj: std::array::from_fn(|i| v[i]),
                hum: v[6..6 + nh].to_vec(),
                obj: v[6 + nh..].to_vec(),
            };
            let h = tape.constant(fh.clone());
            let o = tape.constant(fo.clone());
            let to_nn = |_| NnError::NonFiniteValue("hoi");
            let a = module.attend_tape(tape, &vars, h, o, &bias).map_err(to_nn)?;
            let (dt, dg) = module.residuals_tape(tape, &vars, a.human, a.object).map_err(to_nn)?;
            let dt = tape.reshape(dt, joints.len(), 3)?;
            let dt = tape.scatter_rows(dt, &joints, 7)?;
            let bt = tape.constant(base_theta.clone());
            let theta = tape.add(bt, dt)?;
            let pts = tape.constant(canon.clone());
            let alpha = tape.constant(Tensor::scalar(1.0));
            let (posed, _) = lbs_tape(tape, &skel, &rest, pts, &weights, theta, alpha)
                .map_err(|_| NnError::NonFiniteValue("lbs"))?;
            let ob = tape.constant(obj.clone());
            let ob = tape.add(ob, dg)?;
            let d = tape.pairwise_sq_dist(ob, posed)?;
            let m1 = tape.min_rows(d);
            let m1 = tape.mean(m1);
            let dt = tape.transpose(d);
            let m2 = tape.min_rows(dt);
            let m2 = tape.mean(m2);
            let l = tape.add(m1, m2)?;
            // Brings projection gradients to order one so the mixed
            // absolute/relative error is not trivially small.
            Ok(tape.scale(l, 1e4))
        },
        &params,
        1e-6,
        coverage,
    )
}
