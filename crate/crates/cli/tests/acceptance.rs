//! Acceptance run: one PASS/FAIL line per primary criterion, with the measured value and
//! the pinned tolerance. Run with `cargo test -p psforge-cli --test acceptance -- --nocapture`
//! to see the lines; the full run takes roughly a quarter of an hour on one core.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use psforge::layout::Dataset;
use psforge::micronet::gradcheck::{check_layer, check_network, Fault, LayerKind};
use psforge::micronet::{load_weights, Architecture, Network};
use psforge::obsmap::{build_observation_map, project_light, rotate_light, rotate_normal, PixelObservations};
use psforge::pipeline::{predict_pixel, rotation_report, PredictConfig, RotationReport};
use psforge::synth::{heightfield_normals, make_material_map, sample_lights, shade, Category, HeightfieldScene};
use psforge::{seed, LightSet, Vec3};
use rand::seq::SliceRandom;
use rand::Rng;
use tempfile::TempDir;

const GRAD_TOLERANCE: f64 = 1e-4;
const GRAD_NEGATIVE_CONTROL: f64 = 1e-1;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const ROTATION_SAMPLES: usize = 10_000;
const ROTATION_TOLERANCE: f64 = 1e-12;
const ROTATION_BUDGET: Duration = Duration::from_secs(5);
const RENDER_ANGLES: usize = 36;
const RENDER_TOLERANCE: f64 = 1e-6;
const BASELINE_MAX_DEG: f64 = 0.5;
const BASELINE_MIN_LIGHTS: usize = 50;
const SPHERE_MAX_DEG: f64 = 10.0;
const BOWL_MIN_IMPROVEMENT: f64 = 0.25;
const AVERAGING_SLACK_DEG: f64 = 0.1;
const AVERAGING_ROTATIONS: usize = 10;
const GAP_MAX_FRACTION: f64 = 0.5;

/// Criteria whose outcome is printed but does not fail the run: the rotation gap is a
/// trend metric that tightens with training scale.
const REPORTED_ONLY: [&str; 1] = ["pseudo-invariance gap"];

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn psforge(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_psforge"))
        .args(args)
        .env_remove("PSFORGE_SEED")
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "psforge {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn reported_mae(out: &Output) -> f64 {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .find_map(|l| l.strip_prefix("mae ").map(|v| v.parse().unwrap()))
        .expect("command reports an MAE")
}

fn gradient_oracle() -> Outcome {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    let mut weakest_control = f64::INFINITY;
    for kind in LayerKind::ALL {
        worst = worst.max(check_layer(kind, 1, Fault::None).unwrap().max_rel_error());
        weakest_control = weakest_control.min(check_layer(kind, 1, Fault::SignFlip).unwrap().max_rel_error());
    }
    let arch = Architecture::default();
    worst = worst.max(check_network(arch, 2, 3, Fault::None).unwrap().max_rel_error());
    weakest_control = weakest_control.min(check_network(arch, 2, 3, Fault::SignFlip).unwrap().max_rel_error());
    let elapsed = started.elapsed();
    Outcome {
        name: "gradient oracle",
        pass: worst < GRAD_TOLERANCE && weakest_control > GRAD_NEGATIVE_CONTROL && elapsed < GRAD_BUDGET,
        detail: format!(
            "max rel error {worst:.2e} (< {GRAD_TOLERANCE:e}), corrupted backward min {weakest_control:.2e} (> {GRAD_NEGATIVE_CONTROL:e}), {:.1}s (< {}s)",
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs()
        ),
    }
}

fn random_unit(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        if v.norm() > 1e-3 && v.norm() <= 1.0 {
            return v.normalize();
        }
    }
}

fn rotation_identities() -> Outcome {
    let started = Instant::now();
    let mut rng = seed::rng(3, "acceptance-rotation", 0);
    let mut worst: f64 = 0.0;
    let mut z_exact = true;
    for _ in 0..ROTATION_SAMPLES {
        let (n, l) = (random_unit(&mut rng), random_unit(&mut rng));
        let theta = rng.gen_range(-10.0..10.0);
        let (n2, l2) = (rotate_normal(&n, theta), rotate_light(&l, theta));
        worst = worst.max((n2.dot(&l2) - n.dot(&l)).abs());
        z_exact &= n2.z == n.z && l2.z == l.z;
    }
    let elapsed = started.elapsed();
    Outcome {
        name: "rotation identities",
        pass: worst < ROTATION_TOLERANCE && z_exact && elapsed < ROTATION_BUDGET,
        detail: format!(
            "{ROTATION_SAMPLES} samples, max |n'.l' - n.l| {worst:.2e} (< {ROTATION_TOLERANCE:e}), z exact: {z_exact}, {:.3}s (< {}s)",
            elapsed.as_secs_f64(),
            ROTATION_BUDGET.as_secs()
        ),
    }
}

fn observation_map_contracts() -> Outcome {
    let mut failures = Vec::new();
    // index examples
    for (l, expected) in [
        (Vec3::new(0.0, 0.0, 1.0), (16, 16)),
        (Vec3::new(-1.0, 0.0, 0.0), (0, 16)),
        (Vec3::new(1.0, 0.0, 0.0), (31, 16)),
    ] {
        if project_light(&l, 32).unwrap() != expected {
            failures.push(format!("index of {l:?}"));
        }
    }
    let two = LightSet::from_directions(vec![Vec3::z(), Vec3::new(0.6, 0.0, 0.8)]).unwrap();
    let map = build_observation_map(&PixelObservations::new(&[0.5, 0.2], &two).unwrap(), 32).unwrap();
    let (a, b) = (project_light(&two.direction(0), 32).unwrap(), project_light(&two.direction(1), 32).unwrap());
    if map.cell(a.0, a.1) != 1.0 || (map.cell(b.0, b.1) - 0.4).abs() > 1e-7 {
        failures.push("two-light values".into());
    }
    let one = LightSet::from_directions(vec![Vec3::new(0.0, 0.6, 0.8)]).unwrap();
    let map = build_observation_map(&PixelObservations::new(&[0.3], &one).unwrap(), 32).unwrap();
    if map.cells().iter().filter(|&&c| c == 1.0).count() != 1 || map.cells().iter().filter(|&&c| c != 0.0).count() != 1 {
        failures.push("single observation".into());
    }

    // permutation invariance and range on random pixels
    let mut rng = seed::rng(4, "acceptance-obsmap", 0);
    let lights = sample_lights(200, 10.0, 1.0, 17).unwrap();
    let mut permutation_ok = true;
    let mut range_ok = true;
    for _ in 0..200 {
        let values: Vec<f64> = (0..lights.len()).map(|_| rng.gen_range(0.0..2.0)).collect();
        let base = build_observation_map(&PixelObservations::new(&values, &lights).unwrap(), 32).unwrap();
        let mut order: Vec<usize> = (0..lights.len()).collect();
        order.shuffle(&mut rng);
        let pv: Vec<f64> = order.iter().map(|&j| values[j]).collect();
        let pl = lights.select(&order);
        let permuted = build_observation_map(&PixelObservations::new(&pv, &pl).unwrap(), 32).unwrap();
        permutation_ok &= base.cells().iter().zip(permuted.cells()).all(|(x, y)| x.to_bits() == y.to_bits());
        range_ok &= base.cells().iter().all(|&c| (0.0..=1.0).contains(&c));
    }
    if !permutation_ok {
        failures.push("permutation".into());
    }
    if !range_ok {
        failures.push("range".into());
    }

    // global intensity scale leaves predictions unchanged
    let net = Network::<f32>::new(Architecture::default(), 9).unwrap();
    let cfg = PredictConfig { rotations: 4, width: 32 };
    let mut scale_ok = true;
    for _ in 0..5 {
        let values: Vec<f64> = (0..lights.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let scaled: Vec<f64> = values.iter().map(|v| v * 7.5).collect();
        let p = predict_pixel(&PixelObservations::new(&values, &lights).unwrap(), &net, &cfg).unwrap();
        let q = predict_pixel(&PixelObservations::new(&scaled, &lights).unwrap(), &net, &cfg).unwrap();
        scale_ok &= p == q;
    }
    if !scale_ok {
        failures.push("intensity scale".into());
    }
    Outcome {
        name: "observation-map contracts",
        pass: failures.is_empty(),
        detail: if failures.is_empty() {
            "index examples exact, bit-exact permutation invariance, values in [0,1], scale-invariant predictions".into()
        } else {
            format!("failed: {}", failures.join(", "))
        },
    }
}

fn rendering_pseudo_invariance() -> Outcome {
    let scene = HeightfieldScene::sphere(64, 0.9).unwrap();
    let normals = heightfield_normals(&scene).unwrap();
    let lights = sample_lights(96, 20.0, 1.0, 5).unwrap();
    let mut worst: f64 = 0.0;
    let mut pixels = 0;
    for (i, category) in [Category::Diffuse, Category::Specular, Category::Metallic].into_iter().enumerate() {
        let materials = make_material_map(&scene, 20, category, 60 + i as u64).unwrap();
        for (x, y) in normals.mask().pixels() {
            let n = normals.get(x, y);
            let params = materials.params(x, y).unwrap();
            pixels += 1;
            for k in 0..RENDER_ANGLES {
                let theta = std::f64::consts::TAU * k as f64 / RENDER_ANGLES as f64;
                let n2 = rotate_normal(&n, theta);
                for j in 0..lights.len() {
                    let l = lights.direction(j);
                    let a = shade(params, &n, &l, lights.intensity(j));
                    let b = shade(params, &n2, &rotate_light(&l, theta), lights.intensity(j));
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    Outcome {
        name: "rendering pseudo-invariance",
        pass: worst < RENDER_TOLERANCE,
        detail: format!("{pixels} sphere pixels x {RENDER_ANGLES} angles x 96 lights, max mismatch {worst:.2e} (< {RENDER_TOLERANCE:e})"),
    }
}

fn baseline_sanity(work: &Path) -> Outcome {
    let data = work.join("lambertian");
    psforge(&["render", "--config", s(&workspace().join("configs/lambertian-sphere.toml")), "--out", s(&data)]);
    let scene = data.join("lambertian-sphere");
    let lights = Dataset::load(&scene, &[]).unwrap().lights.len();
    let mae = reported_mae(&psforge(&["baseline", "--data", s(&scene), "--out", s(&work.join("lambertian-baseline"))]));
    Outcome {
        name: "baseline sanity",
        pass: mae < BASELINE_MAX_DEG && lights >= BASELINE_MIN_LIGHTS,
        detail: format!("Lambertian sphere, {lights} lights (>= {BASELINE_MIN_LIGHTS}), MAE {mae:.4} deg (< {BASELINE_MAX_DEG})"),
    }
}

struct Desk {
    sphere: RotationReport,
    bowl: RotationReport,
    bowl_baseline: f64,
    sphere_baseline: f64,
    train_time: Duration,
}

const TRAINING_SCENES: [&str; 6] = [
    "bumps-diffuse",
    "bumps-specular",
    "bumps-metallic",
    "sphere-metallic",
    "bowl-diffuse",
    "bowl-specular",
];

fn desk_experiment(work: &Path) -> Desk {
    let data = work.join("desk");
    psforge(&["render", "--config", s(&workspace().join("configs/desk-render.toml")), "--out", s(&data)]);
    let model = work.join("desk-model/net.pst");
    let started = Instant::now();
    let mut args: Vec<String> = vec!["train".into(), "--data".into()];
    args.extend(TRAINING_SCENES.iter().map(|n| data.join(n).to_str().unwrap().to_owned()));
    args.extend([
        "--val".into(),
        data.join("val-bumps").to_str().unwrap().into(),
        "--config".into(),
        workspace().join("configs/desk-train.toml").to_str().unwrap().into(),
        "--out".into(),
        model.to_str().unwrap().into(),
    ]);
    let out = psforge(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let train_time = started.elapsed();
    eprint!("{}", String::from_utf8_lossy(&out.stdout));
    let net = load_weights(&model, None).unwrap();
    let report = |name: &str| {
        let d = Dataset::load(data.join(name), &[]).unwrap();
        rotation_report(&d.images, &d.lights, &net, AVERAGING_ROTATIONS, d.normals.as_ref().unwrap()).unwrap()
    };
    let baseline = |name: &str| reported_mae(&psforge(&["baseline", "--data", s(&data.join(name)), "--out", s(&work.join(format!("{name}-baseline")))]));
    Desk {
        sphere: report("test-sphere"),
        bowl: report("test-bowl"),
        bowl_baseline: baseline("test-bowl"),
        sphere_baseline: baseline("test-sphere"),
        train_time,
    }
}

fn desk_learning(d: &Desk) -> Outcome {
    let improvement = 1.0 - d.bowl.mae_single_deg / d.bowl_baseline;
    Outcome {
        name: "desk-scale learning",
        pass: d.sphere.mae_single_deg < SPHERE_MAX_DEG && improvement >= BOWL_MIN_IMPROVEMENT,
        detail: format!(
            "training {:.0}s; sphere MAE {:.2} deg (< {SPHERE_MAX_DEG}; baseline {:.2}); bowl MAE {:.2} vs baseline {:.2} deg, {:.0}% better (>= {:.0}%)",
            d.train_time.as_secs_f64(),
            d.sphere.mae_single_deg,
            d.sphere_baseline,
            d.bowl.mae_single_deg,
            d.bowl_baseline,
            100.0 * improvement,
            100.0 * BOWL_MIN_IMPROVEMENT
        ),
    }
}

/// Pixel-weighted mean of a statistic over both held-out scenes.
fn pooled(d: &Desk, f: impl Fn(&RotationReport) -> f64) -> f64 {
    let (a, b) = (&d.sphere, &d.bowl);
    (f(a) * a.pixels as f64 + f(b) * b.pixels as f64) / (a.pixels + b.pixels) as f64
}

fn rotation_averaging(d: &Desk) -> Outcome {
    let (k1, k10) = (pooled(d, |r| r.mae_single_deg), pooled(d, |r| r.mae_averaged_deg));
    Outcome {
        name: "K-rotation averaging",
        pass: k10 <= k1 + AVERAGING_SLACK_DEG,
        detail: format!("held-out MAE K=1 {k1:.3}, K={AVERAGING_ROTATIONS} {k10:.3} deg (K=10 <= K=1 + {AVERAGING_SLACK_DEG})"),
    }
}

fn pseudo_invariance_gap(d: &Desk) -> Outcome {
    let error = pooled(d, |r| r.mean_error_deg);
    let disagreement = pooled(d, |r| r.mean_disagreement_deg);
    let difference = pooled(d, |r| r.mean_error_difference_deg);
    Outcome {
        name: "pseudo-invariance gap",
        pass: disagreement < GAP_MAX_FRACTION * error,
        detail: format!(
            "mean pairwise prediction disagreement {disagreement:.2} deg = {:.0}% of mean error {error:.2} deg (< {:.0}%); pairwise error difference {difference:.2} deg = {:.0}%",
            100.0 * disagreement / error,
            100.0 * GAP_MAX_FRACTION,
            100.0 * difference / error
        ),
    }
}

const SMALL_SCENES: &str = r#"
seed = 21

[[scene]]
name = "bumps"
kind = "bumps"
material = "specular"
size = 24
lights = 40
superpixels = 10

[[scene]]
name = "bowl"
kind = "bowl"
material = "diffuse"
size = 24
lights = 40
interreflection = true
"#;

const SMALL_TRAIN: &str = r#"
seed = 5
width = 16
epochs = 2
batch_size = 8
rotations = 2
pixels_per_scene = 12
validation_pixels = 8

[architecture]
stem_filters = 4
growth = 4
block_layers = 1
transition_channels = 8
hidden_units = 16
"#;

/// Every file under `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Runs every command once into `root`, single-threaded; returns the stdout of each.
fn run_all_commands(root: &Path, config_dir: &Path) -> Vec<Vec<u8>> {
    let data = root.join("data");
    let p = |rel: &str| root.join(rel).to_str().unwrap().to_owned();
    let scenes = config_dir.join("scenes.toml");
    let train = config_dir.join("train.toml");
    let (bumps, bowl) = (data.join("bumps"), data.join("bowl"));
    let commands: Vec<Vec<String>> = vec![
        vec!["render".into(), "--config".into(), s(&scenes).into(), "--out".into(), s(&data).into()],
        vec!["maps".into(), "--data".into(), s(&bumps).into(), s(&bowl).into(), "--config".into(), s(&train).into(), "--out".into(), p("maps")],
        vec!["train".into(), "--data".into(), s(&bumps).into(), "--val".into(), s(&bowl).into(), "--config".into(), s(&train).into(), "--out".into(), p("model/net.pst")],
        vec!["predict".into(), "--data".into(), s(&bowl).into(), "--model".into(), p("model/net.pst"), "--rotations".into(), "3".into(), "--exclude".into(), "0-4".into(), "--out".into(), p("predict")],
        vec!["baseline".into(), "--data".into(), s(&bowl).into(), "--out".into(), p("baseline")],
        vec!["eval".into(), "--est".into(), p("predict/normals.pst"), "--gt".into(), s(&bowl.join("normals.pst")).into(), "--out".into(), p("eval")],
    ];
    commands
        .iter()
        .map(|c| {
            let mut args = vec!["--jobs", "1"];
            args.extend(c.iter().map(String::as_str));
            psforge(&args).stdout
        })
        .collect()
}

fn determinism(work: &Path) -> Outcome {
    let configs = work.join("small-configs");
    fs::create_dir_all(&configs).unwrap();
    fs::write(configs.join("scenes.toml"), SMALL_SCENES).unwrap();
    fs::write(configs.join("train.toml"), SMALL_TRAIN).unwrap();
    let (a, b) = (work.join("run-a"), work.join("run-b"));
    let out_a = run_all_commands(&a, &configs);
    let out_b = run_all_commands(&b, &configs);
    let (files_a, files_b) = (snapshot(&a), snapshot(&b));
    let names = ["render", "maps", "train", "predict", "baseline", "eval"];
    let mut differing: Vec<String> = names
        .iter()
        .zip(out_a.iter().zip(&out_b))
        .filter(|(_, (x, y))| x != y)
        .map(|(n, _)| format!("{n} stdout"))
        .collect();
    for (path, bytes) in &files_a {
        if files_b.get(path) != Some(bytes) {
            differing.push(path.display().to_string());
        }
    }
    if files_a.len() != files_b.len() {
        differing.push("file sets".into());
    }
    Outcome {
        name: "determinism",
        pass: differing.is_empty(),
        detail: if differing.is_empty() {
            format!("{} commands x 2 runs, {} output files byte-identical with --jobs 1", names.len(), files_a.len())
        } else {
            format!("differs: {}", differing.join(", "))
        },
    }
}

fn report(outcomes: &mut Vec<Outcome>, o: Outcome) {
    let note = if REPORTED_ONLY.contains(&o.name) { " [reported, not gating]" } else { "" };
    // written to the process stdout directly so the lines show without --nocapture
    let line = format!("{} {}: {}{note}\n", if o.pass { "PASS" } else { "FAIL" }, o.name, o.detail);
    std::io::stdout().lock().write_all(line.as_bytes()).unwrap();
    outcomes.push(o);
}

#[test]
fn primary_criteria() {
    let work = TempDir::new().unwrap();
    let mut outcomes = Vec::new();
    report(&mut outcomes, gradient_oracle());
    report(&mut outcomes, rotation_identities());
    report(&mut outcomes, observation_map_contracts());
    report(&mut outcomes, rendering_pseudo_invariance());
    report(&mut outcomes, baseline_sanity(work.path()));
    report(&mut outcomes, determinism(work.path()));
    let desk = desk_experiment(work.path());
    report(&mut outcomes, desk_learning(&desk));
    report(&mut outcomes, rotation_averaging(&desk));
    report(&mut outcomes, pseudo_invariance_gap(&desk));

    let failed: Vec<&str> = outcomes
        .iter()
        .filter(|o| !o.pass && !REPORTED_ONLY.contains(&o.name))
        .map(|o| o.name)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
