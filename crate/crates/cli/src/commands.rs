//! One function per subcommand. Everything written to stdout or to files is deterministic
//! for fixed inputs and seeds; timings go to stderr only.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use psforge::baseline::baseline_map;
use psforge::imageio::{read_mask, read_normal_png, write_gray8, write_normal_png};
use psforge::layout::{read_normals_tensor, write_normals_tensor, Dataset, NORMALS_PNG, NORMALS_TENSOR};
use psforge::metric::{angular_error_map, error_stats, mean_angular_error};
use psforge::micronet::gradcheck::{check_network, Fault};
use psforge::micronet::{load_weights, save_weights};
use psforge::pipeline::{assemble_training_set, predict_map, train, PredictConfig};
use psforge::tensor::read_tensor;
use psforge::{seed, Error, Grid, Mask, NormalMap};

use crate::config::{usage, RenderConfig, TrainFile};

/// Largest relative gradient error accepted by `--verify-gradients`.
const GRADIENT_TOLERANCE: f64 = 1e-4;
const GRADIENT_SAMPLES: usize = 4;
/// Error-map scale: this many degrees map to 255.
const ERROR_MAP_FULL_SCALE_DEG: f64 = 90.0;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e }.into())
}

fn load_all(dirs: &[PathBuf]) -> Result<Vec<Dataset>> {
    dirs.iter().map(|d| Ok(Dataset::load(d, &[])?)).collect()
}

fn pixel_list(pixels: &[(usize, usize)]) -> String {
    pixels.iter().map(|(x, y)| format!("{x} {y}\n")).collect()
}

pub fn render(config: &Path, out: &Path, seed_flag: Option<u64>) -> Result<()> {
    let cfg = RenderConfig::load(config)?;
    let master = seed_flag.unwrap_or(cfg.seed);
    create_dir(out)?;
    for recipe in &cfg.scenes {
        let started = Instant::now();
        let mut recipe = recipe.clone();
        recipe.seed = seed::derive(master, "render", recipe.seed);
        let sample = recipe.render()?;
        let m = sample.lights.len();
        Dataset::from(sample).write(out.join(&recipe.name))?;
        println!("{} {} {} images", recipe.name, recipe.kind, m);
        eprintln!("rendered {} in {:.1?}", recipe.name, started.elapsed());
    }
    Ok(())
}

pub fn maps(data: &[PathBuf], config: Option<&Path>, out: &Path, seed_flag: Option<u64>) -> Result<()> {
    let file = TrainFile::load(config)?;
    let cfg = file.train_config(seed_flag)?;
    let datasets = load_all(data)?;
    let (set, stats) = assemble_training_set(&datasets, &cfg)?;
    create_dir(out)?;
    set.write(out, "train")?;
    println!(
        "{} maps from {} pixels ({} skipped)",
        set.len(),
        stats.retained_pixels,
        stats.skipped_pixels
    );
    Ok(())
}

pub struct TrainArgs<'a> {
    pub data: &'a [PathBuf],
    pub val: &'a [PathBuf],
    pub config: Option<&'a Path>,
    pub out: &'a Path,
    pub log: Option<&'a Path>,
    pub seed: Option<u64>,
    pub verify_gradients: bool,
}

/// Default log path: the model path with `.log` appended.
pub fn default_log_path(model: &Path) -> PathBuf {
    let mut s = model.as_os_str().to_owned();
    s.push(".log");
    PathBuf::from(s)
}

pub fn train_cmd(args: TrainArgs<'_>) -> Result<()> {
    let file = TrainFile::load(args.config)?;
    let cfg = file.train_config(args.seed)?;
    if args.verify_gradients {
        let started = Instant::now();
        let report = check_network(cfg.architecture, cfg.seed, GRADIENT_SAMPLES, Fault::None)?;
        let worst = report.max_rel_error();
        println!("gradient check: max relative error {worst:.3e}");
        eprintln!("gradient check took {:.1?}", started.elapsed());
        if !(worst < GRADIENT_TOLERANCE) {
            return Err(Error::Numerical(format!(
                "gradient check failed: relative error {worst:.3e} exceeds {GRADIENT_TOLERANCE:e}"
            ))
            .into());
        }
    }

    let started = Instant::now();
    let train_data = load_all(args.data)?;
    let (train_set, stats) = assemble_training_set(&train_data, &cfg)?;
    // Without explicit validation scenes, monitor on differently drawn maps of the training scenes.
    let val_cfg = file.validation_config(&cfg);
    let (val_set, _) = if args.val.is_empty() {
        assemble_training_set(&train_data, &val_cfg)?
    } else {
        assemble_training_set(&load_all(args.val)?, &val_cfg)?
    };
    println!(
        "{} training maps from {} pixels, {} validation maps",
        train_set.len(),
        stats.retained_pixels,
        val_set.len()
    );
    eprintln!("assembled in {:.1?}", started.elapsed());

    let log_path = args.log.map(Path::to_path_buf).unwrap_or_else(|| default_log_path(args.out));
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let started = Instant::now();
    let (net, log) = train(&train_set, &val_set, &cfg, |e| {
        println!("{}", e.line());
        eprintln!("epoch {} done at {:.1?}", e.epoch, started.elapsed());
    })?;
    save_weights(args.out, &net)?;
    let text: String = log.iter().map(|e| e.line() + "\n").collect();
    write_text(&log_path, &text)?;
    Ok(())
}

pub struct PredictArgs<'a> {
    pub data: &'a Path,
    pub model: &'a Path,
    pub rotations: usize,
    pub exclude: &'a [usize],
    pub out: &'a Path,
}

pub fn predict(args: PredictArgs<'_>) -> Result<()> {
    if args.rotations == 0 {
        return Err(usage("--rotations must be at least 1"));
    }
    let net = load_weights(args.model, None)?;
    let data = Dataset::load(args.data, args.exclude)?;
    let cfg = PredictConfig {
        rotations: args.rotations,
        width: net.architecture().input_width,
    };
    let started = Instant::now();
    let mask = data.images.mask().clone();
    let pred = predict_map(&data.images, &data.lights, &net, &cfg, &mask)?;
    eprintln!("predicted {} pixels in {:.1?}", mask.count(), started.elapsed());
    create_dir(args.out)?;
    write_normals_tensor(args.out.join(NORMALS_TENSOR), &pred.normals)?;
    write_normal_png(args.out.join(NORMALS_PNG), &pred.normals)?;
    write_text(&args.out.join("flagged.txt"), &pixel_list(&pred.flagged))?;
    println!(
        "{}: {} images, {} pixels, {} flagged, K={}",
        data.name,
        data.images.len(),
        mask.count(),
        pred.flagged.len(),
        args.rotations
    );
    if let Some(gt) = &data.normals {
        println!("mae {:.6}", mean_angular_error(&pred.normals, gt)?);
    }
    Ok(())
}

pub fn baseline(data: &Path, tau: f64, exclude: &[usize], out: &Path) -> Result<()> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(usage(format!("--threshold must be a non-negative number, got {tau}")));
    }
    let data = Dataset::load(data, exclude)?;
    let mask = data.images.mask().clone();
    let result = baseline_map(&data.images, &data.lights, tau, &mask)?;
    create_dir(out)?;
    write_normals_tensor(out.join(NORMALS_TENSOR), &result.normals)?;
    write_normal_png(out.join(NORMALS_PNG), &result.normals)?;
    write_text(&out.join("failed.txt"), &pixel_list(&result.failed))?;
    println!(
        "{}: {} images, {} pixels, {} failed, threshold {}",
        data.name,
        data.images.len(),
        mask.count(),
        result.failed.len(),
        tau
    );
    if let Some(gt) = &data.normals {
        println!("mae {:.6}", mean_angular_error(&result.normals, gt)?);
    }
    Ok(())
}

/// Reads a normal map from a `[h, w, 3]` tensor or an encoded normal PNG.
fn read_normals(path: &Path, mask: Option<&Mask>) -> Result<NormalMap> {
    if !path.is_file() {
        return Err(Error::InvalidInput(format!("normal map {} does not exist", path.display())).into());
    }
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        return Ok(read_normal_png(path, mask)?);
    }
    let mask = match mask {
        Some(m) => m.clone(),
        None => {
            let t = read_tensor(path)?;
            let (h, w) = match t.dims[..] {
                [h, w, 3] => (h, w),
                _ => return Err(Error::Format { path: path.into(), reason: format!("expected [h, w, 3], got {:?}", t.dims) }.into()),
            };
            Grid::filled(w, h, true)
        }
    };
    Ok(read_normals_tensor(path, &mask)?)
}

/// Maps an angle to an 8-bit grey level, linear from 0 to the full-scale angle and clamped.
pub fn error_level(deg: f64) -> u8 {
    ((deg / ERROR_MAP_FULL_SCALE_DEG).clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn eval(est: &Path, gt: &Path, mask: Option<&Path>, out: &Path) -> Result<()> {
    let mask = mask.map(read_mask).transpose()?;
    let gt = read_normals(gt, mask.as_ref())?;
    let est = read_normals(est, mask.as_ref())?;
    let (errors, used) = angular_error_map(&est, &gt)?;
    let stats = error_stats(&errors, &used)?;
    let image = Grid::from_fn(errors.width(), errors.height(), |x, y| {
        if *used.get(x, y) {
            error_level(*errors.get(x, y))
        } else {
            0
        }
    });
    create_dir(out)?;
    write_gray8(out.join("error_map.png"), &image)?;
    let mut report = String::new();
    writeln!(report, "pixels {}", stats.count)?;
    writeln!(report, "mean {:.6}", stats.mean)?;
    writeln!(report, "median {:.6}", stats.median)?;
    writeln!(report, "max {:.6}", stats.max)?;
    write_text(&out.join("report.txt"), &report)?;
    print!("{report}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_levels_follow_the_declared_scale() {
        assert_eq!(error_level(0.0), 0);
        assert_eq!(error_level(45.0), 128);
        assert_eq!(error_level(90.0), 255);
        assert_eq!(error_level(120.0), 255);
    }

    #[test]
    fn log_path_appends_an_extension() {
        assert_eq!(default_log_path(Path::new("a/model.pst")), PathBuf::from("a/model.pst.log"));
    }
}
