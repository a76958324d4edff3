//! Training-set assembly, training, and rotation-averaged prediction.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::layout::Dataset;
use crate::micronet::{mse_loss, AdamConfig, AdamState, Architecture, Mode, Network, Tensor};
use crate::obsmap::{build_observation_map, rotate_normal, rotated_map, PixelObservations};
use crate::seed;
use crate::synth::RenderedSample;
use crate::tensor::{read_tensor, write_tensor};
use crate::types::{elevation_deg, Grid, ImageStack, LightSet, Mask, NormalMap, Vec3};

/// Knobs of training-set assembly and of the optimizer loop.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub width: usize,
    /// Rotated copies per pixel, at regular angles over `[0, 360)` degrees.
    pub rotations: usize,
    pub subset_min: usize,
    pub subset_max: usize,
    /// Lights below a per-pixel elevation threshold drawn from this range are dropped.
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    /// Masked pixels drawn (seeded, without replacement) from each scene; `None` takes all.
    pub pixels_per_scene: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub architecture: Architecture,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            width: 32,
            rotations: 10,
            subset_min: 10,
            subset_max: 100,
            elevation_min_deg: 20.0,
            elevation_max_deg: 90.0,
            pixels_per_scene: None,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            architecture: Architecture::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.width == 0 || self.width != self.architecture.input_width {
            return bad(format!(
                "map width {} must be positive and match the network input {}",
                self.width, self.architecture.input_width
            ));
        }
        if self.rotations == 0 {
            return bad("rotations must be at least 1".into());
        }
        if self.subset_min == 0 || self.subset_min > self.subset_max {
            return bad(format!("subset range [{}, {}] is invalid", self.subset_min, self.subset_max));
        }
        if !(0.0 <= self.elevation_min_deg
            && self.elevation_min_deg <= self.elevation_max_deg
            && self.elevation_max_deg <= 90.0)
        {
            return bad(format!(
                "elevation range [{}, {}] must be ordered within [0, 90]",
                self.elevation_min_deg, self.elevation_max_deg
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive".into());
        }
        if self.pixels_per_scene == Some(0) {
            return bad("pixels_per_scene must be positive".into());
        }
        self.architecture.validate()
    }
}

/// An image stack with known lights and ground-truth normals.
pub trait LabeledStack: Sync {
    fn name(&self) -> &str;
    fn images(&self) -> &ImageStack;
    fn lights(&self) -> &LightSet;
    fn normals(&self) -> Result<&NormalMap>;
}

impl LabeledStack for RenderedSample {
    fn name(&self) -> &str {
        &self.name
    }
    fn images(&self) -> &ImageStack {
        &self.images
    }
    fn lights(&self) -> &LightSet {
        &self.lights
    }
    fn normals(&self) -> Result<&NormalMap> {
        Ok(&self.normals)
    }
}

impl LabeledStack for Dataset {
    fn name(&self) -> &str {
        &self.name
    }
    fn images(&self) -> &ImageStack {
        &self.images
    }
    fn lights(&self) -> &LightSet {
        &self.lights
    }
    fn normals(&self) -> Result<&NormalMap> {
        self.normals
            .as_ref()
            .ok_or_else(|| Error::InvalidInput(format!("dataset {} has no ground-truth normals", self.name)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Provenance {
    pub scene: usize,
    pub pixel: (usize, usize),
    pub rotation: usize,
    pub subset_size: usize,
    pub elevation_threshold_deg: f64,
}

/// Observation maps with their ground-truth normals, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub width: usize,
    /// `len() * width * width` cell values.
    pub maps: Vec<f32>,
    pub normals: Vec<[f32; 3]>,
    pub provenance: Vec<Provenance>,
}

impl TrainingSet {
    pub fn empty(width: usize) -> Self {
        TrainingSet {
            width,
            maps: Vec::new(),
            normals: Vec::new(),
            provenance: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.normals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normals.is_empty()
    }

    pub fn map(&self, i: usize) -> &[f32] {
        let n = self.width * self.width;
        &self.maps[i * n..(i + 1) * n]
    }

    pub fn extend(&mut self, other: TrainingSet) -> Result<()> {
        if other.width != self.width {
            return Err(Error::Shape(format!("map widths {} and {} differ", self.width, other.width)));
        }
        self.maps.extend(other.maps);
        self.normals.extend(other.normals);
        self.provenance.extend(other.provenance);
        Ok(())
    }

    /// Writes `<stem>.maps.pst` `[N, w, w]`, `<stem>.normals.pst` `[N, 3]` and a
    /// `<stem>.provenance.txt` sidecar with one line per sample.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        if self.is_empty() {
            return Err(Error::InvalidInput("cannot write an empty training set".into()));
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let n = self.len();
        write_tensor(dir.join(format!("{stem}.maps.pst")), &[n, self.width, self.width], &self.maps)?;
        let flat: Vec<f32> = self.normals.iter().flatten().copied().collect();
        write_tensor(dir.join(format!("{stem}.normals.pst")), &[n, 3], &flat)?;
        let mut text = String::from("# scene x y rotation subset_size elevation_threshold_deg\n");
        for p in &self.provenance {
            text += &format!(
                "{} {} {} {} {} {}\n",
                p.scene, p.pixel.0, p.pixel.1, p.rotation, p.subset_size, p.elevation_threshold_deg
            );
        }
        let path = dir.join(format!("{stem}.provenance.txt"));
        fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(dir: impl AsRef<Path>, stem: &str) -> Result<TrainingSet> {
        let dir = dir.as_ref();
        let maps_path = dir.join(format!("{stem}.maps.pst"));
        let maps = read_tensor(&maps_path)?;
        let [n, w, w2] = maps.dims[..] else {
            return Err(Error::format(&maps_path, "expected [N, w, w]"));
        };
        if w != w2 || maps.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::format(&maps_path, "maps must be square with values in [0, 1]"));
        }
        let normals_path = dir.join(format!("{stem}.normals.pst"));
        let normals = read_tensor(&normals_path)?;
        if normals.dims != [n, 3] {
            return Err(Error::format(&normals_path, format!("expected [{n}, 3], got {:?}", normals.dims)));
        }
        let prov_path = dir.join(format!("{stem}.provenance.txt"));
        let text = fs::read_to_string(&prov_path).map_err(|e| Error::io(&prov_path, e))?;
        let provenance = text
            .lines()
            .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split_whitespace().collect();
                let parse = |i: usize| f.get(i).and_then(|s| s.parse::<usize>().ok());
                match (parse(0), parse(1), parse(2), parse(3), parse(4), f.get(5).and_then(|s| s.parse().ok())) {
                    (Some(scene), Some(x), Some(y), Some(rotation), Some(subset_size), Some(t)) if f.len() == 6 => {
                        Ok(Provenance {
                            scene,
                            pixel: (x, y),
                            rotation,
                            subset_size,
                            elevation_threshold_deg: t,
                        })
                    }
                    _ => Err(Error::format(&prov_path, format!("bad provenance line {l:?}"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if provenance.len() != n {
            return Err(Error::format(&prov_path, format!("{} lines for {n} samples", provenance.len())));
        }
        Ok(TrainingSet {
            width: w,
            maps: maps.data,
            normals: normals.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            provenance,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AssemblyStats {
    pub retained_pixels: usize,
    /// Pixels with too few lights above their elevation threshold, or fully dark.
    pub skipped_pixels: usize,
}

fn rotation_angle(k: usize, count: usize) -> f64 {
    TAU * k as f64 / count as f64
}

/// Builds rotated observation maps for (a seeded subset of) the masked pixels of every sample.
pub fn assemble_training_set<S: LabeledStack>(samples: &[S], cfg: &TrainConfig) -> Result<(TrainingSet, AssemblyStats)> {
    cfg.validate()?;
    let mut set = TrainingSet::empty(cfg.width);
    let mut stats = AssemblyStats::default();
    for (si, s) in samples.iter().enumerate() {
        let (images, lights, normals) = (s.images(), s.lights(), s.normals()?);
        if lights.len() < cfg.subset_min {
            return Err(Error::InvalidInput(format!(
                "scene {} has {} lights, fewer than subset_min {}",
                s.name(),
                lights.len(),
                cfg.subset_min
            )));
        }
        images.check_lights(lights)?;
        if normals.dims() != images.dims() {
            return Err(Error::Shape(format!("scene {}: normals do not match the images", s.name())));
        }
        let mut pixels: Vec<(usize, usize)> = normals.mask().pixels();
        pixels.retain(|&(x, y)| *images.mask().get(x, y));
        if let Some(limit) = cfg.pixels_per_scene {
            if limit < pixels.len() {
                let mut rng = seed::rng(cfg.seed, "pixel-subset", si as u64);
                let mut picked = sample(&mut rng, pixels.len(), limit).into_vec();
                picked.sort_unstable();
                pixels = picked.into_iter().map(|i| pixels[i]).collect();
            }
        }
        let elevations: Vec<f64> = lights.directions().iter().map(elevation_deg).collect();
        let per_pixel: Vec<Option<TrainingSet>> = pixels
            .par_iter()
            .map(|&(x, y)| {
                let index = ((si as u64) << 32) | (y * images.dims().0 + x) as u64;
                pixel_samples(images, lights, normals, si, (x, y), &elevations, cfg, index)
            })
            .collect::<Result<_>>()?;
        for p in per_pixel {
            match p {
                Some(p) => {
                    stats.retained_pixels += 1;
                    set.extend(p)?;
                }
                None => stats.skipped_pixels += 1,
            }
        }
    }
    Ok((set, stats))
}

#[allow(clippy::too_many_arguments)]
fn pixel_samples(
    images: &ImageStack,
    lights: &LightSet,
    normals: &NormalMap,
    scene: usize,
    (x, y): (usize, usize),
    elevations: &[f64],
    cfg: &TrainConfig,
    index: u64,
) -> Result<Option<TrainingSet>> {
    let mut rng = seed::rng(cfg.seed, "assemble", index);
    let size = rng.gen_range(cfg.subset_min..=cfg.subset_max);
    let threshold = if cfg.elevation_max_deg > cfg.elevation_min_deg {
        rng.gen_range(cfg.elevation_min_deg..cfg.elevation_max_deg)
    } else {
        cfg.elevation_min_deg
    };
    let eligible: Vec<usize> = (0..elevations.len()).filter(|&j| elevations[j] >= threshold).collect();
    if eligible.len() < cfg.subset_min {
        return Ok(None);
    }
    let size = size.min(eligible.len());
    let mut chosen: Vec<usize> = sample(&mut rng, eligible.len(), size).into_iter().map(|i| eligible[i]).collect();
    chosen.sort_unstable();
    let all = images.pixel_values(x, y);
    let values: Vec<f64> = chosen.iter().map(|&j| all[j]).collect();
    if values.iter().all(|&v| v <= 0.0) {
        return Ok(None);
    }
    let lights = lights.select(&chosen);
    let obs = PixelObservations::new(&values, &lights)?;
    let n = normals.get(x, y);
    let mut out = TrainingSet::empty(cfg.width);
    for k in 0..cfg.rotations {
        let theta = rotation_angle(k, cfg.rotations);
        let map = if k == 0 {
            build_observation_map(&obs, cfg.width)?
        } else {
            rotated_map(&obs, theta, cfg.width)?
        };
        let rn = if k == 0 { n } else { rotate_normal(&n, theta) };
        out.maps.extend_from_slice(map.cells());
        out.normals.push([rn.x as f32, rn.y as f32, rn.z as f32]);
        out.provenance.push(Provenance {
            scene,
            pixel: (x, y),
            rotation: k,
            subset_size: size,
            elevation_threshold_deg: threshold,
        });
    }
    Ok(Some(out))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_mae_deg: f64,
}

impl EpochLog {
    /// One whitespace-separated line: `epoch train_loss val_loss val_mae_deg`.
    pub fn line(&self) -> String {
        format!("{} {:.8} {:.8} {:.6}", self.epoch, self.train_loss, self.val_loss, self.val_mae_deg)
    }
}

fn input_tensor(set: &TrainingSet, i: usize) -> Tensor<f32> {
    Tensor::from_vec(1, set.width, set.width, set.map(i).to_vec())
}

/// Mean loss and mean angular error (degrees) of the network on `set` in inference mode.
pub fn evaluate(net: &Network<f32>, set: &TrainingSet) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Err(Error::InvalidInput("evaluation set is empty".into()));
    }
    let per: Vec<(f64, f64)> = (0..set.len())
        .into_par_iter()
        .map(|i| {
            let y = net.forward(&input_tensor(set, i), Mode::Infer)?;
            let gt = set.normals[i];
            let (loss, _) = mse_loss(&y, &gt);
            let a = Vec3::new(y[0] as f64, y[1] as f64, y[2] as f64);
            let b = Vec3::new(gt[0] as f64, gt[1] as f64, gt[2] as f64);
            let angle = a.cross(&b).norm().atan2(a.dot(&b)).to_degrees();
            Ok((loss as f64, angle))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    Ok((per.iter().map(|p| p.0).sum::<f64>() / n, per.iter().map(|p| p.1).sum::<f64>() / n))
}

/// Samples per gradient chunk; chunks are summed in index order so results do not depend
/// on the number of worker threads.
const CHUNK: usize = 4;

/// Shuffled mini-batch Adam on the MSE loss. `on_epoch` sees each epoch's metrics as they
/// are produced. Returns the final-epoch weights and the full log.
pub fn train(
    train_set: &TrainingSet,
    val_set: &TrainingSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(Network<f32>, Vec<EpochLog>)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::InvalidInput("validation set is empty".into()));
    }
    for s in [train_set, val_set] {
        if s.width != cfg.width {
            return Err(Error::Shape(format!("set has map width {}, config {}", s.width, cfg.width)));
        }
    }
    let mut net = Network::<f32>::new(cfg.architecture, seed::derive(cfg.seed, "network", 0))?;
    let mut adam = AdamState::new(net.params(), cfg.adam);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::rng(cfg.seed, "shuffle", epoch as u64));
        let mut loss_sum = 0.0f64;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let partial: Vec<(Vec<Vec<f32>>, f64)> = batch
                .par_chunks(CHUNK)
                .map(|chunk| {
                    let mut grads = net.zero_grads();
                    let mut loss = 0.0f64;
                    for &i in chunk {
                        let mode = Mode::Train {
                            seed: seed::derive(cfg.seed, "dropout", ((epoch as u64) << 40) ^ i as u64),
                        };
                        let (y, cache) = net.forward_cached(&input_tensor(train_set, i), mode)?;
                        let (l, dy) = mse_loss(&[y.data[0], y.data[1], y.data[2]], &train_set.normals[i]);
                        net.backward(&cache, &dy, &mut grads)?;
                        loss += l as f64;
                    }
                    Ok((grads, loss))
                })
                .collect::<Result<_>>()?;
            let mut iter = partial.into_iter();
            let (mut grads, mut batch_loss) = iter.next().expect("batch is non-empty");
            for (g, l) in iter {
                for (acc, part) in grads.iter_mut().zip(&g) {
                    for (a, p) in acc.iter_mut().zip(part) {
                        *a += p;
                    }
                }
                batch_loss += l;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Numerical(format!("training diverged: non-finite loss at epoch {epoch}, batch {b}")));
            }
            let scale = 1.0 / batch.len() as f32;
            for g in grads.iter_mut() {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
            adam.step(net.params_mut(), &grads)
                .map_err(|e| Error::Numerical(format!("training diverged at epoch {epoch}, batch {b}: {e}")))?;
            loss_sum += batch_loss;
        }
        let (val_loss, val_mae_deg) = evaluate(&net, val_set)?;
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss,
            val_mae_deg,
        };
        if !(entry.train_loss.is_finite() && val_loss.is_finite()) {
            return Err(Error::Numerical(format!("training diverged at epoch {epoch}")));
        }
        on_epoch(&entry);
        log.push(entry);
    }
    Ok((net, log))
}

/// Rotation count for prediction; angles are `2 pi k / K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredictConfig {
    pub rotations: usize,
    pub width: usize,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            rotations: 1,
            width: 32,
        }
    }
}

const MIN_MEAN_NORM: f64 = 1e-9;

/// Network prediction for the map rotated by `theta`, rotated back into the camera frame.
pub fn predict_rotated(obs: &PixelObservations<'_>, net: &Network<f32>, theta: f64, width: usize) -> Result<Vec3> {
    let map = if theta == 0.0 {
        build_observation_map(obs, width)?
    } else {
        rotated_map(obs, theta, width)?
    };
    let y = net.forward(&Tensor::from_vec(1, width, width, map.cells().to_vec()), Mode::Infer)?;
    let n = Vec3::new(y[0] as f64, y[1] as f64, y[2] as f64);
    Ok(if theta == 0.0 { n } else { rotate_normal(&n, -theta) })
}

/// Averages the inversely rotated predictions of `K` rotated maps and renormalizes.
pub fn predict_pixel(obs: &PixelObservations<'_>, net: &Network<f32>, cfg: &PredictConfig) -> Result<Vec3> {
    if cfg.rotations == 0 {
        return Err(Error::InvalidInput("rotation count must be at least 1".into()));
    }
    if cfg.width != net.architecture().input_width {
        return Err(Error::Shape(format!(
            "map width {} does not match the network input {}",
            cfg.width,
            net.architecture().input_width
        )));
    }
    let preds = (0..cfg.rotations)
        .map(|k| predict_rotated(obs, net, rotation_angle(k, cfg.rotations), cfg.width))
        .collect::<Result<Vec<_>>>()?;
    average_predictions(&preds)
}

/// Renormalized mean of unit predictions; errors when they (nearly) cancel out.
fn average_predictions(preds: &[Vec3]) -> Result<Vec3> {
    let mean = preds.iter().sum::<Vec3>() / preds.len() as f64;
    let norm = mean.norm();
    if !(norm >= MIN_MEAN_NORM) {
        return Err(Error::Numerical(format!("rotated predictions cancel out (|mean| = {norm:.3e})")));
    }
    Ok(mean / norm)
}

fn angle_deg(a: &Vec3, b: &Vec3) -> f64 {
    a.cross(b).norm().atan2(a.dot(b)).to_degrees()
}

/// How predictions behave across `K` rotated observation maps, against ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationReport {
    pub rotations: usize,
    pub pixels: usize,
    /// Mean angular error of the unrotated prediction (`K = 1`).
    pub mae_single_deg: f64,
    /// Mean angular error of the `K`-rotation average.
    pub mae_averaged_deg: f64,
    /// Mean angular error over all pixels and all individual rotations.
    pub mean_error_deg: f64,
    /// Mean over pixels and rotation pairs of the absolute difference of their errors.
    pub mean_error_difference_deg: f64,
    /// Mean over pixels and rotation pairs of the angle between the two predictions.
    pub mean_disagreement_deg: f64,
}

/// Predicts every pixel of the ground-truth mask under `K` rotations and summarizes the
/// single, averaged and pairwise statistics in one pass.
pub fn rotation_report(
    stack: &ImageStack,
    lights: &LightSet,
    net: &Network<f32>,
    rotations: usize,
    gt: &NormalMap,
) -> Result<RotationReport> {
    stack.check_lights(lights)?;
    if gt.dims() != stack.dims() {
        return Err(Error::Shape("ground truth does not match the images".into()));
    }
    if rotations < 2 {
        return Err(Error::InvalidInput("a rotation report needs at least 2 rotations".into()));
    }
    let width = net.architecture().input_width;
    let pixels: Vec<(usize, usize)> = gt
        .mask()
        .pixels()
        .into_iter()
        .filter(|&(x, y)| *stack.mask().get(x, y))
        .collect();
    // (single error, averaged error, mean error, mean |difference|, mean disagreement)
    let per_pixel: Vec<Option<[f64; 5]>> = pixels
        .par_iter()
        .map(|&(x, y)| {
            let values = stack.pixel_values(x, y);
            let obs = PixelObservations::new(&values, lights).ok()?;
            let preds: Vec<Vec3> = (0..rotations)
                .map(|k| predict_rotated(&obs, net, rotation_angle(k, rotations), width))
                .collect::<Result<_>>()
                .ok()?;
            let averaged = average_predictions(&preds).ok()?;
            let truth = gt.get(x, y);
            let errors: Vec<f64> = preds.iter().map(|p| angle_deg(p, &truth)).collect();
            let (mut diff, mut disagree, mut pairs) = (0.0, 0.0, 0usize);
            for a in 0..rotations {
                for b in a + 1..rotations {
                    diff += (errors[a] - errors[b]).abs();
                    disagree += angle_deg(&preds[a], &preds[b]);
                    pairs += 1;
                }
            }
            Some([
                errors[0],
                angle_deg(&averaged, &truth),
                errors.iter().sum::<f64>() / rotations as f64,
                diff / pairs as f64,
                disagree / pairs as f64,
            ])
        })
        .collect();
    let valid: Vec<[f64; 5]> = per_pixel.into_iter().flatten().collect();
    if valid.is_empty() {
        return Err(Error::InvalidInput("no pixel could be predicted".into()));
    }
    let n = valid.len() as f64;
    let mean = |i: usize| valid.iter().map(|v| v[i]).sum::<f64>() / n;
    Ok(RotationReport {
        rotations,
        pixels: valid.len(),
        mae_single_deg: mean(0),
        mae_averaged_deg: mean(1),
        mean_error_deg: mean(2),
        mean_error_difference_deg: mean(3),
        mean_disagreement_deg: mean(4),
    })
}

#[derive(Debug, Clone)]
pub struct Prediction {
    /// Unmasked and flagged pixels are zero and excluded from the mask.
    pub normals: NormalMap,
    pub flagged: Vec<(usize, usize)>,
}

/// [`predict_pixel`] over every pixel of `mask`, in parallel. Pixels that fail (for example
/// because every observation is zero) are flagged instead of failing the whole map.
pub fn predict_map(
    stack: &ImageStack,
    lights: &LightSet,
    net: &Network<f32>,
    cfg: &PredictConfig,
    mask: &Mask,
) -> Result<Prediction> {
    stack.check_lights(lights)?;
    if mask.dims() != stack.dims() {
        return Err(Error::Shape("mask does not match the images".into()));
    }
    if cfg.rotations == 0 {
        return Err(Error::InvalidInput("rotation count must be at least 1".into()));
    }
    let pixels = mask.pixels();
    let results: Vec<Option<Vec3>> = pixels
        .par_iter()
        .map(|&(x, y)| {
            let values = stack.pixel_values(x, y);
            PixelObservations::new(&values, lights)
                .and_then(|obs| predict_pixel(&obs, net, cfg))
                .ok()
        })
        .collect();
    let (w, h) = stack.dims();
    let mut normals = Grid::filled(w, h, Vec3::zeros());
    let mut ok = Grid::filled(w, h, false);
    let mut flagged = Vec::new();
    for (&(x, y), r) in pixels.iter().zip(results) {
        match r {
            Some(n) => {
                *normals.get_mut(x, y) = n;
                *ok.get_mut(x, y) = true;
            }
            None => flagged.push((x, y)),
        }
    }
    Ok(Prediction {
        normals: NormalMap::new(normals, ok)?,
        flagged,
    })
}

/// Mean pairwise angle (degrees) between the inversely rotated predictions of the `K`
/// rotated maps, averaged over the pixels of `mask`: how far the network is from being
/// rotation pseudo-invariant.
pub fn rotation_disagreement(
    stack: &ImageStack,
    lights: &LightSet,
    net: &Network<f32>,
    rotations: usize,
    mask: &Mask,
) -> Result<f64> {
    stack.check_lights(lights)?;
    if rotations < 2 {
        return Err(Error::InvalidInput("disagreement needs at least 2 rotations".into()));
    }
    let width = net.architecture().input_width;
    let per_pixel: Vec<Option<f64>> = mask
        .pixels()
        .par_iter()
        .map(|&(x, y)| {
            let values = stack.pixel_values(x, y);
            let obs = PixelObservations::new(&values, lights).ok()?;
            let preds: Vec<Vec3> = (0..rotations)
                .map(|k| predict_rotated(&obs, net, rotation_angle(k, rotations), width))
                .collect::<Result<_>>()
                .ok()?;
            let mut sum = 0.0;
            let mut pairs = 0usize;
            for a in 0..rotations {
                for b in a + 1..rotations {
                    sum += angle_deg(&preds[a], &preds[b]);
                    pairs += 1;
                }
            }
            Some(sum / pairs as f64)
        })
        .collect();
    let valid: Vec<f64> = per_pixel.into_iter().flatten().collect();
    if valid.is_empty() {
        return Err(Error::InvalidInput("no pixel could be predicted".into()));
    }
    Ok(valid.iter().sum::<f64>() / valid.len() as f64)
}

/// Grayscale from a colour triple: the channel mean.
pub fn rgb_to_gray(r: f32, g: f32, b: f32) -> f32 {
    (r + g + b) / 3.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_material_map, render, sample_lights, Category, HeightfieldScene, Interreflection};

    fn tiny_arch() -> Architecture {
        Architecture {
            input_width: 8,
            stem_filters: 2,
            growth: 2,
            block_layers: 1,
            transition_channels: 2,
            hidden_units: 8,
            dropout: 0.2,
        }
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            width: 8,
            rotations: 3,
            subset_min: 5,
            subset_max: 20,
            pixels_per_scene: Some(12),
            epochs: 2,
            batch_size: 8,
            seed: 9,
            architecture: tiny_arch(),
            ..TrainConfig::default()
        }
    }

    fn rendered(seed_value: u64) -> RenderedSample {
        let scene = HeightfieldScene::sphere(17, 0.9).unwrap();
        let mats = make_material_map(&scene, 4, Category::Specular, seed_value).unwrap();
        let lights = sample_lights(40, 20.0, 1.0, seed_value).unwrap();
        render(&scene, &mats, &lights, Interreflection::Off).unwrap()
    }

    #[test]
    fn rotations_multiply_the_sample_count() {
        let (set, stats) = assemble_training_set(&[rendered(1)], &tiny_cfg()).unwrap();
        assert_eq!(set.len(), 3 * stats.retained_pixels);
        assert_eq!(stats.retained_pixels + stats.skipped_pixels, 12);
        for (i, p) in set.provenance.iter().enumerate() {
            assert_eq!(p.rotation, i % 3);
            let n = set.normals[i];
            assert!(((n[0] * n[0] + n[1] * n[1] + n[2] * n[2]) - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn single_rotation_equals_direct_map() {
        let s = rendered(2);
        let cfg = TrainConfig {
            rotations: 1,
            subset_min: 40,
            subset_max: 40,
            elevation_min_deg: 0.0,
            elevation_max_deg: 0.0,
            ..tiny_cfg()
        };
        let (set, _) = assemble_training_set(std::slice::from_ref(&s), &cfg).unwrap();
        assert!(!set.is_empty());
        for (i, p) in set.provenance.iter().enumerate() {
            let values = s.images.pixel_values(p.pixel.0, p.pixel.1);
            let direct = build_observation_map(&PixelObservations::new(&values, &s.lights).unwrap(), 8).unwrap();
            assert_eq!(set.map(i), direct.cells());
        }
    }

    #[test]
    fn assembly_is_seeded() {
        let samples = [rendered(3)];
        let a = assemble_training_set(&samples, &tiny_cfg()).unwrap();
        let b = assemble_training_set(&samples, &tiny_cfg()).unwrap();
        assert_eq!(a, b);
        let c = assemble_training_set(&samples, &TrainConfig { seed: 10, ..tiny_cfg() }).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn too_few_lights_skips_pixels() {
        let cfg = TrainConfig {
            subset_min: 30,
            subset_max: 30,
            elevation_min_deg: 80.0,
            elevation_max_deg: 90.0,
            ..tiny_cfg()
        };
        let (set, stats) = assemble_training_set(&[rendered(4)], &cfg).unwrap();
        assert!(set.is_empty());
        assert_eq!(stats.skipped_pixels, 12);
    }

    #[test]
    fn training_set_round_trips_through_files() {
        let (set, _) = assemble_training_set(&[rendered(5)], &tiny_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        set.write(dir.path(), "shard").unwrap();
        assert_eq!(TrainingSet::read(dir.path(), "shard").unwrap(), set);
    }

    #[test]
    fn training_is_deterministic_and_logs_every_epoch() {
        let cfg = tiny_cfg();
        let (train_set, _) = assemble_training_set(&[rendered(6)], &cfg).unwrap();
        let (val, _) = assemble_training_set(&[rendered(7)], &TrainConfig { rotations: 1, ..cfg.clone() }).unwrap();
        let mut seen = 0;
        let (a, log_a) = train(&train_set, &val, &cfg, |_| seen += 1).unwrap();
        let (b, log_b) = train(&train_set, &val, &cfg, |_| {}).unwrap();
        assert_eq!(seen, 2);
        assert_eq!(log_a.len(), 2);
        assert_eq!(log_a, log_b);
        assert_eq!(a, b);
        assert!(train(&train_set, &TrainingSet::empty(8), &cfg, |_| {}).is_err());
    }

    #[test]
    fn single_rotation_prediction_is_the_plain_forward_pass() {
        let s = rendered(8);
        let net = Network::<f32>::new(tiny_arch(), 3).unwrap();
        let (x, y) = (8, 8);
        let values = s.images.pixel_values(x, y);
        let obs = PixelObservations::new(&values, &s.lights).unwrap();
        let cfg = PredictConfig { rotations: 1, width: 8 };
        let n = predict_pixel(&obs, &net, &cfg).unwrap();
        let map = build_observation_map(&obs, 8).unwrap();
        let y = net.forward(&Tensor::from_vec(1, 8, 8, map.cells().to_vec()), Mode::Infer).unwrap();
        let direct = Vec3::new(y[0] as f64, y[1] as f64, y[2] as f64);
        assert!((n - direct.normalize()).norm() < 1e-12);
        for k in [1, 4, 10] {
            let n = predict_pixel(&obs, &net, &PredictConfig { rotations: k, width: 8 }).unwrap();
            assert!((n.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn prediction_is_order_and_scale_invariant() {
        let s = rendered(9);
        let net = Network::<f32>::new(tiny_arch(), 4).unwrap();
        let cfg = PredictConfig { rotations: 4, width: 8 };
        let base = predict_map(&s.images, &s.lights, &net, &cfg, s.images.mask()).unwrap();

        let order: Vec<usize> = (0..s.lights.len()).rev().collect();
        let permuted = predict_map(&s.images.select(&order), &s.lights.select(&order), &net, &cfg, s.images.mask()).unwrap();
        assert_eq!(base.normals, permuted.normals);

        let scaled = predict_map(&s.images.scaled(4.0), &s.lights.scaled(4.0).unwrap(), &net, &cfg, s.images.mask()).unwrap();
        assert_eq!(base.normals, scaled.normals);
    }

    #[test]
    fn single_pixel_mask_and_dark_pixels() {
        let s = rendered(10);
        let net = Network::<f32>::new(tiny_arch(), 5).unwrap();
        let cfg = PredictConfig { rotations: 2, width: 8 };
        let mut mask = Grid::filled(17, 17, false);
        *mask.get_mut(8, 9) = true;
        *mask.get_mut(0, 0) = true; // outside the object: every observation is zero
        let p = predict_map(&s.images, &s.lights, &net, &cfg, &mask).unwrap();
        assert_eq!(p.flagged, vec![(0, 0)]);
        assert_eq!(p.normals.mask().pixels(), vec![(8, 9)]);
        assert_eq!(p.normals.get(0, 0), Vec3::zeros());
    }

    #[test]
    fn identical_vectors_average_to_themselves() {
        let n = Vec3::new(0.3, -0.2, 0.9).normalize();
        let mean = average_predictions(&[n; 10]).unwrap();
        assert!((mean - n).norm() < 1e-15);
        assert!(matches!(average_predictions(&[n, -n]), Err(Error::Numerical(_))));
    }

    #[test]
    fn rotation_report_agrees_with_predict_map() {
        let s = rendered(11);
        let net = Network::<f32>::new(tiny_arch(), 6).unwrap();
        let report = rotation_report(&s.images, &s.lights, &net, 4, &s.normals).unwrap();
        for (k, expected) in [(1, report.mae_single_deg), (4, report.mae_averaged_deg)] {
            let p = predict_map(&s.images, &s.lights, &net, &PredictConfig { rotations: k, width: 8 }, s.images.mask()).unwrap();
            let mae = crate::metric::mean_angular_error(&p.normals, &s.normals).unwrap();
            assert!((mae - expected).abs() < 1e-9, "K={k}: {mae} vs {expected}");
        }
        assert!(report.mean_error_difference_deg >= 0.0 && report.mean_disagreement_deg > 0.0);
        let gap = rotation_disagreement(&s.images, &s.lights, &net, 4, s.images.mask()).unwrap();
        assert!((gap - report.mean_disagreement_deg).abs() < 1e-9);
        assert!(rotation_report(&s.images, &s.lights, &net, 1, &s.normals).is_err());
    }

    #[test]
    fn gray_is_channel_mean() {
        assert!((rgb_to_gray(0.3, 0.6, 0.9) - 0.6).abs() < 1e-7);
        assert_eq!(rgb_to_gray(1.0, 1.0, 1.0), 1.0);
    }
}
