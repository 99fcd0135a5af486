//! Dataset preparation, the two training loops, cascade inference and evaluation reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use swe_autograd::optim::{Adam, ReduceLrOnPlateau};
use swe_autograd::{no_grad, Module, Tensor, Var};

use crate::denoise::{DenoiserConfig, DenoiserNet};
use crate::error::{Error, Result};
use crate::forge::{self, Geometry, Sample, Split};
use crate::io::{self, Checkpoint};
use crate::losses::{self, LossWeights};
use crate::metrics::{self, BinaryMask, Summary, MASK_THRESHOLD};
use crate::patchwork::{self, PatchGrid};
use crate::recon::{ReconConfig, ReconMode, ReconNet};

/// Moduli are learned in units of 100 kPa.
pub const KPA_SCALE: f32 = 100.0;
pub const DEVICE_ENV: &str = "SWE_DEVICE";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Recon,
    Denoiser,
}

/// Where denoiser inputs come from during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DenoiserInput {
    /// Y′ produced by the trained reconstruction network.
    Predicted,
    /// Ground truth plus Gaussian noise of `truth_noise_std` (normalized units).
    TruthCorrupted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub mode: ReconMode,
    pub batch: usize,
    pub lr: f64,
    pub plateau_factor: f64,
    pub patience: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps; the running epoch is still closed out.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub base_channels: usize,
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    /// Recon checkpoint used to produce Y′ when no cache exists.
    pub recon_checkpoint: Option<PathBuf>,
    pub yprime_dir: Option<PathBuf>,
    pub kappa: f64,
    pub denoiser_input: DenoiserInput,
    pub truth_noise_std: f64,
    pub device: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Recon,
            mode: ReconMode::Patch,
            batch: 8,
            lr: 1e-3,
            plateau_factor: 0.8,
            patience: 5,
            epochs: 150,
            max_steps: None,
            seed: 0,
            base_channels: 16,
            data_dir: PathBuf::from("data"),
            checkpoint_dir: PathBuf::from("runs"),
            recon_checkpoint: None,
            yprime_dir: None,
            kappa: 0.5,
            denoiser_input: DenoiserInput::Predicted,
            truth_noise_std: 0.05,
            device: std::env::var(DEVICE_ENV).unwrap_or_else(|_| "cpu".into()),
        }
    }
}

/// Config files hold one `[train]` table.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    train: Option<toml::Table>,
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        let batch = match stage {
            Stage::Recon => 8,
            Stage::Denoiser => 16,
        };
        Self { stage, batch, ..Self::default() }
    }

    /// Stage defaults, then the file's `[train]` table on top.
    pub fn from_toml(stage: Stage, text: &str, path: &Path) -> Result<Self> {
        let parse = |e: toml::de::Error| Error::Parse { path: path.to_path_buf(), msg: e.to_string() };
        let file: ConfigFile = toml::from_str(text).map_err(parse)?;
        let base = toml::Table::try_from(Self::for_stage(stage)).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = base;
        for (k, v) in file.train.unwrap_or_default() {
            if !merged.contains_key(&k) && k != "max_steps" && k != "recon_checkpoint" && k != "yprime_dir" {
                return Err(Error::Config(format!("unknown config key {k:?} in {}", path.display())));
            }
            merged.insert(k, v);
        }
        let cfg: Self = toml::Value::Table(merged).try_into().map_err(parse)?;
        if cfg.stage != stage {
            return Err(Error::Config(format!("config is for stage {:?}, not {stage:?}", cfg.stage)));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.epochs == 0 || self.base_channels == 0 {
            return Err(Error::Config("batch, epochs and base_channels must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Config(format!("lr {} / plateau factor {} out of range", self.lr, self.plateau_factor)));
        }
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            return Err(Error::Config(format!("kappa {} outside (0, 1]", self.kappa)));
        }
        Ok(())
    }
}

/// Interleaves several datasets, drawing `quota[i]` items from dataset `i` per epoch.
#[derive(Clone, Debug)]
pub struct MixedSampler {
    sizes: Vec<usize>,
    quotas: Vec<usize>,
}

impl MixedSampler {
    pub fn new(sizes: Vec<usize>, quotas: Vec<usize>) -> Result<Self> {
        if sizes.len() != quotas.len() || sizes.is_empty() {
            return Err(Error::Config("one quota per dataset required".into()));
        }
        if sizes.iter().zip(&quotas).any(|(&s, &q)| s == 0 && q > 0) {
            return Err(Error::Config("positive quota on an empty dataset".into()));
        }
        Ok(Self { sizes, quotas })
    }

    pub fn single(n: usize) -> Self {
        Self { sizes: vec![n], quotas: vec![n] }
    }

    /// Global item indices (datasets laid out back to back) for one shuffled epoch.
    pub fn epoch(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut base = 0;
        let mut out = Vec::new();
        for (&size, &quota) in self.sizes.iter().zip(&self.quotas) {
            let mut idx: Vec<usize> = (0..size).collect();
            let mut taken = 0;
            while taken < quota {
                idx.shuffle(rng);
                let k = (quota - taken).min(size);
                out.extend(idx[..k].iter().map(|i| base + i));
                taken += k;
            }
            base += size;
        }
        out.shuffle(rng);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub train: BTreeMap<String, f64>,
    #[serde(with = "metrics::nonfinite")]
    pub val_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub step_losses: Vec<f64>,
    #[serde(with = "metrics::nonfinite")]
    pub best_val: f64,
    pub best_epoch: usize,
}

/// Per-sample metric row. Moduli in kPa, distances in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    #[serde(with = "metrics::nonfinite")]
    pub mae_fg: f64,
    #[serde(with = "metrics::nonfinite")]
    pub mae_bg: f64,
    #[serde(with = "metrics::nonfinite")]
    pub cnr: f64,
    #[serde(with = "metrics::nonfinite")]
    pub psnr: f64,
    #[serde(with = "metrics::nonfinite")]
    pub psnr_fg: f64,
    #[serde(with = "metrics::nonfinite")]
    pub psnr_bg: f64,
    #[serde(with = "metrics::nonfinite")]
    pub ssim: f64,
    #[serde(with = "metrics::nonfinite")]
    pub iou: f64,
    #[serde(with = "metrics::nonfinite")]
    pub f1: f64,
    #[serde(with = "metrics::nonfinite")]
    pub hd: f64,
    #[serde(with = "metrics::nonfinite")]
    pub assd: f64,
    #[serde(with = "metrics::nonfinite")]
    pub bg_std: f64,
    #[serde(with = "metrics::nonfinite")]
    pub yprime_mae_fg: f64,
    #[serde(with = "metrics::nonfinite")]
    pub yprime_mae_bg: f64,
    #[serde(with = "metrics::nonfinite")]
    pub yprime_ssim: f64,
    #[serde(with = "metrics::nonfinite")]
    pub yprime_bg_std: f64,
}

pub const METRIC_COLUMNS: [&str; 11] =
    ["MAE_FG", "MAE_BG", "CNR", "PSNR", "PSNR_FG", "PSNR_BG", "SSIM", "IoU", "F1", "HD", "ASSD"];

impl MetricRow {
    pub fn values(&self) -> [f64; 11] {
        [
            self.mae_fg,
            self.mae_bg,
            self.cnr,
            self.psnr,
            self.psnr_fg,
            self.psnr_bg,
            self.ssim,
            self.iou,
            self.f1,
            self.hd,
            self.assd,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub split: String,
    pub rows: Vec<MetricRow>,
    pub aggregate: BTreeMap<String, Summary>,
}

impl MetricTable {
    pub fn new(split: &str, rows: Vec<MetricRow>) -> Self {
        let aggregate = METRIC_COLUMNS
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let col: Vec<f64> = rows.iter().map(|r| r.values()[i]).collect();
                (name.to_string(), metrics::summarize(&col))
            })
            .collect();
        Self { split: split.into(), rows, aggregate }
    }

    /// Plain text table: one line per sample, then mean / median / std.
    pub fn render(&self) -> String {
        let mut s = format!("{:<10}", "sample");
        for c in METRIC_COLUMNS {
            s += &format!(" {c:>9}");
        }
        s.push('\n');
        for r in &self.rows {
            s += &format!("{:<10}", r.id);
            for v in r.values() {
                s += &format!(" {v:>9.3}");
            }
            s.push('\n');
        }
        for (label, pick) in [("mean", 0), ("median", 1), ("std", 2)] {
            s += &format!("{label:<10}");
            for c in METRIC_COLUMNS {
                let a = &self.aggregate[c];
                s += &format!(" {:>9.3}", [a.mean, a.median, a.std][pick]);
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub stage: String,
    pub fingerprint: u32,
    pub config: String,
    pub train_config: Option<TrainConfig>,
    pub log: TrainLog,
    pub metrics: Vec<MetricTable>,
    pub wall_clock_s: f64,
    pub artifacts: Vec<PathBuf>,
    /// Set when the numbers come from weights that were never trained.
    pub untrained: bool,
}

impl RunReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), msg: e.to_string() })
    }
}

fn stack(items: &[&Tensor<f32>]) -> Tensor<f32> {
    let mut shape = vec![items.len(), 1];
    shape.extend_from_slice(items[0].shape());
    let mut data = Vec::with_capacity(items.len() * items[0].len());
    for t in items {
        data.extend_from_slice(t.data());
    }
    Tensor::new(&shape, data)
}

fn crop2(t: &Tensor<f32>, a: usize, h: usize, l: usize, w: usize) -> Tensor<f32> {
    t.narrow(0, a, h).narrow(1, l, w)
}

/// Per-region inputs and targets for stage 1; patches are cut lazily.
pub struct ReconData {
    pub mode: ReconMode,
    pub grid: Option<PatchGrid>,
    /// Normalized (and in patch mode edge-padded) region volumes.
    volumes: Vec<Tensor<f32>>,
    /// Region truth in units of 100 kPa.
    targets: Vec<Tensor<f32>>,
    /// (volume index, input anchor, output anchor).
    items: Vec<(usize, (usize, usize), (usize, usize))>,
}

impl ReconData {
    pub fn new(samples: &[&Sample], geom: &Geometry, mode: ReconMode) -> Result<Self> {
        let layout = &geom.layout;
        let region = (layout.region_axial_px, layout.region_lateral_px);
        let grid = match mode {
            ReconMode::Patch => Some(PatchGrid::tiling(region, geom.patch.0, geom.patch.1)),
            ReconMode::Full => None,
        };
        let (mut volumes, mut targets, mut items) = (Vec::new(), Vec::new(), Vec::new());
        for s in samples {
            for (k, r) in s.regions.iter().enumerate() {
                let norm = forge::min_max_normalize(r)?;
                let v = volumes.len();
                match &grid {
                    Some(g) => {
                        volumes.push(patchwork::pad_edges(&norm.data, g.padding));
                        for (&a, o) in g.anchors.iter().zip(g.output_anchors()) {
                            items.push((v, a, o));
                        }
                    }
                    None => {
                        volumes.push(norm.data);
                        items.push((v, (0, 0), (0, 0)));
                    }
                }
                targets.push(forge::region_truth(&s.truth, layout, k).map(|x| x / KPA_SCALE));
            }
        }
        Ok(Self { mode, grid, volumes, targets, items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Network input `(T, h, w)`.
    pub fn input_shape(&self) -> (usize, usize, usize) {
        let s = self.volumes.first().map(|v| v.shape().to_vec()).unwrap_or_else(|| vec![0, 0, 0]);
        match &self.grid {
            Some(g) => (s[0], g.ap, g.lp),
            None => (s[0], s[1], s[2]),
        }
    }

    /// `(B, 1, T, h, w)` inputs and `(B, 1, oa, ol)` targets.
    pub fn batch(&self, idx: &[usize]) -> (Tensor<f32>, Tensor<f32>) {
        let mut xs = Vec::with_capacity(idx.len());
        let mut ys = Vec::with_capacity(idx.len());
        for &i in idx {
            let (v, (a, l), (oa, ol)) = self.items[i];
            match &self.grid {
                Some(g) => {
                    xs.push(self.volumes[v].narrow(1, a, g.ap).narrow(2, l, g.lp));
                    ys.push(crop2(&self.targets[v], oa, g.out_a, ol, g.out_l));
                }
                None => {
                    xs.push(self.volumes[v].clone());
                    ys.push(self.targets[v].clone());
                }
            }
        }
        (stack(&xs.iter().collect::<Vec<_>>()), stack(&ys.iter().collect::<Vec<_>>()))
    }
}

pub fn recon_config(geom: &Geometry, mode: ReconMode, base_channels: usize, seed: u64) -> ReconConfig {
    let t = geom.layout.frames_t;
    let shape = match mode {
        ReconMode::Patch => (t, geom.patch.0, geom.patch.1),
        ReconMode::Full => (t, geom.layout.region_axial_px, geom.layout.region_lateral_px),
    };
    ReconConfig::new(mode, shape, base_channels, seed)
}

type StepFn<'a, N> = dyn FnMut(&N, &[usize]) -> Result<(Var<f32>, BTreeMap<String, f64>)> + 'a;
type MonitorFn<'a, N> = dyn FnMut(&N) -> Result<f64> + 'a;

/// Adam with plateau decay on the monitored loss; keeps the best-by-monitor weights.
fn fit<N: Module<f32>>(
    net: &mut N,
    config_json: &str,
    cfg: &TrainConfig,
    sampler: &MixedSampler,
    step: &mut StepFn<'_, N>,
    monitor: &mut MonitorFn<'_, N>,
) -> Result<(Checkpoint, TrainLog)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let mut opt = Adam::<f32>::new(cfg.lr);
    let mut sched = ReduceLrOnPlateau::new(cfg.plateau_factor, cfg.patience);
    let mut log = TrainLog { best_val: f64::INFINITY, ..TrainLog::default() };
    let mut best = Checkpoint::capture(config_json, net);
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);
    for epoch in 0..cfg.epochs {
        let order = sampler.epoch(&mut rng);
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch) {
            if log.step_losses.len() >= max_steps {
                break;
            }
            let (loss, terms) = step(net, chunk)?;
            let v = loss.value().item() as f64;
            if !v.is_finite() {
                let snap = cfg.checkpoint_dir.join("divergence.swck");
                let note = match fs::create_dir_all(&cfg.checkpoint_dir).map(|_| Checkpoint::capture(config_json, net).save(&snap)) {
                    Ok(Ok(())) => format!("snapshot at {}", snap.display()),
                    _ => "snapshot could not be written".into(),
                };
                return Err(Error::Divergence(format!(
                    "loss {v} at epoch {epoch}, step {}; terms {terms:?}; {note}",
                    log.step_losses.len()
                )));
            }
            let grads = loss.backward();
            opt.step(net, &grads);
            log.step_losses.push(v);
            for (k, t) in terms {
                *sums.entry(k).or_default() += t;
            }
            batches += 1;
        }
        if batches == 0 {
            break;
        }
        sums.values_mut().for_each(|v| *v /= batches as f64);
        let val = monitor(net)?;
        if !val.is_finite() {
            return Err(Error::Divergence(format!("monitored loss {val} after epoch {epoch}")));
        }
        if val < log.best_val {
            log.best_val = val;
            log.best_epoch = epoch;
            best = Checkpoint::capture(config_json, net);
        }
        log.epochs.push(EpochLog { epoch, steps: log.step_losses.len(), lr: opt.lr, train: sums, val_loss: val });
        log::info!("epoch {epoch}: steps {} lr {:.2e} monitor {val:.6}", log.step_losses.len(), opt.lr);
        opt.lr = sched.observe(val, opt.lr);
    }
    Ok((best, log))
}

fn eval_recon_loss(net: &ReconNet<f32>, data: &ReconData, batch: usize) -> Result<f64> {
    no_grad(|| {
        let mut total = 0.0;
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(batch) {
            let (x, y) = data.batch(chunk);
            let pred = net.forward(&Var::constant(x), false)?;
            total += losses::recon_mae(&pred, &Var::constant(y))?.value().item() as f64 * chunk.len() as f64;
        }
        Ok(total / data.len() as f64)
    })
}

pub struct Trained<N> {
    pub net: N,
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// Stage 1 on in-memory samples. Monitors the validation split, or the training set when it is empty.
pub fn train_recon(train: &[&Sample], val: &[&Sample], geom: &Geometry, cfg: &TrainConfig) -> Result<Trained<ReconNet<f32>>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let data = ReconData::new(train, geom, cfg.mode)?;
    let val_data = if val.is_empty() { None } else { Some(ReconData::new(val, geom, cfg.mode)?) };
    let rc = recon_config(geom, cfg.mode, cfg.base_channels, cfg.seed);
    let json = rc.to_json();
    let mut net = ReconNet::<f32>::new(rc)?;
    let batch = cfg.batch;
    let mut step = |net: &ReconNet<f32>, idx: &[usize]| {
        let (x, y) = data.batch(idx);
        let pred = net.forward(&Var::constant(x), true)?;
        let loss = losses::recon_mae(&pred, &Var::constant(y))?;
        let terms = BTreeMap::from([("mae".to_string(), loss.value().item() as f64)]);
        Ok((loss, terms))
    };
    let mut monitor = |net: &ReconNet<f32>| eval_recon_loss(net, val_data.as_ref().unwrap_or(&data), batch);
    let (checkpoint, log) = fit(&mut net, &json, cfg, &MixedSampler::single(data.len()), &mut step, &mut monitor)?;
    checkpoint.restore(&json, &mut net)?;
    Ok(Trained { net, checkpoint, log })
}

/// Patch or full-region inference and merge; returns Y′ in units of 100 kPa, shape (A, L′).
pub fn reconstruct(net: &ReconNet<f32>, sample: &Sample, geom: &Geometry) -> Result<Tensor<f32>> {
    let layout = &geom.layout;
    if sample.regions.len() != layout.r_regions {
        return Err(Error::Config(format!("sample has {} regions, layout {}", sample.regions.len(), layout.r_regions)));
    }
    let region = (layout.region_axial_px, layout.region_lateral_px);
    let alpha = net.config.tukey_alpha;
    let mut maps = Vec::with_capacity(layout.r_regions);
    no_grad(|| -> Result<()> {
        for r in &sample.regions {
            let norm = forge::min_max_normalize(r)?;
            let map = match net.config.mode {
                ReconMode::Full => {
                    let y = net.forward(&Var::constant(stack(&[&norm.data])), false)?;
                    y.value().clone().reshape(&[region.0, region.1])
                }
                ReconMode::Patch => {
                    let g = PatchGrid::tiling(region, geom.patch.0, geom.patch.1);
                    let padded = patchwork::pad_edges(&norm.data, g.padding);
                    let patches = patchwork::extract_patches(&padded, &g)?;
                    let outs = g.output_anchors();
                    let mut preds = Vec::with_capacity(patches.len());
                    for (chunk, anchors) in patches.chunks(16).zip(outs.chunks(16)) {
                        let xs: Vec<&Tensor<f32>> = chunk.iter().map(|(_, p)| p).collect();
                        let y = net.forward(&Var::constant(stack(&xs)), false)?;
                        for (i, &o) in anchors.iter().enumerate() {
                            preds.push((o, y.value().narrow(0, i, 1).reshape(&[g.out_a, g.out_l])));
                        }
                    }
                    patchwork::overlap_add(&preds, region, &patchwork::tukey2d(g.out_a, g.out_l, alpha)?)?
                }
            };
            maps.push(map);
        }
        Ok(())
    })?;
    let window = patchwork::lateral_window(region.0, region.1, alpha)?;
    patchwork::merge_regions(&maps, layout, &window)
}

/// Stage 2 inputs: Y′ (normalized), truth (normalized) and mask, all (A, L′).
pub struct DenoiseExample {
    pub id: String,
    pub y_prime: Tensor<f32>,
    pub truth: Tensor<f32>,
    pub mask: Tensor<f32>,
}

impl DenoiseExample {
    pub fn new(sample: &Sample, y_prime: Tensor<f32>) -> Result<Self> {
        let truth = sample.truth.modulus.map(|x| x / KPA_SCALE);
        if y_prime.shape() != truth.shape() {
            return Err(Error::Shape { expected: truth.shape().to_vec(), got: y_prime.shape().to_vec() });
        }
        Ok(Self { id: sample.meta.id.clone(), y_prime, truth, mask: sample.truth.mask.clone() })
    }

    /// Truth plus seeded Gaussian noise, clamped at zero.
    pub fn truth_corrupted(sample: &Sample, std: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ sample.meta.seed);
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let noisy = sample.truth.modulus.map(|x| x / KPA_SCALE);
        let data = noisy.data().iter().map(|&v| (v + normal.sample(&mut rng) as f32).max(0.0)).collect();
        Self::new(sample, Tensor::new(noisy.shape(), data))
    }
}

fn denoise_batch(ex: &[DenoiseExample], idx: &[usize]) -> [Tensor<f32>; 3] {
    let pick = |f: fn(&DenoiseExample) -> &Tensor<f32>| stack(&idx.iter().map(|&i| f(&ex[i])).collect::<Vec<_>>());
    [pick(|e| &e.y_prime), pick(|e| &e.truth), pick(|e| &e.mask)]
}

fn eval_denoise_loss(net: &DenoiserNet<f32>, ex: &[DenoiseExample], w: &LossWeights, batch: usize) -> Result<f64> {
    no_grad(|| {
        let mut total = 0.0;
        let idx: Vec<usize> = (0..ex.len()).collect();
        for chunk in idx.chunks(batch) {
            let [x, y, m] = denoise_batch(ex, chunk);
            let out = net.forward(&Var::constant(x), false)?;
            let (_, b) = losses::compound_loss(out.as_loss_inputs(), &Var::constant(y), &Var::constant(m), w)?;
            total += b.total * chunk.len() as f64;
        }
        Ok(total / ex.len() as f64)
    })
}

/// Stage 2 on prepared examples. The loss weights are frozen from the training masks.
pub fn train_denoiser(
    train: &[DenoiseExample],
    val: &[DenoiseExample],
    cfg: &TrainConfig,
    ratio_source: &str,
) -> Result<(Trained<DenoiserNet<f32>>, LossWeights)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("no training examples for the denoiser".into()));
    }
    let w = LossWeights::from_masks(train.iter().map(|e| &e.mask), cfg.kappa, ratio_source)?;
    let dc = DenoiserConfig::new(cfg.base_channels, cfg.seed);
    let json = dc.to_json();
    let mut net = DenoiserNet::<f32>::new(dc)?;
    let batch = cfg.batch;
    let mut step = |net: &DenoiserNet<f32>, idx: &[usize]| {
        let [x, y, m] = denoise_batch(train, idx);
        let out = net.forward(&Var::constant(x), true)?;
        let (loss, b) = losses::compound_loss(out.as_loss_inputs(), &Var::constant(y), &Var::constant(m), &w)?;
        let terms = BTreeMap::from([
            ("total".to_string(), b.total),
            ("l_fg".to_string(), b.l_fg),
            ("l_bg".to_string(), b.l_bg),
            ("denoise".to_string(), b.denoise),
            ("fuse".to_string(), b.fuse),
            ("tv".to_string(), b.tv),
            ("iou".to_string(), b.iou),
        ]);
        Ok((loss, terms))
    };
    let monitor_set = if val.is_empty() { train } else { val };
    let mut monitor = |net: &DenoiserNet<f32>| eval_denoise_loss(net, monitor_set, &w, batch);
    let (checkpoint, log) = fit(&mut net, &json, cfg, &MixedSampler::single(train.len()), &mut step, &mut monitor)?;
    checkpoint.restore(&json, &mut net)?;
    Ok((Trained { net, checkpoint, log }, w))
}

/// Cascade output for one sample; moduli in kPa.
pub struct Inference {
    pub y_prime: Tensor<f32>,
    pub y: Tensor<f32>,
    pub m: Tensor<f32>,
}

pub fn denoise(net: &DenoiserNet<f32>, y_prime_norm: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (a, l) = (y_prime_norm.dim(0), y_prime_norm.dim(1));
    no_grad(|| {
        let out = net.forward(&Var::constant(stack(&[y_prime_norm])), false)?;
        Ok((out.y.value().clone().reshape(&[a, l]), out.m.value().clone().reshape(&[a, l])))
    })
}

pub fn infer(recon: &ReconNet<f32>, denoiser: &DenoiserNet<f32>, sample: &Sample, geom: &Geometry) -> Result<Inference> {
    let yp = reconstruct(recon, sample, geom)?;
    let (y, m) = denoise(denoiser, &yp)?;
    Ok(Inference { y_prime: yp.map(|v| v * KPA_SCALE), y: y.map(|v| v * KPA_SCALE), m })
}

fn weights<N: Module<f32>>(net: &N) -> Vec<Vec<f32>> {
    let mut out = Vec::new();
    net.visit("", &mut |_, p| out.push(p.value.data().to_vec()));
    out
}

/// True when either network still holds its seeded initialization, so no optimizer step ever ran.
pub fn untrained(recon: &ReconNet<f32>, denoiser: &DenoiserNet<f32>) -> Result<bool> {
    let fresh_recon = ReconNet::<f32>::new(recon.config.clone())?;
    let fresh_denoiser = DenoiserNet::<f32>::new(denoiser.config.clone())?;
    Ok(weights(recon) == weights(&fresh_recon) || weights(denoiser) == weights(&fresh_denoiser))
}

/// Metrics of a cascade output against the sample truth.
pub fn score(id: &str, inf: &Inference, truth: &forge::PhantomTruth) -> Result<MetricRow> {
    let gt = &truth.modulus;
    let gt_mask = BinaryMask::threshold(&truth.mask, MASK_THRESHOLD);
    let pred_mask = BinaryMask::threshold(&inf.m, MASK_THRESHOLD);
    let (mae_fg, mae_bg) = metrics::region_mae(&inf.y, gt, &gt_mask)?;
    let (ymf, ymb) = metrics::region_mae(&inf.y_prime, gt, &gt_mask)?;
    let overlap = metrics::iou_f1(&pred_mask, &gt_mask);
    let (hd, assd) = if pred_mask.count() > 0 {
        metrics::hd_assd(&pred_mask, &gt_mask, (1.0, 1.0))?
    } else {
        (f64::INFINITY, f64::INFINITY)
    };
    let bg_keep: Vec<bool> = gt_mask.data.iter().map(|&m| !m).collect();
    let psnr_or_nan = |r: Result<f64>| r.unwrap_or(f64::NAN);
    Ok(MetricRow {
        id: id.into(),
        mae_fg,
        mae_bg,
        cnr: metrics::cnr(&inf.y, &gt_mask)?,
        psnr: psnr_or_nan(metrics::psnr(gt, &inf.y)),
        psnr_fg: psnr_or_nan(metrics::psnr_masked(gt, &inf.y, &gt_mask.data)),
        psnr_bg: psnr_or_nan(metrics::psnr_masked(gt, &inf.y, &bg_keep)),
        ssim: metrics::ssim(gt, &inf.y)?,
        iou: overlap.iou,
        f1: overlap.f1,
        hd,
        assd,
        bg_std: metrics::background_std(&inf.y, &gt_mask)?,
        yprime_mae_fg: ymf,
        yprime_mae_bg: ymb,
        yprime_ssim: metrics::ssim(gt, &inf.y_prime)?,
        yprime_bg_std: metrics::background_std(&inf.y_prime, &gt_mask)?,
    })
}

fn gray(v: f32, lo: f32, hi: f32) -> u8 {
    (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Side-by-side panel truth | Y′ | Y | M, each upscaled by an integer factor.
pub fn write_panel(path: &Path, truth: &Tensor<f32>, inf: &Inference) -> Result<()> {
    let (a, l) = (truth.dim(0), truth.dim(1));
    let sx = (96 / l).max(1) as u32;
    let sy = 1u32;
    let hi = truth.max().max(inf.y.max()).max(inf.y_prime.max()).max(1.0);
    let gap = 4u32;
    let pw = l as u32 * sx;
    let mut img = image::GrayImage::from_pixel(4 * pw + 3 * gap, a as u32 * sy, image::Luma([255]));
    let panels: [(&Tensor<f32>, f32); 4] = [(truth, hi), (&inf.y_prime, hi), (&inf.y, hi), (&inf.m, 1.0)];
    for (p, (t, top)) in panels.iter().enumerate() {
        let x0 = p as u32 * (pw + gap);
        for i in 0..a {
            for j in 0..l {
                let v = gray(t.data()[i * l + j], 0.0, *top);
                for dy in 0..sy {
                    for dx in 0..sx {
                        img.put_pixel(x0 + j as u32 * sx + dx, i as u32 * sy + dy, image::Luma([v]));
                    }
                }
            }
        }
    }
    img.save(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: std::io::Error::other(e) })
}

pub fn load_recon(path: &Path) -> Result<ReconNet<f32>> {
    let ck = Checkpoint::load(path)?;
    let rc: ReconConfig =
        serde_json::from_str(&ck.config).map_err(|e| Error::Parse { path: path.to_path_buf(), msg: e.to_string() })?;
    let mut net = ReconNet::new(rc)?;
    ck.restore(&ck.config, &mut net)?;
    Ok(net)
}

pub fn load_denoiser(path: &Path) -> Result<DenoiserNet<f32>> {
    let ck = Checkpoint::load(path)?;
    let dc: DenoiserConfig =
        serde_json::from_str(&ck.config).map_err(|e| Error::Parse { path: path.to_path_buf(), msg: e.to_string() })?;
    let mut net = DenoiserNet::new(dc)?;
    ck.restore(&ck.config, &mut net)?;
    Ok(net)
}

/// The recon network must have been built for this dataset's geometry.
pub fn check_recon_geometry(net: &ReconNet<f32>, geom: &Geometry) -> Result<()> {
    let want = recon_config(geom, net.config.mode, net.config.base_channels, net.config.seed).input_shape;
    if net.config.input_shape != want {
        return Err(Error::Config(format!(
            "recon checkpoint expects input {:?}, dataset layout gives {want:?}",
            net.config.input_shape
        )));
    }
    Ok(())
}

fn split_refs(samples: &[Sample], split: Split) -> Vec<&Sample> {
    samples.iter().filter(|s| s.meta.split == split).collect()
}

fn fresh_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// File-based stage 1: dataset directory in, `recon.swck` and `recon_report.json` out.
pub fn run_train_recon(cfg: &TrainConfig) -> Result<RunReport> {
    let start = Instant::now();
    let (manifest, samples) = io::read_dataset(&cfg.data_dir)?;
    let train = split_refs(&samples, Split::Train);
    let val = split_refs(&samples, Split::Val);
    let trained = train_recon(&train, &val, &manifest.geometry, cfg)?;
    fresh_dir(&cfg.checkpoint_dir)?;
    let ck_path = cfg.checkpoint_dir.join("recon.swck");
    trained.checkpoint.save(&ck_path)?;
    let mut artifacts = vec![ck_path];
    if let Some(dir) = &cfg.yprime_dir {
        artifacts.extend(cache_yprime(&trained.net, &samples, &manifest.geometry, dir)?);
    }
    let report = RunReport {
        stage: "recon".into(),
        fingerprint: trained.checkpoint.fingerprint,
        config: trained.checkpoint.config.clone(),
        train_config: Some(cfg.clone()),
        log: trained.log,
        metrics: Vec::new(),
        wall_clock_s: start.elapsed().as_secs_f64(),
        artifacts,
        untrained: false,
    };
    let path = cfg.checkpoint_dir.join("recon_report.json");
    report.save(&path)?;
    Ok(report)
}

/// Writes Y′ (normalized) for every sample to `dir/<id>.swed`.
pub fn cache_yprime(net: &ReconNet<f32>, samples: &[Sample], geom: &Geometry, dir: &Path) -> Result<Vec<PathBuf>> {
    check_recon_geometry(net, geom)?;
    fresh_dir(dir)?;
    samples
        .iter()
        .map(|s| {
            let path = io::yprime_path(dir, &s.meta.id);
            io::write_tensor(&path, &reconstruct(net, s, geom)?)?;
            Ok(path)
        })
        .collect()
}

fn load_examples(cfg: &TrainConfig, samples: &[Sample], geom: &Geometry) -> Result<Vec<DenoiseExample>> {
    if cfg.denoiser_input == DenoiserInput::TruthCorrupted {
        return samples.iter().map(|s| DenoiseExample::truth_corrupted(s, cfg.truth_noise_std, cfg.seed)).collect();
    }
    if let Some(dir) = &cfg.yprime_dir {
        let cached: Option<Vec<_>> = samples
            .iter()
            .map(|s| io::yprime_path(dir, &s.meta.id))
            .map(|p| p.exists().then_some(p))
            .collect();
        if let Some(paths) = cached {
            return samples.iter().zip(paths).map(|(s, p)| DenoiseExample::new(s, io::read_tensor(&p)?)).collect();
        }
    }
    let Some(ck) = &cfg.recon_checkpoint else {
        return Err(Error::Config("denoiser needs a Y′ cache (yprime_dir) or a recon_checkpoint".into()));
    };
    let net = load_recon(ck)?;
    check_recon_geometry(&net, geom)?;
    if let Some(dir) = &cfg.yprime_dir {
        cache_yprime(&net, samples, geom, dir)?;
    }
    samples.iter().map(|s| DenoiseExample::new(s, reconstruct(&net, s, geom)?)).collect()
}

/// File-based stage 2: `denoiser.swck` and `denoiser_report.json`.
pub fn run_train_denoiser(cfg: &TrainConfig) -> Result<RunReport> {
    let start = Instant::now();
    let (manifest, samples) = io::read_dataset(&cfg.data_dir)?;
    let mut examples = load_examples(cfg, &samples, &manifest.geometry)?;
    let mut val = Vec::new();
    let mut train = Vec::new();
    for (s, e) in samples.iter().zip(examples.drain(..)) {
        match s.meta.split {
            Split::Train => train.push(e),
            Split::Val => val.push(e),
            Split::Test => {}
        }
    }
    let source = format!("{} (train split, seed {})", cfg.data_dir.display(), manifest.seed);
    let (trained, weights) = train_denoiser(&train, &val, cfg, &source)?;
    fresh_dir(&cfg.checkpoint_dir)?;
    let ck_path = cfg.checkpoint_dir.join("denoiser.swck");
    trained.checkpoint.save(&ck_path)?;
    let weights_path = cfg.checkpoint_dir.join("loss_weights.json");
    let text = serde_json::to_string_pretty(&weights).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&weights_path, text).map_err(|e| Error::io(&weights_path, e))?;
    let report = RunReport {
        stage: "denoiser".into(),
        fingerprint: trained.checkpoint.fingerprint,
        config: trained.checkpoint.config.clone(),
        train_config: Some(cfg.clone()),
        log: trained.log,
        metrics: Vec::new(),
        wall_clock_s: start.elapsed().as_secs_f64(),
        artifacts: vec![ck_path, weights_path],
        untrained: false,
    };
    report.save(&cfg.checkpoint_dir.join("denoiser_report.json"))?;
    Ok(report)
}

/// Cascade over one split; writes panels and `metrics_<split>.txt` into `out`.
pub fn evaluate(
    recon: &ReconNet<f32>,
    denoiser: &DenoiserNet<f32>,
    samples: &[Sample],
    geom: &Geometry,
    split: Split,
    out: &Path,
) -> Result<(MetricTable, Vec<PathBuf>)> {
    check_recon_geometry(recon, geom)?;
    let chosen = split_refs(samples, split);
    if chosen.is_empty() {
        return Err(Error::Config(format!("split {} is empty", split.name())));
    }
    fresh_dir(out)?;
    let mut rows = Vec::with_capacity(chosen.len());
    let mut artifacts = Vec::new();
    for s in chosen {
        let inf = infer(recon, denoiser, s, geom)?;
        rows.push(score(&s.meta.id, &inf, &s.truth)?);
        let panel = out.join(format!("{}_{}.png", split.name(), s.meta.id));
        write_panel(&panel, &s.truth.modulus, &inf)?;
        artifacts.push(panel);
    }
    let table = MetricTable::new(split.name(), rows);
    let path = out.join(format!("metrics_{}.txt", split.name()));
    fs::write(&path, table.render()).map_err(|e| Error::io(&path, e))?;
    artifacts.push(path);
    Ok((table, artifacts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forge::{plan_samples, realize, Preset, SplitPolicy};

    #[test]
    fn stage_defaults() {
        assert_eq!(TrainConfig::for_stage(Stage::Recon).batch, 8);
        let d = TrainConfig::for_stage(Stage::Denoiser);
        assert_eq!((d.batch, d.lr, d.plateau_factor, d.patience, d.epochs), (16, 1e-3, 0.8, 5, 150));
    }

    #[test]
    fn config_file_overrides_and_rejects_unknown_keys() {
        let p = Path::new("t.toml");
        let c = TrainConfig::from_toml(Stage::Recon, "[train]\nbatch = 4\nmax_steps = 10\n", p).unwrap();
        assert_eq!((c.batch, c.max_steps, c.epochs), (4, Some(10), 150));
        assert!(matches!(TrainConfig::from_toml(Stage::Recon, "[train]\nbogus = 1\n", p), Err(Error::Config(_))));
        assert!(TrainConfig::from_toml(Stage::Recon, "[train]\nlr = -1.0\n", p).is_err());
    }

    #[test]
    fn sampler_honours_quotas() {
        let s = MixedSampler::new(vec![3, 5], vec![6, 2]).unwrap();
        let e = s.epoch(&mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(e.len(), 8);
        assert_eq!(e.iter().filter(|&&i| i < 3).count(), 6);
        assert!(MixedSampler::new(vec![0], vec![1]).is_err());
    }

    #[test]
    fn patch_batches_line_up_with_targets() {
        let geom = Preset::Desk.geometry();
        let meta = plan_samples(&geom, 1, f64::INFINITY, 3, SplitPolicy::AllTrain);
        let s = realize(&geom, &meta[0]).unwrap();
        let data = ReconData::new(&[&s], &geom, ReconMode::Patch).unwrap();
        assert_eq!(data.input_shape(), (32, 27, 10));
        let (x, y) = data.batch(&[0, 5]);
        assert_eq!(x.shape(), &[2, 1, 32, 27, 10]);
        assert_eq!(y.shape(), &[2, 1, 9, 4]);
        let (_, _, (oa, ol)) = data.items[5];
        let want = crop2(&s.truth.modulus, oa, 9, ol, 4).map(|v| v / KPA_SCALE);
        assert_eq!(&y.data()[36..], want.data());
    }
}
