//! Bi-level phantoms and an analytic traveling-pulse surrogate for multi-push shear-wave motion.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use swe_autograd::Tensor;

use crate::error::{Error, Result};

/// Smallest lateral distance (mm) used in the geometric spreading factor.
pub const SPREAD_FLOOR_MM: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub roi_axial_mm: f64,
    pub roi_lateral_mm: f64,
    /// Pixels per mm along depth.
    pub axial_res: f64,
    /// Pixels per mm along the lateral axis of the stored truth grid.
    pub lateral_res: f64,
    /// (axial mm, lateral mm) from the ROI's top-left corner.
    pub inclusion_center: (f64, f64),
    pub inclusion_diameter_mm: f64,
    pub e_inclusion_kpa: f64,
    pub e_background_kpa: f64,
    pub density_kg_m3: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            roi_axial_mm: 21.0,
            roi_lateral_mm: 40.0,
            axial_res: 8.0,
            lateral_res: 1.0,
            inclusion_center: (10.5, 20.0),
            inclusion_diameter_mm: 8.0,
            e_inclusion_kpa: 40.0,
            e_background_kpa: 20.0,
            density_kg_m3: 1000.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn grid_shape(&self) -> (usize, usize) {
        ((self.roi_axial_mm * self.axial_res).round() as usize, (self.roi_lateral_mm * self.lateral_res).round() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("roi_axial_mm", self.roi_axial_mm),
            ("roi_lateral_mm", self.roi_lateral_mm),
            ("axial_res", self.axial_res),
            ("lateral_res", self.lateral_res),
            ("e_inclusion_kpa", self.e_inclusion_kpa),
            ("e_background_kpa", self.e_background_kpa),
            ("density_kg_m3", self.density_kg_m3),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !(3.0..=12.0).contains(&self.inclusion_diameter_mm) {
            return Err(Error::Config(format!(
                "inclusion diameter {} mm outside [3, 12] mm",
                self.inclusion_diameter_mm
            )));
        }
        let r = self.inclusion_diameter_mm / 2.0;
        let (za, xl) = self.inclusion_center;
        let margins = [
            ("top", za - r),
            ("bottom", self.roi_axial_mm - za - r),
            ("left", xl - r),
            ("right", self.roi_lateral_mm - xl - r),
        ];
        for (margin, slack) in margins {
            if slack < 0.0 {
                return Err(Error::InclusionOutsideRoi { margin, overshoot_mm: -slack });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PhantomTruth {
    /// Young's modulus in kPa, shape (A', L').
    pub modulus: Tensor<f32>,
    /// 1 inside the inclusion, 0 elsewhere, shape (A', L').
    pub mask: Tensor<f32>,
    pub spec: PhantomSpec,
}

/// Rasterizes the disc: a pixel belongs to the inclusion iff its center lies inside it.
pub fn make_phantom(spec: &PhantomSpec) -> Result<PhantomTruth> {
    spec.validate()?;
    let (rows, cols) = spec.grid_shape();
    let r2 = (spec.inclusion_diameter_mm / 2.0).powi(2);
    let (cz, cx) = spec.inclusion_center;
    let mut modulus = Vec::with_capacity(rows * cols);
    let mut mask = Vec::with_capacity(rows * cols);
    for a in 0..rows {
        let z = (a as f64 + 0.5) / spec.axial_res;
        for l in 0..cols {
            let x = (l as f64 + 0.5) / spec.lateral_res;
            let inside = (z - cz).powi(2) + (x - cx).powi(2) <= r2;
            mask.push(if inside { 1.0 } else { 0.0 });
            modulus.push(if inside { spec.e_inclusion_kpa } else { spec.e_background_kpa } as f32);
        }
    }
    Ok(PhantomTruth {
        modulus: Tensor::new(&[rows, cols], modulus),
        mask: Tensor::new(&[rows, cols], mask),
        spec: spec.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArfConfig {
    pub a0_n_per_m3: f64,
    pub sigma_x_mm: f64,
    pub sigma_z_mm: f64,
    /// Depth of the push focus; its lateral position comes from the layout.
    pub focus_depth_mm: f64,
    pub push_duration_us: f64,
    pub prop_time_ms: f64,
    pub prf_hz: f64,
    pub lateral_offset_mm: f64,
}

impl Default for ArfConfig {
    fn default() -> Self {
        Self {
            a0_n_per_m3: 2e5,
            sigma_x_mm: 0.44,
            sigma_z_mm: 8.0,
            focus_depth_mm: 10.5,
            push_duration_us: 400.0,
            prop_time_ms: 8.0,
            prf_hz: 8000.0,
            lateral_offset_mm: 4.0,
        }
    }
}

impl ArfConfig {
    pub fn available_frames(&self) -> usize {
        (self.prop_time_ms * self.prf_hz / 1000.0 + 1e-9).floor() as usize
    }

    pub fn validate(&self, frames: usize) -> Result<()> {
        if !(self.sigma_x_mm > 0.0 && self.sigma_z_mm > 0.0) {
            return Err(Error::Config("ARF spreads must be positive".into()));
        }
        if !(self.prf_hz > 0.0 && self.push_duration_us > 0.0) {
            return Err(Error::Config("PRF and push duration must be positive".into()));
        }
        let available = self.available_frames();
        if available < frames {
            return Err(Error::FrameBudget { available, requested: frames });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionLayout {
    pub r_regions: usize,
    pub region_axial_px: usize,
    pub region_lateral_px: usize,
    pub lateral_offsets_px: Vec<usize>,
    pub full_lateral_px: usize,
    /// Lateral ARF center of each region in ROI mm (may lie left of the ROI).
    pub push_lateral_mm: Vec<f64>,
    pub frames_t: usize,
}

impl RegionLayout {
    /// Pushes sit `offset_mm` to the left of each region's first column.
    pub fn new(
        region_axial_px: usize,
        region_lateral_px: usize,
        lateral_offsets_px: Vec<usize>,
        full_lateral_px: usize,
        frames_t: usize,
        lateral_res: f64,
        offset_mm: f64,
    ) -> Result<Self> {
        let push_lateral_mm = lateral_offsets_px.iter().map(|&o| o as f64 / lateral_res - offset_mm).collect();
        let layout = Self {
            r_regions: lateral_offsets_px.len(),
            region_axial_px,
            region_lateral_px,
            lateral_offsets_px,
            full_lateral_px,
            push_lateral_mm,
            frames_t,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.lateral_offsets_px;
        if o.is_empty() || o.len() != self.r_regions || self.push_lateral_mm.len() != self.r_regions {
            return Err(Error::Config("layout needs one offset and push per region".into()));
        }
        if o[0] != 0 || o.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!("offsets {o:?} must start at 0 and increase strictly")));
        }
        if o.windows(2).any(|w| w[1] >= w[0] + self.region_lateral_px) {
            return Err(Error::Config(format!("neighbouring regions at {o:?} must overlap")));
        }
        if o[o.len() - 1] + self.region_lateral_px != self.full_lateral_px {
            return Err(Error::Config(format!(
                "regions of width {} at {o:?} do not end at L' = {}",
                self.region_lateral_px, self.full_lateral_px
            )));
        }
        Ok(())
    }
}

/// One region's displacement stack, shape (T, A, L).
#[derive(Clone, Debug)]
pub struct MotionVolume {
    pub data: Tensor<f32>,
    pub region_index: usize,
    /// Infinity for clean data.
    pub snr_db: f64,
    /// Set when the slowest arrival falls after the last frame.
    pub late_arrival: bool,
    /// (min, max) of the raw data once min-max normalized.
    pub norm_range: Option<(f32, f32)>,
}

/// Speed in m/s (equivalently mm/ms) from a modulus in kPa.
pub fn shear_speed(e_kpa: f64, density: f64) -> f64 {
    (e_kpa * 1000.0 / (3.0 * density)).sqrt()
}

/// Cumulative slowness ∫₀ˣ 1/v along one depth row; outside the ROI the background speed applies.
struct SlownessRow {
    prefix: Vec<f64>,
    slowness: Vec<f64>,
    bg_slowness: f64,
    cell_mm: f64,
}

impl SlownessRow {
    fn at(&self, x: f64) -> f64 {
        let n = self.slowness.len();
        let end = n as f64 * self.cell_mm;
        if x <= 0.0 {
            return x * self.bg_slowness;
        }
        if x >= end {
            return self.prefix[n] + (x - end) * self.bg_slowness;
        }
        let c = ((x / self.cell_mm) as usize).min(n - 1);
        self.prefix[c] + (x - c as f64 * self.cell_mm) * self.slowness[c]
    }
}

/// Simulates region `k`: per depth row a Gaussian pulse travels laterally away from the push.
pub fn simulate_region(truth: &PhantomTruth, layout: &RegionLayout, k: usize, arf: &ArfConfig) -> Result<MotionVolume> {
    if k >= layout.r_regions {
        return Err(Error::Config(format!("region {k} out of range for {} regions", layout.r_regions)));
    }
    arf.validate(layout.frames_t)?;
    let spec = &truth.spec;
    let (rows, cols) = (truth.modulus.dim(0), truth.modulus.dim(1));
    let off = layout.lateral_offsets_px[k];
    if rows < layout.region_axial_px || cols < off + layout.region_lateral_px {
        return Err(Error::Shape { expected: vec![layout.region_axial_px, off + layout.region_lateral_px], got: vec![rows, cols] });
    }
    for (i, &e) in truth.modulus.data().iter().enumerate() {
        if !(e > 0.0) {
            return Err(Error::NonPositiveModulus { row: i / cols, col: i % cols, value: e as f64 });
        }
    }
    let rho = spec.density_kg_m3;
    let cell_mm = 1.0 / spec.lateral_res;
    let bg_slowness = 1.0 / shear_speed(spec.e_background_kpa, rho);
    let x_push = layout.push_lateral_mm[k];
    let v_push = shear_speed(spec.e_background_kpa, rho);
    let t0 = arf.push_duration_us / 2000.0;
    let sigma_t = ((arf.push_duration_us / 2000.0).powi(2) + (arf.sigma_x_mm / v_push).powi(2)).sqrt();
    let scale = arf.a0_n_per_m3 * 1e-4;
    let dt = 1000.0 / arf.prf_hz;
    let (t_len, a_len, l_len) = (layout.frames_t, layout.region_axial_px, layout.region_lateral_px);

    let mut data = vec![0.0f32; t_len * a_len * l_len];
    let mut latest = 0.0f64;
    for a in 0..a_len {
        let row = &truth.modulus.data()[a * cols..(a + 1) * cols];
        let slowness: Vec<f64> = row.iter().map(|&e| 1.0 / shear_speed(e as f64, rho)).collect();
        let mut prefix = vec![0.0; cols + 1];
        for c in 0..cols {
            prefix[c + 1] = prefix[c] + slowness[c] * cell_mm;
        }
        let path = SlownessRow { prefix, slowness, bg_slowness, cell_mm };
        let z = (a as f64 + 0.5) / spec.axial_res;
        let envelope = scale * (-(z - arf.focus_depth_mm).powi(2) / (2.0 * arf.sigma_z_mm.powi(2))).exp();
        for l in 0..l_len {
            let x = (off + l) as f64 * cell_mm + cell_mm / 2.0;
            let d = (x - x_push).abs();
            let arrival = (path.at(x) - path.at(x_push)).abs();
            latest = latest.max(t0 + arrival);
            let amp = envelope / d.max(SPREAD_FLOOR_MM).sqrt();
            for t in 0..t_len {
                let tau = t as f64 * dt - t0 - arrival;
                data[(t * a_len + a) * l_len + l] = (amp * (-tau * tau / (2.0 * sigma_t * sigma_t)).exp()) as f32;
            }
        }
    }
    Ok(MotionVolume {
        data: Tensor::new(&[t_len, a_len, l_len], data),
        region_index: k,
        snr_db: f64::INFINITY,
        late_arrival: latest > (t_len - 1) as f64 * dt,
        norm_range: None,
    })
}

/// Adds white Gaussian noise with σ = rms(signal)·10^(−snr/20). Infinite SNR is a no-op.
pub fn add_noise(vol: &MotionVolume, snr_db: f64, rng: &mut impl Rng) -> MotionVolume {
    let mut out = vol.clone();
    if snr_db.is_infinite() && snr_db > 0.0 {
        return out;
    }
    let d = vol.data.data();
    let rms = (d.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / d.len().max(1) as f64).sqrt();
    let sigma = rms * 10f64.powf(-snr_db / 20.0);
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        out.data.data_mut().iter_mut().for_each(|v| *v += normal.sample(rng) as f32);
    }
    out.snr_db = snr_db;
    out
}

/// Affine map onto [0, 1]; records the original range.
pub fn min_max_normalize(vol: &MotionVolume) -> Result<MotionVolume> {
    let (lo, hi) = (vol.data.min(), vol.data.max());
    if !(hi > lo) {
        return Err(Error::ConstantVolume(lo));
    }
    let mut out = vol.clone();
    let span = hi - lo;
    out.data = vol.data.map(|v| ((v - lo) / span).clamp(0.0, 1.0));
    out.norm_range = Some((lo, hi));
    Ok(out)
}

/// Named geometry and acquisition setups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Full-size geometry: T=70, 168×16 regions, four pushes, 168×40 ROI.
    Paper,
    /// Small geometry for tests and CPU runs: T=32, 64×16 regions, two pushes, 64×24 ROI.
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::Config(format!("unknown preset {other:?} (paper|desk)"))),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        })
    }
}

/// Everything a preset fixes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub preset: Preset,
    pub roi_axial_mm: f64,
    pub roi_lateral_mm: f64,
    pub axial_res: f64,
    pub lateral_res: f64,
    pub diameter_range_mm: (f64, f64),
    pub background_range_kpa: (f64, f64),
    pub density_kg_m3: f64,
    pub layout: RegionLayout,
    pub arf: ArfConfig,
    /// Input patch (axial, lateral) for patch-mode reconstruction.
    pub patch: (usize, usize),
}

impl Preset {
    pub fn geometry(self) -> Geometry {
        match self {
            Preset::Paper => Geometry {
                preset: self,
                roi_axial_mm: 21.0,
                roi_lateral_mm: 40.0,
                axial_res: 8.0,
                lateral_res: 1.0,
                diameter_range_mm: (3.0, 12.0),
                background_range_kpa: (10.0, 35.0),
                density_kg_m3: 1000.0,
                layout: RegionLayout::new(168, 16, vec![0, 8, 16, 24], 40, 70, 1.0, 4.0).expect("valid layout"),
                // 8 ms at 8 kHz yields only 64 frames; 70 are consumed.
                arf: ArfConfig { prop_time_ms: 8.75, focus_depth_mm: 10.5, ..ArfConfig::default() },
                patch: (63, 10),
            },
            Preset::Desk => Geometry {
                preset: self,
                roi_axial_mm: 8.0,
                roi_lateral_mm: 12.0,
                axial_res: 8.0,
                lateral_res: 2.0,
                diameter_range_mm: (3.0, 6.0),
                background_range_kpa: (10.0, 35.0),
                density_kg_m3: 1000.0,
                layout: RegionLayout::new(64, 16, vec![0, 8], 24, 32, 2.0, 4.0).expect("valid layout"),
                arf: ArfConfig { prf_hz: 4000.0, focus_depth_mm: 4.0, ..ArfConfig::default() },
                patch: (27, 10),
            },
        }
    }
}

impl Geometry {
    pub fn roi_shape(&self) -> (usize, usize) {
        (self.layout.region_axial_px, self.layout.full_lateral_px)
    }

    pub fn spec_template(&self) -> PhantomSpec {
        PhantomSpec {
            roi_axial_mm: self.roi_axial_mm,
            roi_lateral_mm: self.roi_lateral_mm,
            axial_res: self.axial_res,
            lateral_res: self.lateral_res,
            inclusion_center: (self.roi_axial_mm / 2.0, self.roi_lateral_mm / 2.0),
            inclusion_diameter_mm: self.diameter_range_mm.0,
            e_inclusion_kpa: 40.0,
            e_background_kpa: 20.0,
            density_kg_m3: self.density_kg_m3,
            seed: 0,
        }
    }

    /// Random inclusion geometry and background; the inclusion stiffness is supplied.
    pub fn random_spec(&self, e_inclusion_kpa: f64, seed: u64) -> PhantomSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dlo, dhi) = self.diameter_range_mm;
        let d = rng.random_range(dlo..=dhi);
        let r = d / 2.0;
        let z = rng.random_range(r..=self.roi_axial_mm - r);
        let x = rng.random_range(r..=self.roi_lateral_mm - r);
        let (blo, bhi) = self.background_range_kpa;
        let bg = (rng.random_range(blo..=bhi) * 10.0f64).round() / 10.0;
        PhantomSpec {
            inclusion_center: (z, x),
            inclusion_diameter_mm: d,
            e_inclusion_kpa,
            e_background_kpa: bg,
            seed,
            ..self.spec_template()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Dataset split sizes used to proportion both samples and stiffness pools.
pub const SPLIT_WEIGHTS: [f64; 3] = [1010.0, 111.0, 259.0];

fn proportion(n: usize) -> [usize; 3] {
    let total: f64 = SPLIT_WEIGHTS.iter().sum();
    let train = (n as f64 * SPLIT_WEIGHTS[0] / total).round() as usize;
    let val = ((n as f64 * SPLIT_WEIGHTS[1] / total).round() as usize).min(n - train.min(n));
    [train.min(n), val, n - train.min(n) - val]
}

/// Integer inclusion stiffnesses 8..=100 kPa shuffled into three disjoint pools.
pub fn stiffness_pools(seed: u64) -> [Vec<f64>; 3] {
    let mut values: Vec<f64> = (8..=100).map(f64::from).collect();
    values.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_9001));
    let [a, b, _] = proportion(values.len());
    let test = values.split_off(a + b);
    let val = values.split_off(a);
    [values, val, test]
}

/// Per-sample record; together with the geometry it regenerates truth and motion exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    pub snr_db: f64,
    pub spec: PhantomSpec,
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub meta: SampleMeta,
    pub truth: PhantomTruth,
    pub regions: Vec<MotionVolume>,
}

/// How generated samples are distributed over splits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitPolicy {
    /// Sample counts and stiffness pools in the 1010/111/259 proportion.
    Proportional,
    /// Every sample in the training split.
    AllTrain,
}

pub fn plan_samples(geom: &Geometry, n: usize, snr_db: f64, seed: u64, policy: SplitPolicy) -> Vec<SampleMeta> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pools = stiffness_pools(seed);
    let counts = match policy {
        SplitPolicy::Proportional => proportion(n),
        SplitPolicy::AllTrain => [n, 0, 0],
    };
    let mut metas = Vec::with_capacity(n);
    for (split, &count) in Split::ALL.iter().zip(&counts) {
        let pool = &pools[*split as usize];
        for _ in 0..count {
            let e_inc = pool[rng.random_range(0..pool.len())];
            let sample_seed: u64 = rng.random();
            metas.push(SampleMeta {
                id: format!("s{:05}", metas.len()),
                split: *split,
                seed: sample_seed,
                snr_db,
                spec: geom.random_spec(e_inc, sample_seed),
            });
        }
    }
    metas
}

/// Rebuilds truth and (possibly noisy) region volumes from a sample record.
pub fn realize(geom: &Geometry, meta: &SampleMeta) -> Result<Sample> {
    let truth = make_phantom(&meta.spec)?;
    let mut regions = Vec::with_capacity(geom.layout.r_regions);
    for k in 0..geom.layout.r_regions {
        let clean = simulate_region(&truth, &geom.layout, k, &geom.arf)?;
        let mut rng = ChaCha8Rng::seed_from_u64(meta.seed.wrapping_add(0x9e37_79b9 * (k as u64 + 1)));
        regions.push(add_noise(&clean, meta.snr_db, &mut rng));
    }
    Ok(Sample { meta: meta.clone(), truth, regions })
}

/// Truth modulus restricted to region `k`'s lateral columns.
pub fn region_truth(truth: &PhantomTruth, layout: &RegionLayout, k: usize) -> Tensor<f32> {
    truth.modulus.narrow(1, layout.lateral_offsets_px[k], layout.region_lateral_px)
}
