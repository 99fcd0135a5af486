//! Post-denoiser: SE-augmented residual encoder, foreground and background
//! decoders, and a fusion block producing the cleaned map and the mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use swe_autograd::nn::{BatchNorm, Conv2d, SqueezeExcite};
use swe_autograd::ops::avg_pool2d;
use swe_autograd::{impl_module, Float, Var};

use crate::error::{Error, Result};
use crate::losses::DenoiseOutputsRef;
use crate::recon::DecoderStage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub blocks_per_stage: [usize; 3],
    pub se_reduction: usize,
    pub seed: u64,
}

impl DenoiserConfig {
    pub fn new(base_channels: usize, seed: u64) -> Self {
        Self { base_channels, blocks_per_stage: [3, 4, 6], se_reduction: 4, seed }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// Spatial dims are padded on the right and bottom to this multiple.
pub const PAD_MULTIPLE: usize = 8;

pub fn padded_size(h: usize, w: usize) -> (usize, usize) {
    (h.next_multiple_of(PAD_MULTIPLE), w.next_multiple_of(PAD_MULTIPLE))
}

#[derive(Debug)]
pub struct Projection<T: Float> {
    conv: Conv2d<T>,
    bn: BatchNorm<T>,
}
impl_module!(Projection; conv, bn);

#[derive(Debug)]
pub struct BasicBlock<T: Float> {
    conv1: Conv2d<T>,
    bn1: BatchNorm<T>,
    conv2: Conv2d<T>,
    bn2: BatchNorm<T>,
    proj: Option<Projection<T>>,
}
impl_module!(BasicBlock; conv1, bn1, conv2, bn2, proj);

impl<T: Float> BasicBlock<T> {
    fn new(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let proj = (cin != cout).then(|| Projection { conv: Conv2d::new(cin, cout, 1, false, rng), bn: BatchNorm::new(cout) });
        Self {
            conv1: Conv2d::new(cin, cout, 3, false, rng),
            bn1: BatchNorm::new(cout),
            conv2: Conv2d::new(cout, cout, 3, false, rng),
            bn2: BatchNorm::new(cout),
            proj,
        }
    }

    fn forward(&self, x: &Var<T>, train: bool) -> Var<T> {
        let h = self.bn1.forward(&self.conv1.forward(x), train).relu();
        let h = self.bn2.forward(&self.conv2.forward(&h), train);
        let skip = match &self.proj {
            Some(p) => p.bn.forward(&p.conv.forward(x), train),
            None => x.clone(),
        };
        h.add(&skip).relu()
    }
}

#[derive(Debug)]
pub struct EncoderStage<T: Float> {
    blocks: Vec<BasicBlock<T>>,
    se: SqueezeExcite<T>,
}
impl_module!(EncoderStage; blocks, se);

#[derive(Debug)]
pub struct RegionDecoder<T: Float> {
    stages: Vec<DecoderStage<T>>,
    head: Conv2d<T>,
}
impl_module!(RegionDecoder; stages, head);

impl<T: Float> RegionDecoder<T> {
    fn new(c: usize, r: usize, rng: &mut impl Rng) -> Self {
        Self {
            stages: vec![
                DecoderStage::new(4 * c, 2 * c, Some(2 * c), r, rng),
                DecoderStage::new(4 * c, c, Some(c), r, rng),
                DecoderStage::new(2 * c, c, None, r, rng),
            ],
            head: Conv2d::new(c, 1, 3, true, rng),
        }
    }

    /// Returns the cropped clean feature `d2` and the regional map.
    fn forward(&self, j: &[Var<T>; 3], padded: (usize, usize), crop: (usize, usize), train: bool) -> (Var<T>, Var<T>) {
        let size = |v: &Var<T>| (v.shape()[2], v.shape()[3]);
        let d0 = self.stages[0].forward(&j[2], size(&j[1]), Some(&j[1]), train);
        let d1 = self.stages[1].forward(&d0, size(&j[0]), Some(&j[0]), train);
        let d2 = self.stages[2].forward(&d1, padded, None, train).crop2d(0, crop.0, 0, crop.1);
        let y = self.head.forward(&d2).relu();
        (d2, y)
    }
}

#[derive(Debug)]
pub struct Fusion<T: Float> {
    bn: BatchNorm<T>,
    reduce0: Conv2d<T>,
    reduce1: Conv2d<T>,
    reduce2: Conv2d<T>,
    mask0: Conv2d<T>,
    mask1: Conv2d<T>,
}
impl_module!(Fusion; bn, reduce0, reduce1, reduce2, mask0, mask1);

impl<T: Float> Fusion<T> {
    fn new(c: usize, rng: &mut impl Rng) -> Self {
        Self {
            bn: BatchNorm::new(2 * c),
            reduce0: Conv2d::new(2 * c, c, 3, true, rng),
            reduce1: Conv2d::new(c, c, 3, true, rng),
            reduce2: Conv2d::new(c, 1, 3, true, rng),
            mask0: Conv2d::new(c, c, 3, true, rng),
            mask1: Conv2d::new(c, 1, 3, true, rng),
        }
    }

    pub fn forward(&self, d_fg: &Var<T>, d_bg: &Var<T>, train: bool) -> Result<(Var<T>, Var<T>)> {
        if d_fg.shape() != d_bg.shape() {
            return Err(Error::Shape { expected: d_fg.shape().to_vec(), got: d_bg.shape().to_vec() });
        }
        let x = self.bn.forward(&Var::concat(&[d_fg.clone(), d_bg.clone()], 1), train);
        let pre1 = self.reduce1.forward(&self.reduce0.forward(&x).relu()).relu();
        let y = self.reduce2.forward(&pre1).relu();
        let m = self.mask1.forward(&self.mask0.forward(&pre1).relu()).sigmoid();
        Ok((y, m))
    }
}

#[derive(Debug)]
pub struct DenoiserNet<T: Float> {
    pub config: DenoiserConfig,
    stages: Vec<EncoderStage<T>>,
    fg: RegionDecoder<T>,
    bg: RegionDecoder<T>,
    fusion: Fusion<T>,
}

impl<T: Float> swe_autograd::Module<T> for DenoiserNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &swe_autograd::Param<T>)) {
        use swe_autograd::nn::join;
        self.stages.visit(&join(prefix, "enc"), f);
        self.fg.visit(&join(prefix, "fg"), f);
        self.bg.visit(&join(prefix, "bg"), f);
        self.fusion.visit(&join(prefix, "fusion"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut swe_autograd::Param<T>)) {
        use swe_autograd::nn::join;
        self.stages.visit_mut(&join(prefix, "enc"), f);
        self.fg.visit_mut(&join(prefix, "fg"), f);
        self.bg.visit_mut(&join(prefix, "bg"), f);
        self.fusion.visit_mut(&join(prefix, "fusion"), f);
    }
}

/// All maps are (B, 1, A, L) in normalized units.
pub struct DenoiserOutputs<T: Float> {
    pub y: Var<T>,
    pub m: Var<T>,
    pub y_fg: Var<T>,
    pub y_bg: Var<T>,
    pub d2_fg: Var<T>,
    pub d2_bg: Var<T>,
    pub j_shapes: [Vec<usize>; 3],
}

impl<T: Float> DenoiserOutputs<T> {
    pub fn as_loss_inputs(&self) -> DenoiseOutputsRef<'_, T> {
        DenoiseOutputsRef { y: &self.y, m: &self.m, y_fg: &self.y_fg, y_bg: &self.y_bg }
    }
}

impl<T: Float> DenoiserNet<T> {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        if config.base_channels == 0 || config.se_reduction == 0 || config.blocks_per_stage.contains(&0) {
            return Err(Error::Config("denoiser channels, SE reduction and block counts must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = config.base_channels;
        let r = config.se_reduction;
        let mut cin = 1;
        let stages = (0..3)
            .map(|i| {
                let cout = c << i;
                let blocks = (0..config.blocks_per_stage[i])
                    .map(|b| BasicBlock::new(if b == 0 { cin } else { cout }, cout, &mut rng))
                    .collect();
                cin = cout;
                EncoderStage { blocks, se: SqueezeExcite::new(cout, r, &mut rng) }
            })
            .collect();
        let fg = RegionDecoder::new(c, r, &mut rng);
        let bg = RegionDecoder::new(c, r, &mut rng);
        let fusion = Fusion::new(c, &mut rng);
        Ok(Self { config, stages, fg, bg, fusion })
    }

    /// SE-weighted encoder features of an already padded input.
    pub fn encode(&self, x: &Var<T>, train: bool) -> [Var<T>; 3] {
        let mut h = x.clone();
        let mut out = Vec::with_capacity(3);
        for stage in &self.stages {
            for block in &stage.blocks {
                h = block.forward(&h, train);
            }
            h = stage.se.forward(&avg_pool2d(&h, [2, 2], [2, 2]));
            out.push(h.clone());
        }
        out.try_into().expect("three stages")
    }

    /// Input `(B, 1, A, L)` primary reconstruction in normalized units.
    pub fn forward(&self, y_prime: &Var<T>, train: bool) -> Result<DenoiserOutputs<T>> {
        let s = y_prime.shape().to_vec();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::Shape { expected: vec![s.first().copied().unwrap_or(1), 1, 0, 0], got: s });
        }
        let (h, w) = (s[2], s[3]);
        let (ph, pw) = padded_size(h, w);
        let x = y_prime.pad2d(0, ph - h, 0, pw - w);
        let j = self.encode(&x, train);
        let (d2_fg, y_fg) = self.fg.forward(&j, (ph, pw), (h, w), train);
        let (d2_bg, y_bg) = self.bg.forward(&j, (ph, pw), (h, w), train);
        let (y, m) = self.fusion.forward(&d2_fg, &d2_bg, train)?;
        let j_shapes = [j[0].shape()[1..].to_vec(), j[1].shape()[1..].to_vec(), j[2].shape()[1..].to_vec()];
        Ok(DenoiserOutputs { y, m, y_fg, y_bg, d2_fg, d2_bg, j_shapes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use swe_autograd::Tensor;

    #[test]
    fn padding_policy() {
        assert_eq!(padded_size(170, 41), (176, 48));
        assert_eq!(padded_size(168, 40), (168, 40));
    }

    #[test]
    fn outputs_match_odd_input() {
        let net = DenoiserNet::<f32>::new(DenoiserConfig::new(4, 0)).unwrap();
        let x = Var::constant(Tensor::full(&[1, 1, 13, 10], 0.2));
        let out = net.forward(&x, false).unwrap();
        for v in [&out.y, &out.m, &out.y_fg, &out.y_bg] {
            assert_eq!(v.shape(), &[1, 1, 13, 10]);
            assert!(v.value().all_finite());
        }
        assert!(out.m.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(out.j_shapes[2], [16, 2, 2]);
    }
}
