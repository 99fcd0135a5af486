//! Primary reconstruction network: 3D residual encoder, nested ConvLSTM blocks
//! with temporal and spectral attention, and an SE-guided 2D decoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use swe_autograd::nn::{BatchNorm, Conv2d, Conv3d, Linear, SqueezeExcite};
use swe_autograd::ops::{
    avg_pool2d, batched_dot, dft2_magnitude, max_pool3d, softmax_last, spatial_mean_per_step, time_weighted_sum,
    upsample_nearest2d,
};
use swe_autograd::{impl_module, init, Float, Var};

use crate::error::{Error, Result};
use crate::patchwork::output_size;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconMode {
    Full,
    Patch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconConfig {
    pub mode: ReconMode,
    /// (T, A, L) of one input volume or patch.
    pub input_shape: (usize, usize, usize),
    pub base_channels: usize,
    pub convlstm_depth: usize,
    pub paths: usize,
    pub se_reduction: usize,
    pub tukey_alpha: f64,
    pub seed: u64,
}

impl ReconConfig {
    pub fn new(mode: ReconMode, input_shape: (usize, usize, usize), base_channels: usize, seed: u64) -> Self {
        Self { mode, input_shape, base_channels, convlstm_depth: 3, paths: 6, se_reduction: 4, tukey_alpha: 0.5, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.convlstm_depth != 3 {
            return Err(Error::Config(format!("ConvLSTM depth must be 3, got {}", self.convlstm_depth)));
        }
        if self.base_channels == 0 || self.se_reduction == 0 || self.paths == 0 {
            return Err(Error::Config("channels, SE reduction and path count must be positive".into()));
        }
        let shapes = self.encoder_shapes();
        if shapes.iter().any(|s| s.iter().any(|&d| d == 0)) {
            return Err(Error::Config(format!("input {:?} collapses in the encoder", self.input_shape)));
        }
        for s in &shapes {
            if s[1] < self.paths {
                return Err(Error::Config(format!("feature length {} shorter than {} temporal paths", s[1], self.paths)));
            }
        }
        if self.mode == ReconMode::Patch && shapes[0][3] < 2 {
            return Err(Error::Config("patch mode needs at least 2 lateral columns after the first pool".into()));
        }
        Ok(())
    }

    /// Pool kernels and ceil flags of the three encoder stages.
    pub fn pools(&self) -> [([usize; 3], [bool; 3]); 3] {
        match self.mode {
            ReconMode::Full => [([2, 2, 2], [false; 3]), ([2, 2, 2], [false; 3]), ([1, 2, 2], [false; 3])],
            ReconMode::Patch => {
                let c = [false, true, true];
                [([2, 3, 2], c), ([2, 3, 2], c), ([1, 1, 2], c)]
            }
        }
    }

    /// `[channels, T, A, L]` of i0, i1, i2.
    pub fn encoder_shapes(&self) -> [[usize; 4]; 3] {
        let (mut t, mut a, mut l) = self.input_shape;
        let c = self.base_channels;
        let mut out = [[0; 4]; 3];
        for (i, (k, ceil)) in self.pools().iter().enumerate() {
            let div = |n: usize, k: usize, up: bool| if up { n.div_ceil(k) } else { n / k };
            t = div(t, k[0], ceil[0]);
            a = div(a, k[1], ceil[1]);
            l = div(l, k[2], ceil[2]);
            out[i] = [c << i, t, a, l];
        }
        out
    }

    /// Spatial size of the network output.
    pub fn output_shape(&self) -> (usize, usize) {
        let (_, a, l) = self.input_shape;
        match self.mode {
            ReconMode::Full => (a, l),
            ReconMode::Patch => output_size(a, l),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// Temporal segments of one nested block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemporalWindowPlan {
    pub s_paths: usize,
    pub seg_len: usize,
    pub segments: Vec<(usize, usize)>,
}

/// `seg_len = ⌈2T/(S+1)⌉`, starts spread evenly with the last segment ending at `T`.
pub fn plan_windows(t_len: usize, s: usize) -> Result<TemporalWindowPlan> {
    if s == 0 || t_len < s {
        return Err(Error::Config(format!("cannot split {t_len} frames into {s} segments")));
    }
    let seg_len = (2 * t_len).div_ceil(s + 1).min(t_len);
    let span = (t_len - seg_len) as f64;
    let segments = (0..s)
        .map(|i| {
            let start = if s == 1 { 0 } else { (i as f64 * span / (s - 1) as f64).round() as usize };
            (start, start + seg_len)
        })
        .collect();
    Ok(TemporalWindowPlan { s_paths: s, seg_len, segments })
}

#[derive(Debug)]
pub struct ResBlock3d<T: Float> {
    conv1: Conv3d<T>,
    bn1: BatchNorm<T>,
    conv2: Conv3d<T>,
    bn2: BatchNorm<T>,
    proj: Conv3d<T>,
    bn_proj: BatchNorm<T>,
}
impl_module!(ResBlock3d; conv1, bn1, conv2, bn2, proj, bn_proj);

impl<T: Float> ResBlock3d<T> {
    fn new(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv1: Conv3d::new(cin, cout, [3, 3, 3], false, rng),
            bn1: BatchNorm::new(cout),
            conv2: Conv3d::new(cout, cout, [3, 3, 3], false, rng),
            bn2: BatchNorm::new(cout),
            proj: Conv3d::new(cin, cout, [1, 1, 1], false, rng),
            bn_proj: BatchNorm::new(cout),
        }
    }

    fn forward(&self, x: &Var<T>, train: bool) -> Var<T> {
        let h = self.bn1.forward(&self.conv1.forward(x), train).relu();
        let h = self.bn2.forward(&self.conv2.forward(&h), train);
        h.add(&self.bn_proj.forward(&self.proj.forward(x), train)).relu()
    }
}

/// One ConvLSTM layer: input convolution over all steps at once, recurrent convolution per step.
#[derive(Debug)]
pub struct ConvLstmCell<T: Float> {
    input: Conv3d<T>,
    recurrent: Conv2d<T>,
}
impl_module!(ConvLstmCell; input, recurrent);

impl<T: Float> ConvLstmCell<T> {
    fn new(cin: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut input = Conv3d::new(cin, 4 * hidden, [1, 3, 3], true, rng);
        if let Some(b) = input.bias.as_mut() {
            b.value.data_mut()[hidden..2 * hidden].iter_mut().for_each(|v| *v = T::one());
        }
        let mut recurrent = Conv2d::new(hidden, 4 * hidden, 3, false, rng);
        recurrent.weight.value = init::orthogonal(recurrent.weight.value.shape(), 1.0, rng);
        Self { input, recurrent }
    }

    /// `(B, C, T, A, L) -> (B, H, T, A, L)` hidden-state sequence.
    fn forward(&self, x: &Var<T>) -> Var<T> {
        let s = x.shape().to_vec();
        let (b, t, a, l) = (s[0], s[2], s[3], s[4]);
        let hidden = self.recurrent.weight.value.dim(1);
        let xg = self.input.forward(x);
        let mut h: Option<Var<T>> = None;
        let mut c: Option<Var<T>> = None;
        let mut hs = Vec::with_capacity(t);
        for ti in 0..t {
            let mut g = xg.narrow(2, ti, 1).reshape(&[b, 4 * hidden, a, l]);
            if let Some(hp) = &h {
                g = g.add(&self.recurrent.forward(hp));
            }
            let i = g.narrow(1, 0, hidden).sigmoid();
            let f = g.narrow(1, hidden, hidden).sigmoid();
            let cand = g.narrow(1, 2 * hidden, hidden).tanh();
            let o = g.narrow(1, 3 * hidden, hidden).sigmoid();
            let ic = i.mul(&cand);
            let cn = match &c {
                Some(cp) => f.mul(cp).add(&ic),
                None => ic,
            };
            let hn = o.mul(&cn.tanh());
            hs.push(hn.reshape(&[b, hidden, 1, a, l]));
            h = Some(hn);
            c = Some(cn);
        }
        Var::concat(&hs, 2)
    }
}

/// Temporal attention: last-step query against per-step keys, softmax over time.
#[derive(Debug)]
pub struct TemporalAttention<T: Float> {
    key: Linear<T>,
    query: Linear<T>,
}
impl_module!(TemporalAttention; key, query);

impl<T: Float> TemporalAttention<T> {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        Self { key: Linear::new(channels, channels, rng), query: Linear::new(channels, channels, rng) }
    }

    /// `(B, C, T, A, L) -> ((B, C, A, L), α of shape (B, T))`.
    pub fn forward(&self, h: &Var<T>) -> (Var<T>, Var<T>) {
        let s = h.shape();
        let (b, c, t) = (s[0], s[1], s[2]);
        let desc = spatial_mean_per_step(h);
        let keys = self.key.forward(&desc);
        let query = self.query.forward(&desc.narrow(1, t - 1, 1).reshape(&[b, c]));
        let alpha = softmax_last(&batched_dot(&keys, &query));
        (time_weighted_sum(h, &alpha), alpha)
    }
}

#[derive(Debug)]
pub struct ConvBnRelu<T: Float> {
    conv: Conv2d<T>,
    bn: BatchNorm<T>,
}
impl_module!(ConvBnRelu; conv, bn);

impl<T: Float> ConvBnRelu<T> {
    pub fn new(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self { conv: Conv2d::new(cin, cout, 3, false, rng), bn: BatchNorm::new(cout) }
    }

    pub fn forward(&self, x: &Var<T>, train: bool) -> Var<T> {
        self.bn.forward(&self.conv.forward(x), train).relu()
    }
}

/// Channel attention driven by the 2D magnitude spectrum: `x + x·x_α`.
#[derive(Debug)]
pub struct FftAttention<T: Float> {
    pre1: ConvBnRelu<T>,
    pre2: ConvBnRelu<T>,
    post: ConvBnRelu<T>,
    se: SqueezeExcite<T>,
}
impl_module!(FftAttention; pre1, pre2, post, se);

impl<T: Float> FftAttention<T> {
    pub fn new(channels: usize, reduction: usize, rng: &mut impl Rng) -> Self {
        Self {
            pre1: ConvBnRelu::new(channels, channels, rng),
            pre2: ConvBnRelu::new(channels, channels, rng),
            post: ConvBnRelu::new(channels, channels, rng),
            se: SqueezeExcite::new(channels, reduction, rng),
        }
    }

    /// Magnitude spectrum of the preconditioned input.
    pub fn spectrum(&self, x: &Var<T>, train: bool) -> Var<T> {
        dft2_magnitude(&self.pre2.forward(&self.pre1.forward(x, train), train))
    }

    /// Returns the output and the channel gates `x_α` (B, C).
    pub fn forward(&self, x: &Var<T>, train: bool) -> (Var<T>, Var<T>) {
        let gates = self.se.gates(&self.post.forward(&self.spectrum(x, train), train));
        (x.add(&x.mul_channel(&gates)), gates)
    }
}

#[derive(Debug)]
pub struct NestedPath<T: Float> {
    lstm: Vec<ConvLstmCell<T>>,
    tam: TemporalAttention<T>,
}
impl_module!(NestedPath; lstm, tam);

/// Six temporal windows through ConvLSTM and TAM, fused by spectral attention.
#[derive(Debug)]
pub struct NestedBlock<T: Float> {
    paths: Vec<NestedPath<T>>,
    bn: BatchNorm<T>,
    fft: FftAttention<T>,
    fuse: Conv2d<T>,
}
impl_module!(NestedBlock; paths, bn, fft, fuse);

/// Intermediate values of a nested block, for inspection.
pub struct NestedTrace<T: Float> {
    pub out: Var<T>,
    pub path_outputs: Vec<Var<T>>,
    pub alphas: Vec<Var<T>>,
}

impl<T: Float> NestedBlock<T> {
    pub fn new(channels: usize, depth: usize, paths: usize, reduction: usize, rng: &mut impl Rng) -> Self {
        let paths = (0..paths)
            .map(|_| NestedPath {
                lstm: (0..depth).map(|_| ConvLstmCell::new(channels, channels, rng)).collect(),
                tam: TemporalAttention::new(channels, rng),
            })
            .collect::<Vec<_>>();
        let wide = channels * paths.len();
        Self {
            paths,
            bn: BatchNorm::new(wide),
            fft: FftAttention::new(wide, reduction, rng),
            fuse: Conv2d::new(wide, channels, 1, true, rng),
        }
    }

    /// `(B, C, T, A, L) -> (B, C, A, L)`.
    pub fn forward(&self, x: &Var<T>, train: bool) -> Result<NestedTrace<T>> {
        let plan = plan_windows(x.shape()[2], self.paths.len())?;
        let mut path_outputs = Vec::with_capacity(self.paths.len());
        let mut alphas = Vec::with_capacity(self.paths.len());
        for (path, &(start, end)) in self.paths.iter().zip(&plan.segments) {
            let mut h = x.narrow(2, start, end - start);
            for cell in &path.lstm {
                h = cell.forward(&h);
            }
            let (o, a) = path.tam.forward(&h);
            path_outputs.push(o);
            alphas.push(a);
        }
        let stacked = self.bn.forward(&Var::concat(&path_outputs, 1), train);
        let (att, _) = self.fft.forward(&stacked, train);
        Ok(NestedTrace { out: self.fuse.forward(&att), path_outputs, alphas })
    }
}

#[derive(Debug)]
pub struct DecoderStage<T: Float> {
    conv: ConvBnRelu<T>,
    se: Option<SqueezeExcite<T>>,
}
impl_module!(DecoderStage; conv, se);

impl<T: Float> DecoderStage<T> {
    pub fn new(cin: usize, cout: usize, skip: Option<usize>, reduction: usize, rng: &mut impl Rng) -> Self {
        Self { conv: ConvBnRelu::new(cin, cout, rng), se: skip.map(|s| SqueezeExcite::new(cout + s, reduction, rng)) }
    }

    /// Convolve, resize to `size`, then concatenate the skip and gate channels.
    pub fn forward(&self, x: &Var<T>, size: (usize, usize), skip: Option<&Var<T>>, train: bool) -> Var<T> {
        self.forward_split(x, size, skip, train).1
    }

    /// Returns `D_i` before the skip concatenation alongside the stage output.
    pub fn forward_split(&self, x: &Var<T>, size: (usize, usize), skip: Option<&Var<T>>, train: bool) -> (Var<T>, Var<T>) {
        let mut d = self.conv.forward(x, train);
        if (d.shape()[2], d.shape()[3]) != size {
            d = upsample_nearest2d(&d, size.0, size.1);
        }
        let out = match (skip, &self.se) {
            (Some(s), Some(se)) => se.forward(&Var::concat(&[d.clone(), s.clone()], 1)),
            _ => d.clone(),
        };
        (d, out)
    }
}

/// Shapes of every named feature in a forward pass, `[C, …spatial]` without batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeTrace {
    pub i: [Vec<usize>; 3],
    pub p: [Vec<usize>; 3],
    pub p0_adjusted: Vec<usize>,
    /// Decoder features before skip concatenation.
    pub d: [Vec<usize>; 3],
    pub out: Vec<usize>,
}

#[derive(Debug)]
pub struct ReconNet<T: Float> {
    pub config: ReconConfig,
    enc: Vec<ResBlock3d<T>>,
    nested: Vec<NestedBlock<T>>,
    dec: Vec<DecoderStage<T>>,
    head: Conv2d<T>,
}

impl<T: Float> swe_autograd::Module<T> for ReconNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &swe_autograd::Param<T>)) {
        use swe_autograd::nn::join;
        self.enc.visit(&join(prefix, "enc"), f);
        self.nested.visit(&join(prefix, "nested"), f);
        self.dec.visit(&join(prefix, "dec"), f);
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut swe_autograd::Param<T>)) {
        use swe_autograd::nn::join;
        self.enc.visit_mut(&join(prefix, "enc"), f);
        self.nested.visit_mut(&join(prefix, "nested"), f);
        self.dec.visit_mut(&join(prefix, "dec"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

pub struct ReconOutput<T: Float> {
    /// (B, 1, A_out, L_out), normalized modulus (kPa / 100).
    pub y: Var<T>,
    pub shapes: ShapeTrace,
    pub nested: Vec<NestedTrace<T>>,
}

impl<T: Float> ReconNet<T> {
    pub fn new(config: ReconConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = config.base_channels;
        let r = config.se_reduction;
        let enc = vec![ResBlock3d::new(1, c, &mut rng), ResBlock3d::new(c, 2 * c, &mut rng), ResBlock3d::new(2 * c, 4 * c, &mut rng)];
        let nested = (0..3).map(|i| NestedBlock::new(c << i, config.convlstm_depth, config.paths, r, &mut rng)).collect();
        let dec = vec![
            DecoderStage::new(4 * c, 2 * c, Some(2 * c), r, &mut rng),
            DecoderStage::new(4 * c, c, Some(c), r, &mut rng),
            DecoderStage::new(2 * c, c, None, r, &mut rng),
        ];
        let head = Conv2d::new(c, 1, 3, true, &mut rng);
        Ok(Self { config, enc, nested, dec, head })
    }

    /// Input `(B, 1, T, A, L)` of min-max normalized motion.
    pub fn forward_traced(&self, x: &Var<T>, train: bool) -> Result<ReconOutput<T>> {
        let (t, a, l) = self.config.input_shape;
        let s = x.shape();
        if s.len() != 5 || s[1] != 1 || s[2..] != [t, a, l] {
            return Err(Error::Shape { expected: vec![s.first().copied().unwrap_or(1), 1, t, a, l], got: s.to_vec() });
        }
        let no_batch = |v: &Var<T>| v.shape()[1..].to_vec();
        let mut feats = Vec::with_capacity(3);
        let mut h = x.clone();
        for (block, (k, ceil)) in self.enc.iter().zip(self.config.pools()) {
            h = max_pool3d(&block.forward(&h, train), k, ceil);
            feats.push(h.clone());
        }
        let mut nested = Vec::with_capacity(3);
        for (block, f) in self.nested.iter().zip(&feats) {
            nested.push(block.forward(f, train)?);
        }
        let p: Vec<Var<T>> = nested.iter().map(|n| n.out.clone()).collect();
        let p0 = match self.config.mode {
            ReconMode::Full => p[0].clone(),
            ReconMode::Patch => avg_pool2d(&p[0], [1, 2], [1, 1]),
        };
        let size = |v: &Var<T>| (v.shape()[2], v.shape()[3]);
        let (d0, g0) = self.dec[0].forward_split(&p[2], size(&p[1]), Some(&p[1]), train);
        let (d1, g1) = self.dec[1].forward_split(&g0, size(&p0), Some(&p0), train);
        let d2 = self.dec[2].forward(&g1, self.config.output_shape(), None, train);
        let y = self.head.forward(&d2).relu();
        let shapes = ShapeTrace {
            i: [no_batch(&feats[0]), no_batch(&feats[1]), no_batch(&feats[2])],
            p: [no_batch(&p[0]), no_batch(&p[1]), no_batch(&p[2])],
            p0_adjusted: no_batch(&p0),
            d: [no_batch(&d0), no_batch(&d1), no_batch(&d2)],
            out: no_batch(&y),
        };
        Ok(ReconOutput { y, shapes, nested })
    }

    pub fn forward(&self, x: &Var<T>, train: bool) -> Result<Var<T>> {
        Ok(self.forward_traced(x, train)?.y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use swe_autograd::Tensor;

    #[test]
    fn window_plans() {
        let p = plan_windows(35, 6).unwrap();
        assert_eq!(p.seg_len, 10);
        assert_eq!(p.segments.iter().map(|s| s.0).collect::<Vec<_>>(), [0, 5, 10, 15, 20, 25]);
        let p = plan_windows(70, 6).unwrap();
        assert_eq!(p.seg_len, 20);
        assert_eq!(p.segments.iter().map(|s| s.0).collect::<Vec<_>>(), [0, 10, 20, 30, 40, 50]);
        let p = plan_windows(6, 6).unwrap();
        assert_eq!(p.seg_len, 2);
        assert_eq!(p.segments.last().unwrap().1, 6);
        assert!(plan_windows(5, 6).is_err());
    }

    #[test]
    fn encoder_arithmetic() {
        let full = ReconConfig::new(ReconMode::Full, (70, 168, 16), 16, 0);
        assert_eq!(full.encoder_shapes()[2], [64, 17, 21, 2]);
        let patch = ReconConfig::new(ReconMode::Patch, (70, 63, 10), 16, 0);
        assert_eq!(patch.encoder_shapes(), [[16, 35, 21, 5], [32, 17, 7, 3], [64, 17, 7, 2]]);
        assert_eq!(patch.output_shape(), (21, 4));
    }

    #[test]
    fn tam_single_step_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tam = TemporalAttention::<f64>::new(3, &mut rng);
        let h = Var::constant(Tensor::from_f64(&[1, 3, 1, 2, 2], &(0..12).map(|v| v as f64).collect::<Vec<_>>()));
        let (out, alpha) = tam.forward(&h);
        assert_eq!(alpha.value().data(), &[1.0]);
        assert_eq!(out.value().data(), h.value().data());
    }

    #[test]
    fn desk_patch_forward_shapes() {
        let cfg = ReconConfig::new(ReconMode::Patch, (32, 27, 10), 4, 1);
        let net = ReconNet::<f32>::new(cfg).unwrap();
        let x = Var::constant(Tensor::full(&[2, 1, 32, 27, 10], 0.3));
        let out = net.forward_traced(&x, false).unwrap();
        assert_eq!(out.shapes.out, [1, 9, 4]);
        assert!(out.y.value().data().iter().all(|v| v.is_finite() && *v >= 0.0));
    }
}
