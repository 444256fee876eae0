//! Generator, discriminator and segmentor networks.
//!
//! Layer stacks follow the reference 128x128 architecture and scale with
//! [`ArchConfig::image_size`] and [`ArchConfig::base_channels`]:
//!
//! * generator (step-by-step order): the segmentation is encoded by four strided
//!   convolutions down to `image_size / 16`; the latent code goes through a fully
//!   connected layer reshaped to `base x (image_size/16)^2`; both are concatenated and
//!   upsampled by two residual upsampling blocks; the attribute label is replicated
//!   spatially and concatenated; two more upsampling blocks and a 3x3 convolution with
//!   `tanh` produce the image.
//! * discriminator: strided 4x4 convolutions with leaky ReLU until the map is 2x2,
//!   then a 3x3 critic head (patch output) and a classifier head whose kernel covers
//!   the whole 2x2 map.
//! * segmentor: two strided convolutions, four residual blocks, two transposed
//!   convolutions and a 3x3 output convolution producing per-pixel class logits.
//!
//! Instance normalisation is used in the generator and segmentor, none in the
//! discriminator.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{NoGradGuard, Var};
use crate::error::{Error, Result};
use crate::tensor::{ConvGeom, Float, Tensor};
use crate::types::{AttributeLabel, ImageTensor, LatentVector, SegmentationMap};

const DOWN: ConvGeom = ConvGeom::new(4, 2, 1);
const SAME3: ConvGeom = ConvGeom::new(3, 1, 1);
const POINT: ConvGeom = ConvGeom::new(1, 1, 0);
const NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Order in which the generator consumes its inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorOrder {
    /// Segmentation first, latent second, attributes last.
    StepByStep,
    /// Latent first through upsampling, then segmentation and attributes.
    Reversed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub image_size: usize,
    pub n_s: usize,
    pub n_c: usize,
    pub n_z: usize,
    pub base_channels: usize,
    pub generator_order: GeneratorOrder,
    pub leaky_slope: f64,
}

impl ArchConfig {
    /// The full-size 128x128 configuration.
    pub fn reference(n_s: usize, n_c: usize) -> Self {
        Self {
            image_size: 128,
            n_s,
            n_c,
            n_z: 512,
            base_channels: 64,
            generator_order: GeneratorOrder::StepByStep,
            leaky_slope: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 || !self.image_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "image_size {} must be a power of two >= 16",
                self.image_size
            )));
        }
        if self.base_channels < 4 {
            return Err(Error::Config(format!("base_channels {} must be >= 4", self.base_channels)));
        }
        if !(2..=256).contains(&self.n_s) {
            return Err(Error::Config(format!("n_s {} must be in [2, 256]", self.n_s)));
        }
        if self.n_c == 0 || self.n_z == 0 {
            return Err(Error::Config("n_c and n_z must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::Config(format!("leaky_slope {} must be in [0, 1)", self.leaky_slope)));
        }
        Ok(())
    }

    /// Spatial extent of the encoded segmentation and of the reshaped latent block.
    pub fn bottleneck_extent(&self) -> usize {
        self.image_size / 16
    }

    /// Number of strided discriminator convolutions: enough to reach a 2x2 map.
    pub fn discriminator_depth(&self) -> usize {
        self.image_size.trailing_zeros() as usize - 1
    }
}

/// One named parameter tensor, tagged with the architecture row it belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock<T> {
    pub name: String,
    pub layer: String,
    pub tensor: Tensor<T>,
}

/// Ordered parameter collection of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    blocks: Vec<ParamBlock<T>>,
}

impl<T: Float> ParamSet<T> {
    pub fn new(blocks: Vec<ParamBlock<T>>) -> Self {
        Self { blocks }
    }

    pub fn blocks(&self) -> &[ParamBlock<T>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ParamBlock<T>] {
        &mut self.blocks
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.blocks.iter().find(|b| b.name == name).map(|b| &b.tensor)
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(|b| b.tensor.numel()).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamSet<U> {
        ParamSet {
            blocks: self
                .blocks
                .iter()
                .map(|b| ParamBlock { name: b.name.clone(), layer: b.layer.clone(), tensor: b.tensor.cast() })
                .collect(),
        }
    }

    /// Sets every parameter to zero.
    pub fn zero_all(&mut self) {
        for b in &mut self.blocks {
            b.tensor.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Wraps the tensors as graph leaves.
    pub fn bind(&self, requires_grad: bool) -> BoundParams<T> {
        let vars = self
            .blocks
            .iter()
            .map(|b| if requires_grad { Var::param(b.tensor.clone()) } else { Var::constant(b.tensor.clone()) })
            .collect();
        let index = self.blocks.iter().enumerate().map(|(i, b)| (b.name.clone(), i)).collect();
        BoundParams { vars, index }
    }

    /// Checks names and shapes against a reference layout.
    pub fn check_layout(&self, reference: &ParamSet<T>) -> Result<()> {
        if self.blocks.len() != reference.blocks.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter blocks, found {}",
                reference.blocks.len(),
                self.blocks.len()
            )));
        }
        for (a, b) in self.blocks.iter().zip(&reference.blocks) {
            if a.name != b.name || a.tensor.shape() != b.tensor.shape() {
                return Err(Error::Shape(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    a.name,
                    a.tensor.shape(),
                    b.name,
                    b.tensor.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Parameters wrapped as graph variables for one forward/backward pass.
pub struct BoundParams<T> {
    vars: Vec<Var<T>>,
    index: HashMap<String, usize>,
}

impl<T: Float> BoundParams<T> {
    pub fn get(&self, name: &str) -> &Var<T> {
        let i = self.index.get(name).unwrap_or_else(|| panic!("no parameter named {name}"));
        &self.vars[*i]
    }

    pub fn vars(&self) -> &[Var<T>] {
        &self.vars
    }
}

/// Records `(layer label, output shape)` as a forward pass runs.
pub type ShapeTrace = Vec<(String, Vec<usize>)>;

struct Builder<'a, T, R> {
    rng: &'a mut R,
    blocks: Vec<ParamBlock<T>>,
}

impl<'a, T: Float, R: Rng> Builder<'a, T, R> {
    fn new(rng: &'a mut R) -> Self {
        Self { rng, blocks: Vec::new() }
    }

    fn normal(&mut self, name: String, layer: &str, shape: &[usize]) {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(self.rng.sample::<f64, _>(StandardNormal) * INIT_STD)).collect();
        self.blocks.push(ParamBlock { name, layer: layer.into(), tensor: Tensor::new(shape.to_vec(), data) });
    }

    fn constant(&mut self, name: String, layer: &str, shape: &[usize], v: f64) {
        self.blocks.push(ParamBlock { name, layer: layer.into(), tensor: Tensor::full(shape, T::lit(v)) });
    }

    fn conv(&mut self, prefix: &str, layer: &str, co: usize, ci: usize, k: usize, bias: bool) {
        self.normal(format!("{prefix}.weight"), layer, &[co, ci, k, k]);
        if bias {
            self.constant(format!("{prefix}.bias"), layer, &[co], 0.0);
        }
    }

    fn norm(&mut self, prefix: &str, layer: &str, c: usize) {
        self.constant(format!("{prefix}.scale"), layer, &[c], 1.0);
        self.constant(format!("{prefix}.shift"), layer, &[c], 0.0);
    }

    fn resblk(&mut self, prefix: &str, layer: &str, c: usize) {
        self.conv(&format!("{prefix}.conv1"), layer, c, c, 3, false);
        self.norm(&format!("{prefix}.norm1"), layer, c);
        self.conv(&format!("{prefix}.conv2"), layer, c, c, 3, false);
        self.norm(&format!("{prefix}.norm2"), layer, c);
    }

    fn resblkup(&mut self, prefix: &str, layer: &str, cin: usize, cout: usize) {
        self.conv(&format!("{prefix}.conv1"), layer, cout, cin, 3, false);
        self.norm(&format!("{prefix}.norm1"), layer, cout);
        self.conv(&format!("{prefix}.conv2"), layer, cout, cout, 3, false);
        self.norm(&format!("{prefix}.norm2"), layer, cout);
        self.conv(&format!("{prefix}.skip"), layer, cout, cin, 1, true);
    }

    fn finish(self) -> ParamSet<T> {
        ParamSet { blocks: self.blocks }
    }
}

// ---- shared layer functions ------------------------------------------------

/// Instance normalisation with per-channel affine scale and shift.
pub fn instance_norm<T: Float>(x: &Var<T>, scale: &Var<T>, shift: &Var<T>) -> Var<T> {
    let (n, c, h, w) = x.value().dims4();
    if h * w == 1 {
        // standardising a single value would zero it; keep only the affine part
        return x.mul_channel(scale).add_channel_bias(shift);
    }
    let stats = [n, c, 1, 1];
    let inv_count = T::one() / T::lit((h * w) as f64);
    let mean = x.sum_to(&stats).scale(inv_count);
    let centred = x.sub(&mean.broadcast_to(x.shape()));
    let var = centred.square().sum_to(&stats).scale(inv_count);
    let inv_std = var.add_scalar(T::lit(NORM_EPS)).powf(T::lit(-0.5));
    centred.mul(&inv_std.broadcast_to(x.shape())).mul_channel(scale).add_channel_bias(shift)
}

fn norm<T: Float>(p: &BoundParams<T>, prefix: &str, x: &Var<T>) -> Var<T> {
    instance_norm(x, p.get(&format!("{prefix}.scale")), p.get(&format!("{prefix}.shift")))
}

fn conv<T: Float>(p: &BoundParams<T>, prefix: &str, x: &Var<T>, geom: ConvGeom) -> Var<T> {
    x.conv2d(p.get(&format!("{prefix}.weight")), geom)
}

fn conv_bias<T: Float>(p: &BoundParams<T>, prefix: &str, x: &Var<T>, geom: ConvGeom) -> Var<T> {
    conv(p, prefix, x, geom).add_channel_bias(p.get(&format!("{prefix}.bias")))
}

fn expect_channels<T: Float>(x: &Var<T>, expected: usize, what: &str) -> Result<()> {
    if x.shape().len() != 4 || x.shape()[1] != expected {
        return Err(Error::Shape(format!(
            "{what} expects {expected} input channels, got shape {:?}",
            x.shape()
        )));
    }
    Ok(())
}

/// Residual block `x + F(x)`, `F` = conv3x3, IN, ReLU, conv3x3, IN.
pub fn resblk_forward<T: Float>(p: &BoundParams<T>, prefix: &str, x: &Var<T>) -> Result<Var<T>> {
    let c = p.get(&format!("{prefix}.conv1.weight")).shape()[1];
    expect_channels(x, c, prefix)?;
    let r = norm(p, &format!("{prefix}.norm1"), &conv(p, &format!("{prefix}.conv1"), x, SAME3)).relu();
    let r = norm(p, &format!("{prefix}.norm2"), &conv(p, &format!("{prefix}.conv2"), &r, SAME3));
    Ok(x.add(&r))
}

/// Residual upsampling block: both the residual path and a 1x1-projected skip path
/// are upsampled 2x with nearest neighbour, then summed.
pub fn resblkup_forward<T: Float>(p: &BoundParams<T>, prefix: &str, x: &Var<T>) -> Result<Var<T>> {
    let cin = p.get(&format!("{prefix}.conv1.weight")).shape()[1];
    expect_channels(x, cin, prefix)?;
    let up = x.upsample2x();
    let r = norm(p, &format!("{prefix}.norm1"), &conv(p, &format!("{prefix}.conv1"), &up, SAME3)).relu();
    let r = norm(p, &format!("{prefix}.norm2"), &conv(p, &format!("{prefix}.conv2"), &r, SAME3));
    // a pointwise projection commutes with nearest-neighbour upsampling
    let skip = conv_bias(p, &format!("{prefix}.skip"), x, POINT).upsample2x();
    Ok(r.add(&skip))
}

fn record<T: Float>(trace: &mut Option<&mut ShapeTrace>, label: &str, v: &Var<T>) {
    if let Some(t) = trace.as_deref_mut() {
        t.push((label.to_string(), v.shape()[1..].to_vec()));
    }
}

// ---- generator -------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams<T> {
    pub config: ArchConfig,
    pub params: ParamSet<T>,
}

pub fn build_generator<T: Float>(config: &ArchConfig, rng: &mut impl Rng) -> Result<GeneratorParams<T>> {
    config.validate()?;
    let b = config.base_channels;
    let h0 = config.bottleneck_extent();
    let mut g = Builder::new(rng);
    match config.generator_order {
        GeneratorOrder::StepByStep => {
            let mut cin = config.n_s;
            for i in 0..4 {
                let co = b << i;
                let layer = format!("G{}", i + 1);
                g.conv(&format!("enc.{i}"), &layer, co, cin, 4, false);
                g.norm(&format!("enc.{i}.norm"), &layer, co);
                cin = co;
            }
            g.normal("latent.fc.weight".into(), "Gb1", &[config.n_z, b * h0 * h0]);
            g.constant("latent.fc.bias".into(), "Gb1", &[b * h0 * h0], 0.0);
            g.norm("latent.norm", "Gb1", b);
            g.resblkup("up.0", "G6", 9 * b, 8 * b);
            g.resblkup("up.1", "G7", 8 * b, 4 * b);
            g.resblkup("up.2", "G9", 4 * b + config.n_c, 2 * b);
        }
        GeneratorOrder::Reversed => {
            g.normal("latent.fc.weight".into(), "Gb1", &[config.n_z, b * h0 * h0]);
            g.constant("latent.fc.bias".into(), "Gb1", &[b * h0 * h0], 0.0);
            g.norm("latent.norm", "Gb1", b);
            g.resblkup("up.0", "G6", b, 8 * b);
            g.resblkup("up.1", "G7", 8 * b, 4 * b);
            g.conv("enc.0", "G1", b, config.n_s, 4, false);
            g.norm("enc.0.norm", "G1", b);
            g.conv("enc.1", "G2", 2 * b, b, 4, false);
            g.norm("enc.1.norm", "G2", 2 * b);
            g.resblkup("up.2", "G9", 6 * b + config.n_c, 2 * b);
        }
    }
    g.resblkup("up.3", "G10", 2 * b, b);
    g.conv("out", "G11", 3, b, 3, true);
    Ok(GeneratorParams { config: config.clone(), params: g.finish() })
}

impl<T: Float> GeneratorParams<T> {
    fn check_inputs(&self, z: &Var<T>, c: &Var<T>, s: &Var<T>) -> Result<usize> {
        let cfg = &self.config;
        let n = z.shape()[0];
        if z.shape() != [n, cfg.n_z] {
            return Err(Error::Shape(format!("latent batch {:?}, expected [{n}, {}]", z.shape(), cfg.n_z)));
        }
        if c.shape() != [n, cfg.n_c] {
            return Err(Error::Shape(format!("label batch {:?}, expected [{n}, {}]", c.shape(), cfg.n_c)));
        }
        let size = cfg.image_size;
        if s.shape() != [n, cfg.n_s, size, size] {
            return Err(Error::Shape(format!(
                "segmentation batch {:?}, expected [{n}, {}, {size}, {size}]",
                s.shape(),
                cfg.n_s
            )));
        }
        Ok(n)
    }

    /// Batched forward pass: `z: [N, n_z]`, `c: [N, n_c]`, `s: [N, n_s, H, W]` one-hot.
    pub fn forward_graph(&self, p: &BoundParams<T>, z: &Var<T>, c: &Var<T>, s: &Var<T>) -> Result<Var<T>> {
        self.forward_traced(p, z, c, s, None)
    }

    pub fn forward_traced(
        &self,
        p: &BoundParams<T>,
        z: &Var<T>,
        c: &Var<T>,
        s: &Var<T>,
        mut trace: Option<&mut ShapeTrace>,
    ) -> Result<Var<T>> {
        let n = self.check_inputs(z, c, s)?;
        let cfg = &self.config;
        let b = cfg.base_channels;
        let h0 = cfg.bottleneck_extent();
        let quarter = cfg.image_size / 4;

        let encode = |x: &Var<T>, i: usize| norm(p, &format!("enc.{i}.norm"), &conv(p, &format!("enc.{i}"), x, DOWN)).relu();
        let latent = || {
            let fc = z
                .matmul(p.get("latent.fc.weight"))
                .add(&p.get("latent.fc.bias").reshape(&[1, b * h0 * h0]).broadcast_to(&[n, b * h0 * h0]));
            norm(p, "latent.norm", &fc.reshape(&[n, b, h0, h0])).relu()
        };
        let labels = c.reshape(&[n, cfg.n_c, 1, 1]).broadcast_to(&[n, cfg.n_c, quarter, quarter]);

        let x = match cfg.generator_order {
            GeneratorOrder::StepByStep => {
                let mut x = s.clone();
                for i in 0..4 {
                    x = encode(&x, i);
                    record(&mut trace, &format!("G{}", i + 1), &x);
                }
                let lat = latent();
                record(&mut trace, "Gb1", &lat);
                let x = Var::concat_channels(&[x, lat]);
                record(&mut trace, "G5", &x);
                let x = resblkup_forward(p, "up.0", &x)?;
                record(&mut trace, "G6", &x);
                let x = resblkup_forward(p, "up.1", &x)?;
                record(&mut trace, "G7", &x);
                record(&mut trace, "Gc1", &labels);
                Var::concat_channels(&[x, labels])
            }
            GeneratorOrder::Reversed => {
                let lat = latent();
                record(&mut trace, "Gb1", &lat);
                let x = resblkup_forward(p, "up.0", &lat)?;
                record(&mut trace, "G6", &x);
                let x = resblkup_forward(p, "up.1", &x)?;
                record(&mut trace, "G7", &x);
                let e = encode(&encode(s, 0), 1);
                record(&mut trace, "G2", &e);
                record(&mut trace, "Gc1", &labels);
                Var::concat_channels(&[x, e, labels])
            }
        };
        record(&mut trace, "G8", &x);
        let x = resblkup_forward(p, "up.2", &x)?;
        record(&mut trace, "G9", &x);
        let x = resblkup_forward(p, "up.3", &x)?;
        record(&mut trace, "G10", &x);
        let y = conv_bias(p, "out", &x, SAME3).tanh();
        record(&mut trace, "G11", &y);
        Ok(y)
    }

    /// Generates a batch of images without recording gradients.
    pub fn generate(
        &self,
        z: &[LatentVector],
        c: &[AttributeLabel],
        s: &[SegmentationMap],
    ) -> Result<Vec<ImageTensor>> {
        if z.len() != c.len() || z.len() != s.len() || z.is_empty() {
            return Err(Error::Shape("generator inputs must be non-empty and equally long".into()));
        }
        if let Some(m) = s.iter().find(|m| m.classes() != self.config.n_s) {
            return Err(Error::Shape(format!(
                "segmentation has {} classes, model expects {}",
                m.classes(),
                self.config.n_s
            )));
        }
        let _guard = NoGradGuard::new();
        let p = self.params.bind(false);
        let out = self.forward_graph(
            &p,
            &Var::constant(LatentVector::batch(z)?),
            &Var::constant(AttributeLabel::batch(c)?),
            &Var::constant(SegmentationMap::batch(s)?),
        )?;
        Ok(ImageTensor::unbatch(out.value()))
    }
}

/// Single-sample generator evaluation.
pub fn generator_forward<T: Float>(
    params: &GeneratorParams<T>,
    z: &LatentVector,
    c: &AttributeLabel,
    s: &SegmentationMap,
) -> Result<ImageTensor> {
    Ok(params
        .generate(std::slice::from_ref(z), std::slice::from_ref(c), std::slice::from_ref(s))?
        .remove(0))
}

// ---- discriminator ---------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams<T> {
    pub config: ArchConfig,
    pub params: ParamSet<T>,
}

pub fn build_discriminator<T: Float>(config: &ArchConfig, rng: &mut impl Rng) -> Result<DiscriminatorParams<T>> {
    config.validate()?;
    let mut d = Builder::new(rng);
    let mut cin = 3;
    for i in 0..config.discriminator_depth() {
        let co = config.base_channels << i;
        d.conv(&format!("conv.{i}"), &format!("D{}", i + 1), co, cin, 4, true);
        cin = co;
    }
    d.conv("critic", "Db", 1, cin, 3, true);
    d.conv("classifier", "Dc", config.n_c, cin, 2, true);
    Ok(DiscriminatorParams { config: config.clone(), params: d.finish() })
}

/// Discriminator outputs for a batch.
pub struct DiscriminatorOutput<T> {
    /// Patch critic map `[N, 1, 2, 2]`.
    pub critic_map: Var<T>,
    /// Per-sample scalar critic: mean of the patch map, `[N]`.
    pub critic: Var<T>,
    /// Raw attribute scores `[N, n_c]`.
    pub class_logits: Var<T>,
}

impl<T: Float> DiscriminatorParams<T> {
    pub fn forward_graph(&self, p: &BoundParams<T>, x: &Var<T>) -> Result<DiscriminatorOutput<T>> {
        self.forward_traced(p, x, None)
    }

    pub fn forward_traced(
        &self,
        p: &BoundParams<T>,
        x: &Var<T>,
        mut trace: Option<&mut ShapeTrace>,
    ) -> Result<DiscriminatorOutput<T>> {
        let size = self.config.image_size;
        let n = x.shape()[0];
        if x.shape() != [n, 3, size, size] {
            return Err(Error::Shape(format!("image batch {:?}, expected [N, 3, {size}, {size}]", x.shape())));
        }
        let slope = T::lit(self.config.leaky_slope);
        let mut h = x.clone();
        for i in 0..self.config.discriminator_depth() {
            h = conv_bias(p, &format!("conv.{i}"), &h, DOWN).leaky_relu(slope);
            record(&mut trace, &format!("D{}", i + 1), &h);
        }
        let critic_map = conv_bias(p, "critic", &h, SAME3);
        record(&mut trace, "Db", &critic_map);
        let extent = h.shape()[2];
        let classifier = conv_bias(p, "classifier", &h, ConvGeom::new(extent, 1, 0));
        record(&mut trace, "Dc", &classifier);
        let (_, _, ch, cw) = critic_map.value().dims4();
        let critic = critic_map.sum_to(&[n, 1, 1, 1]).scale(T::one() / T::lit((ch * cw) as f64)).reshape(&[n]);
        let class_logits = classifier.reshape(&[n, self.config.n_c]);
        Ok(DiscriminatorOutput { critic_map, critic, class_logits })
    }
}

/// Single-image discriminator evaluation: `(critic map [1, h, w], class logits)`.
pub fn discriminator_forward<T: Float>(
    params: &DiscriminatorParams<T>,
    x: &ImageTensor,
) -> Result<(Tensor<T>, Vec<T>)> {
    let _guard = NoGradGuard::new();
    let p = params.params.bind(false);
    let out = params.forward_graph(&p, &Var::constant(ImageTensor::batch(std::slice::from_ref(x))?))?;
    let (_, c, h, w) = out.critic_map.value().dims4();
    Ok((out.critic_map.value().clone().reshape(&[c, h, w]), out.class_logits.value().data().to_vec()))
}

// ---- segmentor -------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentorParams<T> {
    pub config: ArchConfig,
    pub params: ParamSet<T>,
}

pub fn build_segmentor<T: Float>(config: &ArchConfig, rng: &mut impl Rng) -> Result<SegmentorParams<T>> {
    config.validate()?;
    let b = config.base_channels;
    let mut s = Builder::new(rng);
    s.conv("enc.0", "S1", b, 3, 4, false);
    s.norm("enc.0.norm", "S1", b);
    s.conv("enc.1", "S2", 2 * b, b, 4, false);
    s.norm("enc.1.norm", "S2", 2 * b);
    for i in 0..4 {
        s.resblk(&format!("res.{i}"), &format!("S{}", i + 3), 2 * b);
    }
    // transposed-convolution weights are laid out [in, out, k, k]
    s.normal("dec.0.weight".into(), "S7", &[2 * b, b, 4, 4]);
    s.norm("dec.0.norm", "S7", b);
    s.normal("dec.1.weight".into(), "S8", &[b, b / 2, 4, 4]);
    s.norm("dec.1.norm", "S8", b / 2);
    s.conv("out", "S9", config.n_s, b / 2, 3, true);
    Ok(SegmentorParams { config: config.clone(), params: s.finish() })
}

impl<T: Float> SegmentorParams<T> {
    /// Per-pixel class logits `[N, n_s, H, W]`.
    pub fn forward_graph(&self, p: &BoundParams<T>, x: &Var<T>) -> Result<Var<T>> {
        self.forward_traced(p, x, None)
    }

    pub fn forward_traced(&self, p: &BoundParams<T>, x: &Var<T>, mut trace: Option<&mut ShapeTrace>) -> Result<Var<T>> {
        let size = self.config.image_size;
        let n = x.shape()[0];
        if x.shape() != [n, 3, size, size] {
            return Err(Error::Shape(format!("image batch {:?}, expected [N, 3, {size}, {size}]", x.shape())));
        }
        let mut h = x.clone();
        for i in 0..2 {
            h = norm(p, &format!("enc.{i}.norm"), &conv(p, &format!("enc.{i}"), &h, DOWN)).relu();
            record(&mut trace, &format!("S{}", i + 1), &h);
        }
        for i in 0..4 {
            h = resblk_forward(p, &format!("res.{i}"), &h)?;
            record(&mut trace, &format!("S{}", i + 3), &h);
        }
        for (i, extent) in [(0, size / 2), (1, size)] {
            h = h.conv2d_transpose(p.get(&format!("dec.{i}.weight")), DOWN, extent, extent);
            h = norm(p, &format!("dec.{i}.norm"), &h).relu();
            record(&mut trace, &format!("S{}", i + 7), &h);
        }
        let logits = conv_bias(p, "out", &h, SAME3);
        record(&mut trace, "S9", &logits);
        Ok(logits)
    }

    /// Logits for a batch of images, no gradients.
    pub fn logits(&self, images: &[ImageTensor]) -> Result<Tensor<T>> {
        let _guard = NoGradGuard::new();
        let p = self.params.bind(false);
        Ok(self.forward_graph(&p, &Var::constant(ImageTensor::batch(images)?))?.value().clone())
    }
}

/// Per-pixel logits for one image in `(height, width, class)` order.
pub fn segmentor_forward<T: Float>(params: &SegmentorParams<T>, x: &ImageTensor) -> Result<Vec<T>> {
    let t = params.logits(std::slice::from_ref(x))?;
    let (_, k, h, w) = t.dims4();
    let mut out = Vec::with_capacity(k * h * w);
    for p in 0..h * w {
        for c in 0..k {
            out.push(t.data()[c * h * w + p]);
        }
    }
    Ok(out)
}

// ---- bundle ----------------------------------------------------------------

/// The three networks of one model plus the configuration that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub generator: GeneratorParams<f32>,
    pub discriminator: DiscriminatorParams<f32>,
    pub segmentor: SegmentorParams<f32>,
}

impl ModelBundle {
    /// Initialises G, D and S in that order from one random stream.
    pub fn new(config: &ArchConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            generator: build_generator(config, rng)?,
            discriminator: build_discriminator(config, rng)?,
            segmentor: build_segmentor(config, rng)?,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.generator.config
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::one_hot_encode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ArchConfig {
        ArchConfig { image_size: 16, n_s: 3, n_c: 2, n_z: 8, base_channels: 4, ..ArchConfig::reference(3, 2) }
    }

    fn inputs(cfg: &ArchConfig, seed: u64) -> (LatentVector, AttributeLabel, SegmentationMap) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = LatentVector::sample(cfg.n_z, &mut rng);
        let c = AttributeLabel::new(vec![1; cfg.n_c]).unwrap();
        let idx: Vec<i64> =
            (0..cfg.image_size * cfg.image_size).map(|i| (i % cfg.n_s) as i64).collect();
        (z, c, one_hot_encode(&idx, cfg.image_size, cfg.image_size, cfg.n_s).unwrap())
    }

    #[test]
    fn rejects_tiny_or_odd_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for size in [8, 24] {
            let cfg = ArchConfig { image_size: size, ..small() };
            assert!(matches!(build_generator::<f32>(&cfg, &mut rng), Err(Error::Config(_))));
        }
        let cfg = ArchConfig { base_channels: 2, ..small() };
        assert!(build_segmentor::<f32>(&cfg, &mut rng).is_err());
    }

    #[test]
    fn every_input_reaches_the_output_at_the_smallest_size() {
        let cfg = small();
        let g: GeneratorParams<f32> = build_generator(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let (z, c, s) = inputs(&cfg, 1);
        let (z2, _, _) = inputs(&cfg, 2);
        let c2 = AttributeLabel::new(vec![0; cfg.n_c]).unwrap();
        let s2 = SegmentationMap::filled(16, 16, cfg.n_s, 1).unwrap();
        let base = g.generate(&[z.clone()], &[c.clone()], &[s.clone()]).unwrap();
        let max_diff = |other: Vec<ImageTensor>| {
            base[0].data().iter().zip(other[0].data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max)
        };
        assert!(max_diff(g.generate(&[z2], &[c.clone()], &[s.clone()]).unwrap()) > 1e-3);
        assert!(max_diff(g.generate(&[z.clone()], &[c2], &[s.clone()]).unwrap()) > 1e-3);
        assert!(max_diff(g.generate(&[z], &[c], &[s2]).unwrap()) > 1e-3);
    }

    #[test]
    fn single_position_norm_keeps_the_signal() {
        let x = Var::constant(Tensor::new(vec![2, 1, 1, 1], vec![3.0f64, -1.0]));
        let scale = Var::constant(Tensor::new(vec![1], vec![2.0]));
        let shift = Var::constant(Tensor::new(vec![1], vec![0.5]));
        assert_eq!(instance_norm(&x, &scale, &shift).value().data(), &[6.5, -1.5]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = small();
        let a: GeneratorParams<f32> = build_generator(&cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b: GeneratorParams<f32> = build_generator(&cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
        let c: GeneratorParams<f32> = build_generator(&cfg, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
        assert_ne!(a, c);
        assert_eq!(a.params.num_params(), c.params.num_params());
    }

    #[test]
    fn zero_generator_outputs_zero() {
        let cfg = small();
        let mut g: GeneratorParams<f64> = build_generator(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        g.params.zero_all();
        let (z, c, s) = inputs(&cfg, 2);
        let y = generator_forward(&g, &z, &c, &s).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generator_is_deterministic_and_bounded() {
        let cfg = small();
        let g: GeneratorParams<f32> = build_generator(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (z, c, s) = inputs(&cfg, 3);
        let a = generator_forward(&g, &z, &c, &s).unwrap();
        let b = generator_forward(&g, &z, &c, &s).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!((a.height(), a.width()), (16, 16));
    }

    #[test]
    fn generator_rejects_bad_shapes() {
        let cfg = small();
        let g: GeneratorParams<f32> = build_generator(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (z, c, _) = inputs(&cfg, 3);
        let wrong = one_hot_encode(&[0; 64], 8, 8, 3).unwrap();
        assert!(matches!(generator_forward(&g, &z, &c, &wrong), Err(Error::Shape(_))));
        let wrong_classes = one_hot_encode(&[0; 256], 16, 16, 4).unwrap();
        assert!(generator_forward(&g, &z, &c, &wrong_classes).is_err());
        let short_z = LatentVector::new(vec![0.0; 3]).unwrap();
        assert!(generator_forward(&g, &short_z, &c, &inputs(&cfg, 3).2).is_err());
    }

    #[test]
    fn reversed_order_has_same_output_shape() {
        let cfg = ArchConfig { generator_order: GeneratorOrder::Reversed, ..small() };
        let g: GeneratorParams<f32> = build_generator(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (z, c, s) = inputs(&cfg, 4);
        let y = generator_forward(&g, &z, &c, &s).unwrap();
        assert_eq!((y.height(), y.width()), (16, 16));
    }

    #[test]
    fn zero_discriminator_outputs_zero() {
        let cfg = small();
        let mut d: DiscriminatorParams<f64> = build_discriminator(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        d.params.zero_all();
        let x = ImageTensor::new(16, 16, vec![0.3; 16 * 16 * 3]).unwrap();
        let (map, logits) = discriminator_forward(&d, &x).unwrap();
        assert_eq!(map.shape(), &[1, 2, 2]);
        assert!(map.data().iter().all(|&v| v == 0.0));
        assert_eq!(logits, vec![0.0, 0.0]);
    }

    #[test]
    fn scaled_discriminator_ends_at_two_by_two() {
        let cfg = ArchConfig { image_size: 32, ..small() };
        let d: DiscriminatorParams<f32> = build_discriminator(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(cfg.discriminator_depth(), 4);
        let x = ImageTensor::new(32, 32, vec![0.0; 32 * 32 * 3]).unwrap();
        let (map, logits) = discriminator_forward(&d, &x).unwrap();
        assert_eq!(map.shape(), &[1, 2, 2]);
        assert_eq!(logits.len(), 2);
        let wrong = ImageTensor::new(16, 16, vec![0.0; 16 * 16 * 3]).unwrap();
        assert!(discriminator_forward(&d, &wrong).is_err());
    }

    #[test]
    fn zero_segmentor_is_uniform() {
        let cfg = small();
        let mut s: SegmentorParams<f64> = build_segmentor(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        s.params.zero_all();
        let x = ImageTensor::new(16, 16, vec![0.5; 16 * 16 * 3]).unwrap();
        let logits = segmentor_forward(&s, &x).unwrap();
        assert_eq!(logits.len(), 16 * 16 * 3);
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_residual_branch_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut b = Builder::<f64, _>::new(&mut rng);
        b.resblk("blk", "S3", 3);
        let mut params = b.finish();
        for blk in params.blocks_mut() {
            if blk.name.contains("conv") {
                blk.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let p = params.bind(false);
        let x = Var::constant(Tensor::new(vec![1, 3, 2, 2], (0..12).map(|i| i as f64 - 5.5).collect()));
        let y = resblk_forward(&p, "blk", &x).unwrap();
        assert_eq!(y.value(), x.value());
        let wrong = Var::constant(Tensor::zeros(&[1, 4, 2, 2]));
        assert!(resblk_forward(&p, "blk", &wrong).is_err());
    }

    #[test]
    fn resblkup_doubles_extent_and_maps_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut b = Builder::<f64, _>::new(&mut rng);
        b.resblkup("up", "G6", 5, 3);
        let p = b.finish().bind(false);
        let x = Var::constant(Tensor::full(&[2, 5, 4, 4], 0.1));
        let y = resblkup_forward(&p, "up", &x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 8, 8]);
        assert!(resblkup_forward(&p, "up", &Var::constant(Tensor::zeros(&[2, 3, 4, 4]))).is_err());
    }
}
