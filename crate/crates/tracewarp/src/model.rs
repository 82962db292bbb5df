//! The dual-stream generator and the conditional patch discriminators.
//!
//! One encoder extracts a five-stage feature pyramid (4x4 stride-2
//! convolutions, leaky ReLU). Two mirrored decoders consume it through
//! U-Net-style skip connections: `dec_g` ends in a tanh head producing the
//! translated image, `dec_f` ends in a linear 2-channel head producing the
//! stationary velocity field. The velocity head starts at exactly zero so
//! training begins from the identity deformation.
//!
//! Discriminators are conditional patch classifiers: the source image is
//! concatenated channel-wise with the candidate, three 4x4 stride-2 blocks
//! reduce 64 -> 8, and a 3x3 stride-1 head emits one score per patch.
//! `d_trans` and `d_warp` never share weights.
//!
//! Convention fixed here (kernel sizes, upsample-then-3x3 decoder blocks,
//! slope-0.2 leaky ReLU, no normalization layers): the desk-scale model
//! trains fine without normalization and the reduced op set keeps every
//! backward rule auditable.

use crate::autodiff::{Tape, Var};
use crate::deformation::{self, DeformationField, DisplacementField, VelocityField};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::io::{Read, Write};
use std::path::Path;

pub const LEAKY_SLOPE: f64 = 0.2;
/// Encoder output channels before width scaling.
pub const BASE_ENC_CHANNELS: [usize; 5] = [64, 128, 256, 512, 512];
/// Discriminator block channels before width scaling.
pub const BASE_DISC_CHANNELS: [usize; 3] = [64, 128, 256];
const INIT_STD: f64 = 0.02;

/// Structural knobs of the network.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Multiplier on the base channel counts; 1.0 is full scale, 1/8 desk scale.
    pub width_factor: f64,
    /// When false, the velocity stream gets its own encoder (no feature sharing).
    pub shared_encoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            width_factor: 0.125,
            shared_encoder: true,
        }
    }
}

impl ModelConfig {
    pub fn enc_channels(&self) -> [usize; 5] {
        BASE_ENC_CHANNELS.map(|c| scale_channels(c, self.width_factor))
    }

    pub fn disc_channels(&self) -> [usize; 3] {
        BASE_DISC_CHANNELS.map(|c| scale_channels(c, self.width_factor))
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("model: in_channels must be >= 1".into()));
        }
        if !(self.width_factor > 0.0) || !self.width_factor.is_finite() {
            return Err(Error::Config(format!(
                "model: width_factor must be positive, got {}",
                self.width_factor
            )));
        }
        Ok(())
    }
}

fn scale_channels(base: usize, factor: f64) -> usize {
    ((base as f64 * factor).round() as usize).max(1)
}

/// One convolution layer's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub weight: Tensor<T>, // [out, in, kh, kw]
    pub bias: Tensor<T>,   // [out]
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams<T> {
    pub blocks: Vec<ConvLayer<T>>,
    pub head: ConvLayer<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams<T> {
    pub encoder: Vec<ConvLayer<T>>,
    /// Separate encoder for the velocity stream; `None` shares `encoder`.
    pub encoder_f: Option<Vec<ConvLayer<T>>>,
    pub dec_g: DecoderParams<T>,
    pub dec_f: DecoderParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams<T> {
    pub blocks: Vec<ConvLayer<T>>,
    pub head: ConvLayer<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub generator: GeneratorParams<T>,
    pub d_trans: DiscriminatorParams<T>,
    pub d_warp: DiscriminatorParams<T>,
}

// ── initialization ──────────────────────────────────────────────────

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn conv<T: Scalar>(&mut self, c_out: usize, c_in: usize, k: usize) -> ConvLayer<T> {
        let dist = Normal::new(0.0f64, INIT_STD).expect("valid normal");
        let weight = Tensor::from_fn(&[c_out, c_in, k, k], |_| {
            crate::tensor::sc(dist.sample(&mut self.rng))
        });
        ConvLayer {
            weight,
            bias: Tensor::zeros(&[c_out]),
        }
    }

    fn conv_zero<T: Scalar>(&mut self, c_out: usize, c_in: usize, k: usize) -> ConvLayer<T> {
        ConvLayer {
            weight: Tensor::zeros(&[c_out, c_in, k, k]),
            bias: Tensor::zeros(&[c_out]),
        }
    }
}

fn init_encoder<T: Scalar>(init: &mut Init, in_channels: usize, chans: &[usize; 5]) -> Vec<ConvLayer<T>> {
    let mut layers = Vec::with_capacity(5);
    let mut prev = in_channels;
    for &c in chans {
        layers.push(init.conv(c, prev, 4));
        prev = c;
    }
    layers
}

fn init_decoder<T: Scalar>(
    init: &mut Init,
    chans: &[usize; 5],
    out_channels: usize,
    zero_head: bool,
) -> DecoderParams<T> {
    // Blocks walk the pyramid back up: skip concat on the first four.
    let [c1, c2, c3, c4, c5] = *chans;
    let specs = [
        (c5 + c4, c4),
        (c4 + c3, c3),
        (c3 + c2, c2),
        (c2 + c1, c1),
        (c1, c1),
    ];
    let blocks = specs
        .iter()
        .map(|&(i, o)| init.conv(o, i, 3))
        .collect();
    let head = if zero_head {
        init.conv_zero(out_channels, c1, 3)
    } else {
        init.conv(out_channels, c1, 3)
    };
    DecoderParams { blocks, head }
}

fn init_discriminator<T: Scalar>(
    init: &mut Init,
    in_channels: usize,
    chans: &[usize; 3],
) -> DiscriminatorParams<T> {
    let mut blocks = Vec::with_capacity(3);
    let mut prev = 2 * in_channels; // condition + candidate
    for &c in chans {
        blocks.push(init.conv(c, prev, 4));
        prev = c;
    }
    DiscriminatorParams {
        blocks,
        head: init.conv(1, prev, 3),
    }
}

/// Seeded parameter initialization: weights N(0, 0.02), biases zero, and the
/// velocity head exactly zero so the initial deformation is the identity.
pub fn init_model_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let enc = cfg.enc_channels();
    let disc = cfg.disc_channels();
    let encoder = init_encoder(&mut init, cfg.in_channels, &enc);
    let encoder_f = if cfg.shared_encoder {
        None
    } else {
        Some(init_encoder(&mut init, cfg.in_channels, &enc))
    };
    let dec_g = init_decoder(&mut init, &enc, cfg.in_channels, false);
    let dec_f = init_decoder(&mut init, &enc, 2, true);
    let d_trans = init_discriminator(&mut init, cfg.in_channels, &disc);
    let d_warp = init_discriminator(&mut init, cfg.in_channels, &disc);
    Ok(ModelParams {
        config: *cfg,
        generator: GeneratorParams {
            encoder,
            encoder_f,
            dec_g,
            dec_f,
        },
        d_trans,
        d_warp,
    })
}

// ── named parameter traversal ───────────────────────────────────────

fn visit_conv<'a, T>(name: String, layer: &'a ConvLayer<T>, out: &mut Vec<(String, &'a Tensor<T>)>) {
    out.push((format!("{name}.weight"), &layer.weight));
    out.push((format!("{name}.bias"), &layer.bias));
}

fn visit_decoder<'a, T>(
    prefix: &str,
    dec: &'a DecoderParams<T>,
    out: &mut Vec<(String, &'a Tensor<T>)>,
) {
    for (i, b) in dec.blocks.iter().enumerate() {
        visit_conv(format!("{prefix}.block{i}"), b, out);
    }
    visit_conv(format!("{prefix}.head"), &dec.head, out);
}

impl<T: Scalar> GeneratorParams<T> {
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.iter().enumerate() {
            visit_conv(format!("gen.enc.{i}"), l, &mut out);
        }
        if let Some(enc_f) = &self.encoder_f {
            for (i, l) in enc_f.iter().enumerate() {
                visit_conv(format!("gen.enc_f.{i}"), l, &mut out);
            }
        }
        visit_decoder("gen.dec_g", &self.dec_g, &mut out);
        visit_decoder("gen.dec_f", &self.dec_f, &mut out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for l in self.encoder.iter_mut() {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        if let Some(enc_f) = self.encoder_f.as_mut() {
            for l in enc_f.iter_mut() {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        for dec in [&mut self.dec_g, &mut self.dec_f] {
            for b in dec.blocks.iter_mut() {
                out.push(&mut b.weight);
                out.push(&mut b.bias);
            }
            out.push(&mut dec.head.weight);
            out.push(&mut dec.head.bias);
        }
        out
    }
}

impl<T: Scalar> DiscriminatorParams<T> {
    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            visit_conv(format!("{prefix}.block{i}"), b, &mut out);
        }
        visit_conv(format!("{prefix}.head"), &self.head, &mut out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for b in self.blocks.iter_mut() {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }
}

impl<T: Scalar> ModelParams<T> {
    /// All parameters in a stable order: generator, d_trans, d_warp.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.generator.named();
        out.extend(self.d_trans.named("d_trans"));
        out.extend(self.d_warp.named("d_warp"));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let cast_conv = |l: &ConvLayer<T>| ConvLayer {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
        };
        let cast_dec = |d: &DecoderParams<T>| DecoderParams {
            blocks: d.blocks.iter().map(cast_conv).collect(),
            head: cast_conv(&d.head),
        };
        let cast_disc = |d: &DiscriminatorParams<T>| DiscriminatorParams {
            blocks: d.blocks.iter().map(cast_conv).collect(),
            head: cast_conv(&d.head),
        };
        ModelParams {
            config: self.config,
            generator: GeneratorParams {
                encoder: self.generator.encoder.iter().map(cast_conv).collect(),
                encoder_f: self
                    .generator
                    .encoder_f
                    .as_ref()
                    .map(|e| e.iter().map(cast_conv).collect()),
                dec_g: cast_dec(&self.generator.dec_g),
                dec_f: cast_dec(&self.generator.dec_f),
            },
            d_trans: cast_disc(&self.d_trans),
            d_warp: cast_disc(&self.d_warp),
        }
    }
}

// ── binding parameters onto a tape ──────────────────────────────────

#[derive(Clone, Copy)]
pub struct ConvVars {
    pub w: Var,
    pub b: Var,
}

pub struct DecoderVars {
    pub blocks: Vec<ConvVars>,
    pub head: ConvVars,
}

pub struct GeneratorVars {
    pub encoder: Vec<ConvVars>,
    pub encoder_f: Option<Vec<ConvVars>>,
    pub dec_g: DecoderVars,
    pub dec_f: DecoderVars,
}

pub struct DiscriminatorVars {
    pub blocks: Vec<ConvVars>,
    pub head: ConvVars,
}

fn bind_conv<T: Scalar>(tape: &mut Tape<T>, l: &ConvLayer<T>, trainable: bool) -> ConvVars {
    ConvVars {
        w: tape.leaf(l.weight.clone(), trainable),
        b: tape.leaf(l.bias.clone(), trainable),
    }
}

fn bind_decoder<T: Scalar>(tape: &mut Tape<T>, d: &DecoderParams<T>, trainable: bool) -> DecoderVars {
    DecoderVars {
        blocks: d.blocks.iter().map(|b| bind_conv(tape, b, trainable)).collect(),
        head: bind_conv(tape, &d.head, trainable),
    }
}

impl<T: Scalar> GeneratorParams<T> {
    /// Copy parameters onto the tape as leaves, in `named()` order.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> GeneratorVars {
        GeneratorVars {
            encoder: self
                .encoder
                .iter()
                .map(|l| bind_conv(tape, l, trainable))
                .collect(),
            encoder_f: self
                .encoder_f
                .as_ref()
                .map(|e| e.iter().map(|l| bind_conv(tape, l, trainable)).collect()),
            dec_g: bind_decoder(tape, &self.dec_g, trainable),
            dec_f: bind_decoder(tape, &self.dec_f, trainable),
        }
    }
}

impl<T: Scalar> DiscriminatorParams<T> {
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> DiscriminatorVars {
        DiscriminatorVars {
            blocks: self
                .blocks
                .iter()
                .map(|b| bind_conv(tape, b, trainable))
                .collect(),
            head: bind_conv(tape, &self.head, trainable),
        }
    }
}

impl GeneratorVars {
    /// Rebuild the structure from a flat var list in `all()` order, using a
    /// parameter set as the shape template. Used by the gradient checker to
    /// treat parameters as checkable inputs.
    pub fn from_vars<T: Scalar>(template: &GeneratorParams<T>, vars: &[Var]) -> Self {
        let mut it = vars.iter().copied();
        let mut next_conv = |_: &ConvLayer<T>| ConvVars {
            w: it.next().expect("enough vars"),
            b: it.next().expect("enough vars"),
        };
        let encoder: Vec<ConvVars> = template.encoder.iter().map(&mut next_conv).collect();
        let encoder_f = template
            .encoder_f
            .as_ref()
            .map(|e| e.iter().map(&mut next_conv).collect());
        let mut next_dec = |d: &DecoderParams<T>| DecoderVars {
            blocks: d.blocks.iter().map(&mut next_conv).collect(),
            head: next_conv(&d.head),
        };
        let dec_g = next_dec(&template.dec_g);
        let dec_f = next_dec(&template.dec_f);
        assert!(it.next().is_none(), "var count matches parameter count");
        GeneratorVars {
            encoder,
            encoder_f,
            dec_g,
            dec_f,
        }
    }

    /// Vars in the same order as `GeneratorParams::named`.
    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        let push_conv = |out: &mut Vec<Var>, c: &ConvVars| {
            out.push(c.w);
            out.push(c.b);
        };
        for c in &self.encoder {
            push_conv(&mut out, c);
        }
        if let Some(enc_f) = &self.encoder_f {
            for c in enc_f {
                push_conv(&mut out, c);
            }
        }
        for dec in [&self.dec_g, &self.dec_f] {
            for b in &dec.blocks {
                push_conv(&mut out, b);
            }
            push_conv(&mut out, &dec.head);
        }
        out
    }
}

impl DiscriminatorVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.push(b.w);
            out.push(b.b);
        }
        out.push(self.head.w);
        out.push(self.head.b);
        out
    }
}

// ── forward passes ──────────────────────────────────────────────────

/// Five-stage feature pyramid; stage i has spatial size `H/2^(i+1)`.
pub fn encode<T: Scalar>(tape: &mut Tape<T>, x: Var, enc: &[ConvVars]) -> Result<Vec<Var>> {
    let (_, _, h, w) = tape.value(x).dims4()?;
    if h % 32 != 0 || w % 32 != 0 {
        return Err(Error::Shape(format!(
            "encoder input spatial size must be divisible by 32, got {h}x{w}"
        )));
    }
    let mut feats = Vec::with_capacity(enc.len());
    let mut cur = x;
    for layer in enc {
        cur = tape.conv2d(cur, layer.w, layer.b, 2, 1)?;
        cur = tape.leaky_relu(cur, LEAKY_SLOPE);
        feats.push(cur);
    }
    Ok(feats)
}

fn decode<T: Scalar>(
    tape: &mut Tape<T>,
    feats: &[Var],
    dec: &DecoderVars,
    tanh_head: bool,
) -> Result<Var> {
    let mut cur = feats[4];
    for (i, blk) in dec.blocks.iter().enumerate() {
        cur = tape.upsample_nearest2x(cur)?;
        if i < 4 {
            cur = tape.concat(cur, feats[3 - i], 1)?;
        }
        cur = tape.conv2d(cur, blk.w, blk.b, 1, 1)?;
        cur = tape.leaky_relu(cur, LEAKY_SLOPE);
    }
    let out = tape.conv2d(cur, dec.head.w, dec.head.b, 1, 1)?;
    Ok(if tanh_head { tape.tanh(out) } else { out })
}

/// Translated image in [-1, 1], full input resolution.
pub fn decode_translate<T: Scalar>(
    tape: &mut Tape<T>,
    feats: &[Var],
    g: &GeneratorVars,
) -> Result<Var> {
    decode(tape, feats, &g.dec_g, true)
}

/// Stationary velocity field, 2 channels, no bounding nonlinearity.
pub fn decode_velocity<T: Scalar>(
    tape: &mut Tape<T>,
    feats: &[Var],
    g: &GeneratorVars,
) -> Result<Var> {
    decode(tape, feats, &g.dec_f, false)
}

/// On-tape generator outputs; the deformation is carried as its displacement.
pub struct ForwardVars {
    pub y_trans: Var,
    pub y_warp: Var,
    pub velocity: Var,
    pub displacement: Var,
}

/// Full generator pass: encode, both decoders, velocity integration, warp.
/// One tape, so a loss on any output reaches every generator parameter.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    g: &GeneratorVars,
    steps: usize,
) -> Result<ForwardVars> {
    let feats = encode(tape, x, &g.encoder)?;
    let y_trans = decode_translate(tape, &feats, g)?;
    let velocity = match &g.encoder_f {
        Some(enc_f) => {
            let feats_f = encode(tape, x, enc_f)?;
            decode_velocity(tape, &feats_f, g)?
        }
        None => decode_velocity(tape, &feats, g)?,
    };
    let displacement = deformation::integrate_velocity(tape, velocity, steps)?;
    let y_warp = tape.warp(x, displacement)?;
    Ok(ForwardVars {
        y_trans,
        y_warp,
        velocity,
        displacement,
    })
}

/// Patch scores `[N,1,M,M]` for a candidate under the source-image condition.
pub fn discriminate<T: Scalar>(
    tape: &mut Tape<T>,
    x_cond: Var,
    candidate: Var,
    d: &DiscriminatorVars,
) -> Result<Var> {
    if tape.shape(x_cond)[2..] != tape.shape(candidate)[2..] {
        return Err(Error::Shape(format!(
            "discriminate: condition {:?} and candidate {:?} spatial sizes differ",
            tape.shape(x_cond),
            tape.shape(candidate)
        )));
    }
    let mut cur = tape.concat(x_cond, candidate, 1)?;
    for blk in &d.blocks {
        cur = tape.conv2d(cur, blk.w, blk.b, 2, 1)?;
        cur = tape.leaky_relu(cur, LEAKY_SLOPE);
    }
    tape.conv2d(cur, d.head.w, d.head.b, 1, 1)
}

/// Detached generator outputs for inference and evaluation.
#[derive(Clone, Debug)]
pub struct ModelOutput<T> {
    pub y_trans: Tensor<T>,
    pub y_warp: Tensor<T>,
    pub velocity: VelocityField<T>,
    pub displacement: DisplacementField<T>,
    pub deformation: DeformationField<T>,
}

/// Run the generator without gradient tracking.
pub fn infer<T: Scalar>(
    params: &ModelParams<T>,
    x: &Tensor<T>,
    steps: usize,
) -> Result<ModelOutput<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = params.generator.bind(&mut tape, false);
    let out = forward(&mut tape, xv, &g, steps)?;
    let displacement = DisplacementField::new(tape.value(out.displacement).clone())?;
    Ok(ModelOutput {
        y_trans: tape.value(out.y_trans).clone(),
        y_warp: tape.value(out.y_warp).clone(),
        velocity: VelocityField::new(tape.value(out.velocity).clone())?,
        deformation: DeformationField::from_displacement(displacement.clone()),
        displacement,
    })
}

// ── checkpoint format ───────────────────────────────────────────────

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named-tensor container with a JSON metadata block (training config,
/// epoch, optimizer state layout).
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    /// Layout: magic, version, meta length + JSON, tensor manifest
    /// (name, shape, data offset), then raw little-endian f32 data.
    pub fn write(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_vec(&self.meta)
            .map_err(|e| Error::Checkpoint(format!("meta serialization: {e}")))?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(CHECKPOINT_MAGIC)?;
        f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        f.write_all(&(meta.len() as u64).to_le_bytes())?;
        f.write_all(&meta)?;
        f.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            f.write_all(&(nb.len() as u32).to_le_bytes())?;
            f.write_all(nb)?;
            f.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                f.write_all(&(d as u32).to_le_bytes())?;
            }
            f.write_all(&offset.to_le_bytes())?;
            offset += (t.numel() * 4) as u64;
        }
        let mut blob = Vec::with_capacity(offset as usize);
        for (_, t) in &self.tensors {
            for &v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        f.write_all(&blob)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "{}: bad magic {:?}, expected \"TTCK\"",
                path.display(),
                magic
            )));
        }
        let mut u32buf = [0u8; 4];
        let mut u64buf = [0u8; 8];
        f.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        f.read_exact(&mut u64buf)?;
        let meta_len = u64::from_le_bytes(u64buf) as usize;
        let mut meta_bytes = vec![0u8; meta_len];
        f.read_exact(&mut meta_bytes)?;
        let meta: serde_json::Value = serde_json::from_slice(&meta_bytes)
            .map_err(|e| Error::Checkpoint(format!("meta parse: {e}")))?;
        f.read_exact(&mut u32buf)?;
        let n_tensors = u32::from_le_bytes(u32buf) as usize;
        let mut manifest: Vec<(String, Vec<usize>, u64)> = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            f.read_exact(&mut u32buf)?;
            let name_len = u32::from_le_bytes(u32buf) as usize;
            let mut name = vec![0u8; name_len];
            f.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("non-utf8 tensor name".into()))?;
            f.read_exact(&mut u32buf)?;
            let ndim = u32::from_le_bytes(u32buf) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                f.read_exact(&mut u32buf)?;
                shape.push(u32::from_le_bytes(u32buf) as usize);
            }
            f.read_exact(&mut u64buf)?;
            manifest.push((name, shape, u64::from_le_bytes(u64buf)));
        }
        let mut blob = Vec::new();
        f.read_to_end(&mut blob)?;
        let mut tensors = Vec::with_capacity(n_tensors);
        for (name, shape, offset) in manifest {
            let numel: usize = shape.iter().product();
            let start = offset as usize;
            let end = start + numel * 4;
            if end > blob.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} data out of bounds"
                )));
            }
            let data: Vec<f32> = blob[start..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.push((name, Tensor::from_vec(shape, data)?));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }
}

/// Rebuild model parameters from a checkpoint's named tensors.
pub fn model_from_checkpoint(ckpt: &Checkpoint, cfg: &ModelConfig) -> Result<ModelParams<f32>> {
    let get = |name: String| -> Result<Tensor<f32>> {
        ckpt.tensor(&name)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    };
    let conv = |prefix: String| -> Result<ConvLayer<f32>> {
        Ok(ConvLayer {
            weight: get(format!("{prefix}.weight"))?,
            bias: get(format!("{prefix}.bias"))?,
        })
    };
    let encoder_at = |prefix: &str| -> Result<Vec<ConvLayer<f32>>> {
        (0..5).map(|i| conv(format!("{prefix}.{i}"))).collect()
    };
    let decoder_at = |prefix: &str| -> Result<DecoderParams<f32>> {
        Ok(DecoderParams {
            blocks: (0..5)
                .map(|i| conv(format!("{prefix}.block{i}")))
                .collect::<Result<_>>()?,
            head: conv(format!("{prefix}.head"))?,
        })
    };
    let disc_at = |prefix: &str| -> Result<DiscriminatorParams<f32>> {
        Ok(DiscriminatorParams {
            blocks: (0..3)
                .map(|i| conv(format!("{prefix}.block{i}")))
                .collect::<Result<_>>()?,
            head: conv(format!("{prefix}.head"))?,
        })
    };
    let encoder_f = if ckpt.tensor("gen.enc_f.0.weight").is_some() {
        Some(encoder_at("gen.enc_f")?)
    } else {
        None
    };
    let params = ModelParams {
        config: ModelConfig {
            shared_encoder: encoder_f.is_none(),
            ..*cfg
        },
        generator: GeneratorParams {
            encoder: encoder_at("gen.enc")?,
            encoder_f,
            dec_g: decoder_at("gen.dec_g")?,
            dec_f: decoder_at("gen.dec_f")?,
        },
        d_trans: disc_at("d_trans")?,
        d_warp: disc_at("d_warp")?,
    };
    if !params.is_finite() {
        return Err(Error::Checkpoint("checkpoint contains non-finite parameters".into()));
    }
    Ok(params)
}

/// Named tensors of the full model, cloned for serialization.
pub fn model_tensors(params: &ModelParams<f32>) -> Vec<(String, Tensor<f32>)> {
    params
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses;
    use rand::Rng;

    fn desk_config() -> ModelConfig {
        ModelConfig::default()
    }

    fn rand_image(n: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, 1, h, w], |_| rng.gen_range(-1.0f32..1.0))
    }

    #[test]
    fn desk_scale_channels_and_pyramid_sizes() {
        let cfg = desk_config();
        assert_eq!(cfg.enc_channels(), [8, 16, 32, 64, 64]);
        let params = init_model_params::<f32>(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(rand_image(1, 64, 64, 2));
        let g = params.generator.bind(&mut tape, false);
        let feats = encode(&mut tape, x, &g.encoder).unwrap();
        let sizes: Vec<usize> = feats.iter().map(|&f| tape.shape(f)[2]).collect();
        assert_eq!(sizes, vec![32, 16, 8, 4, 2]);
        for (i, &f) in feats.iter().enumerate() {
            assert_eq!(tape.shape(f)[1], cfg.enc_channels()[i]);
        }
    }

    #[test]
    fn indivisible_spatial_size_rejected() {
        let params = init_model_params::<f32>(&desk_config(), 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(rand_image(1, 48, 48, 2));
        let g = params.generator.bind(&mut tape, false);
        assert!(matches!(
            encode(&mut tape, x, &g.encoder),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_features() {
        let params = init_model_params::<f32>(&desk_config(), 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 32, 32]));
        let g = params.generator.bind(&mut tape, false);
        let feats = encode(&mut tape, x, &g.encoder).unwrap();
        for &f in &feats {
            assert!(tape.value(f).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn forward_outputs_have_expected_shapes_and_ranges() {
        let params = init_model_params::<f32>(&desk_config(), 7).unwrap();
        let x = rand_image(2, 32, 32, 3);
        let out = infer(&params, &x, 7).unwrap();
        assert_eq!(out.y_trans.shape(), &[2, 1, 32, 32]);
        assert_eq!(out.y_warp.shape(), &[2, 1, 32, 32]);
        assert_eq!(out.velocity.grid().shape(), &[2, 2, 32, 32]);
        assert!(out.y_trans.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(out.y_trans.is_finite() && out.y_warp.is_finite());
    }

    #[test]
    fn zero_velocity_head_starts_at_identity_warp() {
        let params = init_model_params::<f32>(&desk_config(), 11).unwrap();
        let x = rand_image(1, 32, 32, 5);
        let out = infer(&params, &x, 7).unwrap();
        assert!(out.velocity.grid().max_abs() < 1e-3);
        for (a, b) in out.y_warp.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn translation_stream_ignores_velocity_parameters() {
        let cfg = desk_config();
        let params = init_model_params::<f32>(&cfg, 13).unwrap();
        let mut zeroed = params.clone();
        for b in zeroed.generator.dec_f.blocks.iter_mut() {
            b.weight = Tensor::zeros(b.weight.shape());
            b.bias = Tensor::zeros(b.bias.shape());
        }
        let x = rand_image(1, 32, 32, 17);
        let a = infer(&params, &x, 7).unwrap();
        let b = infer(&zeroed, &x, 7).unwrap();
        assert_eq!(a.y_trans, b.y_trans);
    }

    #[test]
    fn forward_is_deterministic_across_runs() {
        let params = init_model_params::<f32>(&desk_config(), 23).unwrap();
        let params2 = init_model_params::<f32>(&desk_config(), 23).unwrap();
        assert_eq!(params, params2);
        let x = rand_image(1, 32, 32, 29);
        let a = infer(&params, &x, 7).unwrap();
        let b = infer(&params2, &x, 7).unwrap();
        assert_eq!(a.y_trans, b.y_trans);
        assert_eq!(a.y_warp, b.y_warp);
        assert_eq!(a.velocity.grid(), b.velocity.grid());
    }

    #[test]
    fn discriminator_patch_grid_is_input_over_eight() {
        let params = init_model_params::<f32>(&desk_config(), 3).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(rand_image(2, 64, 64, 31));
        let cand = tape.constant(rand_image(2, 64, 64, 37));
        let d = params.d_trans.bind(&mut tape, false);
        let scores = discriminate(&mut tape, x, cand, &d).unwrap();
        assert_eq!(tape.shape(scores), &[2, 1, 8, 8]);
        assert!(tape.value(scores).is_finite());
    }

    #[test]
    fn discriminator_is_batch_equivariant() {
        let params = init_model_params::<f32>(&desk_config(), 3).unwrap();
        let x = rand_image(2, 32, 32, 41);
        let cand = rand_image(2, 32, 32, 43);
        let swap = |t: &Tensor<f32>| {
            let hw = t.numel() / 2;
            let mut data = t.data()[hw..].to_vec();
            data.extend_from_slice(&t.data()[..hw]);
            Tensor::from_vec(t.shape().to_vec(), data).unwrap()
        };
        let run = |xv: &Tensor<f32>, cv: &Tensor<f32>| {
            let mut tape = Tape::new();
            let x = tape.constant(xv.clone());
            let c = tape.constant(cv.clone());
            let d = params.d_warp.bind(&mut tape, false);
            let s = discriminate(&mut tape, x, c, &d).unwrap();
            tape.value(s).clone()
        };
        let fwd = run(&x, &cand);
        let rev = run(&swap(&x), &swap(&cand));
        assert_eq!(swap(&fwd), rev);
    }

    #[test]
    fn warp_stream_loss_reaches_encoder_but_not_translation_decoder() {
        let cfg = desk_config();
        let mut params = init_model_params::<f32>(&cfg, 19).unwrap();
        // Give the velocity head real weights so the warp stream is active.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        params.generator.dec_f.head.weight =
            Tensor::from_fn(params.generator.dec_f.head.weight.shape(), |_| {
                rng.gen_range(-0.05f32..0.05)
            });
        let x = rand_image(1, 32, 32, 47);
        let y = rand_image(1, 32, 32, 53);

        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let yv = tape.constant(y);
        let g = params.generator.bind(&mut tape, true);
        let out = forward(&mut tape, xv, &g, 7).unwrap();
        let loss =
            losses::dnmi_loss(&mut tape, out.y_warp, yv, &losses::DnmiConfig::new(16)).unwrap();
        let grads = tape.backward(loss).unwrap();

        let enc_w_grad = grads.wrt_or_zeros(g.encoder[0].w, tape.shape(g.encoder[0].w));
        assert!(enc_w_grad.data().iter().any(|&v| v != 0.0));
        let f_head_grad = grads.wrt_or_zeros(g.dec_f.head.w, tape.shape(g.dec_f.head.w));
        assert!(f_head_grad.data().iter().any(|&v| v != 0.0));
        for blk in &g.dec_g.blocks {
            assert!(grads
                .wrt_or_zeros(blk.w, tape.shape(blk.w))
                .data()
                .iter()
                .all(|&v| v == 0.0));
        }
    }

    #[test]
    fn translation_loss_reaches_encoder_but_not_velocity_decoder() {
        let params = init_model_params::<f32>(&desk_config(), 19).unwrap();
        let x = rand_image(1, 32, 32, 47);
        let y = rand_image(1, 32, 32, 53);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let yv = tape.constant(y);
        let g = params.generator.bind(&mut tape, true);
        let out = forward(&mut tape, xv, &g, 7).unwrap();
        let loss = losses::l1_loss(&mut tape, out.y_trans, yv).unwrap();
        let grads = tape.backward(loss).unwrap();

        let enc_w_grad = grads.wrt_or_zeros(g.encoder[0].w, tape.shape(g.encoder[0].w));
        assert!(enc_w_grad.data().iter().any(|&v| v != 0.0));
        for blk in g.dec_f.blocks.iter().chain(std::iter::once(&g.dec_f.head)) {
            assert!(grads
                .wrt_or_zeros(blk.w, tape.shape(blk.w))
                .data()
                .iter()
                .all(|&v| v == 0.0));
        }
        // Every encoder parameter sees gradient from the translation stream.
        for layer in &g.encoder {
            let gw = grads.wrt_or_zeros(layer.w, tape.shape(layer.w));
            assert!(gw.data().iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn desk_parameter_count_is_stable() {
        let params = init_model_params::<f32>(&desk_config(), 1).unwrap();
        // Regression guard: structural edits show up here first.
        assert_eq!(params.param_count(), 352_197);
        let two_stream = init_model_params::<f32>(
            &ModelConfig {
                shared_encoder: false,
                ..desk_config()
            },
            1,
        )
        .unwrap();
        assert_eq!(two_stream.param_count(), 352_197 + 108_856);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ttck");
        let params = init_model_params::<f32>(&desk_config(), 77).unwrap();
        let ckpt = Checkpoint {
            meta: serde_json::json!({"note": "test"}),
            tensors: model_tensors(&params),
        };
        ckpt.write(&path).unwrap();
        let loaded = Checkpoint::read(&path).unwrap();
        let restored = model_from_checkpoint(&loaded, &desk_config()).unwrap();
        assert_eq!(params, restored);

        // And forward agrees bit-for-bit.
        let x = rand_image(1, 32, 32, 5);
        let a = infer(&params, &x, 7).unwrap();
        let b = infer(&restored, &x, 7).unwrap();
        assert_eq!(a.y_trans, b.y_trans);
        assert_eq!(a.velocity.grid(), b.velocity.grid());
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ttck");
        std::fs::write(&path, b"XXXX available junk").unwrap();
        assert!(matches!(
            Checkpoint::read(&path),
            Err(Error::Checkpoint(_))
        ));
    }
}
