//! Adversarial training: alternating discriminator/generator updates with
//! Adam, deterministic epoch shuffling, checkpointing, and resume.
//!
//! Each step runs three phases. First the generator is evaluated without
//! gradients to produce candidates. Then both discriminators take one Adam
//! step on (real, detached-fake) pairs. Finally the generator forward is
//! re-recorded on a fresh tape, discriminator scores are recomputed on the
//! attached candidates with the just-updated (frozen) discriminator
//! weights, and the generator takes its Adam step. Discriminator updates
//! never touch generator parameters and vice versa.
//!
//! All randomness derives from `(seed, epoch)` streams, so resuming from a
//! checkpoint replays exactly the run it interrupted.

use crate::autodiff::{Gradients, Tape, Var};
use crate::data::ImagePair;
use crate::deformation::smoothness_loss;
use crate::error::{Error, Result};
use crate::eval;
use crate::losses::{
    adv_d_loss, adv_g_loss, dnmi_loss, l1_loss, total_discriminator_loss, total_generator_loss,
    DnmiConfig, GeneratorLossTerms, LossWeights,
};
use crate::model::{
    discriminate, forward, infer, init_model_params, model_from_checkpoint, model_tensors,
    Checkpoint, ModelConfig, ModelParams,
};
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::time::Instant;

/// Full training configuration; loadable from TOML or JSON.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub lambda_adv: f64,
    pub lambda_smooth: f64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub integration_steps: usize,
    pub dnmi_bins_warp: usize,
    pub dnmi_bins_cross: usize,
    pub seed: u64,
    pub width_factor: f64,
    pub image_size: usize,
    pub shared_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.5,
            gamma: 1.0,
            lambda_adv: 0.01,
            lambda_smooth: 0.2,
            lr: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 4,
            epochs: 60,
            integration_steps: 7,
            dnmi_bins_warp: 16,
            dnmi_bins_cross: 32,
            seed: 42,
            width_factor: 0.125,
            image_size: 64,
            shared_encoder: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.integration_steps == 0 {
            return Err(Error::Config("integration_steps must be >= 1".into()));
        }
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::Config(format!(
                "image_size must be a positive multiple of 32, got {}",
                self.image_size
            )));
        }
        self.dnmi_warp_cfg().validate()?;
        self.dnmi_cross_cfg().validate()?;
        self.model_config().validate()?;
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            gamma: self.gamma,
            lambda_adv: self.lambda_adv,
            lambda_smooth: self.lambda_smooth,
        }
    }

    pub fn dnmi_warp_cfg(&self) -> DnmiConfig {
        DnmiConfig::new(self.dnmi_bins_warp)
    }

    pub fn dnmi_cross_cfg(&self) -> DnmiConfig {
        DnmiConfig::new(self.dnmi_bins_cross)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            in_channels: 1,
            width_factor: self.width_factor,
            shared_encoder: self.shared_encoder,
        }
    }

    /// Parse a config file; `.toml` and `.json` are both accepted.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: TrainConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            _ => toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

// ── Adam ────────────────────────────────────────────────────────────

/// Per-parameter first/second moments and the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor<f32>]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }

    /// One bias-corrected update across all managed parameters.
    pub fn update(
        &mut self,
        params: &mut [&mut Tensor<f32>],
        grads: &[Tensor<f32>],
        cfg: &TrainConfig,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "adam: {} params, {} grads, state holds {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let (b1, b2) = (cfg.adam_beta1 as f32, cfg.adam_beta2 as f32);
        let corr1 = 1.0 - (cfg.adam_beta1 as f32).powi(self.step as i32);
        let corr2 = 1.0 - (cfg.adam_beta2 as f32).powi(self.step as i32);
        let lr = cfg.lr as f32;
        let eps = cfg.adam_eps as f32;
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..g.numel() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / corr1;
                let v_hat = vi / corr2;
                p.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

// ── loss bookkeeping ────────────────────────────────────────────────

/// Scalar loss components of one step (zero where a term's coefficient
/// vanished and the term was skipped).
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StepRecord {
    pub l1_trans: f64,
    pub dnmi_warp_loss: f64,
    pub dnmi_cross_loss: f64,
    pub adv_g_trans: f64,
    pub adv_g_warp: f64,
    pub smooth: f64,
    pub loss_g: f64,
    pub adv_d_trans: f64,
    pub adv_d_warp: f64,
    pub loss_d: f64,
}

impl StepRecord {
    /// Recompute the generator total from its components.
    pub fn recomposed_loss_g(&self, w: &LossWeights) -> f64 {
        w.alpha * self.l1_trans
            + (1.0 - w.alpha) * self.dnmi_warp_loss
            + w.alpha.min(1.0 - w.alpha) * w.gamma * self.dnmi_cross_loss
            + w.lambda_adv * (w.alpha * self.adv_g_trans + (1.0 - w.alpha) * self.adv_g_warp)
            + (1.0 - w.alpha) * w.lambda_smooth * self.smooth
    }

    pub fn recomposed_loss_d(&self, w: &LossWeights) -> f64 {
        w.lambda_adv * (w.alpha * self.adv_d_trans + (1.0 - w.alpha) * self.adv_d_warp)
    }

    fn add(&mut self, other: &StepRecord) {
        self.l1_trans += other.l1_trans;
        self.dnmi_warp_loss += other.dnmi_warp_loss;
        self.dnmi_cross_loss += other.dnmi_cross_loss;
        self.adv_g_trans += other.adv_g_trans;
        self.adv_g_warp += other.adv_g_warp;
        self.smooth += other.smooth;
        self.loss_g += other.loss_g;
        self.adv_d_trans += other.adv_d_trans;
        self.adv_d_warp += other.adv_d_warp;
        self.loss_d += other.loss_d;
    }

    fn scale(&mut self, s: f64) {
        self.l1_trans *= s;
        self.dnmi_warp_loss *= s;
        self.dnmi_cross_loss *= s;
        self.adv_g_trans *= s;
        self.adv_g_warp *= s;
        self.smooth *= s;
        self.loss_g *= s;
        self.adv_d_trans *= s;
        self.adv_d_warp *= s;
        self.loss_d *= s;
    }
}

/// One epoch of the training log.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub means: StepRecord,
    pub mae_snapshot: f64,
    pub ssim_snapshot: f64,
    /// Wall time per epoch; reported but never serialized into the
    /// deterministic CSV (two identical runs must produce identical files).
    pub wall_ms: u128,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

pub const TRAIN_CSV_HEADER: &str = "epoch,l1_trans,dnmi_warp_loss,dnmi_cross_loss,adv_g_trans,\
adv_g_warp,smooth,loss_g,adv_d_trans,adv_d_warp,loss_d,mae_snapshot,ssim_snapshot";

impl TrainLog {
    /// Deterministic per-epoch CSV (fixed column order, no timing data).
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from(TRAIN_CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let m = &r.means;
            out.push_str(&format!(
                "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}\n",
                r.epoch,
                m.l1_trans,
                m.dnmi_warp_loss,
                m.dnmi_cross_loss,
                m.adv_g_trans,
                m.adv_g_warp,
                m.smooth,
                m.loss_g,
                m.adv_d_trans,
                m.adv_d_warp,
                m.loss_d,
                r.mae_snapshot,
                r.ssim_snapshot
            ));
        }
        out
    }
}

// ── batches ─────────────────────────────────────────────────────────

/// Stack pairs into `[N,1,H,W]` source/reference tensors.
pub fn batch_tensors(pairs: &[&ImagePair]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if pairs.is_empty() {
        return Err(Error::Config("batch must be nonempty".into()));
    }
    let (_, _, h, w) = pairs[0].source.dims4()?;
    let n = pairs.len();
    let mut xs = Vec::with_capacity(n * h * w);
    let mut ys = Vec::with_capacity(n * h * w);
    for p in pairs {
        if p.source.shape() != pairs[0].source.shape() {
            return Err(Error::Shape("batch images must share one shape".into()));
        }
        xs.extend_from_slice(p.source.data());
        ys.extend_from_slice(p.reference.data());
    }
    Ok((
        Tensor::from_vec(vec![n, 1, h, w], xs)?,
        Tensor::from_vec(vec![n, 1, h, w], ys)?,
    ))
}

// ── phase builders ──────────────────────────────────────────────────

struct GeneratorPhase {
    loss: Var,
    record: StepRecord,
    param_vars: Vec<Var>,
}

struct RecordedForward {
    xv: Var,
    yv: Var,
    g_vars: Vec<Var>,
    out: crate::model::ForwardVars,
}

/// Record just the generator forward pass; losses attach later so the
/// discriminator update can happen in between.
fn record_forward(
    tape: &mut Tape<f32>,
    params: &ModelParams<f32>,
    x: &Tensor<f32>,
    y: &Tensor<f32>,
    cfg: &TrainConfig,
    trainable: bool,
) -> Result<RecordedForward> {
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let g = params.generator.bind(tape, trainable);
    let out = forward(tape, xv, &g, cfg.integration_steps)?;
    Ok(RecordedForward {
        xv,
        yv,
        g_vars: g.all(),
        out,
    })
}

/// Attach the generator objective to an already-recorded forward pass:
/// alignment, adversarial scores against frozen discriminators, smoothness.
fn build_generator_losses(
    tape: &mut Tape<f32>,
    params: &ModelParams<f32>,
    fwd: &RecordedForward,
    cfg: &TrainConfig,
) -> Result<GeneratorPhase> {
    let w = cfg.weights();
    let xv = fwd.xv;
    let yv = fwd.yv;
    let out = &fwd.out;

    let mut record = StepRecord::default();
    let l1 = if w.alpha != 0.0 {
        let v = l1_loss(tape, out.y_trans, yv)?;
        record.l1_trans = tape.value(v).item() as f64;
        Some(v)
    } else {
        None
    };
    let dn_warp = if w.alpha != 1.0 {
        let v = dnmi_loss(tape, out.y_warp, yv, &cfg.dnmi_warp_cfg())?;
        record.dnmi_warp_loss = tape.value(v).item() as f64;
        Some(v)
    } else {
        None
    };
    let cross_coeff = w.alpha.min(1.0 - w.alpha) * w.gamma;
    let dn_cross = if cross_coeff != 0.0 {
        let v = dnmi_loss(tape, out.y_trans, out.y_warp, &cfg.dnmi_cross_cfg())?;
        record.dnmi_cross_loss = tape.value(v).item() as f64;
        Some(v)
    } else {
        None
    };
    // Alignment assembled from the already-recorded components, mirroring
    // the standalone content_alignment_loss term for term.
    let mut align_terms: Vec<(Var, f64)> = Vec::new();
    if let Some(v) = l1 {
        align_terms.push((v, w.alpha));
    }
    if let Some(v) = dn_warp {
        align_terms.push((v, 1.0 - w.alpha));
    }
    if let Some(v) = dn_cross {
        align_terms.push((v, cross_coeff));
    }
    let align = weighted_sum_vars(tape, &align_terms)?;

    let adv_g_trans = if w.lambda_adv * w.alpha != 0.0 {
        let d = params.d_trans.bind(tape, false); // frozen during the G step
        let scores = discriminate(tape, xv, out.y_trans, &d)?;
        let v = adv_g_loss(tape, scores);
        record.adv_g_trans = tape.value(v).item() as f64;
        Some(v)
    } else {
        None
    };
    let adv_g_warp = if w.lambda_adv * (1.0 - w.alpha) != 0.0 {
        let d = params.d_warp.bind(tape, false);
        let scores = discriminate(tape, xv, out.y_warp, &d)?;
        let v = adv_g_loss(tape, scores);
        record.adv_g_warp = tape.value(v).item() as f64;
        Some(v)
    } else {
        None
    };
    let smooth = if (1.0 - w.alpha) * w.lambda_smooth != 0.0 {
        let v = smoothness_loss(tape, out.velocity)?;
        record.smooth = tape.value(v).item() as f64;
        Some(v)
    } else {
        None
    };

    let loss = total_generator_loss(
        tape,
        &GeneratorLossTerms {
            align,
            adv_g_trans,
            adv_g_warp,
            smoothness: smooth,
        },
        &w,
    )?;
    record.loss_g = tape.value(loss).item() as f64;
    Ok(GeneratorPhase {
        loss,
        record,
        param_vars: fwd.g_vars.clone(),
    })
}

fn weighted_sum_vars(tape: &mut Tape<f32>, terms: &[(Var, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(t, c) in terms {
        if c == 0.0 {
            continue;
        }
        let scaled = if c == 1.0 { t } else { tape.mul_scalar(t, c) };
        acc = Some(match acc {
            None => scaled,
            Some(p) => tape.add(p, scaled)?,
        });
    }
    Ok(match acc {
        Some(v) => v,
        None => tape.constant(Tensor::scalar(0.0)),
    })
}

struct DiscriminatorPhase {
    loss: Var,
    record: StepRecord,
    param_vars: Vec<Var>,
}

/// Record both discriminator objectives on real pairs and detached fakes.
fn build_discriminator_phase(
    tape: &mut Tape<f32>,
    params: &ModelParams<f32>,
    x: &Tensor<f32>,
    y: &Tensor<f32>,
    fake_trans: &Tensor<f32>,
    fake_warp: &Tensor<f32>,
    cfg: &TrainConfig,
    trainable: bool,
) -> Result<DiscriminatorPhase> {
    let w = cfg.weights();
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let mut record = StepRecord::default();
    let d_trans_vars = params.d_trans.bind(tape, trainable);
    let d_warp_vars = params.d_warp.bind(tape, trainable);

    let l_trans = if w.lambda_adv * w.alpha != 0.0 {
        let fake = tape.constant(fake_trans.clone()); // detached candidate
        let real_scores = discriminate(tape, xv, yv, &d_trans_vars)?;
        let fake_scores = discriminate(tape, xv, fake, &d_trans_vars)?;
        let v = adv_d_loss(tape, real_scores, fake_scores)?;
        record.adv_d_trans = tape.value(v).item() as f64;
        Some(v)
    } else {
        None
    };
    let l_warp = if w.lambda_adv * (1.0 - w.alpha) != 0.0 {
        let fake = tape.constant(fake_warp.clone());
        let real_scores = discriminate(tape, xv, yv, &d_warp_vars)?;
        let fake_scores = discriminate(tape, xv, fake, &d_warp_vars)?;
        let v = adv_d_loss(tape, real_scores, fake_scores)?;
        record.adv_d_warp = tape.value(v).item() as f64;
        Some(v)
    } else {
        None
    };
    let loss = total_discriminator_loss(tape, l_trans, l_warp, &w)?;
    record.loss_d = tape.value(loss).item() as f64;
    let mut param_vars = d_trans_vars.all();
    param_vars.extend(d_warp_vars.all());
    Ok(DiscriminatorPhase {
        loss,
        record,
        param_vars,
    })
}

fn collect_grads(tape: &Tape<f32>, grads: &Gradients<f32>, vars: &[Var]) -> Vec<Tensor<f32>> {
    vars.iter()
        .map(|&v| grads.wrt_or_zeros(v, tape.shape(v)))
        .collect()
}

fn check_finite(record: &StepRecord, cfg: &TrainConfig, step: usize) -> Result<()> {
    let terms = [
        ("l1_trans", record.l1_trans),
        ("dnmi_warp_loss", record.dnmi_warp_loss),
        ("dnmi_cross_loss", record.dnmi_cross_loss),
        ("adv_g_trans", record.adv_g_trans),
        ("adv_g_warp", record.adv_g_warp),
        ("smooth", record.smooth),
        ("loss_g", record.loss_g),
        ("adv_d_trans", record.adv_d_trans),
        ("adv_d_warp", record.adv_d_warp),
        ("loss_d", record.loss_d),
    ];
    for (name, v) in terms {
        if !v.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {step}: {name} = {v}; config: alpha={}, gamma={}, \
                 lambda_adv={}, lambda_smooth={}, lr={}, seed={}",
                cfg.alpha, cfg.gamma, cfg.lambda_adv, cfg.lambda_smooth, cfg.lr, cfg.seed
            )));
        }
    }
    Ok(())
}

// ── train step ──────────────────────────────────────────────────────

/// One optimization step: a discriminator update on detached candidates,
/// then a generator update with refreshed discriminator scores. Exactly
/// one Adam update per network.
pub fn train_step(
    x: &Tensor<f32>,
    y: &Tensor<f32>,
    params: &mut ModelParams<f32>,
    opt_g: &mut AdamState,
    opt_d: &mut AdamState,
    cfg: &TrainConfig,
    step_index: usize,
) -> Result<StepRecord> {
    let w = cfg.weights();
    let mut record = StepRecord::default();

    // Generator forward, recorded once; the discriminator phase sees only
    // detached copies of its outputs.
    let mut tape = Tape::new();
    let fwd = record_forward(&mut tape, params, x, y, cfg, true)?;

    // Discriminator phase, skipped entirely when the adversarial weight is
    // zero (both coefficients vanish and no gradient would flow anyway).
    if w.lambda_adv != 0.0 {
        let fake_trans = tape.value(fwd.out.y_trans).clone();
        let fake_warp = tape.value(fwd.out.y_warp).clone();
        let mut tape_d = Tape::new();
        let phase = build_discriminator_phase(
            &mut tape_d, params, x, y, &fake_trans, &fake_warp, cfg, true,
        )?;
        record.adv_d_trans = phase.record.adv_d_trans;
        record.adv_d_warp = phase.record.adv_d_warp;
        record.loss_d = phase.record.loss_d;
        let grads = tape_d.backward(phase.loss)?;
        let grad_tensors = collect_grads(&tape_d, &grads, &phase.param_vars);
        let mut d_params = params.d_trans.tensors_mut();
        d_params.extend(params.d_warp.tensors_mut());
        opt_d.update(&mut d_params, &grad_tensors, cfg)?;
    }

    // Generator objective against the just-updated, frozen discriminators.
    let phase = build_generator_losses(&mut tape, params, &fwd, cfg)?;
    record.l1_trans = phase.record.l1_trans;
    record.dnmi_warp_loss = phase.record.dnmi_warp_loss;
    record.dnmi_cross_loss = phase.record.dnmi_cross_loss;
    record.adv_g_trans = phase.record.adv_g_trans;
    record.adv_g_warp = phase.record.adv_g_warp;
    record.smooth = phase.record.smooth;
    record.loss_g = phase.record.loss_g;
    check_finite(&record, cfg, step_index)?;
    let grads = tape.backward(phase.loss)?;
    let grad_tensors = collect_grads(&tape, &grads, &phase.param_vars);
    let mut g_params = params.generator.tensors_mut();
    opt_g.update(&mut g_params, &grad_tensors, cfg)?;

    Ok(record)
}

/// Per-parameter gradient max-norms for one batch, without updating
/// anything. Used to verify the degenerate-alpha invariants.
pub struct GradientProbe {
    pub generator: Vec<(String, f64)>,
    pub discriminators: Vec<(String, f64)>,
}

pub fn gradient_probe(
    x: &Tensor<f32>,
    y: &Tensor<f32>,
    params: &ModelParams<f32>,
    cfg: &TrainConfig,
) -> Result<GradientProbe> {
    let mut tape = Tape::new();
    let fwd = record_forward(&mut tape, params, x, y, cfg, true)?;
    let phase = build_generator_losses(&mut tape, params, &fwd, cfg)?;
    let grads = tape.backward(phase.loss)?;
    let names: Vec<String> = params.generator.named().iter().map(|(n, _)| n.clone()).collect();
    let generator = names
        .into_iter()
        .zip(collect_grads(&tape, &grads, &phase.param_vars))
        .map(|(n, g)| (n, g.max_abs() as f64))
        .collect();

    let detached = infer(params, x, cfg.integration_steps)?;
    let mut tape_d = Tape::new();
    let phase_d = build_discriminator_phase(
        &mut tape_d,
        params,
        x,
        y,
        &detached.y_trans,
        &detached.y_warp,
        cfg,
        true,
    )?;
    let grads_d = tape_d.backward(phase_d.loss)?;
    let mut d_names: Vec<String> = params.d_trans.named("d_trans").iter().map(|(n, _)| n.clone()).collect();
    d_names.extend(params.d_warp.named("d_warp").iter().map(|(n, _)| n.clone()));
    let discriminators = d_names
        .into_iter()
        .zip(collect_grads(&tape_d, &grads_d, &phase_d.param_vars))
        .map(|(n, g)| (n, g.max_abs() as f64))
        .collect();

    Ok(GradientProbe {
        generator,
        discriminators,
    })
}

// ── fit loop ────────────────────────────────────────────────────────

/// Model plus optimizer state; everything a resume needs.
pub struct TrainState {
    pub params: ModelParams<f32>,
    pub opt_g: AdamState,
    pub opt_d: AdamState,
    pub next_epoch: usize,
}

pub fn init_state(cfg: &TrainConfig) -> Result<TrainState> {
    cfg.validate()?;
    let params = init_model_params::<f32>(&cfg.model_config(), cfg.seed)?;
    let g_refs: Vec<&Tensor<f32>> = params.generator.named().iter().map(|(_, t)| *t).collect();
    let mut d_refs: Vec<&Tensor<f32>> =
        params.d_trans.named("d_trans").iter().map(|(_, t)| *t).collect();
    d_refs.extend(params.d_warp.named("d_warp").iter().map(|(_, t)| *t));
    let opt_g = AdamState::new(&g_refs);
    let opt_d = AdamState::new(&d_refs);
    Ok(TrainState {
        params,
        opt_g,
        opt_d,
        next_epoch: 0,
    })
}

/// Shuffle stream for one epoch, independent of all other streams.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut z = seed ^ 0xA5A5_5A5A_u64.wrapping_mul(epoch as u64 + 1);
    z = (z ^ (z >> 33)).wrapping_mul(0xFF51AFD7ED558CCD);
    z = (z ^ (z >> 33)).wrapping_mul(0xC4CEB9FE1A85EC53);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 33))
}

/// Train from an existing state (fresh or resumed) to `cfg.epochs`.
/// When `out_dir` is set, periodic and final checkpoints plus the CSV log
/// are written there; checkpoint writes are atomic.
pub fn fit_from(
    mut state: TrainState,
    dataset: &[ImagePair],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(TrainState, TrainLog)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let mut log = TrainLog::default();
    let checkpoint_every = (cfg.epochs / 3).max(1);
    let probe: Vec<&ImagePair> = dataset.iter().take(8).collect();

    for epoch in state.next_epoch..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut rng = epoch_rng(cfg.seed, epoch);
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_mean = StepRecord::default();
        let mut n_steps = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&ImagePair> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (x, y) = batch_tensors(&batch)?;
            let rec = train_step(
                &x,
                &y,
                &mut state.params,
                &mut state.opt_g,
                &mut state.opt_d,
                cfg,
                epoch * 10_000 + bi,
            )?;
            epoch_mean.add(&rec);
            n_steps += 1;
        }
        epoch_mean.scale(1.0 / n_steps as f64);

        // Fixed probe subset keeps the snapshot deterministic and cheap.
        let (mae_snapshot, ssim_snapshot) = snapshot_metrics(&state.params, &probe, cfg)?;
        log.records.push(EpochRecord {
            epoch,
            means: epoch_mean,
            mae_snapshot,
            ssim_snapshot,
            wall_ms: started.elapsed().as_millis(),
        });

        state.next_epoch = epoch + 1;
        if let Some(dir) = out_dir {
            if (epoch + 1) % checkpoint_every == 0 || epoch + 1 == cfg.epochs {
                save_state(&dir.join("checkpoint.ttck"), &state, cfg)?;
            }
            std::fs::write(dir.join("train_log.csv"), log.to_csv_string())?;
        }
    }
    Ok((state, log))
}

pub fn fit(
    dataset: &[ImagePair],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(TrainState, TrainLog)> {
    fit_from(init_state(cfg)?, dataset, cfg, out_dir)
}

fn snapshot_metrics(
    params: &ModelParams<f32>,
    probe: &[&ImagePair],
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let mut mae_acc = 0.0;
    let mut ssim_acc = 0.0;
    for p in probe {
        let out = infer(params, &p.source, cfg.integration_steps)?;
        let pred = eval::to_report_scale(&out.y_trans);
        let refr = eval::to_report_scale(&p.reference);
        mae_acc += eval::mae(&pred, &refr)?;
        ssim_acc += eval::ssim(&pred, &refr, 255.0)?;
    }
    Ok((
        mae_acc / probe.len() as f64,
        ssim_acc / probe.len() as f64,
    ))
}

// ── checkpoint persistence (model + optimizers + epoch) ─────────────

/// Atomic checkpoint write: model tensors, Adam moments, step counters,
/// training config, epoch.
pub fn save_state(path: &Path, state: &TrainState, cfg: &TrainConfig) -> Result<()> {
    let mut tensors = model_tensors(&state.params);
    for (i, (m, v)) in state.opt_g.m.iter().zip(&state.opt_g.v).enumerate() {
        tensors.push((format!("adam_g.m.{i:04}"), m.clone()));
        tensors.push((format!("adam_g.v.{i:04}"), v.clone()));
    }
    for (i, (m, v)) in state.opt_d.m.iter().zip(&state.opt_d.v).enumerate() {
        tensors.push((format!("adam_d.m.{i:04}"), m.clone()));
        tensors.push((format!("adam_d.v.{i:04}"), v.clone()));
    }
    let meta = serde_json::json!({
        "train_config": cfg,
        "epoch": state.next_epoch,
        "adam_g_step": state.opt_g.step,
        "adam_d_step": state.opt_d.step,
    });
    let ckpt = Checkpoint { meta, tensors };
    let tmp = path.with_extension("ttck.tmp");
    ckpt.write(&tmp)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Load a checkpoint written by [`save_state`].
pub fn load_state(path: &Path) -> Result<(TrainState, TrainConfig)> {
    let ckpt = Checkpoint::read(path)?;
    let cfg: TrainConfig = serde_json::from_value(
        ckpt.meta
            .get("train_config")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("checkpoint missing train_config".into()))?,
    )
    .map_err(|e| Error::Checkpoint(format!("train_config parse: {e}")))?;
    let params = model_from_checkpoint(&ckpt, &cfg.model_config())?;
    let epoch = ckpt
        .meta
        .get("epoch")
        .and_then(|v| v.as_u64())
        .unwrap_or(0) as usize;

    let load_moments = |prefix: &str, count: usize| -> Result<(Vec<Tensor<f32>>, Vec<Tensor<f32>>)> {
        let mut ms = Vec::with_capacity(count);
        let mut vs = Vec::with_capacity(count);
        for i in 0..count {
            ms.push(
                ckpt.tensor(&format!("{prefix}.m.{i:04}"))
                    .cloned()
                    .ok_or_else(|| Error::Checkpoint(format!("missing {prefix}.m.{i:04}")))?,
            );
            vs.push(
                ckpt.tensor(&format!("{prefix}.v.{i:04}"))
                    .cloned()
                    .ok_or_else(|| Error::Checkpoint(format!("missing {prefix}.v.{i:04}")))?,
            );
        }
        Ok((ms, vs))
    };
    let n_g = params.generator.named().len();
    let n_d = params.d_trans.named("d_trans").len() + params.d_warp.named("d_warp").len();
    let (gm, gv) = load_moments("adam_g", n_g)?;
    let (dm, dv) = load_moments("adam_d", n_d)?;
    let opt_g = AdamState {
        m: gm,
        v: gv,
        step: ckpt.meta.get("adam_g_step").and_then(|v| v.as_u64()).unwrap_or(0),
    };
    let opt_d = AdamState {
        m: dm,
        v: dv,
        step: ckpt.meta.get("adam_d_step").and_then(|v| v.as_u64()).unwrap_or(0),
    };
    Ok((
        TrainState {
            params,
            opt_g,
            opt_d,
            next_epoch: epoch,
        },
        cfg,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SynthConfig};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 2,
            image_size: 32,
            ..Default::default()
        }
    }

    fn tiny_dataset(n: usize) -> Vec<ImagePair> {
        generate_dataset(&SynthConfig {
            image_size: 32,
            n_pairs: n,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn adam_zero_gradient_leaves_parameter_unchanged() {
        let cfg = TrainConfig::default();
        let p0 = Tensor::from_vec(vec![3], vec![1.0f32, -2.0, 0.5]).unwrap();
        let mut p = p0.clone();
        let mut opt = AdamState::new(&[&p]);
        let g = Tensor::zeros(&[3]);
        opt.update(&mut [&mut p], &[g], &cfg).unwrap();
        assert_eq!(p, p0);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        // With zero moments and constant gradient g, the bias-corrected
        // first step is -lr * g / (|g| + eps') which is close to -lr*sign(g).
        let cfg = TrainConfig {
            lr: 1e-3,
            ..Default::default()
        };
        let mut p = Tensor::from_vec(vec![2], vec![0.0f32, 0.0]).unwrap();
        let mut opt = AdamState::new(&[&p]);
        let g = Tensor::from_vec(vec![2], vec![0.25f32, -3.0]).unwrap();
        opt.update(&mut [&mut p], &[g], &cfg).unwrap();
        assert!((p.data()[0] + 1e-3).abs() < 1e-6, "{}", p.data()[0]);
        assert!((p.data()[1] - 1e-3).abs() < 1e-6, "{}", p.data()[1]);
    }

    #[test]
    fn zero_learning_rate_is_rejected_but_tiny_rate_keeps_params() {
        // lr must be positive by config contract; the "unchanged" behavior
        // is exercised through a zero gradient instead.
        let cfg = TrainConfig {
            lr: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn train_step_loss_decomposes_into_components() {
        let cfg = tiny_cfg();
        let data = tiny_dataset(2);
        let mut state = init_state(&cfg).unwrap();
        let batch: Vec<&ImagePair> = data.iter().collect();
        let (x, y) = batch_tensors(&batch).unwrap();
        let rec = train_step(
            &x,
            &y,
            &mut state.params,
            &mut state.opt_g,
            &mut state.opt_d,
            &cfg,
            0,
        )
        .unwrap();
        let w = cfg.weights();
        assert!((rec.loss_g - rec.recomposed_loss_g(&w)).abs() < 1e-6);
        assert!((rec.loss_d - rec.recomposed_loss_d(&w)).abs() < 1e-6);
        assert!(rec.loss_g.is_finite() && rec.loss_d.is_finite());
    }

    #[test]
    fn step_phases_touch_only_their_own_networks() {
        let cfg = tiny_cfg();
        let data = tiny_dataset(2);
        let mut state = init_state(&cfg).unwrap();
        let batch: Vec<&ImagePair> = data.iter().collect();
        let (x, y) = batch_tensors(&batch).unwrap();

        // Discriminator phase only.
        let gen_before = state.params.generator.clone();
        let detached = infer(&state.params, &x, cfg.integration_steps).unwrap();
        let mut tape = Tape::new();
        let phase = build_discriminator_phase(
            &mut tape,
            &state.params,
            &x,
            &y,
            &detached.y_trans,
            &detached.y_warp,
            &cfg,
            true,
        )
        .unwrap();
        let grads = tape.backward(phase.loss).unwrap();
        let gt = collect_grads(&tape, &grads, &phase.param_vars);
        let mut d_params = state.params.d_trans.tensors_mut();
        d_params.extend(state.params.d_warp.tensors_mut());
        state.opt_d.update(&mut d_params, &gt, &cfg).unwrap();
        assert_eq!(state.params.generator, gen_before);

        // Generator phase only.
        let d_trans_before = state.params.d_trans.clone();
        let d_warp_before = state.params.d_warp.clone();
        let mut tape_g = Tape::new();
        let fwd_g = record_forward(&mut tape_g, &state.params, &x, &y, &cfg, true).unwrap();
        let phase_g = build_generator_losses(&mut tape_g, &state.params, &fwd_g, &cfg).unwrap();
        let grads_g = tape_g.backward(phase_g.loss).unwrap();
        let gt_g = collect_grads(&tape_g, &grads_g, &phase_g.param_vars);
        let mut g_params = state.params.generator.tensors_mut();
        state.opt_g.update(&mut g_params, &gt_g, &cfg).unwrap();
        assert_eq!(state.params.d_trans, d_trans_before);
        assert_eq!(state.params.d_warp, d_warp_before);
        assert_ne!(state.params.generator, gen_before);
    }

    #[test]
    fn alpha_one_sends_zero_gradance_to_warp_stream() {
        let cfg = TrainConfig {
            alpha: 1.0,
            ..tiny_cfg()
        };
        let data = tiny_dataset(2);
        let state = init_state(&cfg).unwrap();
        let batch: Vec<&ImagePair> = data.iter().collect();
        let (x, y) = batch_tensors(&batch).unwrap();
        let probe = gradient_probe(&x, &y, &state.params, &cfg).unwrap();
        for (name, norm) in &probe.generator {
            if name.starts_with("gen.dec_f") {
                assert_eq!(*norm, 0.0, "{name} received gradient at alpha=1");
            }
        }
        assert!(probe
            .generator
            .iter()
            .any(|(n, g)| n.starts_with("gen.dec_g") && *g > 0.0));
        for (name, norm) in &probe.discriminators {
            if name.starts_with("d_warp") {
                assert_eq!(*norm, 0.0, "{name} received gradient at alpha=1");
            }
        }

        // Three real steps leave the disabled stream bit-identical.
        let mut state = init_state(&cfg).unwrap();
        let dec_f_before = state.params.generator.dec_f.clone();
        let d_warp_before = state.params.d_warp.clone();
        for s in 0..3 {
            train_step(
                &x,
                &y,
                &mut state.params,
                &mut state.opt_g,
                &mut state.opt_d,
                &cfg,
                s,
            )
            .unwrap();
        }
        assert_eq!(state.params.generator.dec_f, dec_f_before);
        assert_eq!(state.params.d_warp, d_warp_before);
    }

    #[test]
    fn alpha_zero_sends_zero_gradient_to_translation_stream() {
        let cfg = TrainConfig {
            alpha: 0.0,
            ..tiny_cfg()
        };
        let data = tiny_dataset(2);
        // Seed the velocity head so the warp stream carries signal.
        let mut state = init_state(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        state.params.generator.dec_f.head.weight = Tensor::from_fn(
            state.params.generator.dec_f.head.weight.shape(),
            |_| rng.gen_range(-0.05f32..0.05),
        );
        let batch: Vec<&ImagePair> = data.iter().collect();
        let (x, y) = batch_tensors(&batch).unwrap();
        let probe = gradient_probe(&x, &y, &state.params, &cfg).unwrap();
        for (name, norm) in &probe.generator {
            if name.starts_with("gen.dec_g") {
                assert_eq!(*norm, 0.0, "{name} received gradient at alpha=0");
            }
        }
        assert!(probe
            .generator
            .iter()
            .any(|(n, g)| n.starts_with("gen.dec_f") && *g > 0.0));
        for (name, norm) in &probe.discriminators {
            if name.starts_with("d_trans") {
                assert_eq!(*norm, 0.0, "{name} received gradient at alpha=0");
            }
        }
    }

    #[test]
    fn identical_seeds_produce_identical_logs() {
        let cfg = tiny_cfg();
        let data = tiny_dataset(4);
        let (state_a, log_a) = fit(&data, &cfg, None).unwrap();
        let (state_b, log_b) = fit(&data, &cfg, None).unwrap();
        assert_eq!(state_a.params, state_b.params);
        assert_eq!(log_a.to_csv_string(), log_b.to_csv_string());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_dataset(4);
        let full_cfg = TrainConfig {
            epochs: 4,
            ..tiny_cfg()
        };
        let (full_state, full_log) = fit(&data, &full_cfg, None).unwrap();

        let half_cfg = TrainConfig {
            epochs: 2,
            ..full_cfg
        };
        let (half_state, _) = fit(&data, &half_cfg, None).unwrap();
        let ckpt_path = dir.path().join("half.ttck");
        save_state(&ckpt_path, &half_state, &half_cfg).unwrap();
        let (resumed, _) = load_state(&ckpt_path).unwrap();
        assert_eq!(resumed.next_epoch, 2);
        let (resumed_state, resumed_log) = fit_from(resumed, &data, &full_cfg, None).unwrap();

        assert_eq!(resumed_state.params, full_state.params);
        let tail: Vec<String> = full_log.records[2..]
            .iter()
            .map(|r| format!("{:?}", r.means))
            .collect();
        let resumed_all: Vec<String> = resumed_log
            .records
            .iter()
            .map(|r| format!("{:?}", r.means))
            .collect();
        assert_eq!(tail, resumed_all);
    }

    #[test]
    fn epochs_zero_rejected() {
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn config_parses_from_toml_and_json() {
        let dir = tempfile::tempdir().unwrap();
        let toml_path = dir.path().join("cfg.toml");
        std::fs::write(&toml_path, "alpha = 0.25\nepochs = 3\n").unwrap();
        let cfg = TrainConfig::from_file(&toml_path).unwrap();
        assert_eq!(cfg.alpha, 0.25);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.lr, 2e-4);

        let json_path = dir.path().join("cfg.json");
        std::fs::write(&json_path, r#"{"gamma": 0.5, "batch_size": 2}"#).unwrap();
        let cfg = TrainConfig::from_file(&json_path).unwrap();
        assert_eq!(cfg.gamma, 0.5);
        assert_eq!(cfg.batch_size, 2);
    }
}
