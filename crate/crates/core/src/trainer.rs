//! Alternating multi-task optimization.
//!
//! Each step designates a main branch (MM or DP). The auxiliary branch still
//! runs and feeds the main branch through the gated cross-attention, but its
//! parameters are detached from the graph and left untouched. The shared
//! encoder, the reconstruction decoder and the global decoder are updated on
//! every step. The loss is the public reconstruction loss on the main task's
//! first input plus the main task's private loss.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datasetgen::{DatasetManifest, JointSample};
use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::losses::{
    loss_mse_t, loss_ssim_t, mixing_weights, mm_private_t, LossValue, Temperature,
};
use crate::network::{save_checkpoint, ArchConfig, Branch, Gifnet, ModelParams};
use crate::saliency::{gradf, Saliency, SaliencyKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    MmMain,
    DpMain,
}

impl Role {
    pub fn main(self) -> Branch {
        match self {
            Role::MmMain => Branch::Mm,
            Role::DpMain => Branch::Dp,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::MmMain => "MM-main",
            Role::DpMain => "DP-main",
        })
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "MM-main" => Ok(Role::MmMain),
            "DP-main" => Ok(Role::DpMain),
            other => Err(Error::InvalidArgument(format!("unknown role `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Alternation {
    /// MM on even steps, DP on odd steps.
    #[default]
    PerStep,
    /// MM for a whole pass over the data, then DP for the next pass.
    PerEpoch,
}

impl FromStr for Alternation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-step" => Ok(Alternation::PerStep),
            "per-epoch" => Ok(Alternation::PerEpoch),
            other => Err(Error::InvalidArgument(format!(
                "unknown alternation `{other}` (per-step, per-epoch)"
            ))),
        }
    }
}

impl fmt::Display for Alternation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Alternation::PerStep => "per-step",
            Alternation::PerEpoch => "per-epoch",
        })
    }
}

/// Which tasks take part in training. Single-task runs are ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Tasks {
    #[default]
    Alternating,
    MmOnly,
    DpOnly,
}

impl FromStr for Tasks {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alternating" => Ok(Tasks::Alternating),
            "mm-only" => Ok(Tasks::MmOnly),
            "dp-only" => Ok(Tasks::DpOnly),
            other => Err(Error::InvalidArgument(format!(
                "unknown task mix `{other}` (alternating, mm-only, dp-only)"
            ))),
        }
    }
}

impl fmt::Display for Tasks {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tasks::Alternating => "alternating",
            Tasks::MmOnly => "mm-only",
            Tasks::DpOnly => "dp-only",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub crop: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub alternation: Alternation,
    /// Write a checkpoint every this many steps; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub tasks: Tasks,
    /// Train with the reconstruction branch and public loss.
    pub use_rec: bool,
    /// Train with gated cross-branch interaction; when off, every λ is held at 0.
    pub use_cfgm: bool,
    pub saliency: SaliencyKind,
    pub temperature: Temperature,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 1,
            crop: 64,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            alternation: Alternation::PerStep,
            checkpoint_every: 0,
            grad_clip: Some(1.0),
            tasks: Tasks::Alternating,
            use_rec: true,
            use_cfgm: true,
            saliency: SaliencyKind::SpatialGrad,
            temperature: Temperature::MeanNormalized,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, arch: &ArchConfig) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return bad("steps must be > 0".into());
        }
        if self.batch == 0 {
            return bad("batch must be > 0".into());
        }
        if self.crop == 0 || !self.crop.is_multiple_of(arch.window) {
            return bad(format!(
                "crop {} must be a positive multiple of the attention window {}",
                self.crop, arch.window
            ));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.eps.is_nan()
            || self.eps <= 0.0
        {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }

    /// Role of `step` for a dataset of `n` samples.
    pub fn role_for_step(&self, step: usize, n: usize) -> Role {
        match self.tasks {
            Tasks::MmOnly => Role::MmMain,
            Tasks::DpOnly => Role::DpMain,
            Tasks::Alternating => {
                let even = match self.alternation {
                    Alternation::PerStep => step.is_multiple_of(2),
                    Alternation::PerEpoch => (step * self.batch / n.max(1)).is_multiple_of(2),
                };
                if even {
                    Role::MmMain
                } else {
                    Role::DpMain
                }
            }
        }
    }

    /// Manifest positions consumed by `step`. Under per-step alternation the
    /// MM and DP steps of a pair read the same samples.
    pub fn sample_indices(&self, step: usize, n: usize) -> Vec<usize> {
        let draw = match (self.tasks, self.alternation) {
            (Tasks::Alternating, Alternation::PerStep) => step / 2,
            _ => step,
        };
        (0..self.batch)
            .map(|j| (draw * self.batch + j) % n)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub role: Role,
    /// Total loss; parts carry the `pub.*` and `pri.*` components.
    pub loss: LossValue,
    pub public: f64,
    pub private: f64,
    /// Gating scalars after the update: MM layers first, then DP layers.
    pub lambda_values: Vec<f32>,
}

impl StepReport {
    /// `step<TAB>role<TAB>total<TAB>pub<TAB>pri<TAB>lambda0,lambda1,...`
    pub fn to_line(&self) -> String {
        let lambdas: Vec<String> = self.lambda_values.iter().map(|l| l.to_string()).collect();
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.step,
            self.role,
            self.loss.scalar,
            self.public,
            self.private,
            lambdas.join(",")
        )
    }
}

/// Parsed report-log line: step, role, total, pub, pri, λ values.
pub fn parse_report_line(line: &str) -> Result<(usize, Role, f64, f64, f64, Vec<f32>)> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 6 {
        return Err(Error::InvalidArgument(format!(
            "report line has {} fields",
            cols.len()
        )));
    }
    let num = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| Error::InvalidArgument(format!("bad number `{s}`")))
    };
    let lambdas = if cols[5].is_empty() {
        Vec::new()
    } else {
        cols[5]
            .split(',')
            .map(|s| {
                s.parse::<f32>()
                    .map_err(|_| Error::InvalidArgument(format!("bad lambda `{s}`")))
            })
            .collect::<Result<_>>()?
    };
    Ok((
        cols[0]
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad step `{}`", cols[0])))?,
        cols[1].parse()?,
        num(cols[2])?,
        num(cols[3])?,
        num(cols[4])?,
        lambdas,
    ))
}

/// Single-channel views of one sample, as consumed by training.
#[derive(Clone, Debug)]
pub struct LumaSample {
    pub vis: Image,
    pub ir: Image,
    pub near: Image,
    pub far: Image,
    pub gt: Image,
}

impl LumaSample {
    pub fn from_joint(s: &JointSample) -> Self {
        Self {
            vis: s.vis.luma(),
            ir: s.ir.luma(),
            near: s.near_focus.luma(),
            far: s.far_focus.luma(),
            gt: s.gt.luma(),
        }
    }

    fn crop(&self, top: usize, left: usize, size: usize) -> Result<Self> {
        Ok(Self {
            vis: self.vis.crop(top, left, size, size)?,
            ir: self.ir.crop(top, left, size, size)?,
            near: self.near.crop(top, left, size, size)?,
            far: self.far.crop(top, left, size, size)?,
            gt: self.gt.crop(top, left, size, size)?,
        })
    }
}

/// A prepared batch: crops already taken, saliency weights already scored.
#[derive(Debug)]
pub struct Batch {
    pub samples: Vec<LumaSample>,
}

struct AdamSlot {
    m: Tensor,
    v: Tensor,
    t: i32,
}

/// Adaptive-moment optimizer with per-parameter step counts, so parameters
/// skipped while frozen get correct bias correction when they resume.
struct Adam {
    slots: BTreeMap<String, AdamSlot>,
}

/// Differentiable loss of one batch and its scalar breakdown.
pub struct BatchLoss {
    pub total: Tensor,
    pub public: LossValue,
    pub private: LossValue,
}

pub struct Trainer {
    params: ModelParams,
    config: TrainConfig,
    saliency: Saliency,
    adam: Adam,
    crop_rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    /// Fresh parameters initialized from `config.seed`.
    pub fn new(arch: &ArchConfig, config: TrainConfig) -> Result<Self> {
        let params = ModelParams::init(arch, config.seed)?;
        Self::with_params(params, config)
    }

    pub fn with_params(params: ModelParams, config: TrainConfig) -> Result<Self> {
        config.validate(params.config())?;
        if !config.use_cfgm {
            for b in [Branch::Mm, Branch::Dp] {
                for name in params.lambda_names(b) {
                    params.fill(&name, 0.0)?;
                }
            }
        }
        let mut crop_rng = ChaCha8Rng::seed_from_u64(config.seed);
        crop_rng.set_stream(2);
        Ok(Self {
            params,
            saliency: Saliency::from_kind(config.saliency),
            config,
            adam: Adam {
                slots: BTreeMap::new(),
            },
            crop_rng,
            step: 0,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Whether `name` is held fixed during a step with `role`.
    pub fn is_frozen(&self, name: &str, role: Role) -> bool {
        let aux = role.main().other().prefix();
        (name.starts_with(aux) && name[aux.len()..].starts_with('.'))
            || (!self.config.use_rec && name.starts_with("rec."))
            || (!self.config.use_cfgm && (name.ends_with(".lambda") || name.contains(".cross.")))
    }

    /// Seeded random crop with coordinates shared by all of a sample's images.
    pub fn prepare_batch(&mut self, samples: &[&LumaSample]) -> Result<Batch> {
        let size = self.config.crop;
        let mut out = Vec::with_capacity(samples.len());
        for s in samples {
            let (h, w) = s.vis.dims();
            if h < size || w < size {
                return Err(Error::Shape(format!(
                    "sample {h}x{w} is smaller than the {size} crop"
                )));
            }
            let top = self.crop_rng.gen_range(0..=h - size);
            let left = self.crop_rng.gen_range(0..=w - size);
            out.push(s.crop(top, left, size)?);
        }
        Ok(Batch { samples: out })
    }

    /// Loss of `batch` under `params` for `role`; frozen parameters are
    /// detached from the returned graph.
    pub fn batch_loss(&self, params: &ModelParams, batch: &Batch, role: Role) -> Result<BatchLoss> {
        let frozen = |n: &str| self.is_frozen(n, role);
        let net = Gifnet::new(params.view_frozen(&frozen)).with_interaction(self.config.use_cfgm);
        let dtype = params.dtype();
        let dev = Device::Cpu;
        let stack = |f: fn(&LumaSample) -> &Image| -> Result<Tensor> {
            let imgs: Vec<&Image> = batch.samples.iter().map(f).collect();
            Image::batch_to_tensor(&imgs, dtype, &dev)
        };
        let (a, b, rec_target) = match role {
            Role::MmMain => (stack(|s| &s.vis)?, stack(|s| &s.ir)?, stack(|s| &s.vis)?),
            Role::DpMain => (stack(|s| &s.near)?, stack(|s| &s.far)?, stack(|s| &s.gt)?),
        };
        let out = net.forward_pair(&a, &b, role.main(), self.config.use_rec)?;

        let mut total: Option<Tensor> = None;
        let mut add = |t: &Tensor| -> Result<()> {
            total = Some(match total.take() {
                None => t.clone(),
                Some(acc) => (acc + t)?,
            });
            Ok(())
        };
        let mut public = LossValue::from_parts(vec![]);
        if let Some(rec) = &out.reconstruction {
            let ssim = loss_ssim_t(rec, &rec_target)?;
            let mse = loss_mse_t(rec, &rec_target)?;
            add(&ssim)?;
            add(&mse)?;
            public = LossValue::from_parts(vec![
                ("ssim".into(), scalar(&ssim)?),
                ("mse".into(), scalar(&mse)?),
            ]);
        }
        let private = match role {
            Role::MmMain => {
                let weights: Vec<_> = batch
                    .samples
                    .iter()
                    .map(|s| {
                        Ok(mixing_weights(
                            gradf(&self.saliency, &s.ir)?,
                            gradf(&self.saliency, &s.vis)?,
                            self.config.temperature,
                        ))
                    })
                    .collect::<Result<_>>()?;
                let vis = stack(|s| &s.vis)?;
                let (ir_term, vis_term) = mm_private_t(&out.fused, &b, &vis, &weights)?;
                add(&ir_term)?;
                add(&vis_term)?;
                let mut v = LossValue::from_parts(vec![
                    ("ir".into(), scalar(&ir_term)?),
                    ("vis".into(), scalar(&vis_term)?),
                ]);
                if weights.len() == 1 {
                    v.weights = Some(weights[0]);
                }
                v
            }
            Role::DpMain => {
                let mse = loss_mse_t(&out.fused, &rec_target)?;
                add(&mse)?;
                LossValue::from_parts(vec![("mse".into(), scalar(&mse)?)])
            }
        };
        Ok(BatchLoss {
            total: total.expect("private loss is always present"),
            public,
            private,
        })
    }

    /// One optimization step on an already prepared batch.
    pub fn step_on_batch(&mut self, batch: &Batch, role: Role) -> Result<StepReport> {
        let loss = self.batch_loss(&self.params, batch, role)?;
        let report_loss = crate::losses::total_loss(&loss.public, &loss.private);
        if !report_loss.scalar.is_finite() || !scalar(&loss.total)?.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                parts: format!("{:?}", report_loss.parts),
            });
        }
        let grads = loss.total.backward()?;

        let mut trainable: Vec<(String, Tensor)> = Vec::new();
        for (name, var) in self.params.iter() {
            if self.is_frozen(name, role) {
                continue;
            }
            if let Some(g) = grads.get(var.as_tensor()) {
                trainable.push((name.to_string(), g.detach()));
            }
        }
        if let Some(cap) = self.config.grad_clip {
            let mut sq = 0f64;
            for (_, g) in &trainable {
                sq += g
                    .sqr()?
                    .sum_all()?
                    .to_dtype(DType::F64)?
                    .to_scalar::<f64>()?;
            }
            let norm = sq.sqrt();
            if !norm.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: self.step,
                    parts: format!("gradient norm {norm}; loss parts {:?}", report_loss.parts),
                });
            }
            if norm > cap {
                let scale = cap / norm;
                for (_, g) in trainable.iter_mut() {
                    *g = (&*g * scale)?;
                }
            }
        }
        for (name, g) in &trainable {
            self.adam_update(name, g)?;
        }

        let mut lambda_values = self.params.lambdas(Branch::Mm)?;
        lambda_values.extend(self.params.lambdas(Branch::Dp)?);
        let report = StepReport {
            step: self.step,
            role,
            public: loss.public.scalar,
            private: loss.private.scalar,
            loss: report_loss,
            lambda_values,
        };
        self.step += 1;
        Ok(report)
    }

    fn adam_update(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        let var = self.params.var(name)?;
        let slot = match self.adam.slots.get_mut(name) {
            Some(s) => s,
            None => {
                let z = var.as_tensor().zeros_like()?;
                self.adam.slots.insert(
                    name.to_string(),
                    AdamSlot {
                        m: z.clone(),
                        v: z,
                        t: 0,
                    },
                );
                self.adam.slots.get_mut(name).unwrap()
            }
        };
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        slot.t += 1;
        slot.m = ((&slot.m * b1)? + (grad * (1.0 - b1))?)?;
        slot.v = ((&slot.v * b2)? + (grad.sqr()? * (1.0 - b2))?)?;
        let m_hat = (&slot.m * (1.0 / (1.0 - b1.powi(slot.t))))?;
        let v_hat = (&slot.v * (1.0 / (1.0 - b2.powi(slot.t))))?;
        let delta = (m_hat / (v_hat.sqrt()? + self.config.eps)?)?;
        let updated = (var.as_tensor() - (delta * self.config.lr)?)?;
        var.set(&updated.detach())?;
        Ok(())
    }

    /// Crops `samples` and takes one step with `role`.
    pub fn train_step(&mut self, samples: &[&LumaSample], role: Role) -> Result<StepReport> {
        let batch = self.prepare_batch(samples)?;
        self.step_on_batch(&batch, role)
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub struct TrainRun {
    pub params: ModelParams,
    pub reports: Vec<StepReport>,
}

/// Trains on in-memory samples in manifest order.
pub fn train_samples(
    samples: &[JointSample],
    arch: &ArchConfig,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    mut on_step: impl FnMut(&StepReport),
) -> Result<TrainRun> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    let luma: Vec<LumaSample> = samples.iter().map(LumaSample::from_joint).collect();
    let mut trainer = Trainer::new(arch, config.clone())?;
    let mut reports = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let role = config.role_for_step(step, luma.len());
        let picked: Vec<&LumaSample> = config
            .sample_indices(step, luma.len())
            .into_iter()
            .map(|i| &luma[i])
            .collect();
        let report = trainer.train_step(&picked, role)?;
        on_step(&report);
        reports.push(report);
        if let Some(dir) = checkpoint_dir {
            if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
                save_checkpoint(trainer.params(), checkpoint_path(dir, step + 1))?;
            }
        }
    }
    Ok(TrainRun {
        params: trainer.into_params(),
        reports,
    })
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("step{step:06}.gifn"))
}

/// Loads every manifest entry and trains on them.
pub fn train_loop(
    manifest: &DatasetManifest,
    arch: &ArchConfig,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    on_step: impl FnMut(&StepReport),
) -> Result<TrainRun> {
    if manifest.entries.is_empty() {
        return Err(Error::InvalidArgument("manifest has no entries".into()));
    }
    config.validate(arch)?;
    let samples = manifest.load_all()?;
    train_samples(&samples, arch, config, checkpoint_dir, on_step)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_step_schedule_alternates() {
        let c = TrainConfig::default();
        let roles: Vec<Role> = (0..4).map(|s| c.role_for_step(s, 8)).collect();
        assert_eq!(
            roles,
            vec![Role::MmMain, Role::DpMain, Role::MmMain, Role::DpMain]
        );
        assert_eq!(c.sample_indices(0, 8), c.sample_indices(1, 8));
        assert_eq!(c.sample_indices(2, 8), vec![1]);
        assert_eq!(c.sample_indices(17, 8), vec![0]);
    }

    #[test]
    fn per_epoch_schedule() {
        let c = TrainConfig {
            alternation: Alternation::PerEpoch,
            batch: 2,
            ..TrainConfig::default()
        };
        // 4 samples, batch 2: two steps per epoch
        let roles: Vec<Role> = (0..6).map(|s| c.role_for_step(s, 4)).collect();
        assert_eq!(
            roles,
            vec![
                Role::MmMain,
                Role::MmMain,
                Role::DpMain,
                Role::DpMain,
                Role::MmMain,
                Role::MmMain
            ]
        );
        assert_eq!(c.sample_indices(1, 4), vec![2, 3]);
    }

    #[test]
    fn single_task_schedules() {
        let c = TrainConfig {
            tasks: Tasks::MmOnly,
            ..TrainConfig::default()
        };
        assert!((0..5).all(|s| c.role_for_step(s, 3) == Role::MmMain));
        assert_eq!(c.sample_indices(1, 3), vec![1]);
    }

    #[test]
    fn config_validation() {
        let arch = ArchConfig::default();
        assert!(TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        }
        .validate(&arch)
        .is_err());
        assert!(TrainConfig {
            crop: 60,
            ..TrainConfig::default()
        }
        .validate(&arch)
        .is_err());
        assert!(TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        }
        .validate(&arch)
        .is_err());
        TrainConfig::default().validate(&arch).unwrap();
    }

    #[test]
    fn report_line_roundtrip() {
        let r = StepReport {
            step: 3,
            role: Role::DpMain,
            loss: LossValue::from_parts(vec![("pub.ssim".into(), 0.25), ("pri.mse".into(), 0.5)]),
            public: 0.25,
            private: 0.5,
            lambda_values: vec![0.1, 0.2],
        };
        let line = r.to_line();
        assert_eq!(line, "3\tDP-main\t0.75\t0.25\t0.5\t0.1,0.2");
        let (step, role, total, p, q, l) = parse_report_line(&line).unwrap();
        assert_eq!(
            (step, role, total, p, q, l),
            (3, Role::DpMain, 0.75, 0.25, 0.5, vec![0.1, 0.2])
        );
        assert_eq!(total, p + q);
    }
}
