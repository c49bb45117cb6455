use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ArchConfig, Branch, ENCODER_INPUT_CHANNELS};
use crate::error::{Error, Result};

pub const LAMBDA_INIT: f32 = 0.1;
const ATTENTION_INIT_STD: f32 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(-1/√fan_in, 1/√fan_in)`.
    FanInUniform {
        fan_in: usize,
    },
    /// Normal truncated at two standard deviations.
    TruncNormal {
        std: f32,
    },
    Const(f32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    fn conv(out: &mut Vec<Self>, prefix: &str, cout: usize, cin: usize, k: usize) {
        out.push(Self::new(
            format!("{prefix}.weight"),
            &[cout, cin, k, k],
            Init::FanInUniform {
                fan_in: cin * k * k,
            },
        ));
        out.push(Self::new(
            format!("{prefix}.bias"),
            &[cout],
            Init::Const(0.0),
        ));
    }

    fn linear(out: &mut Vec<Self>, prefix: &str, fout: usize, fin: usize) {
        out.push(Self::new(
            format!("{prefix}.weight"),
            &[fout, fin],
            Init::TruncNormal {
                std: ATTENTION_INIT_STD,
            },
        ));
        out.push(Self::new(
            format!("{prefix}.bias"),
            &[fout],
            Init::Const(0.0),
        ));
    }

    fn norm(out: &mut Vec<Self>, prefix: &str, dim: usize) {
        out.push(Self::new(
            format!("{prefix}.weight"),
            &[dim],
            Init::Const(1.0),
        ));
        out.push(Self::new(
            format!("{prefix}.bias"),
            &[dim],
            Init::Const(0.0),
        ));
    }
}

pub(crate) fn lambda_name(branch: Branch, layer: usize) -> String {
    format!("{}.layer{layer}.lambda", branch.prefix())
}

/// Every learnable tensor of the architecture, in a fixed order.
pub fn param_specs(config: &ArchConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let base = config.base_channels;
    for i in 0..config.enc_layers {
        ParamSpec::conv(
            &mut specs,
            &format!("senc.block{i}"),
            base,
            ENCODER_INPUT_CHANNELS + i * base,
            3,
        );
    }
    let shared = config.shared_channels();
    let rec_hidden = (shared / 2).max(1);
    ParamSpec::conv(&mut specs, "rec.conv1", rec_hidden, shared, 3);
    ParamSpec::conv(&mut specs, "rec.conv2", 1, rec_hidden, 3);

    let e = config.embed_dim;
    let hidden = config.mlp_hidden();
    for branch in [Branch::Mm, Branch::Dp] {
        let b = branch.prefix();
        ParamSpec::conv(&mut specs, &format!("{b}.embed"), e, 2 * shared, 1);
        for l in 1..=config.branch_layers {
            let p = format!("{b}.layer{l}");
            ParamSpec::norm(&mut specs, &format!("{p}.norm1"), e);
            ParamSpec::linear(&mut specs, &format!("{p}.attn.qkv"), 3 * e, e);
            ParamSpec::linear(&mut specs, &format!("{p}.attn.out"), e, e);
            ParamSpec::norm(&mut specs, &format!("{p}.norm2"), e);
            ParamSpec::linear(&mut specs, &format!("{p}.mlp.fc1"), hidden, e);
            ParamSpec::linear(&mut specs, &format!("{p}.mlp.fc2"), e, hidden);
            if ArchConfig::is_cross_layer(l) {
                ParamSpec::norm(&mut specs, &format!("{p}.cross.norm_q"), e);
                ParamSpec::norm(&mut specs, &format!("{p}.cross.norm_kv"), e);
                ParamSpec::linear(&mut specs, &format!("{p}.cross.q"), e, e);
                ParamSpec::linear(&mut specs, &format!("{p}.cross.kv"), 2 * e, e);
                ParamSpec::linear(&mut specs, &format!("{p}.cross.out"), e, e);
                specs.push(ParamSpec::new(
                    lambda_name(branch, l),
                    &[],
                    Init::Const(LAMBDA_INIT),
                ));
            }
        }
    }

    let dec_hidden = (e / 2).max(1);
    ParamSpec::conv(&mut specs, "gdec.conv1", dec_hidden, e, 3);
    ParamSpec::conv(&mut specs, "gdec.conv2", 1, dec_hidden, 3);
    specs
}

fn sample_trunc_normal(rng: &mut ChaCha8Rng, std: f32) -> f32 {
    loop {
        // Box-Muller
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return (z * std as f64) as f32;
        }
    }
}

/// All learnable tensors, addressed by hierarchical dotted names.
#[derive(Debug)]
pub struct ModelParams {
    config: ArchConfig,
    device: Device,
    vars: BTreeMap<String, Var>,
}

impl ModelParams {
    /// Seeded initialization in f32.
    pub fn init(config: &ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let device = Device::Cpu;
        let mut vars = BTreeMap::new();
        for spec in param_specs(config) {
            let n: usize = spec.shape.iter().product();
            let data: Vec<f32> = match spec.init {
                Init::Const(v) => vec![v; n],
                Init::FanInUniform { fan_in } => {
                    let bound = 1.0 / (fan_in as f32).sqrt();
                    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                }
                Init::TruncNormal { std } => {
                    (0..n).map(|_| sample_trunc_normal(&mut rng, std)).collect()
                }
            };
            let t = Tensor::from_vec(data, spec.shape.as_slice(), &device)?;
            vars.insert(spec.name, Var::from_tensor(&t)?);
        }
        Ok(Self {
            config: config.clone(),
            device,
            vars,
        })
    }

    /// Builds parameters from named tensors, checking names and shapes
    /// against the architecture.
    pub fn from_tensors(
        config: &ArchConfig,
        mut tensors: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        config.validate()?;
        let mut vars = BTreeMap::new();
        for spec in param_specs(config) {
            let t = tensors
                .remove(&spec.name)
                .ok_or_else(|| Error::Shape(format!("missing parameter `{}`", spec.name)))?;
            if t.dims() != spec.shape.as_slice() {
                return Err(Error::Shape(format!(
                    "parameter `{}` has shape {:?}, architecture expects {:?}",
                    spec.name,
                    t.dims(),
                    spec.shape
                )));
            }
            vars.insert(spec.name, Var::from_tensor(&t.to_dtype(DType::F32)?)?);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Shape(format!("unexpected parameter `{extra}`")));
        }
        Ok(Self {
            config: config.clone(),
            device: Device::Cpu,
            vars,
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.vars
            .values()
            .next()
            .map(|v| v.dtype())
            .unwrap_or(DType::F32)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn var(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named `{name}`")))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        Ok(self.var(name)?.as_tensor().clone())
    }

    /// Overwrites a parameter in place; the shape must match.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self.var(name)?;
        if var.dims() != value.dims() {
            return Err(Error::Shape(format!(
                "cannot assign {:?} to `{name}` of shape {:?}",
                value.dims(),
                var.dims()
            )));
        }
        var.set(&value.to_dtype(var.dtype())?)?;
        Ok(())
    }

    pub fn fill(&self, name: &str, value: f64) -> Result<()> {
        let var = self.var(name)?;
        let t = (var.as_tensor().zeros_like()? + value)?;
        self.set(name, &t)
    }

    /// Flattened f32 copy of a parameter.
    pub fn values(&self, name: &str) -> Result<Vec<f32>> {
        Ok(self
            .var(name)?
            .as_tensor()
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1()?)
    }

    /// Independent copy; later updates to either side do not affect the other.
    pub fn deep_clone(&self) -> Result<Self> {
        self.to_dtype(self.dtype())
    }

    /// Independent copy converted to `dtype` (used for f64 gradient checks).
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (k, v) in &self.vars {
            let t = v.as_tensor().to_dtype(dtype)?.copy()?;
            vars.insert(k.clone(), Var::from_tensor(&t)?);
        }
        Ok(Self {
            config: self.config.clone(),
            device: self.device.clone(),
            vars,
        })
    }

    pub fn lambda_names(&self, branch: Branch) -> Vec<String> {
        self.config
            .cross_layers()
            .map(|l| lambda_name(branch, l))
            .collect()
    }

    /// Current gating scalars of a branch, ordered by layer.
    pub fn lambdas(&self, branch: Branch) -> Result<Vec<f32>> {
        self.lambda_names(branch)
            .iter()
            .map(|n| Ok(self.values(n)?[0]))
            .collect()
    }

    /// Exact bitwise equality of every tensor.
    pub fn bit_equal(&self, other: &ModelParams) -> Result<bool> {
        if self.config != other.config || self.vars.len() != other.vars.len() {
            return Ok(false);
        }
        for (name, var) in &self.vars {
            let a = self.values(name)?;
            let b = match other.vars.get(name) {
                Some(_) => other.values(name)?,
                None => return Ok(false),
            };
            if var.dims() != other.vars[name].dims()
                || a.iter().zip(&b).any(|(x, y)| x.to_bits() != y.to_bits())
            {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn view(&self) -> ParamView<'_> {
        ParamView {
            params: self,
            frozen: None,
        }
    }

    /// View in which parameters matching `frozen` are detached from the
    /// autograd graph.
    pub fn view_frozen<'a>(&'a self, frozen: &'a dyn Fn(&str) -> bool) -> ParamView<'a> {
        ParamView {
            params: self,
            frozen: Some(frozen),
        }
    }
}

/// Read access to parameters for a forward pass.
#[derive(Clone, Copy)]
pub struct ParamView<'a> {
    params: &'a ModelParams,
    frozen: Option<&'a dyn Fn(&str) -> bool>,
}

impl<'a> ParamView<'a> {
    pub fn params(&self) -> &'a ModelParams {
        self.params
    }

    pub fn config(&self) -> &'a ArchConfig {
        &self.params.config
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        let t = self.params.var(name)?.as_tensor();
        Ok(match self.frozen {
            Some(f) if f(name) => t.detach(),
            _ => t.clone(),
        })
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.map(|f| f(name)).unwrap_or(false)
    }
}
