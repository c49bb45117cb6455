//! Gradient-based information scores used to weight the multi-modal targets.
//!
//! `spatial-grad` (default) scores an image by the total absolute spatial
//! gradient of a fixed Laplacian-of-Gaussian response. `classifier-grad`
//! scores it Grad-CAM style: the absolute gradients of a classifier's top
//! logit with respect to its last feature map, summed.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::network::ops::{conv2d_same, leaky_relu};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SaliencyKind {
    #[default]
    SpatialGrad,
    ClassifierGrad,
}

impl fmt::Display for SaliencyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SaliencyKind::SpatialGrad => "spatial-grad",
            SaliencyKind::ClassifierGrad => "classifier-grad",
        })
    }
}

impl FromStr for SaliencyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial-grad" => Ok(SaliencyKind::SpatialGrad),
            "classifier-grad" => Ok(SaliencyKind::ClassifierGrad),
            other => Err(Error::InvalidArgument(format!(
                "unknown saliency backend `{other}` (spatial-grad, classifier-grad)"
            ))),
        }
    }
}

/// An image classifier split at its last feature map.
pub trait Classifier {
    /// `(1, C, H, W)` image → `(1, K, h, w)` feature map.
    fn features(&self, x: &Tensor) -> Result<Tensor>;
    /// Feature map → `(1, classes)` logits.
    fn head(&self, features: &Tensor) -> Result<Tensor>;
}

/// Small densely connected convolutional classifier with seeded weights,
/// the built-in network for the `classifier-grad` backend.
pub struct TinyDenseClassifier {
    blocks: Vec<(Tensor, Tensor)>,
    mix: (Tensor, Tensor),
    fc: (Tensor, Tensor),
}

impl TinyDenseClassifier {
    pub fn new(seed: u64, growth: usize, blocks: usize, classes: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dev = Device::Cpu;
        let mut uniform = |shape: &[usize], fan_in: usize| -> Result<Tensor> {
            let bound = 1.0 / (fan_in as f32).sqrt();
            let n = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            Ok(Tensor::from_vec(data, shape, &dev)?)
        };
        let mut convs = Vec::with_capacity(blocks);
        for i in 0..blocks {
            let cin = 1 + i * growth;
            convs.push((
                uniform(&[growth, cin, 3, 3], cin * 9)?,
                uniform(&[growth], cin * 9)?,
            ));
        }
        let feat = 1 + blocks * growth;
        let mix = (uniform(&[feat, feat, 1, 1], feat)?, uniform(&[feat], feat)?);
        let fc = (uniform(&[classes, feat], feat)?, uniform(&[classes], feat)?);
        Ok(Self {
            blocks: convs,
            mix,
            fc,
        })
    }
}

impl Default for TinyDenseClassifier {
    fn default() -> Self {
        Self::new(0x5eed, 8, 3, 10).expect("static shapes")
    }
}

impl Classifier for TinyDenseClassifier {
    fn features(&self, x: &Tensor) -> Result<Tensor> {
        let x = x.to_dtype(DType::F32)?;
        let mut stack = vec![x];
        for (w, b) in &self.blocks {
            let inp = Tensor::cat(&stack, 1)?;
            stack.push(leaky_relu(&conv2d_same(&inp, w, b)?)?);
        }
        Ok(Tensor::cat(&stack, 1)?)
    }

    fn head(&self, features: &Tensor) -> Result<Tensor> {
        let h = leaky_relu(&conv2d_same(features, &self.mix.0, &self.mix.1)?)?;
        let pooled = h.mean(D::Minus1)?.mean(D::Minus1)?;
        Ok(pooled.matmul(&self.fc.0.t()?)?.broadcast_add(&self.fc.1)?)
    }
}

/// A registered saliency scorer.
pub enum Saliency {
    SpatialGrad,
    ClassifierGrad(Box<dyn Classifier + Send + Sync>),
}

impl Saliency {
    /// The backend named `kind`, with the built-in classifier where needed.
    pub fn from_kind(kind: SaliencyKind) -> Self {
        match kind {
            SaliencyKind::SpatialGrad => Saliency::SpatialGrad,
            SaliencyKind::ClassifierGrad => {
                Saliency::ClassifierGrad(Box::new(TinyDenseClassifier::default()))
            }
        }
    }

    pub fn kind(&self) -> SaliencyKind {
        match self {
            Saliency::SpatialGrad => SaliencyKind::SpatialGrad,
            Saliency::ClassifierGrad(_) => SaliencyKind::ClassifierGrad,
        }
    }
}

impl fmt::Debug for Saliency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Saliency({})", self.kind())
    }
}

/// 3×3 Laplacian-of-Gaussian (σ = 0.8), shifted to zero sum.
pub fn log_kernel() -> [[f64; 3]; 3] {
    let s2 = 0.8f64 * 0.8;
    let mut k = [[0f64; 3]; 3];
    let mut sum = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let r2 = ((i as f64 - 1.0).powi(2) + (j as f64 - 1.0).powi(2)) / (2.0 * s2);
            *v = -(1.0 - r2) * (-r2).exp();
            sum += *v;
        }
    }
    for row in k.iter_mut() {
        for v in row.iter_mut() {
            *v -= sum / 9.0;
        }
    }
    k
}

fn spatial_grad(img: &Image) -> f64 {
    let luma = img.luma();
    let (h, w) = luma.dims();
    if h < 4 || w < 4 {
        return 0.0;
    }
    let k = log_kernel();
    let (rh, rw) = (h - 2, w - 2);
    let mut resp = vec![0f64; rh * rw];
    for y in 0..rh {
        for x in 0..rw {
            let mut acc = 0.0;
            for (dy, row) in k.iter().enumerate() {
                for (dx, kv) in row.iter().enumerate() {
                    acc += kv * luma.get(y + dy, x + dx, 0) as f64;
                }
            }
            resp[y * rw + x] = acc;
        }
    }
    let mut total = 0.0;
    for y in 0..rh {
        for x in 0..rw {
            let v = resp[y * rw + x];
            if x + 1 < rw {
                total += (resp[y * rw + x + 1] - v).abs();
            }
            if y + 1 < rh {
                total += (resp[(y + 1) * rw + x] - v).abs();
            }
        }
    }
    total
}

fn classifier_grad(net: &dyn Classifier, img: &Image) -> Result<f64> {
    let x = img.luma().to_tensor(DType::F32, &Device::Cpu)?;
    let feats = Var::from_tensor(&net.features(&x)?.detach())?;
    let logits = net.head(feats.as_tensor())?.flatten_all()?;
    let values: Vec<f32> = logits.to_vec1()?;
    let top = values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::InvalidArgument("classifier produced no logits".into()))?;
    let grads = logits.get(top)?.backward()?;
    let g = grads.get(feats.as_tensor()).ok_or_else(|| {
        Error::InvalidArgument("top logit does not depend on the feature map".into())
    })?;
    Ok(g.abs()?
        .sum_all()?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?)
}

/// Saliency score `GradF(img)` under the chosen backend.
pub fn gradf(scorer: &Saliency, img: &Image) -> Result<f64> {
    match scorer {
        Saliency::SpatialGrad => Ok(spatial_grad(img)),
        Saliency::ClassifierGrad(net) => classifier_grad(net.as_ref(), img),
    }
}
