//! Training objectives.
//!
//! Each loss comes in two forms: a differentiable tensor form over
//! `(N, 1, H, W)` batches used by the trainer, and an [`Image`] form that
//! evaluates the same graph in f64 and returns a [`LossValue`].

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Result as TResult, Tensor};

use crate::error::{Error, Result};
use crate::imageio::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Stabilizer added to the softmax temperature.
pub const TEMPERATURE_EPS: f64 = 1e-8;

/// A scalar loss with its named components.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub scalar: f64,
    /// Summands of `scalar`, in summation order.
    pub parts: Vec<(String, f64)>,
    /// Mixing weights used by the multi-modal private loss.
    pub weights: Option<MixWeights>,
}

impl LossValue {
    /// Builds a value whose scalar is the in-order sum of `parts`.
    pub fn from_parts(parts: Vec<(String, f64)>) -> Self {
        let scalar = parts.iter().fold(0.0, |acc, (_, v)| acc + v);
        Self {
            scalar,
            parts,
            weights: None,
        }
    }

    pub fn part(&self, name: &str) -> Option<f64> {
        self.parts.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    /// Re-adds the parts in order; equals `scalar` bit-for-bit for values
    /// built by [`LossValue::from_parts`].
    pub fn resum(&self) -> f64 {
        self.parts.iter().fold(0.0, |acc, (_, v)| acc + v)
    }
}

/// Softmax mixing proportions of the infrared and visible targets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixWeights {
    pub w_ir: f64,
    pub w_vis: f64,
}

/// How saliency scores are scaled before the softmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Temperature {
    /// Divide both scores by their mean (plus a small epsilon).
    #[default]
    MeanNormalized,
    /// Softmax of the raw scores.
    Raw,
}

impl fmt::Display for Temperature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Temperature::MeanNormalized => "mean-normalized",
            Temperature::Raw => "raw",
        })
    }
}

impl FromStr for Temperature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean-normalized" => Ok(Temperature::MeanNormalized),
            "raw" => Ok(Temperature::Raw),
            other => Err(Error::InvalidArgument(format!(
                "unknown temperature `{other}` (mean-normalized, raw)"
            ))),
        }
    }
}

/// `softmax(g_ir/τ, g_vis/τ)`.
pub fn mixing_weights(g_ir: f64, g_vis: f64, temperature: Temperature) -> MixWeights {
    let tau = match temperature {
        Temperature::MeanNormalized => (g_ir + g_vis) / 2.0 + TEMPERATURE_EPS,
        Temperature::Raw => 1.0,
    };
    let (a, b) = (g_ir / tau, g_vis / tau);
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    let w_ir = ea / (ea + eb);
    MixWeights {
        w_ir,
        w_vis: 1.0 - w_ir,
    }
}

fn gaussian_window(dtype: DType, device: &Device) -> TResult<Tensor> {
    let r = (SSIM_WINDOW / 2) as i64;
    let g: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g {
        for b in &g {
            w.push(a * b / (s * s));
        }
    }
    Tensor::from_vec(w, (1, 1, SSIM_WINDOW, SSIM_WINDOW), device)?.to_dtype(dtype)
}

/// Mean single-scale SSIM over valid window positions, `(N, 1, H, W)` inputs.
pub fn ssim_t(x: &Tensor, y: &Tensor) -> TResult<Tensor> {
    let win = gaussian_window(x.dtype(), x.device())?;
    let filt = |t: &Tensor| t.conv2d(&win, 0, 1, 1, 1);
    let mu_x = filt(x)?;
    let mu_y = filt(y)?;
    let mu_xx = mu_x.sqr()?;
    let mu_yy = mu_y.sqr()?;
    let mu_xy = (&mu_x * &mu_y)?;
    let s_xx = (filt(&x.sqr()?)? - &mu_xx)?;
    let s_yy = (filt(&y.sqr()?)? - &mu_yy)?;
    let s_xy = (filt(&(x * y)?)? - &mu_xy)?;
    let num = (((mu_xy * 2.0)? + SSIM_C1)? * ((s_xy * 2.0)? + SSIM_C2)?)?;
    let den = (((mu_xx + mu_yy)? + SSIM_C1)? * ((s_xx + s_yy)? + SSIM_C2)?)?;
    (num / den)?.mean_all()
}

pub fn loss_ssim_t(x: &Tensor, y: &Tensor) -> TResult<Tensor> {
    ssim_t(x, y)?.affine(-1.0, 1.0)
}

pub fn loss_mse_t(x: &Tensor, y: &Tensor) -> TResult<Tensor> {
    (x - y)?.sqr()?.mean_all()
}

/// Per-sample mean squared error, shape `(N,)`.
pub fn mse_per_sample_t(x: &Tensor, y: &Tensor) -> TResult<Tensor> {
    (x - y)?.sqr()?.flatten_from(1)?.mean(1)
}

/// Weighted multi-modal fusion loss averaged over the batch; `weights[i]`
/// belongs to sample `i`.
pub fn mm_private_t(
    fused: &Tensor,
    ir: &Tensor,
    vis: &Tensor,
    weights: &[MixWeights],
) -> TResult<(Tensor, Tensor)> {
    let device = fused.device();
    let dtype = fused.dtype();
    let w_ir = Tensor::from_vec(
        weights.iter().map(|w| w.w_ir).collect::<Vec<_>>(),
        weights.len(),
        device,
    )?
    .to_dtype(dtype)?;
    let w_vis = Tensor::from_vec(
        weights.iter().map(|w| w.w_vis).collect::<Vec<_>>(),
        weights.len(),
        device,
    )?
    .to_dtype(dtype)?;
    let ir_term = (mse_per_sample_t(fused, ir)? * w_ir)?.mean_all()?;
    let vis_term = (mse_per_sample_t(fused, vis)? * w_vis)?.mean_all()?;
    Ok((ir_term, vis_term))
}

fn check_pair(x: &Image, y: &Image) -> Result<()> {
    if x.channels() != 1 || y.channels() != 1 {
        return Err(Error::Channels {
            expected: 1,
            got: x.channels().max(y.channels()),
        });
    }
    if x.dims() != y.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x.dims(), y.dims())));
    }
    Ok(())
}

fn t64(img: &Image) -> Result<Tensor> {
    img.to_tensor(DType::F64, &Device::Cpu)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    check_pair(x, y)?;
    let (h, w) = x.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    scalar(&ssim_t(&t64(x)?, &t64(y)?)?)
}

/// `1 − SSIM(x, y)`.
pub fn loss_ssim(x: &Image, y: &Image) -> Result<f64> {
    Ok(1.0 - ssim(x, y)?)
}

pub fn loss_mse(x: &Image, y: &Image) -> Result<f64> {
    if x.dims() != y.dims() || x.channels() != y.channels() {
        return Err(Error::Shape(format!(
            "{:?}x{} vs {:?}x{}",
            x.dims(),
            x.channels(),
            y.dims(),
            y.channels()
        )));
    }
    let n = x.data().len() as f64;
    Ok(x.data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
        .sum::<f64>()
        / n)
}

/// Reconstruction consistency: `L_ssim + L_mse` against the visible luma.
pub fn public_loss(rec: &Image, vis_luma: &Image) -> Result<LossValue> {
    Ok(LossValue::from_parts(vec![
        ("ssim".into(), loss_ssim(rec, vis_luma)?),
        ("mse".into(), loss_mse(rec, vis_luma)?),
    ]))
}

/// `w_ir·L_mse(f, ir) + w_vis·L_mse(f, vis)`.
pub fn mm_private_loss(
    fused: &Image,
    ir: &Image,
    vis_luma: &Image,
    w: MixWeights,
) -> Result<LossValue> {
    let mut v = LossValue::from_parts(vec![
        ("ir".into(), w.w_ir * loss_mse(fused, ir)?),
        ("vis".into(), w.w_vis * loss_mse(fused, vis_luma)?),
    ]);
    v.weights = Some(w);
    Ok(v)
}

/// Supervised multi-focus loss against the sharp ground truth.
pub fn dp_private_loss(fused: &Image, gt_luma: &Image) -> Result<LossValue> {
    Ok(LossValue::from_parts(vec![(
        "mse".into(),
        loss_mse(fused, gt_luma)?,
    )]))
}

/// `pub + pri`, parts concatenated with `pub.` / `pri.` prefixes.
pub fn total_loss(public: &LossValue, private: &LossValue) -> LossValue {
    let parts = public
        .parts
        .iter()
        .map(|(n, v)| (format!("pub.{n}"), *v))
        .chain(private.parts.iter().map(|(n, v)| (format!("pri.{n}"), *v)))
        .collect();
    LossValue {
        scalar: public.scalar + private.scalar,
        parts,
        weights: private.weights,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> Image {
        Image::from_fn(h, w, f)
    }

    #[test]
    fn ssim_identity_and_constants() {
        let x = img(16, 16, |y, x| ((y * 5 + x * 3) % 11) as f32 / 10.0);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let a = img(12, 12, |_, _| 0.3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        // zero variance: (2ab + C1)·C2 / ((a² + b² + C1)·C2)
        let b = img(12, 12, |_, _| 0.7);
        let want = (2.0 * 0.3 * 0.7 + SSIM_C1) / (0.09 + 0.49 + SSIM_C1);
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-6);
    }

    #[test]
    fn ssim_errors() {
        let small = img(10, 12, |_, _| 0.0);
        assert!(ssim(&small, &small).is_err());
        assert!(ssim(&img(12, 12, |_, _| 0.0), &img(12, 13, |_, _| 0.0)).is_err());
        let rgb = Image::filled(12, 12, 3, 0.0);
        assert!(matches!(ssim(&rgb, &rgb), Err(Error::Channels { .. })));
    }

    #[test]
    fn loss_ssim_symmetric() {
        let x = img(14, 14, |y, x| ((y * 7 + x) % 5) as f32 / 4.0);
        let y = img(14, 14, |y, x| ((y + x * 3) % 7) as f32 / 6.0);
        assert_eq!(loss_ssim(&x, &x).unwrap(), 0.0);
        assert!((loss_ssim(&x, &y).unwrap() - loss_ssim(&y, &x).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn mse_cases() {
        let z = Image::filled(2, 2, 1, 0.0);
        let x = Image::from_vec(2, 2, 1, vec![0.0, 0.5, 1.0, 0.0]).unwrap();
        assert_eq!(loss_mse(&x, &z).unwrap(), 0.3125);
        assert_eq!(loss_mse(&z, &Image::filled(2, 2, 1, 1.0)).unwrap(), 1.0);
        assert_eq!(loss_mse(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn mixing_weight_cases() {
        let w = mixing_weights(3.0, 3.0, Temperature::MeanNormalized);
        assert_eq!((w.w_ir, w.w_vis), (0.5, 0.5));
        let w = mixing_weights(2.0, 1.0, Temperature::MeanNormalized);
        // softmax(4/3, 2/3) by hand
        let e = (2.0f64 / 3.0).exp();
        assert!((w.w_ir - e / (e + 1.0)).abs() < 1e-7);
        assert!((w.w_ir - 0.660_756).abs() < 1e-6 && (w.w_vis - 0.339_244).abs() < 1e-6);
        let w = mixing_weights(1e6, 1.0, Temperature::Raw);
        assert!(w.w_ir > 0.999_999 && w.w_ir <= 1.0);
        let w = mixing_weights(0.0, 0.0, Temperature::MeanNormalized);
        assert_eq!(w.w_ir, 0.5);
    }

    #[test]
    fn total_is_additive() {
        let a = LossValue::from_parts(vec![("ssim".into(), 0.15), ("mse".into(), 0.05)]);
        let b = LossValue::from_parts(vec![("mse".into(), 0.3)]);
        let t = total_loss(&a, &b);
        assert_eq!(t.scalar, a.scalar + b.scalar);
        assert!((t.scalar - 0.5).abs() < 1e-12);
        assert_eq!(t.part("pri.mse"), Some(0.3));
        let zero = LossValue::from_parts(vec![]);
        assert_eq!(total_loss(&zero, &zero).scalar, 0.0);
    }
}
