//! Central finite-difference checks of autodiff gradients.

use candle_core::{DType, Tensor, Var};

use crate::error::Result;

/// Outcome of one gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// `‖g_auto − g_fd‖ / max(‖g_auto‖, ‖g_fd‖)`; 0 when both vanish.
    pub relative_error: f64,
    pub autodiff_norm: f64,
    pub numeric_norm: f64,
}

/// Compares the autodiff gradient of the scalar `f(x)` at `x` (in `x`'s
/// dtype) with central differences of step `h` evaluated in `probe_dtype`.
pub fn check_gradient(
    x: &Tensor,
    h: f64,
    probe_dtype: DType,
    f: impl Fn(&Tensor) -> Result<Tensor>,
) -> Result<GradCheck> {
    let var = Var::from_tensor(&x.detach())?;
    let loss = f(var.as_tensor())?;
    let grads = loss.backward()?;
    let auto: Vec<f64> = match grads.get(var.as_tensor()) {
        Some(g) => g.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?,
        None => vec![0.0; x.elem_count()],
    };

    let base: Vec<f64> = x.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let eval = |v: &[f64]| -> Result<f64> {
        let t = Tensor::from_slice(v, x.dims(), x.device())?.to_dtype(probe_dtype)?;
        Ok(f(&t)?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    };
    let mut numeric = Vec::with_capacity(base.len());
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + h;
        let up = eval(&probe)?;
        probe[i] = base[i] - h;
        let down = eval(&probe)?;
        probe[i] = base[i];
        numeric.push((up - down) / (2.0 * h));
    }

    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let diff: Vec<f64> = auto.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    let (na, nn) = (norm(&auto), norm(&numeric));
    let scale = na.max(nn);
    Ok(GradCheck {
        relative_error: if scale == 0.0 {
            0.0
        } else {
            norm(&diff) / scale
        },
        autodiff_norm: na,
        numeric_norm: nn,
    })
}
