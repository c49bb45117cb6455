//! Windowed multi-head attention on channels-last feature maps.
//!
//! Shifted layers roll the map by half a window and mask every pair of
//! positions that came from different regions before the roll, so no
//! attention weight crosses the image border through the wrap-around.

use candle_core::{DType, Device, Result, Tensor};

use super::ops::softmax_last_dim;

/// Logit offset for masked pairs; its exponential underflows to exactly zero.
pub const MASKED_LOGIT: f64 = -1e9;

/// `(B, H, W, C)` → `(B·nW, window², C)`, windows in row-major order.
pub fn window_partition(x: &Tensor, window: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    x.reshape(vec![b, h / window, window, w / window, window, c])?
        .permute(vec![0, 1, 3, 2, 4, 5])?
        .contiguous()?
        .reshape((b * (h / window) * (w / window), window * window, c))
}

/// Inverse of [`window_partition`].
pub fn window_reverse(
    windows: &Tensor,
    window: usize,
    b: usize,
    h: usize,
    w: usize,
) -> Result<Tensor> {
    let c = windows.dim(2)?;
    windows
        .reshape(vec![b, h / window, w / window, window, window, c])?
        .permute(vec![0, 1, 3, 2, 4, 5])?
        .contiguous()?
        .reshape((b, h, w, c))
}

/// Additive attention mask `(nW, window², window²)` for a map rolled by
/// `-shift` along both spatial axes. Entries are 0 or [`MASKED_LOGIT`].
pub fn shift_mask(
    h: usize,
    w: usize,
    window: usize,
    shift: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let region = |i: usize, n: usize| -> usize {
        if i < n - window {
            0
        } else if i < n - shift {
            1
        } else {
            2
        }
    };
    let (nh, nw) = (h / window, w / window);
    let n = window * window;
    let mut data = vec![0f64; nh * nw * n * n];
    for wy in 0..nh {
        for wx in 0..nw {
            let labels: Vec<usize> = (0..n)
                .map(|p| {
                    let y = wy * window + p / window;
                    let x = wx * window + p % window;
                    region(y, h) * 3 + region(x, w)
                })
                .collect();
            let base = (wy * nw + wx) * n * n;
            for i in 0..n {
                for j in 0..n {
                    if labels[i] != labels[j] {
                        data[base + i * n + j] = MASKED_LOGIT;
                    }
                }
            }
        }
    }
    Tensor::from_vec(data, (nh * nw, n, n), device)?.to_dtype(dtype)
}

/// Multi-head attention inside non-overlapping windows.
///
/// `q`, `k`, `v` are already projected, `(B, H, W, C)` with `H` and `W`
/// multiples of `window`. With `shift`, windows are displaced by
/// `window / 2` and the boundary mask is applied.
pub fn windowed_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    window: usize,
    shift: bool,
) -> Result<Tensor> {
    let (b, h, w, c) = q.dims4()?;
    if h % window != 0 || w % window != 0 {
        candle_core::bail!("feature map {h}x{w} is not a multiple of window {window}");
    }
    let d = c / heads;
    let s = window / 2;
    let roll = |t: &Tensor, by: i32| -> Result<Tensor> { t.roll(by, 1)?.roll(by, 2) };
    let (q, k, v) = if shift {
        (
            roll(q, -(s as i32))?,
            roll(k, -(s as i32))?,
            roll(v, -(s as i32))?,
        )
    } else {
        (q.clone(), k.clone(), v.clone())
    };
    let n = window * window;
    let n_win = (h / window) * (w / window);
    let split_heads = |t: &Tensor| -> Result<Tensor> {
        window_partition(t, window)?
            .reshape((b * n_win, n, heads, d))?
            .transpose(1, 2)?
            .contiguous()
    };
    let (qh, kh, vh) = (split_heads(&q)?, split_heads(&k)?, split_heads(&v)?);
    let mut logits = (qh.matmul(&kh.t()?)? * (1.0 / (d as f64).sqrt()))?;
    if shift {
        let mask = shift_mask(h, w, window, s, logits.dtype(), logits.device())?;
        logits = logits
            .reshape((b, n_win, heads, n, n))?
            .broadcast_add(&mask.unsqueeze(1)?.unsqueeze(0)?)?
            .reshape((b * n_win, heads, n, n))?;
    }
    let attn = softmax_last_dim(&logits)?;
    let out = attn
        .matmul(&vh)?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b * n_win, n, c))?;
    let out = window_reverse(&out, window, b, h, w)?;
    if shift {
        roll(&out, s as i32)
    } else {
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(b: usize, h: usize, w: usize, c: usize) -> Tensor {
        let n = b * h * w * c;
        Tensor::from_vec(
            (0..n)
                .map(|i| ((i * 37) % 101) as f32 / 101.0)
                .collect::<Vec<_>>(),
            (b, h, w, c),
            &Device::Cpu,
        )
        .unwrap()
    }

    #[test]
    fn partition_roundtrip() {
        let x = ramp(2, 16, 8, 3);
        let p = window_partition(&x, 4).unwrap();
        assert_eq!(p.dims(), &[16, 16, 3]);
        let back = window_reverse(&p, 4, 2, 16, 8).unwrap();
        let d = (back - &x)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(d, 0.0);
        // second window of the first row holds columns 4..8 of rows 0..4
        let row: Vec<f32> = p.get(1).unwrap().get(0).unwrap().to_vec1().unwrap();
        let want: Vec<f32> = x
            .get(0)
            .unwrap()
            .get(0)
            .unwrap()
            .get(4)
            .unwrap()
            .to_vec1()
            .unwrap();
        assert_eq!(row, want);
    }

    #[test]
    fn uniform_logits_average_values() {
        let (b, h, w, c) = (1, 8, 8, 4);
        let q = Tensor::zeros((b, h, w, c), DType::F32, &Device::Cpu).unwrap();
        let k = ramp(b, h, w, c);
        let v = (ramp(b, h, w, c) * 3.0).unwrap();
        let out = windowed_attention(&q, &k, &v, 2, 8, false).unwrap();
        let mean = v.mean_keepdim(1).unwrap().mean_keepdim(2).unwrap();
        let want = mean.broadcast_as((b, h, w, c)).unwrap();
        let d = (out - want)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(d < 1e-5, "max diff {d}");
    }

    #[test]
    fn shift_mask_blocks_wrapped_pairs() {
        let m = shift_mask(8, 8, 4, 2, DType::F32, &Device::Cpu).unwrap();
        let m: Vec<Vec<Vec<f32>>> = m.to_vec3().unwrap();
        // top-left window contains only interior pixels: nothing masked
        assert!(m[0].iter().flatten().all(|v| *v == 0.0));
        // bottom-right window mixes four regions after the roll
        let masked = m[3].iter().flatten().filter(|v| **v != 0.0).count();
        assert_eq!(masked, 16 * 16 - 4 * 16);
    }

    #[test]
    fn shifted_attention_never_crosses_the_border() {
        // with the rolled layout, the last column's pixels only ever attend to
        // positions from the same pre-roll region
        let (b, h, w, c) = (1, 8, 8, 2);
        let q = ramp(b, h, w, c);
        let k = ramp(b, h, w, c);
        let base = Tensor::zeros((b, h, w, c), DType::F32, &Device::Cpu).unwrap();
        let out0 = windowed_attention(&q, &k, &base, 1, 4, true).unwrap();
        // perturb values in the top-left corner, which lives in a different
        // region from the bottom-right corner after the roll
        let mut bump = vec![0f32; b * h * w * c];
        bump[0] = 1.0;
        let bumped = Tensor::from_vec(bump, (b, h, w, c), &Device::Cpu).unwrap();
        let out1 = windowed_attention(&q, &k, &bumped, 1, 4, true).unwrap();
        let corner = |t: &Tensor| {
            t.get(0)
                .unwrap()
                .get(7)
                .unwrap()
                .get(7)
                .unwrap()
                .to_vec1::<f32>()
                .unwrap()
        };
        assert_eq!(corner(&out0), corner(&out1));
    }
}
