use candle_core::{Result as TResult, Tensor};

use super::attention::windowed_attention;
use super::ops::{
    conv2d_same, layer_norm, leaky_relu, linear, sigmoid, to_channels_first, to_channels_last,
};
use super::params::lambda_name;
use super::{ArchConfig, Branch, ParamView, ENCODER_INPUT_CHANNELS};
use crate::error::{Error, Result};

/// Outputs of one forward pass over an image pair.
#[derive(Debug)]
pub struct PairOutputs {
    /// Fused luma `(N, 1, H, W)` from the global decoder.
    pub fused: Tensor,
    /// Reconstruction of the first input `(N, 1, H, W)`; absent when not requested.
    pub reconstruction: Option<Tensor>,
}

/// Forward passes over a parameter view. Tensors are `(N, C, H, W)` unless a
/// function says channels-last.
#[derive(Clone, Copy)]
pub struct Gifnet<'a> {
    view: ParamView<'a>,
    interaction: bool,
}

impl<'a> Gifnet<'a> {
    pub fn new(view: ParamView<'a>) -> Self {
        Self {
            view,
            interaction: true,
        }
    }

    /// With `false`, cross layers skip the auxiliary read entirely, which
    /// equals running with every λ at 0 without computing the other branch.
    pub fn with_interaction(mut self, on: bool) -> Self {
        self.interaction = on;
        self
    }

    pub fn config(&self) -> &'a ArchConfig {
        self.view.config()
    }

    fn p(&self, name: &str) -> TResult<Tensor> {
        self.view
            .get(name)
            .map_err(|e| candle_core::Error::Msg(e.to_string()))
    }

    fn conv(&self, x: &Tensor, prefix: &str) -> TResult<Tensor> {
        conv2d_same(
            x,
            &self.p(&format!("{prefix}.weight"))?,
            &self.p(&format!("{prefix}.bias"))?,
        )
    }

    fn linear(&self, x: &Tensor, prefix: &str) -> TResult<Tensor> {
        linear(
            x,
            &self.p(&format!("{prefix}.weight"))?,
            &self.p(&format!("{prefix}.bias"))?,
        )
    }

    fn norm(&self, x: &Tensor, prefix: &str) -> TResult<Tensor> {
        layer_norm(
            x,
            &self.p(&format!("{prefix}.weight"))?,
            &self.p(&format!("{prefix}.bias"))?,
        )
    }

    /// Outputs of every dense encoder block. Block `i` sees the input image
    /// concatenated with all earlier block outputs. `ablate` zeroes one block's
    /// stored activation before later blocks read it.
    pub fn sencoder_blocks(&self, img: &Tensor, ablate: Option<usize>) -> Result<Vec<Tensor>> {
        let (_, c, _, _) = img.dims4()?;
        let input = match c {
            1 => img.repeat((1, ENCODER_INPUT_CHANNELS, 1, 1))?,
            ENCODER_INPUT_CHANNELS => img.clone(),
            other => {
                return Err(Error::Channels {
                    expected: ENCODER_INPUT_CHANNELS,
                    got: other,
                })
            }
        };
        let mut stack = vec![input];
        let mut outs = Vec::with_capacity(self.config().enc_layers);
        for i in 0..self.config().enc_layers {
            let x = Tensor::cat(&stack, 1)?;
            let mut y = leaky_relu(&self.conv(&x, &format!("senc.block{i}"))?)?;
            if ablate == Some(i) {
                y = y.zeros_like()?;
            }
            stack.push(y.clone());
            outs.push(y);
        }
        Ok(outs)
    }

    /// Shared features, `base_channels · enc_layers` channels.
    pub fn sencoder(&self, img: &Tensor) -> Result<Tensor> {
        Ok(Tensor::cat(&self.sencoder_blocks(img, None)?, 1)?)
    }

    /// Reconstruction decoder: shared features → `[0, 1]` luma.
    pub fn rec(&self, shared: &Tensor) -> Result<Tensor> {
        let h = leaky_relu(&self.conv(shared, "rec.conv1")?)?;
        Ok(sigmoid(&self.conv(&h, "rec.conv2")?)?)
    }

    /// Global decoder: branch features (channels-first) → `[0, 1]` luma.
    pub fn gdec(&self, fused: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = fused.dims4()?;
        if c != self.config().embed_dim {
            return Err(Error::Shape(format!(
                "decoder expects {} channels, got {c}",
                self.config().embed_dim
            )));
        }
        let h = leaky_relu(&self.conv(fused, "gdec.conv1")?)?;
        Ok(sigmoid(&self.conv(&h, "gdec.conv2")?)?)
    }

    /// Projects concatenated pair features into a branch's channels-last stream.
    pub fn embed(&self, branch: Branch, pair_features: &Tensor) -> Result<Tensor> {
        let y = self.conv(pair_features, &format!("{}.embed", branch.prefix()))?;
        Ok(to_channels_last(&y)?)
    }

    /// Swin-style block: windowed self-attention and MLP, both residual.
    /// Even layers use shifted windows.
    pub fn self_block(&self, branch: Branch, layer: usize, x: &Tensor) -> Result<Tensor> {
        let cfg = self.config();
        let p = format!("{}.layer{layer}", branch.prefix());
        let e = cfg.embed_dim;
        let h = self.norm(x, &format!("{p}.norm1"))?;
        let qkv = self.linear(&h, &format!("{p}.attn.qkv"))?;
        let q = qkv.narrow(3, 0, e)?;
        let k = qkv.narrow(3, e, e)?;
        let v = qkv.narrow(3, 2 * e, e)?;
        let shift = !ArchConfig::is_cross_layer(layer);
        let a = windowed_attention(&q, &k, &v, cfg.heads, cfg.window, shift)?;
        let x = (x + self.linear(&a, &format!("{p}.attn.out"))?)?;
        let h = self.norm(&x, &format!("{p}.norm2"))?;
        let h = self.linear(&h, &format!("{p}.mlp.fc1"))?.gelu()?;
        Ok((&x + self.linear(&h, &format!("{p}.mlp.fc2"))?)?)
    }

    /// Cross-attention with queries from `x_hat` and keys/values from `x_aux`,
    /// inside matching non-shifted windows.
    pub fn cross_attention(
        &self,
        branch: Branch,
        layer: usize,
        x_hat: &Tensor,
        x_aux: &Tensor,
    ) -> Result<Tensor> {
        let cfg = self.config();
        let p = format!("{}.layer{layer}.cross", branch.prefix());
        let e = cfg.embed_dim;
        let q = self.linear(
            &self.norm(x_hat, &format!("{p}.norm_q"))?,
            &format!("{p}.q"),
        )?;
        let kv = self.linear(
            &self.norm(x_aux, &format!("{p}.norm_kv"))?,
            &format!("{p}.kv"),
        )?;
        let k = kv.narrow(3, 0, e)?;
        let v = kv.narrow(3, e, e)?;
        let a = windowed_attention(&q, &k, &v, cfg.heads, cfg.window, false)?;
        Ok(self.linear(&a, &format!("{p}.out"))?)
    }

    /// One gated layer: `x̂ = SelfAtt(x_m)`, and on odd layers
    /// `x̂ + λ·CrossAtt(x̂, x_a)`. Even layers ignore `x_a`.
    pub fn cfgm_layer(
        &self,
        branch: Branch,
        x_m: &Tensor,
        x_a: &Tensor,
        layer: usize,
    ) -> Result<Tensor> {
        if x_m.dims() != x_a.dims() {
            return Err(Error::Shape(format!(
                "main {:?} vs auxiliary {:?}",
                x_m.dims(),
                x_a.dims()
            )));
        }
        if layer == 0 || layer > self.config().branch_layers {
            return Err(Error::InvalidArgument(format!(
                "layer {layer} outside 1..={}",
                self.config().branch_layers
            )));
        }
        let x_hat = self.self_block(branch, layer, x_m)?;
        if !self.interaction || !ArchConfig::is_cross_layer(layer) {
            return Ok(x_hat);
        }
        let lambda = self.p(&lambda_name(branch, layer))?;
        let cross = self.cross_attention(branch, layer, &x_hat, x_a)?;
        Ok((x_hat + cross.broadcast_mul(&lambda)?)?)
    }

    /// Runs `branch` on `main_input` alongside the other branch on `aux_input`
    /// (both concatenated pair features, channels-first) and returns the
    /// main branch's hybrid features, channels-last.
    pub fn branch_forward(
        &self,
        main_input: &Tensor,
        aux_input: &Tensor,
        branch: Branch,
    ) -> Result<Tensor> {
        if main_input.dims() != aux_input.dims() {
            return Err(Error::Shape(format!(
                "main {:?} vs auxiliary {:?}",
                main_input.dims(),
                aux_input.dims()
            )));
        }
        let layers = self.config().branch_layers;
        // the auxiliary stream is only read by cross layers
        let last_cross = if self.interaction {
            self.config().cross_layers().last().unwrap_or(0)
        } else {
            0
        };
        let mut main = self.embed(branch, main_input)?;
        let mut aux = if last_cross > 0 {
            self.embed(branch.other(), aux_input)?
        } else {
            main.clone()
        };
        for l in 1..=layers {
            let next_main = self.cfgm_layer(branch, &main, &aux, l)?;
            if l < last_cross {
                aux = self.cfgm_layer(branch.other(), &aux, &main, l)?;
            }
            main = next_main;
        }
        Ok(main)
    }

    /// Concatenated shared features of both inputs plus the first input's
    /// shared features alone.
    pub fn pair_features(&self, a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
        if a.dims() != b.dims() {
            return Err(Error::Shape(format!(
                "input a {:?} vs input b {:?}",
                a.dims(),
                b.dims()
            )));
        }
        let sa = self.sencoder(a)?;
        let sb = self.sencoder(b)?;
        let pair = Tensor::cat(&[&sa, &sb], 1)?;
        Ok((pair, sa))
    }

    /// Full pair forward with `main` routed to the global decoder.
    pub fn forward_pair(
        &self,
        a: &Tensor,
        b: &Tensor,
        main: Branch,
        with_reconstruction: bool,
    ) -> Result<PairOutputs> {
        let (_, _, h, w) = a.dims4()?;
        let window = self.config().window;
        if h % window != 0 || w % window != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not a multiple of window {window}"
            )));
        }
        let (pair, shared_a) = self.pair_features(a, b)?;
        let hybrid = self.branch_forward(&pair, &pair, main)?;
        let fused = self.gdec(&to_channels_first(&hybrid)?)?;
        let reconstruction = if with_reconstruction {
            Some(self.rec(&shared_a)?)
        } else {
            None
        };
        Ok(PairOutputs {
            fused,
            reconstruction,
        })
    }
}
