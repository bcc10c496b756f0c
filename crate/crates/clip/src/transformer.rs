use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{layer_norm, linear, LayerNorm, LayerNormConfig, Linear, VarBuilder};

use crate::config::TowerConfig;

pub(crate) type CResult<T> = candle_core::Result<T>;

struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    fn new(vb: VarBuilder, cfg: &TowerConfig) -> CResult<Self> {
        let d = cfg.hidden_size;
        Ok(Self {
            q: linear(d, d, vb.pp("q_proj"))?,
            k: linear(d, d, vb.pp("k_proj"))?,
            v: linear(d, d, vb.pp("v_proj"))?,
            out: linear(d, d, vb.pp("out_proj"))?,
            heads: cfg.num_attention_heads,
        })
    }

    fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> CResult<Tensor> {
        let (b, n, d) = x.dims3()?;
        let hd = d / self.heads;
        let split = |t: Tensor| {
            t.reshape((b, n, self.heads, hd))?
                .transpose(1, 2)?
                .contiguous()
        };
        let q = split((self.q.forward(x)? * (hd as f64).powf(-0.5))?)?;
        let k = split(self.k.forward(x)?)?;
        let v = split(self.v.forward(x)?)?;
        let mut scores = q.matmul(&k.t()?)?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(m)?;
        }
        let probs = candle_nn::ops::softmax_last_dim(&scores)?;
        let y = probs.matmul(&v)?.transpose(1, 2)?.reshape((b, n, d))?;
        self.out.forward(&y)
    }
}

#[derive(Clone, Copy)]
enum Act {
    QuickGelu,
    Gelu,
}

impl Act {
    fn forward(self, x: &Tensor) -> CResult<Tensor> {
        match self {
            Act::QuickGelu => x * candle_nn::ops::sigmoid(&(x * 1.702)?)?,
            Act::Gelu => x.gelu_erf(),
        }
    }
}

struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    act: Act,
}

impl Block {
    fn new(vb: VarBuilder, cfg: &TowerConfig) -> CResult<Self> {
        let ln = LayerNormConfig {
            eps: cfg.layer_norm_eps,
            ..Default::default()
        };
        let act = match cfg.hidden_act.as_str() {
            "quick_gelu" => Act::QuickGelu,
            "gelu" => Act::Gelu,
            other => {
                return Err(candle_core::Error::Msg(format!(
                    "unsupported activation {other}"
                )))
            }
        };
        Ok(Self {
            ln1: layer_norm(cfg.hidden_size, ln, vb.pp("layer_norm1"))?,
            attn: Attention::new(vb.pp("self_attn"), cfg)?,
            ln2: layer_norm(cfg.hidden_size, ln, vb.pp("layer_norm2"))?,
            fc1: linear(cfg.hidden_size, cfg.intermediate_size, vb.pp("mlp.fc1"))?,
            fc2: linear(cfg.intermediate_size, cfg.hidden_size, vb.pp("mlp.fc2"))?,
            act,
        })
    }

    fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> CResult<Tensor> {
        let x = (x + self.attn.forward(&self.ln1.forward(x)?, mask)?)?;
        let h = self.fc2.forward(
            &self
                .act
                .forward(&self.fc1.forward(&self.ln2.forward(&x)?)?)?,
        )?;
        x + h
    }
}

/// Pre-norm encoder stack (`encoder.layers.{i}`).
pub(crate) struct Encoder {
    blocks: Vec<Block>,
}

impl Encoder {
    pub(crate) fn new(vb: VarBuilder, cfg: &TowerConfig) -> CResult<Self> {
        let blocks = (0..cfg.num_hidden_layers)
            .map(|i| Block::new(vb.pp(format!("encoder.layers.{i}")), cfg))
            .collect::<CResult<_>>()?;
        Ok(Self { blocks })
    }

    /// Runs the first `max(taps)` blocks and returns the residual stream after
    /// each listed (1-based) block.
    pub(crate) fn forward_taps(
        &self,
        x: &Tensor,
        mask: Option<&Tensor>,
        taps: &[usize],
    ) -> CResult<Vec<Tensor>> {
        let last = taps.iter().copied().max().unwrap_or(0);
        let mut out = Vec::with_capacity(taps.len());
        let mut h = x.clone();
        for (i, block) in self.blocks.iter().take(last).enumerate() {
            h = block.forward(&h, mask)?;
            if taps.contains(&(i + 1)) {
                out.push(h.clone());
            }
        }
        Ok(out)
    }

    pub(crate) fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> CResult<Tensor> {
        let mut h = x.clone();
        for block in &self.blocks {
            h = block.forward(&h, mask)?;
        }
        Ok(h)
    }
}

/// Additive mask that hides later positions.
pub(crate) fn causal_mask(n: usize, device: &Device) -> CResult<Tensor> {
    let data: Vec<f32> = (0..n)
        .flat_map(|i| (0..n).map(move |j| if j > i { f32::NEG_INFINITY } else { 0.0 }))
        .collect();
    Tensor::from_vec(data, (1, 1, n, n), device)?.to_dtype(DType::F32)
}
