use ndarray::{Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use super::layers::{
    dropout_mask, relu_backward, relu_inplace, AttentionCache, Conv1d, Layer, LayerNorm,
    LayerNormCache, Linear, MultiHeadAttention, ParamVisitor, Scalar,
};
use super::ModelError;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    /// Convolutional front-end followed by self-attention.
    LocalGlobal,
    /// Convolutional front-end only; the attention block is bypassed.
    CnnOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Output channels per conv layer; the last entry must equal `d_model`.
    pub conv_channels: Vec<usize>,
    pub kernel_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub variant: EncoderVariant,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            conv_channels: vec![32, 64],
            kernel_size: 5,
            d_model: 64,
            n_heads: 4,
            dropout: 0.1,
            variant: EncoderVariant::LocalGlobal,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return bad(format!("conv_channels must be non-empty and positive: {:?}", self.conv_channels));
        }
        if self.conv_channels.last() != Some(&self.d_model) {
            return bad(format!(
                "last conv channel count {:?} must equal d_model {}",
                self.conv_channels.last(),
                self.d_model
            ));
        }
        if self.kernel_size.is_multiple_of(2) {
            return bad(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct AttentionBlock<S> {
    mha: MultiHeadAttention<S>,
    norm: LayerNorm<S>,
}

/// Conv encoder, optional self-attention block with residual + layer norm,
/// a mirrored conv decoder and a mean-pooled linear classifier.
#[derive(Clone, Debug)]
pub struct LocalGlobalNet<S> {
    pub config: EncoderConfig,
    pub n_features: usize,
    pub n_classes: usize,
    encoder: Vec<Conv1d<S>>,
    attention: Option<AttentionBlock<S>>,
    decoder: Vec<Conv1d<S>>,
    head: Linear<S>,
}

/// Outputs of a training-mode forward pass.
pub struct Forward<S> {
    pub logits: Array2<S>,
    /// Reconstruction of the first `n_decode` samples, `n_decode x T x F`.
    pub reconstruction: Option<Array3<S>>,
    cache: Cache<S>,
}

struct Cache<S> {
    len: usize,
    batch: usize,
    enc_cols: Vec<Array2<S>>,
    enc_out: Vec<Array2<S>>,
    attn: Option<AttnCache<S>>,
    z: Array2<S>,
    pooled: Array2<S>,
    pool_mask: Option<Array2<S>>,
    dec_cols: Vec<Array2<S>>,
    dec_out: Vec<Array2<S>>,
    n_decode: usize,
}

struct AttnCache<S> {
    mha: AttentionCache<S>,
    drop_mask: Option<Array2<S>>,
    norm: LayerNormCache<S>,
}

fn to_rows<S: Scalar>(x: &Array3<S>) -> Array2<S> {
    let (b, t, f) = x.dim();
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order((b * t, f))
        .expect("contiguous")
}

fn to_batch<S: Scalar>(x: Array2<S>, len: usize) -> Array3<S> {
    let (rows, c) = x.dim();
    x.into_shape_with_order((rows / len, len, c)).expect("contiguous")
}

impl<S: Scalar> LocalGlobalNet<S> {
    pub fn new(
        config: EncoderConfig,
        n_features: usize,
        n_classes: usize,
        rng: &mut Rng,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        if n_features == 0 || n_classes < 2 {
            return Err(ModelError::Config(format!(
                "need n_features >= 1 and n_classes >= 2, got {n_features}, {n_classes}"
            )));
        }
        let mut chain = vec![n_features];
        chain.extend(&config.conv_channels);
        let k = config.kernel_size;
        let encoder = chain
            .windows(2)
            .map(|w| Conv1d::new(w[0], w[1], k, rng))
            .collect();
        let attention = match config.variant {
            EncoderVariant::LocalGlobal => Some(AttentionBlock {
                mha: MultiHeadAttention::new(config.d_model, config.n_heads, rng),
                norm: LayerNorm::new(config.d_model),
            }),
            EncoderVariant::CnnOnly => None,
        };
        let decoder = chain
            .iter()
            .rev()
            .collect::<Vec<_>>()
            .windows(2)
            .map(|w| Conv1d::new(*w[0], *w[1], k, rng))
            .collect();
        let head = Linear::new(config.d_model, n_classes, rng);
        Ok(Self {
            config,
            n_features,
            n_classes,
            encoder,
            attention,
            decoder,
            head,
        })
    }

    fn check_input(&self, x: &Array3<S>) -> Result<(), ModelError> {
        let (b, t, f) = x.dim();
        if f != self.n_features || t == 0 || b == 0 {
            return Err(ModelError::Shape(format!(
                "expected batch x T x {} with positive sizes, got {:?}",
                self.n_features,
                x.dim()
            )));
        }
        Ok(())
    }

    fn check_embedding(&self, z: &Array3<S>) -> Result<(), ModelError> {
        let (b, t, d) = z.dim();
        if d != self.config.d_model || t == 0 || b == 0 {
            return Err(ModelError::Shape(format!(
                "expected batch x T x {} embedding, got {:?}",
                self.config.d_model,
                z.dim()
            )));
        }
        Ok(())
    }

    fn conv_stack(&self, mut x: Array2<S>, len: usize) -> Array2<S> {
        for conv in &self.encoder {
            x = conv.forward(&x, len).0;
            relu_inplace(&mut x);
        }
        x
    }

    /// Conv front-end: `batch x T x F -> batch x T x d_model`.
    pub fn conv_encode(&self, x: &Array3<S>) -> Result<Array3<S>, ModelError> {
        self.check_input(x)?;
        let len = x.dim().1;
        Ok(to_batch(self.conv_stack(to_rows(x), len), len))
    }

    /// Self-attention + residual + layer norm. Identity for the CNN-only
    /// variant.
    pub fn attention_encode(&self, h: &Array3<S>) -> Result<Array3<S>, ModelError> {
        self.check_embedding(h)?;
        let len = h.dim().1;
        let rows = to_rows(h);
        Ok(match &self.attention {
            Some(block) => {
                let (out, _) = block.mha.forward(&rows, len);
                to_batch(block.norm.forward(&(&rows + &out)).0, len)
            }
            None => to_batch(rows, len),
        })
    }

    /// Attention weights, `batch x heads x T x T`.
    pub fn attention_weights(&self, h: &Array3<S>) -> Result<Array4<S>, ModelError> {
        self.check_embedding(h)?;
        let block = self.attention.as_ref().ok_or_else(|| {
            ModelError::Config("cnn_only variant has no attention block".into())
        })?;
        let (b, len, _) = h.dim();
        let heads = self.config.n_heads;
        let (_, cache) = block.mha.forward(&to_rows(h), len);
        let mut w = Array4::zeros((b, heads, len, len));
        for (i, a) in cache.weights.iter().enumerate() {
            w.index_axis_mut(Axis(0), i / heads)
                .index_axis_mut(Axis(0), i % heads)
                .assign(a);
        }
        Ok(w)
    }

    /// Pre-residual output of the attention projection for each position.
    pub fn attention_output(&self, h: &Array3<S>) -> Result<Array3<S>, ModelError> {
        self.check_embedding(h)?;
        let block = self.attention.as_ref().ok_or_else(|| {
            ModelError::Config("cnn_only variant has no attention block".into())
        })?;
        let len = h.dim().1;
        Ok(to_batch(block.mha.forward(&to_rows(h), len).0, len))
    }

    /// Mirrored conv decoder: `batch x T x d_model -> batch x T x F`.
    pub fn decode(&self, z: &Array3<S>) -> Result<Array3<S>, ModelError> {
        self.check_embedding(z)?;
        let len = z.dim().1;
        let mut x = to_rows(z);
        let last = self.decoder.len() - 1;
        for (i, conv) in self.decoder.iter().enumerate() {
            x = conv.forward(&x, len).0;
            if i < last {
                relu_inplace(&mut x);
            }
        }
        Ok(to_batch(x, len))
    }

    /// Temporal mean pooling then an affine map to class logits.
    pub fn classify(&self, z: &Array3<S>) -> Result<Array2<S>, ModelError> {
        self.check_embedding(z)?;
        let pooled = z.mean_axis(Axis(1)).expect("T > 0");
        Ok(self.head.forward(&pooled))
    }

    pub fn encode(&self, x: &Array3<S>) -> Result<Array3<S>, ModelError> {
        self.attention_encode(&self.conv_encode(x)?)
    }

    /// Evaluation-mode logits (dropout off).
    pub fn predict_logits(&self, x: &Array3<S>) -> Result<Array2<S>, ModelError> {
        self.classify(&self.encode(x)?)
    }

    /// Training-mode forward pass retaining everything `backward` needs.
    /// Dropout is active only when `rng` is given. The decoder runs on the
    /// first `n_decode` samples of the batch.
    pub fn forward(
        &self,
        x: &Array3<S>,
        n_decode: usize,
        mut rng: Option<&mut Rng>,
    ) -> Result<Forward<S>, ModelError> {
        self.check_input(x)?;
        let (batch, len, _) = x.dim();
        if n_decode > batch {
            return Err(ModelError::Shape(format!(
                "n_decode {n_decode} exceeds batch {batch}"
            )));
        }
        let p = self.config.dropout;
        let mut enc_cols = Vec::new();
        let mut enc_out = Vec::new();
        let mut act = to_rows(x);
        for conv in &self.encoder {
            let (mut y, cols) = conv.forward(&act, len);
            relu_inplace(&mut y);
            enc_cols.push(cols);
            enc_out.push(y.clone());
            act = y;
        }
        let (z, attn) = match &self.attention {
            Some(block) => {
                let (mut out, mha) = block.mha.forward(&act, len);
                let drop_mask = dropout_mask(out.dim(), p, rng.as_deref_mut());
                if let Some(m) = &drop_mask {
                    out *= m;
                }
                out += &act;
                let (z, norm) = block.norm.forward(&out);
                (
                    z,
                    Some(AttnCache {
                        mha,
                        drop_mask,
                        norm,
                    }),
                )
            }
            None => (act, None),
        };
        let d = self.config.d_model;
        let pooled = z
            .view()
            .into_shape_with_order((batch, len, d))
            .unwrap()
            .mean_axis(Axis(1))
            .unwrap();
        let pool_mask = dropout_mask(pooled.dim(), p, rng);
        let head_in = match &pool_mask {
            Some(m) => &pooled * m,
            None => pooled.clone(),
        };
        let logits = self.head.forward(&head_in);

        let mut dec_cols = Vec::new();
        let mut dec_out = Vec::new();
        let reconstruction = if n_decode > 0 {
            let mut act = z.slice(ndarray::s![..n_decode * len, ..]).to_owned();
            let last = self.decoder.len() - 1;
            for (i, conv) in self.decoder.iter().enumerate() {
                let (mut y, cols) = conv.forward(&act, len);
                if i < last {
                    relu_inplace(&mut y);
                }
                dec_cols.push(cols);
                dec_out.push(y.clone());
                act = y;
            }
            Some(to_batch(act, len))
        } else {
            None
        };
        Ok(Forward {
            logits,
            reconstruction,
            cache: Cache {
                len,
                batch,
                enc_cols,
                enc_out,
                attn,
                z,
                pooled: head_in,
                pool_mask,
                dec_cols,
                dec_out,
                n_decode,
            },
        })
    }

    /// Accumulates parameter gradients given `dL/dlogits` and, when the
    /// forward pass decoded, `dL/dreconstruction`.
    pub fn backward(
        &mut self,
        fwd: &Forward<S>,
        d_logits: &Array2<S>,
        d_recon: Option<&Array3<S>>,
    ) -> Result<(), ModelError> {
        let c = &fwd.cache;
        let len = c.len;
        let d = self.config.d_model;
        if d_logits.dim() != (c.batch, self.n_classes) {
            return Err(ModelError::Shape(format!(
                "d_logits {:?} does not match ({}, {})",
                d_logits.dim(),
                c.batch,
                self.n_classes
            )));
        }
        let mut d_pooled = self.head.backward(&c.pooled, d_logits);
        if let Some(m) = &c.pool_mask {
            d_pooled *= m;
        }
        let inv_len = S::of(1.0 / len as f64);
        let mut dz = Array2::zeros((c.batch * len, d));
        for (b, dp) in d_pooled.rows().into_iter().enumerate() {
            for t in 0..len {
                dz.row_mut(b * len + t).scaled_add(inv_len, &dp);
            }
        }

        if let (Some(dr), true) = (d_recon, c.n_decode > 0) {
            if dr.dim() != (c.n_decode, len, self.n_features) {
                return Err(ModelError::Shape(format!(
                    "d_recon {:?} does not match ({}, {len}, {})",
                    dr.dim(),
                    c.n_decode,
                    self.n_features
                )));
            }
            let mut g = to_rows(dr);
            let last = self.decoder.len() - 1;
            for i in (0..self.decoder.len()).rev() {
                if i < last {
                    relu_backward(&c.dec_out[i], &mut g);
                }
                g = self.decoder[i].backward(&c.dec_cols[i], &g, len);
            }
            let mut head_rows = dz.slice_mut(ndarray::s![..c.n_decode * len, ..]);
            head_rows += &g;
        }

        let mut dh = match (&mut self.attention, &c.attn) {
            (Some(block), Some(ac)) => {
                let d_res = block.norm.backward(&ac.norm, &dz);
                let mut d_mha = d_res.clone();
                if let Some(m) = &ac.drop_mask {
                    d_mha *= m;
                }
                let h = c.enc_out.last().unwrap();
                let mut dh = block.mha.backward(h, &ac.mha, &d_mha, len);
                dh += &d_res;
                dh
            }
            _ => dz,
        };
        for i in (0..self.encoder.len()).rev() {
            relu_backward(&c.enc_out[i], &mut dh);
            dh = self.encoder[i].backward(&c.enc_cols[i], &dh, len);
        }
        Ok(())
    }

    pub fn visit_params(&mut self, f: &mut ParamVisitor<'_, S>) {
        for (i, conv) in self.encoder.iter_mut().enumerate() {
            conv.visit(&format!("encoder.{i}"), f);
        }
        if let Some(block) = &mut self.attention {
            block.mha.visit("attention", f);
            block.norm.visit("attention.norm", f);
        }
        for (i, conv) in self.decoder.iter_mut().enumerate() {
            conv.visit(&format!("decoder.{i}"), f);
        }
        self.head.visit("head", f);
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |_, _, g| g.iter_mut().for_each(|x| *x = S::zero()));
    }

    pub fn n_params(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, v, _| n += v.len());
        n
    }

    /// Zeroes every bias and layer-norm shift.
    pub fn zero_biases(&mut self) {
        self.visit_params(&mut |name, v, _| {
            if name.ends_with(".bias") || name.ends_with(".beta") {
                v.iter_mut().for_each(|x| *x = S::zero());
            }
        });
    }

    /// Embedding of a training-mode forward pass, `batch x T x d_model`.
    pub fn embedding(fwd: &Forward<S>) -> Array3<S> {
        to_batch(fwd.cache.z.clone(), fwd.cache.len)
    }
}

/// `(1/N) * sum_i ||x_i - x_hat_i||^2`, the norm taken over all `T x F`
/// entries of instance `i`.
pub fn reconstruction_loss<S: Scalar>(x: &Array3<S>, x_hat: &Array3<S>) -> Result<S, ModelError> {
    if x.dim() != x_hat.dim() || x.is_empty() {
        return Err(ModelError::Shape(format!(
            "reconstruction shapes differ: {:?} vs {:?}",
            x.dim(),
            x_hat.dim()
        )));
    }
    let n = S::of(x.dim().0 as f64);
    let sq = ndarray::Zip::from(x)
        .and(x_hat)
        .fold(S::zero(), |acc, &a, &b| acc + (a - b) * (a - b));
    Ok(sq / n)
}
