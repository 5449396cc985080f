//! Image and text encoders producing unpooled token sequences, plus the
//! pooled unit-norm embeddings used by the image-text objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{key_mask, AttentionPool, LayerNorm, Linear, Scope, TransformerLayer};
use crate::params::{Bound, ParamId};
use crate::tensor::{Tape, Tensor, TensorError, Var, NORM_EPS};

pub const PAD: usize = 0;
pub const BOS: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageConfig {
    /// Raw feature width of one patch.
    pub d_in: usize,
    /// Patch count N_v.
    pub patches: usize,
    pub modules: usize,
    pub layers_per_module: usize,
    /// Stride of the funnel pooling between consecutive modules; 1 disables.
    pub funnel_stride: usize,
    pub locked_layers: usize,
}

impl Default for ImageConfig {
    fn default() -> Self {
        Self {
            d_in: 16,
            patches: 16,
            modules: 3,
            layers_per_module: 1,
            funnel_stride: 2,
            locked_layers: 0,
        }
    }
}

impl ImageConfig {
    pub fn total_layers(&self) -> usize {
        self.modules * self.layers_per_module
    }

    /// Token count after the funnel chain: `modules - 1` ceil-divisions.
    pub fn output_tokens(&self) -> usize {
        (1..self.modules).fold(self.patches, |n, _| n.div_ceil(self.funnel_stride))
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.patches == 0 {
            return Err(Error::Config("image patches and d_in must be positive".into()));
        }
        if self.modules == 0 || self.layers_per_module == 0 {
            return Err(Error::Config("image modules and layers_per_module must be positive".into()));
        }
        if self.funnel_stride == 0 {
            return Err(Error::Config("image funnel_stride must be at least 1".into()));
        }
        if self.locked_layers > self.total_layers() {
            return Err(Error::Config(format!(
                "image locked_layers {} exceeds {} layers",
                self.locked_layers,
                self.total_layers()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextConfig {
    pub vocab_size: usize,
    /// Maximum sequence length N_t, including the begin token.
    pub max_len: usize,
    pub layers: usize,
    pub locked_layers: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            max_len: 16,
            layers: 2,
            locked_layers: 0,
        }
    }
}

impl TextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 {
            return Err(Error::Config("text vocab_size must be at least 3".into()));
        }
        if self.max_len < 1 || self.layers < 1 {
            return Err(Error::Config("text max_len and layers must be positive".into()));
        }
        if self.locked_layers > self.layers {
            return Err(Error::Config(format!(
                "text locked_layers {} exceeds {} layers",
                self.locked_layers, self.layers
            )));
        }
        Ok(())
    }
}

/// Byte-level tokenizer: `[BOS, bytes..., PAD...]` of exactly `max_len` ids.
/// Bytes map to `2 + b mod (vocab - 2)`; overlong text is truncated.
pub fn tokenize(text: &str, max_len: usize, vocab_size: usize) -> Vec<usize> {
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BOS);
    ids.extend(
        text.bytes()
            .take(max_len.saturating_sub(1))
            .map(|b| 2 + usize::from(b) % (vocab_size - 2)),
    );
    ids.resize(max_len, PAD);
    ids
}

/// Embeds `[B, N, d]` tokens into unit vectors with a pooler.
fn pool_normalize(
    pool: &AttentionPool,
    tape: &mut Tape,
    p: &Bound,
    tokens: Var,
    valid: Option<&[Vec<bool>]>,
) -> Result<Var> {
    let mask = match valid {
        Some(v) => Some(tape.constant(key_mask(v, 1))?),
        None => None,
    };
    let r = pool.forward(tape, p, tokens, mask)?;
    Ok(tape.l2_normalize(r, 1, NORM_EPS)?)
}

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub config: ImageConfig,
    pub proj: Linear,
    pub pos: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub final_ln: LayerNorm,
    pub pool: AttentionPool,
}

impl ImageEncoder {
    pub fn new<R: Rng>(
        s: &mut Scope<'_, R>,
        config: &ImageConfig,
        d: usize,
        heads: usize,
        mlp_dim: usize,
    ) -> Result<Self> {
        config.validate()?;
        let proj = Linear::new(&mut s.child("proj"), config.d_in, d);
        let pos = s.normal("pos", &[config.patches, d], 0.1);
        let layers = (0..config.total_layers())
            .map(|l| TransformerLayer::new(&mut s.layer(&format!("layer{l}"), l), d, heads, mlp_dim))
            .collect::<Result<_, _>>()?;
        let final_ln = LayerNorm::new(&mut s.child("ln"), d);
        let pool = AttentionPool::new(&mut s.child("pool"), d, heads)?;
        Ok(Self {
            config: config.clone(),
            proj,
            pos,
            layers,
            final_ln,
            pool,
        })
    }

    /// `images: [B, N_v, d_in]` → unpooled tokens `[B, N_v', d]`.
    pub fn tokens(&self, tape: &mut Tape, p: &Bound, images: Var) -> Result<Var> {
        let shape = tape.shape(images).to_vec();
        let want = [self.config.patches, self.config.d_in];
        if shape.len() != 3 || shape[1..] != want {
            return Err(TensorError::ShapeMismatch {
                op: "encode_image",
                lhs: shape,
                rhs: want.to_vec(),
            }
            .into());
        }
        let h = self.proj.forward(tape, p, images)?;
        let mut h = tape.add(h, p.var(self.pos))?;
        let lpm = self.config.layers_per_module;
        for m in 0..self.config.modules {
            if m > 0 {
                h = tape.funnel_pool(h, self.config.funnel_stride)?;
            }
            for layer in &self.layers[m * lpm..(m + 1) * lpm] {
                h = layer.forward(tape, p, h, None)?;
            }
        }
        Ok(self.final_ln.forward(tape, p, h)?)
    }

    /// Pooled, l2-normalized image embeddings `[B, d]`.
    pub fn embed(&self, tape: &mut Tape, p: &Bound, tokens: Var) -> Result<Var> {
        pool_normalize(&self.pool, tape, p, tokens, None)
    }
}

/// Token ids plus the derived key-validity mask for one text batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TextBatch {
    pub ids: Vec<Vec<usize>>,
    pub valid: Vec<Vec<bool>>,
}

impl TextBatch {
    /// All rows must share one padded length.
    pub fn new(ids: Vec<Vec<usize>>) -> Result<Self> {
        let len = ids.first().map_or(0, Vec::len);
        if ids.iter().any(|r| r.len() != len) {
            return Err(Error::Precondition("text batch rows differ in length".into()));
        }
        let valid = ids.iter().map(|r| r.iter().map(|&t| t != PAD).collect()).collect();
        Ok(Self { ids, valid })
    }

    pub fn from_texts<S: AsRef<str>>(texts: &[S], config: &TextConfig) -> Self {
        let ids = texts
            .iter()
            .map(|t| tokenize(t.as_ref(), config.max_len, config.vocab_size))
            .collect();
        Self::new(ids).expect("tokenize pads to a fixed length")
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.ids.first().map_or(0, Vec::len)
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            ids: rows.iter().map(|&r| self.ids[r].clone()).collect(),
            valid: rows.iter().map(|&r| self.valid[r].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub config: TextConfig,
    pub embed_table: ParamId,
    pub pos: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub final_ln: LayerNorm,
    pub pool: AttentionPool,
}

impl TextEncoder {
    pub fn new<R: Rng>(
        s: &mut Scope<'_, R>,
        config: &TextConfig,
        d: usize,
        heads: usize,
        mlp_dim: usize,
    ) -> Result<Self> {
        config.validate()?;
        let embed_table = s.normal("embed", &[config.vocab_size, d], 1.0);
        let pos = s.normal("pos", &[config.max_len, d], 0.1);
        let layers = (0..config.layers)
            .map(|l| TransformerLayer::new(&mut s.layer(&format!("layer{l}"), l), d, heads, mlp_dim))
            .collect::<Result<_, _>>()?;
        let final_ln = LayerNorm::new(&mut s.child("ln"), d);
        let pool = AttentionPool::new(&mut s.child("pool"), d, heads)?;
        Ok(Self {
            config: config.clone(),
            embed_table,
            pos,
            layers,
            final_ln,
            pool,
        })
    }

    /// Unpooled tokens `[B, L, d]` for a batch padded to `L ≤ N_t`.
    pub fn tokens(&self, tape: &mut Tape, p: &Bound, batch: &TextBatch) -> Result<Var> {
        let (b, len) = (batch.len(), batch.seq_len());
        if len == 0 || len > self.config.max_len {
            return Err(Error::Precondition(format!(
                "text length {len} outside 1..={}",
                self.config.max_len
            )));
        }
        if let Some(&bad) = batch.ids.iter().flatten().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Precondition(format!(
                "token id {bad} is outside the vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let flat: Vec<usize> = batch.ids.iter().flatten().copied().collect();
        let d = tape.shape(p.var(self.embed_table))[1];
        let e = tape.gather_rows(p.var(self.embed_table), &flat)?;
        let e = tape.reshape(e, &[b, len, d])?;
        let pos = if len == self.config.max_len {
            p.var(self.pos)
        } else {
            tape.slice(p.var(self.pos), 0, 0, len)?
        };
        let mut h = tape.add(e, pos)?;
        let mask = tape.constant(key_mask(&batch.valid, len))?;
        for layer in &self.layers {
            h = layer.forward(tape, p, h, Some(mask))?;
        }
        Ok(self.final_ln.forward(tape, p, h)?)
    }

    pub fn embed(&self, tape: &mut Tape, p: &Bound, tokens: Var, batch: &TextBatch) -> Result<Var> {
        pool_normalize(&self.pool, tape, p, tokens, Some(&batch.valid))
    }
}

/// Builds an `[B, N_v, d_in]` tensor from flat per-pin grids.
pub fn image_batch(grids: &[&[f64]], config: &ImageConfig) -> Result<Tensor> {
    let per = config.patches * config.d_in;
    let mut data = Vec::with_capacity(grids.len() * per);
    for g in grids {
        if g.len() != per {
            return Err(TensorError::ShapeMismatch {
                op: "encode_image",
                lhs: vec![g.len()],
                rhs: vec![config.patches, config.d_in],
            }
            .into());
        }
        data.extend_from_slice(g);
    }
    Ok(Tensor::new([grids.len(), config.patches, config.d_in], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_pads_and_truncates() {
        assert_eq!(tokenize("", 4, 256), vec![BOS, PAD, PAD, PAD]);
        assert_eq!(tokenize("ab", 4, 256), vec![BOS, 2 + 97, 2 + 98, PAD]);
        let full = tokenize("abcdefgh", 4, 256);
        assert_eq!(full.len(), 4);
        assert!(full.iter().all(|&t| t != PAD));
        assert!(tokenize("\u{ff}", 3, 10).iter().all(|&t| t < 10));
    }

    #[test]
    fn token_count_law() {
        let mut c = ImageConfig::default();
        assert_eq!(c.output_tokens(), 4);
        c.modules = 1;
        assert_eq!(c.output_tokens(), 16);
        c.modules = 3;
        c.patches = 7;
        c.funnel_stride = 3;
        assert_eq!(c.output_tokens(), 1);
    }

    #[test]
    fn config_validation() {
        let mut c = ImageConfig::default();
        c.locked_layers = 4;
        assert!(c.validate().is_err());
        let mut t = TextConfig::default();
        t.locked_layers = 3;
        assert!(t.validate().is_err());
    }
}
