//! Cross-modal fusion: visual tokens followed by text tokens, a small
//! transformer stack, a learned-query pooler and l2 normalization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::TextBatch;
use crate::error::{Error, Result};
use crate::layers::{key_mask, AttentionPool, LayerNorm, Scope, TransformerLayer};
use crate::params::{Bound, ParamId};
use crate::tensor::{Tape, TensorError, Var, NORM_EPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub layers: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { layers: 2 }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("fusion layers must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Fusion {
    pub config: FusionConfig,
    /// Position table over the concatenated `[visual ‖ text]` sequence.
    pub pos: ParamId,
    pub visual_len: usize,
    pub layers: Vec<TransformerLayer>,
    pub final_ln: LayerNorm,
    pub pool: AttentionPool,
}

impl Fusion {
    pub fn new<R: Rng>(
        s: &mut Scope<'_, R>,
        config: &FusionConfig,
        visual_len: usize,
        text_len: usize,
        d: usize,
        heads: usize,
        mlp_dim: usize,
    ) -> Result<Self> {
        config.validate()?;
        let pos = s.normal("pos", &[visual_len + text_len, d], 0.1);
        let layers = (0..config.layers)
            .map(|l| TransformerLayer::new(&mut s.layer(&format!("layer{l}"), l), d, heads, mlp_dim))
            .collect::<Result<_, _>>()?;
        let final_ln = LayerNorm::new(&mut s.child("ln"), d);
        let pool = AttentionPool::new(&mut s.child("pool"), d, heads)?;
        Ok(Self {
            config: config.clone(),
            pos,
            visual_len,
            layers,
            final_ln,
            pool,
        })
    }

    /// `visual: [B, N_v', d]`, `text: [B, L, d]` → unit rows `[B, d]`.
    pub fn fuse(
        &self,
        tape: &mut Tape,
        p: &Bound,
        visual: Var,
        text: Var,
        batch: &TextBatch,
    ) -> Result<Var> {
        let vs = tape.shape(visual).to_vec();
        let ts = tape.shape(text).to_vec();
        if vs.len() != 3 || ts.len() != 3 || vs[0] != ts[0] || vs[2] != ts[2] {
            return Err(TensorError::ShapeMismatch { op: "fuse", lhs: vs, rhs: ts }.into());
        }
        if vs[1] != self.visual_len {
            let rhs = vec![vs[0], self.visual_len, vs[2]];
            return Err(TensorError::ShapeMismatch { op: "fuse", lhs: vs, rhs }
            .into());
        }
        let z = tape.concat(&[visual, text], 1)?;
        let n = vs[1] + ts[1];
        let pos = tape.slice(p.var(self.pos), 0, 0, n)?;
        let valid: Vec<Vec<bool>> = batch
            .valid
            .iter()
            .map(|row| std::iter::repeat_n(true, vs[1]).chain(row.iter().copied()).collect())
            .collect();
        self.run(tape, p, z, pos, &valid)
    }

    /// Text-only branch: the text slice of the position table, no visual
    /// tokens. Used to embed free-text queries against fused candidates.
    pub fn fuse_text(&self, tape: &mut Tape, p: &Bound, text: Var, batch: &TextBatch) -> Result<Var> {
        let len = tape.shape(text)[1];
        let pos = tape.slice(p.var(self.pos), 0, self.visual_len, self.visual_len + len)?;
        self.run(tape, p, text, pos, &batch.valid)
    }

    fn run(&self, tape: &mut Tape, p: &Bound, z: Var, pos: Var, valid: &[Vec<bool>]) -> Result<Var> {
        let n = tape.shape(z)[1];
        let mut h = tape.add(z, pos)?;
        let mask = tape.constant(key_mask(valid, n))?;
        for layer in &self.layers {
            h = layer.forward(tape, p, h, Some(mask))?;
        }
        let h = self.final_ln.forward(tape, p, h)?;
        let pool_mask = tape.constant(key_mask(valid, 1))?;
        let r = self.pool.forward(tape, p, h, Some(pool_mask))?;
        Ok(tape.l2_normalize(r, 1, NORM_EPS)?)
    }
}
