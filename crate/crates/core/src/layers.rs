//! Transformer building blocks. Each layer is a bundle of [`ParamId`]s; the
//! values live in [`ModelParams`] and the forward pass runs on a [`Tape`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::params::{Bound, Group, ModelParams, ParamId};
use crate::tensor::{Tape, Tensor, TensorError, Var, LAYER_NORM_EPS};

/// Additive attention bias for masked keys. Large enough that `exp` of it
/// underflows to exactly zero after the max shift in softmax.
pub const MASK_VALUE: f64 = -1e9;

pub(crate) fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
        .expect("element count matches shape")
}

/// Registration context: every parameter created through it shares a name
/// prefix, a group and a layer tag.
pub struct Scope<'a, R: Rng> {
    pub params: &'a mut ModelParams,
    pub rng: &'a mut R,
    pub prefix: String,
    pub group: Group,
    pub layer: Option<usize>,
}

impl<'a, R: Rng> Scope<'a, R> {
    pub fn new(params: &'a mut ModelParams, rng: &'a mut R, prefix: &str, group: Group) -> Self {
        Self {
            params,
            rng,
            prefix: prefix.to_string(),
            group,
            layer: None,
        }
    }

    pub fn child(&mut self, name: &str) -> Scope<'_, R> {
        Scope {
            params: self.params,
            rng: self.rng,
            prefix: format!("{}.{}", self.prefix, name),
            group: self.group,
            layer: self.layer,
        }
    }

    pub fn layer(&mut self, name: &str, layer: usize) -> Scope<'_, R> {
        let mut s = self.child(name);
        s.layer = Some(layer);
        s
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        self.params
            .register(format!("{}.{}", self.prefix, name), self.group, self.layer, value)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let t = normal_tensor(self.rng, shape, std);
        self.add(name, t)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(s: &mut Scope<'_, R>, fan_in: usize, fan_out: usize) -> Self {
        let w = s.normal("w", &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt());
        let b = Some(s.add("b", Tensor::zeros([fan_out])));
        Self { w, b }
    }

    pub fn without_bias<R: Rng>(s: &mut Scope<'_, R>, fan_in: usize, fan_out: usize) -> Self {
        let w = s.normal("w", &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt());
        Self { w, b: None }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let h = tape.matmul(x, p.var(self.w))?;
        match self.b {
            Some(b) => tape.add(h, p.var(b)),
            None => Ok(h),
        }
    }
}

/// Layer normalization over the last axis followed by `gamma * x + beta`.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng>(s: &mut Scope<'_, R>, d: usize) -> Self {
        let gamma = s.add("gamma", Tensor::full([d], 1.0));
        let beta = s.add("beta", Tensor::zeros([d]));
        Self { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let n = tape.layer_norm(x, LAYER_NORM_EPS)?;
        let g = tape.mul(n, p.var(self.gamma))?;
        tape.add(g, p.var(self.beta))
    }
}

/// Multi-head scaled dot-product attention with learned projections.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(s: &mut Scope<'_, R>, d: usize, heads: usize) -> Result<Self, TensorError> {
        check_heads(d, heads)?;
        Ok(Self {
            q: Linear::new(&mut s.child("q"), d, d),
            // a key bias only shifts each softmax row, so it would never learn
            k: Linear::without_bias(&mut s.child("k"), d, d),
            v: Linear::new(&mut s.child("v"), d, d),
            o: Linear::new(&mut s.child("o"), d, d),
            heads,
        })
    }

    /// `q: [B, Nq, d]`, `kv: [B, Nk, d]`, optional additive `mask: [B, Nq, Nk]`.
    /// Rank-2 inputs are treated as a batch of one.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        q: Var,
        kv: Var,
        mask: Option<Var>,
    ) -> Result<Var, TensorError> {
        let unbatched = tape.shape(q).len() == 2;
        let (q, kv) = if unbatched {
            let qs = tape.shape(q).to_vec();
            let ks = tape.shape(kv).to_vec();
            if ks.len() != 2 {
                return Err(TensorError::ShapeMismatch { op: "attention", lhs: qs, rhs: ks });
            }
            (
                tape.reshape(q, &[1, qs[0], qs[1]])?,
                tape.reshape(kv, &[1, ks[0], ks[1]])?,
            )
        } else {
            (q, kv)
        };
        let qs = tape.shape(q).to_vec();
        let ks = tape.shape(kv).to_vec();
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] {
            return Err(TensorError::ShapeMismatch { op: "attention", lhs: qs, rhs: ks });
        }
        let d = qs[2];
        check_heads(d, self.heads)?;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let qp = self.q.forward(tape, p, q)?;
        let kp = self.k.forward(tape, p, kv)?;
        let vp = self.v.forward(tape, p, kv)?;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = if self.heads == 1 { qp } else { tape.slice(qp, 2, lo, hi)? };
            let kh = if self.heads == 1 { kp } else { tape.slice(kp, 2, lo, hi)? };
            let vh = if self.heads == 1 { vp } else { tape.slice(vp, 2, lo, hi)? };
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let mut scores = tape.scale(scores, scale)?;
            if let Some(m) = mask {
                scores = tape.add(scores, m)?;
            }
            let attn = tape.softmax(scores, 2)?;
            outs.push(tape.matmul(attn, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 2)? };
        let out = self.o.forward(tape, p, cat)?;
        if unbatched {
            tape.reshape(out, &[qs[1], d])
        } else {
            Ok(out)
        }
    }
}

fn check_heads(d: usize, heads: usize) -> Result<(), TensorError> {
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::InvalidArgument {
            op: "attention",
            msg: format!("width {d} is not divisible by {heads} heads"),
        });
    }
    Ok(())
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone, Copy)]
pub struct TransformerLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerLayer {
    pub fn new<R: Rng>(
        s: &mut Scope<'_, R>,
        d: usize,
        heads: usize,
        mlp_dim: usize,
    ) -> Result<Self, TensorError> {
        Ok(Self {
            ln1: LayerNorm::new(&mut s.child("ln1"), d),
            attn: MultiHeadAttention::new(&mut s.child("attn"), d, heads)?,
            ln2: LayerNorm::new(&mut s.child("ln2"), d),
            fc1: Linear::new(&mut s.child("fc1"), d, mlp_dim),
            fc2: Linear::new(&mut s.child("fc2"), mlp_dim, d),
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        mask: Option<Var>,
    ) -> Result<Var, TensorError> {
        let h = self.ln1.forward(tape, p, x)?;
        let a = self.attn.forward(tape, p, h, h, mask)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, p, x)?;
        let h = self.fc1.forward(tape, p, h)?;
        let h = tape.gelu(h)?;
        let h = self.fc2.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

/// Single learned query attending over a token sequence.
#[derive(Debug, Clone, Copy)]
pub struct AttentionPool {
    pub query: ParamId,
    pub attn: MultiHeadAttention,
}

impl AttentionPool {
    pub fn new<R: Rng>(s: &mut Scope<'_, R>, d: usize, heads: usize) -> Result<Self, TensorError> {
        let query = s.normal("query", &[1, d], 1.0);
        let attn = MultiHeadAttention::new(&mut s.child("attn"), d, heads)?;
        Ok(Self { query, attn })
    }

    /// `tokens: [B, N, d]`, `key_mask: [B, 1, N]` → `[B, d]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        tokens: Var,
        key_mask: Option<Var>,
    ) -> Result<Var, TensorError> {
        let shape = tape.shape(tokens).to_vec();
        let (b, d) = (shape[0], shape[2]);
        let zeros = tape.constant(Tensor::zeros([b, 1, d]))?;
        let q = tape.add(zeros, p.var(self.query))?;
        let r = self.attn.forward(tape, p, q, tokens, key_mask)?;
        tape.reshape(r, &[b, d])
    }
}

/// Builds an additive `[B, nq, nk]` mask from per-row key validity.
pub fn key_mask(valid: &[Vec<bool>], nq: usize) -> Tensor {
    let b = valid.len();
    let nk = valid.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(b * nq * nk);
    for row in valid {
        for _ in 0..nq {
            data.extend(row.iter().map(|&ok| if ok { 0.0 } else { MASK_VALUE }));
        }
    }
    Tensor::new([b, nq, nk], data).expect("mask rows share a length")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn attn_fixture(d: usize, heads: usize) -> (ModelParams, MultiHeadAttention) {
        let mut params = ModelParams::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mha = {
            let mut s = Scope::new(&mut params, &mut rng, "mha", Group::Fusion);
            MultiHeadAttention::new(&mut s, d, heads).unwrap()
        };
        (params, mha)
    }

    #[test]
    fn pooling_query_shape() {
        let (params, mha) = attn_fixture(8, 2);
        let mut tape = Tape::new();
        let p = params.bind(&mut tape).unwrap();
        let q = tape.constant(normal_tensor(&mut ChaCha8Rng::seed_from_u64(1), &[1, 8], 1.0)).unwrap();
        let kv = tape.constant(normal_tensor(&mut ChaCha8Rng::seed_from_u64(2), &[4, 8], 1.0)).unwrap();
        let out = mha.forward(&mut tape, &p, q, kv, None).unwrap();
        assert_eq!(tape.shape(out), &[1, 8]);
    }

    #[test]
    fn heads_must_divide_width() {
        let mut params = ModelParams::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = Scope::new(&mut params, &mut rng, "m", Group::Fusion);
        assert!(matches!(
            MultiHeadAttention::new(&mut s, 6, 4),
            Err(TensorError::InvalidArgument { op: "attention", .. })
        ));
    }

    #[test]
    fn identical_keys_yield_value_projection() {
        let (params, mha) = attn_fixture(8, 2);
        let row = normal_tensor(&mut ChaCha8Rng::seed_from_u64(5), &[1, 8], 1.0);
        let keys = Tensor::new([3, 8], row.data().repeat(3)).unwrap();
        let mut outs = Vec::new();
        for seed in [10, 11] {
            let mut tape = Tape::new();
            let p = params.bind(&mut tape).unwrap();
            let q = tape.constant(normal_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &[1, 8], 1.0)).unwrap();
            let kv = tape.constant(keys.clone()).unwrap();
            let out = mha.forward(&mut tape, &p, q, kv, None).unwrap();
            outs.push(tape.value(out).clone());
        }
        // expected: o(v(row)) computed by hand
        let lin = |x: &[f64], l: &Linear| -> Vec<f64> {
            let w = params.value(l.w);
            let b = params.value(l.b.unwrap());
            (0..8)
                .map(|j| b.data()[j] + (0..8).map(|i| x[i] * w.data()[i * 8 + j]).sum::<f64>())
                .collect()
        };
        let expect = lin(&lin(row.data(), &mha.v), &mha.o);
        for out in outs {
            for (a, b) in out.data().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_head_identity_projection_by_hand() {
        let (mut params, mha) = attn_fixture(2, 1);
        for l in [mha.q, mha.k, mha.v, mha.o] {
            params.get_mut(l.w).value = Tensor::identity(2);
            if let Some(b) = l.b {
                params.get_mut(b).value = Tensor::zeros([2]);
            }
        }
        let mut tape = Tape::new();
        let p = params.bind(&mut tape).unwrap();
        let q = tape.constant(Tensor::new([1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
        let kv = tape
            .constant(Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let out = mha.forward(&mut tape, &p, q, kv, None).unwrap();
        // scores [1, 0] / sqrt(2); weights softmax; output = weights (rows of I)
        let s = 1.0 / 2f64.sqrt();
        let w0 = s.exp() / (s.exp() + 1.0);
        let v = tape.value(out).data();
        assert!((v[0] - w0).abs() < 1e-15);
        assert!((v[1] - (1.0 - w0)).abs() < 1e-15);
    }

    #[test]
    fn masked_keys_are_ignored() {
        let (params, mha) = attn_fixture(4, 2);
        let base = normal_tensor(&mut ChaCha8Rng::seed_from_u64(8), &[1, 3, 4], 1.0);
        let mut alt = base.clone();
        for v in &mut alt.data_mut()[8..12] {
            *v += 5.0;
        }
        let mask = key_mask(&[vec![true, true, false]], 3);
        let run = |x: &Tensor| {
            let mut tape = Tape::new();
            let p = params.bind(&mut tape).unwrap();
            let xv = tape.constant(x.clone()).unwrap();
            let m = tape.constant(mask.clone()).unwrap();
            let out = mha.forward(&mut tape, &p, xv, xv, Some(m)).unwrap();
            tape.value(out).data()[..8].to_vec()
        };
        assert_eq!(run(&base), run(&alt));
    }

    #[test]
    fn transformer_layer_gradients() {
        let mut params = ModelParams::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = {
            let mut s = Scope::new(&mut params, &mut rng, "l", Group::Image);
            TransformerLayer::new(&mut s, 4, 2, 6).unwrap()
        };
        let x = normal_tensor(&mut rng, &[1, 3, 4], 1.0);
        let mut leaves: Vec<Tensor> = params.iter().map(|(_, p)| p.value.clone()).collect();
        leaves.push(x);
        let n = params.len();
        let r = grad_check(
            |tape, vars| {
                let p = Bound::from_vars(vars[..n].to_vec());
                let y = layer.forward(tape, &p, vars[n], None)?;
                let w = tape.constant(normal_tensor(&mut ChaCha8Rng::seed_from_u64(9), &[1, 3, 4], 1.0))?;
                let y = tape.mul(y, w)?;
                tape.sum(y)
            },
            &leaves,
            1e-4,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
