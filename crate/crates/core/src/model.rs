//! The full model: both encoders, the fusion aggregator, the loss scalars
//! and optional per-prefix projection heads, all in one [`ModelParams`].

use serde::{Deserialize, Serialize};

use crate::encoders::{image_batch, ImageConfig, ImageEncoder, TextBatch, TextConfig, TextEncoder};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionConfig};
use crate::layers::Scope;
use crate::objectives::prefix_rows;
use crate::params::{Bound, Group, ModelParams, ParamId};
use crate::rng::rng_for;
use crate::tensor::{Tape, Tensor, Var};

/// Initial temperature `ln 10`.
pub const INIT_T: f64 = std::f64::consts::LN_10;
pub const INIT_C: f64 = -10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub image: ImageConfig,
    pub text: TextConfig,
    pub fusion: FusionConfig,
    /// Separate (t, c) for the neighbor objective.
    pub split_scalars: bool,
    /// Prefix lengths that get a learned `k × k` projection head.
    pub mrl_heads: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 4,
            mlp_dim: 64,
            image: ImageConfig::default(),
            text: TextConfig::default(),
            fusion: FusionConfig::default(),
            split_scalars: false,
            mrl_heads: Vec::new(),
        }
    }
}

impl ModelConfig {
    /// A very small model for finite-difference audits.
    pub fn tiny() -> Self {
        Self {
            d_model: 8,
            heads: 2,
            mlp_dim: 8,
            image: ImageConfig {
                d_in: 3,
                patches: 4,
                modules: 2,
                layers_per_module: 1,
                funnel_stride: 2,
                locked_layers: 0,
            },
            text: TextConfig {
                vocab_size: 12,
                max_len: 4,
                layers: 1,
                locked_layers: 0,
            },
            fusion: FusionConfig { layers: 1 },
            split_scalars: false,
            mrl_heads: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.mlp_dim == 0 {
            return Err(Error::Config("model d_model and mlp_dim must be positive".into()));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        self.image.validate()?;
        self.text.validate()?;
        self.fusion.validate()?;
        if let Some(&k) = self.mrl_heads.iter().find(|&&k| k == 0 || k > self.d_model) {
            return Err(Error::Config(format!("mrl head size {k} outside 1..={}", self.d_model)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Image,
    Text,
}

/// Temperature and bias of the sigmoid pair loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossScalars {
    pub t: ParamId,
    pub c: ParamId,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub fusion: Fusion,
    pub i2t_scalars: LossScalars,
    /// Same ids as `i2t_scalars` unless the config splits them.
    pub p2p_scalars: LossScalars,
    pub mrl_heads: Vec<(usize, ParamId)>,
}

/// Graph handles for a model bound onto a tape.
pub struct BoundModel<'m> {
    pub model: &'m Model,
    pub p: Bound,
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (d, h, mlp) = (config.d_model, config.heads, config.mlp_dim);
        let mut params = ModelParams::new();
        let mut rng = rng_for(seed, "model-init");

        let image = {
            let mut s = Scope::new(&mut params, &mut rng, "image", Group::Image);
            ImageEncoder::new(&mut s, &config.image, d, h, mlp)?
        };
        let text = {
            let mut s = Scope::new(&mut params, &mut rng, "text", Group::Text);
            TextEncoder::new(&mut s, &config.text, d, h, mlp)?
        };
        let fusion = {
            let mut s = Scope::new(&mut params, &mut rng, "fusion", Group::Fusion);
            Fusion::new(
                &mut s,
                &config.fusion,
                config.image.output_tokens(),
                config.text.max_len,
                d,
                h,
                mlp,
            )?
        };
        let scalars = |params: &mut ModelParams, prefix: &str| LossScalars {
            t: params.register(format!("{prefix}.t"), Group::Loss, None, Tensor::scalar(INIT_T)),
            c: params.register(format!("{prefix}.c"), Group::Loss, None, Tensor::scalar(INIT_C)),
        };
        let i2t_scalars = scalars(&mut params, "loss");
        let p2p_scalars = if config.split_scalars {
            scalars(&mut params, "loss.p2p")
        } else {
            i2t_scalars
        };
        let mrl_heads = config
            .mrl_heads
            .iter()
            .map(|&k| {
                let id = params.register(format!("mrl.head{k}"), Group::Fusion, None, Tensor::identity(k));
                (k, id)
            })
            .collect();

        let mut model = Self {
            config: config.clone(),
            params,
            image,
            text,
            fusion,
            i2t_scalars,
            p2p_scalars,
            mrl_heads,
        };
        model.set_locked_layers(Component::Image, config.image.locked_layers)?;
        model.set_locked_layers(Component::Text, config.text.locked_layers)?;
        Ok(model)
    }

    /// Freezes the first `n` transformer layers of one encoder. At `n` equal
    /// to the layer count the whole encoder is frozen: stem, final norm and
    /// pooler included.
    pub fn set_locked_layers(&mut self, component: Component, n: usize) -> Result<()> {
        let (group, total) = match component {
            Component::Image => (Group::Image, self.config.image.total_layers()),
            Component::Text => (Group::Text, self.config.text.layers),
        };
        if n > total {
            return Err(Error::Config(format!(
                "cannot lock {n} layers of a {total}-layer {group} encoder"
            )));
        }
        let ids: Vec<ParamId> = self
            .params
            .iter()
            .filter(|(_, p)| p.group == group)
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            let p = self.params.get_mut(id);
            p.locked = match p.layer {
                Some(l) => l < n,
                None => n == total,
            };
        }
        match component {
            Component::Image => self.config.image.locked_layers = n,
            Component::Text => self.config.text.locked_layers = n,
        }
        Ok(())
    }

    pub fn bind<'m>(&'m self, tape: &mut Tape) -> Result<BoundModel<'m>> {
        Ok(BoundModel {
            model: self,
            p: self.params.bind(tape)?,
        })
    }

    pub fn bind_constant<'m>(&'m self, tape: &mut Tape) -> Result<BoundModel<'m>> {
        Ok(BoundModel {
            model: self,
            p: self.params.bind_constant(tape)?,
        })
    }

    pub fn scalar_values(&self, scalars: LossScalars) -> (f64, f64) {
        (
            self.params.value(scalars.t).item(),
            self.params.value(scalars.c).item(),
        )
    }

    /// Image embeddings for flat grids, evaluated in chunks without gradients.
    pub fn embed_images(&self, grids: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        self.embed_chunked(grids.len(), |bm, tape, lo, hi| {
            let v = bm.image_tokens(tape, &grids[lo..hi])?;
            bm.image_embedding(tape, v)
        })
    }

    pub fn embed_texts<S: AsRef<str>>(&self, texts: &[S]) -> Result<Vec<Vec<f64>>> {
        let batch = TextBatch::from_texts(texts, &self.config.text);
        self.embed_chunked(texts.len(), |bm, tape, lo, hi| {
            let b = batch.select(&(lo..hi).collect::<Vec<_>>());
            let s = bm.text_tokens(tape, &b)?;
            bm.text_embedding(tape, s, &b)
        })
    }

    pub fn embed_fused<S: AsRef<str>>(&self, grids: &[&[f64]], texts: &[S]) -> Result<Vec<Vec<f64>>> {
        if grids.len() != texts.len() {
            return Err(Error::Precondition(format!(
                "{} images but {} texts",
                grids.len(),
                texts.len()
            )));
        }
        let batch = TextBatch::from_texts(texts, &self.config.text);
        self.embed_chunked(texts.len(), |bm, tape, lo, hi| {
            let b = batch.select(&(lo..hi).collect::<Vec<_>>());
            bm.fused(tape, &grids[lo..hi], &b)
        })
    }

    /// Free-text queries embedded through the text-only fusion branch.
    pub fn embed_text_queries<S: AsRef<str>>(&self, texts: &[S]) -> Result<Vec<Vec<f64>>> {
        let batch = TextBatch::from_texts(texts, &self.config.text);
        self.embed_chunked(texts.len(), |bm, tape, lo, hi| {
            let b = batch.select(&(lo..hi).collect::<Vec<_>>());
            let s = bm.text_tokens(tape, &b)?;
            bm.model.fusion.fuse_text(tape, &bm.p, s, &b)
        })
    }

    /// Exported `k`-prefixes of full-width unit rows: the learned head for
    /// `k` when the model has one, then renormalization.
    pub fn export_prefix(&self, rows: &[Vec<f64>], k: usize) -> Result<Vec<Vec<f64>>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(rows)?)?;
        let head = match self.mrl_heads.iter().find(|(h, _)| *h == k) {
            Some(&(_, id)) => Some(tape.constant(self.params.value(id).clone())?),
            None => None,
        };
        let y = prefix_rows(&mut tape, x, k, head)?;
        let t = tape.value(y);
        Ok(t.data().chunks(k).map(<[f64]>::to_vec).collect())
    }

    fn embed_chunked<F>(&self, n: usize, f: F) -> Result<Vec<Vec<f64>>>
    where
        F: Fn(&BoundModel<'_>, &mut Tape, usize, usize) -> Result<Var>,
    {
        const CHUNK: usize = 64;
        let mut out = Vec::with_capacity(n);
        for lo in (0..n).step_by(CHUNK) {
            let hi = (lo + CHUNK).min(n);
            let mut tape = Tape::new();
            let bm = self.bind_constant(&mut tape)?;
            let e = f(&bm, &mut tape, lo, hi)?;
            let t = tape.value(e);
            let d = t.shape()[1];
            out.extend(t.data().chunks(d).map(<[f64]>::to_vec));
        }
        Ok(out)
    }
}

impl BoundModel<'_> {
    pub fn image_tokens(&self, tape: &mut Tape, grids: &[&[f64]]) -> Result<Var> {
        let x = tape.constant(image_batch(grids, &self.model.config.image)?)?;
        self.model.image.tokens(tape, &self.p, x)
    }

    pub fn image_embedding(&self, tape: &mut Tape, tokens: Var) -> Result<Var> {
        self.model.image.embed(tape, &self.p, tokens)
    }

    pub fn text_tokens(&self, tape: &mut Tape, batch: &TextBatch) -> Result<Var> {
        self.model.text.tokens(tape, &self.p, batch)
    }

    pub fn text_embedding(&self, tape: &mut Tape, tokens: Var, batch: &TextBatch) -> Result<Var> {
        self.model.text.embed(tape, &self.p, tokens, batch)
    }

    /// Fused unit embeddings of (image, descriptive text) pairs.
    pub fn fused(&self, tape: &mut Tape, grids: &[&[f64]], batch: &TextBatch) -> Result<Var> {
        let v = self.image_tokens(tape, grids)?;
        let s = self.text_tokens(tape, batch)?;
        self.model.fusion.fuse(tape, &self.p, v, s, batch)
    }

    pub fn scalars(&self, scalars: LossScalars) -> (Var, Var) {
        (self.p.var(scalars.t), self.p.var(scalars.c))
    }

    pub fn mrl_heads(&self) -> Vec<(usize, Var)> {
        self.model
            .mrl_heads
            .iter()
            .map(|&(k, id)| (k, self.p.var(id)))
            .collect()
    }
}
