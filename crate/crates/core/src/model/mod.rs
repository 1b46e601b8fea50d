//! Conditional denoisers with attention recording.

pub mod attention;
pub mod layers;
pub mod lora;
pub mod mmdit;
pub mod params;
pub mod unet;

use std::path::Path;

use ctcal_autodiff::{Graph, Real, Var};
use serde::{Deserialize, Serialize};

pub use attention::{aggregate_attention, aggregate_values, extract_image_text_block, AttnKind, AttnMap, AttnRecord, Branch};
pub use lora::LoraAdapter;
pub use params::{Bound, ParamId, ParamStore};

use crate::error::{Error, Result};
use mmdit::MmDit;
use params::Init;
use unet::Unet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    CrossAttnUnet,
    MmDit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub d_model: usize,
    pub heads: usize,
    /// Attention layer count.
    pub depth: usize,
    pub resolution: usize,
    /// Side of the canonical aggregated attention map.
    pub attn_resolution: usize,
    /// Layers feeding the aggregate; all when absent.
    pub attn_layers: Option<Vec<usize>>,
    pub n_max: usize,
    pub vocab_size: usize,
    /// Patch side for the transformer variant.
    pub patch: usize,
    /// Causal self-attention blocks in the text encoder.
    pub text_layers: usize,
    /// Prepend a learned start token that attention can park on; its key column is dropped from maps.
    pub sink_token: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::CrossAttnUnet,
            d_model: 32,
            heads: 2,
            depth: 4,
            resolution: 32,
            attn_resolution: 16,
            attn_layers: None,
            n_max: 16,
            vocab_size: crate::prompts::Lexicon::builtin().len(),
            patch: 4,
            text_layers: 1,
            sink_token: true,
        }
    }
}

impl ModelConfig {
    /// Tiny configuration used for finite-difference checks.
    pub fn micro(variant: Variant) -> Self {
        Self { variant, d_model: 8, heads: 2, depth: 1, resolution: 8, attn_resolution: 4, patch: 4, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(8) {
            return bad(format!("d_model {} must be a positive multiple of 8", self.d_model));
        }
        if self.resolution == 0 || !self.resolution.is_multiple_of(4) {
            return bad(format!("resolution {} must be a multiple of 4", self.resolution));
        }
        let a = self.attn_resolution;
        if !a.is_power_of_two() || a > self.resolution {
            return bad(format!("attention resolution {a} must be a power of two <= {}", self.resolution));
        }
        if self.n_max == 0 || self.vocab_size == 0 {
            return bad("n_max and vocab_size must be positive".into());
        }
        match self.variant {
            Variant::CrossAttnUnet if !(1..=4).contains(&self.depth) => bad(format!("unet depth {} not in 1..=4", self.depth)),
            Variant::MmDit if self.depth == 0 => bad("transformer depth must be positive".into()),
            Variant::MmDit if self.patch == 0 || !self.resolution.is_multiple_of(self.patch) => {
                bad(format!("patch {} does not tile resolution {}", self.patch, self.resolution))
            }
            _ => Ok(()),
        }
    }
}

/// Tokenized, padded prompts plus per-item timesteps for one forward call.
#[derive(Debug, Clone)]
pub struct Text {
    pub ids: Vec<usize>,
    /// Prompt lengths, without the start token.
    pub lens: Vec<usize>,
    pub padded_len: usize,
    /// 1 when a start token precedes each prompt.
    pub sink: usize,
    pub timesteps: Vec<usize>,
    pub branch: Branch,
}

impl Text {
    pub fn batch(&self) -> usize {
        self.lens.len()
    }

    /// Text keys per item, start token included.
    pub fn keys(&self) -> usize {
        self.sink + self.padded_len
    }

    /// Key mask for `lq` queries over `key_offset` always-valid keys followed by the text.
    pub fn mask<T: Real>(&self, g: &mut Graph<T>, heads: usize, lq: usize, key_offset: usize) -> Option<Var> {
        if self.lens.iter().all(|&l| l == self.padded_len) {
            return None;
        }
        let valid: Vec<usize> = self.lens.iter().map(|l| l + self.sink + key_offset).collect();
        Some(g.constant(layers::key_mask(&valid, heads, lq, key_offset + self.keys())))
    }
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
enum Arch {
    Unet(Unet),
    MmDit(MmDit),
}

pub struct ForwardOutput {
    pub pred: Var,
    pub records: Vec<AttnRecord>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    arch: Arch,
    pub params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(&mut params, seed);
        let arch = match config.variant {
            Variant::CrossAttnUnet => Arch::Unet(Unet::new(&config, &mut init)),
            Variant::MmDit => Arch::MmDit(MmDit::new(&config, &mut init)),
        };
        Ok(Self { config, arch, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { config: self.config.clone(), arch: self.arch.clone(), params: self.params.cast() }
    }

    /// Replace parameters; names and shapes must match this architecture.
    pub fn with_params(mut self, params: ParamStore<T>) -> Result<Self> {
        if !self.params.same_layout(&params) {
            return Err(Error::ShapeMismatch("parameter layout does not match the model configuration".into()));
        }
        self.params = params;
        Ok(self)
    }

    pub fn prepare_text(&self, tokens: &[Vec<usize>], timesteps: &[usize], branch: Branch) -> Result<Text> {
        if tokens.is_empty() || tokens.len() != timesteps.len() {
            return Err(Error::ShapeMismatch(format!("{} prompts for {} timesteps", tokens.len(), timesteps.len())));
        }
        let pad = crate::prompts::Lexicon::builtin().pad_id().unwrap_or(0);
        let padded_len = tokens.iter().map(Vec::len).max().unwrap_or(0);
        let sink = usize::from(self.config.sink_token);
        let mut ids = Vec::with_capacity(tokens.len() * (sink + padded_len));
        for t in tokens {
            if t.is_empty() {
                return Err(Error::ShapeMismatch("empty text sequence".into()));
            }
            if t.len() > self.config.n_max {
                return Err(Error::PromptTooLong { len: t.len(), max: self.config.n_max });
            }
            if let Some(&bad) = t.iter().find(|&&id| id >= self.config.vocab_size) {
                return Err(Error::ShapeMismatch(format!("token id {bad} outside vocabulary of {}", self.config.vocab_size)));
            }
            if sink == 1 {
                ids.push(self.config.vocab_size);
            }
            ids.extend_from_slice(t);
            ids.extend(std::iter::repeat_n(pad, padded_len - t.len()));
        }
        Ok(Text { ids, lens: tokens.iter().map(Vec::len).collect(), padded_len, sink, timesteps: timesteps.to_vec(), branch })
    }

    /// Predict noise (or velocity) for `x_t: [B, 3, R, R]`; one record per attention layer.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x_t: Var,
        tokens: &[Vec<usize>],
        timesteps: &[usize],
        branch: Branch,
    ) -> Result<ForwardOutput> {
        let r = self.config.resolution;
        let s = g.shape(x_t);
        if s != [tokens.len(), 3, r, r] {
            return Err(Error::ShapeMismatch(format!("x_t {s:?}, expected [{}, 3, {r}, {r}]", tokens.len())));
        }
        let text = self.prepare_text(tokens, timesteps, branch)?;
        let (pred, records) = match &self.arch {
            Arch::Unet(u) => u.forward(&self.config, g, p, x_t, &text),
            Arch::MmDit(m) => m.forward(&self.config, g, p, x_t, &text),
        };
        Ok(ForwardOutput { pred, records })
    }

    /// Aggregated map of batch item `item` at the configured canonical resolution.
    pub fn aggregate(&self, g: &mut Graph<T>, records: &[AttnRecord], item: usize) -> Result<Var> {
        aggregate_attention(g, records, item, self.config.attn_resolution, self.config.attn_layers.as_deref())
    }
}

impl Model<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        params::save_tensors(path, serde_json::json!({ "model": self.config }), &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::UntrainedModel(path.to_path_buf()));
        }
        let (meta, store) = params::load_tensors(path)?;
        let config: ModelConfig = serde_json::from_value(meta["model"].clone())?;
        Model::new(config, 0)?.with_params(store)
    }
}
