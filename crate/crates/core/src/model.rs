//! Everything a sampling or training call needs, in one place.

use serde::{Deserialize, Serialize};

use crate::dit::{Dit, DitConfig};
use crate::encoder::{EncoderSpec, ImageEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::extractor::{default_top_k, Projector, ProjectorConfig, StyleExtractor, TextureAggregator, TextureConfig};
use crate::rng;
use crate::tensor::ParamStore;

/// Hyperparameters fixed at model creation; stored with every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub dit: DitConfig,
    pub encoder: EncoderSpec,
    pub image_size: usize,
    pub corpus_seed: u64,
    pub n_styles: usize,
    pub n_objects: usize,
    pub texture_queries: usize,
    pub texture_heads: usize,
    pub top_k: Option<usize>,
    pub projector_hidden: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            dit: DitConfig::default(),
            encoder: EncoderSpec::default(),
            image_size: 32,
            corpus_seed: 0,
            n_styles: 15,
            n_objects: 15,
            texture_queries: 4,
            texture_heads: 4,
            top_k: None,
            projector_hidden: vec![128],
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        self.dit.validate()?;
        if self.dit.text_dim != self.encoder.dim {
            return Err(Error::Config(format!(
                "text width {} must equal the encoder width {}",
                self.dit.text_dim, self.encoder.dim
            )));
        }
        if self.dit.style_tokens != self.texture_queries + 1 {
            return Err(Error::Config(format!(
                "style token rows {} must be texture queries {} plus one",
                self.dit.style_tokens, self.texture_queries
            )));
        }
        if !self.image_size.is_multiple_of(self.dit.patch) {
            return Err(Error::Config(format!("image size {} not divisible by patch {}", self.image_size, self.dit.patch)));
        }
        Ok(())
    }

    pub fn texture_config(&self) -> TextureConfig {
        TextureConfig {
            input_dim: self.encoder.dim,
            width: self.dit.width,
            queries: self.texture_queries,
            heads: self.texture_heads,
            positional: false,
        }
    }

    pub fn projector_config(&self) -> ProjectorConfig {
        ProjectorConfig { hidden: self.projector_hidden.clone(), ..ProjectorConfig::new(self.encoder.dim, self.dit.width) }
    }

    pub fn top_k(&self) -> usize {
        let (r, c) = self.encoder.grid;
        self.top_k.unwrap_or_else(|| default_top_k(r * c))
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub arch: Architecture,
    pub dit: Dit,
    pub params: ParamStore,
    pub encoder: ImageEncoder,
    pub text: TextEncoder,
    pub extractor: Option<StyleExtractor>,
}

impl Model {
    /// Fresh base network plus the fixed encoders.
    pub fn create(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let dit = Dit::new(arch.dit.clone())?;
        let params = dit.init_base(seed);
        Self::assemble(arch, params, None)
    }

    /// Rebuilds the fixed parts around existing parameters.
    pub fn assemble(arch: Architecture, params: ParamStore, projector: Option<ParamStore>) -> Result<Self> {
        arch.validate()?;
        let dit = Dit::new(arch.dit.clone())?;
        let encoder = ImageEncoder::new(arch.encoder)?;
        let text = TextEncoder::aligned(&encoder, arch.n_styles, arch.n_objects, arch.image_size, arch.corpus_seed, 4)?;
        let mut model = Self { arch, dit, params, encoder, text, extractor: None };
        if let Some(p) = projector {
            model.attach_projector(Projector::from_params(model.arch.projector_config(), &p)?)?;
        }
        Ok(model)
    }

    /// Installs a trained projector; texture parameters are created if absent.
    pub fn attach_projector(&mut self, projector: Projector) -> Result<()> {
        if projector.config.input_dim != self.arch.encoder.dim || projector.config.output_dim != self.arch.dit.width {
            return Err(Error::Config(format!(
                "projector maps {}→{}, model needs {}→{}",
                projector.config.input_dim, projector.config.output_dim, self.arch.encoder.dim, self.arch.dit.width
            )));
        }
        let texture = TextureAggregator::new(self.arch.texture_config())?;
        if !self.params.contains("tex.queries") {
            texture.init_params(&mut rng::child_rng(self.arch.corpus_seed, 0x7E7), &mut self.params);
        }
        self.extractor = Some(StyleExtractor { projector, texture, top_k: self.arch.top_k() });
        Ok(())
    }

    pub fn extractor(&self) -> Result<&StyleExtractor> {
        self.extractor.as_ref().ok_or_else(|| Error::Invalid("a style image needs a trained style extractor".into()))
    }
}
