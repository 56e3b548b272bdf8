use serde::{Deserialize, Serialize};

use crate::error::{Result, UliError};
use crate::task::Profile;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    /// Layers that follow the layer-wise learning-rate ramp.
    pub pretrained_layers: usize,
    /// Extra layers appended after the pretrained stack.
    pub new_layers: usize,
    /// Layer `i` uses global attention when `(i + 1) % global_every == 0`.
    pub global_every: usize,
    pub patch: usize,
    /// Window side in patches.
    pub window: usize,
    /// Largest patch-grid side the position tables cover.
    pub max_grid: usize,
    pub max_coord_bins: usize,
    pub text_vocab: usize,
    pub mlp_ratio: usize,
    /// Global layers update only the shared observation.
    pub accelerated: bool,
    /// Image tokens may attend instruction tokens.
    pub text_conditioning: bool,
    pub init_std: f64,
    pub embed_std: f64,
    pub profile: String,
}

impl ModelConfig {
    pub fn desk() -> Self {
        let p = Profile::desk();
        Self {
            dim: 128,
            heads: 4,
            pretrained_layers: 4,
            new_layers: 2,
            global_every: 2,
            patch: p.patch,
            window: p.window,
            max_grid: p.max_resolution() / p.patch,
            max_coord_bins: 2 * p.max_resolution(),
            text_vocab: super::builtin_text_vocab(),
            mlp_ratio: 4,
            accelerated: false,
            text_conditioning: true,
            init_std: 0.02,
            embed_std: 0.02,
            profile: p.name,
        }
    }

    /// Base-size geometry; documented, not exercised by training.
    pub fn paper() -> Self {
        let p = Profile::paper();
        Self {
            dim: 768,
            heads: 12,
            pretrained_layers: 12,
            new_layers: 6,
            global_every: 4,
            patch: p.patch,
            window: p.window,
            max_grid: p.max_resolution() / p.patch,
            max_coord_bins: 2 * p.max_resolution(),
            profile: p.name,
            ..Self::desk()
        }
    }

    /// Two-layer, 16-wide model for gradient checks.
    pub fn tiny() -> Self {
        Self { dim: 16, heads: 2, pretrained_layers: 1, new_layers: 1, init_std: 0.3, embed_std: 0.3, ..Self::desk() }
    }

    pub fn layers(&self) -> usize {
        self.pretrained_layers + self.new_layers
    }

    pub fn is_global(&self, layer: usize) -> bool {
        (layer + 1).is_multiple_of(self.global_every)
    }

    pub fn global_layers(&self) -> Vec<usize> {
        (0..self.layers()).filter(|&l| self.is_global(l)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(UliError::Config(m));
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.layers() == 0 || self.global_every == 0 {
            return bad("model needs at least one layer and a global period".into());
        }
        if self.patch == 0 || self.window == 0 || self.max_grid == 0 {
            return bad("zero patch, window or grid size".into());
        }
        if self.max_grid > self.window && !self.max_grid.is_multiple_of(self.window) {
            return bad(format!("window {} does not divide patch grid {}", self.window, self.max_grid));
        }
        Ok(())
    }
}
