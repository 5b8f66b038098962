//! A deterministic stand-in for the diffusion denoiser.
//!
//! Each layer resizes the latent grid to its own grid, runs (slimmed) extended self-attention
//! for every keyframe, and adds `A · mix + bias`, resized back to the latent grid, to the
//! latents. Real models plug in through [`Denoiser`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{
    extended_self_attention_metered, selection_mask_for_layer, slimmed_attention_metered, KvMeter,
    ProjectionWeights, TokenSelection,
};
use crate::error::{Error, Result};
use crate::tensor_store::{resize_grid, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    /// Attend over the selected KV tokens only.
    #[default]
    Slimmed,
    /// Brute-force reference: attend over every keyframe token.
    FullEsa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserSpec {
    pub layers: Vec<LayerSpec>,
    pub d_head: usize,
    pub heads: usize,
    pub seed: u64,
    /// Scale of the random mixing matrix entries.
    pub mix_scale: f32,
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        Self {
            layers: vec![LayerSpec { h: 16, w: 16 }],
            d_head: 8,
            heads: 1,
            seed: 0,
            mix_scale: 0.1,
        }
    }
}

/// Project → attend → mix hooks a denoiser exposes to the editing loop.
pub trait Denoiser: Sync {
    fn num_layers(&self) -> usize;

    /// Token grid the layer attends on.
    fn layer_grid(&self, layer: usize) -> (usize, usize);

    fn projections(&self, layer: usize) -> &ProjectionWeights;

    /// Latent-space update for one frame given its attention output
    /// (`tokens × inner` in, `tokens × channels` out, at the layer grid).
    fn mix(&self, layer: usize, attention: &[f32]) -> Vec<f32>;
}

#[derive(Debug, Clone)]
pub struct StubLayer {
    grid: (usize, usize),
    projections: ProjectionWeights,
    /// `inner × channels`.
    mix: Tensor,
    bias: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct StubDenoiser {
    channels: usize,
    layers: Vec<StubLayer>,
}

impl StubDenoiser {
    /// Builds all layer weights deterministically from `spec.seed`.
    pub fn new(spec: &DenoiserSpec, channels: usize) -> Result<Self> {
        if channels == 0 || spec.d_head == 0 || spec.heads == 0 {
            return Err(Error::Config(
                "denoiser needs channels, d_head and heads >= 1".into(),
            ));
        }
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (l, ls) in spec.layers.iter().enumerate() {
            if ls.h == 0 || ls.w == 0 {
                return Err(Error::Config(format!(
                    "layer {l} grid must be at least 1x1"
                )));
            }
            let layer_seed = spec
                .seed
                .wrapping_add(l as u64)
                .wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let projections =
                ProjectionWeights::random(channels, spec.d_head, spec.heads, layer_seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(layer_seed ^ 0x5EED);
            let inner = spec.d_head * spec.heads;
            let scale = spec.mix_scale / (inner as f32).sqrt();
            let mix = Tensor::from_fn(vec![inner, channels], |_| rng.gen_range(-scale..scale))?;
            let bias = (0..channels)
                .map(|_| rng.gen_range(-spec.mix_scale..spec.mix_scale) * 0.1)
                .collect();
            layers.push(StubLayer {
                grid: (ls.h, ls.w),
                projections,
                mix,
                bias,
            });
        }
        Ok(Self { channels, layers })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
}

impl Denoiser for StubDenoiser {
    fn num_layers(&self) -> usize {
        self.layers.len()
    }

    fn layer_grid(&self, layer: usize) -> (usize, usize) {
        self.layers[layer].grid
    }

    fn projections(&self, layer: usize) -> &ProjectionWeights {
        &self.layers[layer].projections
    }

    fn mix(&self, layer: usize, attention: &[f32]) -> Vec<f32> {
        let l = &self.layers[layer];
        let inner = l.mix.shape()[0];
        let c = self.channels;
        let mut out = Vec::with_capacity(attention.len() / inner * c);
        for row in attention.chunks_exact(inner) {
            for ch in 0..c {
                let mut acc = f64::from(l.bias[ch]);
                for (k, &a) in row.iter().enumerate() {
                    acc += f64::from(a) * f64::from(l.mix.data()[k * c + ch]);
                }
                out.push(acc as f32);
            }
        }
        out
    }
}

/// Runs one layer's attention for every keyframe.
///
/// `keyframe_latents` is `M × (h·w) × c` on the latent grid. Returns one
/// `layer_h × layer_w × inner` output per keyframe ordinal.
pub fn keyframe_attention(
    denoiser: &dyn Denoiser,
    layer: usize,
    keyframe_latents: &Tensor,
    latent_grid: (usize, usize),
    selections: &[TokenSelection],
    mode: AttentionMode,
    meter: Option<&KvMeter>,
) -> Result<Vec<Tensor>> {
    let (m, tokens, c) = latent_dims(keyframe_latents, latent_grid)?;
    if mode == AttentionMode::Slimmed && selections.len() != m {
        return Err(Error::Dimension(format!(
            "{} selections for {m} keyframes",
            selections.len()
        )));
    }
    let (lh, lw) = denoiser.layer_grid(layer);
    let (gh, gw) = latent_grid;
    let resized: Vec<f32> = (0..m)
        .flat_map(|k| {
            resize_grid(
                &keyframe_latents.data()[k * tokens * c..(k + 1) * tokens * c],
                gh,
                gw,
                c,
                lh,
                lw,
            )
        })
        .collect();
    let z = Tensor::new(vec![m, lh * lw, c], resized)?;
    let w = denoiser.projections(layer);
    (0..m)
        .into_par_iter()
        .map(|q| {
            let out = match mode {
                AttentionMode::FullEsa => extended_self_attention_metered(&z, w, q, meter)?,
                AttentionMode::Slimmed => {
                    let sel = selection_mask_for_layer(&selections[q], lh, lw)?;
                    slimmed_attention_metered(&z, w, q, &sel, meter)?
                }
            };
            out.reshape(vec![lh, lw, w.inner()])
        })
        .collect()
}

/// Latent-grid update for one frame from its layer-grid attention output.
pub fn latent_delta(
    denoiser: &dyn Denoiser,
    layer: usize,
    attention: &[f32],
    latent_grid: (usize, usize),
    channels: usize,
) -> Vec<f32> {
    let (lh, lw) = denoiser.layer_grid(layer);
    let delta = denoiser.mix(layer, attention);
    resize_grid(&delta, lh, lw, channels, latent_grid.0, latent_grid.1)
}

fn latent_dims(latents: &Tensor, grid: (usize, usize)) -> Result<(usize, usize, usize)> {
    if latents.ndim() != 3 || latents.shape()[1] != grid.0 * grid.1 {
        return Err(Error::Dimension(format!(
            "latents {:?} are not frames x {}x{} tokens x channels",
            latents.shape(),
            grid.0,
            grid.1
        )));
    }
    Ok((latents.shape()[0], latents.shape()[1], latents.shape()[2]))
}

/// Applies every layer to the keyframe latents (`M × h·w × c`) and returns the updated latents.
///
/// `selections[q]` is the DIFT-resolution selection for keyframe ordinal `q`; it is ignored in
/// [`AttentionMode::FullEsa`].
pub fn stub_denoiser(
    denoiser: &dyn Denoiser,
    keyframe_latents: &Tensor,
    latent_grid: (usize, usize),
    selections: &[TokenSelection],
    mode: AttentionMode,
) -> Result<Tensor> {
    let (m, tokens, c) = latent_dims(keyframe_latents, latent_grid)?;
    let mut latents = keyframe_latents.clone();
    for layer in 0..denoiser.num_layers() {
        let outputs = keyframe_attention(
            denoiser,
            layer,
            &latents,
            latent_grid,
            selections,
            mode,
            None,
        )?;
        let data = latents.data_mut();
        for (k, out) in outputs.iter().enumerate() {
            let delta = latent_delta(denoiser, layer, out.data(), latent_grid, c);
            for (x, dx) in data[k * tokens * c..(k + 1) * tokens * c]
                .iter_mut()
                .zip(delta)
            {
                *x += dx;
            }
        }
    }
    debug_assert_eq!(latents.shape()[0], m);
    Ok(latents)
}
