//! Extended self-attention over jointly edited keyframes, heatmap-scored KV token
//! selection under a frame budget, the slimmed attention that consumes it, and
//! closed-form cost accounting.
//!
//! Latents for `M` keyframes are a tensor `M × tokens × d_model`. Frames inside a
//! selection are addressed by their ordinal in the keyframe list, not by video frame index.

use std::cmp::Ordering;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering as AtomicOrdering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::similarity::HeatmapCache;
use crate::tensor_store::{resize_grid, Tensor};

/// Token budget used by default, in frames' worth of tokens.
pub const DEFAULT_BUDGET_FRAMES: usize = 14;

/// Query/key/value projections, each `d_model × (heads · d_head)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionWeights {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    heads: usize,
    d_head: usize,
}

impl ProjectionWeights {
    pub fn new(wq: Tensor, wk: Tensor, wv: Tensor, heads: usize) -> Result<Self> {
        if heads == 0 {
            return Err(Error::Dimension("attention needs at least one head".into()));
        }
        if wq.ndim() != 2 || wq.shape() != wk.shape() || wq.shape() != wv.shape() {
            return Err(Error::Dimension(format!(
                "projection shapes differ or are not 2-d: {:?} {:?} {:?}",
                wq.shape(),
                wk.shape(),
                wv.shape()
            )));
        }
        let inner = wq.shape()[1];
        if !inner.is_multiple_of(heads) {
            return Err(Error::Dimension(format!(
                "projection width {inner} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            wq,
            wk,
            wv,
            heads,
            d_head: inner / heads,
        })
    }

    /// Uniform `±1/√d_model` entries from a seeded ChaCha stream.
    pub fn random(d_model: usize, d_head: usize, heads: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (d_model as f32).sqrt();
        let shape = vec![d_model, heads * d_head];
        let mut draw = || Tensor::from_fn(shape.clone(), |_| rng.gen_range(-bound..bound));
        let (wq, wk, wv) = (draw()?, draw()?, draw()?);
        Self::new(wq, wk, wv, heads)
    }

    /// Single head with all three projections equal to the identity.
    pub fn identity(d: usize) -> Result<Self> {
        let eye = Tensor::from_fn(vec![d, d], |k| if k / d == k % d { 1.0 } else { 0.0 })?;
        Self::new(eye.clone(), eye.clone(), eye, 1)
    }

    pub fn d_model(&self) -> usize {
        self.wq.shape()[0]
    }
    pub fn heads(&self) -> usize {
        self.heads
    }
    pub fn d_head(&self) -> usize {
        self.d_head
    }
    /// Output width, `heads · d_head`.
    pub fn inner(&self) -> usize {
        self.heads * self.d_head
    }
    pub fn wq(&self) -> &Tensor {
        &self.wq
    }
    pub fn wk(&self) -> &Tensor {
        &self.wk
    }
    pub fn wv(&self) -> &Tensor {
        &self.wv
    }
}

/// A KV token: keyframe ordinal and flat grid position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenRef {
    pub frame: usize,
    pub pos: usize,
}

/// KV tokens retained for one query keyframe, sorted by `(frame, pos)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSelection {
    /// Ordinal of the query keyframe.
    pub query: usize,
    pub num_frames: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Maximum number of retained tokens.
    pub budget: usize,
    pub kept: Vec<TokenRef>,
}

impl TokenSelection {
    /// Every token of every frame.
    pub fn full(query: usize, num_frames: usize, grid_h: usize, grid_w: usize) -> Self {
        let hw = grid_h * grid_w;
        Self {
            query,
            num_frames,
            grid_h,
            grid_w,
            budget: num_frames * hw,
            kept: (0..num_frames)
                .flat_map(|frame| (0..hw).map(move |pos| TokenRef { frame, pos }))
                .collect(),
        }
    }

    /// Only the query frame's tokens.
    pub fn query_only(query: usize, num_frames: usize, grid_h: usize, grid_w: usize) -> Self {
        let hw = grid_h * grid_w;
        Self {
            query,
            num_frames,
            grid_h,
            grid_w,
            budget: hw,
            kept: (0..hw).map(|pos| TokenRef { frame: query, pos }).collect(),
        }
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    /// Retained token count per keyframe ordinal.
    pub fn kept_per_frame(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_frames];
        for t in &self.kept {
            counts[t.frame] += 1;
        }
        counts
    }

    pub fn contains(&self, frame: usize, pos: usize) -> bool {
        self.kept.binary_search(&TokenRef { frame, pos }).is_ok()
    }

    /// Per-frame boolean masks, `num_frames × tokens_per_frame`.
    pub fn masks(&self) -> Vec<Vec<bool>> {
        let mut masks = vec![vec![false; self.tokens_per_frame()]; self.num_frames];
        for t in &self.kept {
            masks[t.frame][t.pos] = true;
        }
        masks
    }

    /// Checks sortedness, uniqueness, ranges, the budget, and query-frame completeness.
    pub fn validate(&self) -> Result<()> {
        let hw = self.tokens_per_frame();
        if self.query >= self.num_frames {
            return Err(Error::Index(format!(
                "query ordinal {} out of range for {} keyframes",
                self.query, self.num_frames
            )));
        }
        if let Some(bad) = self
            .kept
            .iter()
            .find(|t| t.frame >= self.num_frames || t.pos >= hw)
        {
            return Err(Error::Index(format!(
                "selection token {bad:?} outside {} frames x {hw} positions",
                self.num_frames
            )));
        }
        if self.kept.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Index(
                "selection tokens must be unique and sorted by (frame, pos)".into(),
            ));
        }
        if self.kept.len() > self.budget {
            return Err(Error::Index(format!(
                "selection keeps {} tokens over budget {}",
                self.kept.len(),
                self.budget
            )));
        }
        if self.kept_per_frame()[self.query] != hw {
            return Err(Error::Index("selection drops query-frame tokens".into()));
        }
        Ok(())
    }
}

/// Picks the KV tokens kept for query keyframe `query` among `keyframes` (video frame indices).
///
/// With at most `budget_frames` keyframes everything is kept. Otherwise the query frame's own
/// tokens are kept unconditionally, and the remaining `(budget_frames - 1)·h·w` slots go to the
/// other keyframes' tokens with the highest `H_{k_j, k_query}` value, ties broken by lower
/// ordinal then lower position.
pub fn select_kv_tokens(
    query: usize,
    keyframes: &[usize],
    cache: &HeatmapCache,
    budget_frames: usize,
) -> Result<TokenSelection> {
    let m = keyframes.len();
    let feats = cache.features();
    let (gh, gw) = (feats.h(), feats.w());
    let hw = gh * gw;
    if m == 0 || budget_frames == 0 {
        return Err(Error::Config(
            "token selection needs at least one keyframe and a budget of at least one frame".into(),
        ));
    }
    if query >= m {
        return Err(Error::Index(format!(
            "query ordinal {query} out of range for {m} keyframes"
        )));
    }
    if m <= budget_frames {
        return Ok(TokenSelection::full(query, m, gh, gw));
    }

    let query_frame = keyframes[query];
    let mut scored: Vec<(f32, TokenRef)> = Vec::with_capacity((m - 1) * hw);
    for (ordinal, &frame) in keyframes.iter().enumerate() {
        if ordinal == query {
            continue;
        }
        let heat = cache.lookup(frame, query_frame)?;
        scored.extend(heat.values().iter().enumerate().map(|(pos, &s)| {
            (
                s,
                TokenRef {
                    frame: ordinal,
                    pos,
                },
            )
        }));
    }
    let rank = |a: &(f32, TokenRef), b: &(f32, TokenRef)| -> Ordering {
        b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1))
    };
    let others = (budget_frames - 1) * hw;
    if others < scored.len() {
        if others > 0 {
            scored.select_nth_unstable_by(others - 1, rank);
        }
        scored.truncate(others);
    }

    let mut kept: Vec<TokenRef> = scored.into_iter().map(|(_, t)| t).collect();
    kept.extend((0..hw).map(|pos| TokenRef { frame: query, pos }));
    kept.sort_unstable();
    let sel = TokenSelection {
        query,
        num_frames: m,
        grid_h: gh,
        grid_w: gw,
        budget: budget_frames * hw,
        kept,
    };
    debug_assert!(sel.validate().is_ok());
    Ok(sel)
}

/// Re-expresses a selection at an attention layer's grid by resizing each frame's mask
/// with nearest-neighbour sampling.
///
/// The budget scales to `budget_frames · layer_h · layer_w`; for non-integer resize ratios the
/// resized masks can round above that, in which case the budget is the resized count.
pub fn selection_mask_for_layer(
    sel: &TokenSelection,
    layer_h: usize,
    layer_w: usize,
) -> Result<TokenSelection> {
    if layer_h == 0 || layer_w == 0 {
        return Err(Error::Dimension("layer grid must be at least 1x1".into()));
    }
    if (layer_h, layer_w) == (sel.grid_h, sel.grid_w) {
        return Ok(sel.clone());
    }
    let mut kept = Vec::new();
    for (frame, mask) in sel.masks().iter().enumerate() {
        let resized = resize_grid(mask, sel.grid_h, sel.grid_w, 1, layer_h, layer_w);
        kept.extend(
            resized
                .iter()
                .enumerate()
                .filter(|(_, &on)| on)
                .map(|(pos, _)| TokenRef { frame, pos }),
        );
    }
    let src_hw = sel.tokens_per_frame();
    let dst_hw = layer_h * layer_w;
    let budget_frames = sel.budget.div_ceil(src_hw);
    Ok(TokenSelection {
        query: sel.query,
        num_frames: sel.num_frames,
        grid_h: layer_h,
        grid_w: layer_w,
        budget: (budget_frames * dst_hw).max(kept.len()),
        kept,
    })
}

/// Process-wide accounting of K/V buffer sizes materialized by attention calls.
#[derive(Debug, Default)]
pub struct KvMeter {
    calls: AtomicU64,
    total_tokens: AtomicU64,
    peak_tokens: AtomicUsize,
}

impl KvMeter {
    pub fn new() -> Self {
        Self::default()
    }

    fn record(&self, kv_tokens: usize) {
        self.calls.fetch_add(1, AtomicOrdering::Relaxed);
        self.total_tokens
            .fetch_add(kv_tokens as u64, AtomicOrdering::Relaxed);
        self.peak_tokens
            .fetch_max(kv_tokens, AtomicOrdering::Relaxed);
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(AtomicOrdering::Relaxed)
    }
    /// Sum of KV tokens over all calls.
    pub fn total_tokens(&self) -> u64 {
        self.total_tokens.load(AtomicOrdering::Relaxed)
    }
    /// Largest KV buffer (in tokens) any single call materialized.
    pub fn peak_tokens(&self) -> usize {
        self.peak_tokens.load(AtomicOrdering::Relaxed)
    }
}

fn check_latents(z: &Tensor, w: &ProjectionWeights, query: usize) -> Result<(usize, usize)> {
    if z.ndim() != 3 {
        return Err(Error::Dimension(format!(
            "latents must be M x tokens x d_model, got {:?}",
            z.shape()
        )));
    }
    let (m, tokens, d_model) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    if d_model != w.d_model() {
        return Err(Error::Dimension(format!(
            "latent width {d_model} does not match projection input {}",
            w.d_model()
        )));
    }
    if query >= m {
        return Err(Error::Index(format!(
            "query ordinal {query} out of range for {m} keyframes"
        )));
    }
    Ok((m, tokens))
}

/// Projects one latent token row through `w` (`d_model × inner`) into `out`.
fn project(token: &[f32], w: &Tensor, out: &mut [f64]) {
    let inner = w.shape()[1];
    out.fill(0.0);
    for (k, &x) in token.iter().enumerate() {
        let x = f64::from(x);
        let row = &w.data()[k * inner..(k + 1) * inner];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += x * f64::from(wv);
        }
    }
}

type Probe<'a> = &'a (dyn Fn(usize, usize, &[f64]) + Sync);

/// Softmax attention of the query frame's tokens over the gathered `kv` tokens.
fn attend(
    z: &Tensor,
    w: &ProjectionWeights,
    query: usize,
    kv: &[TokenRef],
    meter: Option<&KvMeter>,
    probe: Option<Probe<'_>>,
) -> Result<Tensor> {
    let (m, tokens) = check_latents(z, w, query)?;
    if let Some(bad) = kv.iter().find(|t| t.frame >= m || t.pos >= tokens) {
        return Err(Error::Index(format!(
            "KV token {bad:?} outside {m} keyframes x {tokens} tokens"
        )));
    }
    if kv.is_empty() {
        return Err(Error::Index("attention over an empty KV set".into()));
    }
    let inner = w.inner();
    let (heads, dh) = (w.heads(), w.d_head());
    let d_model = w.d_model();
    let token = |frame: usize, pos: usize| {
        let at = (frame * tokens + pos) * d_model;
        &z.data()[at..at + d_model]
    };

    let mut keys = vec![0.0f64; kv.len() * inner];
    let mut values = vec![0.0f64; kv.len() * inner];
    keys.par_chunks_mut(inner)
        .zip(values.par_chunks_mut(inner))
        .zip(kv.par_iter())
        .for_each(|((k, v), t)| {
            let x = token(t.frame, t.pos);
            project(x, w.wk(), k);
            project(x, w.wv(), v);
        });
    if let Some(meter) = meter {
        meter.record(kv.len());
    }

    let scale = 1.0 / (dh as f64).sqrt();
    let rows: Vec<Vec<f32>> = (0..tokens)
        .into_par_iter()
        .map(|p| {
            let mut q = vec![0.0f64; inner];
            project(token(query, p), w.wq(), &mut q);
            let mut out = vec![0.0f32; inner];
            let mut weights = vec![0.0f64; kv.len()];
            for hd in 0..heads {
                let span = hd * dh..(hd + 1) * dh;
                let qh = &q[span.clone()];
                let mut max = f64::NEG_INFINITY;
                for (wgt, key) in weights.iter_mut().zip(keys.chunks_exact(inner)) {
                    let logit: f64 = qh
                        .iter()
                        .zip(&key[span.clone()])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        * scale;
                    *wgt = logit;
                    max = max.max(logit);
                }
                let mut denom = 0.0;
                for wgt in weights.iter_mut() {
                    *wgt = (*wgt - max).exp();
                    denom += *wgt;
                }
                for wgt in weights.iter_mut() {
                    *wgt /= denom;
                }
                if let Some(probe) = probe {
                    probe(hd, p, &weights);
                }
                let mut acc = vec![0.0f64; dh];
                for (wgt, val) in weights.iter().zip(values.chunks_exact(inner)) {
                    for (a, v) in acc.iter_mut().zip(&val[span.clone()]) {
                        *a += wgt * v;
                    }
                }
                for (o, a) in out[span].iter_mut().zip(acc) {
                    *o = a as f32;
                }
            }
            out
        })
        .collect();
    Tensor::new(vec![tokens, inner], rows.concat())
}

/// `Softmax(Q_query K_{all}^T / √d_head) V_{all}` per head, heads concatenated.
/// Output is `tokens × (heads · d_head)`.
pub fn extended_self_attention(z: &Tensor, w: &ProjectionWeights, query: usize) -> Result<Tensor> {
    extended_self_attention_metered(z, w, query, None)
}

pub fn extended_self_attention_metered(
    z: &Tensor,
    w: &ProjectionWeights,
    query: usize,
    meter: Option<&KvMeter>,
) -> Result<Tensor> {
    let (m, tokens) = check_latents(z, w, query)?;
    let all: Vec<TokenRef> = (0..m)
        .flat_map(|frame| (0..tokens).map(move |pos| TokenRef { frame, pos }))
        .collect();
    attend(z, w, query, &all, meter, None)
}

/// Extended self-attention restricted to the KV tokens in `sel`.
pub fn slimmed_attention(
    z: &Tensor,
    w: &ProjectionWeights,
    query: usize,
    sel: &TokenSelection,
) -> Result<Tensor> {
    slimmed_attention_metered(z, w, query, sel, None)
}

pub fn slimmed_attention_metered(
    z: &Tensor,
    w: &ProjectionWeights,
    query: usize,
    sel: &TokenSelection,
    meter: Option<&KvMeter>,
) -> Result<Tensor> {
    if sel.query != query {
        return Err(Error::Index(format!(
            "selection built for query {} used for query {query}",
            sel.query
        )));
    }
    let (m, tokens) = check_latents(z, w, query)?;
    if sel.num_frames != m || sel.tokens_per_frame() != tokens {
        return Err(Error::Index(format!(
            "selection covers {} frames x {} tokens, latents have {m} x {tokens}",
            sel.num_frames,
            sel.tokens_per_frame()
        )));
    }
    attend(z, w, query, &sel.kept, meter, None)
}

/// Softmax weights `[head][query token][kv token]` of a slimmed attention call.
pub fn attention_weights(
    z: &Tensor,
    w: &ProjectionWeights,
    query: usize,
    sel: &TokenSelection,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let (_, tokens) = check_latents(z, w, query)?;
    let store = std::sync::Mutex::new(vec![vec![Vec::new(); tokens]; w.heads()]);
    let probe = |head: usize, row: usize, weights: &[f64]| {
        store.lock().unwrap()[head][row] = weights.to_vec();
    };
    attend(z, w, query, &sel.kept, None, Some(&probe))?;
    Ok(store.into_inner().unwrap())
}

/// KV token and multiply-accumulate counts of full versus slimmed attention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct CostReport {
    pub kv_tokens_full: u64,
    pub kv_tokens_slimmed: u64,
    pub attention_macs_full: u64,
    pub attention_macs_slimmed: u64,
    /// `kv_tokens_slimmed / kv_tokens_full`.
    pub ratio: f64,
}

impl CostReport {
    /// Adds another report's counts and recomputes the ratio.
    pub fn accumulate(&mut self, other: &CostReport) {
        self.kv_tokens_full += other.kv_tokens_full;
        self.kv_tokens_slimmed += other.kv_tokens_slimmed;
        self.attention_macs_full += other.attention_macs_full;
        self.attention_macs_slimmed += other.attention_macs_slimmed;
        self.ratio = self.kv_tokens_slimmed as f64 / self.kv_tokens_full as f64;
    }
}

/// Closed-form cost of one query frame attending over `m` keyframes.
///
/// MACs are `queries × kv × d_head × heads × 2` (logits plus weighted sum).
pub fn attention_cost(
    m: usize,
    tokens_per_frame: usize,
    budget_frames: usize,
    d_head: usize,
    heads: usize,
) -> Result<CostReport> {
    if [m, tokens_per_frame, budget_frames, d_head, heads].contains(&0) {
        return Err(Error::Config("attention cost needs all counts >= 1".into()));
    }
    let q = tokens_per_frame as u64;
    let full = (m * tokens_per_frame) as u64;
    let slim = (m.min(budget_frames) * tokens_per_frame) as u64;
    let per_kv = q * (d_head * heads) as u64 * 2;
    Ok(CostReport {
        kv_tokens_full: full,
        kv_tokens_slimmed: slim,
        attention_macs_full: full * per_kv,
        attention_macs_slimmed: slim * per_kv,
        ratio: slim as f64 / full as f64,
    })
}
