//! Token-wise cosine similarity between frames: heatmaps (best-match similarity per token)
//! and argmax correspondence maps.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor_store::Tensor;

/// Norms below this are treated as zero vectors; their similarity to anything is 0.
pub const ZERO_NORM: f64 = 1e-12;

/// Similarities this close to a row maximum count as ties in argmax matching.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Per-frame feature grids, `n × h × w × d`, with per-token inverse norms precomputed.
#[derive(Debug, Clone)]
pub struct FeatureVolume {
    n: usize,
    h: usize,
    w: usize,
    d: usize,
    values: Tensor,
    inv_norms: Vec<f64>,
}

impl FeatureVolume {
    pub fn from_tensor(values: Tensor) -> Result<Self> {
        if values.ndim() != 4 {
            return Err(Error::Dimension(format!(
                "feature volume must be n x h x w x d, got shape {:?}",
                values.shape()
            )));
        }
        if !values.is_finite() {
            return Err(Error::Dimension(
                "feature volume contains non-finite values".into(),
            ));
        }
        let (n, h, w, d) = (
            values.shape()[0],
            values.shape()[1],
            values.shape()[2],
            values.shape()[3],
        );
        let inv_norms = values
            .data()
            .chunks_exact(d)
            .map(|tok| {
                let norm = dot(tok, tok).sqrt();
                if norm < ZERO_NORM {
                    0.0
                } else {
                    1.0 / norm
                }
            })
            .collect();
        Ok(Self {
            n,
            h,
            w,
            d,
            values,
            inv_norms,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn h(&self) -> usize {
        self.h
    }
    pub fn w(&self) -> usize {
        self.w
    }
    pub fn d(&self) -> usize {
        self.d
    }
    pub fn tokens_per_frame(&self) -> usize {
        self.h * self.w
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    /// Flat `h·w·d` features of frame `i`.
    pub fn frame(&self, i: usize) -> &[f32] {
        self.values.slice0(i)
    }

    pub fn token(&self, frame: usize, pos: usize) -> &[f32] {
        let at = (frame * self.h * self.w + pos) * self.d;
        &self.values.data()[at..at + self.d]
    }

    fn frame_inv_norms(&self, i: usize) -> &[f64] {
        let hw = self.h * self.w;
        &self.inv_norms[i * hw..(i + 1) * hw]
    }

    fn check_frame(&self, i: usize) -> Result<()> {
        if i >= self.n {
            return Err(Error::Index(format!(
                "frame {i} out of range for {} frames",
                self.n
            )));
        }
        Ok(())
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

/// `a·b / (‖a‖‖b‖)`, or 0 when either norm is below [`ZERO_NORM`].
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "cosine similarity of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na < ZERO_NORM || nb < ZERO_NORM {
        return Ok(0.0);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0) as f32)
}

/// `h × w` grid of best-match similarities of frame i's tokens against frame j.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    values: Tensor,
}

impl Heatmap {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.ndim() != 2 {
            return Err(Error::Dimension(format!(
                "heatmap must be h x w, got {:?}",
                values.shape()
            )));
        }
        Ok(Self { values })
    }

    pub fn h(&self) -> usize {
        self.values.shape()[0]
    }
    pub fn w(&self) -> usize {
        self.values.shape()[1]
    }
    pub fn values(&self) -> &[f32] {
        self.values.data()
    }
    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn mean(&self) -> f64 {
        let v = self.values();
        v.iter().map(|&x| f64::from(x)).sum::<f64>() / v.len() as f64
    }
}

/// Flat target positions, one per cell of an `h × w` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionMap {
    h: usize,
    w: usize,
    targets: Vec<usize>,
}

impl PositionMap {
    pub fn new(h: usize, w: usize, targets: Vec<usize>) -> Result<Self> {
        if targets.len() != h * w {
            return Err(Error::Dimension(format!(
                "position map for {h}x{w} grid needs {} targets, got {}",
                h * w,
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= h * w) {
            return Err(Error::Index(format!("target {bad} outside {h}x{w} grid")));
        }
        Ok(Self { h, w, targets })
    }

    pub fn identity(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            targets: (0..h * w).collect(),
        }
    }

    pub fn h(&self) -> usize {
        self.h
    }
    pub fn w(&self) -> usize {
        self.w
    }
    pub fn targets(&self) -> &[usize] {
        &self.targets
    }
    pub fn is_identity(&self) -> bool {
        self.targets.iter().enumerate().all(|(p, &q)| p == q)
    }
}

/// Best match in frame j for every token of frame i: (similarity, flat index).
/// Scores within [`TIE_TOLERANCE`] of the maximum tie, and ties keep the lowest index.
fn best_matches(features: &FeatureVolume, i: usize, j: usize) -> Vec<(f32, usize)> {
    let (d, hw) = (features.d, features.tokens_per_frame());
    let fi = features.frame(i);
    let fj = features.frame(j);
    let inv_i = features.frame_inv_norms(i);
    let inv_j = features.frame_inv_norms(j);
    let row = |p: usize| {
        let a = &fi[p * d..(p + 1) * d];
        let scores: Vec<f64> = (0..hw)
            .map(|q| (dot(a, &fj[q * d..(q + 1) * d]) * inv_i[p] * inv_j[q]).clamp(-1.0, 1.0))
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let arg = scores
            .iter()
            .position(|&s| s >= max - TIE_TOLERANCE)
            .unwrap_or(0);
        (max as f32, arg)
    };
    // Small grids are not worth the scheduling overhead.
    if hw * hw * d < 1 << 16 {
        (0..hw).map(row).collect()
    } else {
        (0..hw).into_par_iter().map(row).collect()
    }
}

fn check_pair(features: &FeatureVolume, i: usize, j: usize) -> Result<()> {
    features.check_frame(i)?;
    features.check_frame(j)
}

/// Heatmap `H_{i,j}`: for each token p of frame i, the max cosine similarity over frame j.
pub fn heatmap(features: &FeatureVolume, i: usize, j: usize) -> Result<Heatmap> {
    check_pair(features, i, j)?;
    let values = best_matches(features, i, j)
        .into_iter()
        .map(|m| m.0)
        .collect();
    Heatmap::new(Tensor::new(vec![features.h, features.w], values)?)
}

/// Correspondence map `φ_ij`: argmax position in frame j for each token of frame i.
pub fn correspondence_map(features: &FeatureVolume, i: usize, j: usize) -> Result<PositionMap> {
    check_pair(features, i, j)?;
    let targets = best_matches(features, i, j)
        .into_iter()
        .map(|m| m.1)
        .collect();
    PositionMap::new(features.h, features.w, targets)
}

/// Heatmap and correspondence map between two standalone frames of shape `h × w × d`.
pub fn match_frames(fi: &Tensor, fj: &Tensor) -> Result<(Heatmap, PositionMap)> {
    if fi.ndim() != 3 || fi.shape() != fj.shape() {
        return Err(Error::Dimension(format!(
            "frames must share an h x w x d shape, got {:?} and {:?}",
            fi.shape(),
            fj.shape()
        )));
    }
    let (h, w, d) = (fi.shape()[0], fi.shape()[1], fi.shape()[2]);
    let mut data = fi.data().to_vec();
    data.extend_from_slice(fj.data());
    let vol = FeatureVolume::from_tensor(Tensor::new(vec![2, h, w, d], data)?)?;
    let m = best_matches(&vol, 0, 1);
    let heat = Heatmap::new(Tensor::new(vec![h, w], m.iter().map(|x| x.0).collect())?)?;
    let map = PositionMap::new(h, w, m.iter().map(|x| x.1).collect())?;
    Ok((heat, map))
}

/// Memoizing heatmap store keyed by the ordered pair `(i, j)`.
///
/// With a capacity, the oldest entry is evicted first. Concurrent lookups of the same
/// missing pair may both compute it; the results are identical.
pub struct HeatmapCache {
    features: Arc<FeatureVolume>,
    capacity: Option<usize>,
    inner: Mutex<CacheInner>,
    computed: AtomicUsize,
}

#[derive(Default)]
struct CacheInner {
    map: HashMap<(usize, usize), Arc<Heatmap>>,
    order: VecDeque<(usize, usize)>,
}

impl HeatmapCache {
    pub fn new(features: Arc<FeatureVolume>) -> Self {
        Self::with_capacity(features, None)
    }

    pub fn with_capacity(features: Arc<FeatureVolume>, capacity: Option<usize>) -> Self {
        Self {
            features,
            capacity: capacity.map(|c| c.max(1)),
            inner: Mutex::new(CacheInner::default()),
            computed: AtomicUsize::new(0),
        }
    }

    pub fn features(&self) -> &Arc<FeatureVolume> {
        &self.features
    }

    pub fn lookup(&self, i: usize, j: usize) -> Result<Arc<Heatmap>> {
        if let Some(hit) = self.inner.lock().unwrap().map.get(&(i, j)) {
            return Ok(Arc::clone(hit));
        }
        let fresh = Arc::new(heatmap(&self.features, i, j)?);
        self.computed.fetch_add(1, Ordering::Relaxed);

        let mut inner = self.inner.lock().unwrap();
        if let Some(raced) = inner.map.get(&(i, j)) {
            return Ok(Arc::clone(raced));
        }
        if let Some(cap) = self.capacity {
            while inner.map.len() >= cap {
                match inner.order.pop_front() {
                    Some(old) => {
                        inner.map.remove(&old);
                    }
                    None => break,
                }
            }
        }
        inner.map.insert((i, j), Arc::clone(&fresh));
        inner.order.push_back((i, j));
        Ok(fresh)
    }

    /// Number of heatmaps computed so far (cache misses).
    pub fn computed(&self) -> usize {
        self.computed.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
