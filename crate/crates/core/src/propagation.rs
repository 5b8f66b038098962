//! Correspondence-based propagation of keyframe attention outputs to the rest of each clip.
//!
//! Token correspondences come from the source features and are computed once, for every
//! (frame, candidate keyframe) pair inside a clip, then reused at every timestep.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keyframes::KeyframeSchedule;
use crate::partition::ClipPartition;
use crate::similarity::{correspondence_map, FeatureVolume, PositionMap};
use crate::tensor_store::{nearest_source, tensor_read, tensor_write, Tensor};

#[derive(Debug, Clone)]
pub struct CorrespondenceSet {
    grid_h: usize,
    grid_w: usize,
    clip_of: Vec<usize>,
    /// `(frame, keyframe) -> φ_{frame, keyframe}`.
    maps: HashMap<(usize, usize), PositionMap>,
    /// `adjacent[i] = φ_{i, i-1}` when frames `i-1` and `i` share a clip.
    adjacent: Vec<Option<PositionMap>>,
}

/// Computes `φ_ij` for every frame `i` and every keyframe `j` that the schedule ever assigns
/// to `i`'s clip, plus `φ_{i,i-1}` for adjacent frames of the same clip.
pub fn precompute_correspondences(
    features: &FeatureVolume,
    partition: &ClipPartition,
    schedule: &KeyframeSchedule,
) -> Result<CorrespondenceSet> {
    let n = features.n();
    if partition.n != n {
        return Err(Error::Dimension(format!(
            "partition covers {} frames, features have {n}",
            partition.n
        )));
    }
    schedule.validate(partition)?;
    let (h, w) = (features.h(), features.w());

    let mut pairs = Vec::new();
    for (k, range) in partition.ranges().enumerate() {
        let candidates = schedule.candidates(k);
        for i in range {
            pairs.extend(candidates.iter().map(|&j| (i, j)));
        }
    }
    let maps = pairs
        .into_par_iter()
        .map(|(i, j)| {
            let map = if i == j {
                PositionMap::identity(h, w)
            } else {
                correspondence_map(features, i, j)?
            };
            Ok(((i, j), map))
        })
        .collect::<Result<HashMap<_, _>>>()?;

    let clip_of: Vec<usize> = (0..n).map(|i| partition.clip_of(i)).collect();
    let adjacent = (0..n)
        .into_par_iter()
        .map(|i| {
            if i > 0 && clip_of[i] == clip_of[i - 1] {
                correspondence_map(features, i, i - 1).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(CorrespondenceSet {
        grid_h: h,
        grid_w: w,
        clip_of,
        maps,
        adjacent,
    })
}

impl CorrespondenceSet {
    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn n(&self) -> usize {
        self.clip_of.len()
    }

    pub fn clip_of(&self, frame: usize) -> usize {
        self.clip_of[frame]
    }

    /// `φ_{frame, keyframe}` if it was precomputed.
    pub fn map(&self, frame: usize, keyframe: usize) -> Option<&PositionMap> {
        self.maps.get(&(frame, keyframe))
    }

    /// `φ_{i, i-1}` for adjacent frames of one clip.
    pub fn adjacent(&self, i: usize) -> Option<&PositionMap> {
        self.adjacent.get(i).and_then(Option::as_ref)
    }

    pub fn num_maps(&self) -> usize {
        self.maps.len()
    }

    /// Stored position indices, the memory footprint in tokens.
    pub fn index_count(&self) -> usize {
        let hw = self.grid_h * self.grid_w;
        (self.maps.len() + self.adjacent.iter().flatten().count()) * hw
    }

    /// Keyframe of `frame` at timestep `t` and its map.
    pub fn keyframe_map(
        &self,
        frame: usize,
        t: usize,
        schedule: &KeyframeSchedule,
    ) -> Result<(usize, &PositionMap)> {
        let clip = self.clip_of[frame];
        let key = schedule.at(t)[clip];
        let map = self.map(frame, key).ok_or_else(|| {
            Error::Index(format!(
                "no correspondence for frame {frame} -> keyframe {key} at timestep {t}"
            ))
        })?;
        Ok((key, map))
    }

    /// Flat `n × h × w` tensor of the timestep-`t` maps plus the `keyframe_of` sidecar.
    /// Indices are stored as f32, exact below 2^24 tokens.
    pub fn export_timestep(
        &self,
        t: usize,
        schedule: &KeyframeSchedule,
    ) -> Result<(Tensor, Vec<usize>)> {
        let hw = self.grid_h * self.grid_w;
        if hw >= 1 << 24 {
            return Err(Error::Dimension(format!(
                "grid of {hw} tokens cannot be stored exactly as f32"
            )));
        }
        let mut data = Vec::with_capacity(self.n() * hw);
        let mut keyframe_of = Vec::with_capacity(self.n());
        for i in 0..self.n() {
            let (key, map) = self.keyframe_map(i, t, schedule)?;
            keyframe_of.push(key);
            data.extend(map.targets().iter().map(|&q| q as f32));
        }
        Ok((
            Tensor::new(vec![self.n(), self.grid_h, self.grid_w], data)?,
            keyframe_of,
        ))
    }

    /// Writes the timestep-`t` maps as AFTN plus a `{"keyframe_of": [...]}` JSON sidecar.
    pub fn save_timestep(
        &self,
        t: usize,
        schedule: &KeyframeSchedule,
        tensor_path: impl AsRef<Path>,
        sidecar_path: impl AsRef<Path>,
    ) -> Result<()> {
        let (tensor, keyframe_of) = self.export_timestep(t, schedule)?;
        tensor_write(&tensor, tensor_path)?;
        let sidecar = Sidecar { keyframe_of };
        let path = sidecar_path.as_ref();
        let json = serde_json::to_vec(&sidecar).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    /// Loads a single-keyframe-per-frame set written by [`CorrespondenceSet::save_timestep`].
    pub fn load(
        tensor_path: impl AsRef<Path>,
        sidecar_path: impl AsRef<Path>,
        partition: &ClipPartition,
    ) -> Result<Self> {
        let tensor = tensor_read(tensor_path)?;
        let path = sidecar_path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let sidecar: Sidecar = serde_json::from_slice(&bytes).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        if tensor.ndim() != 3 || tensor.shape()[0] != partition.n {
            return Err(Error::Dimension(format!(
                "correspondence tensor {:?} does not match {} frames",
                tensor.shape(),
                partition.n
            )));
        }
        let (n, h, w) = (tensor.shape()[0], tensor.shape()[1], tensor.shape()[2]);
        if sidecar.keyframe_of.len() != n {
            return Err(Error::Dimension(format!(
                "sidecar lists {} keyframes for {n} frames",
                sidecar.keyframe_of.len()
            )));
        }
        let clip_of: Vec<usize> = (0..n).map(|i| partition.clip_of(i)).collect();
        let mut maps = HashMap::new();
        for (i, &key) in sidecar.keyframe_of.iter().enumerate() {
            if key >= n || clip_of[key] != clip_of[i] {
                return Err(Error::Index(format!(
                    "keyframe {key} of frame {i} is not in the same clip"
                )));
            }
            let targets = tensor.slice0(i).iter().map(|&q| q as usize).collect();
            maps.insert((i, key), PositionMap::new(h, w, targets)?);
        }
        Ok(Self {
            grid_h: h,
            grid_w: w,
            clip_of,
            maps,
            adjacent: vec![None; n],
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    keyframe_of: Vec<usize>,
}

/// First cell of `dst_len` that samples source cell `src` under the floor mapping.
fn block_start(src: usize, src_len: usize, dst_len: usize) -> usize {
    (src * dst_len).div_ceil(src_len)
}

/// Rescales a position map from its grid to `out_h × out_w`.
///
/// Output cell `(r', c')` looks up the source cell it samples, follows `φ` there, and lands
/// on the matching cell inside the target's block, keeping its offset within the block.
/// Identity maps stay identities at any resolution, and every rescaled target samples the
/// source cell `φ` pointed to.
pub fn rescale_targets(map: &PositionMap, out_h: usize, out_w: usize) -> Vec<usize> {
    let (h, w) = (map.h(), map.w());
    if (h, w) == (out_h, out_w) {
        return map.targets().to_vec();
    }
    let axis = |dst: usize, target: usize, src_len: usize, dst_len: usize| {
        let src = nearest_source(dst, src_len, dst_len);
        let offset = dst - block_start(src, src_len, dst_len);
        let start = block_start(target, src_len, dst_len);
        let end = block_start(target + 1, src_len, dst_len).min(dst_len);
        (start + offset)
            .min(end.max(start + 1) - 1)
            .min(dst_len - 1)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        let sr = nearest_source(r, h, out_h);
        for c in 0..out_w {
            let sc = nearest_source(c, w, out_w);
            let q = map.targets()[sr * w + sc];
            let (qr, qc) = (q / w, q % w);
            out.push(axis(r, qr, h, out_h) * out_w + axis(c, qc, w, out_w));
        }
    }
    out
}

/// Gathers `output[target[p]]` for every `p` of a `tokens × channels` buffer.
fn gather(src: &[f32], targets: &[usize], channels: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(targets.len() * channels);
    for &q in targets {
        out.extend_from_slice(&src[q * channels..(q + 1) * channels]);
    }
    out
}

/// Spreads keyframe outputs (`h' × w' × c`, keyed by video frame index) to every frame.
///
/// Keyframes keep their output verbatim. A non-keyframe `i` whose clip keyframe at timestep
/// `t` is `j` takes, at each token `p`, the keyframe output at `φ_ij(p)`, with `φ` rescaled to
/// the output grid when it differs from the feature grid. Returns `n × h' × w' × c`.
pub fn propagate(
    keyframe_outputs: &BTreeMap<usize, Tensor>,
    correspondences: &CorrespondenceSet,
    t: usize,
    partition: &ClipPartition,
    schedule: &KeyframeSchedule,
) -> Result<Tensor> {
    let keys = schedule
        .schedule
        .get(t)
        .ok_or_else(|| Error::Index(format!("timestep {t} outside schedule")))?;
    let first = keys
        .iter()
        .enumerate()
        .find_map(|(clip, f)| keyframe_outputs.get(f).map(|x| (clip, x)));
    let shape = match first {
        Some((_, x)) if x.ndim() == 3 => x.shape().to_vec(),
        Some((_, x)) => {
            return Err(Error::Dimension(format!(
                "keyframe outputs must be h x w x c, got {:?}",
                x.shape()
            )))
        }
        None => {
            return Err(Error::MissingKeyframe {
                timestep: t,
                clip: 0,
                frame: keys[0],
            })
        }
    };
    for (clip, f) in keys.iter().enumerate() {
        match keyframe_outputs.get(f) {
            None => {
                return Err(Error::MissingKeyframe {
                    timestep: t,
                    clip,
                    frame: *f,
                })
            }
            Some(x) if x.shape() != shape.as_slice() => {
                return Err(Error::Dimension(format!(
                    "keyframe {f} output {:?} differs from {:?}",
                    x.shape(),
                    shape
                )))
            }
            Some(_) => {}
        }
    }
    let (oh, ow, c) = (shape[0], shape[1], shape[2]);
    let frames = (0..partition.n)
        .into_par_iter()
        .map(|i| {
            let clip = partition.clip_of(i);
            let key = keys[clip];
            let src = keyframe_outputs[&key].data();
            if i == key {
                return Ok(src.to_vec());
            }
            let (_, map) = correspondences.keyframe_map(i, t, schedule)?;
            Ok(gather(src, &rescale_targets(map, oh, ow), c))
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(vec![partition.n, oh, ow, c], frames.concat())
}
