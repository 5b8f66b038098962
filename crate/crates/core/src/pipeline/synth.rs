//! Synthetic feature volumes with known scene boundaries and token motion.
//!
//! Each scene owns a disjoint block of `d / scenes` feature channels, so tokens of different
//! scenes are exactly orthogonal. Every frame shows its scene's base token grid under a
//! per-frame permutation, plus in-subspace noise of norm at most `noise · sqrt((1 - floor) / 2)`,
//! which keeps every within-scene heatmap cell at or above `floor`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::similarity::FeatureVolume;
use crate::tensor_store::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Motion {
    Identity,
    /// Frame `m` of a scene shows base token `((r + m·rows) mod h, (c + m·cols) mod w)` at `(r, c)`.
    CyclicShift {
        rows: usize,
        cols: usize,
    },
    /// The grid is tiled by `block × block` squares; frame `m` shows base block `(b + m) mod B` at block `b`.
    BlockPermutation {
        block: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub scene_lengths: Vec<usize>,
    /// Lower bound on every within-scene heatmap cell.
    pub floor: f64,
    /// Upper bound on any cross-scene token similarity.
    pub ceiling: f64,
    pub motion: Motion,
    /// Noise magnitude as a fraction in `[0, 1]` of the largest norm that keeps `floor`.
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    /// Scenes of the given lengths on an `h × w × d` grid, identity motion, no noise.
    pub fn scenes(scene_lengths: Vec<usize>, h: usize, w: usize, d: usize, seed: u64) -> Self {
        Self {
            n: scene_lengths.iter().sum(),
            h,
            w,
            d,
            scene_lengths,
            floor: 0.9,
            ceiling: 0.2,
            motion: Motion::Identity,
            noise: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Infeasible(msg));
        if self.n == 0 || self.h == 0 || self.w == 0 || self.d == 0 {
            return bad(format!(
                "all dims must be >= 1, got n={} h={} w={} d={}",
                self.n, self.h, self.w, self.d
            ));
        }
        if self.scene_lengths.is_empty() || self.scene_lengths.contains(&0) {
            return bad("scene lengths must be non-empty and positive".into());
        }
        if self.scene_lengths.iter().sum::<usize>() != self.n {
            return bad(format!(
                "scene lengths {:?} do not sum to n = {}",
                self.scene_lengths, self.n
            ));
        }
        if self.floor <= self.ceiling
            || self.floor.is_nan()
            || self.ceiling.is_nan()
            || self.floor > 1.0
            || self.ceiling < -1.0
        {
            return bad(format!(
                "need -1 <= ceiling < floor <= 1, got ceiling {} floor {}",
                self.ceiling, self.floor
            ));
        }
        if self.ceiling < 0.0 && self.scene_lengths.len() > 1 {
            return bad(format!(
                "cross-scene similarity is 0 by construction, ceiling {} is unreachable",
                self.ceiling
            ));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad(format!("noise fraction {} outside [0, 1]", self.noise));
        }
        if self.subspace() < 2 {
            return bad(format!(
                "{} scenes need at least {} channels, d = {}",
                self.scene_lengths.len(),
                2 * self.scene_lengths.len(),
                self.d
            ));
        }
        if let Motion::BlockPermutation { block } = self.motion {
            if block == 0 || !self.h.is_multiple_of(block) || !self.w.is_multiple_of(block) {
                return bad(format!(
                    "block size {block} must divide the {}x{} grid",
                    self.h, self.w
                ));
            }
        }
        Ok(())
    }

    fn subspace(&self) -> usize {
        self.d / self.scene_lengths.len()
    }

    /// `σ_m`: base token shown at each position in frame `m` of a scene.
    fn permutation(&self, m: usize) -> Vec<usize> {
        let (h, w) = (self.h, self.w);
        (0..h * w)
            .map(|p| {
                let (r, c) = (p / w, p % w);
                match self.motion {
                    Motion::Identity => p,
                    Motion::CyclicShift { rows, cols } => {
                        ((r + m * rows) % h) * w + (c + m * cols) % w
                    }
                    Motion::BlockPermutation { block } => {
                        let bw = w / block;
                        let nb = (h / block) * bw;
                        let b = (r / block) * bw + c / block;
                        let src = (b + m) % nb;
                        (src / bw * block + r % block) * w + src % bw * block + c % block
                    }
                }
            })
            .collect()
    }
}

/// Generated features plus the exact ground truth they were built from.
#[derive(Debug, Clone)]
pub struct SyntheticVideo {
    pub features: FeatureVolume,
    /// First frame of every scene, starting with 0.
    pub scene_starts: Vec<usize>,
    pub scene_of: Vec<usize>,
    /// `permutations[f][p]`: base token index shown at position `p` of frame `f`.
    pub permutations: Vec<Vec<usize>>,
}

impl SyntheticVideo {
    /// True correspondence `φ_ij` between two frames of one scene.
    pub fn ground_truth_map(&self, i: usize, j: usize) -> Option<Vec<usize>> {
        if self.scene_of[i] != self.scene_of[j] {
            return None;
        }
        let sj = &self.permutations[j];
        let mut inverse = vec![0; sj.len()];
        for (q, &base) in sj.iter().enumerate() {
            inverse[base] = q;
        }
        Some(self.permutations[i].iter().map(|&b| inverse[b]).collect())
    }

    /// Interior scene boundaries (scene starts after 0).
    pub fn boundaries(&self) -> &[usize] {
        &self.scene_starts[1..]
    }
}

fn unit_in_subspace(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-3 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

pub fn synth_video(spec: &SyntheticSpec) -> Result<SyntheticVideo> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (hw, d, k) = (spec.h * spec.w, spec.d, spec.subspace());
    let max_noise = spec.noise * ((1.0 - spec.floor) / 2.0).sqrt();

    let mut data = vec![0.0f32; spec.n * hw * d];
    let mut scene_starts = Vec::new();
    let mut scene_of = Vec::with_capacity(spec.n);
    let mut permutations = Vec::with_capacity(spec.n);
    let mut frame = 0;
    for (s, &len) in spec.scene_lengths.iter().enumerate() {
        scene_starts.push(frame);
        let offset = s * k;
        let base: Vec<Vec<f64>> = (0..hw).map(|_| unit_in_subspace(&mut rng, k)).collect();
        for m in 0..len {
            let perm = spec.permutation(m);
            for (p, &b) in perm.iter().enumerate() {
                let mut tok = base[b].clone();
                if max_noise > 0.0 {
                    let dir = unit_in_subspace(&mut rng, k);
                    let mag = rng.gen_range(0.0..=max_noise);
                    for (t, e) in tok.iter_mut().zip(dir) {
                        *t += mag * e;
                    }
                }
                let at = (frame * hw + p) * d + offset;
                for (slot, v) in data[at..at + k].iter_mut().zip(tok) {
                    *slot = v as f32;
                }
            }
            scene_of.push(s);
            permutations.push(perm);
            frame += 1;
        }
    }
    let features = FeatureVolume::from_tensor(Tensor::new(vec![spec.n, spec.h, spec.w, d], data)?)?;
    Ok(SyntheticVideo {
        features,
        scene_starts,
        scene_of,
        permutations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    use crate::partition::{adaptive_partition, PartitionParams};
    use crate::similarity::{correspondence_map, heatmap, HeatmapCache};

    fn small_params() -> PartitionParams {
        PartitionParams {
            window: 2,
            step: 1,
            ..Default::default()
        }
    }

    #[test]
    fn single_static_scene_is_one_clip() {
        let spec = SyntheticSpec::scenes(vec![8], 3, 3, 8, 1);
        let video = synth_video(&spec).unwrap();
        let f = &video.features;
        assert!((1..8).all(|i| f.frame(i) == f.frame(0)));
        let cache = HeatmapCache::new(Arc::new(video.features));
        assert_eq!(
            adaptive_partition(&cache, &small_params()).unwrap().starts,
            vec![0]
        );
    }

    #[test]
    fn two_scenes_boundary_near_truth() {
        let mut spec = SyntheticSpec::scenes(vec![10, 10], 4, 4, 64, 3);
        spec.noise = 1.0;
        let video = synth_video(&spec).unwrap();
        let cache = HeatmapCache::new(Arc::new(video.features.clone()));
        let starts = adaptive_partition(&cache, &small_params()).unwrap().starts;
        assert_eq!(starts.len(), 2);
        assert!(starts[1].abs_diff(10) <= 1, "{starts:?}");
    }

    #[test]
    fn floor_and_ceiling_hold() {
        let mut spec = SyntheticSpec::scenes(vec![4, 4], 3, 3, 16, 9);
        spec.noise = 1.0;
        spec.motion = Motion::CyclicShift { rows: 0, cols: 1 };
        let video = synth_video(&spec).unwrap();
        let f = &video.features;
        for i in 0..8 {
            for j in 0..8 {
                let heat = heatmap(f, i, j).unwrap();
                if video.scene_of[i] == video.scene_of[j] {
                    assert!(heat
                        .values()
                        .iter()
                        .all(|&v| f64::from(v) >= spec.floor - 1e-6));
                } else {
                    assert!(heat.values().iter().all(|&v| f64::from(v) <= spec.ceiling));
                }
            }
        }
    }

    #[test]
    fn cyclic_shift_recovered_exactly() {
        let mut spec = SyntheticSpec::scenes(vec![6], 4, 4, 16, 5);
        spec.motion = Motion::CyclicShift { rows: 1, cols: 1 };
        let video = synth_video(&spec).unwrap();
        for i in 1..6 {
            let truth = video.ground_truth_map(i, i - 1).unwrap();
            let got = correspondence_map(&video.features, i, i - 1).unwrap();
            assert_eq!(got.targets(), &truth[..]);
        }
    }

    #[test]
    fn block_permutation_is_a_permutation() {
        let mut spec = SyntheticSpec::scenes(vec![5], 4, 6, 8, 0);
        spec.motion = Motion::BlockPermutation { block: 2 };
        for m in 0..5 {
            let mut p = spec.permutation(m);
            p.sort_unstable();
            assert_eq!(p, (0..24).collect::<Vec<_>>());
        }
        assert_eq!(spec.permutation(6), spec.permutation(0));
    }

    #[test]
    fn infeasible_specs_rejected() {
        let spec = SyntheticSpec::scenes(vec![2, 2, 2], 2, 2, 5, 0);
        assert!(matches!(synth_video(&spec), Err(Error::Infeasible(_))));
        let mut spec = SyntheticSpec::scenes(vec![2, 2], 2, 2, 8, 0);
        spec.floor = 0.1;
        spec.ceiling = 0.2;
        assert!(synth_video(&spec).is_err());
        let mut spec = SyntheticSpec::scenes(vec![2, 2], 2, 2, 8, 0);
        spec.n = 5;
        assert!(synth_video(&spec).is_err());
        let mut spec = SyntheticSpec::scenes(vec![2], 3, 3, 8, 0);
        spec.motion = Motion::BlockPermutation { block: 2 };
        assert!(synth_video(&spec).is_err());
    }
}
