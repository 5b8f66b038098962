//! Feature-space temporal consistency of an edited latent volume.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::ClipPartition;
use crate::propagation::{rescale_targets, CorrespondenceSet};
use crate::similarity::cosine_similarity;
use crate::tensor_store::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipConsistency {
    pub clip: usize,
    pub start: usize,
    pub len: usize,
    /// Mean matched-token similarity over the clip's adjacent pairs; `None` for one-frame clips.
    pub mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    /// Mean over all adjacent same-clip pairs of the pair's mean matched-token similarity.
    pub mean: Option<f64>,
    /// Smallest pair mean.
    pub min: Option<f64>,
    pub pairs: usize,
    pub per_clip: Vec<ClipConsistency>,
    /// Aggregate slimmed/full KV ratio over the run, filled in by the pipeline.
    pub kv_ratio: Option<f64>,
}

/// For every adjacent frame pair `(i-1, i)` of a clip, the mean over tokens `p` of
/// `CS(J_i[p], J_{i-1}[φ_{i,i-1}(p)])`, with `φ` rescaled to the output grid.
///
/// `edited` is `n × h × w × c`.
pub fn consistency_metrics(
    edited: &Tensor,
    correspondences: &CorrespondenceSet,
    partition: &ClipPartition,
) -> Result<ConsistencyReport> {
    if edited.ndim() != 4 || edited.shape()[0] != partition.n || correspondences.n() != partition.n
    {
        return Err(Error::Dimension(format!(
            "edited volume {:?} does not match {} frames",
            edited.shape(),
            partition.n
        )));
    }
    let (h, w, c) = (edited.shape()[1], edited.shape()[2], edited.shape()[3]);
    let token = |f: usize, p: usize| {
        let at = (f * h * w + p) * c;
        &edited.data()[at..at + c]
    };

    let mut per_clip = Vec::with_capacity(partition.num_clips());
    let mut pair_means = Vec::new();
    for (k, range) in partition.ranges().enumerate() {
        let mut clip_means = Vec::new();
        for i in range.start + 1..range.end {
            let map = correspondences
                .adjacent(i)
                .ok_or_else(|| Error::Index(format!("no adjacent correspondence for frame {i}")))?;
            let targets = rescale_targets(map, h, w);
            let mut sum = 0.0;
            for (p, &q) in targets.iter().enumerate() {
                sum += f64::from(cosine_similarity(token(i, p), token(i - 1, q))?);
            }
            clip_means.push(sum / targets.len() as f64);
        }
        per_clip.push(ClipConsistency {
            clip: k,
            start: range.start,
            len: range.len(),
            mean: mean(&clip_means),
        });
        pair_means.extend(clip_means);
    }
    Ok(ConsistencyReport {
        mean: mean(&pair_means),
        min: pair_means.iter().copied().reduce(f64::min),
        pairs: pair_means.len(),
        per_clip,
        kv_ratio: None,
    })
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::keyframes::KeyframeSchedule;
    use crate::propagation::precompute_correspondences;
    use crate::similarity::FeatureVolume;

    fn identity_correspondences(
        n: usize,
        h: usize,
        w: usize,
        part: &ClipPartition,
    ) -> CorrespondenceSet {
        // identical distinct-token frames give identity maps everywhere
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frame: Vec<f32> = (0..h * w * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = FeatureVolume::from_tensor(Tensor::new(vec![n, h, w, 4], frame.repeat(n)).unwrap())
            .unwrap();
        let sched = KeyframeSchedule {
            timesteps: 1,
            schedule: vec![part.starts.clone()],
        };
        precompute_correspondences(&f, part, &sched).unwrap()
    }

    #[test]
    fn identical_frames_score_one() {
        let part = ClipPartition::new(4, vec![0, 3]).unwrap();
        let corr = identity_correspondences(4, 2, 2, &part);
        let one: Vec<f32> = (0..12).map(|k| k as f32 + 1.0).collect();
        let edited = Tensor::new(vec![4, 2, 2, 3], one.repeat(4)).unwrap();
        let r = consistency_metrics(&edited, &corr, &part).unwrap();
        assert!((r.mean.unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(r.pairs, 2);
        assert_eq!(r.per_clip[1].mean, None);
    }

    #[test]
    fn antipodal_frames_score_minus_one() {
        let part = ClipPartition::single(2);
        let corr = identity_correspondences(2, 2, 2, &part);
        let f0: Vec<f32> = (0..8).map(|k| k as f32 - 3.5).collect();
        let f1: Vec<f32> = f0.iter().map(|x| -x).collect();
        let edited = Tensor::new(vec![2, 2, 2, 2], [f0, f1].concat()).unwrap();
        let r = consistency_metrics(&edited, &corr, &part).unwrap();
        assert!((r.mean.unwrap() + 1.0).abs() < 1e-6);
        assert!((r.min.unwrap() + 1.0).abs() < 1e-6);
    }
}
