//! Per-timestep keyframe sampling: one frame per clip per denoising step.
//!
//! Draws are counter-based so any implementation reproduces the same schedule:
//!
//! ```text
//! x = splitmix64(splitmix64(splitmix64(seed) ^ t) ^ k)
//! offset = (x · clip_len) >> 64          // 128-bit product, Lemire multiply-shift
//! frame = starts[k] + offset
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::ClipPartition;

/// SplitMix64 finalizer applied to `z + golden gamma`.
#[inline]
pub fn splitmix64(z: u64) -> u64 {
    let mut z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit draw keyed by `(seed, t, k)`.
#[inline]
pub fn keyed_draw(seed: u64, t: u64, k: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ t) ^ k)
}

/// Maps a uniform 64-bit value into `[0, bound)`.
#[inline]
pub fn bounded(x: u64, bound: u64) -> u64 {
    ((u128::from(x) * u128::from(bound)) >> 64) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyframeMode {
    /// Uniform counter-based draw per (timestep, clip).
    #[default]
    Uniform,
    /// Always the clip's first frame.
    Fixed,
}

/// `schedule[t][k]` is the keyframe of clip `k` at timestep `t`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyframeSchedule {
    #[serde(rename = "T")]
    pub timesteps: usize,
    pub schedule: Vec<Vec<usize>>,
}

impl KeyframeSchedule {
    pub fn at(&self, t: usize) -> &[usize] {
        &self.schedule[t]
    }

    pub fn num_clips(&self) -> usize {
        self.schedule.first().map_or(0, Vec::len)
    }

    /// Checks that the schedule fits `partition`: right clip count, every entry inside its clip.
    pub fn validate(&self, partition: &ClipPartition) -> Result<()> {
        if self.schedule.len() != self.timesteps || self.timesteps == 0 {
            return Err(Error::Config(format!(
                "schedule declares T = {} but holds {} timesteps",
                self.timesteps,
                self.schedule.len()
            )));
        }
        for (t, row) in self.schedule.iter().enumerate() {
            if row.len() != partition.num_clips() {
                return Err(Error::Config(format!(
                    "timestep {t} has {} keyframes for {} clips",
                    row.len(),
                    partition.num_clips()
                )));
            }
            for (k, &f) in row.iter().enumerate() {
                if !partition.clip_range(k).contains(&f) {
                    return Err(Error::Config(format!(
                        "timestep {t}: keyframe {f} outside clip {k} {:?}",
                        partition.clip_range(k)
                    )));
                }
            }
        }
        Ok(())
    }

    /// Every distinct keyframe ever scheduled for clip `k`, ascending.
    pub fn candidates(&self, k: usize) -> Vec<usize> {
        let mut c: Vec<usize> = self.schedule.iter().map(|row| row[k]).collect();
        c.sort_unstable();
        c.dedup();
        c
    }
}

pub fn select_keyframes(
    partition: &ClipPartition,
    timesteps: usize,
    seed: u64,
    mode: KeyframeMode,
) -> Result<KeyframeSchedule> {
    if timesteps == 0 {
        return Err(Error::Config("keyframe schedule needs T >= 1".into()));
    }
    if partition.starts.is_empty() {
        return Err(Error::Config(
            "cannot select keyframes of an empty partition".into(),
        ));
    }
    let schedule = (0..timesteps)
        .map(|t| {
            partition
                .ranges()
                .enumerate()
                .map(|(k, range)| match mode {
                    KeyframeMode::Fixed => range.start,
                    KeyframeMode::Uniform => {
                        let x = keyed_draw(seed, t as u64, k as u64);
                        range.start + bounded(x, range.len() as u64) as usize
                    }
                })
                .collect()
        })
        .collect();
    Ok(KeyframeSchedule {
        timesteps,
        schedule,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_vector() {
        // First three outputs of the reference SplitMix64 generator seeded with 0.
        let mut state = 0u64;
        let mut next = || {
            let out = splitmix64(state);
            state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
            out
        };
        assert_eq!(next(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(next(), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(next(), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn bounded_stays_in_range() {
        assert_eq!(bounded(u64::MAX, 10), 9);
        assert_eq!(bounded(0, 10), 0);
        assert_eq!(bounded(1 << 63, 10), 5);
    }

    #[test]
    fn length_one_clips_are_forced() {
        let p = ClipPartition::new(4, vec![0, 1, 2, 3]).unwrap();
        let s = select_keyframes(&p, 5, 99, KeyframeMode::Uniform).unwrap();
        assert!(s.schedule.iter().all(|row| row == &p.starts));
    }

    #[test]
    fn same_seed_same_schedule_and_seeds_differ() {
        let p = ClipPartition::single(10);
        let a = select_keyframes(&p, 50, 1, KeyframeMode::Uniform).unwrap();
        let b = select_keyframes(&p, 50, 1, KeyframeMode::Uniform).unwrap();
        let c = select_keyframes(&p, 50, 2, KeyframeMode::Uniform).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn range_containment_example() {
        let p = ClipPartition::new(8, vec![0, 5]).unwrap();
        let s = select_keyframes(&p, 2, 7, KeyframeMode::Uniform).unwrap();
        s.validate(&p).unwrap();
        for row in &s.schedule {
            assert!((0..5).contains(&row[0]));
            assert!((5..8).contains(&row[1]));
        }
    }

    #[test]
    fn fixed_mode_picks_clip_start() {
        let p = ClipPartition::new(9, vec![0, 4, 6]).unwrap();
        let s = select_keyframes(&p, 3, 7, KeyframeMode::Fixed).unwrap();
        assert!(s.schedule.iter().all(|row| row == &[0, 4, 6]));
    }

    #[test]
    fn zero_timesteps_rejected() {
        assert!(select_keyframes(&ClipPartition::single(3), 0, 0, KeyframeMode::Uniform).is_err());
    }

    #[test]
    fn json_shape() {
        let p = ClipPartition::new(3, vec![0, 2]).unwrap();
        let s = select_keyframes(&p, 1, 0, KeyframeMode::Fixed).unwrap();
        assert_eq!(
            serde_json::to_string(&s).unwrap(),
            r#"{"T":1,"schedule":[[0,2]]}"#
        );
    }

    /// For clip length L and T = 4L, each frame is expected to be missed with probability
    /// (1 - 1/L)^{4L} < e^{-4} ≈ 1.8%. Across 100 seeds we require every frame to be
    /// covered in at least 95 of them.
    #[test]
    fn coverage_over_many_seeds() {
        for len in [2usize, 5, 10, 16] {
            let p = ClipPartition::single(len);
            let t = 4 * len;
            let mut covered = vec![0usize; len];
            for seed in 0..100u64 {
                let s = select_keyframes(&p, t, seed, KeyframeMode::Uniform).unwrap();
                let mut seen = vec![false; len];
                for row in &s.schedule {
                    seen[row[0]] = true;
                }
                for (f, hit) in seen.into_iter().enumerate() {
                    covered[f] += usize::from(hit);
                }
            }
            assert!(
                covered.iter().all(|&c| c >= 95),
                "clip length {len}: per-frame coverage {covered:?}"
            );
        }
    }
}
