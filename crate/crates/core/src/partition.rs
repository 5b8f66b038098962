//! Adaptive video partitioning: split a frame sequence into clips of similar content
//! from heatmap means and sliding-window means, plus the y–t diagnostic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::similarity::{Heatmap, HeatmapCache};
use crate::tensor_store::Tensor;

/// What happens to the frame that failed the similarity test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryMode {
    /// The failing frame closes the current clip; the next clip starts after it.
    #[default]
    Literal,
    /// The failing frame opens the next clip.
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartitionParams {
    /// Window side, in heatmap cells.
    pub window: usize,
    /// Window step, in heatmap cells.
    pub step: usize,
    pub mean_threshold: f64,
    pub window_threshold: f64,
    pub boundary: BoundaryMode,
}

impl Default for PartitionParams {
    fn default() -> Self {
        Self {
            window: 42,
            step: 21,
            mean_threshold: 0.75,
            window_threshold: 0.6,
            boundary: BoundaryMode::Literal,
        }
    }
}

impl PartitionParams {
    pub fn validate(&self) -> Result<()> {
        if self.step < 1 || self.step > self.window {
            return Err(Error::Config(format!(
                "window step must satisfy 1 <= step <= window, got step {} window {}",
                self.step, self.window
            )));
        }
        for (name, v) in [
            ("mean threshold", self.mean_threshold),
            ("window threshold", self.window_threshold),
        ] {
            if !(-1.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [-1, 1]")));
            }
        }
        Ok(())
    }
}

/// Ordered clip starts. `starts[0] == 0`, strictly increasing, all `< n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipPartition {
    pub n: usize,
    pub starts: Vec<usize>,
}

impl ClipPartition {
    pub fn new(n: usize, starts: Vec<usize>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("partition of zero frames".into()));
        }
        if starts.first() != Some(&0) {
            return Err(Error::Config(format!(
                "partition starts must begin with 0, got {starts:?}"
            )));
        }
        if starts.windows(2).any(|w| w[0] >= w[1]) || starts.iter().any(|&s| s >= n) {
            return Err(Error::Config(format!(
                "partition starts {starts:?} not strictly increasing below n = {n}"
            )));
        }
        Ok(Self { n, starts })
    }

    /// A single clip covering all frames.
    pub fn single(n: usize) -> Self {
        Self { n, starts: vec![0] }
    }

    pub fn num_clips(&self) -> usize {
        self.starts.len()
    }

    /// Half-open frame range `[start, end)` of clip `k`.
    pub fn clip_range(&self, k: usize) -> std::ops::Range<usize> {
        let end = self.starts.get(k + 1).copied().unwrap_or(self.n);
        self.starts[k]..end
    }

    pub fn clip_len(&self, k: usize) -> usize {
        self.clip_range(k).len()
    }

    /// Clip containing `frame`.
    pub fn clip_of(&self, frame: usize) -> usize {
        self.starts.partition_point(|&s| s <= frame) - 1
    }

    pub fn ranges(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        (0..self.num_clips()).map(|k| self.clip_range(k))
    }

    /// Boundary markers for rendering: every start except the leading 0.
    pub fn boundaries(&self) -> &[usize] {
        &self.starts[1..]
    }
}

/// Start offsets of windows of side `win` along an axis of length `len`.
/// Windows are placed at 0, step, 2·step, …; the last one is clamped to end at the edge.
fn window_offsets(len: usize, win: usize, step: usize) -> Vec<usize> {
    let mut offsets = Vec::new();
    let mut start = 0;
    loop {
        let placed = start.min(len - win);
        if offsets.last() != Some(&placed) {
            offsets.push(placed);
        }
        if start + win >= len {
            break;
        }
        start += step;
    }
    offsets
}

/// True iff every `l × l` window of the heatmap has mean ≥ `ws`.
/// Windows larger than the grid shrink to the grid along that axis.
pub fn window_check(heat: &Heatmap, l: usize, s: usize, ws: f64) -> bool {
    let (h, w) = (heat.h(), heat.w());
    let (lh, lw) = (l.clamp(1, h), l.clamp(1, w));
    let s = s.max(1);
    let vals = heat.values();

    // Summed-area table, (h+1) x (w+1).
    let mut sat = vec![0.0f64; (h + 1) * (w + 1)];
    for r in 0..h {
        let mut row = 0.0;
        for c in 0..w {
            row += f64::from(vals[r * w + c]);
            sat[(r + 1) * (w + 1) + c + 1] = sat[r * (w + 1) + c + 1] + row;
        }
    }
    let area = (lh * lw) as f64;
    let rows = window_offsets(h, lh, s);
    let cols = window_offsets(w, lw, s);
    rows.iter().all(|&r| {
        cols.iter().all(|&c| {
            let (r1, c1) = (r + lh, c + lw);
            let sum = sat[r1 * (w + 1) + c1] - sat[r * (w + 1) + c1] - sat[r1 * (w + 1) + c]
                + sat[r * (w + 1) + c];
            sum / area >= ws
        })
    })
}

/// Whether frames `i` and `j` belong together under `params`.
fn pair_passes(heat: &Heatmap, params: &PartitionParams) -> bool {
    heat.mean() >= params.mean_threshold
        && window_check(heat, params.window, params.step, params.window_threshold)
}

/// Splits frames `0..n` of the cached feature volume into clips.
///
/// Walks `j` forward from the current clip start `i`; when the pair `(i, j)` fails the
/// mean or window test, `i` is recorded and the next clip begins at `j + 1`
/// ([`BoundaryMode::Literal`]) or `j` ([`BoundaryMode::Strict`]). The trailing `i` is
/// recorded after the loop so every frame belongs to a clip.
pub fn adaptive_partition(cache: &HeatmapCache, params: &PartitionParams) -> Result<ClipPartition> {
    params.validate()?;
    let n = cache.features().n();
    let mut starts = Vec::new();
    let (mut i, mut j) = (0usize, 1usize);
    while j < n {
        let heat = cache.lookup(i, j)?;
        if pair_passes(&heat, params) {
            j += 1;
        } else {
            starts.push(i);
            i = match params.boundary {
                BoundaryMode::Literal => j + 1,
                BoundaryMode::Strict => j,
            };
            j = i + 1;
        }
    }
    starts.push(i);
    starts.retain(|&s| s < n);
    debug_assert_eq!(starts.first(), Some(&0));
    ClipPartition::new(n, starts)
}

/// Centre column of every frame laid out left to right, plus the clip boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct YtPlot {
    /// `h × n × c`.
    pub image: Tensor,
    pub boundaries: Vec<usize>,
}

/// Builds the y–t diagnostic from an `n × h × w × c` tensor by taking column `w / 2` of each frame.
pub fn yt_diagnostic(frames: &Tensor, partition: &ClipPartition) -> Result<YtPlot> {
    if frames.ndim() != 4 {
        return Err(Error::Dimension(format!(
            "y-t plot needs n x h x w x c input, got {:?}",
            frames.shape()
        )));
    }
    let [n, h, w, c] = [
        frames.shape()[0],
        frames.shape()[1],
        frames.shape()[2],
        frames.shape()[3],
    ];
    if partition.n != n {
        return Err(Error::Dimension(format!(
            "partition covers {} frames, tensor has {n}",
            partition.n
        )));
    }
    let col = w / 2;
    let data = frames.data();
    let mut out = Vec::with_capacity(h * n * c);
    for r in 0..h {
        for f in 0..n {
            let at = ((f * h + r) * w + col) * c;
            out.extend_from_slice(&data[at..at + c]);
        }
    }
    Ok(YtPlot {
        image: Tensor::new(vec![h, n, c], out)?,
        boundaries: partition.boundaries().to_vec(),
    })
}
