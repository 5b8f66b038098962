//! End-to-end editing loop: partition → keyframe schedule → one-shot correspondences →
//! per timestep (token selection, keyframe attention, propagation, latent update) → metrics.

pub mod denoiser;
pub mod metrics;
pub mod synth;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_cost, select_kv_tokens, CostReport, KvMeter, TokenSelection};
use crate::error::{Error, Result};
use crate::keyframes::{select_keyframes, KeyframeMode, KeyframeSchedule};
use crate::partition::{adaptive_partition, yt_diagnostic, ClipPartition, PartitionParams, YtPlot};
use crate::propagation::{precompute_correspondences, propagate, CorrespondenceSet};
use crate::similarity::{FeatureVolume, HeatmapCache};
use crate::tensor_store::{tensor_read, tensor_write, Tensor};

pub use denoiser::{
    keyframe_attention, latent_delta, stub_denoiser, AttentionMode, Denoiser, DenoiserSpec,
    LayerSpec, StubDenoiser,
};
pub use metrics::{consistency_metrics, ClipConsistency, ConsistencyReport};
pub use synth::{synth_video, Motion, SyntheticSpec, SyntheticVideo};

/// Per-timestep latents, `steps × n × (h·w) × c`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVolume {
    values: Tensor,
    h: usize,
    w: usize,
}

impl LatentVolume {
    /// Accepts `steps × n × h × w × c` or a single step `n × h × w × c`.
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        let s = t.shape().to_vec();
        let (steps, n, h, w, c) = match s.len() {
            5 => (s[0], s[1], s[2], s[3], s[4]),
            4 => (1, s[0], s[1], s[2], s[3]),
            _ => {
                return Err(Error::Dimension(format!(
                    "latents must be [steps x] n x h x w x c, got {s:?}"
                )))
            }
        };
        if !t.is_finite() {
            return Err(Error::Dimension("latents contain non-finite values".into()));
        }
        Ok(Self {
            values: t.reshape(vec![steps, n, h * w, c])?,
            h,
            w,
        })
    }

    /// Uniform `[-1, 1)` latents from a seeded ChaCha stream.
    pub fn synthesize(n: usize, h: usize, w: usize, c: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::from_fn(vec![1, n, h * w, c], |_| rng.gen_range(-1.0..1.0))?;
        Ok(Self { values: t, h, w })
    }

    pub fn steps(&self) -> usize {
        self.values.shape()[0]
    }
    pub fn n(&self) -> usize {
        self.values.shape()[1]
    }
    pub fn grid(&self) -> (usize, usize) {
        (self.h, self.w)
    }
    pub fn channels(&self) -> usize {
        self.values.shape()[3]
    }

    /// Latents the editing loop starts from (step 0), `n × (h·w) × c`.
    pub fn initial(&self) -> Result<Tensor> {
        self.values.index0(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentSpec {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
}

impl Default for LatentSpec {
    fn default() -> Self {
        Self {
            h: 16,
            w: 16,
            channels: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// AFTN feature volume `n × h × w × d`. Mutually exclusive with `synthetic`.
    pub features: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
    /// AFTN latents; synthesized from `seed` and `latent` when absent.
    pub latents: Option<PathBuf>,
    pub latent: LatentSpec,
    pub partition: PartitionParams,
    pub timesteps: usize,
    pub seed: u64,
    pub keyframe_mode: KeyframeMode,
    pub budget_frames: usize,
    pub denoiser: DenoiserSpec,
    pub attention: AttentionMode,
    /// Propagate to non-keyframes every `propagation_stride` timesteps.
    pub propagation_stride: usize,
    pub heatmap_cache_capacity: Option<usize>,
    /// Emit the y–t diagnostic of the source features.
    pub yt: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            features: None,
            synthetic: None,
            latents: None,
            latent: LatentSpec::default(),
            partition: PartitionParams::default(),
            timesteps: 50,
            seed: 0,
            keyframe_mode: KeyframeMode::Uniform,
            budget_frames: crate::attention::DEFAULT_BUDGET_FRAMES,
            denoiser: DenoiserSpec::default(),
            attention: AttentionMode::Slimmed,
            propagation_stride: 1,
            heatmap_cache_capacity: None,
            yt: false,
        }
    }
}

impl PipelineConfig {
    /// Reads TOML (`.toml`) or JSON (anything else).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.partition.validate()?;
        if self.timesteps == 0 {
            return Err(Error::Config("timesteps must be >= 1".into()));
        }
        if self.budget_frames == 0 {
            return Err(Error::Config("budget_frames must be >= 1".into()));
        }
        if self.propagation_stride == 0 {
            return Err(Error::Config("propagation_stride must be >= 1".into()));
        }
        match (&self.features, &self.synthetic) {
            (Some(_), Some(_)) => Err(Error::Config(
                "give either `features` or `synthetic`, not both".into(),
            )),
            (None, None) => Err(Error::Config(
                "one of `features` or `synthetic` is required".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Cost of one timestep: closed-form accounting plus what the kernels actually touched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestepCost {
    pub t: usize,
    pub keyframes: Vec<usize>,
    pub cost: CostReport,
    /// KV tokens gathered by the attention calls of this timestep.
    pub kv_tokens_attended: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvStats {
    /// Largest KV buffer, in tokens, materialized by a single attention call.
    pub peak_tokens: usize,
    /// Closed-form bound on that buffer: `max over layers of min(M, budget)·h'·w'`.
    pub bound_tokens: usize,
    pub total_tokens: u64,
    pub calls: u64,
}

/// JSON-serializable summary of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub n: usize,
    pub clips: usize,
    pub timesteps: usize,
    pub attention: AttentionMode,
    pub costs: Vec<TimestepCost>,
    pub total_cost: CostReport,
    pub kv: KvStats,
    pub consistency: ConsistencyReport,
    pub heatmaps_computed: usize,
    pub correspondence_maps: usize,
    pub correspondence_indices: usize,
}

pub struct PipelineOutput {
    /// Edited latents `n × h × w × c`.
    pub edited: Tensor,
    pub partition: ClipPartition,
    pub schedule: KeyframeSchedule,
    pub report: RunReport,
    pub yt: Option<YtPlot>,
}

impl PipelineOutput {
    /// Writes `edited.aftn`, `report.json`, `partition.json`, `keyframes.json` and,
    /// when present, `yt.aftn` with `yt.json`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        tensor_write(&self.edited, dir.join("edited.aftn"))?;
        write_json(dir.join("report.json"), &self.report)?;
        write_json(dir.join("partition.json"), &self.partition)?;
        write_json(dir.join("keyframes.json"), &self.schedule)?;
        if let Some(yt) = &self.yt {
            tensor_write(&yt.image, dir.join("yt.aftn"))?;
            write_json(
                dir.join("yt.json"),
                &serde_json::json!({ "boundaries": yt.boundaries }),
            )?;
        }
        Ok(())
    }
}

pub fn write_json(path: impl AsRef<Path>, value: &impl Serialize) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })
}

/// Loads or synthesizes the inputs named by `config`, then runs [`run_pipeline_on`].
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineOutput> {
    config.validate()?;
    let features = match (&config.features, &config.synthetic) {
        (Some(path), _) => tensor_read(path)
            .and_then(FeatureVolume::from_tensor)
            .map_err(|e| e.in_stage("load", format!("features {}", path.display())))?,
        (None, Some(spec)) => {
            synth_video(spec)
                .map_err(|e| e.in_stage("load", "synthetic features"))?
                .features
        }
        (None, None) => unreachable!("validated above"),
    };
    let latents = match &config.latents {
        Some(path) => tensor_read(path)
            .and_then(LatentVolume::from_tensor)
            .map_err(|e| e.in_stage("load", format!("latents {}", path.display())))?,
        None => {
            let l = config.latent;
            LatentVolume::synthesize(features.n(), l.h, l.w, l.channels, config.seed)
                .map_err(|e| e.in_stage("load", "synthetic latents"))?
        }
    };
    run_pipeline_on(features, &latents, config)
}

/// Runs the editing loop on in-memory inputs.
pub fn run_pipeline_on(
    features: FeatureVolume,
    latents: &LatentVolume,
    config: &PipelineConfig,
) -> Result<PipelineOutput> {
    config.partition.validate()?;
    let n = features.n();
    if latents.n() != n {
        return Err(
            Error::Dimension(format!("latents hold {} frames, features {n}", latents.n()))
                .in_stage("load", "frame counts"),
        );
    }
    let features = Arc::new(features);
    let cache = HeatmapCache::with_capacity(Arc::clone(&features), config.heatmap_cache_capacity);

    let partition = adaptive_partition(&cache, &config.partition)
        .map_err(|e| e.in_stage("partition", format!("{n} frames")))?;
    let schedule = select_keyframes(
        &partition,
        config.timesteps,
        config.seed,
        config.keyframe_mode,
    )
    .map_err(|e| e.in_stage("keyframes", format!("{} clips", partition.num_clips())))?;
    let correspondences = precompute_correspondences(&features, &partition, &schedule)
        .map_err(|e| e.in_stage("correspondences", "precompute"))?;

    let denoiser = StubDenoiser::new(&config.denoiser, latents.channels())
        .map_err(|e| e.in_stage("denoiser", "construction"))?;
    let grid = latents.grid();
    let (tokens, c) = (grid.0 * grid.1, latents.channels());
    let m = partition.num_clips();
    let meter = KvMeter::new();
    let mut state = latents.initial()?.into_data();

    let mut costs = Vec::with_capacity(config.timesteps);
    for t in 0..config.timesteps {
        let keys = schedule.at(t).to_vec();
        let selections: Vec<TokenSelection> = match config.attention {
            AttentionMode::FullEsa => Vec::new(),
            AttentionMode::Slimmed => (0..m)
                .into_par_iter()
                .map(|q| select_kv_tokens(q, &keys, &cache, config.budget_frames))
                .collect::<Result<_>>()
                .map_err(|e| e.in_stage("selection", format!("timestep {t}")))?,
        };
        let propagate_now = t % config.propagation_stride == 0;
        let before = meter.total_tokens();

        for layer in 0..denoiser.num_layers() {
            let key_latents: Vec<f32> = keys
                .iter()
                .flat_map(|&f| state[f * tokens * c..(f + 1) * tokens * c].iter().copied())
                .collect();
            let key_latents = Tensor::new(vec![m, tokens, c], key_latents)?;
            let outputs = keyframe_attention(
                &denoiser,
                layer,
                &key_latents,
                grid,
                &selections,
                config.attention,
                Some(&meter),
            )
            .map_err(|e| e.in_stage("denoise", format!("timestep {t} layer {layer}")))?;

            if propagate_now {
                let by_frame: BTreeMap<usize, Tensor> = keys.iter().copied().zip(outputs).collect();
                let spread = propagate(&by_frame, &correspondences, t, &partition, &schedule)
                    .map_err(|e| e.in_stage("propagate", format!("timestep {t} layer {layer}")))?;
                state
                    .par_chunks_mut(tokens * c)
                    .enumerate()
                    .for_each(|(i, frame)| {
                        let delta = latent_delta(&denoiser, layer, spread.slice0(i), grid, c);
                        frame.iter_mut().zip(delta).for_each(|(x, dx)| *x += dx);
                    });
            } else {
                for (&f, out) in keys.iter().zip(&outputs) {
                    let delta = latent_delta(&denoiser, layer, out.data(), grid, c);
                    state[f * tokens * c..(f + 1) * tokens * c]
                        .iter_mut()
                        .zip(delta)
                        .for_each(|(x, dx)| *x += dx);
                }
            }
        }

        costs.push(TimestepCost {
            t,
            keyframes: keys,
            cost: timestep_cost(&denoiser, m, config)?,
            kv_tokens_attended: meter.total_tokens() - before,
        });
    }

    let edited = Tensor::new(vec![n, grid.0, grid.1, c], state)?;
    let mut consistency = consistency_metrics(&edited, &correspondences, &partition)
        .map_err(|e| e.in_stage("metrics", "consistency"))?;
    let mut total_cost = CostReport::default();
    for tc in &costs {
        total_cost.accumulate(&tc.cost);
    }
    consistency.kv_ratio = (total_cost.kv_tokens_full > 0).then_some(total_cost.ratio);

    let yt = if config.yt {
        Some(
            yt_diagnostic(features.tensor(), &partition)
                .map_err(|e| e.in_stage("yt", "diagnostic"))?,
        )
    } else {
        None
    };

    let report = RunReport {
        n,
        clips: m,
        timesteps: config.timesteps,
        attention: config.attention,
        costs,
        total_cost,
        kv: KvStats {
            peak_tokens: meter.peak_tokens(),
            bound_tokens: kv_bound(&denoiser, m, config),
            total_tokens: meter.total_tokens(),
            calls: meter.calls(),
        },
        consistency,
        heatmaps_computed: cache.computed(),
        correspondence_maps: correspondences.num_maps(),
        correspondence_indices: correspondences.index_count(),
    };
    Ok(PipelineOutput {
        edited,
        partition,
        schedule,
        report,
        yt,
    })
}

fn effective_budget(m: usize, config: &PipelineConfig) -> usize {
    match config.attention {
        AttentionMode::Slimmed => config.budget_frames,
        AttentionMode::FullEsa => m,
    }
}

/// Closed-form cost of one timestep: every keyframe queries once per layer.
pub fn timestep_cost(
    denoiser: &dyn Denoiser,
    m: usize,
    config: &PipelineConfig,
) -> Result<CostReport> {
    let mut total = CostReport::default();
    let budget = effective_budget(m, config);
    for layer in 0..denoiser.num_layers() {
        let (lh, lw) = denoiser.layer_grid(layer);
        let per_query = attention_cost(
            m,
            lh * lw,
            budget,
            config.denoiser.d_head,
            config.denoiser.heads,
        )?;
        for _ in 0..m {
            total.accumulate(&per_query);
        }
    }
    Ok(total)
}

fn kv_bound(denoiser: &dyn Denoiser, m: usize, config: &PipelineConfig) -> usize {
    let frames = m.min(effective_budget(m, config));
    (0..denoiser.num_layers())
        .map(|l| {
            let (h, w) = denoiser.layer_grid(l);
            frames * h * w
        })
        .max()
        .unwrap_or(0)
}

/// Correspondences for an existing partition and schedule, used by the `metrics` command.
pub fn correspondences_for(
    features: &FeatureVolume,
    partition: &ClipPartition,
    schedule: &KeyframeSchedule,
) -> Result<CorrespondenceSet> {
    precompute_correspondences(features, partition, schedule)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(spec: SyntheticSpec) -> PipelineConfig {
        PipelineConfig {
            synthetic: Some(spec),
            latent: LatentSpec {
                h: 2,
                w: 2,
                channels: 3,
            },
            partition: PartitionParams {
                window: 2,
                step: 1,
                ..Default::default()
            },
            timesteps: 3,
            denoiser: DenoiserSpec {
                layers: vec![LayerSpec { h: 2, w: 2 }, LayerSpec { h: 4, w: 4 }],
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(PipelineConfig::default().validate().is_err());
        let mut cfg = small_config(SyntheticSpec::scenes(vec![3], 2, 2, 4, 0));
        assert!(cfg.validate().is_ok());
        cfg.features = Some("x.aftn".into());
        assert!(cfg.validate().unwrap_err().is_config());
        let mut cfg = small_config(SyntheticSpec::scenes(vec![3], 2, 2, 4, 0));
        cfg.timesteps = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_defaults_follow_reported_setup() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.timesteps, 50);
        assert_eq!(cfg.budget_frames, 14);
        assert_eq!(cfg.partition.mean_threshold, 0.75);
        assert_eq!(cfg.partition.window_threshold, 0.6);
        assert_eq!((cfg.partition.window, cfg.partition.step), (42, 21));
    }

    #[test]
    fn config_parses_toml_and_json() {
        let dir = tempfile::tempdir().unwrap();
        let toml_path = dir.path().join("c.toml");
        std::fs::write(
            &toml_path,
            "timesteps = 4\nseed = 9\n[synthetic]\nn = 2\nh = 2\nw = 2\nd = 4\nscene_lengths = [2]\nfloor = 0.9\nceiling = 0.2\nmotion = { kind = \"identity\" }\n",
        )
        .unwrap();
        let cfg = PipelineConfig::load(&toml_path).unwrap();
        assert_eq!((cfg.timesteps, cfg.seed), (4, 9));
        let json_path = dir.path().join("c.json");
        std::fs::write(&json_path, serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(PipelineConfig::load(&json_path).unwrap(), cfg);
    }

    #[test]
    fn single_frame_single_step() {
        let mut cfg = small_config(SyntheticSpec::scenes(vec![1], 2, 2, 4, 0));
        cfg.timesteps = 1;
        let out = run_pipeline(&cfg).unwrap();
        let latents = LatentVolume::synthesize(1, 2, 2, 3, cfg.seed).unwrap();
        let denoiser = StubDenoiser::new(&cfg.denoiser, 3).unwrap();
        let sel = vec![TokenSelection::full(0, 1, 2, 2)];
        let direct = stub_denoiser(
            &denoiser,
            &latents.initial().unwrap(),
            (2, 2),
            &sel,
            AttentionMode::Slimmed,
        )
        .unwrap();
        assert_eq!(out.edited.data(), direct.data());
        assert_eq!(out.report.total_cost.ratio, 1.0);
    }

    #[test]
    fn stride_skips_non_keyframes() {
        let mut cfg = small_config(SyntheticSpec::scenes(vec![4], 2, 2, 4, 0));
        cfg.keyframe_mode = KeyframeMode::Fixed;
        cfg.timesteps = 1;
        cfg.propagation_stride = 1;
        let with = run_pipeline(&cfg).unwrap();
        cfg.timesteps = 2;
        cfg.propagation_stride = 2;
        let skipped = run_pipeline(&cfg).unwrap();
        // frame 1 only moves on propagating steps, so it matches the one-step run
        assert_eq!(with.edited.slice0(1), skipped.edited.slice0(1));
        assert_ne!(with.edited.slice0(0), skipped.edited.slice0(0));
    }

    #[test]
    fn stage_errors_carry_context() {
        let cfg = small_config(SyntheticSpec::scenes(vec![3], 2, 2, 4, 0));
        let vol = synth_video(cfg.synthetic.as_ref().unwrap())
            .unwrap()
            .features;
        let latents = LatentVolume::synthesize(5, 2, 2, 3, 0).unwrap();
        match run_pipeline_on(vol, &latents, &cfg) {
            Err(Error::Stage { stage, .. }) => assert_eq!(stage, "load"),
            Err(other) => panic!("unexpected error {other}"),
            Ok(_) => panic!("expected a frame-count error"),
        }
    }

    #[test]
    fn outputs_written() {
        let mut cfg = small_config(SyntheticSpec::scenes(vec![2, 2], 2, 2, 4, 0));
        cfg.yt = true;
        let out = run_pipeline(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        out.write(dir.path()).unwrap();
        for f in [
            "edited.aftn",
            "report.json",
            "partition.json",
            "keyframes.json",
            "yt.aftn",
            "yt.json",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let back = tensor_read(dir.path().join("edited.aftn")).unwrap();
        assert_eq!(back, out.edited);
        let report: RunReport = read_json(dir.path().join("report.json")).unwrap();
        assert_eq!(report, out.report);
    }
}
