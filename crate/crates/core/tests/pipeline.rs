mod common;

use std::path::Path;

use rand::Rng;

use adaflow::attention::{attention_cost, CostReport};
use adaflow::partition::PartitionParams;
use adaflow::pipeline::{
    run_pipeline, run_pipeline_on, synth_video, AttentionMode, DenoiserSpec, LatentSpec,
    LatentVolume, LayerSpec, Motion, PipelineConfig, SyntheticSpec,
};
use adaflow::similarity::FeatureVolume;
use adaflow::tensor_store::{tensor_write, Tensor};

fn config(lengths: Vec<usize>, d: usize) -> PipelineConfig {
    let mut synthetic = SyntheticSpec::scenes(lengths, 4, 4, d, 21);
    synthetic.noise = 1.0;
    synthetic.motion = Motion::CyclicShift { rows: 1, cols: 0 };
    PipelineConfig {
        synthetic: Some(synthetic),
        latent: LatentSpec {
            h: 4,
            w: 4,
            channels: 3,
        },
        timesteps: 4,
        seed: 8,
        denoiser: DenoiserSpec {
            layers: vec![LayerSpec { h: 4, w: 4 }, LayerSpec { h: 2, w: 3 }],
            heads: 2,
            d_head: 4,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|x| x.to_bits()).collect()
}

#[test]
fn zero_pressure_matches_full_esa_end_to_end() {
    let slim_cfg = config(vec![5, 6, 4], 24);
    let mut full_cfg = slim_cfg.clone();
    full_cfg.attention = AttentionMode::FullEsa;
    let slim = run_pipeline(&slim_cfg).unwrap();
    let full = run_pipeline(&full_cfg).unwrap();
    assert_eq!(slim.partition.num_clips(), 3);
    for (a, b) in slim.edited.data().iter().zip(full.edited.data()) {
        assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
    }
    assert_eq!(slim.report.total_cost.ratio, 1.0);
}

#[test]
fn twenty_eight_clips_halve_the_kv_buffer() {
    let mut slim_cfg = config(vec![2; 28], 64);
    slim_cfg.denoiser.layers = vec![LayerSpec { h: 4, w: 4 }];
    let mut full_cfg = slim_cfg.clone();
    full_cfg.attention = AttentionMode::FullEsa;
    let slim = run_pipeline(&slim_cfg).unwrap();
    let full = run_pipeline(&full_cfg).unwrap();
    assert_eq!(slim.report.clips, 28);
    for step in &slim.report.costs {
        assert_eq!(step.cost.ratio, 0.5, "timestep {}", step.t);
    }
    assert_eq!(slim.report.kv.peak_tokens, 14 * 16);
    assert_eq!(full.report.kv.peak_tokens, 28 * 16);
    assert_eq!(2 * slim.report.kv.peak_tokens, full.report.kv.peak_tokens);
    assert_eq!(2 * slim.report.kv.total_tokens, full.report.kv.total_tokens);
}

#[test]
fn reported_cost_equals_closed_form() {
    let cfg = config(vec![3; 20], 40);
    let out = run_pipeline(&cfg).unwrap();
    let m = out.report.clips;
    assert!(m > 14);
    let mut expected = CostReport::default();
    for _ in 0..cfg.timesteps {
        for layer in &cfg.denoiser.layers {
            let per_query = attention_cost(m, layer.h * layer.w, 14, 4, 2).unwrap();
            for _ in 0..m {
                expected.accumulate(&per_query);
            }
        }
    }
    assert_eq!(out.report.total_cost, expected);
    let summed: u64 = out
        .report
        .costs
        .iter()
        .map(|c| c.cost.attention_macs_slimmed)
        .sum();
    assert_eq!(summed, expected.attention_macs_slimmed);
}

#[test]
fn kv_tokens_attended_stay_within_budget() {
    let cfg = config(vec![3; 20], 40);
    let out = run_pipeline(&cfg).unwrap();
    assert!(out.report.kv.peak_tokens <= out.report.kv.bound_tokens);
    for step in &out.report.costs {
        assert!(step.kv_tokens_attended >= step.cost.kv_tokens_slimmed);
    }
}

#[test]
fn perturbing_one_clip_leaves_the_others_unchanged() {
    let cfg = config(vec![6, 6], 16);
    let spec = cfg.synthetic.clone().unwrap();
    let base = synth_video(&spec).unwrap().features;

    // nudge scene-0 tokens inside their own channel block
    let k = spec.d / 2;
    let mut r = common::rng(99);
    let mut data = base.tensor().data().to_vec();
    for token in data[..6 * 16 * spec.d].chunks_exact_mut(spec.d) {
        for x in &mut token[..k] {
            *x += r.gen_range(-0.02..0.02);
        }
    }
    let perturbed =
        FeatureVolume::from_tensor(Tensor::new(base.tensor().shape().to_vec(), data).unwrap())
            .unwrap();

    let latents = LatentVolume::synthesize(12, 4, 4, 3, cfg.seed).unwrap();
    let a = run_pipeline_on(base, &latents, &cfg).unwrap();
    let b = run_pipeline_on(perturbed, &latents, &cfg).unwrap();
    assert_eq!(a.partition, b.partition);
    let second = a.partition.clip_range(1);
    for i in second {
        assert_eq!(a.edited.slice0(i), b.edited.slice0(i), "frame {i}");
    }
}

#[test]
fn deterministic_across_thread_pools() {
    let cfg = config(vec![3; 18], 36);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_pipeline(&cfg).unwrap())
    };
    let (one, four) = (run(1), run(4));
    assert_eq!(bits(&one.edited), bits(&four.edited));
    assert_eq!(one.report, four.report);
}

#[test]
fn inputs_from_files_match_in_memory_run() {
    let mut cfg = config(vec![4, 4], 16);
    let dir = tempfile::tempdir().unwrap();
    let features = synth_video(cfg.synthetic.as_ref().unwrap())
        .unwrap()
        .features;
    let mut r = common::rng(3);
    let latents = common::random_tensor(vec![2, 8, 4, 4, 3], &mut r);
    let (fp, lp) = (dir.path().join("f.aftn"), dir.path().join("l.aftn"));
    tensor_write(features.tensor(), &fp).unwrap();
    tensor_write(&latents, &lp).unwrap();

    let memory =
        run_pipeline_on(features, &LatentVolume::from_tensor(latents).unwrap(), &cfg).unwrap();
    cfg.synthetic = None;
    cfg.features = Some(fp);
    cfg.latents = Some(lp);
    let files = run_pipeline(&cfg).unwrap();
    assert_eq!(bits(&memory.edited), bits(&files.edited));
}

#[test]
fn mismatched_inputs_report_the_stage() {
    let mut cfg = config(vec![4, 4], 16);
    cfg.synthetic = None;
    cfg.features = Some("/nonexistent/features.aftn".into());
    let err = run_pipeline(&cfg).err().unwrap();
    assert!(err.to_string().contains("load"), "{err}");
    assert!(!err.is_config());

    let mut cfg = config(vec![4, 4], 16);
    cfg.partition = PartitionParams {
        step: 0,
        ..Default::default()
    };
    assert!(run_pipeline(&cfg).err().unwrap().is_config());
}

#[test]
fn shipped_demo_config_loads() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/demo.toml");
    let cfg = PipelineConfig::load(path).unwrap();
    assert_eq!(cfg.synthetic.unwrap().scene_lengths.len(), 16);
}
