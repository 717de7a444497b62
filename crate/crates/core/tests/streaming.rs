//! Streaming engine against offline sliding-window inference.

use mat_core::data::{dataset_videos, synthesize, Video};
use mat_core::streaming::{
    evaluate_videos, offline_predictions, replay_file, tau_index, StreamState,
};
use mat_core::{GrammarConfig, MatModel, ModelConfig};

fn setup(frames: usize) -> (ModelConfig, Video) {
    let cfg = ModelConfig {
        d_model: 16,
        heads: 2,
        long_len: 16,
        short_len: 4,
        num_segments: 4,
        long_queries: 4,
        future_queries: 4,
        future_seconds: 2.0,
        fps: 4,
        rounds: 2,
        num_classes: 6,
        ..ModelConfig::default()
    };
    let grammar = GrammarConfig {
        dim: cfg.d_model,
        num_videos: 1,
        frames_per_video: frames,
        test_fraction: 0.0,
        ..GrammarConfig::default()
    };
    let ds = synthesize(&grammar, 8).unwrap();
    let (video, _) = dataset_videos(&ds).remove(0);
    (cfg, video)
}

#[test]
fn streaming_matches_offline_windows() {
    let (cfg, video) = setup(200);
    let (model, params) = MatModel::new::<f32>(&cfg).unwrap();
    let taus = [0.25, 1.0, 2.0];
    let offline = offline_predictions(&model, &params, &video.features.features).unwrap();
    let mut state = StreamState::new(&model, &params);
    let mut worst = 0.0f32;
    for (t, off) in offline.iter().enumerate() {
        let out = state
            .push_frame(video.features.features.row(t), &taus)
            .unwrap();
        for (a, b) in out.detection.iter().zip(&off.detection) {
            worst = worst.max((a - b).abs());
        }
        for (tau, row) in &out.anticipation {
            let idx = tau_index(&cfg, *tau).unwrap();
            for (a, b) in row.iter().zip(off.anticipation.row(idx)) {
                worst = worst.max((a - b).abs());
            }
        }
        let s: f32 = out.detection.iter().sum();
        assert!((s - 1.0).abs() < 1e-4);
    }
    assert!(worst <= 1e-5, "max deviation {worst}");
    assert_eq!(state.forward_passes(), video.frames());
}

#[test]
fn valid_slots_grow_then_saturate() {
    let (cfg, video) = setup(80);
    let (model, params) = MatModel::new::<f32>(&cfg).unwrap();
    let mut state = StreamState::new(&model, &params);
    let mut last = 0;
    for t in 0..30 {
        state
            .push_frame(video.features.features.row(t), &[])
            .unwrap();
        let w = state.window();
        let valid = w.valid.iter().filter(|&&v| v).count();
        assert_eq!(valid, (t + 1).min(cfg.window_len()));
        assert!(valid >= last);
        // padding occupies exactly the oldest slots
        assert!(w.valid[cfg.window_len() - valid..].iter().all(|&v| v));
        last = valid;
    }
}

#[test]
fn out_of_horizon_tau_is_rejected_without_side_effects() {
    let (cfg, video) = setup(80);
    let (model, params) = MatModel::new::<f32>(&cfg).unwrap();
    let mut state = StreamState::new(&model, &params);
    let err = state
        .push_frame(video.features.features.row(0), &[3.0])
        .unwrap_err();
    assert!(err.to_string().contains("[0.25, 2]"), "{err}");
    assert_eq!(state.frames_seen(), 0);
    assert_eq!(state.forward_passes(), 0);
}

#[test]
fn replay_agrees_with_offline_evaluation() {
    let (cfg, video) = setup(80);
    let (model, params) = MatModel::new::<f32>(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("replay.json");
    let taus = [1.0, 2.0];
    let streamed = replay_file(&model, &params, &video, &taus, &path).unwrap();
    let offline = evaluate_videos(&model, &params, &[&video], &taus, 5).unwrap();
    assert_eq!(streamed.frames, 80);
    assert!((streamed.detection.accuracy - offline.detection.accuracy).abs() < 1e-6);
    // the last tau·fps frames have no ground truth
    assert_eq!(streamed.anticipation[0].metrics.frames, 80 - 4);
    assert_eq!(streamed.anticipation[1].metrics.frames, 80 - 8);
    for (a, b) in streamed.anticipation.iter().zip(&offline.anticipation) {
        assert!((a.metrics.accuracy - b.metrics.accuracy).abs() < 1e-6);
    }
    assert!(path.exists());
    for c in 0..cfg.num_outputs() {
        assert!(dir.path().join(format!("replay_class_{c}.csv")).exists());
    }
    let back: mat_core::metrics::EvalReport =
        serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(back.config, cfg);
}
