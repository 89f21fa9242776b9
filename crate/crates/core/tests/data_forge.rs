use proptest::prelude::*;
use spikefuse::data::{
    build_pairs, generate_raw, load_dataset, pair_all, roi_from_skeleton, synth_micro_action, v2e_convert, write_samples,
    IntensityClip, SynthActionSpec, SynthConfig, V2eConfig,
};
use spikefuse::event::{Event, EventStream, Polarity};
use spikefuse::skeleton::SkeletonSequence;
use spikefuse::tensor::Tensor;

/// Single-pixel converter without mismatch or filtering.
fn exact(theta: f64) -> V2eConfig {
    V2eConfig {
        pos_threshold: theta,
        neg_threshold: theta,
        sigma_threshold: 0.0,
        timestamp_resolution: 1e-6,
        width: 1,
        height: 1,
        cutoff_hz: None,
    }
}

fn pixel_clip(values: &[f64], dt: f64) -> IntensityClip {
    IntensityClip::new(Tensor::new(&[values.len(), 1, 1], values.to_vec()).unwrap(), dt).unwrap()
}

#[test]
fn constant_clip_emits_nothing() {
    let clip = IntensityClip::new(Tensor::full(&[10, 4, 5], 0.4), 0.01).unwrap();
    let cfg = V2eConfig { width: 5, height: 4, ..V2eConfig::default() };
    assert!(v2e_convert(&clip, &cfg, 1).unwrap().is_empty());
}

#[test]
fn step_up_and_back_emits_matching_counts() {
    // ln(0.9 / 0.1) = 2.197 → four events at θ = 0.5; the reference then sits
    // at ln 0.1 + 2, so the return step is exactly four thresholds.
    let s = v2e_convert(&pixel_clip(&[0.1, 0.9, 0.1], 0.01), &exact(0.5), 0).unwrap();
    let pos: Vec<&Event> = s.events.iter().filter(|e| e.polarity == Polarity::Positive).collect();
    let neg: Vec<&Event> = s.events.iter().filter(|e| e.polarity == Polarity::Negative).collect();
    assert_eq!(pos.len(), 4);
    assert_eq!(neg.len(), 4);
    // Evenly spread over each frame interval.
    let times: Vec<u32> = pos.iter().map(|e| e.t_us).collect();
    assert_eq!(times, vec![2500, 5000, 7500, 10000]);
    assert!(neg.iter().all(|e| e.t_us > 10000 && e.t_us <= 20000));
}

#[test]
fn dark_pixels_are_floored_before_the_logarithm() {
    // Both frames sit below the floor, so no change is seen.
    let s = v2e_convert(&pixel_clip(&[0.0, 1e-4], 0.01), &exact(0.1), 0).unwrap();
    assert!(s.is_empty());
}

proptest! {
    #[test]
    fn larger_steps_never_emit_fewer_events(a in 0.05f64..1.0, b in 0.05f64..1.0, c in 0.05f64..1.0) {
        let mut v = [a, b, c];
        v.sort_by(f64::total_cmp);
        let small = v2e_convert(&pixel_clip(&[v[0], v[1]], 0.01), &exact(0.2), 0).unwrap().len();
        let large = v2e_convert(&pixel_clip(&[v[0], v[2]], 0.01), &exact(0.2), 0).unwrap().len();
        prop_assert!(large >= small);
        let expected = ((v[2] / v[0]).ln() / 0.2 + 1e-9).floor() as usize;
        prop_assert_eq!(large, expected);
    }

    #[test]
    fn lower_thresholds_never_emit_fewer_events(lo in 0.05f64..0.4, hi in 0.4f64..1.0, theta in 0.05f64..0.5) {
        let clip = pixel_clip(&[lo, hi, lo, hi], 0.01);
        let coarse = v2e_convert(&clip, &exact(theta * 2.0), 0).unwrap().len();
        let fine = v2e_convert(&clip, &exact(theta), 0).unwrap().len();
        prop_assert!(fine >= coarse);
    }
}

fn moving_clip() -> IntensityClip {
    let (f, h, w) = (12, 6, 8);
    let mut d = vec![0.1; f * h * w];
    for k in 0..f {
        for y in 0..h {
            d[(k * h + y) * w + k % w] = 0.9;
        }
    }
    IntensityClip::new(Tensor::new(&[f, h, w], d).unwrap(), 0.01).unwrap()
}

#[test]
fn conversion_is_seeded() {
    let cfg = V2eConfig { width: 8, height: 6, ..V2eConfig::default() };
    let clip = moving_clip();
    let a = v2e_convert(&clip, &cfg, 5).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, v2e_convert(&clip, &cfg, 5).unwrap());
    assert_ne!(a, v2e_convert(&clip, &cfg, 6).unwrap());
    assert!(a.events.windows(2).all(|w| w[0].t_us <= w[1].t_us));
}

#[test]
fn roi_expands_about_the_joint_box_centre() {
    let r = roi_from_skeleton(&[(10.0, 20.0), (30.0, 60.0), (20.0, 40.0)], 100.0, 100.0).unwrap();
    assert_eq!((r.roi_w, r.roi_h), (1.2 * 20.0, 1.3 * 40.0));
    assert!((r.left - 8.0).abs() < 1e-12 && (r.right - 32.0).abs() < 1e-12);
    assert!((r.top - 14.0).abs() < 1e-12 && (r.bottom - 66.0).abs() < 1e-12);
    // Clipped at the frame edge.
    let r = roi_from_skeleton(&[(0.0, 0.0), (10.0, 10.0)], 100.0, 100.0).unwrap();
    assert_eq!((r.left, r.top), (0.0, 0.0));
    // A single joint still yields a one-pixel box.
    let r = roi_from_skeleton(&[(5.0, 5.0)], 100.0, 100.0).unwrap();
    assert_eq!((r.width(), r.height()), (1.0, 1.0));
    assert!(roi_from_skeleton(&[], 10.0, 10.0).is_err());
}

#[test]
fn static_scene_gives_no_events() {
    let spec = SynthActionSpec { amplitude: 0.0, noise: 0.0, ..SynthActionSpec::new(1, 4) };
    let clip = synth_micro_action(&spec, 3).unwrap();
    let cfg = V2eConfig { width: spec.width, height: spec.height, ..V2eConfig::default() };
    assert!(v2e_convert(&clip.frames, &cfg, 3).unwrap().is_empty());
}

#[test]
fn synthetic_generation_is_deterministic() {
    let cfg = SynthConfig::toy(4, 2);
    let a = generate_raw(&cfg, 9).unwrap();
    assert_eq!(a.len(), 8);
    assert_eq!(a, generate_raw(&cfg, 9).unwrap());
    assert_ne!(a, generate_raw(&cfg, 10).unwrap());
    let labels: Vec<usize> = a.iter().map(|r| r.label).collect();
    assert_eq!(labels, vec![0, 1, 2, 3, 0, 1, 2, 3]);
}

fn ramp_skeleton(frames: usize) -> SkeletonSequence {
    let data = (0..frames * 3 * 2).map(|i| i as f64).collect();
    SkeletonSequence::new(Tensor::new(&[frames, 3, 2], data).unwrap(), 1).unwrap()
}

fn stream_at(times: &[u32]) -> EventStream {
    let mut s = EventStream::new(4, 2);
    s.events = times.iter().map(|&t_us| Event { t_us, x: 1, y: 0, polarity: Polarity::Positive }).collect();
    s
}

#[test]
fn pairing_aligns_bins_with_skeleton_frames() {
    // 8 frames at 1000 µs resampled to 4 steps: each step spans 2000 µs.
    let skel = ramp_skeleton(8);
    let p = build_pairs(&skel, &stream_at(&[0, 1999, 2000, 7999, 8000]), 1000, 4, 2, 4, 1).unwrap();
    assert_eq!(p.skeleton.shape(), &[4, 2, 3]);
    assert_eq!(p.events.shape(), &[4, 2, 2, 4]);
    assert_eq!(p.skipped_events, 1, "the event at the clip end falls outside");
    let per_step = |t: usize| p.events.data()[t * 16..(t + 1) * 16].iter().sum::<f64>();
    assert_eq!([per_step(0), per_step(1), per_step(2), per_step(3)], [1.0, 1.0, 0.0, 1.0]);
    // Step t holds skeleton frame 2t, token-major.
    for t in 0..4 {
        for v in 0..2 {
            for c in 0..3 {
                assert_eq!(p.skeleton.data()[(t * 2 + v) * 3 + c], skel.at(2 * t, c, v));
            }
        }
    }
}

#[test]
fn pairing_rejects_misaligned_inputs() {
    let skel = ramp_skeleton(8);
    assert!(build_pairs(&skel, &stream_at(&[9000]), 1000, 4, 2, 4, 0).is_err());
    assert!(build_pairs(&skel, &stream_at(&[]), 1000, 3, 2, 4, 0).is_err());
    assert!(build_pairs(&skel, &stream_at(&[]), 1000, 16, 2, 4, 0).is_err());
}

#[test]
fn written_samples_load_back_identically() {
    let cfg = SynthConfig::toy(2, 2);
    let raw = generate_raw(&cfg, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_samples(dir.path(), &raw, cfg.classes).unwrap();
    assert_eq!(manifest.entries.len(), 4);
    let loaded = load_dataset(dir.path(), cfg.window, cfg.height, cfg.width).unwrap();
    assert_eq!(loaded.samples, pair_all(&raw, &cfg).unwrap());
    assert_eq!(loaded.classes, 2);
}
