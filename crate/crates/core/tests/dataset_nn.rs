use pilotstack_core::dataset::{split, DriveRecord, Manifest, PoseRecord, RecordMode, Tub};
use pilotstack_core::nn::{
    forward, load_weights, save_weights, train, FrameSamples, ModelSpec, ModelWeights, TrainerConfig,
};
use pilotstack_core::sim::{make_default_track, render_camera, CameraModel, ImageFrame};
use pilotstack_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_spec() -> ModelSpec {
    serde_json::from_str(
        r#"{"input":{"height":12,"width":16,"channels":3},"layers":[
            {"type":"conv2d","filters":4,"kernel":3,"stride":2,"activation":"relu"},
            {"type":"flatten"},
            {"type":"dense","units":2,"activation":"linear"}]}"#,
    )
    .unwrap()
}

#[test]
fn arbitrary_floats_survive_the_catalog() {
    let dir = tempfile::tempdir().unwrap();
    let mut tub = Tub::create(dir.path().join("t"), Manifest::new(4, 3, "now")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let frame = ImageFrame::filled(4, 3, [1, 2, 3]);
    let mut written = Vec::new();
    for i in 0..500 {
        let mut rec = DriveRecord::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), i, RecordMode::Autopilot);
        rec.speed_mps = rng.gen_range(0.0..2.0);
        rec.pose = Some(PoseRecord { x_m: rng.gen(), y_m: rng.gen(), heading_rad: rng.gen() });
        tub.append_record(&frame, rec).unwrap();
        written.push(tub.records().last().unwrap().clone());
    }
    let reopened = Tub::open(dir.path().join("t")).unwrap();
    assert_eq!(reopened.records(), written.as_slice());
}

#[test]
fn merged_tubs_keep_every_frame() {
    let dir = tempfile::tempdir().unwrap();
    let track = make_default_track();
    let cam = CameraModel::default();
    let mut parts = Vec::new();
    for p in 0..2 {
        let mut tub = Tub::create(dir.path().join(format!("p{p}")), Manifest::new(160, 120, "now")).unwrap();
        let mut state = track.start_state();
        for i in 0..5 {
            state.x_m += 0.05 * (p * 5 + i) as f64;
            let frame = render_camera(&track, &state, &cam);
            tub.append_record(&frame, DriveRecord::new(0.1 * i as f64, 0.3, i as u64 * 50, RecordMode::Manual))
                .unwrap();
        }
        parts.push(tub);
    }
    let mut merged = Tub::create(dir.path().join("all"), Manifest::new(160, 120, "now")).unwrap();
    for part in &parts {
        merged.merge_from(part).unwrap();
    }
    assert_eq!(merged.len(), 10);
    for (i, rec) in merged.records().iter().enumerate() {
        assert_eq!(rec.index, i);
        let part = &parts[i / 5];
        let (orig, orig_frame) = part.read_record(i % 5).unwrap();
        assert_eq!(rec.steering_norm, orig.steering_norm);
        assert_eq!(merged.read_image(i).unwrap(), orig_frame);
    }
}

#[test]
fn trained_weights_reload_and_predict_identically() {
    let dir = tempfile::tempdir().unwrap();
    let mut tub = Tub::create(dir.path().join("t"), Manifest::new(32, 24, "now")).unwrap();
    // brightness encodes the steering label
    for i in 0..200u32 {
        let level = (i * 37 % 256) as u8;
        let steering = level as f64 / 255.0 - 0.5;
        tub.append_record(
            &ImageFrame::filled(32, 24, [level, level, level]),
            DriveRecord::new(steering, 0.4, i as u64, RecordMode::Manual),
        )
        .unwrap();
    }
    let spec = tiny_spec();
    let samples = FrameSamples::from_tub(&tub, &spec).unwrap();
    let sp = split(tub.len(), 0.2, 1).unwrap();
    let cfg = TrainerConfig { epochs: 40, batch_size: 8, learning_rate: 3e-3, seed: 2, ..TrainerConfig::default() };
    let (weights, history) = train(&spec, &samples, &sp, &cfg, |_| {}).unwrap();
    assert_eq!(history.epochs.len(), 40);
    assert!(history.last().unwrap().val_mse < 1e-2, "{:?}", history.last());

    let path = dir.path().join("w.bin");
    save_weights(&weights, &path).unwrap();
    let loaded: ModelWeights<f32> = load_weights(&path, &spec).unwrap();
    assert_eq!(loaded, weights);

    let frame = ImageFrame::filled(16, 12, [200, 200, 200]);
    let a = forward(&spec, &weights, &frame).unwrap();
    let b = forward(&spec, &loaded, &frame).unwrap();
    assert_eq!(a, b);
    assert!((a.0 as f64 - (200.0 / 255.0 - 0.5)).abs() < 0.1, "{a:?}");

    let other = ModelSpec::default();
    assert!(matches!(load_weights::<f32>(&path, &other), Err(Error::FingerprintMismatch)));
}
