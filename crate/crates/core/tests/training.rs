#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::sync::Arc;

use hierfuse::backbone::{Backbone, BackboneConfig};
use hierfuse::checkpoint::{verify_frozen, Checkpoint};
use hierfuse::data::synth::{generate, Family, SynthSpec};
use hierfuse::data::Normalization;
use hierfuse::fusion::FusionConfig;
use hierfuse::model::Detector;
use hierfuse::objective::LossConfig;
use hierfuse::prompt::PromptConfig;
use hierfuse::tensor::nn::Parameters;
use hierfuse::trainer::{build_checkpoint, detector_from_checkpoint, encode_images, train, EncodedSet, TrainConfig};

fn encoded(backbone: &Backbone<f32>, family: Family, n: usize, seed: u64) -> EncodedSet {
    let frames = generate(&SynthSpec::new(family, n, seed));
    let images: Vec<_> = frames.iter().map(|f| f.image.clone()).collect();
    let labels: Vec<u8> = frames.iter().map(|f| f.record.label).collect();
    let vids: Vec<_> = frames.iter().map(|f| f.record.video_id.clone()).collect();
    encode_images(backbone, &images, &labels, &vids, &Normalization::default()).unwrap()
}

fn detector(seed: u64) -> Detector<f32> {
    let backbone = Arc::new(Backbone::<f32>::init(&BackboneConfig::default(), seed).unwrap());
    Detector::new(
        backbone,
        &PromptConfig::default(),
        &FusionConfig::default(),
        &LossConfig::default(),
        seed,
    )
    .unwrap()
}

#[test]
fn zero_epochs_leave_the_model_at_initialization() {
    let mut det = detector(3);
    let data = encoded(&det.backbone, Family::PatchSwap, 4, 1);
    let before = build_checkpoint(&det, None);
    let cfg = TrainConfig {
        epochs: 0,
        ..Default::default()
    };
    let out = train(&mut det, &data, &TrainConfig { seed: 3, ..cfg }).unwrap();
    assert!(out.log.steps.is_empty());
    let after = build_checkpoint(&det, Some(&out.optimizer));
    assert_eq!(before.to_bytes().unwrap(), after.to_bytes().unwrap());
}

#[test]
fn training_is_deterministic_and_keeps_backbone_frozen() {
    let run = || {
        let mut det = detector(5);
        let data = encoded(&det.backbone, Family::BlendSeam, 6, 2);
        let before = build_checkpoint(&det, None);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..Default::default()
        };
        let out = train(&mut det, &data, &TrainConfig { seed: 9, ..cfg }).unwrap();
        assert_eq!(out.log.steps.len(), 2 * 3);
        let after = build_checkpoint(&det, Some(&out.optimizer));
        assert!(verify_frozen(&before, &after).unwrap());
        (out.log, after.to_bytes().unwrap())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}

#[test]
fn single_batch_overfits() {
    for seed in 1..6u64 {
        let mut det = detector(seed);
        let data = encoded(&det.backbone, Family::WarpBand, 2, seed);
        det.prompt_cfg.dropout_rate = 0.0;
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 4,
            ..Default::default()
        };
        let out = train(&mut det, &data, &TrainConfig { seed: 1, ..cfg }).unwrap();
        let losses: Vec<f64> = out.log.steps.iter().map(|s| s.loss).collect();
        assert_eq!(losses.len(), 50);
        let (first, last) = (losses[0], losses[49]);
        assert!(last < 0.1 * first, "seed {seed}: {first} -> {last}");
        for w in losses.windows(2) {
            assert!(w[1] - w[0] < 0.05 * first, "seed {seed}: {losses:?}");
        }
        assert!(losses.iter().all(|&l| l <= first));
    }
}

#[test]
fn checkpoint_roundtrip_reproduces_predictions() {
    let mut det = detector(11);
    let data = encoded(&det.backbone, Family::HfNoiseBlob, 4, 6);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 4,
        ..Default::default()
    };
    let out = train(&mut det, &data, &TrainConfig { seed: 2, ..cfg }).unwrap();
    let ckpt = build_checkpoint(&det, Some(&out.optimizer));
    let restored = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
    let det2 = detector_from_checkpoint(
        &restored,
        &BackboneConfig::default(),
        &PromptConfig::default(),
        &FusionConfig::default(),
        &LossConfig::default(),
    )
    .unwrap();
    let flat = |d: &Detector<f32>| -> Vec<(String, Vec<f32>)> {
        d.named_params("").into_iter().map(|(n, t)| (n, t.to_vec())).collect()
    };
    assert_eq!(flat(&det), flat(&det2));
    let idx: Vec<usize> = (0..data.len()).collect();
    let (v, lv, _) = data.batch(&idx).unwrap();
    assert_eq!(det.predict(&v, &lv).unwrap(), det2.predict(&v, &lv).unwrap());
    let optimizer_tensors = restored.tensors.iter().filter(|t| t.name.starts_with("optimizer.")).count();
    assert_eq!(optimizer_tensors, 2 * det.trainables().len() + 1);
}

