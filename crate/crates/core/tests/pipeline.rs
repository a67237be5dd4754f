mod common;

use failsense::backbone::Backbone;
use failsense::dataset::synth::{generate_control_failures, generate_smf};
use failsense::dataset::{Manifest, SmfExample, Split};
use failsense::nn::Params;
use failsense::training::{
    evaluate_stage1, train_stage1, train_stage2, FeatureCache, PatchCache, Stage1Config, Stage2Config,
};
use failsense::Error;

fn smf() -> Manifest {
    generate_smf(&common::tiny_data()).unwrap()
}

fn stage1(manifest: &Manifest) -> (Backbone<f32>, String) {
    let cfg = common::tiny();
    let mut model: Backbone<f32> = Backbone::new(cfg.backbone.clone()).unwrap();
    let train = manifest.split(Split::Train);
    train_stage1(&mut model, &train, &[], &cfg.stage1, 1, &mut |_| {}).unwrap();
    let hash = model.hash().unwrap();
    (model, hash)
}

fn stage2_cfg(cache_features: bool) -> Stage2Config {
    Stage2Config {
        cache_features,
        ..common::tiny().stage2
    }
}

#[test]
fn generation_is_deterministic_and_balanced() {
    let a = smf();
    let b = smf();
    assert_eq!(a.checksum(), b.checksum());
    assert_eq!(a.counts.positives, a.counts.negatives);
    let c = generate_control_failures(&common::tiny_data(), 8).unwrap();
    assert_eq!(c.examples.len(), 8);
    assert!(c.examples.iter().all(|e| e.label == 0));
}

#[test]
fn stage1_checkpoint_reproduces_logged_loss() {
    let m = smf();
    let eight: Vec<&SmfExample> = m.split(Split::Train).into_iter().take(8).collect();
    let cfg = Stage1Config {
        epochs: 1,
        batch_size: 4,
        ..Stage1Config::default()
    };
    let fresh: Backbone<f32> = Backbone::new(common::tiny_backbone()).unwrap();
    let mut model = fresh.clone();
    let logs = train_stage1(&mut model, &eight, &eight, &cfg, 3, &mut |_| {}).unwrap();
    assert_eq!(logs.len(), 1);
    let logged = logs[0].val_loss.unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bb.ckpt");
    let saved = model.save(&path).unwrap();
    let (loaded, hash) = Backbone::<f32>::load(&path).unwrap();
    assert_eq!(saved, hash);
    assert_eq!(loaded.stage, 1);
    let cache = PatchCache::build(&loaded, &eight).unwrap();
    let (loss, _) = evaluate_stage1(&loaded, &cache, &eight, 4).unwrap();
    assert_eq!(loss, logged);

    // Only projector and adapter tensors moved.
    let mut before = Vec::new();
    fresh.visit("", &mut |n, p| before.push((n, p.value.clone())));
    let trainable = loaded.trainable_set();
    let mut moved = Vec::new();
    loaded.visit("", &mut |n, p| {
        let old = &before.iter().find(|(m, _)| *m == n).unwrap().1;
        if *old != p.value {
            moved.push(n);
        }
    });
    assert!(!moved.is_empty());
    for n in &moved {
        assert!(trainable.contains(n), "frozen tensor {n} changed");
    }
}

#[test]
fn cached_and_live_features_train_identical_heads() {
    let m = smf();
    let (model, hash) = stage1(&m);
    let train = m.split(Split::Train);
    let val = m.split(Split::Val);
    let cfg = stage2_cfg(true);
    let layers = failsense::backbone::select_fs_layers(model.n_layers(), cfg.k).unwrap();
    let mut all = train.clone();
    all.extend_from_slice(&val);
    let cache = FeatureCache::build(&model, &hash, &layers, &all, 5).unwrap();
    let (cached, logs) = train_stage2(&model, &hash, &train, &val, &cfg, 4, Some(&cache), &mut |_| {}).unwrap();
    let (live, _) = train_stage2(&model, &hash, &train, &val, &stage2_cfg(false), 4, None, &mut |_| {}).unwrap();
    assert!(cached == live, "cached and on-the-fly heads differ");
    assert_eq!(model.hash().unwrap(), hash);
    for l in &logs {
        assert_eq!(l.head_val_acc.len(), cfg.k);
        assert_eq!(l.stage, 2);
    }
}

#[test]
fn feature_cache_from_another_checkpoint_is_rejected() {
    let m = smf();
    let (model, hash) = stage1(&m);
    let train = m.split(Split::Train);
    let cfg = stage2_cfg(true);
    let layers = failsense::backbone::select_fs_layers(model.n_layers(), cfg.k).unwrap();
    let cache = FeatureCache::build(&model, "0000", &layers, &train, 8).unwrap();
    let r = train_stage2(&model, &hash, &train, &[], &cfg, 0, Some(&cache), &mut |_| {});
    assert!(matches!(r, Err(Error::CacheMismatch { .. })));
}

#[test]
fn stage2_needs_a_stage1_backbone() {
    let m = smf();
    let model: Backbone<f32> = Backbone::new(common::tiny_backbone()).unwrap();
    let hash = model.hash().unwrap();
    let train = m.split(Split::Train);
    let r = train_stage2(&model, &hash, &train, &[], &stage2_cfg(false), 0, None, &mut |_| {});
    assert!(matches!(r, Err(Error::Config(_))));
}
