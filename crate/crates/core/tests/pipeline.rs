mod common;

use std::sync::OnceLock;

use reid_core::datamodel::{ImageRecord, Split};
use reid_core::losses::LOSS_CSV_HEADER;
use reid_core::pipeline::checkpoint::Checkpoint;
use reid_core::pipeline::config::{Stage, TrainConfig};
use reid_core::pipeline::toydata::{make_toy_data, ToyData};
use reid_core::pipeline::train::{assemble_source, evaluate_checkpoint, finetune, pretrain};
use reid_core::Error;

use common::small_spec;

fn data() -> &'static ToyData {
    static DATA: OnceLock<ToyData> = OnceLock::new();
    DATA.get_or_init(|| make_toy_data(&small_spec(11)).unwrap())
}

fn pretrain_cfg() -> TrainConfig {
    let mut cfg = TrainConfig::toy(Stage::Pretrain);
    cfg.epochs = 2;
    cfg.iters_per_epoch = 4;
    cfg.warmup_epochs = 0;
    cfg.lr_milestones = vec![];
    cfg
}

fn finetune_cfg() -> TrainConfig {
    let mut cfg = TrainConfig::toy(Stage::Finetune);
    cfg.epochs = 2;
    cfg.iters_per_epoch = 3;
    cfg.k_clusters = 3;
    cfg
}

fn pretrained() -> &'static Checkpoint {
    static CK: OnceLock<Checkpoint> = OnceLock::new();
    CK.get_or_init(|| {
        let source = assemble_source(&data().source).unwrap();
        pretrain(&pretrain_cfg(), &source, None).unwrap().checkpoint
    })
}

fn finetuned_checksums(target: &[ImageRecord]) -> (String, String) {
    let ck = finetune(&finetune_cfg(), pretrained(), target, None).unwrap().checkpoint;
    (ck.params.checksum(), ck.teacher.unwrap().checksum())
}

#[test]
fn finetuning_never_reads_target_labels_or_held_out_images() {
    let reference = finetuned_checksums(&data().target);

    let unlabelled: Vec<ImageRecord> = data()
        .target
        .iter()
        .cloned()
        .map(|mut r| {
            r.identity = None;
            r
        })
        .collect();
    assert_eq!(finetuned_checksums(&unlabelled), reference);

    let relabelled: Vec<ImageRecord> = data()
        .target
        .iter()
        .cloned()
        .map(|mut r| {
            r.identity = r.identity.map(|i| 1000 - i);
            r
        })
        .collect();
    assert_eq!(finetuned_checksums(&relabelled), reference);

    let train_only: Vec<ImageRecord> = data().target.iter().filter(|r| r.split == Split::Train).cloned().collect();
    assert!(train_only.len() < data().target.len());
    assert_eq!(finetuned_checksums(&train_only), reference);
}

#[test]
fn same_seed_runs_match_and_other_seeds_differ() {
    let a = finetuned_checksums(&data().target);
    assert_eq!(a, finetuned_checksums(&data().target));
    let mut cfg = finetune_cfg();
    cfg.seed += 1;
    let other = finetune(&cfg, pretrained(), &data().target, None).unwrap().checkpoint;
    assert_ne!(other.params.checksum(), a.0);
}

#[test]
fn evaluation_is_repeatable() {
    let a = evaluate_checkpoint(pretrained(), &data().target, None).unwrap();
    let b = evaluate_checkpoint(pretrained(), &data().target, None).unwrap();
    assert_eq!(a, b);
    assert!(a.map > 0.0 && a.map <= 1.0);
    assert_eq!(a.num_valid_queries, 6);
}

#[test]
fn stage_checks() {
    let err = finetune(&pretrain_cfg(), pretrained(), &data().target, None).unwrap_err();
    assert!(matches!(err, Error::StageMismatch { expected: Stage::Finetune, got: Stage::Pretrain }));

    let mut wrong = pretrained().clone();
    wrong.stage = Stage::Finetune;
    let err = finetune(&finetune_cfg(), &wrong, &data().target, None).unwrap_err();
    assert!(matches!(err, Error::StageMismatch { expected: Stage::Pretrain, got: Stage::Finetune }));

    let err = pretrain(&finetune_cfg(), &data().source, None).unwrap_err();
    assert!(matches!(err, Error::StageMismatch { .. }));
}

#[test]
fn empty_inputs_are_rejected() {
    assert!(matches!(pretrain(&pretrain_cfg(), &[], None), Err(Error::EmptyDataset)));
    let held_out: Vec<ImageRecord> = data().target.iter().filter(|r| r.split != Split::Train).cloned().collect();
    assert!(matches!(finetune(&finetune_cfg(), pretrained(), &held_out, None), Err(Error::EmptyTargetSet)));
}

#[test]
fn training_writes_checkpoints_logs_and_pseudo_labels() {
    let dir = tempfile::tempdir().unwrap();
    let source = assemble_source(&data().source).unwrap();
    let pre = pretrain(&pretrain_cfg(), &source, Some(&dir.path().join("pre"))).unwrap();
    for epoch in 1..=2 {
        assert!(dir.path().join(format!("pre/pretrain_epoch{epoch}.ckpt")).is_file());
    }
    let csv = std::fs::read_to_string(dir.path().join("pre/pretrain_losses.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some(LOSS_CSV_HEADER));
    assert_eq!(csv.lines().count(), 1 + pre.losses.len());
    assert_eq!(pre.losses.len(), 8);

    let ft = finetune(&finetune_cfg(), &pre.checkpoint, &data().target, Some(&dir.path().join("ft"))).unwrap();
    let train_images = data().target.iter().filter(|r| r.split == Split::Train).count();
    for epoch in 0..2 {
        let tsv = std::fs::read_to_string(dir.path().join(format!("ft/pseudo_labels_epoch{epoch}.tsv"))).unwrap();
        assert_eq!(tsv.lines().count(), 1 + train_images, "epoch {epoch}");
    }
    let last = Checkpoint::load(&dir.path().join("ft/finetune_epoch2.ckpt")).unwrap();
    assert_eq!(last, ft.checkpoint);
    assert_eq!(last.stage, Stage::Finetune);
    assert!(last.metric("clusters").is_some());

    let metrics = dir.path().join("metrics.json");
    let r = evaluate_checkpoint(&ft.checkpoint, &data().target, Some(&metrics)).unwrap();
    let text = std::fs::read_to_string(&metrics).unwrap();
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(json["mAP"].as_f64(), Some(r.map));
    assert_eq!(json["config_hash"].as_str(), Some(finetune_cfg().hash().as_str()));
}
