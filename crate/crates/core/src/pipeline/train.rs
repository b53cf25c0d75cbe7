//! Pre-training on the assembled source set, mean-teacher fine-tuning on the target
//! train split, and retrieval evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention_fusion::{bmfn_rows, bmfn_rows_backward, commit_branch_stats, fuse_batch, Branch, BranchNorm};
use crate::camstyle::{assemble_full_training_set, builtin_translator};
use crate::datamodel::{Image, ImageRecord, Split};
use crate::error::{Error, Result};
use crate::evalmetrics::{evaluate_reid, EvalMeta, EvalResult, MetricsReport};
use crate::losses::{
    finetune_total, hard_triplet_loss_grad, id_loss_grad, loss_csv, pretrain_total, softmax_triplet_loss_grad,
    LossRecord, MiningPolicy,
};
use crate::meanteacher::{embed_images, ema_update, init_pair, CoreModel, NetworkPair};
use crate::network::{
    pool_halves, pool_halves_backward, split_batch, FeatureMap, ForwardPass, Gradients, Mode, ParamStore, Upstream, CLASSIFIER,
};
use crate::preprocess::{augment, batch_tensor};
use crate::pseudolabel::{generate_pseudo_labels, write_pseudo_labels, ClusterConfig};
use crate::tensor::Tensor;

use super::checkpoint::{Checkpoint, MetricEntry, RngState};
use super::config::{Stage, TrainConfig};
use super::optim::{learning_rate, Adam};
use super::sampler::PkSampler;
use super::toydata::{make_toy_data, write_toy_data, ToyDataSpec};

fn ensure_stage(cfg: &TrainConfig, stage: Stage) -> Result<()> {
    if cfg.stage != stage {
        return Err(Error::StageMismatch {
            expected: stage,
            got: cfg.stage,
        });
    }
    cfg.validate()
}

fn with_context(err: Error, epoch: usize, iter: usize) -> Error {
    match err {
        Error::NonFiniteActivation(layer) => Error::NonFiniteActivation(format!("{layer} (epoch {epoch}, iteration {iter})")),
        other => other,
    }
}

/// Source set with one styled copy per other camera, using the built-in translator.
pub fn assemble_source(records: &[ImageRecord]) -> Result<Vec<ImageRecord>> {
    let cams = records.iter().map(|r| r.camera_id + 1).max().ok_or(Error::EmptyDataset)?;
    assemble_full_training_set(records, cams, &builtin_translator)
}

/// Augments the chosen items and returns the network batch plus the augmented images.
fn augmented_batch(
    images: &[&Image],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Vec<Image>)> {
    let aug = images
        .iter()
        .map(|img| augment(img, &cfg.augmentation, Some(&mut *rng)))
        .collect::<Result<Vec<_>>>()?;
    Ok((batch_tensor(&aug, &cfg.augmentation)?, aug))
}

fn rng_state(cfg: &TrainConfig, rng: &ChaCha8Rng) -> RngState {
    RngState {
        seed: cfg.seed,
        word_pos: rng.get_word_pos(),
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub losses: Vec<LossRecord>,
}

/// Supervised pre-training with identity cross-entropy on the classifier and batch-hard
/// triplet loss on the neck features.
pub fn pretrain(cfg: &TrainConfig, source: &[ImageRecord], out_dir: Option<&Path>) -> Result<TrainOutput> {
    ensure_stage(cfg, Stage::Pretrain)?;
    if source.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut dense = BTreeMap::new();
    let mut labels = Vec::with_capacity(source.len());
    for r in source {
        let id = r.identity.ok_or_else(|| Error::MissingIdentity(r.image_id.clone()))?;
        let next = dense.len();
        labels.push(*dense.entry(id).or_insert(next));
    }
    let model = CoreModel::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = model.net.init_params(dense.len(), &mut rng);
    let sampler = PkSampler::new(&labels, cfg.batch_p, cfg.batch_k)?;
    let iters = if cfg.iters_per_epoch == 0 { sampler.sweep_len() } else { cfg.iters_per_epoch };
    let mut adam = Adam::new(cfg.weight_decay);
    let mut losses = Vec::new();
    let mut history = Vec::new();
    if let Some(dir) = out_dir {
        ensure_dir(dir)?;
    }
    let mut checkpoint = None;
    for epoch in 0..cfg.epochs {
        let lr = learning_rate(cfg, epoch);
        let mut totals = Vec::with_capacity(iters);
        for iter in 0..iters {
            let idx = sampler.sample(&mut rng);
            let imgs: Vec<&Image> = idx.iter().map(|&i| &source[i].pixels).collect();
            let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (x, _) = augmented_batch(&imgs, cfg, &mut rng)?;
            let step = pretrain_step(&model, cfg, &params, &x, &batch_labels, epoch, iter)?;
            adam.step(&mut params, &step.grads, lr);
            model.net.commit_running_stats(&mut params, &step.pass);
            totals.push(step.record.total);
            losses.push(step.record);
        }
        history.push(MetricEntry {
            stage: Stage::Pretrain,
            epoch,
            name: "loss".into(),
            value: mean(&totals),
        });
        let ck = Checkpoint {
            stage: Stage::Pretrain,
            epoch: epoch + 1,
            config: cfg.clone(),
            rng: rng_state(cfg, &rng),
            params: params.clone(),
            teacher: None,
            optimizer: adam.state.clone(),
            ema_step: 0,
            metric_history: history.clone(),
        };
        if let Some(dir) = out_dir {
            ck.save(&dir.join(format!("pretrain_epoch{}.ckpt", epoch + 1)))?;
            write_file(&dir.join("pretrain_losses.csv"), &loss_csv(&losses))?;
        }
        checkpoint = Some(ck);
    }
    Ok(TrainOutput {
        checkpoint: checkpoint.expect("epochs >= 1"),
        losses,
    })
}

/// Rows `[0, n)` and `[n, 2n)` of a `[2n, D]` tensor.
fn split_pair(t: &Tensor) -> (Tensor, Tensor) {
    let n = t.dim(0) / 2;
    (t.slice_rows(0, n), t.slice_rows(n, 2 * n))
}

fn stack_pair(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::concat_rows(a, b)
}

/// Losses, parameter gradients and the train-mode forward pass of one batch.
pub struct StepOutput {
    pub record: LossRecord,
    pub grads: Gradients,
    pub pass: ForwardPass,
}

fn non_finite_loss(epoch: usize, iter: usize) -> Error {
    Error::NonFiniteActivation(format!("loss (epoch {epoch}, iteration {iter})"))
}

/// Pre-training loss on one batch: identity cross-entropy on the logits plus
/// `kappa` times the batch-hard triplet loss on the neck features.
pub fn pretrain_step(
    model: &CoreModel,
    cfg: &TrainConfig,
    params: &ParamStore,
    x: &Tensor,
    labels: &[usize],
    epoch: usize,
    iter: usize,
) -> Result<StepOutput> {
    let pass = model
        .net
        .forward(params, x, Mode::Train)
        .map_err(|e| with_context(e, epoch, iter))?;
    let logits = pass.logits.as_ref().expect("classifier present");
    let id = id_loss_grad(logits, labels)?;
    let mut trip = hard_triplet_loss_grad(&pass.neck, labels, cfg.loss.margin)?;
    let total = pretrain_total(id.loss, trip.loss, &cfg.loss);
    if !total.is_finite() {
        return Err(non_finite_loss(epoch, iter));
    }
    trip.grad.scale(cfg.loss.kappa);
    let grads = model.net.backward(
        params,
        &pass,
        Upstream {
            d_neck: Some(trip.grad),
            d_logits: Some(id.grad),
            ..Upstream::default()
        },
    );
    Ok(StepOutput {
        record: LossRecord {
            epoch,
            iter,
            id_g: id.loss,
            trip_g: trip.loss,
            trip_top: 0.0,
            trip_bottom: 0.0,
            total,
        },
        grads,
        pass,
    })
}

/// Fine-tuning loss on one batch. `x` stacks the `n` augmented images over their mirror
/// images (`2n` rows); the label slices have length `n`.
#[allow(clippy::too_many_arguments)]
pub fn finetune_step(
    model: &CoreModel,
    cfg: &TrainConfig,
    student: &ParamStore,
    x: &Tensor,
    labels_g: &[usize],
    labels_t: &[usize],
    labels_b: &[usize],
    epoch: usize,
    iter: usize,
) -> Result<StepOutput> {
    let n = labels_g.len();
    if x.dim(0) != 2 * n {
        return Err(Error::ShapeMismatch(format!("{} input rows for {n} labels", x.dim(0))));
    }
    let pass = model
        .net
        .forward(student, x, Mode::Train)
        .map_err(|e| with_context(e, epoch, iter))?;
    let (neck, neck_flip) = split_pair(&pass.neck);
    let logits = pass.logits.as_ref().expect("classifier present").slice_rows(0, n);
    let id = id_loss_grad(&logits, labels_g)?;

    let f_global = bmfn_rows(&neck, &neck_flip)?;
    let trip = hard_triplet_loss_grad(&f_global, labels_g, cfg.loss.margin)?;

    let (top_all, bottom_all) = pool_halves(&pass.maps);
    let (top, top_flip) = split_pair(&top_all);
    let (bottom, bottom_flip) = split_pair(&bottom_all);
    let f_top = bmfn_rows(&top, &top_flip)?;
    let f_bottom = bmfn_rows(&bottom, &bottom_flip)?;
    let st = softmax_triplet_loss_grad(&f_top, labels_t, MiningPolicy::SkipUnmatched)?;
    let sb = softmax_triplet_loss_grad(&f_bottom, labels_b, MiningPolicy::SkipUnmatched)?;
    let w = &cfg.loss;
    let total = finetune_total(id.loss, trip.loss, st.loss, sb.loss, w);
    if !total.is_finite() {
        return Err(non_finite_loss(epoch, iter));
    }

    let mut d_logits = Tensor::zeros(pass.logits.as_ref().unwrap().shape());
    for i in 0..n {
        for (d, g) in d_logits.row_mut(i).iter_mut().zip(id.grad.row(i)) {
            *d = w.alpha * g;
        }
    }
    let mut d_fg = trip.grad;
    d_fg.scale(w.beta);
    let d_neck_half = bmfn_rows_backward(&neck, &neck_flip, &f_global, &d_fg);
    let d_neck = stack_pair(&d_neck_half, &d_neck_half);
    let mut d_ft = st.grad;
    d_ft.scale(w.gamma);
    let mut d_fb = sb.grad;
    d_fb.scale(w.delta);
    let d_top = bmfn_rows_backward(&top, &top_flip, &f_top, &d_ft);
    let d_bottom = bmfn_rows_backward(&bottom, &bottom_flip, &f_bottom, &d_fb);
    let mut d_maps = Tensor::zeros(pass.maps.shape());
    pool_halves_backward(&stack_pair(&d_top, &d_top), &stack_pair(&d_bottom, &d_bottom), &mut d_maps);
    let grads = model.net.backward(
        student,
        &pass,
        Upstream {
            d_maps: Some(d_maps),
            d_pooled: None,
            d_neck: Some(d_neck),
            d_logits: Some(d_logits),
        },
    );
    Ok(StepOutput {
        record: LossRecord {
            epoch,
            iter,
            id_g: id.loss,
            trip_g: trip.loss,
            trip_top: st.loss,
            trip_bottom: sb.loss,
            total,
        },
        grads,
        pass,
    })
}

/// Runs the fusion branches (student halves attending the teacher's global map) in train
/// mode so their batch-norm running statistics track the current features.
fn refresh_fusion_stats(model: &CoreModel, pair: &mut NetworkPair, student_maps: &Tensor, x: &Tensor) -> Result<()> {
    let teacher = model.net.forward(&pair.teacher, x, Mode::Eval)?;
    let (tops, bottoms) = split_batch(student_maps)?;
    let taus: Vec<FeatureMap> = (0..x.dim(0)).map(|i| FeatureMap::from_batch(&teacher.maps, i)).collect();
    for (branch, zetas) in [(Branch::Top, tops), (Branch::Bottom, bottoms)] {
        let ecab = model.ecab_params(&pair.student, branch)?;
        let mut bn = BranchNorm::from_store(&pair.student, branch);
        let batch = fuse_batch(&zetas, &taus, &ecab, &bn, Mode::Train)?;
        commit_branch_stats(&mut bn, &batch);
        bn.write_running_stats(&mut pair.student, branch);
    }
    Ok(())
}

/// Mean-teacher fine-tuning on the target train split. Target identities are never read.
pub fn finetune(cfg: &TrainConfig, pretrained: &Checkpoint, target: &[ImageRecord], out_dir: Option<&Path>) -> Result<TrainOutput> {
    ensure_stage(cfg, Stage::Finetune)?;
    if pretrained.stage != Stage::Pretrain {
        return Err(Error::StageMismatch {
            expected: Stage::Pretrain,
            got: pretrained.stage,
        });
    }
    let train: Vec<&ImageRecord> = target.iter().filter(|r| r.split == Split::Train).collect();
    if train.is_empty() {
        return Err(Error::EmptyTargetSet);
    }
    let ids: Vec<String> = train.iter().map(|r| r.image_id.clone()).collect();
    let images: Vec<Image> = train.iter().map(|r| r.pixels.clone()).collect();
    let model = CoreModel::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.k_clusters.min(images.len());
    let mut pair = init_pair(&model, pretrained, cfg.eta, k, &mut rng)?;
    let mut adam = Adam::new(cfg.weight_decay);
    let mut losses = Vec::new();
    let mut history = pretrained.metric_history.clone();
    if let Some(dir) = out_dir {
        ensure_dir(dir)?;
    }
    let mut checkpoint = None;
    for epoch in 0..cfg.epochs {
        let cluster_cfg = [0u64, 1, 2].map(|view| ClusterConfig {
            k,
            minibatch_size: cfg.cluster.minibatch_size,
            max_iters: cfg.cluster.max_iters,
            seed: cfg.seed.wrapping_add(3 * epoch as u64 + view),
            n_init: cfg.cluster.n_init,
        });
        let assignment = generate_pseudo_labels(&model, &pair, &ids, &images, &cfg.augmentation, &cluster_cfg, epoch)?;
        if let Some(dir) = out_dir {
            write_pseudo_labels(dir, &assignment, epoch)?;
        }
        let lg: Vec<usize> = assignment.iter().map(|a| a.label_global).collect();
        let lt: Vec<usize> = assignment.iter().map(|a| a.label_top).collect();
        let lb: Vec<usize> = assignment.iter().map(|a| a.label_bottom).collect();
        let classes = lg.iter().max().map_or(1, |m| m + 1);
        model.net.reset_classifier(&mut pair.student, classes, &mut rng);
        pair.teacher.set_param(CLASSIFIER, pair.student.param(CLASSIFIER).clone());
        adam.reset_param(CLASSIFIER);
        let sampler = PkSampler::new(&lg, cfg.batch_p, cfg.batch_k)?;
        let lr = learning_rate(cfg, epoch);
        let mut totals = Vec::new();
        let mut skipped = 0usize;
        for iter in 0..cfg.iters_per_epoch {
            let idx = sampler.sample(&mut rng);
            let imgs: Vec<&Image> = idx.iter().map(|&i| &images[i]).collect();
            let (x, aug) = augmented_batch(&imgs, cfg, &mut rng)?;
            let flipped: Vec<Image> = aug.iter().map(Image::flip_horizontal).collect();
            let x_all = stack_pair(&x, &batch_tensor(&flipped, &cfg.augmentation)?);
            let pick = |l: &[usize]| idx.iter().map(|&i| l[i]).collect::<Vec<_>>();
            let step = match finetune_step(&model, cfg, &pair.student, &x_all, &pick(&lg), &pick(&lt), &pick(&lb), epoch, iter) {
                Ok(s) => s,
                Err(Error::DegenerateBatch(_)) => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            adam.step(&mut pair.student, &step.grads, lr);
            model.net.commit_running_stats(&mut pair.student, &step.pass);
            refresh_fusion_stats(&model, &mut pair, &step.pass.maps, &x_all).map_err(|e| with_context(e, epoch, iter))?;
            ema_update(&mut pair);
            totals.push(step.record.total);
            losses.push(step.record);
        }
        history.push(MetricEntry {
            stage: Stage::Finetune,
            epoch,
            name: "loss".into(),
            value: mean(&totals),
        });
        history.push(MetricEntry {
            stage: Stage::Finetune,
            epoch,
            name: "clusters".into(),
            value: classes as f64,
        });
        history.push(MetricEntry {
            stage: Stage::Finetune,
            epoch,
            name: "skipped_batches".into(),
            value: skipped as f64,
        });
        let ck = Checkpoint {
            stage: Stage::Finetune,
            epoch: epoch + 1,
            config: cfg.clone(),
            rng: rng_state(cfg, &rng),
            params: pair.student.clone(),
            teacher: Some(pair.teacher.clone()),
            optimizer: adam.state.clone(),
            ema_step: pair.step,
            metric_history: history.clone(),
        };
        if let Some(dir) = out_dir {
            ck.save(&dir.join(format!("finetune_epoch{}.ckpt", epoch + 1)))?;
            write_file(&dir.join("finetune_losses.csv"), &loss_csv(&losses))?;
        }
        checkpoint = Some(ck);
    }
    Ok(TrainOutput {
        checkpoint: checkpoint.expect("epochs >= 1"),
        losses,
    })
}

fn eval_side(records: &[&ImageRecord]) -> Result<(Vec<Image>, Vec<EvalMeta>)> {
    let mut images = Vec::with_capacity(records.len());
    let mut meta = Vec::with_capacity(records.len());
    for r in records {
        let identity = r.identity.ok_or_else(|| Error::MissingIdentity(r.image_id.clone()))?;
        images.push(r.pixels.clone());
        meta.push(EvalMeta {
            identity,
            camera: r.camera_id,
        });
    }
    Ok((images, meta))
}

/// Query/gallery retrieval metrics of `params` (the teacher after fine-tuning).
pub fn evaluate(cfg: &TrainConfig, params: &ParamStore, records: &[ImageRecord]) -> Result<EvalResult> {
    let model = CoreModel::new(cfg)?;
    let query: Vec<&ImageRecord> = records.iter().filter(|r| r.split == Split::Query).collect();
    let gallery: Vec<&ImageRecord> = records.iter().filter(|r| r.split == Split::Gallery).collect();
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let (q_img, q_meta) = eval_side(&query)?;
    let (g_img, g_meta) = eval_side(&gallery)?;
    let q = embed_images(&model, params, &q_img, &cfg.augmentation)?;
    let g = embed_images(&model, params, &g_img, &cfg.augmentation)?;
    evaluate_reid(&q, &q_meta, &g, &g_meta)
}

/// Evaluates a checkpoint's evaluation network and writes `metrics.json` when asked.
pub fn evaluate_checkpoint(ck: &Checkpoint, records: &[ImageRecord], metrics_path: Option<&Path>) -> Result<EvalResult> {
    let result = evaluate(&ck.config, ck.eval_params(), records)?;
    if let Some(path) = metrics_path {
        MetricsReport::new(&result, ck.config_hash()).write(path)?;
    }
    Ok(result)
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub direct_transfer: EvalResult,
    pub adapted: EvalResult,
    pub pretrained: Checkpoint,
    pub finetuned: Checkpoint,
}

/// Toy data, source assembly, pre-training, direct-transfer evaluation, fine-tuning and
/// evaluation of the teacher. Writes everything under `out_dir`.
pub fn run_toy_experiment(out_dir: &Path, data_spec: &ToyDataSpec, pre_cfg: &TrainConfig, ft_cfg: &TrainConfig) -> Result<ExperimentReport> {
    ensure_dir(out_dir)?;
    let data = make_toy_data(data_spec)?;
    write_toy_data(&out_dir.join("data"), &data)?;
    let source = assemble_source(&data.source)?;
    let pre = pretrain(pre_cfg, &source, Some(&out_dir.join("pretrain")))?;
    let direct = evaluate_checkpoint(&pre.checkpoint, &data.target, Some(&out_dir.join("direct_transfer_metrics.json")))?;
    let ft = finetune(ft_cfg, &pre.checkpoint, &data.target, Some(&out_dir.join("finetune")))?;
    let adapted = evaluate_checkpoint(&ft.checkpoint, &data.target, Some(&out_dir.join("metrics.json")))?;
    let mut finetuned = ft.checkpoint;
    let epoch = finetuned.epoch;
    for (name, value) in [("direct_transfer_mAP", direct.map), ("mAP", adapted.map), ("mAP_margin", adapted.map - direct.map)] {
        finetuned.metric_history.push(MetricEntry {
            stage: Stage::Finetune,
            epoch,
            name: name.into(),
            value,
        });
    }
    finetuned.save(&out_dir.join("final.ckpt"))?;
    Ok(ExperimentReport {
        direct_transfer: direct,
        adapted,
        pretrained: pre.checkpoint,
        finetuned,
    })
}
