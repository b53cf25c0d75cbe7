//! Student/teacher pair: initialization from a pre-trained checkpoint, exponential moving
//! average updates, and the teacher-only retrieval embedding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention_fusion::{bmfn_rows, init_fusion_params, Branch, EcabParams};
use crate::datamodel::Image;
use crate::error::{Error, Result};
use crate::network::{pool_halves, Mode, ParamStore, ReidModel, CLASSIFIER};
use crate::pipeline::checkpoint::Checkpoint;
use crate::pipeline::config::{EcabConfig, Stage, TrainConfig};
use crate::preprocess::{augment, batch_tensor, AugmentStage, AugmentationPolicy};
use crate::tensor::Tensor;

/// Images per forward pass when embedding a dataset.
pub const EMBED_CHUNK: usize = 64;

/// The network architecture plus the fusion-branch shape.
#[derive(Clone, Debug)]
pub struct CoreModel {
    pub net: ReidModel,
    pub ecab: EcabConfig,
}

impl CoreModel {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        Ok(CoreModel {
            net: ReidModel::new(&cfg.net)?,
            ecab: cfg.ecab,
        })
    }

    pub fn channels(&self) -> usize {
        self.net.channels()
    }

    pub fn ecab_params(&self, store: &ParamStore, branch: Branch) -> Result<EcabParams> {
        EcabParams::from_store(store, branch, self.ecab.reduction, self.ecab.hidden)
    }

    pub fn embedding_dim(&self) -> usize {
        3 * self.channels()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkPair {
    pub student: ParamStore,
    pub teacher: ParamStore,
    pub eta: f64,
    pub step: u64,
}

pub fn check_eta(eta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&eta) {
        return Err(Error::InvalidConfig(format!("eta = {eta} outside [0, 1)")));
    }
    Ok(())
}

/// Copies the pre-trained network into both members, replaces the classifier with a fresh
/// `num_classes x C` head and adds fusion-branch parameters. Both members end up identical.
pub fn init_pair<R: Rng + ?Sized>(
    model: &CoreModel,
    pretrained: &Checkpoint,
    eta: f64,
    num_classes: usize,
    rng: &mut R,
) -> Result<NetworkPair> {
    if pretrained.stage != Stage::Pretrain {
        return Err(Error::StageMismatch {
            expected: Stage::Pretrain,
            got: pretrained.stage,
        });
    }
    check_eta(eta)?;
    let template = model.net.init_params(1, &mut ChaCha8Rng::seed_from_u64(0));
    for (name, t) in template.params().filter(|(n, _)| n.as_str() != CLASSIFIER) {
        match pretrained.params.try_param(name) {
            Some(p) if p.shape() == t.shape() => {}
            Some(p) => {
                return Err(Error::ShapeMismatch(format!(
                    "`{name}` is {:?} in the checkpoint, model expects {:?}",
                    p.shape(),
                    t.shape()
                )))
            }
            None => return Err(Error::ShapeMismatch(format!("checkpoint lacks `{name}`"))),
        }
    }
    let mut student = ParamStore::new();
    for (name, t) in pretrained.params.params().filter(|(n, _)| template.contains_param(n)) {
        student.set_param(name.clone(), t.clone());
    }
    for (name, t) in pretrained.params.buffers() {
        student.set_buffer(name.clone(), t.clone());
    }
    model.net.reset_classifier(&mut student, num_classes, rng);
    init_fusion_params(&mut student, model.channels(), model.ecab.reduction, model.ecab.hidden, rng)?;
    Ok(NetworkPair {
        teacher: student.clone(),
        student,
        eta,
        step: 0,
    })
}

/// `teacher <- eta * teacher + (1 - eta) * student` for every parameter; running
/// statistics are copied from the student.
pub fn ema_blend(teacher: &mut ParamStore, student: &ParamStore, eta: f64) {
    for (name, t) in teacher.params_mut() {
        let s = student.param(name);
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = eta * *tv + (1.0 - eta) * sv;
        }
    }
    for (name, b) in student.buffers() {
        teacher.set_buffer(name.clone(), b.clone());
    }
}

pub fn ema_update(pair: &mut NetworkPair) {
    ema_blend(&mut pair.teacher, &pair.student, pair.eta);
    pair.step += 1;
}

/// Eval-mode preprocessing of a batch: resized originals and their mirror images.
pub fn eval_inputs(images: &[Image], policy: &AugmentationPolicy) -> Result<(Tensor, Tensor)> {
    let eval = policy.with_stage(AugmentStage::Eval);
    let resized = images
        .iter()
        .map(|img| augment::<ChaCha8Rng>(img, &eval, None))
        .collect::<Result<Vec<_>>>()?;
    let flipped: Vec<Image> = resized.iter().map(Image::flip_horizontal).collect();
    Ok((batch_tensor(&resized, &eval)?, batch_tensor(&flipped, &eval)?))
}

/// `[N, 3C]` rows of `[global GAP; top GAP; bottom GAP]` in eval mode.
fn concat_descriptor(model: &CoreModel, store: &ParamStore, input: &Tensor) -> Result<Tensor> {
    let pass = model.net.forward(store, input, Mode::Eval)?;
    let (top, bottom) = pool_halves(&pass.maps);
    let (n, c) = (pass.pooled.dim(0), pass.pooled.dim(1));
    let mut out = Tensor::zeros(&[n, 3 * c]);
    for i in 0..n {
        let row = out.row_mut(i);
        row[..c].copy_from_slice(pass.pooled.row(i));
        row[c..2 * c].copy_from_slice(top.row(i));
        row[2 * c..].copy_from_slice(bottom.row(i));
    }
    Ok(out)
}

/// Unit-norm `3C` retrieval embeddings for a set of images, computed with `store`
/// (the teacher at inference time). Fusion branches are not used.
pub fn embed_images(model: &CoreModel, store: &ParamStore, images: &[Image], policy: &AugmentationPolicy) -> Result<Tensor> {
    let dim = model.embedding_dim();
    let mut out = Tensor::zeros(&[images.len(), dim]);
    for (chunk_idx, chunk) in images.chunks(EMBED_CHUNK).enumerate() {
        let (x, x_flip) = eval_inputs(chunk, policy)?;
        let a = concat_descriptor(model, store, &x)?;
        let b = concat_descriptor(model, store, &x_flip)?;
        let e = bmfn_rows(&a, &b)?;
        for i in 0..chunk.len() {
            out.row_mut(chunk_idx * EMBED_CHUNK + i).copy_from_slice(e.row(i));
        }
    }
    Ok(out)
}

pub fn inference_embed(model: &CoreModel, teacher: &ParamStore, image: &Image, policy: &AugmentationPolicy) -> Result<Vec<f64>> {
    Ok(embed_images(model, teacher, std::slice::from_ref(image), policy)?.into_data())
}
