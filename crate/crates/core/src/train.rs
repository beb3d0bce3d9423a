//! Multi-task training loop.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::document::AnnotatedDocument;
use crate::error::{Error, Result};
use crate::model::{LossWeights, Model, ModelConfig, PreparedDocument};
use crate::optim::{AdamW, AdamWConfig};
use crate::parallel::{self, Execution};
use crate::tensor::Gradients;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
    /// Global gradient norm limit applied before every optimizer step.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 4,
            learning_rate: 0.001,
            weight_decay: 1e-6,
            loss_weights: LossWeights::default(),
            seed: 0,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = self.loss_weights;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if w.seg < 0.0 || w.parse < 0.0 || w.cls < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.learning_rate <= 0.0 || self.weight_decay < 0.0 || self.clip_norm <= 0.0 {
            return Err(Error::Config("learning_rate and clip_norm must be positive, weight_decay non-negative".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { learning_rate: self.learning_rate, weight_decay: self.weight_decay, ..Default::default() }
    }
}

/// Per-document loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DocLoss {
    pub total: f64,
    pub seg: f64,
    pub parse: Option<f64>,
    pub cls: f64,
}

/// Mean losses over the documents of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub seg: f64,
    pub parse: f64,
    pub cls: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub trace: Vec<EpochLoss>,
    /// Documents whose gold tree is non-projective (parse loss skipped).
    pub non_projective: Vec<String>,
}

fn mix(mut x: u64) -> u64 {
    // splitmix64 finalizer
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Dropout seed of one document visit; independent of execution order.
pub fn dropout_seed(seed: u64, epoch: usize, doc: usize) -> u64 {
    mix(mix(mix(seed) ^ epoch as u64) ^ doc as u64)
}

/// Gradient of the joint loss of one document on a training tape.
pub fn document_gradients(
    model: &Model,
    doc: &PreparedDocument,
    weights: LossWeights,
    dropout_seed: Option<u64>,
) -> Result<(Gradients, DocLoss)> {
    let mut tape = match dropout_seed {
        Some(s) => Tape::training(&model.params, s),
        None => Tape::new(&model.params),
    };
    let loss = model.joint_loss(&mut tape, doc, weights)?;
    let mut grads = Gradients::new(&model.params);
    tape.backward(loss.total, &mut grads)?;
    Ok((grads, DocLoss { total: tape.scalar(loss.total), seg: loss.seg, parse: loss.parse, cls: loss.cls }))
}

/// Mean gradient over a batch. Per-document gradients are computed
/// independently (in parallel when enabled) and summed in batch order.
pub fn batch_gradients(
    model: &Model,
    docs: &[&PreparedDocument],
    weights: LossWeights,
    seeds: &[Option<u64>],
    exec: Execution,
) -> Result<(Gradients, Vec<DocLoss>)> {
    let results = parallel::map_indexed(exec, docs.len(), |i| document_gradients(model, docs[i], weights, seeds[i]));
    let mut total = Gradients::new(&model.params);
    let mut losses = Vec::with_capacity(docs.len());
    for r in results {
        let (g, l) = r?;
        total.add_assign(&g);
        losses.push(l);
    }
    if !docs.is_empty() {
        total.scale(1.0 / docs.len() as f64);
    }
    Ok((total, losses))
}

pub fn train(corpus: &[AnnotatedDocument], model_config: ModelConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(corpus, model_config, config, Execution::default(), |_| {})
}

/// Training with an explicit execution mode and a per-epoch callback.
pub fn train_with(
    corpus: &[AnnotatedDocument],
    model_config: ModelConfig,
    config: &TrainConfig,
    exec: Execution,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<TrainOutcome> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Config("cannot train on an empty corpus".into()));
    }
    let mut model = Model::new(model_config)?;
    let prepared: Vec<PreparedDocument> = corpus.iter().map(PreparedDocument::new).collect();
    let non_projective = prepared.iter().filter(|p| p.oracle.is_none()).map(|p| p.doc.id.clone()).collect();
    let mut optimizer = AdamW::new(config.optimizer(), &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        let mut parse_count = 0usize;
        for batch in order.chunks(config.batch_size) {
            let docs: Vec<&PreparedDocument> = batch.iter().map(|&i| &prepared[i]).collect();
            let seeds: Vec<Option<u64>> = batch.iter().map(|&i| Some(dropout_seed(config.seed, epoch, i))).collect();
            let (mut grads, losses) = batch_gradients(&model, &docs, config.loss_weights, &seeds, exec)?;
            grads.clip_global_norm(config.clip_norm);
            optimizer.step(&mut model.params, &grads);
            for l in losses {
                sums[0] += l.total;
                sums[1] += l.seg;
                sums[3] += l.cls;
                if let Some(p) = l.parse {
                    sums[2] += p;
                    parse_count += 1;
                }
            }
        }
        let n = prepared.len() as f64;
        let entry = EpochLoss {
            epoch: epoch + 1,
            total: sums[0] / n,
            seg: sums[1] / n,
            parse: if parse_count > 0 { sums[2] / parse_count as f64 } else { 0.0 },
            cls: sums[3] / n,
        };
        on_epoch(&entry);
        trace.push(entry);
    }
    Ok(TrainOutcome { model, trace, non_projective })
}

/// Two-column `epoch<TAB>loss` table.
pub fn write_loss_trace<W: Write>(mut w: W, trace: &[EpochLoss]) -> Result<()> {
    writeln!(w, "epoch\tloss")?;
    for e in trace {
        writeln!(w, "{}\t{}", e.epoch, e.total)?;
    }
    w.flush()?;
    Ok(())
}
