//! The joint model: one embedding module feeding a segmentation head, the
//! transition parser and a page classification head.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::document::{AnnotatedDocument, Page, PageDependencyTree, SegTag};
use crate::embed::{EmbeddingConfig, EmbeddingModule, Fusion};
use crate::error::{Error, Result};
use crate::io::Prediction;
use crate::layers::Linear;
use crate::parser::{greedy_decode, oracle_trajectory, OracleStep, ParserNet, ParserNetConfig};
use crate::tensor::{read_checkpoint, write_checkpoint, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embedding: EmbeddingConfig,
    pub parser: ParserNetConfig,
    pub n_classes: usize,
    /// Seed of the parameter initialisation.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { embedding: EmbeddingConfig::default(), parser: ParserNetConfig::default(), n_classes: 8, init_seed: 0 }
    }
}

impl ModelConfig {
    pub fn with_fusion(mut self, fusion: Fusion) -> Self {
        self.embedding.fusion = fusion;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.embedding.validate()?;
        self.parser.validate()?;
        if self.parser.embedding_dim != self.embedding.page_dim {
            return Err(Error::Config(format!(
                "parser embedding_dim {} differs from page_dim {}",
                self.parser.embedding_dim, self.embedding.page_dim
            )));
        }
        if self.n_classes == 0 {
            return Err(Error::Config("n_classes must be positive".into()));
        }
        Ok(())
    }
}

/// Relative weight of each task in the joint loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub seg: f64,
    pub parse: f64,
    pub cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { seg: 1.0, parse: 1.0, cls: 1.0 }
    }
}

/// A training document with its oracle trajectory computed once.
#[derive(Clone, Debug)]
pub struct PreparedDocument<'a> {
    pub doc: &'a AnnotatedDocument,
    /// `None` for non-projective gold trees; their parse loss is skipped.
    pub oracle: Option<Vec<OracleStep>>,
}

impl<'a> PreparedDocument<'a> {
    pub fn new(doc: &'a AnnotatedDocument) -> Self {
        let oracle = oracle_trajectory(&doc.tree).ok().map(|(steps, _)| steps);
        PreparedDocument { doc, oracle }
    }
}

/// Nodes of one shared forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardPass {
    pub contextual: NodeId,
    pub seg_logits: NodeId,
    pub cls_logits: NodeId,
    /// Embedding node consumed by the segmentation head, the parser and
    /// the classification head, in that order.
    pub head_inputs: [NodeId; 3],
}

#[derive(Clone, Copy, Debug)]
pub struct JointLoss {
    pub total: NodeId,
    pub seg: f64,
    pub parse: Option<f64>,
    pub cls: f64,
    pub forward: ForwardPass,
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub embedding: EmbeddingModule,
    pub parser: ParserNet,
    pub seg_head: Linear,
    pub cls_head: Linear,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        let embedding = EmbeddingModule::new(&mut params, &mut rng, config.embedding.clone())?;
        let parser = ParserNet::new(&mut params, &mut rng, config.parser);
        let d = config.embedding.page_dim;
        let seg_head = Linear::new(&mut params, &mut rng, "seg", d, SegTag::ALL.len());
        let cls_head = Linear::new(&mut params, &mut rng, "cls", d, config.n_classes);
        Ok(Model { config, params, embedding, parser, seg_head, cls_head })
    }

    pub fn fusion(&self) -> Fusion {
        self.config.embedding.fusion
    }

    pub fn forward(&self, tape: &mut Tape, pages: &[Page]) -> Result<ForwardPass> {
        let emb = self.embedding.forward(tape, pages)?;
        let x = emb.contextual;
        let seg_logits = self.seg_head.forward(tape, x)?;
        let cls_logits = self.cls_head.forward(tape, x)?;
        Ok(ForwardPass { contextual: x, seg_logits, cls_logits, head_inputs: [x, x, x] })
    }

    /// Weighted sum of the three task losses for one document. A zero
    /// weight drops the task from the graph entirely.
    pub fn joint_loss(&self, tape: &mut Tape, doc: &PreparedDocument, weights: LossWeights) -> Result<JointLoss> {
        let d = doc.doc;
        let forward = self.forward(tape, &d.pages)?;
        let seg_targets: Vec<usize> = d.seg_tags.iter().map(|t| t.index()).collect();
        let seg = tape.softmax_cross_entropy(forward.seg_logits, &seg_targets, None)?;
        let cls = tape.softmax_cross_entropy(forward.cls_logits, &d.classes, None)?;
        let mut terms = Vec::new();
        let seg_value = tape.scalar(seg);
        let cls_value = tape.scalar(cls);
        if weights.seg != 0.0 {
            terms.push(tape.scale(seg, weights.seg));
        }
        let mut parse_value = None;
        if let Some(steps) = &doc.oracle {
            let table = self.parser.slot_table(tape, forward.head_inputs[1])?;
            let slots: Vec<_> = steps.iter().map(|s| s.slots).collect();
            let mask: Vec<bool> = steps.iter().flat_map(|s| s.valid).collect();
            let targets: Vec<usize> = steps.iter().map(|s| s.action).collect();
            let logits = self.parser.score_slots(tape, table, &slots)?;
            let parse = tape.softmax_cross_entropy(logits, &targets, Some(&mask))?;
            parse_value = Some(tape.scalar(parse));
            if weights.parse != 0.0 {
                terms.push(tape.scale(parse, weights.parse));
            }
        }
        if weights.cls != 0.0 {
            terms.push(tape.scale(cls, weights.cls));
        }
        let total = match terms.split_first() {
            None => tape.scale(seg, 0.0),
            Some((&first, rest)) => {
                let mut acc = first;
                for &t in rest {
                    acc = tape.add(acc, t)?;
                }
                acc
            }
        };
        Ok(JointLoss { total, seg: seg_value, parse: parse_value, cls: cls_value, forward })
    }

    /// Contextual page embeddings (`pages x page_dim`, row-major) in evaluation mode.
    pub fn embed(&self, pages: &[Page]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let emb = self.embedding.forward(&mut tape, pages)?;
        Ok(tape.value(emb.contextual).to_vec())
    }

    /// Segmentation tags, dependency tree and classes from one shared pass.
    pub fn predict_document(&self, pages: &[Page]) -> Result<(Vec<SegTag>, PageDependencyTree, Vec<usize>)> {
        let n = pages.len();
        if n == 0 {
            return Err(Error::Config("cannot predict an empty page stream".into()));
        }
        let mut tape = Tape::new(&self.params);
        let fp = self.forward(&mut tape, pages)?;
        let argmax = |v: &[f64], k: usize| -> Vec<usize> {
            v.chunks(k)
                .map(|row| row.iter().enumerate().fold(0, |b, (i, &x)| if x > row[b] { i } else { b }))
                .collect()
        };
        let seg = argmax(tape.value(fp.seg_logits), SegTag::ALL.len())
            .into_iter()
            .map(|i| SegTag::from_index(i).expect("three tags"))
            .collect();
        let classes = argmax(tape.value(fp.cls_logits), self.config.n_classes);
        let scorer = self.parser.scorer(&self.params, tape.value(fp.head_inputs[1]))?;
        let (tree, _) = greedy_decode(&scorer);
        Ok((seg, tree, classes))
    }

    pub fn predict(&self, doc: &AnnotatedDocument) -> Result<Prediction> {
        let (seg_tags, tree, classes) = self.predict_document(&doc.pages)?;
        Ok(Prediction { id: doc.id.clone(), seg_tags, tree, classes })
    }

    pub fn write_checkpoint<W: Write>(&self, w: W) -> Result<()> {
        let meta = serde_json::to_string(&self.config).expect("config serializes");
        write_checkpoint(w, &meta, &self.params)
    }

    pub fn read_checkpoint<R: Read>(r: R) -> Result<Model> {
        let (meta, stored) = read_checkpoint(r)?;
        let config: ModelConfig =
            serde_json::from_str(&meta).map_err(|e| Error::Checkpoint(format!("bad model config: {e}")))?;
        let mut model = Model::new(config)?;
        if stored.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors stored, model expects {}",
                stored.len(),
                model.params.len()
            )));
        }
        for (id, t) in model.params.ids().zip(stored.iter()) {
            let slot = model.params.get_mut(id);
            if slot.name != t.name || slot.shape != t.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` {:?} does not match `{}` {:?}",
                    t.name, t.shape, slot.name, slot.shape
                )));
            }
            slot.values.clone_from(&t.values);
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_checkpoint(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        Model::read_checkpoint(BufReader::new(File::open(path)?))
    }
}
