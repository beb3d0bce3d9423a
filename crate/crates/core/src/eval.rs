//! Attachment scores, tag metrics and pooled cross-validation.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::document::{AnnotatedDocument, ArcLabel, PageDependencyTree, SegTag};
use crate::error::{Error, Result};
use crate::io::Prediction;
use crate::model::Model;
use crate::parallel::{self, Execution};
use crate::synth::split_folds;

/// `(uas, las)` over pages 1..N.
pub fn attachment_scores(gold: &PageDependencyTree, predicted: &PageDependencyTree) -> Result<(f64, f64)> {
    let (u, l, n) = attachment_counts(gold, predicted)?;
    if n == 0 {
        return Ok((1.0, 1.0));
    }
    Ok((u as f64 / n as f64, l as f64 / n as f64))
}

fn attachment_counts(gold: &PageDependencyTree, predicted: &PageDependencyTree) -> Result<(usize, usize, usize)> {
    if gold.n_pages != predicted.n_pages {
        return Err(Error::Config(format!(
            "attachment scores over {} gold pages and {} predicted pages",
            gold.n_pages, predicted.n_pages
        )));
    }
    let (mut u, mut l) = (0, 0);
    for p in 1..=gold.n_pages {
        let g = gold.incoming(p);
        let q = predicted.incoming(p);
        if let (Some(g), Some(q)) = (g, q) {
            if g.head == q.head {
                u += 1;
                if g.label == q.label {
                    l += 1;
                }
            }
        }
    }
    Ok((u, l, gold.n_pages))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TagMetrics {
    pub accuracy: f64,
    /// Mean F1 over the classes occurring in gold or predictions.
    pub macro_f1: f64,
    /// F1 per class index; 0 for a class without gold or predicted items.
    pub per_class_f1: Vec<f64>,
    /// Whether the class occurs in gold or predictions.
    pub present: Vec<bool>,
}

impl TagMetrics {
    pub fn f1(&self, class: usize) -> f64 {
        self.per_class_f1[class]
    }
}

#[derive(Clone, Debug, Default)]
struct Confusion {
    correct: usize,
    total: usize,
    tp: Vec<usize>,
    fp: Vec<usize>,
    fn_: Vec<usize>,
}

impl Confusion {
    fn new(n_classes: usize) -> Self {
        Confusion { tp: vec![0; n_classes], fp: vec![0; n_classes], fn_: vec![0; n_classes], ..Default::default() }
    }

    fn add(&mut self, gold: usize, pred: usize) {
        self.total += 1;
        if gold == pred {
            self.correct += 1;
            self.tp[gold] += 1;
        } else {
            self.fp[pred] += 1;
            self.fn_[gold] += 1;
        }
    }

    fn metrics(&self) -> TagMetrics {
        let k = self.tp.len();
        let mut per_class_f1 = vec![0.0; k];
        let mut present = vec![false; k];
        for c in 0..k {
            let denom = 2 * self.tp[c] + self.fp[c] + self.fn_[c];
            present[c] = denom > 0;
            if self.tp[c] > 0 {
                per_class_f1[c] = 2.0 * self.tp[c] as f64 / denom as f64;
            }
        }
        let used: Vec<f64> = (0..k).filter(|&c| present[c]).map(|c| per_class_f1[c]).collect();
        let macro_f1 = if used.is_empty() { 0.0 } else { used.iter().sum::<f64>() / used.len() as f64 };
        let accuracy = if self.total == 0 { 0.0 } else { self.correct as f64 / self.total as f64 };
        TagMetrics { accuracy, macro_f1, per_class_f1, present }
    }
}

/// Accuracy and per-class F1 of label sequences over `n_classes` classes.
pub fn tag_metrics(gold: &[usize], predicted: &[usize], n_classes: usize) -> Result<TagMetrics> {
    if gold.len() != predicted.len() {
        return Err(Error::Config(format!("{} gold labels but {} predictions", gold.len(), predicted.len())));
    }
    if let Some(&c) = gold.iter().chain(predicted).find(|&&c| c >= n_classes) {
        return Err(Error::Config(format!("label {c} out of range for {n_classes} classes")));
    }
    let mut conf = Confusion::new(n_classes);
    for (&g, &p) in gold.iter().zip(predicted) {
        conf.add(g, p);
    }
    Ok(conf.metrics())
}

/// How per-label F1 treats the head of the arc.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelScoring {
    /// Only the label of the incoming arc of each page.
    #[default]
    LabelOnly,
    /// A label counts as correct only with the correct head.
    HeadCoupled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_documents: usize,
    pub n_pages: usize,
    pub seg_accuracy: f64,
    pub seg_f1_head: f64,
    pub uas: f64,
    pub las: f64,
    pub cls_accuracy: f64,
    pub cls_macro_f1: f64,
    pub label_scoring: LabelScoring,
    /// F1 of every arc label occurring in gold or predictions.
    pub label_f1: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn label(&self, label: ArcLabel) -> Option<f64> {
        self.label_f1.get(label.as_str()).copied()
    }
}

/// One report over all pages of all documents. `gold` and `predicted` are
/// matched by position and must agree on ids and page counts.
pub fn evaluate(
    gold: &[AnnotatedDocument],
    predicted: &[Prediction],
    n_classes: usize,
    scoring: LabelScoring,
) -> Result<EvalReport> {
    if gold.len() != predicted.len() {
        return Err(Error::Config(format!("{} gold documents but {} predictions", gold.len(), predicted.len())));
    }
    let mut seg = Confusion::new(SegTag::ALL.len());
    let mut cls = Confusion::new(n_classes);
    let mut lab = Confusion::new(ArcLabel::ALL.len());
    let (mut u, mut l, mut n) = (0, 0, 0);
    for (g, p) in gold.iter().zip(predicted) {
        if g.id != p.id || g.n_pages() != p.seg_tags.len() || g.n_pages() != p.classes.len() {
            return Err(Error::Config(format!("prediction `{}` does not match gold document `{}`", p.id, g.id)));
        }
        let (du, dl, dn) = attachment_counts(&g.tree, &p.tree)?;
        u += du;
        l += dl;
        n += dn;
        for (gt, pt) in g.seg_tags.iter().zip(&p.seg_tags) {
            seg.add(gt.index(), pt.index());
        }
        for (&gc, &pc) in g.classes.iter().zip(&p.classes) {
            if gc >= n_classes || pc >= n_classes {
                return Err(Error::Config(format!("class out of range in document `{}`", g.id)));
            }
            cls.add(gc, pc);
        }
        for page in 1..=g.n_pages() {
            let (Some(ga), Some(pa)) = (g.tree.incoming(page), p.tree.incoming(page)) else {
                return Err(Error::Config(format!("page {page} of `{}` has no incoming arc", g.id)));
            };
            let (gl, pl) = (ga.label.index(), pa.label.index());
            match scoring {
                LabelScoring::LabelOnly => lab.add(gl, pl),
                LabelScoring::HeadCoupled => {
                    lab.total += 1;
                    if gl == pl && ga.head == pa.head {
                        lab.correct += 1;
                        lab.tp[gl] += 1;
                    } else {
                        lab.fp[pl] += 1;
                        lab.fn_[gl] += 1;
                    }
                }
            }
        }
    }
    let seg = seg.metrics();
    let cls = cls.metrics();
    let lab = lab.metrics();
    let label_f1 = ArcLabel::ALL
        .iter()
        .filter(|a| lab.present[a.index()])
        .map(|a| (a.as_str().to_string(), lab.per_class_f1[a.index()]))
        .collect();
    let ratio = |a: usize| if n == 0 { 0.0 } else { a as f64 / n as f64 };
    Ok(EvalReport {
        n_documents: gold.len(),
        n_pages: n,
        seg_accuracy: seg.accuracy,
        seg_f1_head: seg.per_class_f1[SegTag::Head.index()],
        uas: ratio(u),
        las: ratio(l),
        cls_accuracy: cls.accuracy,
        cls_macro_f1: cls.macro_f1,
        label_scoring: scoring,
        label_f1,
    })
}

pub fn predict_corpus(model: &Model, docs: &[AnnotatedDocument], exec: Execution) -> Result<Vec<Prediction>> {
    parallel::map(exec, docs, |d| model.predict(d)).into_iter().collect()
}

/// Pooled `k`-fold evaluation: each fold is predicted by a model trained on
/// the remaining folds, then one report is computed over all held-out
/// predictions. Returns the report and the predictions in corpus order.
pub fn crossfold_report<F>(
    corpus: &[AnnotatedDocument],
    k: usize,
    seed: u64,
    n_classes: usize,
    scoring: LabelScoring,
    mut train_fn: F,
) -> Result<(EvalReport, Vec<Prediction>)>
where
    F: FnMut(usize, &[AnnotatedDocument]) -> Result<Model>,
{
    let folds = split_folds(corpus.len(), k, seed)?;
    let mut slots: Vec<Option<Prediction>> = vec![None; corpus.len()];
    for (f, held_out) in folds.iter().enumerate() {
        let train: Vec<AnnotatedDocument> = folds
            .iter()
            .enumerate()
            .filter(|&(g, _)| g != f)
            .flat_map(|(_, idx)| idx.iter().map(|&i| corpus[i].clone()))
            .collect();
        let model = train_fn(f, &train)?;
        let test: Vec<AnnotatedDocument> = held_out.iter().map(|&i| corpus[i].clone()).collect();
        for (&i, p) in held_out.iter().zip(predict_corpus(&model, &test, Execution::default())?) {
            slots[i] = Some(p);
        }
    }
    let predictions: Vec<Prediction> = slots.into_iter().map(|p| p.expect("folds cover the corpus")).collect();
    let report = evaluate(corpus, &predictions, n_classes, scoring)?;
    Ok((report, predictions))
}

/// Text table with one row per named report.
pub fn write_report_table<W: Write>(mut w: W, rows: &[(String, EvalReport)]) -> Result<()> {
    writeln!(w, "{:<16} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}", "model", "seg_acc", "f1_head", "uas", "las", "cls_acc", "cls_f1")?;
    for (name, r) in rows {
        writeln!(
            w,
            "{:<16} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            name, r.seg_accuracy, r.seg_f1_head, r.uas, r.las, r.cls_accuracy, r.cls_macro_f1
        )?;
    }
    Ok(())
}

/// Per-label F1 table; labels absent from a report print as `-`.
pub fn write_label_table<W: Write>(mut w: W, rows: &[(String, EvalReport)]) -> Result<()> {
    write!(w, "{:<16}", "model")?;
    for l in ArcLabel::ALL {
        write!(w, " {:>8}", l.as_str())?;
    }
    writeln!(w)?;
    for (name, r) in rows {
        write!(w, "{name:<16}")?;
        for l in ArcLabel::ALL {
            match r.label(l) {
                Some(f) => write!(w, " {f:>8.4}")?,
                None => write!(w, " {:>8}", "-")?,
            }
        }
        writeln!(w)?;
    }
    Ok(())
}
