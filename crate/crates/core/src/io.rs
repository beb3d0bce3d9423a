//! Corpus files (one JSON document per line) and the tab-separated
//! prediction format.
//!
//! Corpus record:
//!
//! ```text
//! {"id":"d1","pages":[{"tokens":["a"],"visual":[0.5]}],"seg_tags":["HEAD"],
//!  "heads":[0],"labels":["root"],"classes":[0]}
//! ```
//!
//! Prediction format, one tab-separated page per line, documents separated
//! by a blank line:
//!
//! ```text
//! #id:d1
//! 1    HEAD    0    root    0
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::document::{AnnotatedDocument, ArcLabel, DocumentError, Page, PageDependencyTree, SegTag};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct PageRecord {
    tokens: Vec<String>,
    visual: Vec<f64>,
}

#[derive(Serialize)]
struct DocumentRecord<'a> {
    id: &'a str,
    pages: Vec<PageRecordRef<'a>>,
    seg_tags: &'a [SegTag],
    heads: Vec<usize>,
    labels: Vec<ArcLabel>,
    classes: &'a [usize],
}

#[derive(Serialize)]
struct PageRecordRef<'a> {
    tokens: &'a [String],
    visual: &'a [f64],
}

/// Serializes one document as a single JSON line (without the newline).
pub fn document_to_line(doc: &AnnotatedDocument) -> String {
    let rec = DocumentRecord {
        id: &doc.id,
        pages: doc.pages.iter().map(|p| PageRecordRef { tokens: &p.tokens, visual: &p.visual }).collect(),
        seg_tags: &doc.seg_tags,
        heads: doc.tree.heads(),
        labels: doc.tree.labels(),
        classes: &doc.classes,
    };
    serde_json::to_string(&rec).expect("corpus records always serialize")
}

fn field<T: DeserializeOwned>(obj: &mut serde_json::Map<String, Value>, name: &'static str, line: usize) -> Result<T> {
    let value = obj.remove(name).ok_or_else(|| Error::Format { line, field: name, message: "missing field".into() })?;
    serde_json::from_value(value).map_err(|e| Error::Format { line, field: name, message: e.to_string() })
}

/// Parses one corpus line. `line` is 1-based and only used in errors.
pub fn document_from_line(text: &str, line: usize) -> Result<AnnotatedDocument> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| Error::Format { line, field: "record", message: e.to_string() })?;
    let Value::Object(mut obj) = value else {
        return Err(Error::Format { line, field: "record", message: "expected a JSON object".into() });
    };
    let id: String = field(&mut obj, "id", line)?;
    let pages: Vec<PageRecord> = field(&mut obj, "pages", line)?;
    let seg_tags: Vec<SegTag> = field(&mut obj, "seg_tags", line)?;
    let heads: Vec<usize> = field(&mut obj, "heads", line)?;
    let labels: Vec<ArcLabel> = field(&mut obj, "labels", line)?;
    let classes: Vec<usize> = field(&mut obj, "classes", line)?;
    if let Some(extra) = obj.keys().next() {
        return Err(Error::Format { line, field: "record", message: format!("unknown field `{extra}`") });
    }
    if heads.len() != labels.len() {
        return Err(Error::Format {
            line,
            field: "labels",
            message: format!("{} labels for {} heads", labels.len(), heads.len()),
        });
    }
    let pages: Vec<Page> =
        pages.into_iter().enumerate().map(|(i, p)| Page::new(i + 1, p.tokens, p.visual)).collect();
    let doc = AnnotatedDocument { id, pages, tree: PageDependencyTree::from_heads(&heads, &labels), seg_tags, classes };
    doc.validate(None).map_err(|source| Error::InvalidDocument { line, source })?;
    Ok(doc)
}

#[derive(Deserialize)]
struct StreamRecord {
    id: String,
    pages: Vec<PageRecord>,
}

/// Page streams to be parsed: the corpus format with the annotation fields
/// optional and ignored.
pub fn read_streams<R: Read>(input: R) -> Result<Vec<(String, Vec<Page>)>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StreamRecord =
            serde_json::from_str(&line).map_err(|e| Error::Format { line: i + 1, field: "record", message: e.to_string() })?;
        let pages = rec.pages.into_iter().enumerate().map(|(k, p)| Page::new(k + 1, p.tokens, p.visual)).collect();
        out.push((rec.id, pages));
    }
    Ok(out)
}

pub fn write_corpus<W: Write>(mut out: W, docs: &[AnnotatedDocument]) -> Result<()> {
    for doc in docs {
        doc.validate(None).map_err(|source| Error::InvalidDocument { line: 0, source })?;
        writeln!(out, "{}", document_to_line(doc))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_corpus<R: Read>(input: R) -> Result<Vec<AnnotatedDocument>> {
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        docs.push(document_from_line(&line, i + 1)?);
    }
    Ok(docs)
}

pub fn save_corpus(path: impl AsRef<Path>, docs: &[AnnotatedDocument]) -> Result<()> {
    write_corpus(BufWriter::new(File::create(path)?), docs)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<AnnotatedDocument>> {
    read_corpus(File::open(path)?)
}

/// Model output for one document.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub seg_tags: Vec<SegTag>,
    pub tree: PageDependencyTree,
    pub classes: Vec<usize>,
}

pub fn write_predictions<W: Write>(mut out: W, predictions: &[Prediction]) -> Result<()> {
    for (k, p) in predictions.iter().enumerate() {
        if k > 0 {
            writeln!(out)?;
        }
        writeln!(out, "#id:{}", p.id)?;
        for i in 0..p.tree.n_pages {
            let arc = p.tree.incoming(i + 1).ok_or_else(|| {
                Error::InvalidDocument {
                    line: 0,
                    source: DocumentError::LengthMismatch {
                        id: p.id.clone(),
                        field: "tree",
                        found: p.tree.arcs.len(),
                        expected: p.tree.n_pages,
                    },
                }
            })?;
            writeln!(out, "{}\t{}\t{}\t{}\t{}", i + 1, p.seg_tags[i], arc.head, arc.label, p.classes[i])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_predictions<R: Read>(input: R) -> Result<Vec<Prediction>> {
    type Partial = (String, Vec<SegTag>, Vec<usize>, Vec<ArcLabel>, Vec<usize>);
    fn finish(cur: Option<Partial>, out: &mut Vec<Prediction>) {
        if let Some((id, seg_tags, heads, labels, classes)) = cur {
            out.push(Prediction { id, seg_tags, tree: PageDependencyTree::from_heads(&heads, &labels), classes });
        }
    }
    let mut out = Vec::new();
    let mut cur = None;
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            finish(cur.take(), &mut out);
            continue;
        }
        if let Some(id) = line.strip_prefix("#id:") {
            finish(cur.take(), &mut out);
            cur = Some((id.to_string(), Vec::new(), Vec::new(), Vec::new(), Vec::new()));
            continue;
        }
        let Some((_, seg, heads, labels, classes)) = cur.as_mut() else {
            return Err(Error::Format { line: lineno, field: "id", message: "page line before `#id:` header".into() });
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(Error::Format { line: lineno, field: "line", message: format!("{} columns, expected 5", cols.len()) });
        }
        let bad = |field: &'static str, message: String| Error::Format { line: lineno, field, message };
        let index: usize = cols[0].parse().map_err(|e| bad("INDEX", format!("{e}")))?;
        if index != seg.len() + 1 {
            return Err(bad("INDEX", format!("expected {}, found {index}", seg.len() + 1)));
        }
        seg.push(cols[1].parse().map_err(|e| bad("SEG", e))?);
        heads.push(cols[2].parse().map_err(|e| bad("HEAD", format!("{e}")))?);
        labels.push(cols[3].parse().map_err(|e| bad("DEPREL", e))?);
        classes.push(cols[4].parse().map_err(|e| bad("CLASS", format!("{e}")))?);
    }
    finish(cur, &mut out);
    Ok(out)
}

pub fn save_predictions(path: impl AsRef<Path>, predictions: &[Prediction]) -> Result<()> {
    write_predictions(BufWriter::new(File::create(path)?), predictions)
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    read_predictions(File::open(path)?)
}
