//! Synthetic page streams with the length and relation statistics of a
//! real administrative corpus, plus OCR noise.

use std::collections::{BTreeSet, HashSet};

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::document::{derive_seg_tags, AnnotatedDocument, Arc, ArcLabel, Page, PageDependencyTree};
use crate::error::{Error, Result};

pub const ORIGINAL: &str = "ORIGINAL";
pub const COPY: &str = "COPY";
const ATTACHMENT_MARKERS: [&str; 4] = ["ATTACHMENT", "ANNEX", "ENCLOSURE", "APPENDIX"];
const SPECKS: [&str; 6] = [".", "|", "-", "~", "'", ","];
const ALPHANUMERIC: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789";
const CLASS_VOCABULARY: usize = 20;
const FILLER_VOCABULARY: usize = 60;
/// Visual dimensions carrying layout cues: a letterhead band marks segment
/// heads, a stamp band marks attachments.
const LETTERHEAD: std::ops::Range<usize> = 0..4;
const STAMP: std::ops::Range<usize> = 4..8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_documents: usize,
    pub seed: u64,
    pub stream_length_mean: f64,
    pub stream_length_std: f64,
    pub stream_length_min: usize,
    pub stream_length_max: usize,
    /// Weight of subdocument length `i + 1` at position `i`.
    pub subdoc_length_weights: Vec<f64>,
    pub p_copy: f64,
    pub p_atch: f64,
    pub p_empty: f64,
    pub ocr_char_error_rate: f64,
    pub ocr_block_shuffle: bool,
    pub n_classes: usize,
    pub visual_dim: usize,
    /// Classes printed on both sides.
    pub two_sided_classes: Vec<usize>,
    /// Probability that a continuation page of a two-sided class is the
    /// back of the preceding front page.
    pub p_back: f64,
    /// Give back pages their own visual prototype.
    pub back_visual_cue: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_documents: 146,
            seed: 0,
            stream_length_mean: 36.6,
            stream_length_std: 18.2,
            stream_length_min: 4,
            stream_length_max: 82,
            subdoc_length_weights: vec![1780.0, 845.0, 193.0, 208.0, 26.0, 33.0, 16.0],
            p_copy: 0.15,
            p_atch: 0.25,
            p_empty: 0.05,
            ocr_char_error_rate: 0.01,
            ocr_block_shuffle: true,
            n_classes: 8,
            visual_dim: 64,
            two_sided_classes: vec![0, 1],
            p_back: 0.5,
            back_visual_cue: true,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("generator: {m}")));
        let w = &self.subdoc_length_weights;
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) || !w.iter().any(|x| *x > 0.0) {
            return fail("subdoc_length_weights must be non-negative with at least one positive".into());
        }
        for (name, p) in [
            ("p_copy", self.p_copy),
            ("p_atch", self.p_atch),
            ("p_empty", self.p_empty),
            ("p_back", self.p_back),
            ("ocr_char_error_rate", self.ocr_char_error_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} = {p} is not a probability"));
            }
        }
        if self.stream_length_min == 0 || self.stream_length_min > self.stream_length_max {
            return fail("need 1 <= stream_length_min <= stream_length_max".into());
        }
        if !self.stream_length_mean.is_finite() || self.stream_length_std.is_nan() || self.stream_length_std < 0.0 {
            return fail("stream length mean must be finite and std non-negative".into());
        }
        if self.n_classes == 0 || self.visual_dim == 0 {
            return fail("n_classes and visual_dim must be positive".into());
        }
        if let Some(c) = self.two_sided_classes.iter().find(|&&c| c >= self.n_classes) {
            return fail(format!("two-sided class {c} out of range"));
        }
        Ok(())
    }
}

/// Fixed per-corpus appearance of every class.
struct Prototypes {
    vocab: Vec<Vec<String>>,
    filler: Vec<String>,
    visual: Vec<Vec<f64>>,
    back: Vec<f64>,
}

fn random_word<R: Rng>(rng: &mut R, seen: &mut HashSet<String>) -> String {
    loop {
        let len = rng.random_range(4..=8);
        let w: String = (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect();
        if seen.insert(w.clone()) {
            return w;
        }
    }
}

impl Prototypes {
    fn new<R: Rng>(rng: &mut R, config: &GeneratorConfig) -> Self {
        let mut seen = HashSet::new();
        let vocab = (0..config.n_classes)
            .map(|_| (0..CLASS_VOCABULARY).map(|_| random_word(rng, &mut seen)).collect())
            .collect();
        let filler = (0..FILLER_VOCABULARY).map(|_| random_word(rng, &mut seen)).collect();
        let proto = |rng: &mut R| (0..config.visual_dim).map(|_| rng.random::<f64>()).collect::<Vec<f64>>();
        let visual = (0..config.n_classes).map(|_| proto(rng)).collect();
        let back = proto(rng);
        Prototypes { vocab, filler, visual, back }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PageKind {
    Head,
    Next,
    Back,
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    Root,
    Attachment,
    Copy,
}

/// A page before OCR noise, kept so that copies can be re-noised.
#[derive(Clone)]
struct CleanPage {
    kind: PageKind,
    tokens: Vec<String>,
    visual: Vec<f64>,
}

struct Segment {
    start: usize,
    pages: Vec<CleanPage>,
    role: Role,
    class: usize,
}

fn jitter<R: Rng>(rng: &mut R, base: &[f64], std: f64) -> Vec<f64> {
    let noise = Normal::new(0.0, std).expect("positive std");
    base.iter().map(|&v| (v + noise.sample(rng)).clamp(0.0, 1.0)).collect()
}

fn set_band(v: &mut [f64], band: std::ops::Range<usize>, value: f64) {
    let end = band.end.min(v.len());
    for x in v.iter_mut().take(end).skip(band.start) {
        *x = value;
    }
}

struct Generator<'c> {
    config: &'c GeneratorConfig,
    protos: Prototypes,
    lengths: WeightedIndex<f64>,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn content_tokens(&mut self, class: usize, count: usize) -> Vec<String> {
        (0..count)
            .map(|_| {
                let pool = if self.rng.random_bool(0.5) { &self.protos.vocab[class] } else { &self.protos.filler };
                pool[self.rng.random_range(0..pool.len())].clone()
            })
            .collect()
    }

    fn clean_page(&mut self, kind: PageKind, role: Role, class: usize, k: usize, m: usize) -> CleanPage {
        let two_sided = self.config.two_sided_classes.contains(&class);
        match kind {
            PageKind::Empty => {
                let n = self.rng.random_range(0..=2);
                let tokens = (0..n).map(|_| SPECKS[self.rng.random_range(0..SPECKS.len())].to_string()).collect();
                let visual = (0..self.config.visual_dim).map(|_| self.rng.random_range(0.0..0.02)).collect();
                CleanPage { kind, tokens, visual }
            }
            PageKind::Back => {
                let n = self.rng.random_range(3..=12);
                let tokens = self.content_tokens(class, n);
                let visual = if self.config.back_visual_cue {
                    jitter(&mut self.rng, &self.protos.back.clone(), 0.05)
                } else {
                    self.layout_visual(class, false, false)
                };
                CleanPage { kind, tokens, visual }
            }
            PageKind::Head | PageKind::Next => {
                let n = self.rng.random_range(30..=120);
                let mut tokens = self.content_tokens(class, n);
                let head = kind == PageKind::Head;
                if head {
                    tokens.insert(0, ORIGINAL.to_string());
                    if role == Role::Attachment {
                        for _ in 0..2 {
                            let at = self.rng.random_range(0..=tokens.len());
                            let marker = ATTACHMENT_MARKERS[self.rng.random_range(0..ATTACHMENT_MARKERS.len())];
                            tokens.insert(at, marker.to_string());
                        }
                    }
                }
                if m > 1 && !two_sided {
                    tokens.extend(["page".to_string(), (k + 1).to_string(), "of".to_string(), m.to_string()]);
                }
                let visual = self.layout_visual(class, head, head && role == Role::Attachment);
                CleanPage { kind, tokens, visual }
            }
        }
    }

    fn layout_visual(&mut self, class: usize, head: bool, stamp: bool) -> Vec<f64> {
        let base = self.protos.visual[class].clone();
        let mut v = jitter(&mut self.rng, &base, 0.05);
        set_band(&mut v, LETTERHEAD, if head { 0.9 } else { 0.1 });
        set_band(&mut v, STAMP, if stamp { 0.9 } else { 0.1 });
        v
    }

    fn fresh_segment(&mut self, start: usize, len: usize, role: Role) -> Segment {
        let class = self.rng.random_range(0..self.config.n_classes);
        let two_sided = self.config.two_sided_classes.contains(&class);
        let mut pages: Vec<CleanPage> = Vec::with_capacity(len);
        for k in 0..len {
            let front = pages.last().is_some_and(|p| matches!(p.kind, PageKind::Head | PageKind::Next));
            let kind = if k == 0 {
                PageKind::Head
            } else if self.rng.random_bool(self.config.p_empty) {
                PageKind::Empty
            } else if two_sided && front && self.rng.random_bool(self.config.p_back) {
                PageKind::Back
            } else {
                PageKind::Next
            };
            pages.push(self.clean_page(kind, role, class, k, len));
        }
        Segment { start, pages, role, class }
    }

    fn copy_segment(&mut self, start: usize, len: usize, original: &Segment) -> Segment {
        let pages = original.pages[..len]
            .iter()
            .map(|p| {
                let mut tokens = p.tokens.clone();
                if let Some(t) = tokens.iter_mut().find(|t| *t == ORIGINAL) {
                    *t = COPY.to_string();
                }
                let visual = jitter(&mut self.rng, &p.visual, 0.02);
                CleanPage { kind: p.kind, tokens, visual }
            })
            .collect();
        Segment { start, pages, role: Role::Copy, class: original.class }
    }

    fn stream_length(&mut self) -> usize {
        let c = self.config;
        let x = if c.stream_length_std > 0.0 {
            Normal::new(c.stream_length_mean, c.stream_length_std).expect("valid normal").sample(&mut self.rng)
        } else {
            c.stream_length_mean
        };
        (x.round().max(0.0) as usize).clamp(c.stream_length_min, c.stream_length_max)
    }

    fn document(&mut self, id: String) -> AnnotatedDocument {
        let n = self.stream_length();
        let mut segments: Vec<Segment> = Vec::new();
        let mut arcs = Vec::with_capacity(n);
        let mut main_head = 0;
        let mut next_start = 1;
        while next_start <= n {
            let remaining = n - next_start + 1;
            let drawn = self.lengths.sample(&mut self.rng) + 1;
            let seg = match segments.last() {
                Some(prev) if prev.role != Role::Copy && self.rng.random_bool(self.config.p_copy) => {
                    let len = prev.pages.len().min(remaining);
                    arcs.push(Arc::new(prev.start, ArcLabel::Copy, next_start));
                    let prev = segments.pop().expect("checked above");
                    let copy = self.copy_segment(next_start, len, &prev);
                    segments.push(prev);
                    copy
                }
                Some(_) if self.rng.random_bool(self.config.p_atch) => {
                    arcs.push(Arc::new(main_head, ArcLabel::Atch, next_start));
                    self.fresh_segment(next_start, drawn.min(remaining), Role::Attachment)
                }
                _ => {
                    arcs.push(Arc::new(0, ArcLabel::Root, next_start));
                    main_head = next_start;
                    self.fresh_segment(next_start, drawn.min(remaining), Role::Root)
                }
            };
            for (k, p) in seg.pages.iter().enumerate().skip(1) {
                let label = if p.kind == PageKind::Back { ArcLabel::Back } else { ArcLabel::Next };
                arcs.push(Arc::new(seg.start + k - 1, label, seg.start + k));
            }
            next_start += seg.pages.len();
            segments.push(seg);
        }

        let tree = PageDependencyTree::new(n, arcs);
        let mut pages = Vec::with_capacity(n);
        let mut classes = Vec::with_capacity(n);
        let mut empty = BTreeSet::new();
        for seg in &segments {
            for (k, p) in seg.pages.iter().enumerate() {
                let index = seg.start + k;
                let tokens = apply_ocr_noise(
                    &p.tokens,
                    self.config.ocr_char_error_rate,
                    self.config.ocr_block_shuffle,
                    &mut self.rng,
                );
                pages.push(Page::new(index, tokens, p.visual.clone()));
                classes.push(seg.class);
                if p.kind == PageKind::Empty {
                    empty.insert(index);
                }
            }
        }
        let seg_tags = derive_seg_tags(&tree, &empty);
        AnnotatedDocument { id, pages, tree, seg_tags, classes }
    }
}

/// Deterministic in `config.seed`.
pub fn generate_corpus(config: &GeneratorConfig) -> Result<Vec<AnnotatedDocument>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let protos = Prototypes::new(&mut rng, config);
    let lengths = WeightedIndex::new(&config.subdoc_length_weights).map_err(|e| Error::Config(e.to_string()))?;
    let mut g = Generator { config, protos, lengths, rng };
    Ok((0..config.n_documents).map(|d| g.document(format!("doc{d:05}"))).collect())
}

fn substitute<R: Rng + ?Sized>(c: char, rng: &mut R) -> char {
    loop {
        let s = ALPHANUMERIC[rng.random_range(0..ALPHANUMERIC.len())] as char;
        if s != c {
            return s;
        }
    }
}

/// Character substitutions at `rate`, then optionally a permutation of 2 to
/// 6 contiguous token blocks.
pub fn apply_ocr_noise<R: Rng + ?Sized>(tokens: &[String], rate: f64, shuffle_blocks: bool, rng: &mut R) -> Vec<String> {
    let mut out: Vec<String> = if rate > 0.0 {
        tokens
            .iter()
            .map(|t| t.chars().map(|c| if rng.random_bool(rate) { substitute(c, rng) } else { c }).collect())
            .collect()
    } else {
        tokens.to_vec()
    };
    if shuffle_blocks && out.len() >= 2 {
        let blocks = rng.random_range(2..=out.len().min(6));
        let mut cuts: Vec<usize> = rand::seq::index::sample(rng, out.len() - 1, blocks - 1).into_iter().map(|c| c + 1).collect();
        cuts.sort_unstable();
        let mut parts = Vec::with_capacity(blocks);
        let mut from = 0;
        for &c in cuts.iter().chain(std::iter::once(&out.len())) {
            parts.push(out[from..c].to_vec());
            from = c;
        }
        parts.shuffle(rng);
        out = parts.concat();
    }
    out
}

/// Document-level `k`-fold split as index lists; fold sizes differ by at
/// most one.
pub fn split_folds(n_documents: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > n_documents {
        return Err(Error::Config(format!("fold count {k} must lie in [2, {n_documents}]")));
    }
    let mut order: Vec<usize> = (0..n_documents).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, d) in order.into_iter().enumerate() {
        folds[i % k].push(d);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}
