//! Pages, annotated document streams and the page dependency tree.
//!
//! A stream of `N` pages is treated like a sentence of `N` tokens with an
//! artificial root token at index 0. Every page receives exactly one
//! incoming arc `(head, label, dependent)`; the arc set must form a tree
//! rooted at 0.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relation between a head page and its dependent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArcLabel {
    Atch,
    Copy,
    Back,
    Next,
    Root,
}

impl ArcLabel {
    pub const ALL: [ArcLabel; 5] = [
        ArcLabel::Atch,
        ArcLabel::Copy,
        ArcLabel::Back,
        ArcLabel::Next,
        ArcLabel::Root,
    ];

    /// Labels that may appear on arcs between two real pages.
    pub const NON_ROOT: [ArcLabel; 4] = [ArcLabel::Atch, ArcLabel::Copy, ArcLabel::Back, ArcLabel::Next];

    pub fn as_str(self) -> &'static str {
        match self {
            ArcLabel::Atch => "atch",
            ArcLabel::Copy => "copy",
            ArcLabel::Back => "back",
            ArcLabel::Next => "next",
            ArcLabel::Root => "root",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Whether this label keeps the dependent inside its head's segment.
    pub fn continues_segment(self) -> bool {
        matches!(self, ArcLabel::Next | ArcLabel::Back)
    }
}

impl fmt::Display for ArcLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArcLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ArcLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| format!("unknown arc label `{s}`"))
    }
}

/// Page stream segmentation tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SegTag {
    Head,
    Inter,
    Empty,
}

impl SegTag {
    pub const ALL: [SegTag; 3] = [SegTag::Head, SegTag::Inter, SegTag::Empty];

    pub fn as_str(self) -> &'static str {
        match self {
            SegTag::Head => "HEAD",
            SegTag::Inter => "INTER",
            SegTag::Empty => "EMPTY",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<SegTag> {
        SegTag::ALL.get(i).copied()
    }
}

impl fmt::Display for SegTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SegTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SegTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown segmentation tag `{s}`"))
    }
}

/// One scanned page: OCR tokens plus a layout feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Page {
    /// 1-based position in the stream.
    pub index: usize,
    pub tokens: Vec<String>,
    pub visual: Vec<f64>,
}

impl Page {
    pub fn new(index: usize, tokens: Vec<String>, visual: Vec<f64>) -> Self {
        Page { index, tokens, visual }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Arc {
    pub head: usize,
    pub label: ArcLabel,
    pub dependent: usize,
}

impl Arc {
    pub fn new(head: usize, label: ArcLabel, dependent: usize) -> Self {
        Arc { head, label, dependent }
    }
}

/// A single violated tree constraint. Constraint numbers follow the usual
/// dependency-graph well-formedness conditions (3: every page has a head,
/// 4: nothing points at the root, 5: one label per pair, 6: one head per page).
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    MissingHead { dependent: usize },
    ArcIntoRoot { head: usize },
    MultipleLabels { head: usize, dependent: usize },
    MultipleHeads { dependent: usize },
    Cycle { nodes: Vec<usize> },
    Unreachable { node: usize },
    RootLabelMismatch { head: usize, dependent: usize },
}

impl Violation {
    /// Numbered constraint this violation breaks, if it is one of them.
    /// Cycles, disconnection and root-label misuse are tree-shape
    /// conditions without a number.
    pub fn constraint(&self) -> Option<u8> {
        match self {
            Violation::MissingHead { .. } => Some(3),
            Violation::ArcIntoRoot { .. } => Some(4),
            Violation::MultipleLabels { .. } => Some(5),
            Violation::MultipleHeads { .. } => Some(6),
            _ => None,
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MissingHead { dependent } => write!(f, "constraint 3: page {dependent} has no head"),
            Violation::ArcIntoRoot { head } => write!(f, "constraint 4: arc from {head} into the root"),
            Violation::MultipleLabels { head, dependent } => {
                write!(f, "constraint 5: pair ({head}, {dependent}) carries several labels")
            }
            Violation::MultipleHeads { dependent } => write!(f, "constraint 6: page {dependent} has several heads"),
            Violation::Cycle { nodes } => write!(f, "cycle through pages {nodes:?}"),
            Violation::Unreachable { node } => write!(f, "page {node} is not reachable from the root"),
            Violation::RootLabelMismatch { head, dependent } => {
                write!(f, "arc ({head}, {dependent}): label root is used iff the head is 0")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum TreeError {
    #[error("arc ({head}, {dependent}) references a page outside 0..={n_pages}")]
    OutOfRange { head: usize, dependent: usize, n_pages: usize },
    #[error("tree violates {} constraint(s): {}", .0.len(), join(.0))]
    Violations(Vec<Violation>),
    #[error("tree is not projective")]
    NonProjective,
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

/// Rooted labeled tree over pages `0..=n_pages`, page 0 being the root.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PageDependencyTree {
    pub n_pages: usize,
    pub arcs: Vec<Arc>,
}

impl PageDependencyTree {
    pub fn new(n_pages: usize, arcs: Vec<Arc>) -> Self {
        PageDependencyTree { n_pages, arcs }
    }

    /// Builds a tree from per-page heads and labels (entry `i` describes page `i + 1`).
    pub fn from_heads(heads: &[usize], labels: &[ArcLabel]) -> Self {
        assert_eq!(heads.len(), labels.len(), "heads and labels differ in length");
        let arcs = heads
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (&h, &l))| Arc::new(h, l, i + 1))
            .collect();
        PageDependencyTree { n_pages: heads.len(), arcs }
    }

    /// Incoming arc of `dependent`, the first one if there are several.
    pub fn incoming(&self, dependent: usize) -> Option<&Arc> {
        self.arcs.iter().find(|a| a.dependent == dependent)
    }

    pub fn head_of(&self, dependent: usize) -> Option<usize> {
        self.incoming(dependent).map(|a| a.head)
    }

    pub fn label_of(&self, dependent: usize) -> Option<ArcLabel> {
        self.incoming(dependent).map(|a| a.label)
    }

    /// Heads of pages `1..=n` in page order. Only meaningful on valid trees.
    pub fn heads(&self) -> Vec<usize> {
        (1..=self.n_pages).map(|d| self.head_of(d).unwrap_or(0)).collect()
    }

    pub fn labels(&self) -> Vec<ArcLabel> {
        (1..=self.n_pages).map(|d| self.label_of(d).unwrap_or(ArcLabel::Root)).collect()
    }

    /// Arcs sorted by dependent; a canonical form for comparisons.
    pub fn sorted_arcs(&self) -> Vec<Arc> {
        let mut arcs = self.arcs.clone();
        arcs.sort_by_key(|a| (a.dependent, a.head, a.label));
        arcs
    }

    pub fn validate(&self) -> Result<(), TreeError> {
        validate_tree(self)
    }
}

/// Checks every tree constraint and reports all violations at once.
pub fn validate_tree(tree: &PageDependencyTree) -> Result<(), TreeError> {
    let n = tree.n_pages;
    if let Some(a) = tree.arcs.iter().find(|a| a.head > n || a.dependent > n) {
        return Err(TreeError::OutOfRange { head: a.head, dependent: a.dependent, n_pages: n });
    }

    let mut violations = Vec::new();
    let mut incoming: Vec<Vec<&Arc>> = vec![Vec::new(); n + 1];
    for a in &tree.arcs {
        incoming[a.dependent].push(a);
    }

    if !incoming[0].is_empty() {
        for a in &incoming[0] {
            violations.push(Violation::ArcIntoRoot { head: a.head });
        }
    }
    for (dep, arcs) in incoming.iter().enumerate().skip(1) {
        if arcs.is_empty() {
            violations.push(Violation::MissingHead { dependent: dep });
            continue;
        }
        let heads: BTreeSet<usize> = arcs.iter().map(|a| a.head).collect();
        if heads.len() > 1 {
            violations.push(Violation::MultipleHeads { dependent: dep });
        }
        for &h in &heads {
            let labels: BTreeSet<ArcLabel> = arcs.iter().filter(|a| a.head == h).map(|a| a.label).collect();
            if labels.len() > 1 {
                violations.push(Violation::MultipleLabels { head: h, dependent: dep });
            }
        }
    }
    for a in &tree.arcs {
        if (a.label == ArcLabel::Root) != (a.head == 0) {
            violations.push(Violation::RootLabelMismatch { head: a.head, dependent: a.dependent });
        }
    }

    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n + 1];
    for a in &tree.arcs {
        children[a.head].push(a.dependent);
    }
    if let Some(nodes) = find_cycle(&children) {
        violations.push(Violation::Cycle { nodes });
    }
    let reached = reachable_from_root(&children);
    for (node, &seen) in reached.iter().enumerate().skip(1) {
        if !seen {
            violations.push(Violation::Unreachable { node });
        }
    }

    if violations.is_empty() {
        Ok(())
    } else {
        Err(TreeError::Violations(violations))
    }
}

fn reachable_from_root(children: &[Vec<usize>]) -> Vec<bool> {
    let mut seen = vec![false; children.len()];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(v) = stack.pop() {
        for &c in &children[v] {
            if !seen[c] {
                seen[c] = true;
                stack.push(c);
            }
        }
    }
    seen
}

/// Returns the nodes of one directed cycle, if any exists.
fn find_cycle(children: &[Vec<usize>]) -> Option<Vec<usize>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    let n = children.len();
    let mut mark = vec![Mark::New; n];
    for start in 0..n {
        if mark[start] != Mark::New {
            continue;
        }
        // iterative DFS keeping the active path
        let mut path: Vec<(usize, usize)> = vec![(start, 0)];
        mark[start] = Mark::Active;
        while let Some(&mut (v, ref mut next)) = path.last_mut() {
            if *next < children[v].len() {
                let c = children[v][*next];
                *next += 1;
                match mark[c] {
                    Mark::New => {
                        mark[c] = Mark::Active;
                        path.push((c, 0));
                    }
                    Mark::Active => {
                        let pos = path.iter().position(|&(p, _)| p == c).unwrap_or(0);
                        let mut nodes: Vec<usize> = path[pos..].iter().map(|&(p, _)| p).collect();
                        nodes.sort_unstable();
                        return Some(nodes);
                    }
                    Mark::Done => {}
                }
            } else {
                mark[v] = Mark::Done;
                path.pop();
            }
        }
    }
    None
}

/// True iff no two arcs cross when drawn above `0..=n`.
pub fn is_projective(tree: &PageDependencyTree) -> Result<bool, TreeError> {
    validate_tree(tree)?;
    let spans: Vec<(usize, usize)> =
        tree.arcs.iter().map(|a| (a.head.min(a.dependent), a.head.max(a.dependent))).collect();
    for (i, &(a, b)) in spans.iter().enumerate() {
        for &(c, d) in &spans[i + 1..] {
            if (a < c && c < b && b < d) || (c < a && a < d && d < b) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Segmentation tags implied by a tree: EMPTY for blank pages, HEAD for
/// pages that open a segment (incoming root, atch or copy), INTER otherwise.
pub fn derive_seg_tags(tree: &PageDependencyTree, empty_pages: &BTreeSet<usize>) -> Vec<SegTag> {
    (1..=tree.n_pages)
        .map(|p| {
            if empty_pages.contains(&p) {
                SegTag::Empty
            } else {
                match tree.label_of(p) {
                    Some(l) if l.continues_segment() => SegTag::Inter,
                    _ => SegTag::Head,
                }
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum DocumentError {
    #[error("document `{id}`: {field} has length {found}, expected {expected}")]
    LengthMismatch { id: String, field: &'static str, found: usize, expected: usize },
    #[error("document `{id}`: page {page} has index {index}")]
    PageIndex { id: String, page: usize, index: usize },
    #[error("document `{id}`: page {page} has {found} visual features, expected {expected}")]
    VisualDim { id: String, page: usize, found: usize, expected: usize },
    #[error("document `{id}`: page {page} has class {class}, expected < {n_classes}")]
    ClassRange { id: String, page: usize, class: usize, n_classes: usize },
    #[error("document `{id}`: page {page} has tag {tag} but incoming label {label}")]
    TagInconsistent { id: String, page: usize, tag: SegTag, label: ArcLabel },
    #[error("document `{id}`: {source}")]
    Tree { id: String, source: TreeError },
    #[error("document `{id}` has no pages")]
    NoPages { id: String },
}

/// A page stream with gold annotations for all three tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedDocument {
    pub id: String,
    pub pages: Vec<Page>,
    pub tree: PageDependencyTree,
    pub seg_tags: Vec<SegTag>,
    pub classes: Vec<usize>,
}

impl AnnotatedDocument {
    pub fn n_pages(&self) -> usize {
        self.pages.len()
    }

    /// Checks length agreement, tree validity and tag/label consistency.
    /// `n_classes` bounds the class indices when given.
    pub fn validate(&self, n_classes: Option<usize>) -> Result<(), DocumentError> {
        let id = || self.id.clone();
        let n = self.pages.len();
        if n == 0 {
            return Err(DocumentError::NoPages { id: id() });
        }
        for (field, found) in [
            ("tree", self.tree.n_pages),
            ("seg_tags", self.seg_tags.len()),
            ("classes", self.classes.len()),
        ] {
            if found != n {
                return Err(DocumentError::LengthMismatch { id: id(), field, found, expected: n });
            }
        }
        let dim = self.pages[0].visual.len();
        for (i, page) in self.pages.iter().enumerate() {
            if page.index != i + 1 {
                return Err(DocumentError::PageIndex { id: id(), page: i + 1, index: page.index });
            }
            if page.visual.len() != dim {
                return Err(DocumentError::VisualDim { id: id(), page: i + 1, found: page.visual.len(), expected: dim });
            }
        }
        if let Some(c) = n_classes {
            if let Some((i, &class)) = self.classes.iter().enumerate().find(|(_, &k)| k >= c) {
                return Err(DocumentError::ClassRange { id: id(), page: i + 1, class, n_classes: c });
            }
        }
        validate_tree(&self.tree).map_err(|source| DocumentError::Tree { id: id(), source })?;
        for (i, &tag) in self.seg_tags.iter().enumerate() {
            let label = self.tree.label_of(i + 1).expect("validated tree");
            let ok = if label.continues_segment() { tag != SegTag::Head } else { tag == SegTag::Head };
            if !ok {
                return Err(DocumentError::TagInconsistent { id: id(), page: i + 1, tag, label });
            }
        }
        Ok(())
    }

    /// Pages tagged EMPTY.
    pub fn empty_pages(&self) -> BTreeSet<usize> {
        self.seg_tags
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == SegTag::Empty)
            .map(|(i, _)| i + 1)
            .collect()
    }
}
