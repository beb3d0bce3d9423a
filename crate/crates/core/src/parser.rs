//! Arc-eager transition system over page sequences, its static oracle, and
//! the feed-forward state scorer used for greedy decoding.
//!
//! Action indices follow a fixed order that also breaks score ties:
//! `SHIFT, REDUCE, LEFT_ARC(atch|copy|back|next), RIGHT_ARC(atch|copy|back|next|root)`.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::document::{is_projective, Arc, ArcLabel, PageDependencyTree, TreeError};
use crate::error::{Error, Result};
use crate::layers::{uniform, Linear};
use crate::tensor::{ParamId, ParamStore, Tensor};

pub const N_ACTIONS: usize = 11;
pub const N_SLOTS: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Transition {
    Shift,
    Reduce,
    LeftArc(ArcLabel),
    RightArc(ArcLabel),
}

impl Transition {
    pub const ALL: [Transition; N_ACTIONS] = [
        Transition::Shift,
        Transition::Reduce,
        Transition::LeftArc(ArcLabel::Atch),
        Transition::LeftArc(ArcLabel::Copy),
        Transition::LeftArc(ArcLabel::Back),
        Transition::LeftArc(ArcLabel::Next),
        Transition::RightArc(ArcLabel::Atch),
        Transition::RightArc(ArcLabel::Copy),
        Transition::RightArc(ArcLabel::Back),
        Transition::RightArc(ArcLabel::Next),
        Transition::RightArc(ArcLabel::Root),
    ];

    pub fn index(self) -> usize {
        match self {
            Transition::Shift => 0,
            Transition::Reduce => 1,
            Transition::LeftArc(l) => 2 + l.index(),
            Transition::RightArc(l) => 6 + l.index(),
        }
    }

    pub fn from_index(i: usize) -> Transition {
        Transition::ALL[i]
    }
}

impl fmt::Display for Transition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transition::Shift => f.write_str("SHIFT"),
            Transition::Reduce => f.write_str("REDUCE"),
            Transition::LeftArc(l) => write!(f, "LEFT_ARC({l})"),
            Transition::RightArc(l) => write!(f, "RIGHT_ARC({l})"),
        }
    }
}

/// Arc-eager configuration. The buffer is always the suffix
/// `buffer_front..=n_pages` of the stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParserState {
    n_pages: usize,
    stack: Vec<usize>,
    buffer_front: usize,
    heads: Vec<Option<usize>>,
    labels: Vec<Option<ArcLabel>>,
    leftmost: Vec<Option<usize>>,
    rightmost: Vec<Option<usize>>,
    arcs: Vec<Arc>,
}

pub fn initial_state(n_pages: usize) -> Result<ParserState> {
    if n_pages < 1 {
        return Err(Error::Config("a parser state needs at least one page".into()));
    }
    Ok(ParserState {
        n_pages,
        stack: vec![0],
        buffer_front: 1,
        heads: vec![None; n_pages + 1],
        labels: vec![None; n_pages + 1],
        leftmost: vec![None; n_pages + 1],
        rightmost: vec![None; n_pages + 1],
        arcs: Vec::new(),
    })
}

impl ParserState {
    pub fn n_pages(&self) -> usize {
        self.n_pages
    }

    pub fn stack(&self) -> &[usize] {
        &self.stack
    }

    pub fn buffer(&self) -> std::ops::RangeInclusive<usize> {
        self.buffer_front..=self.n_pages
    }

    pub fn arcs(&self) -> &[Arc] {
        &self.arcs
    }

    pub fn head(&self, i: usize) -> Option<usize> {
        self.heads[i]
    }

    pub fn is_terminal(&self) -> bool {
        self.buffer_front > self.n_pages
    }

    fn top(&self) -> usize {
        *self.stack.last().expect("root never leaves the stack")
    }

    fn front(&self) -> Option<usize> {
        (!self.is_terminal()).then_some(self.buffer_front)
    }

    fn check(&self, t: Transition) -> std::result::Result<(), &'static str> {
        let top = self.top();
        let has_buffer = !self.is_terminal();
        match t {
            Transition::Shift if !has_buffer => Err("buffer is empty"),
            Transition::Reduce if self.heads[top].is_none() => Err("stack top has no head"),
            Transition::LeftArc(_) | Transition::RightArc(_) if !has_buffer => Err("buffer is empty"),
            Transition::LeftArc(_) if top == 0 => Err("the root cannot become a dependent"),
            Transition::LeftArc(ArcLabel::Root) => Err("left arcs cannot carry the root label"),
            Transition::LeftArc(_) if self.heads[top].is_some() => Err("stack top already has a head"),
            Transition::RightArc(ArcLabel::Root) if top != 0 => Err("root label requires the root on top"),
            Transition::RightArc(l) if l != ArcLabel::Root && top == 0 => Err("arcs from the root must be labeled root"),
            _ => Ok(()),
        }
    }

    pub fn is_valid(&self, t: Transition) -> bool {
        self.check(t).is_ok()
    }

    pub fn valid_mask(&self) -> [bool; N_ACTIONS] {
        let mut m = [false; N_ACTIONS];
        for (i, t) in Transition::ALL.iter().enumerate() {
            m[i] = self.is_valid(*t);
        }
        m
    }

    pub fn valid_transitions(&self) -> Vec<Transition> {
        Transition::ALL.into_iter().filter(|&t| self.is_valid(t)).collect()
    }

    fn add_arc(&mut self, head: usize, label: ArcLabel, dep: usize) {
        self.heads[dep] = Some(head);
        self.labels[dep] = Some(label);
        self.leftmost[head] = Some(self.leftmost[head].map_or(dep, |c| c.min(dep)));
        self.rightmost[head] = Some(self.rightmost[head].map_or(dep, |c| c.max(dep)));
        self.arcs.push(Arc::new(head, label, dep));
    }

    pub fn apply(&mut self, t: Transition) -> Result<()> {
        self.check(t).map_err(|reason| Error::InvalidTransition { transition: t.to_string(), reason })?;
        match t {
            Transition::Shift => {
                self.stack.push(self.buffer_front);
                self.buffer_front += 1;
            }
            Transition::Reduce => {
                self.stack.pop();
            }
            Transition::LeftArc(l) => {
                let dep = self.stack.pop().unwrap();
                self.add_arc(self.buffer_front, l, dep);
            }
            Transition::RightArc(l) => {
                let dep = self.buffer_front;
                self.add_arc(self.top(), l, dep);
                self.stack.push(dep);
                self.buffer_front += 1;
            }
        }
        Ok(())
    }

    /// Feature slots `s0 s1 s2 b0 b1 b2 lc(s0) rc(s0) lc(b0)`; `None` marks an absent slot.
    pub fn slots(&self) -> [Option<usize>; N_SLOTS] {
        let s = |k: usize| self.stack.len().checked_sub(k + 1).map(|i| self.stack[i]);
        let b = |k: usize| {
            let i = self.buffer_front + k;
            (i <= self.n_pages).then_some(i)
        };
        let s0 = s(0);
        let b0 = b(0);
        [
            s0,
            s(1),
            s(2),
            b0,
            b(1),
            b(2),
            s0.and_then(|i| self.leftmost[i]),
            s0.and_then(|i| self.rightmost[i]),
            b0.and_then(|i| self.leftmost[i]),
        ]
    }

    /// Completes the tree: every page still without a head is attached to the root.
    pub fn into_tree(mut self) -> PageDependencyTree {
        for p in 1..=self.n_pages {
            if self.heads[p].is_none() {
                self.add_arc(0, ArcLabel::Root, p);
            }
        }
        let mut arcs = self.arcs;
        arcs.sort_by_key(|a| a.dependent);
        PageDependencyTree::new(self.n_pages, arcs)
    }
}

struct Gold {
    heads: Vec<usize>,
    labels: Vec<ArcLabel>,
}

impl Gold {
    fn new(tree: &PageDependencyTree) -> Result<Gold> {
        if !is_projective(tree)? {
            return Err(TreeError::NonProjective.into());
        }
        let mut heads = vec![0; tree.n_pages + 1];
        let mut labels = vec![ArcLabel::Root; tree.n_pages + 1];
        for a in &tree.arcs {
            heads[a.dependent] = a.head;
            labels[a.dependent] = a.label;
        }
        Ok(Gold { heads, labels })
    }

    fn action(&self, state: &ParserState) -> Transition {
        let top = state.top();
        let Some(front) = state.front() else { return Transition::Reduce };
        if top != 0 && self.heads[top] == front {
            return Transition::LeftArc(self.labels[top]);
        }
        if self.heads[front] == top {
            return Transition::RightArc(self.labels[front]);
        }
        if state.heads[top].is_some() {
            let below = &state.stack[..state.stack.len() - 1];
            if below.iter().any(|&k| self.heads[front] == k || (k != 0 && self.heads[k] == front)) {
                return Transition::Reduce;
            }
        }
        Transition::Shift
    }
}

/// Canonical next action for `state` under a projective gold tree.
pub fn static_oracle(state: &ParserState, gold: &PageDependencyTree) -> Result<Transition> {
    Ok(Gold::new(gold)?.action(state))
}

/// One teacher-forced training example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OracleStep {
    pub slots: [Option<usize>; N_SLOTS],
    pub valid: [bool; N_ACTIONS],
    pub action: usize,
}

/// Follows the oracle from the initial state until the buffer is empty.
pub fn oracle_trajectory(gold: &PageDependencyTree) -> Result<(Vec<OracleStep>, ParserState)> {
    let g = Gold::new(gold)?;
    let mut state = initial_state(gold.n_pages)?;
    let mut steps = Vec::new();
    while !state.is_terminal() {
        let t = g.action(&state);
        steps.push(OracleStep { slots: state.slots(), valid: state.valid_mask(), action: t.index() });
        state.apply(t)?;
    }
    Ok((steps, state))
}

/// Oracle action sequence for a gold tree.
pub fn oracle_actions(gold: &PageDependencyTree) -> Result<Vec<Transition>> {
    Ok(oracle_trajectory(gold)?.0.iter().map(|s| Transition::from_index(s.action)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParserNetConfig {
    pub hidden: usize,
    pub pieces: usize,
    pub embedding_dim: usize,
}

impl Default for ParserNetConfig {
    fn default() -> Self {
        ParserNetConfig { hidden: 64, pieces: 2, embedding_dim: 96 }
    }
}

impl ParserNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.pieces < 2 || self.embedding_dim == 0 {
            return Err(Error::Config(format!("parser: hidden > 0 and pieces >= 2 required, got {self:?}")));
        }
        Ok(())
    }
}

/// Lower network (slot concatenation to `hidden * pieces`, maxout) and
/// upper linear layer producing one score per action.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParserNet {
    pub config: ParserNetConfig,
    pub root: ParamId,
    pub lower: Linear,
    pub upper: Linear,
}

impl ParserNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, config: ParserNetConfig) -> Self {
        let d = config.embedding_dim;
        let root = store.add(Tensor::new("parser.root", vec![1, d], uniform(rng, d, 0.1)));
        let lower = Linear::new(store, rng, "parser.lower", N_SLOTS * d, config.hidden * config.pieces);
        let upper = Linear::new(store, rng, "parser.upper", config.hidden, N_ACTIONS);
        ParserNet { config, root, lower, upper }
    }

    /// Row 0 is the learned root vector, row `i` the embedding of page `i`.
    pub fn slot_table(&self, tape: &mut Tape, pages: NodeId) -> Result<NodeId> {
        let root = tape.param(self.root);
        tape.concat_rows(&[root, pages])
    }

    /// Scores (`states x 11`) for a batch of slot assignments.
    pub fn score_slots(&self, tape: &mut Tape, table: NodeId, slots: &[[Option<usize>; N_SLOTS]]) -> Result<NodeId> {
        let idx: Vec<Option<usize>> = slots.iter().flatten().copied().collect();
        let x = tape.gather_slots(table, &idx, N_SLOTS)?;
        let h = self.lower.forward(tape, x)?;
        let h = tape.maxout(h, self.config.pieces)?;
        self.upper.forward(tape, h)
    }

    /// Precomputes per-page, per-slot contributions of the lower layer for
    /// fast scoring of many states over one document.
    pub fn scorer(&self, store: &ParamStore, pages: &[f64]) -> Result<StateScorer> {
        let d = self.config.embedding_dim;
        if !pages.len().is_multiple_of(d) {
            return Err(Error::Shape { op: "score_transitions", shapes: vec![(pages.len(), d)] });
        }
        let mut table = store.get(self.root).values.clone();
        table.extend_from_slice(pages);
        let rows = table.len() / d;
        let width = self.config.hidden * self.config.pieces;
        let w = &store.get(self.lower.weight).values;
        let mut proj = vec![0.0; N_SLOTS * rows * width];
        for s in 0..N_SLOTS {
            let block = &w[s * d * width..(s + 1) * d * width];
            crate::autodiff::matmul_into(rows, d, width, &table, block, &mut proj[s * rows * width..(s + 1) * rows * width]);
        }
        Ok(StateScorer {
            rows,
            width,
            pieces: self.config.pieces,
            proj,
            lower_bias: store.get(self.lower.bias).values.clone(),
            upper: self.upper,
            upper_weight: store.get(self.upper.weight).values.clone(),
            upper_bias: store.get(self.upper.bias).values.clone(),
        })
    }
}

/// Transition scorer bound to one document's page embeddings.
pub struct StateScorer {
    rows: usize,
    width: usize,
    pieces: usize,
    proj: Vec<f64>,
    lower_bias: Vec<f64>,
    upper: Linear,
    upper_weight: Vec<f64>,
    upper_bias: Vec<f64>,
}

impl StateScorer {
    pub fn n_pages(&self) -> usize {
        self.rows - 1
    }

    pub fn score_slots(&self, slots: &[Option<usize>; N_SLOTS]) -> [f64; N_ACTIONS] {
        let mut h = self.lower_bias.clone();
        for (s, slot) in slots.iter().enumerate() {
            if let Some(i) = *slot {
                let off = (s * self.rows + i) * self.width;
                h.iter_mut().zip(&self.proj[off..off + self.width]).for_each(|(a, b)| *a += b);
            }
        }
        let hidden = self.width / self.pieces;
        let mut out = [0.0; N_ACTIONS];
        out.copy_from_slice(&self.upper_bias);
        for j in 0..hidden {
            let v = h[j * self.pieces..(j + 1) * self.pieces].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let row = &self.upper_weight[j * self.upper.outputs..(j + 1) * self.upper.outputs];
            out.iter_mut().zip(row).for_each(|(o, w)| *o += v * w);
        }
        out
    }

    pub fn score(&self, state: &ParserState) -> [f64; N_ACTIONS] {
        self.score_slots(&state.slots())
    }
}

/// Highest-scoring valid action; ties go to the lowest action index.
pub fn best_valid(scores: &[f64; N_ACTIONS], valid: &[bool; N_ACTIONS]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for i in 0..N_ACTIONS {
        if valid[i] && best.is_none_or(|b| scores[i] > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Greedy decoding. Returns the tree and the number of actions taken.
pub fn greedy_decode(scorer: &StateScorer) -> (PageDependencyTree, usize) {
    let n = scorer.n_pages();
    let mut state = initial_state(n.max(1)).expect("n >= 1");
    if n == 0 {
        return (PageDependencyTree::new(0, Vec::new()), 0);
    }
    let mut steps = 0;
    loop {
        let valid = state.valid_mask();
        let Some(a) = best_valid(&scorer.score(&state), &valid) else { break };
        state.apply(Transition::from_index(a)).expect("masked action is valid");
        steps += 1;
        assert!(steps <= 4 * n, "decoder exceeded its step bound");
    }
    (state.into_tree(), steps)
}

/// Every valid projective tree over `n` pages: `root` on arcs from 0, any
/// of the four other labels elsewhere.
pub fn projective_trees(n: usize) -> Vec<PageDependencyTree> {
    fn heads(n: usize, prefix: &mut Vec<usize>, out: &mut Vec<PageDependencyTree>) {
        let d = prefix.len() + 1;
        if d > n {
            let labels: Vec<ArcLabel> =
                prefix.iter().map(|&h| if h == 0 { ArcLabel::Root } else { ArcLabel::Next }).collect();
            let shape = PageDependencyTree::from_heads(prefix, &labels);
            if shape.validate().is_ok() && is_projective(&shape) == Ok(true) {
                labelings(prefix, out);
            }
            return;
        }
        for h in (0..=n).filter(|&h| h != d) {
            prefix.push(h);
            heads(n, prefix, out);
            prefix.pop();
        }
    }
    fn labelings(heads: &[usize], out: &mut Vec<PageDependencyTree>) {
        let free: Vec<usize> = (0..heads.len()).filter(|&i| heads[i] != 0).collect();
        for code in 0..4usize.pow(free.len() as u32) {
            let mut labels = vec![ArcLabel::Root; heads.len()];
            let mut c = code;
            for &i in &free {
                labels[i] = ArcLabel::NON_ROOT[c % 4];
                c /= 4;
            }
            out.push(PageDependencyTree::from_heads(heads, &labels));
        }
    }
    let mut out = Vec::new();
    heads(n, &mut Vec::with_capacity(n), &mut out);
    out
}

/// Result of replaying the oracle on every projective tree up to a size.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleCheck {
    pub max_pages: usize,
    pub trees: usize,
    pub reconstructed: usize,
    pub first_failure: Option<PageDependencyTree>,
}

impl OracleCheck {
    pub fn passed(&self) -> bool {
        self.reconstructed == self.trees
    }
}

pub fn oracle_check(max_pages: usize) -> OracleCheck {
    let mut check = OracleCheck { max_pages, trees: 0, reconstructed: 0, first_failure: None };
    for n in 1..=max_pages {
        for gold in projective_trees(n) {
            check.trees += 1;
            let rebuilt = oracle_actions(&gold).ok().and_then(|actions| {
                let mut state = initial_state(n).ok()?;
                for t in actions {
                    state.apply(t).ok()?;
                }
                state.is_terminal().then(|| state.into_tree())
            });
            match rebuilt {
                Some(t) if t.sorted_arcs() == gold.sorted_arcs() => check.reconstructed += 1,
                _ => {
                    check.first_failure.get_or_insert(gold);
                }
            }
        }
    }
    check
}
