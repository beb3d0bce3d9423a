#![allow(dead_code)]

use std::collections::VecDeque;

use pagedep::document::{Arc, ArcLabel, PageDependencyTree};
use pagedep::parser::{initial_state, Transition};

/// Independent tree check: one arc per dependent, nothing into 0, root label
/// exactly on arcs from 0, every page reachable from 0.
pub fn brute_force_valid(n: usize, arcs: &[Arc]) -> bool {
    if arcs.iter().any(|a| a.head > n || a.dependent > n) {
        return false;
    }
    for a in arcs {
        if a.dependent == 0 || (a.label == ArcLabel::Root) != (a.head == 0) {
            return false;
        }
    }
    for d in 1..=n {
        if arcs.iter().filter(|a| a.dependent == d).count() != 1 {
            return false;
        }
    }
    for (i, a) in arcs.iter().enumerate() {
        for b in &arcs[i + 1..] {
            if a.head == b.head && a.dependent == b.dependent {
                return false;
            }
        }
    }
    let mut seen = vec![false; n + 1];
    seen[0] = true;
    let mut queue = VecDeque::from([0]);
    while let Some(h) = queue.pop_front() {
        for a in arcs.iter().filter(|a| a.head == h) {
            if !seen[a.dependent] {
                seen[a.dependent] = true;
                queue.push_back(a.dependent);
            }
        }
    }
    seen.iter().all(|&s| s)
}

/// Pairwise interval crossing test.
pub fn brute_force_projective(arcs: &[Arc]) -> bool {
    for a in arcs {
        for b in arcs {
            let (l1, r1) = (a.head.min(a.dependent), a.head.max(a.dependent));
            let (l2, r2) = (b.head.min(b.dependent), b.head.max(b.dependent));
            if l1 < l2 && l2 < r1 && r1 < r2 {
                return false;
            }
        }
    }
    true
}

/// All head functions over pages 1..=n, heads drawn from 0..=n.
pub fn head_functions(n: usize, allow_self: bool) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for d in 1..=n {
        let mut next = Vec::new();
        for prefix in &out {
            for h in 0..=n {
                if h == d && !allow_self {
                    continue;
                }
                let mut v = prefix.clone();
                v.push(h);
                next.push(v);
            }
        }
        out = next;
    }
    out
}

fn acyclic_from_root(heads: &[usize]) -> bool {
    (1..=heads.len()).all(|start| {
        let mut cur = start;
        for _ in 0..=heads.len() {
            if cur == 0 {
                return true;
            }
            cur = heads[cur - 1];
        }
        false
    })
}

/// Every valid labeled projective tree over `n` pages; root arcs carry
/// `root`, every other arc any of the four non-root labels.
pub fn projective_trees(n: usize) -> Vec<PageDependencyTree> {
    let mut out = Vec::new();
    for heads in head_functions(n, false) {
        if !acyclic_from_root(&heads) {
            continue;
        }
        let arcs: Vec<Arc> = heads.iter().enumerate().map(|(i, &h)| Arc::new(h, ArcLabel::Root, i + 1)).collect();
        if !brute_force_projective(&arcs) {
            continue;
        }
        let free: Vec<usize> = (0..n).filter(|&i| heads[i] != 0).collect();
        let combos = 4usize.pow(free.len() as u32);
        for c in 0..combos {
            let mut labels = vec![ArcLabel::Root; n];
            let mut code = c;
            for &i in &free {
                labels[i] = ArcLabel::NON_ROOT[code % 4];
                code /= 4;
            }
            out.push(PageDependencyTree::from_heads(&heads, &labels));
        }
    }
    out
}

/// Replays `actions` from the initial state, requiring each to be valid.
pub fn replay(n: usize, actions: &[Transition]) -> PageDependencyTree {
    let mut s = initial_state(n).unwrap();
    for &t in actions {
        assert!(s.is_valid(t), "oracle produced invalid {t}");
        s.apply(t).unwrap();
    }
    assert!(s.is_terminal());
    assert!((1..=n).all(|p| s.head(p).is_some()), "replay left a page without head");
    s.into_tree()
}
