use std::collections::BTreeSet;

use pagedep::autodiff::Tape;
use pagedep::embed::{EmbeddingConfig, EmbeddingModule, FusionParams};
use pagedep::tensor::ParamStore;
use pagedep::{Fusion, Page};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VISUAL: usize = 5;

fn config(fusion: Fusion) -> EmbeddingConfig {
    EmbeddingConfig {
        page_dim: 12,
        word_dim: 7,
        max_tokens: 32,
        hash_buckets: 256,
        position_buckets: 4,
        attention_hidden: 6,
        visual_input_dim: VISUAL,
        visual_hidden: 10,
        fusion,
        index_buckets: 64,
        ..Default::default()
    }
}

/// Module with every parameter, including the token table and fusion
/// weights, set to a random point.
fn module(fusion: Fusion, seed: u64) -> (ParamStore, EmbeddingModule) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let m = EmbeddingModule::new(&mut store, &mut rng, config(fusion)).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).values.iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    (store, m)
}

fn page(index: usize, tokens: &[&str], visual: Vec<f64>) -> Page {
    Page::new(index, tokens.iter().map(|t| t.to_string()).collect(), visual)
}

fn random_pages(rng: &mut ChaCha8Rng, n: usize) -> Vec<Page> {
    const WORDS: [&str; 8] = ["invoice", "total", "ORIGINAL", "page", "2", "receipt", "annex", "id"];
    (1..=n)
        .map(|i| {
            let k = rng.random_range(0..6);
            let toks: Vec<&str> = (0..k).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
            page(i, &toks, (0..VISUAL).map(|_| rng.random_range(0.0..1.0)).collect())
        })
        .collect()
}

fn contextual(store: &ParamStore, m: &EmbeddingModule, pages: &[Page]) -> Vec<f64> {
    let mut tape = Tape::new(store);
    let out = m.forward(&mut tape, pages).unwrap();
    tape.value(out.contextual).to_vec()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #[test]
    fn repeated_token_pools_like_a_single_token(seed in 0u64..500, k in 2usize..6) {
        let (store, m) = module(Fusion::NoneText, seed);
        let once = [page(1, &["a"], vec![0.0; VISUAL])];
        let rep = vec!["a"; k];
        let many = [page(1, &rep, vec![0.0; VISUAL])];
        let mut tape = Tape::new(&store);
        let x = m.encode_text(&mut tape, &once).unwrap();
        let y = m.encode_text(&mut tape, &many).unwrap();
        prop_assert!(max_abs_diff(tape.value(x), tape.value(y)) <= 1e-12);
    }

    #[test]
    fn sum_is_symmetric_and_concat_is_not(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
        for (fusion, symmetric) in [(Fusion::Sum, true), (Fusion::Concat, false)] {
            let (store, m) = module(fusion, seed);
            let mut tape = Tape::new(&store);
            let (t, v) = (tape.constant(2, 12, a.clone()), tape.constant(2, 12, b.clone()));
            let tv = m.fuse(&mut tape, Some(t), Some(v)).unwrap();
            let vt = m.fuse(&mut tape, Some(v), Some(t)).unwrap();
            prop_assert_eq!(tape.value(tv) == tape.value(vt), symmetric, "{}", fusion);
        }
    }

    #[test]
    fn context_changes_stay_within_two_positions(seed in 0u64..200, i in 0usize..4, gap in 5usize..8) {
        let (store, m) = module(Fusion::Sum, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let mut pages = random_pages(&mut rng, 14);
        let j = i + gap;
        let before = contextual(&store, &m, &pages);
        pages.swap(i, j);
        pages[i].index = i + 1;
        pages[j].index = j + 1;
        let after = contextual(&store, &m, &pages);
        let d = 12;
        for p in 0..14usize {
            let near = p.abs_diff(i) <= 2 || p.abs_diff(j) <= 2;
            let same = before[p * d..(p + 1) * d] == after[p * d..(p + 1) * d];
            if !near {
                prop_assert!(same, "position {} changed after swapping {} and {}", p, i, j);
            }
        }
    }

    #[test]
    fn ablated_channels_are_ignored(seed in 0u64..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pages = random_pages(&mut rng, 5);
        let mut other_visual = pages.clone();
        for p in &mut other_visual {
            p.visual = (0..VISUAL).map(|_| rng.random_range(-3.0..3.0)).collect();
        }
        let mut other_text = pages.clone();
        for p in &mut other_text {
            p.tokens = vec!["zzz".into(), format!("w{}", rng.random::<u32>())];
        }
        let (store, m) = module(Fusion::NoneText, seed);
        prop_assert_eq!(contextual(&store, &m, &pages), contextual(&store, &m, &other_visual));
        prop_assert_ne!(contextual(&store, &m, &pages), contextual(&store, &m, &other_text));
        let (store, m) = module(Fusion::NoneVisual, seed);
        prop_assert_eq!(contextual(&store, &m, &pages), contextual(&store, &m, &other_text));
        prop_assert_ne!(contextual(&store, &m, &pages), contextual(&store, &m, &other_visual));
    }
}

#[test]
fn single_token_is_the_output_layer_of_its_row() {
    let (store, m) = module(Fusion::NoneText, 3);
    let enc = m.text.unwrap();
    let cfg = &m.config;
    let row = pagedep::embed::token_bucket("invoice", cfg.hash_buckets);
    let mut x = store.get(enc.table).values[row * cfg.word_dim..(row + 1) * cfg.word_dim].to_vec();
    let mut pos = vec![0.0; cfg.position_buckets];
    pos[0] = 1.0;
    x.extend(pos);
    let expected = enc.output.apply(&store, 1, &x);
    let mut tape = Tape::new(&store);
    let t = m.encode_text(&mut tape, &[page(1, &["invoice"], vec![0.0; VISUAL])]).unwrap();
    assert!(max_abs_diff(tape.value(t), &expected) <= 1e-12);
}

#[test]
fn zero_visual_input_maps_the_first_bias() {
    let (store, m) = module(Fusion::NoneVisual, 4);
    let enc = m.visual.unwrap();
    let hidden: Vec<f64> = store.get(enc.first.bias).values.iter().map(|b| b.max(0.0)).collect();
    let expected = enc.second.apply(&store, 1, &hidden);
    let mut tape = Tape::new(&store);
    let v = m.encode_visual(&mut tape, &[page(1, &[], vec![0.0; VISUAL])]).unwrap();
    assert!(max_abs_diff(tape.value(v), &expected) <= 1e-12);
}

#[test]
fn every_visual_coordinate_moves_the_output() {
    let (store, m) = module(Fusion::NoneVisual, 5);
    let base = vec![0.3; VISUAL];
    let eval = |v: Vec<f64>| {
        let mut tape = Tape::new(&store);
        let out = m.encode_visual(&mut tape, &[page(1, &[], v)]).unwrap();
        tape.value(out).to_vec()
    };
    let y = eval(base.clone());
    for k in 0..VISUAL {
        let mut moved = base.clone();
        moved[k] += 1e-3;
        assert!(max_abs_diff(&y, &eval(moved)) > 0.0, "coordinate {k}");
    }
}

#[test]
fn zero_context_weights_return_the_fused_input() {
    let (mut store, m) = module(Fusion::Sum, 6);
    for layer in &m.context {
        store.get_mut(layer.weight).values.fill(0.0);
        store.get_mut(layer.bias).values.fill(0.0);
    }
    let pages = random_pages(&mut ChaCha8Rng::seed_from_u64(6), 4);
    let mut tape = Tape::new(&store);
    let out = m.forward(&mut tape, &pages).unwrap();
    assert_eq!(tape.value(out.fused), tape.value(out.contextual));
}

#[test]
fn single_page_context_is_defined_and_repeatable() {
    let (store, m) = module(Fusion::GatedWeighted, 7);
    let pages = random_pages(&mut ChaCha8Rng::seed_from_u64(7), 1);
    let a = contextual(&store, &m, &pages);
    assert_eq!(a.len(), 12);
    assert!(a.iter().all(|x| x.is_finite()));
    assert_eq!(a, contextual(&store, &m, &pages));
}

#[test]
fn baseline_sees_only_page_positions() {
    let mut store = ParamStore::new();
    let cfg = EmbeddingConfig { fusion: Fusion::BaselineIndex, ..Default::default() };
    let m = EmbeddingModule::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), cfg).unwrap();
    assert!(matches!(m.fusion, FusionParams::BaselineIndex { .. }));
    let mut tape = Tape::new(&store);
    let indices: Vec<usize> = (1..=82).collect();
    let e = m.baseline_index_embed(&mut tape, &indices).unwrap();
    let rows: BTreeSet<Vec<u64>> =
        tape.value(e).chunks(96).map(|r| r.iter().map(|x| x.to_bits()).collect()).collect();
    assert!(rows.len() >= 80, "{} distinct rows", rows.len());

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_pages(&mut rng, 4);
    let b: Vec<Page> = (1..=4).map(|i| page(i, &["other"], vec![9.0; 2])).collect();
    let ea = contextual(&store, &m, &a);
    assert_eq!(ea, contextual(&store, &m, &b));
    let again = m.baseline_index_embed(&mut tape, &[3, 3]).unwrap();
    let v = tape.value(again);
    assert_eq!(v[..96], v[96..]);
}
