mod common;

use pagedep::document::{derive_seg_tags, is_projective, validate_tree, Arc, ArcLabel, PageDependencyTree, SegTag};
use pagedep::parser::{greedy_decode, oracle_actions, ParserNet, ParserNetConfig};
use pagedep::tensor::ParamStore;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

fn check_against_brute_force(n: usize, heads: &[usize], labels: &[ArcLabel]) {
    let arcs: Vec<Arc> = heads.iter().zip(labels).enumerate().map(|(i, (&h, &l))| Arc::new(h, l, i + 1)).collect();
    let tree = PageDependencyTree::new(n, arcs.clone());
    assert_eq!(validate_tree(&tree).is_ok(), brute_force_valid(n, &arcs), "{arcs:?}");
}

#[test]
fn validator_agrees_with_brute_force_up_to_four_pages() {
    for n in 1..=4 {
        for heads in head_functions(n, true) {
            for code in 0..5usize.pow(n as u32) {
                let labels: Vec<ArcLabel> = (0..n).map(|i| ArcLabel::ALL[(code / 5usize.pow(i as u32)) % 5]).collect();
                check_against_brute_force(n, &heads, &labels);
            }
        }
    }
}

#[test]
fn validator_agrees_with_brute_force_on_five_pages() {
    let pair = [ArcLabel::Root, ArcLabel::Next];
    for heads in head_functions(5, true) {
        for code in 0..32usize {
            let labels: Vec<ArcLabel> = (0..5).map(|i| pair[(code >> i) & 1]).collect();
            check_against_brute_force(5, &heads, &labels);
        }
    }
}

#[test]
fn left_arc_into_first_page_makes_it_a_continuation() {
    let tree = PageDependencyTree::from_heads(&[2, 0], &[ArcLabel::Next, ArcLabel::Root]);
    assert!(validate_tree(&tree).is_ok());
    assert_eq!(derive_seg_tags(&tree, &Default::default()), vec![SegTag::Inter, SegTag::Head]);
}

#[test]
fn projectivity_agrees_with_brute_force() {
    for n in 1..=5 {
        for heads in head_functions(n, false) {
            let labels: Vec<ArcLabel> =
                heads.iter().map(|&h| if h == 0 { ArcLabel::Root } else { ArcLabel::Next }).collect();
            let tree = PageDependencyTree::from_heads(&heads, &labels);
            if validate_tree(&tree).is_ok() {
                assert_eq!(is_projective(&tree).unwrap(), brute_force_projective(&tree.arcs), "{heads:?}");
                if n <= 2 {
                    assert!(is_projective(&tree).unwrap());
                }
            } else {
                assert!(is_projective(&tree).is_err());
            }
        }
    }
}

#[test]
fn oracle_round_trip_is_exhaustive_up_to_five_pages() {
    let mut count = 0;
    for n in 1..=5 {
        for gold in projective_trees(n) {
            let rebuilt = replay(n, &oracle_actions(&gold).unwrap());
            assert_eq!(rebuilt.sorted_arcs(), gold.sorted_arcs());
            count += 1;
        }
    }
    assert!(count > 10_000);
}

fn random_projective(rng: &mut ChaCha8Rng, n: usize) -> PageDependencyTree {
    loop {
        let heads: Vec<usize> = (1..=n).map(|d| loop {
            let h = rng.random_range(0..=n);
            if h != d {
                break h;
            }
        }).collect();
        let labels: Vec<ArcLabel> = heads
            .iter()
            .map(|&h| if h == 0 { ArcLabel::Root } else { ArcLabel::NON_ROOT[rng.random_range(0..4)] })
            .collect();
        let t = PageDependencyTree::from_heads(&heads, &labels);
        if validate_tree(&t).is_ok() && is_projective(&t).unwrap() {
            return t;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn validator_agrees_on_random_arc_sets(
        n in 1usize..6,
        raw in prop::collection::vec((0usize..7, 0usize..5, 0usize..7), 0..10),
    ) {
        let arcs: Vec<Arc> = raw.iter().map(|&(h, l, d)| Arc::new(h.min(n), ArcLabel::ALL[l], d.min(n))).collect();
        let tree = PageDependencyTree::new(n, arcs.clone());
        prop_assert_eq!(validate_tree(&tree).is_ok(), brute_force_valid(n, &arcs));
    }

    #[test]
    fn oracle_round_trip_sampled_up_to_eight_pages(n in 6usize..=8, seed in any::<u64>()) {
        let gold = random_projective(&mut ChaCha8Rng::seed_from_u64(seed), n);
        let rebuilt = replay(n, &oracle_actions(&gold).unwrap());
        prop_assert_eq!(rebuilt.sorted_arcs(), gold.sorted_arcs());
    }

    #[test]
    fn first_page_of_forward_stream_is_head_unless_empty(
        heads in (1usize..9).prop_flat_map(|n| (1..=n).map(|d| 0..d).collect::<Vec<_>>()),
        empty_mask in any::<u16>(),
    ) {
        let n = heads.len();
        let labels: Vec<ArcLabel> =
            heads.iter().map(|&h| if h == 0 { ArcLabel::Root } else { ArcLabel::Atch }).collect();
        let tree = PageDependencyTree::from_heads(&heads, &labels);
        prop_assert!(validate_tree(&tree).is_ok());
        let empty = (2..=n).filter(|p| empty_mask >> p & 1 == 1).collect();
        let tags = derive_seg_tags(&tree, &empty);
        prop_assert_eq!(tags[0], SegTag::Head);
    }

    #[test]
    fn decoding_random_parameters_gives_valid_trees(n in 1usize..=10, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let config = ParserNetConfig { hidden: 8, pieces: 2, embedding_dim: 5 };
        let net = ParserNet::new(&mut store, &mut rng, config);
        let pages: Vec<f64> = (0..n * 5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (tree, steps) = greedy_decode(&net.scorer(&store, &pages).unwrap());
        prop_assert!(validate_tree(&tree).is_ok());
        prop_assert!(steps <= 4 * n);
    }
}
