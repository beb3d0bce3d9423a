//! Acceptance suite. Runs without the libtest harness and prints one
//! PASS/FAIL line per criterion; exits nonzero if any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use pagedep::autodiff::Tape;
use pagedep::document::{validate_tree, Arc, PageDependencyTree};
use pagedep::embed::{EmbeddingConfig, EmbeddingModule, FusionParams};
use pagedep::eval::{attachment_scores, crossfold_report, evaluate, tag_metrics, EvalReport, LabelScoring};
use pagedep::gradcheck;
use pagedep::io::Prediction;
use pagedep::parser::{greedy_decode, initial_state, oracle_actions, ParserNet, ParserNetConfig};
use pagedep::synth::generate_corpus;
use pagedep::tensor::ParamStore;
use pagedep::train::train;
use pagedep::{AnnotatedDocument, ArcLabel, Fusion, GeneratorConfig, Model, ModelConfig, Page, SegTag, TrainConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ORACLE_MAX_PAGES: usize = 5;
const ORACLE_BUDGET: Duration = Duration::from_secs(60);
const DECODES: usize = 1000;
const DECODE_MAX_PAGES: usize = 10;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(30);
const FUSION_TOLERANCE: f64 = 1e-12;
const METRIC_TOLERANCE: f64 = 1e-9;
const METRIC_PAIRS: usize = 1000;
const CORPUS_DOCUMENTS: usize = 300;
const CORPUS_SEED: u64 = 1;
const FOLDS: usize = 3;
const LEARN_EPOCHS: usize = 8;
const MIN_UAS: f64 = 0.90;
const MIN_LAS: f64 = 0.85;
const MIN_SEG_ACCURACY: f64 = 0.95;
const MIN_CLS_ACCURACY: f64 = 0.90;
const MIN_BASELINE_GAP: f64 = 0.25;
const LEARN_BUDGET: Duration = Duration::from_secs(600);
const TWO_SIDED_CLASSES: usize = 4;
const MODALITY_EPOCHS: usize = 6;
const MIN_BACK_GAP: f64 = 0.05;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

type Criterion = (&'static str, fn() -> Outcome);

fn oracle_completeness() -> Outcome {
    let start = Instant::now();
    let (mut total, mut rebuilt) = (0usize, 0usize);
    for n in 1..=ORACLE_MAX_PAGES {
        for gold in common::projective_trees(n) {
            total += 1;
            let Ok(actions) = oracle_actions(&gold) else { continue };
            let mut state = initial_state(n).unwrap();
            let ok = actions.iter().all(|&t| state.is_valid(t) && state.apply(t).is_ok()) && state.is_terminal();
            if ok && state.into_tree().sorted_arcs() == gold.sorted_arcs() {
                rebuilt += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        rebuilt == total && elapsed < ORACLE_BUDGET,
        format!("{rebuilt}/{total} trees over N <= {ORACLE_MAX_PAGES} rebuilt in {elapsed:.1?} (limit 100%, < {ORACLE_BUDGET:?})"),
    )
}

fn parser_soundness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut valid = 0;
    let mut max_steps_ratio: f64 = 0.0;
    for _ in 0..DECODES {
        let n = rng.random_range(1..=DECODE_MAX_PAGES);
        let mut store = ParamStore::new();
        let config = ParserNetConfig::default();
        let net = ParserNet::new(&mut store, &mut rng, config);
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.get_mut(id).values.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        let pages: Vec<f64> = (0..n * config.embedding_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (tree, steps) = greedy_decode(&net.scorer(&store, &pages).unwrap());
        max_steps_ratio = max_steps_ratio.max(steps as f64 / n as f64);
        if validate_tree(&tree).is_ok() && common::brute_force_valid(n, &tree.arcs) && tree.n_pages == n {
            valid += 1;
        }
    }
    outcome(
        valid == DECODES,
        format!("{valid}/{DECODES} decodes over N in [1, {DECODE_MAX_PAGES}] valid, at most {max_steps_ratio:.2} N steps (limit 100%)"),
    )
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let results = gradcheck::check_all(3).unwrap();
    let elapsed = start.elapsed();
    let worst = results.iter().max_by(|a, b| a.max_error.total_cmp(&b.max_error)).unwrap();
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    outcome(
        failed.is_empty() && elapsed < GRADCHECK_BUDGET,
        format!(
            "{} checks, worst {} at {:.2e}, failed {:?}, {elapsed:.1?} (h = {:e}, limit {:e}, < {GRADCHECK_BUDGET:?})",
            results.len(),
            worst.name,
            worst.max_error,
            failed,
            gradcheck::STEP,
            gradcheck::TOLERANCE
        ),
    )
}

fn module(fusion: Fusion) -> (ParamStore, EmbeddingModule) {
    let mut store = ParamStore::new();
    let cfg = EmbeddingConfig { fusion, visual_input_dim: 16, ..Default::default() };
    let m = EmbeddingModule::new(&mut store, &mut ChaCha8Rng::seed_from_u64(4), cfg).unwrap();
    (store, m)
}

fn fuse(store: &ParamStore, m: &EmbeddingModule, t: &[f64], v: &[f64]) -> Vec<f64> {
    let mut tape = Tape::new(store);
    let rows = t.len() / 96;
    let (tn, vn) = (tape.constant(rows, 96, t.to_vec()), tape.constant(rows, 96, v.to_vec()));
    let out = m.fuse(&mut tape, Some(tn), Some(vn)).unwrap();
    tape.value(out).to_vec()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn pages_with(rng: &mut ChaCha8Rng, n: usize) -> Vec<Page> {
    (1..=n)
        .map(|i| {
            let toks = (0..rng.random_range(0..20)).map(|_| format!("w{}", rng.random_range(0..50))).collect();
            Page::new(i, toks, (0..16).map(|_| rng.random_range(0.0..1.0)).collect())
        })
        .collect()
}

fn fusion_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t: Vec<f64> = (0..96 * 6).map(|_| rng.random_range(-3.0..3.0)).collect();
    let v: Vec<f64> = (0..96 * 6).map(|_| rng.random_range(-3.0..3.0)).collect();

    let (sum_store, sum) = module(Fusion::Sum);
    let mm2 = fuse(&sum_store, &sum, &t, &v);
    let (scalar_store, scalar) = module(Fusion::ScalarWeighted);
    let FusionParams::ScalarWeighted { logit } = scalar.fusion else { unreachable!() };
    assert_eq!(scalar_store.get(logit).values, vec![0.0]);
    let mm3 = fuse(&scalar_store, &scalar, &t, &v);
    let half: Vec<f64> = mm2.iter().map(|x| 0.5 * x).collect();
    let e_scalar = max_abs_diff(&mm3, &half);

    let (mut gated_store, gated) = module(Fusion::GatedWeighted);
    let FusionParams::GatedWeighted { gate } = gated.fusion else { unreachable!() };
    gated_store.get_mut(gate.weight).values.fill(0.0);
    gated_store.get_mut(gate.bias).values.fill(0.0);
    let e_gated = max_abs_diff(&fuse(&gated_store, &gated, &t, &v), &mm3);

    let mut exact = true;
    for (fusion, keep_text) in [(Fusion::NoneText, true), (Fusion::NoneVisual, false)] {
        let mut config = ModelConfig::default().with_fusion(fusion);
        config.embedding.visual_input_dim = 16;
        let mut model = Model::new(config).unwrap();
        let mut init = ChaCha8Rng::seed_from_u64(7);
        for id in model.params.ids().collect::<Vec<_>>() {
            for x in model.params.get_mut(id).values.iter_mut() {
                *x = init.random_range(-0.3..0.3);
            }
        }
        for trial in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
            let n = rng.random_range(1..12);
            let pages = pages_with(&mut rng, n);
            let mut other = pages.clone();
            let donor = pages_with(&mut rng, pages.len());
            for (p, d) in other.iter_mut().zip(donor) {
                if keep_text {
                    p.visual = d.visual;
                } else {
                    p.tokens = d.tokens;
                }
            }
            let bits = |x: Vec<f64>| x.into_iter().map(f64::to_bits).collect::<Vec<_>>();
            exact &= bits(model.embed(&pages).unwrap()) == bits(model.embed(&other).unwrap());
            exact &= model.predict_document(&pages).unwrap() == model.predict_document(&other).unwrap();
        }
    }
    outcome(
        e_scalar <= FUSION_TOLERANCE && e_gated <= FUSION_TOLERANCE && exact,
        format!(
            "|MM3(0.5) - MM2/2| = {e_scalar:.1e}, |MM5(0) - MM3(0.5)| = {e_gated:.1e} (limit {FUSION_TOLERANCE:e}); \
             single-modality outputs invariant: {exact} (exact)"
        ),
    )
}

fn random_tree(rng: &mut ChaCha8Rng, n: usize) -> PageDependencyTree {
    let mut order: Vec<usize> = (1..=n).collect();
    order.shuffle(rng);
    let mut attached = vec![0];
    let mut arcs = Vec::new();
    for d in order {
        let h = attached[rng.random_range(0..attached.len())];
        let label = if h == 0 { ArcLabel::Root } else { ArcLabel::NON_ROOT[rng.random_range(0..4)] };
        arcs.push(Arc::new(h, label, d));
        attached.push(d);
    }
    PageDependencyTree::new(n, arcs)
}

fn metric_oracle() -> Outcome {
    let close = |a: f64, b: f64| (a - b).abs() <= METRIC_TOLERANCE;
    let mut ok = Vec::new();
    use ArcLabel::{Atch, Next, Root};
    let l = |x: &[ArcLabel]| x.to_vec();

    let t = PageDependencyTree::from_heads(&[0, 1, 1, 3], &l(&[Root, Next, Atch, Next]));
    let (u, a) = attachment_scores(&t, &t).unwrap();
    ok.push(close(u, 1.0) && close(a, 1.0));
    let g = PageDependencyTree::from_heads(&[0, 1], &l(&[Root, Next]));
    let p = PageDependencyTree::from_heads(&[0, 1], &l(&[Root, Atch]));
    let (u, a) = attachment_scores(&g, &p).unwrap();
    ok.push(close(u, 1.0) && close(a, 0.5));
    let p = PageDependencyTree::from_heads(&[0, 1, 2, 3], &l(&[Root, Atch, Atch, Next]));
    let (u, a) = attachment_scores(&t, &p).unwrap();
    ok.push(close(u, 0.75) && close(a, 0.5));

    let m = tag_metrics(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
    ok.push(close(m.accuracy, 1.0) && (0..3).all(|c| close(m.f1(c), 1.0)));
    let (h, i) = (SegTag::Head.index(), SegTag::Inter.index());
    let m = tag_metrics(&[h, i], &[i, h], 3).unwrap();
    ok.push(close(m.accuracy, 0.0) && close(m.f1(h), 0.0));
    let m = tag_metrics(&[0, 0, 1, 2], &[0, 1, 1, 2], 3).unwrap();
    ok.push(
        close(m.accuracy, 0.75)
            && close(m.f1(0), 2.0 / 3.0)
            && close(m.f1(1), 2.0 / 3.0)
            && close(m.f1(2), 1.0)
            && close(m.macro_f1, 7.0 / 9.0),
    );

    // pooling: one fold right everywhere, one wrong everywhere, equal sizes
    let doc = |id: &str, heads: &[usize], labels: &[ArcLabel], classes: Vec<usize>| {
        let tree = PageDependencyTree::from_heads(heads, labels);
        let seg_tags = pagedep::document::derive_seg_tags(&tree, &Default::default());
        let pages = (1..=heads.len()).map(|i| Page::new(i, vec![], vec![])).collect();
        AnnotatedDocument { id: id.into(), pages, tree, seg_tags, classes }
    };
    let gold = vec![doc("a", &[0, 1], &[Root, Next], vec![0, 0]), doc("b", &[0, 1], &[Root, Next], vec![1, 1])];
    let wrong = |d: &AnnotatedDocument| Prediction {
        id: d.id.clone(),
        seg_tags: vec![SegTag::Inter, SegTag::Head],
        tree: PageDependencyTree::from_heads(&[2, 0], &[Atch, Root]),
        classes: vec![2, 2],
    };
    let right = |d: &AnnotatedDocument| Prediction {
        id: d.id.clone(),
        seg_tags: d.seg_tags.clone(),
        tree: d.tree.clone(),
        classes: d.classes.clone(),
    };
    let r = evaluate(&gold, &[right(&gold[0]), wrong(&gold[1])], 3, LabelScoring::LabelOnly).unwrap();
    ok.push(close(r.seg_accuracy, 0.5) && close(r.uas, 0.5) && close(r.las, 0.5) && close(r.cls_accuracy, 0.5));

    let fixtures_ok = ok.iter().all(|&b| b);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ordered = 0;
    for _ in 0..METRIC_PAIRS {
        let n = rng.random_range(1..=12);
        let (g, p) = (random_tree(&mut rng, n), random_tree(&mut rng, n));
        let (u, a) = attachment_scores(&g, &p).unwrap();
        let heads = (1..=n).filter(|&d| g.head_of(d) == p.head_of(d)).count();
        let both = (1..=n).filter(|&d| g.incoming(d) == p.incoming(d)).count();
        if a <= u && close(u, heads as f64 / n as f64) && close(a, both as f64 / n as f64) {
            ordered += 1;
        }
    }
    outcome(
        fixtures_ok && ordered == METRIC_PAIRS,
        format!(
            "{}/{} fixtures within {METRIC_TOLERANCE:e}; LAS <= UAS and per-page counts agree on {ordered}/{METRIC_PAIRS} random pairs",
            ok.iter().filter(|&&b| b).count(),
            ok.len()
        ),
    )
}

fn crossfold(corpus: &[AnnotatedDocument], fusion: Fusion, epochs: usize) -> EvalReport {
    let config = TrainConfig { epochs, ..Default::default() };
    let model_config = ModelConfig::default().with_fusion(fusion);
    crossfold_report(corpus, FOLDS, 0, 8, LabelScoring::LabelOnly, |fold, train_docs| {
        let config = TrainConfig { seed: fold as u64, ..config.clone() };
        Ok(train(train_docs, model_config.clone(), &config)?.model)
    })
    .unwrap()
    .0
}

fn learnability() -> Outcome {
    let start = Instant::now();
    let corpus = generate_corpus(&GeneratorConfig { n_documents: CORPUS_DOCUMENTS, seed: CORPUS_SEED, ..Default::default() }).unwrap();
    let sum = crossfold(&corpus, Fusion::Sum, LEARN_EPOCHS);
    let base = crossfold(&corpus, Fusion::BaselineIndex, LEARN_EPOCHS);
    let elapsed = start.elapsed();
    let gap = sum.las - base.las;
    outcome(
        sum.uas >= MIN_UAS
            && sum.las >= MIN_LAS
            && sum.seg_accuracy >= MIN_SEG_ACCURACY
            && sum.cls_accuracy >= MIN_CLS_ACCURACY
            && gap >= MIN_BASELINE_GAP
            && elapsed <= LEARN_BUDGET,
        format!(
            "sum: UAS {:.4} (>= {MIN_UAS}), LAS {:.4} (>= {MIN_LAS}), seg {:.4} (>= {MIN_SEG_ACCURACY}), cls {:.4} (>= {MIN_CLS_ACCURACY}); \
             baseline LAS {:.4}, gap {gap:.4} (>= {MIN_BASELINE_GAP}); {} docs, {FOLDS}-fold pooled, {LEARN_EPOCHS} epochs, {elapsed:.0?} (<= {LEARN_BUDGET:?})",
            sum.uas, sum.las, sum.seg_accuracy, sum.cls_accuracy, base.las, corpus.len()
        ),
    )
}

fn modality_ordering() -> Outcome {
    let corpus = generate_corpus(&GeneratorConfig {
        n_documents: CORPUS_DOCUMENTS,
        seed: CORPUS_SEED,
        two_sided_classes: (0..TWO_SIDED_CLASSES).collect(),
        back_visual_cue: true,
        ..Default::default()
    })
    .unwrap();
    let visual = crossfold(&corpus, Fusion::NoneVisual, MODALITY_EPOCHS);
    let text = crossfold(&corpus, Fusion::NoneText, MODALITY_EPOCHS);
    let (v, t) = (visual.label(ArcLabel::Back).unwrap_or(0.0), text.label(ArcLabel::Back).unwrap_or(0.0));
    outcome(
        v - t >= MIN_BACK_GAP,
        format!(
            "F1(back) visual-only {v:.4}, text-only {t:.4}, gap {:.4} (>= {MIN_BACK_GAP}); {FOLDS}-fold pooled, {MODALITY_EPOCHS} epochs",
            v - t
        ),
    )
}

fn persistence() -> Outcome {
    let corpus = generate_corpus(&GeneratorConfig {
        n_documents: 20,
        seed: 8,
        stream_length_mean: 10.0,
        stream_length_min: 2,
        stream_length_max: 20,
        ..Default::default()
    })
    .unwrap();
    let config = TrainConfig { epochs: 2, seed: 8, ..Default::default() };
    let bytes = |m: &Model| {
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        buf
    };
    let a = train(&corpus, ModelConfig::default(), &config).unwrap().model;
    let b = train(&corpus, ModelConfig::default(), &config).unwrap().model;
    let identical = bytes(&a) == bytes(&b);
    let restored = Model::read_checkpoint(bytes(&a).as_slice()).unwrap();
    let preserved = corpus.iter().all(|d| {
        let bits = |x: Vec<f64>| x.into_iter().map(f64::to_bits).collect::<Vec<_>>();
        a.predict(d).unwrap() == restored.predict(d).unwrap()
            && bits(a.embed(&d.pages).unwrap()) == bits(restored.embed(&d.pages).unwrap())
    });
    outcome(
        identical && preserved,
        format!(
            "same-seed checkpoints identical: {identical} ({} bytes); round-trip predictions bit-exact on {} docs: {preserved}",
            bytes(&a).len(),
            corpus.len()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("oracle completeness", oracle_completeness),
        ("parser soundness", parser_soundness),
        ("gradient fidelity", gradient_fidelity),
        ("fusion algebra", fusion_algebra),
        ("metric oracle", metric_oracle),
        ("learnability and baseline ordering", learnability),
        ("modality ordering on back", modality_ordering),
        ("determinism and persistence", persistence),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let tag = format!("C{}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| *f == tag || name.contains(f.as_str())) {
            continue;
        }
        let r = run();
        println!("{} {tag} {name}: {}", if r.passed { "PASS" } else { "FAIL" }, r.detail);
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
