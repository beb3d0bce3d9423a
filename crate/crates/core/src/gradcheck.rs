//! Central finite-difference checks of the taped gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{NodeId, Tape};
use crate::document::{derive_seg_tags, AnnotatedDocument, ArcLabel, Page, PageDependencyTree};
use crate::embed::{EmbeddingConfig, Fusion};
use crate::error::Result;
use crate::model::{LossWeights, Model, ModelConfig, PreparedDocument};
use crate::parser::ParserNetConfig;
use crate::tensor::{Gradients, ParamId, ParamStore, Tensor};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Added to the magnitude in the error denominator so that gradients that
/// vanish analytically are judged on absolute error.
pub const FLOOR: f64 = 1e-4;

/// `|a - n| / (max(|a|, |n|) + FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs().max(numeric.abs()) + FLOOR)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub n_values: usize,
    pub max_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error <= TOLERANCE
    }
}

/// Compares backward against central differences of `loss` over every
/// value of every parameter in `store`.
pub fn check_store<F>(name: &str, store: &ParamStore, loss: F) -> Result<CheckResult>
where
    F: Fn(&mut Tape) -> Result<NodeId>,
{
    let mut grads = Gradients::new(store);
    {
        let mut tape = Tape::new(store);
        let l = loss(&mut tape)?;
        tape.backward(l, &mut grads)?;
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(s);
        let l = loss(&mut tape)?;
        Ok(tape.scalar(l))
    };
    let mut probe = store.clone();
    let mut max_error: f64 = 0.0;
    let mut n_values = 0;
    for id in store.ids() {
        for j in 0..store.get(id).values.len() {
            let orig = store.get(id).values[j];
            probe.get_mut(id).values[j] = orig + STEP;
            let plus = eval(&probe)?;
            probe.get_mut(id).values[j] = orig - STEP;
            let minus = eval(&probe)?;
            probe.get_mut(id).values[j] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            max_error = max_error.max(relative_error(grads.get(id, j), numeric));
            n_values += 1;
        }
    }
    Ok(CheckResult { name: name.to_string(), n_values, max_error })
}

fn value<R: Rng>(rng: &mut R) -> f64 {
    // keep clear of the relu and maxout kinks
    let x: f64 = rng.random_range(-1.0..1.0);
    if x.abs() < 0.05 {
        x + 0.1f64.copysign(x)
    } else {
        x
    }
}

fn matrix<R: Rng>(rng: &mut R, store: &mut ParamStore, name: &str, rows: usize, cols: usize) -> ParamId {
    let v = (0..rows * cols).map(|_| value(rng)).collect();
    store.add(Tensor::new(name, vec![rows, cols], v))
}

/// Reduces a node to a scalar through a fixed random projection.
fn project<R: Rng>(rng: &mut R, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    let (r, c) = tape.shape(x);
    let w = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = tape.constant(r, c, w);
    let m = tape.mul(x, w)?;
    Ok(tape.sum(m))
}

type Build = fn(&mut Tape, &[ParamId]) -> Result<NodeId>;
type OpCase = (&'static str, Vec<(usize, usize)>, Build);

fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul", vec![(3, 4), (4, 2)], |t, p| {
            let (a, b) = (t.param(p[0]), t.param(p[1]));
            t.matmul(a, b)
        }),
        ("add", vec![(3, 4), (3, 4)], |t, p| {
            let (a, b) = (t.param(p[0]), t.param(p[1]));
            t.add(a, b)
        }),
        ("add_broadcast", vec![(3, 4), (1, 4)], |t, p| {
            let (a, b) = (t.param(p[0]), t.param(p[1]));
            t.add(a, b)
        }),
        ("sub", vec![(2, 3), (2, 3)], |t, p| {
            let (a, b) = (t.param(p[0]), t.param(p[1]));
            t.sub(a, b)
        }),
        ("elementwise_mul", vec![(2, 3), (2, 3)], |t, p| {
            let (a, b) = (t.param(p[0]), t.param(p[1]));
            t.mul(a, b)
        }),
        ("scale", vec![(2, 3)], |t, p| {
            let a = t.param(p[0]);
            Ok(t.scale(a, -1.7))
        }),
        ("concat_cols", vec![(2, 3), (2, 2)], |t, p| {
            let (a, b) = (t.param(p[0]), t.param(p[1]));
            t.concat_cols(&[a, b])
        }),
        ("concat_rows", vec![(2, 3), (1, 3)], |t, p| {
            let (a, b) = (t.param(p[0]), t.param(p[1]));
            t.concat_rows(&[a, b])
        }),
        ("slice_cols", vec![(3, 5)], |t, p| {
            let a = t.param(p[0]);
            t.slice_cols(a, 1, 3)
        }),
        ("slice_rows", vec![(4, 2)], |t, p| {
            let a = t.param(p[0]);
            t.slice_rows(a, 1, 2)
        }),
        ("sigmoid", vec![(2, 4)], |t, p| {
            let a = t.param(p[0]);
            Ok(t.sigmoid(a))
        }),
        ("tanh", vec![(2, 4)], |t, p| {
            let a = t.param(p[0]);
            Ok(t.tanh(a))
        }),
        ("relu", vec![(2, 4)], |t, p| {
            let a = t.param(p[0]);
            Ok(t.relu(a))
        }),
        ("maxout", vec![(2, 6)], |t, p| {
            let a = t.param(p[0]);
            t.maxout(a, 3)
        }),
        ("softmax_cross_entropy", vec![(3, 4)], |t, p| {
            let a = t.param(p[0]);
            t.softmax_cross_entropy(a, &[1, 0, 3], None)
        }),
        ("softmax_cross_entropy_masked", vec![(2, 4)], |t, p| {
            let a = t.param(p[0]);
            let mask = [true, false, true, true, false, true, true, false];
            t.softmax_cross_entropy(a, &[2, 1], Some(&mask))
        }),
        ("attention_pool", vec![(5, 3), (3, 2), (2, 1)], |t, p| {
            let e = t.param(p[0]);
            let w = t.param(p[1]);
            let u = t.param(p[2]);
            let h = t.matmul(e, w)?;
            let h = t.tanh(h);
            let s = t.matmul(h, u)?;
            t.attention_pool(e, s, &[0, 2, 2, 5])
        }),
        ("gather", vec![(4, 3)], |t, p| t.gather(p[0], &[2, 0, 2])),
        ("window", vec![(4, 2)], |t, p| {
            let a = t.param(p[0]);
            Ok(t.window(a, 1))
        }),
        ("gather_slots", vec![(3, 2)], |t, p| {
            let a = t.param(p[0]);
            t.gather_slots(a, &[Some(0), None, Some(2), Some(2)], 2)
        }),
        ("dropout", vec![(2, 3)], |t, p| {
            let a = t.param(p[0]);
            Ok(t.dropout_with_mask(a, vec![2.0, 0.0, 2.0, 2.0, 0.0, 0.0]))
        }),
    ]
}

/// One check per op kind, with random inputs drawn from `seed`.
pub fn check_ops(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (k, (name, shapes, build)) in op_cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> =
            shapes.iter().enumerate().map(|(i, &(r, c))| matrix(&mut rng, &mut store, &format!("x{i}"), r, c)).collect();
        let proj_seed = rng.random::<u64>();
        let res = check_store(name, &store, |tape| {
            let y = build(tape, &ids)?;
            if tape.shape(y) == (1, 1) {
                return Ok(y);
            }
            project(&mut ChaCha8Rng::seed_from_u64(proj_seed), tape, y)
        })?;
        out.push(res);
    }
    Ok(out)
}

/// Small-dimension model configuration for end-to-end checks.
pub fn tiny_config(fusion: Fusion) -> ModelConfig {
    ModelConfig {
        embedding: EmbeddingConfig {
            page_dim: 6,
            word_dim: 4,
            max_tokens: 16,
            hash_buckets: 32,
            position_buckets: 2,
            attention_hidden: 3,
            visual_input_dim: 4,
            visual_hidden: 5,
            fusion,
            window_radius: 1,
            context_depth: 2,
            maxout_pieces: 3,
            index_buckets: 8,
            dropout: 0.2,
        },
        parser: ParserNetConfig { hidden: 4, pieces: 2, embedding_dim: 6 },
        n_classes: 3,
        init_seed: 11,
    }
}

/// Three pages: a head, its attachment, and a continuation of the attachment.
pub fn fixture_document() -> AnnotatedDocument {
    let tok = |s: &[&str]| s.iter().map(|t| t.to_string()).collect::<Vec<_>>();
    let pages = vec![
        Page::new(1, tok(&["ORIGINAL", "invoice", "total", "page", "1"]), vec![0.9, 0.1, 0.4, 0.7]),
        Page::new(2, tok(&["ORIGINAL", "ANNEX", "receipt"]), vec![0.8, 0.9, 0.2, 0.3]),
        Page::new(3, tok(&["receipt", "page", "2"]), vec![0.1, 0.1, 0.5, 0.6]),
    ];
    let tree = PageDependencyTree::from_heads(&[0, 1, 2], &[ArcLabel::Root, ArcLabel::Atch, ArcLabel::Next]);
    let seg_tags = derive_seg_tags(&tree, &Default::default());
    AnnotatedDocument { id: "fixture".into(), pages, tree, seg_tags, classes: vec![0, 2, 2] }
}

/// Joint loss of the fixture under `fusion`, with every parameter moved to
/// a random generic point.
pub fn check_joint_loss(fusion: Fusion, seed: u64) -> Result<CheckResult> {
    let mut model = Model::new(tiny_config(fusion))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in model.params.ids().collect::<Vec<_>>() {
        for v in model.params.get_mut(id).values.iter_mut() {
            *v = value(&mut rng) * 0.5;
        }
    }
    let doc = fixture_document();
    let prepared = PreparedDocument::new(&doc);
    let weights = LossWeights { seg: 1.0, parse: 0.7, cls: 1.3 };
    let name = format!("joint_loss[{}]", fusion.as_str());
    check_store(&name, &model.params, |tape| Ok(model.joint_loss(tape, &prepared, weights)?.total))
}

/// Every op check followed by the end-to-end loss for every fusion method.
pub fn check_all(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = check_ops(seed)?;
    for f in Fusion::ALL {
        out.push(check_joint_loss(f, seed)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!(relative_error(1e-9, 0.0) < 1e-4);
        assert!(relative_error(1.0, 1.1) > 1e-2);
    }

    #[test]
    fn ops_pass() {
        for r in check_ops(1).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }
}
