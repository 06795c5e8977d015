//! Every primitive's backward pass against central differences, plus the
//! softmax / normalization output properties.

use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vdgae_tape::gradcheck::{analytic_gradient, compare_gradients, numeric_gradient};
use vdgae_tape::{BoundParams, ParamSet, Tape, TapeError, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.5..1.5))
}

type LossFn = Box<dyn Fn(&mut Tape, &BoundParams) -> Result<Var, TapeError>>;

/// A fixed random projection turns any output into a scalar with a
/// non-trivial upstream gradient.
fn project(tape: &mut Tape, y: Var, weights: &Tensor) -> Result<Var, TapeError> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(y, w)?;
    tape.reduce_sum(p)
}

fn case(op: usize, rng: &mut ChaCha8Rng) -> (ParamSet, LossFn) {
    let r = rng.random_range(1..5usize);
    let c = rng.random_range(1..5usize);
    let mut p = ParamSet::new();
    p.insert("a", random(rng, r, c));
    let b_same = random(rng, r, c);
    let out_w = random(rng, r, c);
    match op {
        0 => {
            let k = rng.random_range(1..4usize);
            p.insert("b", random(rng, c, k));
            let w = random(rng, r, k);
            (p, Box::new(move |t, b| {
                let y = t.matmul(b.get("a")?, b.get("b")?)?;
                project(t, y, &w)
            }))
        }
        1 => {
            let k = rng.random_range(1..4usize);
            p.insert("b", random(rng, k, c));
            let w = random(rng, r, k);
            (p, Box::new(move |t, b| {
                let y = t.matmul_nt(b.get("a")?, b.get("b")?)?;
                project(t, y, &w)
            }))
        }
        2 => {
            p.insert("b", b_same);
            (p, Box::new(move |t, b| {
                let s = t.add(b.get("a")?, b.get("b")?)?;
                let d = t.sub(s, b.get("b")?)?;
                let m = t.mul(d, b.get("b")?)?;
                project(t, m, &out_w)
            }))
        }
        3 => {
            p.insert("row", random(rng, 1, c));
            (p, Box::new(move |t, b| {
                let y = t.add_row(b.get("a")?, b.get("row")?)?;
                let y = t.square(y)?;
                project(t, y, &out_w)
            }))
        }
        4 => {
            p.insert("col", random(rng, r, 1));
            (p, Box::new(move |t, b| {
                let y = t.mul_col(b.get("a")?, b.get("col")?)?;
                project(t, y, &out_w)
            }))
        }
        5 => (p, Box::new(move |t, b| {
            let y = t.scale(b.get("a")?, -2.5)?;
            let y = t.add_scalar(y, 0.7)?;
            let y = t.square(y)?;
            project(t, y, &out_w)
        })),
        6 => (p, Box::new(move |t, b| {
            let y = t.row_l2_normalize(b.get("a")?, 1e-12)?;
            project(t, y, &out_w)
        })),
        7 => (p, Box::new(move |t, b| {
            let y = t.row_softmax(b.get("a")?)?;
            project(t, y, &out_w)
        })),
        8 => (p, Box::new(move |t, b| {
            let y = t.sigmoid(b.get("a")?)?;
            let e = t.exp(y)?;
            project(t, e, &out_w)
        })),
        9 => (p, Box::new(move |t, b| {
            let s = t.square(b.get("a")?)?;
            let s = t.add_scalar(s, 0.1)?;
            let y = t.log(s, 1e-12)?;
            project(t, y, &out_w)
        })),
        10 => (p, Box::new(move |t, b| {
            // bounds chosen away from typical entries so the kink is not sampled
            let y = t.clamp(b.get("a")?, -1.01, 1.13)?;
            let y = t.square(y)?;
            project(t, y, &out_w)
        })),
        11 => {
            let extra = rng.random_range(1..4usize);
            p.insert("b", random(rng, r, extra));
            let w = random(rng, r, c + extra);
            let start = rng.random_range(0..c);
            let len = rng.random_range(1..=(c + extra - start));
            let w2 = random(rng, r, len);
            (p, Box::new(move |t, b| {
                let y = t.concat_cols(&[b.get("a")?, b.get("b")?])?;
                let s = t.slice_cols(y, start, len)?;
                let l1 = project(t, y, &w)?;
                let l2 = project(t, s, &w2)?;
                t.add(l1, l2)
            }))
        }
        12 => {
            let n = rng.random_range(1..8usize);
            let index: Arc<[usize]> = (0..n).map(|_| rng.random_range(0..r)).collect::<Vec<_>>().into();
            let w = random(rng, n, c);
            (p, Box::new(move |t, b| {
                let y = t.gather_rows(b.get("a")?, index.clone())?;
                project(t, y, &w)
            }))
        }
        13 => {
            let segs = rng.random_range(1..5usize);
            let index: Arc<[usize]> = (0..r).map(|_| rng.random_range(0..segs)).collect::<Vec<_>>().into();
            let w = random(rng, segs, c);
            (p, Box::new(move |t, b| {
                let y = t.segment_sum(b.get("a")?, index.clone(), segs)?;
                project(t, y, &w)
            }))
        }
        14 => {
            let w = random(rng, r, 1);
            (p, Box::new(move |t, b| {
                let a = b.get("a")?;
                let sq = t.square(a)?;
                let m = t.reduce_mean(sq)?;
                let sc = t.sum_cols(a)?;
                let l = project(t, sc, &w)?;
                t.add(m, l)
            }))
        }
        15 => {
            let w = random(rng, c, r);
            (p, Box::new(move |t, b| {
                let y = t.transpose(b.get("a")?)?;
                project(t, y, &w)
            }))
        }
        _ => {
            let targets = Arc::new(Tensor::from_fn(r, c, |_, _| if rng.random_bool(0.4) { 1.0 } else { 0.0 }));
            let pw = rng.random_range(0.5..4.0);
            (p, Box::new(move |t, b| {
                let x = t.scale(b.get("a")?, 3.0)?;
                t.weighted_bce_with_logits(x, targets.clone(), pw, 1.7)
            }))
        }
    }
}

#[test]
fn every_primitive_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let ops = 17;
    for trial in 0..100 {
        for op in 0..ops {
            let (params, f) = case(op, &mut rng);
            let (_, analytic) = analytic_gradient(&params, &f).unwrap();
            let numeric = numeric_gradient(&params, H, &f).unwrap();
            let report = compare_gradients(&analytic, &numeric);
            assert!(
                report.passes(TOL),
                "trial {trial} op {op}: rel err {} at {:?}",
                report.max_rel_err,
                report.worst
            );
        }
    }
}

#[test]
fn sigmoid_of_linear_map_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut p = ParamSet::new();
    p.insert("w", random(&mut rng, 4, 3));
    p.insert("x", random(&mut rng, 3, 2));
    let report = vdgae_tape::finite_diff_check(&p, H, |t: &mut Tape, b: &BoundParams| {
        let y = t.matmul(b.get("w")?, b.get("x")?)?;
        let s = t.sigmoid(y)?;
        t.reduce_sum(s)
    })
    .unwrap();
    assert!(report.passes(TOL), "{report:?}");
}

#[test]
fn forward_passes_are_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (params, f) = case(1, &mut rng);
        let (v, g) = analytic_gradient(&params, &f).unwrap();
        (v.to_bits(), g["a"].data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

fn matrix() -> impl Strategy<Value = Tensor> {
    (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
        prop::collection::vec(-50.0f64..50.0, r * c)
            .prop_map(move |v| Tensor::from_vec(r, c, v).unwrap())
    })
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in matrix()) {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let y = tape.row_softmax(v).unwrap();
        let y = tape.value(y);
        for i in 0..y.rows() {
            prop_assert!(y.row(i).iter().all(|&p| p >= 0.0));
            let s: f64 = y.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn normalized_rows_have_unit_norm(x in matrix()) {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = tape.row_l2_normalize(v, 1e-12).unwrap();
        let y = tape.value(y);
        for i in 0..y.rows() {
            let input_norm: f64 = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if input_norm > 1e-12 {
                let n: f64 = y.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() <= 1e-9);
            }
        }
    }
}
