#![allow(clippy::needless_range_loop)]

use attnreuse_core::accounting::count_params;
use attnreuse_core::autodiff::{BackwardFault, Tape};
use attnreuse_core::distill::Student;
use attnreuse_core::encoder::{
    attention, mhsa_forward, reuse_attention, reuse_mhsa_forward, Encoder, EncoderConfig, Linear,
};
use attnreuse_core::gradcheck::{grad_check, grad_check_many};
use attnreuse_core::reuse::{Directive, ReusePattern};
use attnreuse_core::{Rng, Tensor};

fn naive_linear(x: &[f64], l: &Linear) -> Vec<f64> {
    let (rows, cols) = (l.weight.rows(), l.weight.cols());
    (0..cols)
        .map(|j| {
            let mut s = l.bias.as_ref().map_or(0.0, |b| b.data()[j]);
            for i in 0..rows {
                s += x[i] * l.weight.at(i, j);
            }
            s
        })
        .collect()
}

fn naive_maps(x: &Tensor, w: &attnreuse_core::encoder::AttentionWeights) -> Vec<Vec<Vec<f64>>> {
    let n = x.rows();
    w.heads
        .iter()
        .map(|h| {
            let q: Vec<_> = (0..n)
                .map(|i| naive_linear(x.row(i), h.query.as_ref().unwrap()))
                .collect();
            let k: Vec<_> = (0..n)
                .map(|i| naive_linear(x.row(i), h.key.as_ref().unwrap()))
                .collect();
            let dk = q[0].len() as f64;
            (0..n)
                .map(|i| {
                    let logits: Vec<f64> = (0..n)
                        .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / dk.sqrt())
                        .collect();
                    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    e.iter().map(|v| v / z).collect()
                })
                .collect()
        })
        .collect()
}

fn naive_mix(x: &Tensor, w: &attnreuse_core::encoder::AttentionWeights, maps: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let n = x.rows();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut cat = Vec::new();
        for (h, a) in w.heads.iter().zip(maps) {
            let v: Vec<_> = (0..n).map(|j| naive_linear(x.row(j), &h.value)).collect();
            for c in 0..v[0].len() {
                cat.push((0..n).map(|j| a[i][j] * v[j][c]).sum::<f64>());
            }
        }
        out.push(naive_linear(&cat, &w.output));
    }
    out
}

fn toy_attention(seed: u64) -> (Tensor, Encoder) {
    let mut rng = Rng::new(seed);
    let cfg = EncoderConfig::toy(2, 8, 2, 16, 8);
    let enc = Encoder::init(&cfg, &ReusePattern::from_codes(&[0, 1]), &mut rng).unwrap();
    (Tensor::randn(&[6, 8], 1.0, &mut rng), enc)
}

#[test]
fn mhsa_matches_naive_loops() {
    let (x, enc) = toy_attention(42);
    let w = &enc.weights.layers[0].attention;
    let (out, maps) = mhsa_forward(&x, w).unwrap();
    let expected_maps = naive_maps(&x, w);
    for (m, e) in maps.iter().zip(&expected_maps) {
        for i in 0..6 {
            for j in 0..6 {
                assert!((m.at(i, j) - e[i][j]).abs() < 1e-10);
            }
        }
    }
    let expected = naive_mix(&x, w, &expected_maps);
    for i in 0..6 {
        for j in 0..8 {
            assert!((out.at(i, j) - expected[i][j]).abs() < 1e-10);
        }
    }
}

#[test]
fn reuse_mhsa_matches_naive_loops() {
    let (x, enc) = toy_attention(42);
    let source = &enc.weights.layers[0].attention;
    let reuser = &enc.weights.layers[1].attention;
    assert!(reuser.heads.iter().all(|h| h.query.is_none() && h.key.is_none()));
    let (_, maps) = mhsa_forward(&x, source).unwrap();
    let x2 = Tensor::randn(&[6, 8], 1.0, &mut Rng::new(7));
    let out = reuse_mhsa_forward(&x2, reuser, &maps).unwrap();
    let expected = naive_mix(&x2, reuser, &naive_maps(&x, source));
    for i in 0..6 {
        for j in 0..8 {
            assert!((out.at(i, j) - expected[i][j]).abs() < 1e-10);
        }
    }
}

#[test]
fn matmul_gradient_matches_central_differences() {
    let mut rng = Rng::new(1);
    let a = Tensor::randn(&[4, 5], 1.0, &mut rng);
    let b = Tensor::randn(&[5, 6], 1.0, &mut rng);
    let c = Tensor::randn(&[4, 6], 1.0, &mut rng);
    let report = grad_check_many(
        |tape, v| {
            let p = tape.matmul(v[0], v[1])?;
            let w = tape.constant(&c);
            let m = tape.mul(p, w)?;
            Ok(tape.sum(m))
        },
        &[a, b],
        1e-6,
        BackwardFault::None,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn softmax_and_layernorm_gradients() {
    let mut rng = Rng::new(2);
    let w = Tensor::randn(&[3, 3], 1.0, &mut rng);
    let err = grad_check(
        |tape, x| {
            let s = tape.softmax_rows(x)?;
            let c = tape.constant(&w);
            let m = tape.mul(s, c)?;
            Ok(tape.sum(m))
        },
        &Tensor::randn(&[3, 3], 1.0, &mut rng),
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");

    let w = Tensor::randn(&[3, 5], 1.0, &mut rng);
    let report = grad_check_many(
        |tape, v| {
            let y = tape.layernorm(v[0], v[1], v[2])?;
            let c = tape.constant(&w);
            let m = tape.mul(y, c)?;
            Ok(tape.sum(m))
        },
        &[
            Tensor::randn(&[3, 5], 1.0, &mut rng),
            Tensor::randn(&[5], 1.0, &mut rng),
            Tensor::randn(&[5], 1.0, &mut rng),
        ],
        1e-6,
        BackwardFault::None,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn reused_maps_carry_gradient_to_source_key_and_query() {
    let (x, enc) = toy_attention(3);
    let mut rng = Rng::new(4);
    let x2 = Tensor::randn(&[6, 8], 1.0, &mut rng);
    let c = Tensor::randn(&[6, 8], 1.0, &mut rng);
    let source = enc.weights.layers[0].attention.clone();
    let reuser = enc.weights.layers[1].attention.clone();
    let q = source.heads[0].query.as_ref().unwrap().weight.clone();
    let k = source.heads[1].key.as_ref().unwrap().weight.clone();

    // The loss sees the source layer only through its maps.
    let build = |tape: &mut Tape, qv, kv| {
        let mut w = source.map(&mut |t| tape.constant(t));
        w.heads[0].query.as_mut().unwrap().weight = qv;
        w.heads[1].key.as_mut().unwrap().weight = kv;
        let xv = tape.constant(&x);
        let (_, maps) = attention(tape, xv, &w)?;
        let rw = reuser.map(&mut |t| tape.constant(t));
        let x2v = tape.constant(&x2);
        let out = reuse_attention(tape, x2v, &rw, &maps)?;
        let cv = tape.constant(&c);
        let m = tape.mul(out, cv)?;
        Ok(tape.sum(m))
    };

    let mut tape = Tape::new();
    let (qv, kv) = (tape.param(&q), tape.param(&k));
    let loss = build(&mut tape, qv, kv).unwrap();
    tape.backward(loss).unwrap();
    for v in [qv, kv] {
        assert!(tape.grad(v).unwrap().iter().any(|g| g.abs() > 1e-8));
    }

    let report = grad_check_many(|tape, v| build(tape, v[0], v[1]), &[q, k], 1e-6, BackwardFault::None).unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

fn random_pattern(layers: usize, rng: &mut Rng) -> ReusePattern {
    let mut dirs = vec![Directive::Compute];
    for _ in 1..layers {
        let computing: Vec<usize> = dirs
            .iter()
            .enumerate()
            .filter(|(_, d)| matches!(d, Directive::Compute))
            .map(|(i, _)| i + 1)
            .collect();
        if rng.uniform() < 0.5 {
            dirs.push(Directive::Reuse {
                source: computing[rng.below(computing.len())],
            });
        } else {
            dirs.push(Directive::Compute);
        }
    }
    ReusePattern::from_directives(dirs)
}

#[test]
fn enumerated_parameters_equal_closed_form() {
    let mut rng = Rng::new(2024);
    for _ in 0..25 {
        let layers = 1 + rng.below(6);
        let heads = 1 + rng.below(4);
        let width = heads * (1 + rng.below(5));
        let mut cfg = EncoderConfig::toy(layers, width, heads, 1 + rng.below(40), 1 + rng.below(7));
        cfg.teacher_width = 1 + rng.below(20);
        cfg.max_positions = 1 + rng.below(30);
        cfg.include_biases = rng.uniform() < 0.5;
        if rng.uniform() < 0.5 {
            cfg.key_width = Some(1 + rng.below(6));
            cfg.value_width = Some(1 + rng.below(6));
        }
        let pattern = random_pattern(layers, &mut rng);
        let student = Student::init(&cfg, &pattern, &mut rng).unwrap();
        assert_eq!(
            student.num_params() as u64,
            count_params(&cfg, &pattern).params_total,
            "{cfg:?} {pattern}"
        );
    }
}
