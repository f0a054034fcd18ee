//! Dual-route checks: the perforated gather/compute/scatter path against the
//! dense-then-mask oracle, straight-through gate behavior, determinism, and
//! conv linearity.

use pag_core::blocks::{pag_block, register_block, BlockParams};
use pag_core::gating::concrete_relax;
use pag_core::tape::Tape;
use pag_core::{conv2d_forward, conv2d_perforated_forward, ConvSpec, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0)).unwrap()
}

#[test]
fn perforation_equivalence_over_many_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    for trial in 0..40 {
        let spec = ConvSpec::new(2, 3, 3, 3, 1 + trial % 2);
        let input = rand_tensor(&[3, 9, 8], &mut rng);
        let kernel = rand_tensor(&[2, 3, 3, 3], &mut rng);
        let density = rng.gen_range(0.1..0.9);
        let mask =
            Tensor::from_fn(&[9, 8], |_| if rng.gen_bool(density) { 1.0 } else { 0.0 }).unwrap();
        let dense = conv2d_forward(&input, &kernel, &spec).unwrap();
        let perf = conv2d_perforated_forward(&input, &kernel, &spec, &mask).unwrap();
        for c in 0..2 {
            for y in 0..9 {
                for x in 0..8 {
                    let want = dense.get3(c, y, x) * mask.get2(y, x);
                    let got = perf.get3(c, y, x);
                    assert!(
                        (got - want).abs() < 1e-12,
                        "trial {trial} at ({c},{y},{x}): {got} vs {want}"
                    );
                }
            }
        }
    }
}

#[test]
fn conv_is_linear_in_its_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let spec = ConvSpec::new(2, 2, 3, 3, 1);
    let kernel = rand_tensor(&[2, 2, 3, 3], &mut rng);
    let x = rand_tensor(&[2, 6, 6], &mut rng);
    let y = rand_tensor(&[2, 6, 6], &mut rng);
    let (a, b) = (1.7, -0.6);
    let combo = Tensor::from_fn(&[2, 6, 6], |i| a * x.data()[i] + b * y.data()[i]).unwrap();
    let lhs = conv2d_forward(&combo, &kernel, &spec).unwrap();
    let cx = conv2d_forward(&x, &kernel, &spec).unwrap();
    let cy = conv2d_forward(&y, &kernel, &spec).unwrap();
    let rhs = Tensor::from_fn(&[2, 6, 6], |i| a * cx.data()[i] + b * cy.data()[i]).unwrap();
    assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-10);
}

#[test]
fn identical_seeds_give_bitwise_identical_gated_blocks() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let p = BlockParams::random(4, 2, true, &mut rng).unwrap();
        let input = rand_tensor(&[4, 6, 6], &mut rng);
        let mut tape = Tape::new();
        let i = tape.leaf(input);
        let ids = register_block(&mut tape, &p);
        let out = pag_block(&mut tape, i, &p, &ids, 0.8, Some(&mut rng), false).unwrap();
        (
            tape.value(out.output).data().to_vec(),
            tape.value(out.mask).data().to_vec(),
        )
    };
    let (o1, m1) = run();
    let (o2, m2) = run();
    assert_eq!(o1, o2);
    assert_eq!(m1, m2);
}

#[test]
fn st_gate_forward_is_binary_and_backward_matches_relaxation() {
    // Forward: strictly one-hot across a large pixel count.
    let mut rng = ChaCha8Rng::seed_from_u64(63);
    let logits = rand_tensor(&[2, 100, 100], &mut rng);
    let gumbels = pag_core::gumbel_sample(&[2, 100, 100], &mut rng);
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone());
    let gate = tape.straight_through_gate(l, gumbels.clone(), 0.5).unwrap();
    let gv = tape.value(gate);
    for y in 0..100 {
        for x in 0..100 {
            let a = gv.get3(0, y, x);
            let b = gv.get3(1, y, x);
            assert!(a == 0.0 || a == 1.0);
            assert!(a + b == 1.0);
        }
    }

    // Backward of sum(gate * w) against finite differences of the relaxed
    // path sum(softmax((logits+g)/tau) * w).
    let tau = 0.7;
    let small_logits = rand_tensor(&[3, 3, 3], &mut rng);
    let small_gumbels = pag_core::gumbel_sample(&[3, 3, 3], &mut rng);
    let w = rand_tensor(&[3, 3, 3], &mut rng);

    let mut tape = Tape::new();
    let l = tape.leaf(small_logits.clone());
    let gate = tape
        .straight_through_gate(l, small_gumbels.clone(), tau)
        .unwrap();
    let wn = tape.leaf(w.clone());
    let prod = tape.mul(gate, wn).unwrap();
    let loss = tape.sum_all(prod).unwrap();
    tape.backward(loss).unwrap();
    let analytic = tape.grad(l).unwrap().clone();

    let relaxed_value = |logits: &Tensor| -> f64 {
        let soft = concrete_relax(logits, &small_gumbels, tau).unwrap();
        soft.data().iter().zip(w.data()).map(|(s, wv)| s * wv).sum()
    };
    let eps = 1e-5;
    for i in 0..small_logits.len() {
        let mut plus = small_logits.clone();
        plus.data_mut()[i] += eps;
        let mut minus = small_logits.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (relaxed_value(&plus) - relaxed_value(&minus)) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        assert!(rel < 1e-5, "coord {i}: {a} vs {numeric}");
    }
}

#[test]
fn relaxation_approaches_the_hard_gate_as_tau_vanishes() {
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    // Logit gaps of at least one unit.
    let logits = Tensor::from_fn(&[2, 4, 4], |i| {
        if i < 16 {
            0.0
        } else if rng.gen_bool(0.5) {
            1.5
        } else {
            -1.5
        }
    })
    .unwrap();
    let zeros = Tensor::zeros(&[2, 4, 4]);
    let soft = concrete_relax(&logits, &zeros, 1e-4).unwrap();

    let mut tape = Tape::new();
    let l = tape.leaf(logits);
    let hard = tape.straight_through_gate(l, zeros, 1e-4).unwrap();
    let diff = soft.max_abs_diff(tape.value(hard)).unwrap();
    assert!(diff < 1e-6, "relaxation gap {diff}");
}

#[test]
fn equal_logit_gate_frequency_is_balanced() {
    let mut rng = ChaCha8Rng::seed_from_u64(65);
    let logits = Tensor::zeros(&[2, 100, 100]);
    let gumbels = pag_core::gumbel_sample(&[2, 100, 100], &mut rng);
    let mut tape = Tape::new();
    let l = tape.leaf(logits);
    let gate = tape.straight_through_gate(l, gumbels, 1.0).unwrap();
    let on = tape.channel(gate, 1).unwrap();
    let density = tape.value(on).mean();
    assert!((density - 0.5).abs() < 0.02, "density {density}");
}

#[test]
fn gate_logits_learn_from_rewarding_activation() {
    // One SGD step on a loss that rewards switched-on gates must strictly
    // raise the mean on-logit.
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut logits = rand_tensor(&[2, 5, 5], &mut rng);
    let gumbels = pag_core::gumbel_sample(&[2, 5, 5], &mut rng);

    let mean_on = |t: &Tensor| -> f64 {
        (0..25).map(|i| t.data()[25 + i]).sum::<f64>() / 25.0
    };
    let before = mean_on(&logits);

    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone());
    let gate = tape.straight_through_gate(l, gumbels, 1.0).unwrap();
    let on = tape.channel(gate, 1).unwrap();
    let s = tape.sum_all(on).unwrap();
    let loss = tape.scale(s, -1.0).unwrap();
    tape.backward(loss).unwrap();
    let grad = tape.grad(l).unwrap().clone();

    let lr = 0.1;
    for (v, g) in logits.data_mut().iter_mut().zip(grad.data()) {
        *v -= lr * g;
    }
    let after = mean_on(&logits);
    assert!(after > before, "on-logit mean {before} -> {after}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn perforation_equivalence_property(seed in any::<u64>(), density in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = ConvSpec::new(2, 2, 3, 3, 1);
        let input = rand_tensor(&[2, 6, 6], &mut rng);
        let kernel = rand_tensor(&[2, 2, 3, 3], &mut rng);
        let mask = Tensor::from_fn(&[6, 6], |_| if rng.gen_bool(density) { 1.0 } else { 0.0 }).unwrap();
        let dense = conv2d_forward(&input, &kernel, &spec).unwrap();
        let perf = conv2d_perforated_forward(&input, &kernel, &spec, &mask).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                for c in 0..2 {
                    let want = dense.get3(c, y, x) * mask.get2(y, x);
                    prop_assert!((perf.get3(c, y, x) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gate_outputs_are_always_one_hot(seed in any::<u64>(), k in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = rand_tensor(&[k, 4, 4], &mut rng);
        let gumbels = pag_core::gumbel_sample(&[k, 4, 4], &mut rng);
        let mut tape = Tape::new();
        let l = tape.leaf(logits);
        let gate = tape.straight_through_gate(l, gumbels, 0.5).unwrap();
        let gv = tape.value(gate);
        for y in 0..4 {
            for x in 0..4 {
                let total: f64 = (0..k).map(|c| gv.get3(c, y, x)).sum();
                prop_assert_eq!(total, 1.0);
                for c in 0..k {
                    let v = gv.get3(c, y, x);
                    prop_assert!(v == 0.0 || v == 1.0);
                }
            }
        }
    }
}
