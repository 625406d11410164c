mod common;

use common::{randn, small_spec};
use mtgate::autodiff::Graph;
use mtgate::backbone::{count_cost, linear_flops, ExecutionPlan, GateMode};
use mtgate::gumbel::{SeededRng, ZeroNoise};
use mtgate::losses::task_loss;
use mtgate::task::TaskKind;
use mtgate::{GatedBackbone, Tensor};
use proptest::prelude::*;

fn model(seed: u64) -> GatedBackbone {
    GatedBackbone::new(small_spec(3), seed).unwrap()
}

/// Output of block `l` on `x` under `(u, w)`, plus the reference branches.
fn fuse(m: &GatedBackbone, x: &Tensor, l: usize, u: bool, w: bool) -> (Tensor, Tensor) {
    let g = Graph::new();
    let b = m.bind(&g, |_| true);
    let xv = g.constant(x.clone());
    let out = m.block_forward(&b, l, xv, u, GateMode::Forced(w), &mut ZeroNoise).unwrap();
    let active = xv.add(m.transform(&b, l, xv).unwrap()).unwrap().relu();
    (out.y.value(), active.value())
}

proptest! {
    #[test]
    fn fusion_truth_table(seed in 0u64..1000, rows in 1usize..6) {
        let m = model(seed);
        let mut rng = SeededRng::new(seed);
        let x = randn(&mut rng, &[rows, 6]);
        // gated block 2: all four (u, w)
        for (u, w) in [(false, false), (false, true), (true, false), (true, true)] {
            let (y, active) = fuse(&m, &x, 2, u, w);
            if u && w {
                prop_assert_eq!(y.data(), active.data());
            } else {
                prop_assert_eq!(y.data(), x.data());
            }
        }
    }
}

#[test]
fn skipped_blocks_are_gradient_isolated_and_perturbation_invariant() {
    let m = model(4);
    let mut rng = SeededRng::new(4);
    let x = randn(&mut rng, &[5, 4]);
    let labels = [0.0, 1.0, 2.0, 1.0, 0.0];
    // task 0 skips block 1, gate of block 2 forced off
    let mut plan = ExecutionPlan::all_ones(3, 2);
    plan.u[1][0] = false;
    plan.u[1][1] = false;
    let run = |m: &GatedBackbone| {
        let g = Graph::new();
        let b = m.bind(&g, |_| true);
        let pf = m.forward_plan(&b, g.constant(x.clone()), &plan, GateMode::Forced(false), &mut ZeroNoise).unwrap();
        let loss = task_loss(pf.outputs[0], &labels, TaskKind::Classification { classes: 3 }).unwrap();
        g.backward(loss).unwrap();
        (pf.outputs[0].value(), b.grads())
    };
    let (out, grads) = run(&m);
    for l in [1, 2] {
        for name in m.block_param_names(l) {
            let zero = grads.get(&name).is_none_or(|t| t.data().iter().all(|&v| v == 0.0));
            assert!(zero, "{name} received gradient");
        }
    }
    // block 0 did execute
    assert!(grads["block0.fc1.w"].data().iter().any(|&v| v != 0.0));
    let mut other = m.clone();
    for l in [1, 2] {
        for name in m.block_param_names(l) {
            let t = other.param_mut(&name).unwrap();
            let noise = randn(&mut rng, t.shape());
            for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
                *v += 10.0 * n;
            }
        }
    }
    assert_eq!(run(&other).0.data(), out.data());
}

#[test]
fn hard_zero_gate_rows_get_no_block_gradient() {
    let m = model(8);
    let mut rng = SeededRng::new(8);
    let x = randn(&mut rng, &[1, 6]);
    let g = Graph::new();
    let b = m.bind(&g, |_| true);
    // straight-through gate on a single row: whatever the draw, if it skips,
    // the block transform must see no gradient
    for trial in 0..20 {
        g.zero_grad();
        let mut noise = SeededRng::new(trial);
        let out = m
            .block_forward(&b, 2, g.constant(x.clone()), true, GateMode::StraightThrough { tau: 1.0 }, &mut noise)
            .unwrap();
        let loss = out.y.square().sum();
        g.backward(loss).unwrap();
        let gw = b.get("block2.fc1.w").grad();
        let touched = gw.is_some_and(|t| t.data().iter().any(|&v| v != 0.0));
        if !out.executed[0] {
            assert!(!touched);
            assert_eq!(out.y.value().data(), x.data());
        }
    }
}

#[test]
fn instances_in_one_batch_can_take_different_paths() {
    let mut m = model(1);
    // relevance = 5·relu(x0) − 5·relu(−x0): positive first feature executes
    let gh = m.spec().gate_hidden_width();
    let mut w1 = vec![0.0; 6 * gh];
    w1[0] = 1.0;
    w1[1] = -1.0;
    *m.param_mut("gate2.fc1.w").unwrap() = Tensor::new(vec![6, gh], w1).unwrap();
    *m.param_mut("gate2.fc1.b").unwrap() = Tensor::zeros(vec![gh]).unwrap();
    let mut w2 = vec![0.0; gh * 2];
    w2[1] = 5.0;
    w2[3] = -5.0;
    *m.param_mut("gate2.fc2.w").unwrap() = Tensor::new(vec![gh, 2], w2).unwrap();
    *m.param_mut("gate2.fc2.b").unwrap() = Tensor::zeros(vec![2]).unwrap();
    let mut x = vec![0.3; 12];
    x[0] = 2.0;
    x[6] = -2.0;
    let g = Graph::new();
    let b = m.bind(&g, |_| false);
    let xv = g.constant(Tensor::new(vec![2, 6], x).unwrap());
    let out = m.block_forward(&b, 2, xv, true, GateMode::Threshold, &mut ZeroNoise).unwrap();
    assert_eq!(out.executed, vec![true, false]);
    assert_eq!(&out.y.value().data()[6..], &xv.value().data()[6..]);
}

#[test]
fn cost_accounting() {
    let spec = small_spec(3);
    let m = GatedBackbone::new(spec.clone(), 0).unwrap();
    let ones = ExecutionPlan::all_ones(3, 2);
    let full = count_cost(&spec, &ones, &[1.0; 3]);
    assert_eq!(full.params, m.num_params());
    assert_eq!(full.gate_params, m.num_gate_params());

    let ungated = spec.without_gates();
    let plain = count_cost(&ungated, &ones, &[1.0; 3]);
    assert_eq!(full.params - plain.params, m.num_gate_params());
    // plain backbone: stem, three blocks, two heads
    let (d, w, h) = (4, 6, 6);
    let expected = linear_flops(d, w) + 3.0 * (linear_flops(w, h) + linear_flops(h, w)) + linear_flops(w, 3) + linear_flops(w, 1);
    assert_eq!(plain.expected_flops, expected);

    // halving β on gated blocks halves their transform contribution
    let half = count_cost(&spec, &ones, &[1.0, 0.5, 0.5]);
    let block = linear_flops(w, h) + linear_flops(h, w);
    assert!((full.expected_flops - half.expected_flops - 2.0 * 0.5 * block).abs() < 1e-9);

    // diverging paths pay for each distinct prefix
    let mut split = ones.clone();
    split.u[0][1] = false;
    let c = count_cost(&ungated, &split, &[1.0; 3]);
    assert_eq!(c.expected_flops, expected + 2.0 * block);
}
