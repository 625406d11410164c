#![allow(dead_code)]

use mtgate::autodiff::{Graph, Var};
use mtgate::backbone::{BackboneSpec, Bound};
use mtgate::gradcheck::{check_gradients, relative_error};
use mtgate::gumbel::{relaxed_sample_var, BernoulliLogits, FixedNoise, SeededRng};
use mtgate::losses::{instance_loss, sharing_loss, sparsity_loss, task_loss};
use mtgate::policy::PolicyDistribution;
use mtgate::task::{TaskKind, TaskSpec};
use mtgate::{GatedBackbone, Tensor};

pub const FD_STEP: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-3;
pub const INSTANCES: usize = 100;

pub fn randn(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

pub fn uniform(rng: &mut SeededRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| lo + (hi - lo) * rng.uniform()).collect()).unwrap()
}

pub fn two_tasks() -> Vec<TaskSpec> {
    vec![
        TaskSpec {
            name: "coarse".into(),
            kind: TaskKind::Classification { classes: 3 },
        },
        TaskSpec {
            name: "score".into(),
            kind: TaskKind::Regression,
        },
    ]
}

/// Small backbone: 4 inputs, width 6, `blocks` blocks, last two gated.
pub fn small_spec(blocks: usize) -> BackboneSpec {
    let mut s = BackboneSpec::uniform(4, 6, blocks, two_tasks(), 2.min(blocks), 0);
    s.gate_hidden = Some(3);
    s
}

/// Smallest |pre-activation| over every ReLU of `x → stem → blocks` when
/// block `l` mixes its transform with weight `weights[l]`, plus every gate's
/// hidden ReLU. Finite differences are only trusted away from these kinks.
pub fn kink_margin(model: &GatedBackbone, x: &Tensor, weights: &[f64]) -> f64 {
    let g = Graph::new();
    let b = model.bind(&g, |_| false);
    let mut h = model.stem(&b, g.constant(x.clone())).unwrap();
    let mut m = f64::INFINITY;
    let mut upd = |v: &Var<'_, f64>| {
        for &a in v.value().data() {
            m = m.min(a.abs());
        }
    };
    for (l, &w) in weights.iter().enumerate() {
        let p = format!("block{l}");
        let pre = h.linear(b.get(&format!("{p}.fc1.w")), b.get(&format!("{p}.fc1.b"))).unwrap();
        upd(&pre);
        let z = pre
            .relu()
            .linear(b.get(&format!("{p}.fc2.w")), b.get(&format!("{p}.fc2.b")))
            .unwrap();
        if model.spec().gate_enable[l] {
            let q = format!("gate{l}");
            let gp = h.linear(b.get(&format!("{q}.fc1.w")), b.get(&format!("{q}.fc1.b"))).unwrap();
            upd(&gp);
        }
        let s = h.add(z.scale(w)).unwrap();
        upd(&s);
        h = s.relu();
    }
    m
}

/// Central-difference check of `loss` with respect to the named model
/// parameters; returns the worst relative error over those parameters.
pub fn fd_model<F>(model: &GatedBackbone, names: &[String], loss: F) -> f64
where
    F: for<'g> Fn(&GatedBackbone, &'g Graph<f64>, &Bound<'g, f64>) -> Var<'g, f64>,
{
    let g = Graph::new();
    let b = model.bind(&g, |_| true);
    let l = loss(model, &g, &b);
    g.backward(l).unwrap();
    let grads = b.grads();
    let eval = |m: &GatedBackbone| {
        let g = Graph::new();
        let b = m.bind(&g, |_| false);
        loss(m, &g, &b).item()
    };
    let mut worst: f64 = 0.0;
    for name in names {
        let n = model.param(name).unwrap().numel();
        let mut numeric = vec![0.0; n];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = model.clone();
            plus.param_mut(name).unwrap().data_mut()[j] += FD_STEP;
            let mut minus = model.clone();
            minus.param_mut(name).unwrap().data_mut()[j] -= FD_STEP;
            *slot = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        }
        let analytic = grads.get(name).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// One row of the gradient suite.
#[derive(Debug, Clone)]
pub struct GradCase {
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
}

fn run_case(name: &'static str, seed: u64, mut one: impl FnMut(&mut SeededRng) -> Option<f64>) -> GradCase {
    let mut rng = SeededRng::derive(seed, &[name.len() as u64, name.bytes().map(u64::from).sum()]);
    let mut worst: f64 = 0.0;
    let mut instances = 0;
    let mut attempts = 0;
    while instances < INSTANCES {
        attempts += 1;
        assert!(attempts < 20 * INSTANCES, "{name}: too many rejected instances");
        if let Some(e) = one(&mut rng) {
            worst = worst.max(e);
            instances += 1;
        }
    }
    GradCase { name, instances, worst }
}

fn fd(inputs: &[Tensor], f: impl for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> mtgate::tensor::TensorResult<Var<'g, f64>>) -> f64 {
    check_gradients(inputs, FD_STEP, f).unwrap().max_rel_error()
}

fn dims(rng: &mut SeededRng) -> (usize, usize) {
    (1 + rng.below(4), 1 + rng.below(4))
}

fn far_from(values: &[f64], margin: f64) -> bool {
    values.iter().all(|v| v.abs() > margin)
}

/// Every primitive, the gating unit, the relaxed policy path and the loss
/// terms, each over `INSTANCES` random instances.
pub fn gradient_suite(seed: u64) -> Vec<GradCase> {
    let mut out = Vec::new();
    macro_rules! binary {
        ($name:literal, $op:ident) => {
            out.push(run_case($name, seed, |r| {
                let (m, n) = dims(r);
                let (a, b) = (randn(r, &[m, n]), randn(r, &[m, n]));
                Some(fd(&[a, b], |_, v| Ok(v[0].$op(v[1])?.square().sum())))
            }));
        };
    }
    binary!("add", add);
    binary!("sub", sub);
    binary!("mul", mul);
    out.push(run_case("scalar broadcast", seed, |r| {
        let (m, n) = dims(r);
        let (a, s) = (randn(r, &[m, n]), randn(r, &[1]));
        Some(fd(&[a, s], |_, v| Ok(v[0].mul(v[1])?.add(v[1])?.square().sum())))
    }));
    macro_rules! unary {
        ($name:literal, $accept:expr, $m:ident $(, $arg:expr)*) => {
            out.push(run_case($name, seed, |r| {
                let (m, n) = dims(r);
                let a = randn(r, &[m, n]);
                if !$accept(a.data()) {
                    return None;
                }
                let w = randn(r, &[m, n]);
                Some(fd(&[a, w], |_, v| Ok(v[0].$m($($arg),*).mul(v[1])?.sum())))
            }));
        };
    }
    let any = |_: &[f64]| true;
    unary!("add_scalar", any, add_scalar, 0.7);
    unary!("scale", any, scale, -1.3);
    unary!("neg", any, neg);
    unary!("square", any, square);
    unary!("relu", |d: &[f64]| far_from(d, 1e-3), relu);
    unary!("sigmoid", any, sigmoid);
    unary!("exp", any, exp);
    unary!("abs", |d: &[f64]| far_from(d, 1e-3), abs);
    unary!("softplus", any, softplus);
    out.push(run_case("log", seed, |r| {
        let (m, n) = dims(r);
        let a = uniform(r, &[m, n], 0.2, 3.0);
        let w = randn(r, &[m, n]);
        Some(fd(&[a, w], |_, v| Ok(v[0].log().mul(v[1])?.sum())))
    }));
    out.push(run_case("matmul", seed, |r| {
        let (m, k) = dims(r);
        let n = 1 + r.below(4);
        let (a, b) = (randn(r, &[m, k]), randn(r, &[k, n]));
        Some(fd(&[a, b], |_, v| Ok(v[0].matmul(v[1])?.square().sum())))
    }));
    out.push(run_case("linear", seed, |r| {
        let (m, k) = dims(r);
        let n = 1 + r.below(4);
        let (x, w, b) = (randn(r, &[m, k]), randn(r, &[k, n]), randn(r, &[n]));
        Some(fd(&[x, w, b], |_, v| Ok(v[0].linear(v[1], v[2])?.square().sum())))
    }));
    out.push(run_case("conv1d", seed, |r| {
        let (n, cin) = dims(r);
        let cout = 1 + r.below(3);
        let kw = 1 + r.below(3);
        let len = kw + r.below(4);
        let (x, k) = (randn(r, &[n, cin, len]), randn(r, &[cout, cin, kw]));
        Some(fd(&[x, k], |_, v| Ok(v[0].conv1d(v[1])?.square().sum())))
    }));
    for (name, log) in [("softmax", false), ("log_softmax", true)] {
        out.push(run_case(name, seed, |r| {
            let (m, n) = dims(r);
            let axis = r.below(2);
            let (a, w) = (randn(r, &[m, n + 1]), randn(r, &[m, n + 1]));
            Some(fd(&[a, w], |_, v| {
                let s = if log { v[0].log_softmax(axis)? } else { v[0].softmax(axis)? };
                Ok(s.mul(v[1])?.sum())
            }))
        }));
    }
    out.push(run_case("sum / mean", seed, |r| {
        let (m, n) = dims(r);
        let a = randn(r, &[m, n]);
        Some(fd(&[a], |_, v| v[0].sum().square().add(v[0].mean().exp())))
    }));
    for (name, mean) in [("sum_axis", false), ("mean_axis", true)] {
        out.push(run_case(name, seed, |r| {
            let (m, n) = dims(r);
            let p = 1 + r.below(3);
            let axis = r.below(3);
            let a = randn(r, &[m, n, p]);
            Some(fd(&[a], |_, v| {
                let s = if mean { v[0].mean_axis(axis)? } else { v[0].sum_axis(axis)? };
                Ok(s.square().sum())
            }))
        }));
    }
    out.push(run_case("gather / column / reshape", seed, |r| {
        let (m, n) = dims(r);
        let a = randn(r, &[m, n]);
        let idx: Vec<usize> = (0..5).map(|_| r.below(m * n)).collect();
        let col = r.below(n);
        Some(fd(&[a], move |_, v| {
            let gsum = v[0].gather(&idx)?.square().sum();
            let c = v[0].column(col)?.exp().sum();
            let rs = v[0].reshape(vec![n, m])?.sigmoid().sum();
            gsum.add(c)?.add(rs)
        }))
    }));
    out.push(run_case("row_blend", seed, |r| {
        let (m, n) = dims(r);
        let w = uniform(r, &[m], 0.05, 0.95);
        let (a, b) = (randn(r, &[m, n]), randn(r, &[m, n]));
        Some(fd(&[w, a, b], |_, v| Ok(Var::row_blend(v[0], v[1], v[2])?.square().sum())))
    }));
    out.push(run_case("straight_through", seed, |r| {
        // backward of the straight-through node is the relaxed gradient:
        // compare against finite differences of the relaxed path itself
        let m = 1 + r.below(4);
        let logits = randn(r, &[m, 2]);
        let noise = randn(r, &[m, 2]);
        let tau = 0.5 + 2.0 * r.uniform();
        let weights = randn(r, &[m, 2]);
        let g = Graph::new();
        let lg = g.param(logits.clone());
        let (st, _) = mtgate::gumbel::straight_through_sample(lg, &noise, tau).unwrap();
        let loss = st.mul(g.constant(weights.clone())).unwrap().sum();
        g.backward(loss).unwrap();
        let analytic = lg.grad().unwrap().into_data();
        let relaxed = check_gradients(&[logits], FD_STEP, |g, v| {
            Ok(relaxed_sample_var(v[0], &noise, tau)?.mul(g.constant(weights.clone()))?.sum())
        })
        .unwrap();
        Some(relative_error(&analytic, &relaxed.numeric[0]))
    }));
    out.push(run_case("relaxed sample", seed, |r| {
        let m = 1 + r.below(4);
        let logits = randn(r, &[m, 2]);
        let noise = randn(r, &[m, 2]);
        let tau = 0.3 + 3.0 * r.uniform();
        let w = randn(r, &[m, 2]);
        Some(fd(&[logits], move |g, v| {
            Ok(relaxed_sample_var(v[0], &noise, tau)?.mul(g.constant(w.clone()))?.sum())
        }))
    }));

    out.push(run_case("gating unit", seed, |r| {
        let spec = small_spec(2);
        let model = GatedBackbone::new(spec, r.below(1 << 30) as u64).unwrap();
        let n = 1 + r.below(4);
        let x = randn(r, &[n, 6]);
        let noise = randn(r, &[n, 2]);
        let tau = 0.5 + 2.0 * r.uniform();
        let w = randn(r, &[n]);
        // kink check on the gate's hidden pre-activations
        {
            let g = Graph::new();
            let b = model.bind(&g, |_| false);
            let pre = g
                .constant(x.clone())
                .linear(b.get("gate1.fc1.w"), b.get("gate1.fc1.b"))
                .unwrap();
            if !far_from(pre.value().data(), 1e-3) {
                return None;
            }
        }
        let names: Vec<String> = model.params().keys().filter(|k| k.starts_with("gate1.")).cloned().collect();
        Some(fd_model(&model, &names, |m, g, b| {
            let logits = m.gate_logits(b, 1, g.constant(x.clone())).unwrap();
            relaxed_sample_var(logits, &noise, tau)
                .unwrap()
                .column(1)
                .unwrap()
                .mul(g.constant(w.clone()))
                .unwrap()
                .sum()
        }))
    }));

    out.push(run_case("relaxed policy path", seed, |r| {
        let spec = small_spec(3);
        let model = GatedBackbone::new(spec.clone(), r.below(1 << 30) as u64).unwrap();
        let mut pol = PolicyDistribution::<f64>::new(&spec);
        pol.set_frontier(3);
        pol.set_logits(randn(r, &[3, 2, 2])).unwrap();
        let n = 2 + r.below(3);
        let x = randn(r, &[n, 4]);
        let labels: Vec<f64> = (0..n).map(|_| r.below(3) as f64).collect();
        let targets: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let noise: Vec<f64> = (0..12).map(|_| r.normal()).collect();
        let tau = 0.5 + 2.0 * r.uniform();
        // relaxed weights of the draw, for the kink check of each task's path
        let wv: Vec<Vec<f64>> = {
            let g = Graph::new();
            let rp = pol.relaxed_weights(&g, tau, &mut FixedNoise::new(noise.clone()), false).unwrap();
            (0..2)
                .map(|k| rp.task_weights(k).iter().map(|w| w.map_or(1.0, |v| v.item())).collect())
                .collect()
        };
        if wv.iter().any(|w| kink_margin(&model, &x, w) < 1e-3) {
            return None;
        }
        let loss = |logits: &Tensor| -> (f64, Option<Vec<f64>>) {
            let mut p = pol.clone();
            p.set_logits(logits.clone()).unwrap();
            let g = Graph::new();
            let b = model.bind(&g, |_| true);
            let rp = p.relaxed_weights(&g, tau, &mut FixedNoise::new(noise.clone()), true).unwrap();
            let outs = model.forward_relaxed(&b, g.constant(x.clone()), &rp.weights).unwrap();
            let l0 = task_loss(outs[0], &labels, TaskKind::Classification { classes: 3 }).unwrap();
            let l1 = task_loss(outs[1], &targets, TaskKind::Regression).unwrap();
            let total = l0.add(l1).unwrap();
            g.backward(total).unwrap();
            (total.item(), rp.logits.and_then(|v| v.grad()).map(|t| t.into_data()))
        };
        let base = pol.logits().clone();
        let (_, analytic) = loss(&base);
        let analytic = analytic.unwrap();
        let mut numeric = vec![0.0; base.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut p = base.clone();
            p.data_mut()[j] += FD_STEP;
            let mut q = base.clone();
            q.data_mut()[j] -= FD_STEP;
            *slot = (loss(&p).0 - loss(&q).0) / (2.0 * FD_STEP);
        }
        Some(relative_error(&analytic, &numeric))
    }));

    out.push(run_case("sparsity loss", seed, |r| {
        let (l, k) = (1 + r.below(5), 1 + r.below(4));
        let logits = randn(r, &[l, k]);
        let mask: Vec<bool> = (0..l).map(|_| r.uniform() < 0.8).collect();
        Some(fd(&[logits], move |_, v| {
            sparsity_loss(v[0].sigmoid(), &mask).map_err(to_tensor_err)
        }))
    }));
    out.push(run_case("sharing loss", seed, |r| {
        let (l, k) = (1 + r.below(5), 2 + r.below(3));
        let alpha = uniform(r, &[l, k], 0.05, 0.95);
        // |α1 − α2| has a kink at equality
        for row in alpha.data().chunks(k) {
            for i in 0..k {
                for j in i + 1..k {
                    if (row[i] - row[j]).abs() < 1e-3 {
                        return None;
                    }
                }
            }
        }
        let mask: Vec<bool> = (0..l).map(|_| r.uniform() < 0.8).collect();
        let ordered = r.uniform() < 0.5;
        Some(fd(&[alpha], move |_, v| sharing_loss(v[0], &mask, ordered).map_err(to_tensor_err)))
    }));
    out.push(run_case("instance loss", seed, |r| {
        let l = 1 + r.below(6);
        let beta = uniform(r, &[l], 0.0, 1.0);
        let t = 0.05 + 0.95 * r.uniform();
        Some(fd(&[beta], move |_, v| instance_loss(v[0], t).map_err(to_tensor_err)))
    }));
    out.push(run_case("task losses", seed, |r| {
        let n = 1 + r.below(5);
        let c = 2 + r.below(3);
        let kind = match r.below(3) {
            0 => TaskKind::Classification { classes: c },
            1 => TaskKind::Regression,
            _ => TaskKind::Binary,
        };
        let out_dim = kind.output_dim();
        let labels: Vec<f64> = (0..n)
            .map(|_| match kind {
                TaskKind::Classification { classes } => r.below(classes) as f64,
                TaskKind::Regression => r.normal(),
                TaskKind::Binary => r.below(2) as f64,
            })
            .collect();
        let z = randn(r, &[n, out_dim]);
        Some(fd(&[z], move |_, v| task_loss(v[0], &labels, kind).map_err(to_tensor_err)))
    }));
    out
}

pub fn to_tensor_err(e: mtgate::Error) -> mtgate::tensor::TensorError {
    match e {
        mtgate::Error::Tensor(t) => t,
        other => mtgate::tensor::TensorError::InvalidArgument {
            op: "loss",
            msg: other.to_string(),
        },
    }
}

/// Exact Bernoulli logits pair for `alpha`.
pub fn bern(alpha: f64) -> BernoulliLogits<f64> {
    BernoulliLogits::from_alpha(alpha)
}
