//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use dtaad_core::autodiff::{Tape, Var};
use dtaad_core::model::{forward_training, init_params, DtaadConfig, DtaadParams};
use dtaad_core::tcn::{min_layers_causal, min_layers_dilated, receptive_width, TcnConfig, TcnKind, TcnStack};
use dtaad_core::{ParamStore, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- gradients

pub const STEP: f64 = 1e-6;
/// Gradients smaller than this are compared absolutely.
pub const FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Entries with magnitude in [0.05, 1) so that a central difference never
/// straddles the leaky-ReLU kink.
pub fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.05..1.0);
        if rng.random::<bool>() {
            v
        } else {
            -v
        }
    })
}

pub type OpFn = dyn for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>;
pub type MakeFn = dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>;

/// Worst relative error over every input element of
/// `loss = sum(op(inputs) * w)` for a fixed random `w`.
pub fn op_error(inputs: &[Tensor<f64>], op: &OpFn, rng: &mut ChaCha8Rng) -> f64 {
    let eval = |ins: &[Tensor<f64>], w: &Tensor<f64>| -> (f64, Vec<Vec<f64>>) {
        let tape = Tape::new();
        let vars: Vec<_> = ins.iter().map(|t| tape.param(t)).collect();
        let out = op(&vars).unwrap();
        let loss = out.mul(tape.constant(w)).unwrap().sum();
        let value = loss.item();
        let grads = tape.backward(loss).unwrap();
        (value, vars.iter().map(|&v| grads.get(v).unwrap().to_vec()).collect())
    };
    let shape = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.param(t)).collect();
        op(&vars).unwrap().shape()
    };
    let w = random(&shape, rng);
    let (_, analytic) = eval(inputs, &w);
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] -= STEP;
            let numeric = (eval(&plus, &w).0 - eval(&minus, &w).0) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[i][e], numeric));
        }
    }
    worst
}

/// Every differentiable op with an input generator.
pub fn op_cases() -> Vec<(String, Box<MakeFn>, Box<OpFn>)> {
    let mut cases: Vec<(String, Box<MakeFn>, Box<OpFn>)> = vec![
        ("add".into(), Box::new(|r| vec![random(&[3, 4], r), random(&[3, 4], r)]), Box::new(|v| v[0].add(v[1]))),
        ("sub".into(), Box::new(|r| vec![random(&[3, 4], r), random(&[3, 4], r)]), Box::new(|v| v[0].sub(v[1]))),
        ("mul".into(), Box::new(|r| vec![random(&[3, 4], r), random(&[3, 4], r)]), Box::new(|v| v[0].mul(v[1]))),
        (
            "add_suffix".into(),
            Box::new(|r| vec![random(&[2, 3, 4], r), random(&[3, 4], r)]),
            Box::new(|v| v[0].add_suffix(v[1])),
        ),
        ("scale".into(), Box::new(|r| vec![random(&[5], r)]), Box::new(|v| Ok(v[0].scale(-1.7)))),
        (
            "reshape".into(),
            Box::new(|r| vec![random(&[2, 6], r)]),
            Box::new(|v| v[0].reshape(&[3, 4])),
        ),
        (
            "permute".into(),
            Box::new(|r| vec![random(&[2, 3, 4], r)]),
            Box::new(|v| v[0].permute(&[2, 0, 1])),
        ),
        (
            "transpose_last".into(),
            Box::new(|r| vec![random(&[2, 3, 4], r)]),
            Box::new(|v| v[0].transpose_last()),
        ),
        (
            "matmul".into(),
            Box::new(|r| vec![random(&[2, 3, 4], r), random(&[4, 5], r)]),
            Box::new(|v| v[0].matmul(v[1])),
        ),
        (
            "bmm".into(),
            Box::new(|r| vec![random(&[3, 2, 4], r), random(&[3, 4, 5], r)]),
            Box::new(|v| v[0].bmm(v[1])),
        ),
        (
            "conv1d unbatched".into(),
            Box::new(|r| vec![random(&[3, 7], r), random(&[2, 3, 2], r), random(&[2], r)]),
            Box::new(|v| v[0].conv1d(v[1], v[2], 2, 2)),
        ),
        (
            "weight_norm".into(),
            Box::new(|r| vec![random(&[3, 2, 4], r), random(&[3], r)]),
            Box::new(|v| v[0].weight_norm(v[1])),
        ),
        (
            "leaky_relu".into(),
            Box::new(|r| vec![away_from_zero(&[4, 5], r)]),
            Box::new(|v| Ok(v[0].leaky_relu(0.01))),
        ),
        ("sigmoid".into(), Box::new(|r| vec![random(&[4, 5], r)]), Box::new(|v| Ok(v[0].scale(4.0).sigmoid()))),
        (
            "softmax_rows".into(),
            Box::new(|r| vec![random(&[3, 5], r)]),
            Box::new(|v| Ok(v[0].scale(3.0).softmax_rows())),
        ),
        (
            "layer_norm".into(),
            Box::new(|r| vec![random(&[2, 3, 5], r), random(&[5], r), random(&[5], r)]),
            Box::new(|v| v[0].layer_norm(v[1], v[2], 1e-5)),
        ),
        (
            "dropout".into(),
            Box::new(|r| vec![random(&[4, 6], r)]),
            Box::new(|v| {
                // reseeding per evaluation keeps the mask fixed
                let mut rng = ChaCha8Rng::seed_from_u64(9);
                v[0].dropout(0.3, true, &mut rng)
            }),
        ),
        ("sum".into(), Box::new(|r| vec![random(&[3, 4], r)]), Box::new(|v| Ok(v[0].sum()))),
        ("mean".into(), Box::new(|r| vec![random(&[3, 4], r)]), Box::new(|v| Ok(v[0].mean()))),
        ("mse".into(), Box::new(|r| vec![random(&[3, 4], r), random(&[3, 4], r)]), Box::new(|v| v[0].mse(v[1]))),
    ];
    for (d, pad) in [(1, 2), (2, 4), (3, 0), (1, 0)] {
        cases.push((
            format!("conv1d d={d} pad={pad}"),
            Box::new(|r| vec![random(&[2, 3, 9], r), random(&[4, 3, 3], r), random(&[4], r)]),
            Box::new(move |v| v[0].conv1d(v[1], v[2], d, pad)),
        ));
    }
    cases
}

/// Worst error per op over `seeds` random instances.
pub fn per_op_errors(seeds: u64) -> Vec<(String, f64)> {
    op_cases()
        .into_iter()
        .map(|(name, make, op)| {
            let worst = (0..seeds)
                .map(|seed| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let inputs = make(&mut rng);
                    op_error(&inputs, op.as_ref(), &mut rng)
                })
                .fold(0.0, f64::max);
            (name, worst)
        })
        .collect()
}

fn model_loss(params: &DtaadParams<f64>, store: &ParamStore<f64>, windows: &Tensor<f64>) -> (f64, Vec<Vec<f64>>) {
    let tape = Tape::new();
    let bound = store.bind(&tape);
    // same dropout masks in every evaluation
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let out = forward_training(params, &bound, &tape, windows, true, &mut rng).unwrap();
    let value = out.loss.item();
    let grads = tape.backward(out.loss).unwrap();
    let flat = store.ids().map(|id| grads.get(bound.var(id)).unwrap().to_vec()).collect();
    (value, flat)
}

/// Worst relative error of the full dual-path loss over every parameter,
/// for `m = 2`, `K = 10`, and the number of gradients compared.
pub fn composed_error(seeds: u64) -> (f64, usize) {
    let cfg = DtaadConfig::new(10, 2);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for seed in 0..seeds {
        let params = init_params::<f64>(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let windows = Tensor::from_fn(&[2, 10, 2], |_| rng.random::<f64>());
        let (_, analytic) = model_loss(&params, &params.store, &windows);
        for id in params.store.ids() {
            for e in 0..params.store.get(id).numel() {
                let mut plus = params.store.clone();
                plus.get_mut(id).data_mut()[e] += STEP;
                let mut minus = params.store.clone();
                minus.get_mut(id).data_mut()[e] -= STEP;
                let numeric =
                    (model_loss(&params, &plus, &windows).0 - model_loss(&params, &minus, &windows).0) / (2.0 * STEP);
                worst = worst.max(rel_err(analytic[id.index()][e], numeric));
                checked += 1;
            }
        }
    }
    (worst, checked)
}

// ------------------------------------------------------- TCN dependencies

/// Single-channel stack whose effective kernel taps are positive.
pub fn positive_stack(kind: TcnKind, k: usize, b: usize, n: usize, seed: u64) -> (TcnStack, ParamStore<f64>) {
    let cfg = TcnConfig {
        kind,
        kernel_size: k,
        dilation_base: if kind == TcnKind::Local { 1 } else { b },
        num_layers: n,
        channels: 1,
        dropout: 0.0,
        leak: 0.01,
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stack = TcnStack::init(cfg, &mut store, "tcn", &mut rng);
    for layer in &stack.layers {
        let v = store.get_mut(layer.direction);
        v.data_mut().iter_mut().for_each(|w| *w = rng.random_range(0.5..1.5));
        let norm = v.data().iter().map(|w| w * w).sum::<f64>().sqrt();
        store.get_mut(layer.gain).data_mut()[0] = norm;
    }
    (stack, store)
}

/// `dep[i][t]`: does output `t` change when input `positions[i]` is
/// perturbed? Inputs are a zero sequence of length `len` with a unit
/// impulse, so any nonzero output is a genuine dependency.
pub fn dependencies(stack: &TcnStack, store: &ParamStore<f64>, len: usize, positions: &[usize]) -> Vec<Vec<bool>> {
    let batch = positions.len();
    let mut x = Tensor::zeros(&[batch, len, 1]);
    for (i, &p) in positions.iter().enumerate() {
        x.data_mut()[i * len + p] = 1.0;
    }
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = stack.forward(tape.constant(&x), &bound, false, &mut rng).unwrap().value();
    (0..batch)
        .map(|i| (0..len).map(|t| out.data()[i * len + t] != 0.0).collect())
        .collect()
}

#[derive(Debug, Default)]
pub struct TcnGridReport {
    pub cases: usize,
    /// Outputs before a perturbed position that changed.
    pub leaks: Vec<String>,
    /// Global stacks whose dependencies do not reach the window start.
    pub span_failures: Vec<String>,
    /// Global stacks with a gap inside the window (expected only for k < b).
    pub gaps: Vec<String>,
    /// Layer counts or widths differing from the brute-force measurement.
    pub formula_mismatches: Vec<String>,
}

/// Offsets (0 = current step) reachable by the last output, measured by
/// perturbing every position of a sequence longer than the span.
fn measured_width(kind: TcnKind, k: usize, b: usize, n: usize) -> usize {
    let span = match kind {
        TcnKind::Local => 1 + n * (k - 1),
        TcnKind::Global => 1 + (k - 1) * (b.pow(n as u32) - 1) / (b - 1),
    };
    let len = span + 3;
    let (stack, store) = positive_stack(kind, k, b, n, 1);
    let positions: Vec<usize> = (0..len).collect();
    let dep = dependencies(&stack, &store, len, &positions);
    let first = (0..len).find(|&p| dep[p][len - 1]).unwrap_or(len - 1);
    len - first
}

/// Perturbation checks over `2 <= l <= max_l`, `k` in 2..=6, `b` in {2, 3}.
pub fn tcn_grid(max_l: usize) -> TcnGridReport {
    let mut r = TcnGridReport::default();
    for k in 2..=6 {
        for b in 2..=3 {
            let mut widths = std::collections::BTreeMap::new();
            for l in 2..=max_l {
                r.cases += 1;
                let n = min_layers_dilated(l, k, b);
                let (stack, store) = positive_stack(TcnKind::Global, k, b, n, (l * 31 + k * 7 + b) as u64);
                let positions: Vec<usize> = (0..l).collect();
                let dep = dependencies(&stack, &store, l, &positions);
                for (p, row) in dep.iter().enumerate() {
                    if let Some(t) = (0..p).find(|&t| row[t]) {
                        r.leaks.push(format!("global l={l} k={k} b={b}: output {t} sees input {p}"));
                    }
                }
                if !dep[0][l - 1] {
                    r.span_failures.push(format!("global l={l} k={k} b={b} n={n}"));
                }
                if let Some(p) = (0..l).find(|&p| !dep[p][l - 1]) {
                    r.gaps.push(format!("k={k} b={b} l={l}: last output misses input {p}"));
                }
                // minimality: one layer fewer no longer reaches the start
                if n >= 2 {
                    let (fewer, fstore) = positive_stack(TcnKind::Global, k, b, n - 1, 3);
                    if dependencies(&fewer, &fstore, l, &[0])[0][l - 1] {
                        r.formula_mismatches.push(format!("min_layers_dilated({l},{k},{b}) = {n}, but {} suffice", n - 1));
                    }
                }
                let w = *widths.entry(n).or_insert_with(|| measured_width(TcnKind::Global, k, b, n));
                if receptive_width(k, b, n) != w {
                    r.formula_mismatches
                        .push(format!("receptive_width({k},{b},{n}) = {} but measured {w}", receptive_width(k, b, n)));
                }
            }
        }
        for l in 2..=max_l {
            r.cases += 1;
            let n = min_layers_causal(l, k);
            let (stack, store) = positive_stack(TcnKind::Local, k, 1, n, 5);
            let dep = dependencies(&stack, &store, l, &[0, l / 2, l - 1]);
            for (row, p) in dep.iter().zip([0, l / 2, l - 1]) {
                if let Some(t) = (0..p).find(|&t| row[t]) {
                    r.leaks.push(format!("causal l={l} k={k}: output {t} sees input {p}"));
                }
            }
            if !dep[0][l - 1] {
                r.formula_mismatches.push(format!("min_layers_causal({l},{k}) = {n} does not reach the start"));
            }
            if n >= 2 {
                let (fewer, fstore) = positive_stack(TcnKind::Local, k, 1, n - 1, 6);
                if dependencies(&fewer, &fstore, l, &[0])[0][l - 1] {
                    r.formula_mismatches.push(format!("min_layers_causal({l},{k}) = {n}, but {} suffice", n - 1));
                }
            }
        }
    }
    r
}

// -------------------------------------------------------------- sampling

/// Inverse-CDF draws from GPD(gamma, beta).
pub fn sample_gpd(n: usize, gamma: f64, beta: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            if gamma.abs() < 1e-12 {
                -beta * (1.0 - u).ln()
            } else {
                beta * ((1.0 - u).powf(-gamma) - 1.0) / gamma
            }
        })
        .collect()
}

// --------------------------------------------------------------- metrics

/// Fraction of (positive, negative) pairs ranked correctly, ties 0.5.
pub fn brute_auc(scores: &[f64], truth: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if truth[i] == 0 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if truth[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Top `count` dimensions by repeatedly taking the highest remaining score,
/// lowest index on ties.
pub fn brute_top(scores: &[f64], count: usize) -> Vec<usize> {
    let mut taken = vec![false; scores.len()];
    let mut out = Vec::new();
    for _ in 0..count.min(scores.len()) {
        let mut best: Option<usize> = None;
        for d in 0..scores.len() {
            if taken[d] {
                continue;
            }
            if best.is_none_or(|b| scores[d] > scores[b]) {
                best = Some(d);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
    }
    out
}

pub fn brute_hitrate(scores: &[f64], truth: &[u8], p: f64) -> f64 {
    let g = truth.iter().filter(|&&t| t != 0).count();
    let count = (g * p as usize) / 100;
    let hits = brute_top(scores, count).iter().filter(|&&d| truth[d] != 0).count();
    hits as f64 / g as f64
}

pub fn brute_ndcg(scores: &[f64], truth: &[u8], p: f64) -> f64 {
    let g = truth.iter().filter(|&&t| t != 0).count();
    let count = ((g * p as usize) / 100).min(scores.len());
    let mut dcg = 0.0;
    for (rank, &d) in brute_top(scores, count).iter().enumerate() {
        if truth[d] != 0 {
            dcg += 1.0 / ((rank + 2) as f64).log2();
        }
    }
    let idcg: f64 = (0..g.min(count)).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}
