//! Reference values and loop-level re-implementations checked against the
//! library kernels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsegcn_core::activation::{activation, gelu, Activation};
use tsegcn_core::dtc::{weighted_readout, Dtc, DtcConfig, ModSource, KERNEL};
use tsegcn_core::graph::normalize_adjacency;
use tsegcn_core::init::{rng, uniform};
use tsegcn_core::loss::{argmax_rows, cross_entropy};
use tsegcn_core::optim::{OptimConfig, Sgd};
use tsegcn_core::tensor::{matmul, matmul_backward};
use tsegcn_core::tsegc::{calibration, pairwise_distance, scale_mask, TsegcLayer, TsegcShape};
use tsegcn_core::{hop_table, Error, ParamStore, SkeletonGraph, Tensor};

/// `erf` by its Maclaurin series, summed until terms vanish.
fn erf_series(x: f64) -> f64 {
    let mut sum = 0.0;
    let mut power = x;
    let mut fact = 1.0;
    for n in 0..60 {
        if n > 0 {
            power *= x * x;
            fact *= n as f64;
        }
        let term = power / (fact * (2 * n + 1) as f64);
        sum += if n % 2 == 0 { term } else { -term };
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

#[test]
fn gelu_matches_series_cdf() {
    let phi1 = 0.5 * (1.0 + erf_series(1.0 / 2f64.sqrt()));
    assert!((gelu(1.0) - phi1).abs() < 1e-14);
    assert!((gelu(1.0) - 0.841345).abs() < 5e-7);
    for x in [-3.0, -0.7, 0.2, 2.5] {
        let expected = x * 0.5 * (1.0 + erf_series(x / 2f64.sqrt()));
        assert!((gelu(x) - expected).abs() < 1e-13, "{x}");
    }
    assert_eq!(gelu(0.0), 0.0);
    let t = activation(&Tensor::from_rows(&[&[0.0, -9.0]]), Activation::Tanh);
    assert_eq!(t.data()[0], 0.0);
    assert!((t.data()[1] + 1.0).abs() < 1e-7);
}

#[test]
fn matmul_hand_cases() {
    let i = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let b = Tensor::from_rows(&[&[3.0, 4.0], &[5.0, 6.0]]);
    assert_eq!(matmul(&i, &b).unwrap(), b);
    let r = matmul(&Tensor::from_rows(&[&[1.0, 2.0]]), &Tensor::from_rows(&[&[3.0], &[4.0]])).unwrap();
    assert_eq!(r.data(), &[11.0]);
    match matmul(&i, &Tensor::zeros(&[3, 2])) {
        Err(Error::Dimension { lhs, rhs, .. }) => assert_eq!((lhs, rhs), (vec![2, 2], vec![3, 2])),
        other => panic!("{other:?}"),
    }
}

#[test]
fn matmul_backward_matches_differences() {
    let mut r = rng(3);
    let a = uniform(&mut r, &[4, 5], 1.0);
    let b = uniform(&mut r, &[5, 3], 1.0);
    let (da, db) = matmul_backward(&a, &b, &Tensor::full(&[4, 3], 1.0)).unwrap();
    let eps = 1e-6;
    let f = |a: &Tensor, b: &Tensor| matmul(a, b).unwrap().sum();
    for (param, grad, is_a) in [(&a, &da, true), (&b, &db, false)] {
        for i in 0..param.len() {
            let mut p = param.clone();
            p.data_mut()[i] += eps;
            let plus = if is_a { f(&p, &b) } else { f(&a, &p) };
            p.data_mut()[i] -= 2.0 * eps;
            let minus = if is_a { f(&p, &b) } else { f(&a, &p) };
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (numeric - grad.data()[i]).abs() / numeric.abs().max(1e-8);
            assert!(rel < 1e-6, "{rel}");
        }
    }
}

#[test]
fn cross_entropy_reference_values() {
    let (uniform_loss, _) = cross_entropy(&Tensor::zeros(&[2, 7]), &[0, 6]).unwrap();
    assert!((uniform_loss - 7f64.ln()).abs() < 1e-15);

    // log1p(exp(-20)) by its alternating series.
    let y = (-20f64).exp();
    let oracle = y - y * y / 2.0 + y * y * y / 3.0;
    let (loss, _) = cross_entropy(&Tensor::from_rows(&[&[10.0, -10.0]]), &[0]).unwrap();
    assert!((loss - oracle).abs() < 1e-22);
    assert!((loss - 2.06e-9).abs() < 1e-11);

    assert!(matches!(
        cross_entropy(&Tensor::zeros(&[1, 3]), &[3]),
        Err(Error::Label { label: 3, n_classes: 3 })
    ));
}

#[test]
fn cross_entropy_gradient_matches_differences() {
    let mut r = rng(9);
    let logits = uniform(&mut r, &[3, 4], 2.0);
    let labels = [1, 3, 0];
    let (_, grad) = cross_entropy(&logits, &labels).unwrap();
    let eps = 1e-6;
    for i in 0..logits.len() {
        let mut p = logits.clone();
        p.data_mut()[i] += eps;
        let plus = cross_entropy(&p, &labels).unwrap().0;
        p.data_mut()[i] -= 2.0 * eps;
        let minus = cross_entropy(&p, &labels).unwrap().0;
        let numeric = (plus - minus) / (2.0 * eps);
        assert!((numeric - grad.data()[i]).abs() < 1e-6 * numeric.abs().max(1.0));
    }
    assert_eq!(argmax_rows(&Tensor::from_rows(&[&[1.0, 1.0, 0.0]])), [0]);
}

fn quadratic_store(p0: f64) -> ParamStore {
    let mut p = ParamStore::new();
    p.insert("w", Tensor::new(vec![1], vec![p0]).unwrap());
    p
}

#[test]
fn nesterov_two_steps_follow_hand_recurrence() {
    // f(p) = p^2 / 2, p0 = 1, lr 0.1, momentum 0.9:
    // step 1: g = 1, buf = 1, p = 1 - 0.1 (1 + 0.9) = 0.81
    // step 2: g = 0.81, buf = 1.71, p = 0.81 - 0.1 (0.81 + 1.539) = 0.5751
    let mut p = quadratic_store(1.0);
    let id = p.id("w").unwrap();
    let cfg = OptimConfig {
        lr: 0.1,
        momentum: 0.9,
        weight_decay: 0.0,
        ..OptimConfig::default()
    };
    let mut opt = Sgd::new();
    let mut seen = Vec::new();
    for _ in 0..2 {
        let v = p.value(id).data()[0];
        p.zero_grad();
        p.grad_mut(id).data_mut()[0] = v;
        opt.step(&mut p, &cfg, cfg.lr);
        seen.push(p.value(id).data()[0]);
    }
    assert!((seen[0] - 0.81).abs() < 1e-15);
    assert!((seen[1] - 0.5751).abs() < 1e-15);
}

#[test]
fn decay_skips_position_table_and_balance_scalars() {
    let mut p = ParamStore::new();
    for name in ["pos_embed", "blocks.0.gc.alpha", "blocks.0.gc.beta", "embed.weight"] {
        p.insert(name, Tensor::full(&[1], 2.0));
    }
    let cfg = OptimConfig {
        momentum: 0.0,
        weight_decay: 0.5,
        ..OptimConfig::default()
    };
    Sgd::new().step(&mut p, &cfg, 0.1);
    for name in ["pos_embed", "blocks.0.gc.alpha", "blocks.0.gc.beta"] {
        assert_eq!(p.value(p.id(name).unwrap()).data(), &[2.0]);
    }
    assert_eq!(p.value(p.id("embed.weight").unwrap()).data(), &[1.9]);
}

#[test]
fn normalized_adjacency_hand_cases() {
    assert_eq!(normalize_adjacency(&SkeletonGraph::new(1, []).unwrap()).a_hat.data(), &[1.0]);
    let two = normalize_adjacency(&SkeletonGraph::chain(2)).a_hat;
    assert!(two.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    let p3 = normalize_adjacency(&SkeletonGraph::chain(3)).a_hat;
    let diag = [p3.get(&[0, 0]), p3.get(&[1, 1]), p3.get(&[2, 2])];
    assert!((diag[0] - 0.5).abs() < 1e-15 && (diag[1] - 1.0 / 3.0).abs() < 1e-15 && (diag[2] - 0.5).abs() < 1e-15);
    assert!((p3.get(&[0, 1]) - 1.0 / 6f64.sqrt()).abs() < 1e-15);
    assert_eq!(p3.get(&[0, 2]), 0.0);
}

fn bfs(n: usize, edges: &[(usize, usize)]) -> Vec<u32> {
    let mut adj = vec![Vec::new(); n];
    for &(i, j) in edges {
        adj[i].push(j);
        adj[j].push(i);
    }
    let mut d = vec![u32::MAX; n * n];
    for s in 0..n {
        let mut queue = std::collections::VecDeque::from([s]);
        d[s * n + s] = 0;
        while let Some(u) = queue.pop_front() {
            for &w in &adj[u] {
                if d[s * n + w] == u32::MAX {
                    d[s * n + w] = d[s * n + u] + 1;
                    queue.push_back(w);
                }
            }
        }
    }
    d
}

/// Random spanning tree plus extra edges.
pub fn random_connected(r: &mut ChaCha8Rng, n: usize) -> Vec<(usize, usize)> {
    let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (r.random_range(0..i), i)).collect();
    for _ in 0..r.random_range(0..n) {
        let (i, j) = (r.random_range(0..n), r.random_range(0..n));
        if i != j {
            edges.push((i, j));
        }
    }
    edges
}

#[test]
fn hop_table_matches_bfs() {
    let chain = hop_table(&SkeletonGraph::chain(5), 5).unwrap();
    assert_eq!((chain.get(0, 4), chain.get(2, 3)), (4, 1));
    let mut r = ChaCha8Rng::seed_from_u64(50);
    for _ in 0..50 {
        let n = r.random_range(1..=25);
        let edges = random_connected(&mut r, n);
        let g = SkeletonGraph::new(n, edges.clone()).unwrap();
        assert_eq!(hop_table(&g, n).unwrap().as_slice(), bfs(n, &edges).as_slice());
    }
}

#[test]
fn hop_limit_below_diameter_is_config_error() {
    assert!(matches!(hop_table(&SkeletonGraph::chain(5), 3), Err(Error::Config { .. })));
}

#[test]
fn distances_and_calibration_match_loops() {
    let mut r = rng(4);
    let e = uniform(&mut r, &[2, 4, 3], 1.0);
    let d = pairwise_distance(&e).unwrap();
    for b in 0..2 {
        for i in 0..4 {
            for j in 0..4 {
                let s: f64 = (0..3).map(|c| (e.get(&[b, i, c]) - e.get(&[b, j, c])).powi(2)).sum();
                assert!((d.get(&[b, i, j]) + s).abs() < 1e-15);
            }
        }
    }
    let bc = calibration(&d);
    assert!(bc.data().iter().all(|&v| v <= 0.0 && v > -1.0));
}

#[test]
fn scale_mask_on_chain_by_hand() {
    // Joints on a line at 0, 1, 2, 3, 4 (embedding space) over the chain
    // 0-1-2-3-4. For joint 2 the nearest other joint is 1 (tie with 3,
    // lower index first), one hop away, so scale 1 activates {1, 3}.
    let e = Tensor::new(vec![1, 5, 1], vec![0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
    let d = pairwise_distance(&e).unwrap();
    let hop = hop_table(&SkeletonGraph::chain(5), 5).unwrap();
    let h = &scale_mask(&d, &hop, 3).unwrap()[0].h;
    let row = |s: usize, i: usize| -> Vec<f64> { (0..5).map(|j| h.get(&[s, i, j])).collect() };
    assert_eq!(row(0, 2), [0.0, 0.0, 1.0, 0.0, 0.0]);
    assert_eq!(row(1, 2), [0.0, 1.0, 0.0, 1.0, 0.0]);
    assert_eq!(row(2, 2), [0.0, 1.0, 0.0, 1.0, 0.0]);
    assert_eq!(row(1, 0), [0.0, 1.0, 0.0, 0.0, 0.0]);
    assert_eq!(row(2, 0), [0.0, 0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn readout_matches_loop() {
    let mut r = rng(2);
    let y = uniform(&mut r, &[2, 3, 4, 2], 1.0);
    let w = [0.5, -1.0, 2.0];
    let z = weighted_readout(&y, &w).unwrap();
    for b in 0..2 {
        for t in 0..4 {
            for c in 0..2 {
                let s: f64 = (0..3).map(|n| w[n] * y.get(&[b, n, t, c])).sum::<f64>() / 3.0;
                assert!((z.get(&[b, t, c]) - s).abs() < 1e-15);
            }
        }
    }
}

/// Depthwise convolution (zero padding, dilation, stride) followed by
/// undeformed taps over the depthwise output (edge frames repeated) and the
/// pointwise map.
pub fn reference_separable(x: &Tensor, dw: &Tensor, pw: &Tensor, pw_b: &Tensor, dilation: usize, stride: usize) -> Tensor {
    let (b, n, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let r_n = dw.shape()[1];
    let half = (r_n as i64 - 1) / 2;
    let to = t.div_ceil(stride);
    let mut y = vec![0.0; b * n * to * c];
    for bb in 0..b {
        for nn in 0..n {
            for tt in 0..to {
                for ch in 0..c {
                    let mut s = 0.0;
                    for r in 0..r_n {
                        let src = (tt * stride) as i64 + (r as i64 - half) * dilation as i64;
                        if src >= 0 && (src as usize) < t {
                            s += dw.get(&[ch, r]) * x.get(&[bb, nn, src as usize, ch]);
                        }
                    }
                    y[((bb * n + nn) * to + tt) * c + ch] = s;
                }
            }
        }
    }
    let mut out = Tensor::zeros(&[b, n, to, c]);
    for bb in 0..b {
        for nn in 0..n {
            for tt in 0..to {
                for co in 0..c {
                    let mut s = pw_b.data()[co];
                    for r in 0..r_n {
                        let src = (tt as i64 + (r as i64 - half) * dilation as i64).clamp(0, to as i64 - 1) as usize;
                        for ci in 0..c {
                            s += pw.get(&[r * c + ci, co]) * y[((bb * n + nn) * to + src) * c + ci];
                        }
                    }
                    out.set(&[bb, nn, tt, co], s);
                }
            }
        }
    }
    out
}

pub fn fresh_dtc(seed: u64, n: usize, c: usize, dilation: usize, stride: usize) -> (ParamStore, Dtc) {
    let mut store = ParamStore::new();
    let dtc = Dtc::register(
        &mut store,
        &mut rng(seed),
        "dtc",
        DtcConfig {
            n,
            c,
            kernel: KERNEL,
            dilation,
            stride,
            mod_source: ModSource::Readout,
        },
    )
    .unwrap();
    (store, dtc)
}

#[test]
fn undeformed_dtc_matches_reference() {
    for (seed, (d, s)) in [(1, 1), (2, 1), (1, 2), (2, 2)].into_iter().enumerate() {
        let (store, dtc) = fresh_dtc(seed as u64, 3, 4, d, s);
        let x = uniform(&mut rng(100 + seed as u64), &[2, 3, 9, 4], 1.0);
        let (y, _) = dtc.forward(store.values(), &x).unwrap();
        let reference = reference_separable(
            &x,
            store.value(dtc.depthwise),
            store.value(dtc.pointwise.w),
            store.value(dtc.pointwise.b.unwrap()),
            d,
            s,
        );
        assert!(y.max_abs_diff(&reference) < 1e-12);
    }
}

#[test]
fn graph_layer_matches_loops() {
    let graph = SkeletonGraph::chain(4);
    let hop = hop_table(&graph, 4).unwrap();
    let mut store = ParamStore::new();
    let mut r = rng(8);
    let shape = TsegcShape {
        n: 4,
        c_in: 3,
        c_out: 4,
        k: 2,
        r_red: 1,
        subsets: 1,
    };
    let layer = TsegcLayer::register(&mut store, &mut r, "gc", shape, &normalize_adjacency(&graph).a_hat).unwrap();
    store.value_mut(layer.beta).data_mut()[0] = 0.7;
    let x = uniform(&mut r, &[1, 4, 3, 3], 1.0);
    let (y, cache) = layer.forward(store.values(), &x, &hop).unwrap();

    let v = |id| store.value(id);
    let (n, t, cin, k, cp) = (4, 3, 3, 2, 2);
    // Temporal mean, theta embedding, distances.
    let xbar: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..cin).map(|c| (0..t).map(|tt| x.get(&[0, j, tt, c])).sum::<f64>() / t as f64).collect())
        .collect();
    let ce = shape.c_embed();
    let emb: Vec<Vec<f64>> = xbar
        .iter()
        .map(|xb| (0..ce).map(|o| (0..cin).map(|c| xb[c] * v(layer.theta.w).get(&[c, o])).sum()).collect())
        .collect();
    let dist = |i: usize, j: usize| -> f64 { -(0..ce).map(|c| (emb[i][c] - emb[j][c]).powi(2)).sum::<f64>() };
    let alpha = v(layer.alpha).data()[0];
    let beta = v(layer.beta).data()[0];
    for s in 0..k {
        for i in 0..n {
            for j in 0..n {
                let h = cache.masks().get(&[0, s, i, j]);
                let z = alpha * h * v(layer.m_shared).get(&[i, j])
                    + beta * dist(i, j).tanh()
                    + v(layer.c_learn).get(&[s, i, j]);
                assert!((cache.z().get(&[0, s, i, j]) - z).abs() < 1e-14);
            }
        }
    }
    let psi = &layer.psi[0];
    let out = &layer.out[0];
    for i in 0..n {
        for tt in 0..t {
            let mut agg = vec![0.0; k * cp];
            for (w, a) in agg.iter_mut().enumerate() {
                let s = w / cp;
                for j in 0..n {
                    let xt: f64 = v(psi.b.unwrap()).data()[w]
                        + (0..cin).map(|c| x.get(&[0, j, tt, c]) * v(psi.w).get(&[c, w])).sum::<f64>();
                    *a += cache.z().get(&[0, s, i, j]) * xt;
                }
            }
            for o in 0..4 {
                let pre = v(out.b.unwrap()).data()[o] + (0..k * cp).map(|w| agg[w] * v(out.w).get(&[w, o])).sum::<f64>();
                assert!((y.get(&[0, i, tt, o]) - gelu(pre)).abs() < 1e-13);
            }
        }
    }
}
