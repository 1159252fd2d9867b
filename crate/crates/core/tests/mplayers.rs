#![allow(clippy::needless_range_loop)] // oracles index rows and columns directly

mod common;

use common::*;
use poladca_core::mplayers::*;
use poladca_core::numkit::{grad_check_many, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::Rng;

fn eval(f: impl FnOnce(&mut Tape) -> Result<Var, LayerError>) -> Tensor {
    let mut tape = Tape::new();
    let v = f(&mut tape).unwrap();
    tape.value(v).clone()
}

fn eye_params(d: usize) -> DcaLayerParams<Tensor> {
    let i = Tensor::identity(d);
    let zero = Tensor::zeros(&[1, d]);
    DcaLayerParams {
        wx: i.clone(),
        wy: i.clone(),
        wz: i.clone(),
        wg: Tensor::zeros(&[d, 2 * d]),
        bg: zero.clone(),
        experts: vec![ExpertParams { w1: i.clone(), b1: zero.clone(), w2: i.clone(), b2: zero.clone(), route: zero }],
    }
}

fn bind_dca(tape: &mut Tape, p: &DcaLayerParams<Tensor>) -> DcaLayerParams<Var> {
    p.map(&mut |t| tape.constant(t.clone()))
}

#[test]
fn local_feature_examples() {
    // node 0: single neighbor [3,3]
    let x = Tensor::from_rows(&[vec![1.0, 1.0], vec![3.0, 3.0]]).unwrap();
    let ctx = GraphCtx::new(&[vec![1], vec![0]]).unwrap();
    let p = eye_params(2);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let pv = bind_dca(&mut tape, &p);
    let f = local_features(&mut tape, xv, &ctx, &pv).unwrap();
    assert_eq!(tape.value(f.fx).row(0), &[1.0, 1.0]);
    assert_eq!(tape.value(f.fy).row(0), &[3.0, 3.0]);
    assert_eq!(tape.value(f.fz).row(0), &[0.0, 0.0]);

    // node 0 with neighbors [1,1] and [3,3]
    let x = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![3.0, 3.0]]).unwrap();
    let ctx = GraphCtx::new(&[vec![1, 2], vec![0], vec![0]]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let pv = bind_dca(&mut tape, &p);
    let f = local_features(&mut tape, xv, &ctx, &pv).unwrap();
    assert_eq!(tape.value(f.fy).row(0), &[2.0, 2.0]);
    for v in tape.value(f.fz).row(0) {
        assert!((v - 2f64.sqrt()).abs() < 1e-12);
    }

    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::zeros(&[3, 2]));
    let pv = bind_dca(&mut tape, &p);
    let f = local_features(&mut tape, xv, &ctx, &pv).unwrap();
    for v in [f.fx, f.fy, f.fz] {
        assert!(tape.value(v).data().iter().all(|&x| x == 0.0));
    }

    assert!(matches!(GraphCtx::new(&[vec![1], vec![0], vec![]]), Err(LayerError::IsolatedNode(2))));
}

#[test]
fn dca_attend_examples() {
    let v = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 5.0], vec![-1.0, 0.5]]).unwrap();
    let out = eval(|t| {
        let z = t.constant(Tensor::zeros(&[3, 2]));
        let vv = t.constant(v.clone());
        dca_attend(t, z, z, vv, 1)
    });
    for r in 0..3 {
        assert!((out.get(r, 0) - 1.0).abs() < 1e-12 && (out.get(r, 1) - 2.5).abs() < 1e-12);
    }

    let single = eval(|t| {
        let q = t.constant(Tensor::from_rows(&[vec![0.3, -2.0]]).unwrap());
        let vv = t.constant(Tensor::from_rows(&[vec![7.0, 8.0]]).unwrap());
        dca_attend(t, q, q, vv, 2)
    });
    assert_eq!(single.data(), &[7.0, 8.0]);

    let out = eval(|t| {
        let q = t.constant(Tensor::from_rows(&[vec![1.0], vec![0.0]]).unwrap());
        let vv = t.constant(Tensor::identity(2));
        dca_attend(t, q, q, vv, 1)
    });
    // softmax([1, 0]) computed independently
    let e = 1f64.exp();
    assert!((out.get(0, 0) - e / (e + 1.0)).abs() < 1e-12);
    assert!((out.get(0, 1) - 1.0 / (e + 1.0)).abs() < 1e-12);
    assert!((out.get(0, 0) - 0.73106).abs() < 1e-5);

    let mut tape = Tape::new();
    let q = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(dca_attend(&mut tape, q, q, q, 2).is_err());
}

#[test]
fn sca_examples() {
    let mut r = rng(4);
    let x = random_matrix(3, 2, 1.0, &mut r);
    let y = random_matrix(4, 2, 1.0, &mut r);
    let wk = random_matrix(2, 2, 1.0, &mut r);
    let wv = random_matrix(2, 2, 1.0, &mut r);
    let out = eval(|t| {
        let p = ScaParams {
            wq: t.constant(Tensor::zeros(&[2, 2])),
            wk: t.constant(wk.clone()),
            wv: t.constant(wv.clone()),
        };
        let (xv, yv) = (t.constant(x.clone()), t.constant(y.clone()));
        sca_attend(t, xv, yv, &p, 1)
    });
    let v = y.matmul(&wv).unwrap();
    for c in 0..2 {
        let mean = (0..4).map(|i| v.get(i, c)).sum::<f64>() / 4.0;
        for row in 0..3 {
            assert!((out.get(row, c) - mean).abs() < 1e-12);
        }
    }

    let out = eval(|t| {
        let i = t.constant(Tensor::identity(1));
        let p = ScaParams { wq: i, wk: i, wv: t.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap()) };
        let xv = t.constant(Tensor::from_rows(&[vec![1.0], vec![0.0]]).unwrap());
        sca_attend(t, xv, xv, &p, 1)
    });
    // V = [[1,0],[0,0]] here; row 0 weights softmax([1,0])
    assert!((out.get(0, 0) - 0.731_058_578_630_004_9).abs() < 1e-12);
}

#[test]
fn gate_examples() {
    let mut r = rng(9);
    let fx = random_matrix(4, 4, 1.0, &mut r);
    let fy = random_matrix(4, 4, 1.0, &mut r);
    let fz = random_matrix(4, 4, 1.0, &mut r).data().iter().map(|v| v.abs()).collect::<Vec<_>>();
    let fz = Tensor::matrix(4, 4, fz).unwrap();
    let run = |wg: Tensor, bg: Tensor, same: bool| {
        let mut tape = Tape::new();
        let f = LocalFeatures {
            fx: tape.constant(fx.clone()),
            fy: tape.constant(fy.clone()),
            fz: tape.constant(fz.clone()),
        };
        let (wg, bg) = (tape.constant(wg), tape.constant(bg));
        let mut calls = 0;
        let out = dual_path_fuse(&mut tape, &f, wg, bg, |t, q, k, v| {
            calls += 1;
            let o = if same { dca_attend(t, q, q, q, 2)? } else { dca_attend(t, q, k, v, 2)? };
            Ok(o)
        })
        .unwrap();
        assert_eq!(calls, 2);
        let mut t2 = Tape::new();
        let (q, k, v) = (t2.constant(fx.clone()), t2.constant(fy.clone()), t2.constant(fz.clone()));
        let p1 = dca_attend(&mut t2, q, k, v, 2).unwrap();
        let p2 = dca_attend(&mut t2, q, v, k, 2).unwrap();
        (tape.value(out).clone(), t2.value(p1).clone(), t2.value(p2).clone())
    };
    let (out, p1, p2) = run(Tensor::zeros(&[4, 8]), Tensor::zeros(&[1, 4]), false);
    for i in 0..16 {
        assert!((out.data()[i] - 0.5 * (p1.data()[i] + p2.data()[i])).abs() < 1e-12);
    }
    let (out, p1, _) = run(Tensor::zeros(&[4, 8]), Tensor::filled(&[1, 4], 100.0), false);
    assert!(out.max_abs_diff(&p1) < 1e-10);
    let (out, _, _) = run(random_matrix(4, 8, 3.0, &mut r), Tensor::zeros(&[1, 4]), true);
    let mut t3 = Tape::new();
    let q = t3.constant(fx.clone());
    let same = dca_attend(&mut t3, q, q, q, 2).unwrap();
    assert_eq!(out.data(), t3.value(same).data());
}

#[test]
fn expert_examples() {
    let mut r = rng(2);
    let fx = random_matrix(5, 4, 1.0, &mut r);
    let fused = random_matrix(5, 4, 1.0, &mut r);
    let zero_ex = ExpertParams {
        w1: Tensor::zeros(&[4, 4]),
        b1: Tensor::zeros(&[1, 4]),
        w2: Tensor::zeros(&[4, 4]),
        b2: Tensor::zeros(&[1, 4]),
        route: random_matrix(1, 4, 1.0, &mut r),
    };
    let mut tape = Tape::new();
    let experts: Vec<_> = (0..3).map(|_| zero_ex.map(&mut |t| tape.constant(t.clone()))).collect();
    let (a, b) = (tape.constant(fx.clone()), tape.constant(fused.clone()));
    let (out, _) = expert_fusion(&mut tape, a, b, &experts).unwrap();
    assert_eq!(tape.value(out).data(), fx.data());

    // zero routing: w = 1/3, alpha = 1/2
    let mut p = ExpertParams::init(4, &mut r);
    p.route = Tensor::zeros(&[1, 4]);
    let mut tape = Tape::new();
    let experts: Vec<_> = (0..3).map(|_| p.map(&mut |t| tape.constant(t.clone()))).collect();
    let (a, b) = (tape.constant(fx.clone()), tape.constant(fused.clone()));
    let (out, w) = expert_fusion(&mut tape, a, b, &experts).unwrap();
    assert!(tape.value(w).data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    // identical experts: out = Fx + 0.5·(relu, identity, tanh mix)/3 each
    let h = fused.matmul(&p.w1.transpose().unwrap()).unwrap();
    let mut expect = fx.clone();
    for (i, v) in expect.data_mut().iter_mut().enumerate() {
        let (row, col) = (i / 4, i % 4);
        let mut s = 0.0;
        for act in 0..3 {
            let mut acc = 0.0;
            for kk in 0..4 {
                let hv = h.get(row, kk);
                let a = match act {
                    0 => hv,
                    1 => hv.max(0.0),
                    _ => hv.tanh(),
                };
                acc += a * p.w2.get(col, kk);
            }
            s += acc / 3.0;
        }
        *v += 0.5 * s;
    }
    assert!(tape.value(out).max_abs_diff(&expect) < 1e-12);
}

#[test]
fn polar_examples() {
    let mut tape = Tape::new();
    let t = tape.constant(Tensor::from_rows(&[vec![1.0, -2.0, 0.0]]).unwrap());
    let (p, n) = polar_decompose(&mut tape, t).unwrap();
    assert_eq!(tape.value(p).data(), &[1.0, 0.0, 0.0]);
    assert_eq!(tape.value(n).data(), &[0.0, 2.0, 0.0]);

    let q = Tensor::from_rows(&[vec![1.0, -1.0, 0.0, 0.0]]).unwrap();
    let polar = PolarParams::reduction(1, Tensor::identity(4)).map(&mut |t| tape.constant(t.clone()));
    let qv = tape.constant(q);
    let s = polar_scores(&mut tape, qv, qv, &polar, 1).unwrap();
    // d_k = 4: App = Ann = 1/2, Apn = Anp = 0
    assert_eq!(tape.value(s[0]).data(), &[1.0]);
}

#[test]
fn nonnegative_inputs_need_only_the_pp_channel() {
    let mut r = rng(21);
    let q = Tensor::matrix(5, 4, (0..20).map(|_| r.random_range(0.0..2.0)).collect()).unwrap();
    let k = Tensor::matrix(5, 4, (0..20).map(|_| r.random_range(0.0..2.0)).collect()).unwrap();
    let mut tape = Tape::new();
    let mut polar = PolarParams::reduction(2, Tensor::identity(4));
    polar.wnn = Tensor::zeros(&[1, 2]);
    polar.wpn = Tensor::zeros(&[1, 2]);
    polar.wnp = Tensor::zeros(&[1, 2]);
    let pv = polar.map(&mut |t| tape.constant(t.clone()));
    let (qv, kv) = (tape.constant(q.clone()), tape.constant(k.clone()));
    let s = polar_scores(&mut tape, qv, kv, &pv, 2).unwrap();
    for h in 0..2 {
        for i in 0..5 {
            for j in 0..5 {
                let dot: f64 = (0..2).map(|c| q.get(i, 2 * h + c) * k.get(j, 2 * h + c)).sum();
                assert!((tape.value(s[h]).get(i, j) - dot / 2f64.sqrt()).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn singleton_poladca_returns_value_row() {
    let mut tape = Tape::new();
    let polar = PolarParams::reduction(2, Tensor::identity(4)).map(&mut |t| tape.constant(t.clone()));
    let q = tape.constant(Tensor::from_rows(&[vec![0.5, -1.0, 2.0, 0.1]]).unwrap());
    let v = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]).unwrap());
    let out = poladca_attend(&mut tape, q, q, v, &polar, 2, Activation::Identity).unwrap();
    assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn gcn_examples() {
    let ctx = GraphCtx::new(&[vec![1], vec![0]]).unwrap();
    let out = eval(|t| {
        let x = t.constant(Tensor::identity(2));
        let w = t.constant(Tensor::identity(2));
        gcn_layer(t, x, &ctx, &GcnParams { w }, Activation::Identity)
    });
    assert!(out.data().iter().all(|v| (v - 0.5).abs() < 1e-15));

    // a lone node (no neighbors) is only its own self loop
    let mut lone = GraphCtx::new(&[vec![1], vec![0]]).unwrap();
    lone.gcn_norm = Tensor::identity(2);
    let out = eval(|t| {
        let x = t.constant(Tensor::from_rows(&[vec![2.0, -3.0], vec![1.0, 1.0]]).unwrap());
        let w = t.constant(Tensor::identity(2));
        gcn_layer(t, x, &lone, &GcnParams { w }, Activation::Identity)
    });
    assert_eq!(out.row(0), &[2.0, -3.0]);

    let out = eval(|t| {
        let x = t.constant(Tensor::identity(2));
        let w = t.constant(Tensor::zeros(&[2, 3]));
        gcn_layer(t, x, &ctx, &GcnParams { w }, Activation::Relu)
    });
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn gat_examples() {
    let mut r = rng(5);
    let x = random_matrix(4, 3, 1.0, &mut r);
    let w = random_matrix(3, 2, 1.0, &mut r);
    let nb = vec![vec![1, 2], vec![0], vec![0, 3], vec![2]];
    let ctx = GraphCtx::new(&nb).unwrap();
    let out = eval(|t| {
        let p = GatParams { w: t.constant(w.clone()), a: t.constant(Tensor::zeros(&[1, 4])) };
        let xv = t.constant(x.clone());
        gat_layer(t, xv, &ctx, &p, Activation::Identity)
    });
    let wx = x.matmul(&w).unwrap();
    for (i, list) in nb.iter().enumerate() {
        for c in 0..2 {
            let mean = list.iter().map(|&j| wx.get(j, c)).sum::<f64>() / list.len() as f64;
            assert!((out.get(i, c) - mean).abs() < 1e-12);
        }
    }
    // node 1 has the single neighbor 0
    let out = eval(|t| {
        let p = GatParams { w: t.constant(w.clone()), a: t.constant(random_matrix(1, 4, 1.0, &mut rng(8))) };
        let xv = t.constant(x.clone());
        gat_layer(t, xv, &ctx, &p, Activation::Relu)
    });
    for c in 0..2 {
        assert_eq!(out.get(1, c), wx.get(0, c).max(0.0));
    }

    let mut tape = Tape::new();
    let v = tape.constant(Tensor::from_rows(&[vec![-1.0]]).unwrap());
    let l = tape.leaky_relu(v, poladca_core::numkit::LEAKY_SLOPE).unwrap();
    assert_eq!(tape.value(l).data(), &[-0.2]);
}

fn reduction_pair(n: usize, d: usize, m: usize, heads: usize, seed: u64) -> (Tensor, Tensor, Tensor, Tensor) {
    let mut r = rng(seed);
    let g = random_graph(n, d, &mut r);
    let ctx = GraphCtx::from_sample(&g).unwrap();
    let dca = DcaLayerParams::init(d, m, 3, &mut r);
    let pola = PolaLayerParams { dca: dca.clone(), polar: PolarParams::reduction(heads, Tensor::identity(m)) };
    let mut tape = Tape::new();
    let x = tape.constant(g.node_features.clone());
    let dv = dca.map(&mut |t| tape.constant(t.clone()));
    let pv = pola.map(&mut |t| tape.constant(t.clone()));
    let a = dca_layer(&mut tape, x, &ctx, &dv, heads).unwrap().h;
    let b = poladca_layer(&mut tape, x, &ctx, &pv, heads, Activation::Identity).unwrap().h;
    let f = local_features(&mut tape, x, &ctx, &dv).unwrap();
    let c = dca_attend(&mut tape, f.fx, f.fy, f.fz, heads).unwrap();
    let d2 = poladca_attend(&mut tape, f.fx, f.fy, f.fz, &pv.polar, heads, Activation::Identity).unwrap();
    (tape.value(a).clone(), tape.value(b).clone(), tape.value(c).clone(), tape.value(d2).clone())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn reduction_identity(n in 2usize..=10, d in 1usize..=32, hm in 0usize..3, seed in any::<u64>()) {
        let heads = [1, 2, 4][hm];
        let (layer_dca, layer_pola, att_dca, att_pola) = reduction_pair(n, d, 8, heads, seed);
        prop_assert!(layer_dca.max_abs_diff(&layer_pola) <= 1e-12);
        prop_assert!(att_dca.max_abs_diff(&att_pola) <= 1e-12);
    }

    #[test]
    fn polar_identities(vals in proptest::collection::vec(-10.0f64..10.0, 1..30)) {
        let t = Tensor::new(vec![1, vals.len()], vals.clone()).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(t);
        let (p, n) = polar_decompose(&mut tape, v).unwrap();
        for ((a, b), x) in tape.value(p).data().iter().zip(tape.value(n).data()).zip(&vals) {
            prop_assert_eq!(a - b, *x);
            prop_assert_eq!(a * b, 0.0);
        }
    }

    #[test]
    fn flop_gap(n in 1u64..500, d in 1u64..500) {
        prop_assert_eq!(flop_count(FlopScheme::PolaDca, n, d) - flop_count(FlopScheme::Dca, n, d), 4 * n * d);
    }
}

#[test]
fn attention_rows_are_distributions() {
    let mut r = rng(77);
    for _ in 0..10 {
        let q = random_matrix(6, 4, 3.0, &mut r);
        let k = random_matrix(6, 4, 3.0, &mut r);
        let mut tape = Tape::new();
        let (qv, kv) = (tape.constant(q), tape.constant(k));
        let mut polar = PolarParams::reduction(2, Tensor::identity(4));
        polar.wpn = random_matrix(1, 2, 2.0, &mut r);
        let pv = polar.map(&mut |t| tape.constant(t.clone()));
        for s in polar_scores(&mut tape, qv, kv, &pv, 2).unwrap() {
            let a = tape.row_softmax(s).unwrap();
            for row in tape.value(a).to_rows() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
            }
        }
    }
}

#[test]
fn permutation_equivariance() {
    for scheme in Scheme::ALL {
        let mut r = rng(31);
        for _ in 0..5 {
            let n = r.random_range(3..9);
            let g = random_graph(n, 5, &mut r);
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, r.random_range(0..=i));
            }
            let pg = permute(&g, &perm);
            let p = LayerParams::init(scheme, 5, 8, 2, 3, &mut r);
            let run = |s: &poladca_core::graphio::GraphSample| {
                let ctx = GraphCtx::from_sample(s).unwrap();
                let mut tape = Tape::new();
                let x = tape.constant(s.node_features.clone());
                let pv = p.map(&mut |t| tape.constant(t.clone()));
                let o = run_layer(&mut tape, x, &ctx, &pv, 2, Activation::Relu).unwrap();
                tape.value(o).clone()
            };
            let (a, b) = (run(&g), run(&pg));
            for i in 0..n {
                for (u, v) in a.row(i).iter().zip(b.row(perm[i])) {
                    assert!((u - v).abs() <= 1e-12, "{scheme}: {u} vs {v}");
                }
            }
        }
    }
}

/// Central-difference check of a whole layer with respect to its input and
/// every parameter, on a random 4-node graph.
fn layer_grad_error(scheme: Scheme, seed: u64) -> f64 {
    let mut r = rng(seed);
    let g = random_graph(4, 3, &mut r);
    let ctx = GraphCtx::from_sample(&g).unwrap();
    let mut p = LayerParams::init(scheme, 3, 4, 2, 3, &mut r);
    if let LayerParams::Pola(pp) = &mut p {
        pp.polar.wpn = random_matrix(1, 2, 1.5, &mut r);
        pp.polar.wnp = random_matrix(1, 2, 1.5, &mut r);
    }
    let weights = random_matrix(4, 4, 1.0, &mut r);
    let mut inputs = vec![g.node_features.clone()];
    inputs.extend(flatten(&p));
    grad_check_many(
        |tape, vars| {
            let pv = rebind(&p, &vars[1..]);
            let out = run_layer(tape, vars[0], &ctx, &pv, 2, Activation::Relu)?;
            let w = tape.constant(weights.clone());
            let prod = tape.hadamard(out, w)?;
            Ok::<_, LayerError>(tape.sum(prod)?)
        },
        &inputs,
        1e-5,
    )
    .unwrap()
}

#[test]
fn every_layer_passes_grad_check() {
    for scheme in Scheme::ALL {
        for seed in 0..5 {
            let err = layer_grad_error(scheme, 100 + seed);
            assert!(err <= 1e-4, "{scheme} seed {seed}: {err}");
        }
    }
}

#[test]
fn checkpoint_keys() {
    let mut r = rng(0);
    let p = LayerParams::init(Scheme::PolaDca, 3, 4, 2, 3, &mut r);
    let mut keys = Vec::new();
    p.visit("layer0/", &mut |k, _| keys.push(k));
    assert!(keys.contains(&"layer0/expert2/route".to_string()));
    assert!(keys.contains(&"layer0/Wo".to_string()));
    assert!(keys.contains(&"layer0/wnp".to_string()));
    assert_eq!(keys.len(), 5 + 15 + 5);
}
