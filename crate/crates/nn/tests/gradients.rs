use mpcrrl_nn::{
    load_checkpoint, save_checkpoint, LstmSpec, MlpSpec, ParamSet, Tape, Tensor, Var,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-5;

/// |a − b| / max(|a|, |b|, floor): relative error with an absolute floor for
/// entries near zero.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Central differences of `loss` with respect to every entry of `params`.
fn finite_difference(params: &ParamSet, loss: impl Fn(&ParamSet) -> f64) -> ParamSet {
    let mut out = params.zeros_like();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name).unwrap().len();
        for i in 0..n {
            let mut plus = params.clone();
            plus.values_mut(&name).unwrap()[i] += FD_STEP;
            let mut minus = params.clone();
            minus.values_mut(&name).unwrap()[i] -= FD_STEP;
            out.values_mut(&name).unwrap()[i] = (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP);
        }
    }
    out
}

fn max_rel(a: &ParamSet, b: &ParamSet) -> f64 {
    a.iter()
        .flat_map(|(name, t)| {
            let o = b.get(name).unwrap();
            t.data()
                .iter()
                .zip(o.data())
                .map(|(x, y)| rel_err(*x, *y))
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

fn random_input(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect())
        .unwrap()
}

fn mlp_loss(params: &ParamSet, spec: &MlpSpec, x: &Tensor) -> (Tape, Var, mpcrrl_nn::Bound) {
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let xv = tape.constant(x.clone());
    let y = spec.forward(&mut tape, &bound, "m", xv).unwrap();
    let s = tape.sin(y);
    let sq = tape.square(s);
    let loss = tape.mean(sq);
    (tape, loss, bound)
}

#[test]
fn mlp_gradient_matches_finite_differences() {
    let spec = MlpSpec::new(vec![4, 6, 5, 2]);
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = spec.init("m", &mut rng);
        let x = random_input(&mut rng, 3, 4);
        let (tape, loss, bound) = mlp_loss(&params, &spec, &x);
        let grads = tape.backward(loss).unwrap().params(&bound);
        let fd = finite_difference(&params, |p| {
            let (t, l, _) = mlp_loss(p, &spec, &x);
            t.value(l).item().unwrap()
        });
        worst = worst.max(max_rel(&grads, &fd));
    }
    assert!(worst <= 1e-4, "worst relative error {worst:e}");
}

fn lstm_unroll_loss(params: &ParamSet, spec: &LstmSpec, xs: &[Tensor]) -> (Tape, Var, mpcrrl_nn::Bound) {
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let batch = xs[0].rows();
    let mut h = tape.constant(Tensor::matrix(batch, spec.hidden, vec![0.0; batch * spec.hidden]).unwrap());
    let mut c = h;
    let mut terms = Vec::new();
    for x in xs {
        let xv = tape.constant(x.clone());
        let (h2, c2) = spec.step(&mut tape, &bound, "r", xv, h, c).unwrap();
        h = h2;
        c = c2;
        let sq = tape.square(h);
        terms.push(tape.sum(sq));
    }
    let all = tape.concat_cols(&terms).unwrap();
    let loss = tape.sum(all);
    (tape, loss, bound)
}

#[test]
fn lstm_unroll_gradient_matches_finite_differences() {
    let spec = LstmSpec { input: 3, hidden: 4 };
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let params = spec.init("r", &mut rng);
        let xs: Vec<Tensor> = (0..8).map(|_| random_input(&mut rng, 2, 3)).collect();
        let (tape, loss, bound) = lstm_unroll_loss(&params, &spec, &xs);
        let grads = tape.backward(loss).unwrap().params(&bound);
        let fd = finite_difference(&params, |p| {
            let (t, l, _) = lstm_unroll_loss(p, &spec, &xs);
            t.value(l).item().unwrap()
        });
        worst = worst.max(max_rel(&grads, &fd));
    }
    assert!(worst <= 1e-4, "worst relative error {worst:e}");
}

/// Backward through one step with the downstream adjoints `(dh, dc)` folded
/// in as a linear seed term. Returns `(param grads, dh_prev, dc_prev)`.
fn step_adjoint(
    params: &ParamSet,
    spec: &LstmSpec,
    x: &Tensor,
    h: &Tensor,
    c: &Tensor,
    dh: &Tensor,
    dc: &Tensor,
) -> (ParamSet, Tensor, Tensor) {
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let xv = tape.constant(x.clone());
    let hv = tape.leaf(h.clone());
    let cv = tape.leaf(c.clone());
    let (h2, c2) = spec.step(&mut tape, &bound, "r", xv, hv, cv).unwrap();
    let sq = tape.square(h2);
    let local = tape.sum(sq);
    let dhv = tape.constant(dh.clone());
    let dcv = tape.constant(dc.clone());
    let a = tape.mul(h2, dhv).unwrap();
    let a = tape.sum(a);
    let b = tape.mul(c2, dcv).unwrap();
    let b = tape.sum(b);
    let parts = tape.concat_cols(&[local, a, b]).unwrap();
    let loss = tape.sum(parts);
    let g = tape.backward(loss).unwrap();
    (g.params(&bound), g.wrt(hv), g.wrt(cv))
}

#[test]
fn bptt_equals_accumulated_per_step_chain_rule() {
    let spec = LstmSpec { input: 3, hidden: 5 };
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
        let params = spec.init("r", &mut rng);
        let steps = 6;
        let xs: Vec<Tensor> = (0..steps).map(|_| random_input(&mut rng, 2, 3)).collect();
        let (tape, loss, bound) = lstm_unroll_loss(&params, &spec, &xs);
        let full = tape.backward(loss).unwrap().params(&bound);

        // Forward pass keeping each step's incoming state.
        let zero = Tensor::matrix(2, spec.hidden, vec![0.0; 2 * spec.hidden]).unwrap();
        let mut states = vec![(zero.clone(), zero.clone())];
        for x in &xs {
            let (h, c) = &states[states.len() - 1];
            let (_, (h2, c2)) = mpcrrl_nn::lstm_forward(&params, "r", &spec, x, (h, c)).unwrap();
            states.push((h2, c2));
        }
        let mut acc = params.zeros_like();
        let mut dh = zero.clone();
        let mut dc = zero.clone();
        for t in (0..steps).rev() {
            let (h, c) = &states[t];
            let (g, dh_prev, dc_prev) = step_adjoint(&params, &spec, &xs[t], h, c, &dh, &dc);
            for (name, gt) in g.iter() {
                acc.values_mut(name)
                    .unwrap()
                    .iter_mut()
                    .zip(gt.data())
                    .for_each(|(a, b)| *a += b);
            }
            dh = dh_prev;
            dc = dc_prev;
        }
        for (name, t) in full.iter() {
            for (a, b) in t.data().iter().zip(acc.get(name).unwrap().data()) {
                assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0), "{name}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn lstm_two_step_unroll_equals_stepwise() {
    let spec = LstmSpec { input: 2, hidden: 3 };
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let params = spec.init("r", &mut rng);
    let xs = [random_input(&mut rng, 1, 2), random_input(&mut rng, 1, 2)];
    let z = Tensor::row(vec![0.0; 3]);
    let (_, (h1, c1)) = mpcrrl_nn::lstm_forward(&params, "r", &spec, &xs[0], (&z, &z)).unwrap();
    let (o2, _) = mpcrrl_nn::lstm_forward(&params, "r", &spec, &xs[1], (&h1, &c1)).unwrap();

    let mut tape = Tape::new();
    let bound = tape.bind_frozen(&params);
    let mut h = tape.constant(z.clone());
    let mut c = tape.constant(z.clone());
    for x in &xs {
        let xv = tape.constant(x.clone());
        let (h2, c2) = spec.step(&mut tape, &bound, "r", xv, h, c).unwrap();
        h = h2;
        c = c2;
    }
    assert_eq!(tape.value(h).data(), o2.data());

    let (again, _) = mpcrrl_nn::lstm_forward(&params, "r", &spec, &xs[1], (&h1, &c1)).unwrap();
    assert_eq!(again.data(), o2.data());
}

#[test]
fn elementwise_ops_match_finite_differences() {
    type Build = fn(&mut Tape, Var) -> Var;
    let ops: [(&str, Build); 9] = [
        ("tanh", |t, x| t.tanh(x)),
        ("sigmoid", |t, x| t.sigmoid(x)),
        ("sin", |t, x| t.sin(x)),
        ("cos", |t, x| t.cos(x)),
        ("exp", |t, x| t.exp(x)),
        ("softplus", |t, x| t.softplus(x)),
        ("sqrt", |t, x| {
            let s = t.square(x);
            let s = t.add_scalar(s, 0.5);
            t.sqrt(s)
        }),
        ("log", |t, x| {
            let s = t.square(x);
            let s = t.add_scalar(s, 0.5);
            t.log(s)
        }),
        ("clamp", |t, x| t.clamp(x, -0.8, 0.9)),
    ];
    for (name, build) in ops {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = ParamSet::new();
            p.insert("x", random_input(&mut rng, 2, 3)).unwrap();
            let w = random_input(&mut rng, 2, 3);
            let eval = |p: &ParamSet| -> (Tape, Var, mpcrrl_nn::Bound) {
                let mut tape = Tape::new();
                let b = tape.bind(p);
                let y = build(&mut tape, b.get("x").unwrap());
                let wv = tape.constant(w.clone());
                let yw = tape.mul(y, wv).unwrap();
                let l = tape.sum(yw);
                (tape, l, b)
            };
            let (tape, l, b) = eval(&p);
            let g = tape.backward(l).unwrap().params(&b);
            let fd = finite_difference(&p, |q| {
                let (t, l, _) = eval(q);
                t.value(l).item().unwrap()
            });
            // clamp's kink: skip entries within one FD step of the boundary.
            let x = p.get("x").unwrap().data();
            if name == "clamp" && x.iter().any(|v| (v + 0.8).abs() < 2e-5 || (v - 0.9).abs() < 2e-5) {
                continue;
            }
            let err = max_rel(&g, &fd);
            assert!(err <= 1e-4, "{name} seed {seed}: {err:e}");
        }
    }
}

#[test]
fn binary_and_structural_ops_match_finite_differences() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let mut p = ParamSet::new();
        p.insert("a", random_input(&mut rng, 3, 4)).unwrap();
        p.insert("b", random_input(&mut rng, 4, 2)).unwrap();
        p.insert("r", Tensor::vector((0..4).map(|_| rng.gen_range(0.5..2.0)).collect()))
            .unwrap();
        p.insert("c", random_input(&mut rng, 3, 1)).unwrap();
        let eval = |p: &ParamSet| -> (Tape, Var, mpcrrl_nn::Bound) {
            let mut t = Tape::new();
            let bd = t.bind(p);
            let (a, b, r, c) = (
                bd.get("a").unwrap(),
                bd.get("b").unwrap(),
                bd.get("r").unwrap(),
                bd.get("c").unwrap(),
            );
            let ar = t.div(a, r).unwrap();
            let ar = t.sub(ar, c).unwrap();
            let m = t.matmul(ar, b).unwrap();
            let left = t.slice_cols(ar, 1, 3).unwrap();
            let cat = t.concat_cols(&[m, left]).unwrap();
            let mn = t.minimum(cat, m).err();
            assert!(mn.is_some());
            let sc = t.sum_cols(cat);
            let sc = t.mul(sc, c).unwrap();
            let sq = t.square(sc);
            let s1 = t.mean(sq);
            let m2 = t.scale(m, -0.3);
            let mn = t.minimum(m, m2).unwrap();
            let s2 = t.sum(mn);
            let both = t.add(s1, s2).unwrap();
            (t, both, bd)
        };
        let (tape, l, b) = eval(&p);
        let g = tape.backward(l).unwrap().params(&b);
        let fd = finite_difference(&p, |q| {
            let (t, l, _) = eval(q);
            t.value(l).item().unwrap()
        });
        let err = max_rel(&g, &fd);
        assert!(err <= 1e-4, "seed {seed}: {err:e}");
    }
}

#[test]
fn forward_outputs_finite_for_bounded_parameters() {
    let spec = MlpSpec::new(vec![5, 32, 32, 1]);
    let lstm = LstmSpec { input: 5, hidden: 8 };
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = spec.init("m", &mut rng);
        p.extend(lstm.init("r", &mut rng)).unwrap();
        let names: Vec<String> = p.names().map(str::to_string).collect();
        for n in names {
            p.values_mut(&n).unwrap().iter_mut().for_each(|v| *v = rng.gen_range(-10.0..10.0));
        }
        let x = Tensor::matrix(4, 5, (0..20).map(|_| rng.gen_range(-10.0..10.0)).collect()).unwrap();
        let y = mpcrrl_nn::mlp_forward(&p, "m", &spec, &x).unwrap();
        assert!(y.is_finite());
        let h = Tensor::matrix(4, 8, vec![0.0; 32]).unwrap();
        let (o, (_, c)) = mpcrrl_nn::lstm_forward(&p, "r", &lstm, &x, (&h, &h)).unwrap();
        assert!(o.is_finite() && c.is_finite());
    }
}

fn arb_paramset() -> impl Strategy<Value = ParamSet> {
    prop::collection::btree_map(
        "[a-z]{1,6}(\\.[a-z0-9]{1,4})?",
        (1usize..4, 1usize..5).prop_flat_map(|(r, c)| {
            prop::collection::vec(prop::num::f64::ANY, r * c)
                .prop_map(move |d| Tensor::matrix(r, c, d).unwrap())
        }),
        1..6,
    )
    .prop_map(|m| {
        let mut p = ParamSet::new();
        for (k, v) in m {
            p.insert(k, v).unwrap();
        }
        p
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn checkpoint_round_trip_is_bit_exact(p in arb_paramset()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save_checkpoint(&p, &path).unwrap();
        let q = load_checkpoint(&path).unwrap();
        prop_assert_eq!(p.len(), q.len());
        for (name, t) in p.iter() {
            let u = q.get(name).unwrap();
            prop_assert_eq!(t.shape(), u.shape());
            let a: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = u.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
