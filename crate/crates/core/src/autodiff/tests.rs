use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> DenseTensor {
    DenseTensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

type Build = dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>;

fn eval(params: &[DenseTensor], build: &Build) -> f64 {
    let mut tape = Tape::inference();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = build(&mut tape, &ids).unwrap();
    tape.value(out).item()
}

fn analytic(params: &[DenseTensor], build: &Build) -> Vec<DenseTensor> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = build(&mut tape, &ids).unwrap();
    let g = tape.backward(out).unwrap();
    ids.iter().map(|id| g.get(*id).unwrap().clone()).collect()
}

/// Central differences with step `h`, entry by entry.
fn numeric(params: &[DenseTensor], build: &Build, h: f64) -> Vec<DenseTensor> {
    params
        .iter()
        .enumerate()
        .map(|(pi, p)| {
            let mut g = vec![0.0; p.len()];
            for (k, gk) in g.iter_mut().enumerate() {
                let mut plus = params.to_vec();
                let mut minus = params.to_vec();
                let mut d = p.to_vec();
                d[k] += h;
                plus[pi] = DenseTensor::new(p.shape().to_vec(), d.clone()).unwrap();
                d[k] -= 2.0 * h;
                minus[pi] = DenseTensor::new(p.shape().to_vec(), d).unwrap();
                *gk = (eval(&plus, build) - eval(&minus, build)) / (2.0 * h);
            }
            DenseTensor::new(p.shape().to_vec(), g).unwrap()
        })
        .collect()
}

fn max_rel_err(a: &[DenseTensor], n: &[DenseTensor]) -> f64 {
    a.iter()
        .zip(n)
        .flat_map(|(a, n)| {
            a.data()
                .iter()
                .zip(n.data())
                .map(|(&x, &y)| (x, y))
                .collect::<Vec<_>>()
        })
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

fn gradcheck(params: &[DenseTensor], build: &Build) -> f64 {
    max_rel_err(&analytic(params, build), &numeric(params, build, 1e-6))
}

#[test]
fn add_backward_is_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf(DenseTensor::vector(vec![1., 2., 3.]));
    let y = tape.leaf(DenseTensor::vector(vec![4., 5., 6.]));
    let z = tape.record(Primitive::Add, &[x, y]).unwrap();
    let loss = tape.sum(z).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1., 1., 1.]);
    assert_eq!(g.get(y).unwrap().data(), &[1., 1., 1.]);
}

#[test]
fn recorded_contract_delegates() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 4, 2], &mut rng);
    let b = random(&[2, 3], &mut rng);
    let mut tape = Tape::new();
    let ia = tape.leaf(a.clone());
    let ib = tape.constant(b.clone());
    let c = tape
        .record(Primitive::Contract(vec![(2, 0), (0, 1)]), &[ia, ib])
        .unwrap();
    assert_eq!(
        tape.value(c),
        &tensor::contract(&a, &b, &[(2, 0), (0, 1)]).unwrap()
    );
}

#[test]
fn contract_then_sum_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = vec![
        random(&[3, 4, 2], &mut rng),
        random(&[4, 5], &mut rng),
        random(&[5, 3], &mut rng),
    ];
    let build: Box<Build> = Box::new(|t, p| {
        let ab = t.contract(p[0], p[1], &[(1, 0)])?;
        let abc = t.contract(ab, p[2], &[(2, 0), (0, 1)])?;
        let sq = t.mul(abc, abc)?;
        t.sum(sq)
    });
    assert!(gradcheck(&params, &build) <= 1e-5);
}

#[test]
fn sum_and_linear_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 3], &mut rng);
    let c = random(&[3, 2], &mut rng);
    let mut tape = Tape::new();
    let ix = tape.leaf(x);
    let s = tape.sum(ix).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(ix).unwrap(), &DenseTensor::ones(&[2, 3]));

    let ic = tape.constant(c.clone());
    let l = tape.contract(ix, ic, &[(0, 1), (1, 0)]).unwrap();
    let g = tape.backward(l).unwrap();
    assert!(g.get(ix).unwrap().max_abs_diff(&c.t()) < 1e-15);
}

#[test]
fn backward_errors() {
    let mut tape = Tape::new();
    let x = tape.leaf(DenseTensor::vector(vec![1., 2.]));
    assert!(matches!(tape.backward(x), Err(Error::Argument(_))));
    assert!(matches!(
        tape.record(Primitive::Relu, &[NodeId(99)]),
        Err(Error::Argument(_))
    ));
    assert!(matches!(
        tape.record(Primitive::Add, &[x]),
        Err(Error::Argument(_))
    ));
    let mut inf = Tape::inference();
    let y = inf.leaf(DenseTensor::scalar(1.0));
    assert!(inf.backward(y).is_err());
}

#[test]
fn every_elementwise_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // keep entries away from the kinks of relu/abs
    let away = |rng: &mut ChaCha8Rng| {
        DenseTensor::from_fn(&[2, 3, 4], |_| {
            let v: f64 = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
    };
    let params = vec![away(&mut rng), away(&mut rng)];
    let w = random(&[4, 3, 2], &mut rng);
    let build: Box<Build> = Box::new(move |t, p| {
        let r = t.record(Primitive::Relu, &[p[0]])?;
        let a = t.record(Primitive::Abs, &[p[1]])?;
        let m = t.record(Primitive::Mul, &[r, a])?;
        let s = t.record(Primitive::Scale(1.7), &[m])?;
        let q = t.record(Primitive::Add, &[s, p[1]])?;
        let pm = t.record(Primitive::Permute(vec![2, 0, 1]), &[q])?;
        let rs = t.record(Primitive::Reshape(vec![4, 6]), &[pm])?;
        let wc = t.constant(w.clone());
        let wr = t.reshape(wc, &[4, 6])?;
        let prod = t.mul(rs, wr)?;
        let sq = t.mul(prod, rs)?;
        t.sum(sq)
    });
    assert!(gradcheck(&params, &build) <= 1e-5);
}

#[test]
fn max_pool_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = vec![random(&[4, 6, 3], &mut rng)];
    let w = random(&[2, 3, 3], &mut rng);
    let build: Box<Build> = Box::new(move |t, p| {
        let m = t.record(Primitive::MaxPool2, &[p[0]])?;
        let wc = t.constant(w.clone());
        t.contract(m, wc, &[(0, 0), (1, 1), (2, 2)])
    });
    assert!(gradcheck(&params, &build) <= 1e-5);

    let mut tape = Tape::new();
    let x = tape.leaf(DenseTensor::from_fn(&[2, 2, 1], |i| {
        (i[0] * 2 + i[1]) as f64
    }));
    let m = tape.max_pool2(x).unwrap();
    assert_eq!(tape.value(m).data(), &[3.0]);
    let bad = tape.leaf(DenseTensor::zeros(&[3, 2, 1]));
    assert!(tape.max_pool2(bad).is_err());
}

#[test]
fn cross_entropy_gradients() {
    let z = DenseTensor::vector(vec![0.3, -1.2, 2.0, 0.5]);
    let mut tape = Tape::new();
    let iz = tape.leaf(z.clone());
    let l = tape.cross_entropy(iz, 1, LossDomain::Logits).unwrap();
    let g = tape.backward(l).unwrap();
    let p = crate::training::softmax(z.data());
    for (k, gk) in g.get(iz).unwrap().data().iter().enumerate() {
        let expect = p[k] - if k == 1 { 1.0 } else { 0.0 };
        assert!((gk - expect).abs() < 1e-15);
    }
    let build: Box<Build> = Box::new(|t, p| t.cross_entropy(p[0], 1, LossDomain::Logits));
    let num = numeric(std::slice::from_ref(&z), &build, 1e-6);
    assert!(g.get(iz).unwrap().max_abs_diff(&num[0]) < 1e-8);

    let f = DenseTensor::vector(vec![0.3, 1.2, 2.0, 0.5]);
    let build: Box<Build> = Box::new(|t, p| t.cross_entropy(p[0], 0, LossDomain::LogDomain));
    assert!(gradcheck(std::slice::from_ref(&f), &build) <= 1e-5);
    // log-domain loss is invariant to a common positive factor
    let a = eval(std::slice::from_ref(&f), &build);
    let b = eval(&[f.scale(1e3)], &build);
    assert!((a - b).abs() < 1e-14);

    let mut tape = Tape::new();
    let neg = tape.leaf(DenseTensor::vector(vec![1.0, -1.0]));
    assert!(matches!(
        tape.cross_entropy(neg, 0, LossDomain::LogDomain),
        Err(Error::Numerical(_))
    ));
    assert!(matches!(
        tape.cross_entropy(neg, 2, LossDomain::Logits),
        Err(Error::Argument(_))
    ));
}

#[test]
fn gradient_of_sum_is_sum_of_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[3, 3], &mut rng);
    let c1 = random(&[3, 3], &mut rng);
    let c2 = random(&[3], &mut rng);
    let grads = |which: u8| {
        let mut t = Tape::new();
        let ix = t.leaf(x.clone());
        let a = t.constant(c1.clone());
        let b = t.constant(c2.clone());
        let l1 = {
            let m = t.contract(ix, a, &[(1, 0)]).unwrap();
            let sq = t.mul(m, m).unwrap();
            t.sum(sq).unwrap()
        };
        let l2 = {
            let v = t.contract(ix, b, &[(0, 0)]).unwrap();
            let r = t.relu(v).unwrap();
            t.sum(r).unwrap()
        };
        let loss = match which {
            0 => l1,
            1 => l2,
            _ => t.add(l1, l2).unwrap(),
        };
        t.backward(loss).unwrap().get(ix).unwrap().clone()
    };
    let sum = grads(0).add(&grads(1)).unwrap();
    assert!(grads(2).max_abs_diff(&sum) <= 1e-12 * sum.max_abs().max(1.0));
}

#[test]
fn backward_is_repeatable() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut tape = Tape::new();
    let x = tape.leaf(random(&[4, 3], &mut rng));
    let svd = tape.svd_truncated(x, 2, DEFAULT_SVD_EPS).unwrap();
    let us = tape.contract(svd.u, svd.s, &[(1, 0)]).unwrap();
    let l = tape.mul(us, us).unwrap();
    let loss = tape.sum(l).unwrap();
    let before = tape.value(x).clone();
    let g1 = tape.backward(loss).unwrap();
    let g2 = tape.backward(loss).unwrap();
    assert_eq!(g1, g2);
    assert_eq!(tape.value(x), &before);
}

/// Smooth, gauge-invariant loss of a truncated SVD: sum(w * (u diag(s) v)).
fn svd_loss(w: DenseTensor, chi: usize, eps: f64) -> Box<Build> {
    Box::new(move |t, p| {
        let svd = t.svd_truncated(p[0], chi, eps)?;
        let shape = t.shape(svd.v).to_vec();
        let ones = t.constant(DenseTensor::ones(&[shape[1]]));
        let s_rows = t.contract(svd.s, ones, &[])?;
        let sv = t.mul(s_rows, svd.v)?;
        let rec = t.contract(svd.u, sv, &[(1, 0)])?;
        let wc = t.constant(w.clone());
        let weighted = t.mul(rec, wc)?;
        let sq = t.mul(weighted, rec)?;
        t.sum(sq)
    })
}

#[test]
fn svd_backward_on_diagonal_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = DenseTensor::matrix(2, 2, vec![3., 0., 0., 1.]).unwrap();
    let w = random(&[2, 2], &mut rng);
    for chi in [1, 2] {
        assert!(
            gradcheck(
                std::slice::from_ref(&a),
                &svd_loss(w.clone(), chi, DEFAULT_SVD_EPS)
            ) <= 1e-5
        );
    }
}

#[test]
fn svd_backward_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (m, n, chi) in [(5, 3, 2), (3, 5, 2), (4, 4, 3), (6, 4, 4), (4, 6, 4)] {
        let a = random(&[m, n], &mut rng);
        let w = random(&[m, n], &mut rng);
        let err = gradcheck(&[a], &svd_loss(w, chi, DEFAULT_SVD_EPS));
        assert!(err <= 1e-5, "{m}x{n} chi={chi}: {err}");
    }
}

#[test]
fn svd_backward_degenerate_is_finite() {
    let full = tensor::svd_full(&DenseTensor::identity(3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let gu = random(&[3, 3], &mut rng);
    let gv = random(&[3, 3], &mut rng);
    let g = svd_backward(
        &full,
        Some(&gu),
        Some(&[1.0, 2.0, 3.0]),
        Some(&gv),
        DEFAULT_SVD_EPS,
    );
    assert!(g.is_finite());
}

#[test]
fn svd_backward_epsilon_sweep_is_stable() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(&[5, 4], &mut rng);
    let full = tensor::svd_full(&a).unwrap();
    let gu = random(&[5, 4], &mut rng);
    let gv = random(&[4, 4], &mut rng);
    let gs = [0.3, -0.2, 0.1, 0.5];
    let g10 = svd_backward(&full, Some(&gu), Some(&gs), Some(&gv), 1e-10);
    let g14 = svd_backward(&full, Some(&gu), Some(&gs), Some(&gv), 1e-14);
    assert!(g10.max_abs_diff(&g14) <= 1e-6 * g14.max_abs());
}

fn qr_loss(wq: DenseTensor, wr: DenseTensor, use_q: bool, use_r: bool) -> Box<Build> {
    Box::new(move |t, p| {
        let (q, r) = t.qr(p[0])?;
        let a = t.constant(wq.clone());
        let b = t.constant(wr.clone());
        let lq = t.contract(q, a, &[(0, 0), (1, 1)])?;
        let lr = t.contract(r, b, &[(0, 0), (1, 1)])?;
        let lq2 = t.mul(lq, lq)?;
        match (use_q, use_r) {
            (true, true) => t.add(lq2, lr),
            (true, false) => Ok(lq2),
            _ => Ok(lr),
        }
    })
}

#[test]
fn qr_backward_identity_r_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let wr = random(&[2, 2], &mut rng);
    let err = gradcheck(
        &[DenseTensor::identity(2)],
        &qr_loss(DenseTensor::zeros(&[2, 2]), wr, false, true),
    );
    assert!(err <= 1e-5);
}

#[test]
fn qr_backward_random_tall_square_wide() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for (m, n) in [(5, 3), (4, 4), (3, 5), (2, 6)] {
        let k = m.min(n);
        let a = random(&[m, n], &mut rng);
        let wq = random(&[m, k], &mut rng);
        let wr = random(&[k, n], &mut rng);
        let err = gradcheck(&[a], &qr_loss(wq, wr, true, true));
        assert!(err <= 1e-5, "{m}x{n}: {err}");
    }
}

#[test]
fn qr_backward_zero_upstream_and_rank_deficiency() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let a = random(&[5, 3], &mut rng);
    let (q, r) = tensor::qr_reduced(&a).unwrap();
    let g = qr_backward(&a, &q, &r, None, None);
    assert_eq!(g.grad.max_abs(), 0.0);
    assert!(!g.ill_conditioned);

    let deficient = DenseTensor::matrix(3, 2, vec![1., 2., 2., 4., 3., 6.]).unwrap();
    let (q, r) = tensor::qr_reduced(&deficient).unwrap();
    let g = qr_backward(&deficient, &q, &r, Some(&DenseTensor::ones(&[3, 2])), None);
    assert!(g.ill_conditioned);
}

/// One boundary-style step: absorb `op` into `mps`, then SVD-truncate.
fn absorb_and_truncate(t: &mut Tape, ins: &[NodeId]) -> Result<Vec<NodeId>> {
    let merged = t.contract(ins[0], ins[1], &[(1, 0)])?;
    let shape = t.shape(merged).to_vec();
    let mat = t.reshape(merged, &[shape[0], shape[1] * shape[2]])?;
    let svd = t.svd_truncated(mat, 2, DEFAULT_SVD_EPS)?;
    let (q, r) = t.qr(svd.u)?;
    let rs = t.contract(r, svd.s, &[(1, 0)])?;
    Ok(vec![q, rs, svd.v])
}

#[test]
fn checkpointed_gradient_equals_plain() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mps = random(&[4, 3], &mut rng);
    let op = random(&[3, 2, 3], &mut rng);
    let w = random(&[2, 6], &mut rng);
    let run = |ckpt: bool| {
        let mut t = Tape::new();
        let a = t.leaf(mps.clone());
        let b = t.leaf(op.clone());
        let outs = if ckpt {
            t.checkpoint(&[a, b], absorb_and_truncate).unwrap()
        } else {
            absorb_and_truncate(&mut t, &[a, b]).unwrap()
        };
        let wc = t.constant(w.clone());
        let l1 = t.contract(outs[2], wc, &[(0, 0), (1, 1)]).unwrap();
        let l2 = t.sum(outs[1]).unwrap();
        let l3 = t.sum(outs[0]).unwrap();
        let l12 = t.mul(l1, l2).unwrap();
        let loss = t.add(l12, l3).unwrap();
        let g = t.backward(loss).unwrap();
        (
            g.get(a).unwrap().clone(),
            g.get(b).unwrap().clone(),
            t.retained_tensors(),
        )
    };
    let (pa, pb, plain_count) = run(false);
    let (ca, cb, ckpt_count) = run(true);
    assert!(pa.max_abs_diff(&ca) <= 1e-14 * pa.max_abs().max(1.0));
    assert!(pb.max_abs_diff(&cb) <= 1e-14 * pb.max_abs().max(1.0));
    assert!(ckpt_count < plain_count);
}

#[test]
fn identity_segment_passes_through() {
    let mut t = Tape::new();
    let x = t.leaf(DenseTensor::vector(vec![1., -2., 3.]));
    let outs = t.checkpoint(&[x], |_, ins| Ok(ins.to_vec())).unwrap();
    assert_eq!(t.value(outs[0]), t.value(x));
    let sq = t.mul(outs[0], outs[0]).unwrap();
    let loss = t.sum(sq).unwrap();
    let g = t.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2., -4., 6.]);
}

mod props {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn degenerate_svd_backward_is_finite(seed in any::<u64>(), m in 2usize..6, n in 2usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = m.min(n);
            // orthonormal factors with a spectrum containing a repeated value
            let (qu, _) = tensor::qr_reduced(&random(&[m, k], &mut rng)).unwrap();
            let (qv, _) = tensor::qr_reduced(&random(&[n, k], &mut rng)).unwrap();
            let mut s: Vec<f64> = (0..k).map(|_| rng.gen_range(0.5..2.0)).collect();
            s.sort_by(|a, b| b.total_cmp(a));
            s[1] = s[0];
            let sd = DenseTensor::from_fn(&[k, k], |i| if i[0] == i[1] { s[i[0]] } else { 0.0 });
            let a = qu.matmul(&sd).unwrap().matmul(&qv.t()).unwrap();
            let full = tensor::svd_full(&a).unwrap();
            let chi = rng.gen_range(1..=k);
            let gu = random(&[m, chi], &mut rng);
            let gv = random(&[chi, n], &mut rng);
            let gs: Vec<f64> = (0..chi).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let g = svd_backward(&full, Some(&gu), Some(&gs), Some(&gv), DEFAULT_SVD_EPS);
            prop_assert!(g.is_finite());
        }
    }
}
