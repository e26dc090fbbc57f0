use super::*;
use crate::autodiff::LossDomain;
use crate::peps::Geometry;
use crate::tensor::{contract, svd_truncated};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> DenseTensor {
    DenseTensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn random_sites(g: Geometry, lo: f64, hi: f64, seed: u64) -> Vec<DenseTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..g.sites())
        .map(|k| random(&g.absorbed_shape(k / g.side, k % g.side), lo, hi, &mut rng))
        .collect()
}

fn grid_on(tape: &mut Tape, g: Geometry, sites: &[DenseTensor], trainable: bool) -> AbsorbedGrid {
    let sites = sites
        .iter()
        .map(|t| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    AbsorbedGrid { geom: g, sites }
}

fn true_logits(l: &Logits) -> Vec<f64> {
    l.unscaled()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1e-300))
        .fold(0.0, f64::max)
}

/// Direct sum over every bond assignment.
fn nested_loop_oracle(g: Geometry, sites: &[DenseTensor]) -> Vec<f64> {
    let l = g.side;
    let nh = l * (l - 1); // (i, j)-(i, j+1) at index i*(l-1)+j
    let nv = (l - 1) * l; // (i, j)-(i+1, j) at index nh + i*l+j
    let nb = nh + nv;
    let mut out = vec![0.0; g.labels];
    let mut idx = vec![0usize; nb];
    loop {
        for (t, o) in out.iter_mut().enumerate() {
            let mut prod = 1.0;
            for i in 0..l {
                for j in 0..l {
                    let mut at = Vec::new();
                    if i > 0 {
                        at.push(idx[nh + (i - 1) * l + j]);
                    }
                    if j + 1 < l {
                        at.push(idx[i * (l - 1) + j]);
                    }
                    if i + 1 < l {
                        at.push(idx[nh + i * l + j]);
                    }
                    if j > 0 {
                        at.push(idx[i * (l - 1) + j - 1]);
                    }
                    if g.is_center(i, j) {
                        at.push(t);
                    }
                    prod *= sites[i * l + j].get(&at);
                }
            }
            *o += prod;
        }
        let mut k = 0;
        loop {
            if k == nb {
                return out;
            }
            idx[k] += 1;
            if idx[k] < g.bond {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

fn exact(g: Geometry, sites: &[DenseTensor]) -> Vec<f64> {
    let mut tape = Tape::inference();
    let grid = grid_on(&mut tape, g, sites, false);
    let node = exact_contract(&mut tape, &grid).unwrap();
    true_logits(&Logits::from_node(&tape, node))
}

fn boundary(g: Geometry, sites: &[DenseTensor], chi: usize) -> Logits {
    let mut tape = Tape::inference();
    let grid = grid_on(&mut tape, g, sites, false);
    let node = bidirectional_contract(&mut tape, &grid, chi).unwrap();
    Logits::from_node(&tape, node)
}

#[test]
fn exact_single_site_is_the_center_vector() {
    let g = Geometry::new(1, 3, 2, 4).unwrap();
    let sites = vec![DenseTensor::vector(vec![0.5, -1.0, 2.0, 3.0])];
    assert!(rel_err(&exact(g, &sites), &[0.5, -1.0, 2.0, 3.0]) < 1e-15);
    let b = boundary(g, &sites, 2);
    assert!(rel_err(&b.unscaled(), &[0.5, -1.0, 2.0, 3.0]) < 1e-15);
}

#[test]
fn exact_bond_one_is_a_product() {
    let g = Geometry::new(2, 1, 1, 3).unwrap();
    let sites = random_sites(g, 0.1, 1.0, 5);
    // the center (1, 1) holds the label leg
    let got = exact(g, &sites);
    let direct: Vec<f64> = sites[3]
        .data()
        .iter()
        .map(|&x| x * sites[0].data()[0] * sites[1].data()[0] * sites[2].data()[0])
        .collect();
    assert!(rel_err(&got, &direct) < 1e-14);
}

#[test]
fn exact_matches_nested_loops() {
    for seed in 0..3 {
        let g = Geometry::new(3, 2, 1, 3).unwrap();
        let sites = random_sites(g, -1.0, 1.0, seed);
        let oracle = nested_loop_oracle(g, &sites);
        let got = exact(g, &sites);
        for (a, b) in got.iter().zip(&oracle) {
            assert!(
                (a - b).abs() <= 1e-12 * b.abs().max(1.0),
                "{got:?} vs {oracle:?}"
            );
        }
    }
}

#[test]
fn exact_guard() {
    let g = Geometry::new(21, 2, 1, 1).unwrap();
    let mut tape = Tape::inference();
    let sites = (0..g.sites())
        .map(|k| tape.constant(DenseTensor::ones(&g.absorbed_shape(k / 21, k % 21))))
        .collect();
    let grid = AbsorbedGrid { geom: g, sites };
    assert!(matches!(
        exact_contract(&mut tape, &grid),
        Err(Error::Capacity(_))
    ));
}

fn random_mps(tape: &mut Tape, bonds: &[usize], phys: usize, rng: &mut ChaCha8Rng) -> BoundaryMps {
    let sites = bonds
        .windows(2)
        .map(|w| tape.constant(random(&[w[0], phys, w[1]], -1.0, 1.0, rng)))
        .collect();
    BoundaryMps::from_nodes(tape, sites, 8).unwrap()
}

fn scaled_dense(tape: &Tape, mps: &BoundaryMps) -> DenseTensor {
    mps.to_dense(tape).scale(mps.log_scale.exp())
}

fn rel_dense(a: &DenseTensor, b: &DenseTensor) -> f64 {
    a.max_abs_diff(b) / b.max_abs()
}

fn isometry_defect(t: &DenseTensor, left: bool) -> f64 {
    let sh = t.shape();
    let m = if left {
        t.reshape(&[sh[0] * sh[1], sh[2]]).unwrap()
    } else {
        t.reshape(&[sh[0], sh[1] * sh[2]]).unwrap().t()
    };
    let gram = m.t().matmul(&m).unwrap();
    gram.max_abs_diff(&DenseTensor::identity(gram.rows()))
}

#[test]
fn canonicalize_preserves_vector_and_isometries() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for center in 0..4 {
        let mut tape = Tape::inference();
        let mps = random_mps(&mut tape, &[1, 3, 3, 3, 1], 2, &mut rng);
        let before = scaled_dense(&tape, &mps);
        let can = canonicalize(&mut tape, mps, center).unwrap();
        assert!(rel_dense(&scaled_dense(&tape, &can), &before) < 1e-10);
        for (j, &s) in can.sites.iter().enumerate() {
            if j != center {
                assert!(isometry_defect(tape.value(s), j < center) < 1e-10);
            }
        }
        assert!((tape.value(can.sites[center]).max_abs() - 1.0).abs() < 1e-15);

        let again = canonicalize(&mut tape, can.clone(), center).unwrap();
        for (a, b) in again.sites.iter().zip(&can.sites) {
            assert!(tape.value(*a).max_abs_diff(tape.value(*b)) < 1e-12);
        }
        assert!((again.log_scale - can.log_scale).abs() < 1e-12);
    }
}

#[test]
fn canonicalize_single_site_only_rescales() {
    let mut tape = Tape::inference();
    let s = tape.constant(DenseTensor::new(vec![1, 3, 1], vec![0.5, -0.25, 0.125]).unwrap());
    let mps = BoundaryMps::from_nodes(&tape, vec![s], 4).unwrap();
    let can = canonicalize(&mut tape, mps.clone(), 0).unwrap();
    assert!(rel_dense(&scaled_dense(&tape, &can), &scaled_dense(&tape, &mps)) < 1e-15);
    assert!(canonicalize(&mut tape, mps, 1).is_err());
}

/// Dense action of a row of (in, e, out, w) operators on a dense vector.
fn apply_dense(psi: &DenseTensor, ops: &[DenseTensor]) -> DenseTensor {
    let n = ops.len();
    // chain the operators over their horizontal legs: mpo (in_0, out_0, ..., e_last)
    let mut mpo = ops[0].permute(&[3, 0, 2, 1]).unwrap(); // (w, in, out, e)
    for op in &ops[1..] {
        let r = mpo.rank();
        mpo = contract(&mpo, op, &[(r - 1, 3)]).unwrap(); // (..., in, e, out)
        let r = mpo.rank();
        let mut order: Vec<usize> = (0..r - 3).collect();
        order.extend([r - 3, r - 1, r - 2]);
        mpo = mpo.permute(&order).unwrap();
    }
    // drop the extent-1 ends
    let inner: Vec<usize> = mpo.shape()[1..mpo.rank() - 1].to_vec();
    let mpo = mpo.reshape(&inner).unwrap(); // (in_0, out_0, in_1, out_1, ...)
    let pairs: Vec<(usize, usize)> = (0..n).map(|k| (k, 2 * k)).collect();
    contract(psi, &mpo, &pairs).unwrap()
}

fn row_ops(tape: &mut Tape, ops: &[DenseTensor]) -> Vec<NodeId> {
    ops.iter().map(|o| tape.constant(o.clone())).collect()
}

fn random_row(
    n: usize,
    phys_in: usize,
    bond: usize,
    phys_out: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<DenseTensor> {
    (0..n)
        .map(|j| {
            let e = if j + 1 < n { bond } else { 1 };
            let w = if j > 0 { bond } else { 1 };
            random(&[phys_in, e, phys_out, w], -1.0, 1.0, rng)
        })
        .collect()
}

#[test]
fn apply_row_without_truncation_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::inference();
    let mps = random_mps(&mut tape, &[1, 2, 3, 2, 1], 2, &mut rng);
    let ops = random_row(4, 2, 2, 2, &mut rng);
    let expect = apply_dense(&scaled_dense(&tape, &mps), &ops);
    let row = row_ops(&mut tape, &ops);
    let out = apply_row(&mut tape, mps, &row, 16, DEFAULT_SVD_EPS).unwrap();
    assert!(rel_dense(&scaled_dense(&tape, &out.mps), &expect) < 1e-12);
    assert!(out.discarded.iter().all(|&w| w < 1e-12));
}

#[test]
fn apply_identity_row_keeps_the_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tape = Tape::inference();
    let mps = random_mps(&mut tape, &[1, 2, 4, 2, 1], 2, &mut rng);
    let before = scaled_dense(&tape, &mps);
    let delta = DenseTensor::from_fn(&[2, 1, 2, 1], |i| f64::from(u8::from(i[0] == i[2])));
    let row = row_ops(&mut tape, &vec![delta; 4]);
    let out = apply_row(&mut tape, mps, &row, 4, DEFAULT_SVD_EPS).unwrap();
    assert!(rel_dense(&scaled_dense(&tape, &out.mps), &before) < 1e-12);
    for (j, &s) in out.mps.sites[..3].iter().enumerate() {
        assert!(isometry_defect(tape.value(s), true) < 1e-10, "site {j}");
    }
}

#[test]
fn apply_row_truncation_is_optimal() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let mut tape = Tape::inference();
        let mps = random_mps(&mut tape, &[1, 2, 2, 2, 1], 2, &mut rng);
        let ops = random_row(4, 2, 2, 2, &mut rng);
        let full = apply_dense(&scaled_dense(&tape, &mps), &ops);
        let row = row_ops(&mut tape, &ops);
        let out = apply_row(&mut tape, mps, &row, 2, DEFAULT_SVD_EPS).unwrap();

        // only the middle cut can exceed rank 2
        let cut = full.reshape(&[4, 4]).unwrap();
        let best = svd_truncated(&cut, 2).unwrap();
        let got = scaled_dense(&tape, &out.mps).reshape(&[4, 4]).unwrap();
        assert!(rel_dense(&got, &best.reconstruct()) < 1e-10);
        assert_eq!(out.mps.bond_dims(&tape), vec![2, 2, 2]);
        assert!(out.discarded[0] < 1e-12 && out.discarded[2] < 1e-12);
        let tail = best.discarded_weight / full.norm();
        assert!((out.discarded[1] - tail).abs() < 1e-10 * tail.max(1e-3));
    }
}

#[test]
fn discarded_weight_shrinks_with_chi() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut setup = Tape::inference();
    let mps = random_mps(&mut setup, &[1, 2, 4, 4, 4, 2, 1], 2, &mut rng);
    let ops = random_row(6, 2, 2, 2, &mut rng);
    let mut prev = f64::INFINITY;
    for chi in 1..=8 {
        let mut tape = setup_clone(&setup, &mps);
        let m = BoundaryMps::from_nodes(&tape.0, tape.1.clone(), chi).unwrap();
        let row = row_ops(&mut tape.0, &ops);
        let out = apply_row(&mut tape.0, m, &row, chi, DEFAULT_SVD_EPS).unwrap();
        let total = out.discarded.iter().map(|w| w * w).sum::<f64>().sqrt();
        assert!(total <= prev, "chi {chi}: {total} > {prev}");
        prev = total;
    }
    assert!(prev < 1e-12);
}

fn setup_clone(src: &Tape, mps: &BoundaryMps) -> (Tape, Vec<NodeId>) {
    let mut tape = Tape::inference();
    let ids = mps
        .sites
        .iter()
        .map(|&s| tape.constant(src.value(s).clone()))
        .collect();
    (tape, ids)
}

#[test]
fn boundary_matches_exact_when_untruncated() {
    for l in 2..=4 {
        for d in 1..=2usize {
            for seed in 0..5 {
                let g = Geometry::new(l, d, 1, 4).unwrap();
                let sites = random_sites(g, -1.0, 1.0, seed * 31 + l as u64);
                let chi = d.pow(l as u32);
                let e = exact(g, &sites);
                let b = boundary(g, &sites, chi).unscaled();
                assert!(rel_err(&b, &e) <= 1e-10, "L={l} D={d}: {b:?} vs {e:?}");
            }
        }
    }
}

#[test]
fn boundary_matches_nested_loops_on_large_bonds() {
    let g = Geometry::new(3, 3, 1, 2).unwrap();
    let sites = random_sites(g, 0.0, 1.0, 9);
    let oracle = nested_loop_oracle(g, &sites);
    assert!(rel_err(&boundary(g, &sites, 27).unscaled(), &oracle) < 1e-10);
}

#[test]
fn error_is_non_increasing_in_chi() {
    let g = Geometry::new(4, 2, 1, 3).unwrap();
    let chis = [1, 2, 4, 8, 16];
    let mut mean = [0.0; 5];
    for seed in 0..20 {
        let sites = random_sites(g, 0.0, 1.0, 100 + seed);
        let e = exact(g, &sites);
        for (k, &chi) in chis.iter().enumerate() {
            mean[k] += rel_err(&boundary(g, &sites, chi).unscaled(), &e) / 20.0;
        }
    }
    for w in mean.windows(2) {
        assert!(w[1] <= w[0], "{mean:?}");
    }
    assert!(mean[4] < 1e-10);
}

#[test]
fn entry_scaling_is_absorbed_by_log_scale() {
    let g = Geometry::new(4, 2, 1, 5).unwrap();
    let sites = random_sites(g, 0.0, 1.0, 12);
    let base = boundary(g, &sites, 3);
    let p0 = crate::training::softmax(&base.log_values());
    for c in [1e-3, 1e3] {
        let scaled: Vec<DenseTensor> = sites.iter().map(|t| t.scale(c)).collect();
        let out = boundary(g, &scaled, 3);
        assert!(out.is_finite());
        let shift = 16.0 * c.ln();
        assert!((out.log_scale - base.log_scale - shift).abs() < 1e-8 * shift.abs());
        let p = crate::training::softmax(&out.log_values());
        for (a, b) in p.iter().zip(&p0) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn fourteen_rows_of_small_entries_stay_finite() {
    let g = Geometry::new(14, 2, 1, 10).unwrap();
    let sites = random_sites(g, 0.0, 0.01, 1);
    let out = boundary(g, &sites, 10);
    assert!(out.is_finite());
    assert!(out.values.iter().all(|&v| v > 0.0));
    assert!(
        out.log_scale < -300.0,
        "true logits underflow, {}",
        out.log_scale
    );
}

fn loss_of(
    sites: &[DenseTensor],
    g: Geometry,
    chi: usize,
    checkpoint: bool,
) -> (f64, Vec<DenseTensor>, usize) {
    let mut tape = Tape::new();
    let grid = grid_on(&mut tape, g, sites, true);
    let opts = ContractOptions {
        checkpoint_rows: checkpoint,
        ..ContractOptions::new(chi)
    };
    let logits = bidirectional_contract_with(&mut tape, &grid, &opts).unwrap();
    let loss = tape
        .cross_entropy(logits.values, 1, LossDomain::LogDomain)
        .unwrap();
    let grads = tape.backward(loss).unwrap();
    let gs = grid
        .sites
        .iter()
        .map(|&s| grads.get(s).unwrap().clone())
        .collect();
    (tape.value(loss).item(), gs, tape.retained_tensors())
}

#[test]
fn boundary_gradient_matches_finite_differences() {
    let g = Geometry::new(3, 2, 1, 3).unwrap();
    let sites = random_sites(g, 0.1, 1.0, 21);
    let (_, grads, _) = loss_of(&sites, g, 4, false);
    let h = 1e-6;
    for (k, site) in sites.iter().enumerate() {
        for e in 0..site.len() {
            let bump = |delta: f64| {
                let mut s = sites.clone();
                let mut v = s[k].to_vec();
                v[e] += delta;
                s[k] = DenseTensor::new(s[k].shape().to_vec(), v).unwrap();
                let mut tape = Tape::inference();
                let grid = grid_on(&mut tape, g, &s, false);
                let l = bidirectional_contract(&mut tape, &grid, 4).unwrap();
                let loss = tape
                    .cross_entropy(l.values, 1, LossDomain::LogDomain)
                    .unwrap();
                tape.value(loss).item()
            };
            let num = (bump(h) - bump(-h)) / (2.0 * h);
            let a = grads[k].data()[e];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-8);
            assert!(rel <= 1e-5, "site {k} entry {e}: {a} vs {num}");
        }
    }
}

#[test]
fn checkpointed_rows_give_identical_gradients() {
    let g = Geometry::new(5, 2, 1, 3).unwrap();
    let sites = random_sites(g, 0.0, 1.0, 8);
    let (l0, g0, kept0) = loss_of(&sites, g, 3, false);
    let (l1, g1, kept1) = loss_of(&sites, g, 3, true);
    assert!((l0 - l1).abs() < 1e-14);
    for (a, b) in g0.iter().zip(&g1) {
        assert!(a.max_abs_diff(b) <= 1e-12 * a.max_abs().max(1.0));
    }
    assert!(kept1 < kept0, "{kept1} >= {kept0}");
}
