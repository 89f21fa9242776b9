use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikefuse::ctx::{Ctx, ParamStore};
use spikefuse::sse::{batch_hypergraphs, build_hypergraph, Gsa, Propagation, Sse};
use spikefuse::tensor::Tensor;

/// Full sort by (distance, index); the reference the selection must agree with.
fn knn_oracle(rows: &[Vec<f64>], k: usize) -> Vec<Vec<(usize, f64)>> {
    rows.iter()
        .map(|a| {
            let mut d: Vec<(f64, usize)> = rows
                .iter()
                .enumerate()
                .map(|(j, b)| (a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>(), j))
                .collect();
            d.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            d[..k].iter().map(|&(s, j)| (j, 1.0 / (1.0 + s.sqrt()))).collect()
        })
        .collect()
}

fn rows_strategy(binary: bool) -> impl Strategy<Value = (Vec<Vec<f64>>, usize)> {
    (3usize..14, 1usize..9).prop_flat_map(move |(n, c)| {
        let cell = if binary { (0u8..2).prop_map(f64::from).boxed() } else { (-3.0f64..3.0).boxed() };
        (proptest::collection::vec(proptest::collection::vec(cell, c), n), 1..n)
    })
}

fn to_tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::new(&[rows.len(), rows[0].len()], rows.concat()).unwrap()
}

proptest! {
    #[test]
    fn knn_matches_brute_force_on_spikes((rows, k) in rows_strategy(true)) {
        let h = build_hypergraph(&to_tensor(&rows), k).unwrap();
        for (i, want) in knn_oracle(&rows, k).iter().enumerate() {
            let got = &h.matrix.rows[i];
            prop_assert_eq!(got.len(), k);
            for (g, w) in got.iter().zip(want) {
                prop_assert_eq!(g.0, w.0);
                prop_assert!((g.1 - w.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn knn_matches_brute_force_on_reals((rows, k) in rows_strategy(false)) {
        let h = build_hypergraph(&to_tensor(&rows), k).unwrap();
        for (i, want) in knn_oracle(&rows, k).iter().enumerate() {
            prop_assert_eq!(h.neighbours(i), want.iter().map(|w| w.0).collect::<Vec<_>>());
        }
    }

    #[test]
    fn weights_lie_in_unit_interval_and_fall_with_rank((rows, k) in rows_strategy(false)) {
        let h = build_hypergraph(&to_tensor(&rows), k).unwrap();
        for row in &h.matrix.rows {
            prop_assert!((row[0].1 - 1.0).abs() < 1e-12, "nearest neighbour is at distance 0");
            for w in row.windows(2) {
                prop_assert!(w[1].1 <= w[0].1);
            }
            prop_assert!(row.iter().all(|&(_, v)| v > 0.0 && v <= 1.0));
        }
    }
}

#[test]
fn hamming_distances_give_exact_weights() {
    // Hamming distances: d(0,1) = 1, d(0,3) = 1, d(0,2) = 4, d(2,1) = 3, d(2,3) = 3.
    let x = Tensor::new(&[4, 4], vec![1., 1., 1., 1., 1., 1., 1., 0., 0., 0., 0., 0., 0., 1., 1., 1.]).unwrap();
    let h = build_hypergraph(&x, 3).unwrap();
    assert_eq!(h.matrix.rows[0], vec![(0, 1.0), (1, 0.5), (3, 0.5)]);
    let w = 1.0 / (1.0 + 3f64.sqrt());
    assert_eq!(h.matrix.rows[2], vec![(2, 1.0), (1, w), (3, w)]);
    assert_eq!(h.to_coo().lines().count(), 12);
}

#[test]
fn k_must_be_below_node_count() {
    let x = Tensor::zeros(&[4, 2]);
    assert!(build_hypergraph(&x, 0).is_err());
    assert!(build_hypergraph(&x, 4).is_err());
    assert!(build_hypergraph(&x, 3).is_ok());
}

fn spikes(rng: &mut ChaCha8Rng, shape: &[usize], p: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| if rng.random::<f64>() < p { 1.0 } else { 0.0 }).collect()).unwrap()
}

#[test]
fn propagation_mix_is_the_dense_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let p = Propagation::new(&mut store, "p", 6, &mut rng).unwrap();
    let x = spikes(&mut rng, &[2, 3, 4, 6], 0.4);
    let graphs = batch_hypergraphs(&x, 3).unwrap();
    let mut ctx = Ctx::train(&store, 0, 0.0);
    let xv = ctx.constant(x.clone());
    let y = p.mix(&mut ctx, &graphs, xv).unwrap();
    let n = 12;
    for (b, g) in graphs.iter().enumerate() {
        let mut dense = vec![0.0; n * n];
        for (i, row) in g.matrix.rows.iter().enumerate() {
            for &(j, w) in row {
                dense[i * n + j] = w;
            }
        }
        for i in 0..n {
            for c in 0..6 {
                let want: f64 = (0..n).map(|j| dense[i * n + j] * x.data()[(b * n + j) * 6 + c]).sum();
                assert!((ctx.value(y).data()[(b * n + i) * 6 + c] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn channel_groups_do_not_interact() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let gsa = Gsa::new(&mut store, "gsa", 8, 4, &mut rng).unwrap();
    let x = spikes(&mut rng, &[1, 2, 3, 8], 0.5);
    let mut flipped = x.clone();
    // Flip every channel of group 2 (channels 4 and 5).
    for (i, v) in flipped.data_mut().iter_mut().enumerate() {
        if i % 8 == 4 || i % 8 == 5 {
            *v = 1.0 - *v;
        }
    }
    let outputs = |t: Tensor| {
        let mut ctx = Ctx::eval(&store);
        let xv = ctx.constant(t);
        let parts = gsa.group_outputs(&mut ctx, xv).unwrap();
        parts.iter().map(|&p| ctx.value(p).clone()).collect::<Vec<_>>()
    };
    let (a, b) = (outputs(x), outputs(flipped));
    for g in [0, 1, 3] {
        assert_eq!(a[g], b[g], "group {g} saw another group's channels");
    }
    assert_ne!(a[2], b[2]);
}

#[test]
fn full_mask_without_attention_passes_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let gsa = Gsa::new(&mut store, "gsa", 8, 2, &mut rng).unwrap();
    let x = spikes(&mut rng, &[2, 3, 4, 8], 0.5);
    let mut ctx = Ctx::eval(&store);
    let xv = ctx.constant(x.clone());
    let mask = ctx.constant(Tensor::ones(&[2, 3, 4, 1]));
    let att = ctx.constant(Tensor::zeros(&[2, 3, 4, 8]));
    let y = gsa.combine(&mut ctx, xv, mask, att);
    assert_eq!(ctx.value(y), &x);
    // A closed mask silences everything.
    let closed = ctx.constant(Tensor::zeros(&[2, 3, 4, 1]));
    let att = ctx.constant(Tensor::ones(&[2, 3, 4, 8]));
    let y = gsa.combine(&mut ctx, xv, closed, att);
    assert_eq!(ctx.value(y).sum(), 0.0);
}

#[test]
fn extractor_output_is_the_binarised_residual_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let sse = Sse::new(&mut store, "sse", 8, 3, 2, &mut rng).unwrap();
    let x = spikes(&mut rng, &[2, 4, 3, 8], 0.4);
    let mut ctx = Ctx::train(&store, 0, 0.0);
    let xv = ctx.constant(x.clone());
    let p = sse.forward_parts(&mut ctx, xv).unwrap();
    let (first, gsa, second, raw, out) =
        (ctx.value(p.first), ctx.value(p.gsa), ctx.value(p.second), ctx.value(p.raw_sum), ctx.value(p.out));
    for t in [first, gsa, second, out] {
        assert!(t.is_binary());
    }
    for i in 0..x.len() {
        let sum = second.data()[i] + gsa.data()[i] + x.data()[i];
        assert_eq!(raw.data()[i], sum);
        assert_eq!(out.data()[i], if sum >= 1.0 { 1.0 } else { 0.0 });
        assert!(out.data()[i] >= x.data()[i], "an input spike was dropped");
    }
}
