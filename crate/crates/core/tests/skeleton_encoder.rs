use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikefuse::ctx::{Ctx, ParamStore};
use spikefuse::skeleton::{
    default_bones, NormalizedAdjacency, SgnConfig, SgnEncoder, SgnLayer, Spectral, SpectrumPart,
};
use spikefuse::tensor::Tensor;
use spikefuse::Error;

fn spikes(rng: &mut ChaCha8Rng, shape: &[usize], p: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| if rng.random::<f64>() < p { 1.0 } else { 0.0 }).collect()).unwrap()
}

fn layer(joints: usize, dim: usize, seed: u64) -> (SgnLayer, ParamStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let adj = NormalizedAdjacency::from_bones(joints, &default_bones(joints)).unwrap();
    let l = SgnLayer::new(&mut store, "l", dim, dim, &adj, &mut rng).unwrap();
    (l, store)
}

/// `out[b,t,v,:] = Σ_u A[v,u] · x[b,t,u,:] · W`, written as explicit loops.
fn graph_oracle(a: &Tensor, x: &Tensor, w: &Tensor) -> Vec<f64> {
    let sh = x.shape();
    let (b, t, v, c) = (sh[0], sh[1], sh[2], sh[3]);
    let d = w.shape()[1];
    let mut out = vec![0.0; b * t * v * d];
    for bi in 0..b {
        for ti in 0..t {
            for vi in 0..v {
                for di in 0..d {
                    let mut acc = 0.0;
                    for u in 0..v {
                        for ci in 0..c {
                            acc += a.data()[vi * v + u] * x.data()[((bi * t + ti) * v + u) * c + ci] * w.data()[ci * d + di];
                        }
                    }
                    out[((bi * t + ti) * v + vi) * d + di] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn identity_adjacency_reduces_to_projection() {
    let (l, mut store) = layer(5, 4, 1);
    store.set(l.adjacency, NormalizedAdjacency::identity(5).matrix).unwrap();
    let x = spikes(&mut ChaCha8Rng::seed_from_u64(2), &[2, 4, 5, 4], 0.4);
    let mut ctx = Ctx::train(&store, 0, 0.0);
    let xv = ctx.constant(x.clone());
    let y = l.graph_pre_activation(&mut ctx, xv).unwrap();
    let oracle = graph_oracle(&NormalizedAdjacency::identity(5).matrix, &x, store.get(l.gc.w));
    for (a, b) in ctx.value(y).data().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn uniform_adjacency_gives_identical_joints() {
    let (l, mut store) = layer(6, 4, 3);
    store.set(l.adjacency, NormalizedAdjacency::uniform(6).matrix).unwrap();
    let x = spikes(&mut ChaCha8Rng::seed_from_u64(4), &[1, 4, 6, 4], 0.5);
    let mut ctx = Ctx::train(&store, 0, 0.0);
    let xv = ctx.constant(x);
    let y = l.graph_pre_activation(&mut ctx, xv).unwrap();
    let d = ctx.value(y).data();
    for t in 0..4 {
        let row = |v: usize| &d[(t * 6 + v) * 4..(t * 6 + v + 1) * 4];
        for v in 1..6 {
            for (a, b) in row(v).iter().zip(row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn three_joint_graph_matches_hand_product() {
    let (l, mut store) = layer(3, 4, 5);
    // Row-stochastic with a positive diagonal.
    let a = Tensor::new(&[3, 3], vec![0.5, 0.5, 0.0, 0.25, 0.5, 0.25, 0.0, 0.5, 0.5]).unwrap();
    store.set(l.adjacency, a.clone()).unwrap();
    let x = spikes(&mut ChaCha8Rng::seed_from_u64(6), &[1, 4, 3, 4], 0.5);
    let mut ctx = Ctx::train(&store, 0, 0.0);
    let xv = ctx.constant(x.clone());
    let y = l.graph_pre_activation(&mut ctx, xv).unwrap();
    let oracle = graph_oracle(&a, &x, store.get(l.gc.w));
    assert_eq!(ctx.value(y).shape(), &[1, 4, 3, 4]);
    for (got, want) in ctx.value(y).data().iter().zip(&oracle) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn non_stochastic_adjacency_is_rejected() {
    let (l, mut store) = layer(3, 4, 5);
    store.set(l.adjacency, Tensor::full(&[3, 3], 0.5)).unwrap();
    let mut ctx = Ctx::train(&store, 0, 0.0);
    let x = ctx.constant(Tensor::zeros(&[1, 4, 3, 4]));
    assert!(matches!(l.graph_pre_activation(&mut ctx, x), Err(Error::InvalidInput(_))));
}

fn spectral(dim: usize) -> (Spectral, ParamStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let s = Spectral::new(&mut store, "spec", dim, &mut rng).unwrap();
    (s, store)
}

#[test]
fn spectral_transform_pair_roundtrips() {
    let (s, store) = spectral(4);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::new(&[2, 8, 3, 4], (0..192).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let mut ctx = Ctx::train(&store, 0, 0.0);
    let xv = ctx.constant(x.clone());
    let y = s.pre_activation_with(&mut ctx, xv, &mut |_, _, spec| Ok(spec)).unwrap();
    assert!(ctx.value(y).max_abs_diff(&x) <= 1e-6);
}

/// Scripted branch at T = 8: keep twice the real part, drop the imaginary
/// part. The result is `Re(IDFT(2·Re(DFT(x))))`, evaluated here with direct
/// trigonometric sums.
#[test]
fn scripted_spectral_branch_matches_direct_sums() {
    let (s, store) = spectral(4);
    let t = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = Tensor::new(&[1, t, 1, 4], (0..t * 4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let mut ctx = Ctx::train(&store, 0, 0.0);
    let xv = ctx.constant(x.clone());
    let y = s
        .pre_activation_with(&mut ctx, xv, &mut |ctx: &mut Ctx, part, spec| {
            Ok(match part {
                SpectrumPart::Real => ctx.tape.scale(spec, 2.0),
                SpectrumPart::Imag => ctx.tape.scale(spec, 0.0),
            })
        })
        .unwrap();
    let tau = std::f64::consts::TAU;
    for c in 0..4 {
        let xs: Vec<f64> = (0..t).map(|n| x.data()[n * 4 + c]).collect();
        let re: Vec<f64> = (0..t)
            .map(|k| (0..t).map(|n| xs[n] * (tau * (k * n) as f64 / t as f64).cos()).sum())
            .collect();
        for n in 0..t {
            let want: f64 = (0..t).map(|k| 2.0 * re[k] * (tau * (k * n) as f64 / t as f64).cos()).sum::<f64>() / t as f64;
            let got = ctx.value(y).data()[n * 4 + c];
            assert!((got - want).abs() < 1e-9, "t={n} c={c}: {got} vs {want}");
        }
    }
}

#[test]
fn spectral_needs_four_steps() {
    let (s, store) = spectral(4);
    let mut ctx = Ctx::train(&store, 0, 0.0);
    let x = ctx.constant(Tensor::zeros(&[1, 3, 2, 4]));
    assert!(matches!(s.forward(&mut ctx, x), Err(Error::InvalidInput(_))));
}

fn encoder(joints: usize, seed: u64) -> (SgnEncoder, ParamStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = SgnConfig { in_channels: 3, dim: 8, layers: 2, joints, time: 8 };
    let e = SgnEncoder::new(&mut store, "sgn", cfg, &mut rng).unwrap();
    (e, store)
}

#[test]
fn zero_skeleton_gives_zero_spikes() {
    let (e, store) = encoder(9, 11);
    let mut ctx = Ctx::train(&store, 0, 0.0);
    let x = ctx.constant(Tensor::zeros(&[2, 8, 9, 3]));
    let y = e.forward(&mut ctx, x).unwrap();
    assert_eq!(ctx.value(y).shape(), &[2, 8, 9, 8]);
    assert_eq!(ctx.value(y).sum(), 0.0);
}

fn permute_axis(t: &Tensor, axis: usize, perm: &[usize]) -> Tensor {
    let sh = t.shape();
    let inner: usize = sh[axis + 1..].iter().product();
    let outer: usize = sh[..axis].iter().product();
    let n = sh[axis];
    let mut out = vec![0.0; t.len()];
    for o in 0..outer {
        for (dst, &src) in perm.iter().enumerate() {
            let from = (o * n + src) * inner;
            let to = (o * n + dst) * inner;
            out[to..to + inner].copy_from_slice(&t.data()[from..from + inner]);
        }
    }
    Tensor::new(sh, out).unwrap()
}

#[test]
fn joint_permutation_is_equivariant() {
    let v = 9;
    let perm = [4, 0, 7, 2, 8, 1, 6, 3, 5];
    let (e, store) = encoder(v, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = Tensor::new(&[2, 8, v, 3], (0..2 * 8 * v * 3).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();

    let mut ctx = Ctx::train(&store, 0, 0.0);
    let xv = ctx.constant(x.clone());
    let y = e.forward(&mut ctx, xv).unwrap();
    let expected = permute_axis(ctx.value(y), 2, &perm);

    let mut permuted = store.clone();
    for l in &e.layers {
        let a = store.get(l.adjacency);
        let rows = permute_axis(a, 0, &perm);
        permuted.set(l.adjacency, permute_axis(&rows, 1, &perm)).unwrap();
    }
    permuted.set(e.spe, permute_axis(store.get(e.spe), 1, &perm)).unwrap();
    let mut ctx = Ctx::train(&permuted, 0, 0.0);
    let xv = ctx.constant(permute_axis(&x, 2, &perm));
    let y = e.forward(&mut ctx, xv).unwrap();
    assert!(ctx.value(y).max_abs_diff(&expected) == 0.0);
}

#[test]
fn graph_weights_receive_gradient() {
    let (e, store) = encoder(9, 14);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = Tensor::new(&[4, 8, 9, 3], (0..4 * 8 * 9 * 3).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let mut ctx = Ctx::train(&store, 0, 0.0);
    let xv = ctx.constant(x);
    let y = e.forward(&mut ctx, xv).unwrap();
    let loss = ctx.tape.mean_all(y);
    ctx.tape.backward(loss).unwrap();
    let grads = ctx.param_grads();
    for l in &e.layers {
        let g = &grads.iter().find(|(id, _)| *id == l.gc.w).expect("graph weight is bound").1;
        assert!(g.max_abs() > 0.0, "dead graph-convolution path in {}", l.name);
    }
}
