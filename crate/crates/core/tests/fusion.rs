use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikefuse::ctx::{Ctx, ParamStore};
use spikefuse::fusion::{direct_addition, pad_tokens, Align, CrossMamba};
use spikefuse::tensor::Tensor;

const SHAPE: [usize; 4] = [2, 4, 5, 8];

fn spikes(rng: &mut ChaCha8Rng, shape: &[usize], p: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| if rng.random::<f64>() < p { 1.0 } else { 0.0 }).collect()).unwrap()
}

fn fusion(seed: u64) -> (CrossMamba, ParamStore, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let f = CrossMamba::new(&mut store, "fuse", 8, 3, &mut rng).unwrap();
    (f, store, rng)
}

#[test]
fn interaction_matches_token_affinity_loops() {
    let (f, store, mut rng) = fusion(1);
    let (s, e) = (spikes(&mut rng, &SHAPE, 0.5), spikes(&mut rng, &SHAPE, 0.5));
    let mut ctx = Ctx::train(&store, 0, 0.0);
    let (sv, ev) = (ctx.constant(s), ctx.constant(e));
    let p = f.forward_parts(&mut ctx, sv, ev).unwrap();
    let (g, y, z) = (ctx.value(p.gate), ctx.value(p.state), ctx.value(p.interaction));
    assert!(g.is_binary());
    assert!(g.sum() > 0.0, "gate never fired; the check would be vacuous");
    let [b, t, v, c] = SHAPE;
    let at = |x: &Tensor, bi: usize, ti: usize, vi: usize, ci: usize| x.data()[((bi * t + ti) * v + vi) * c + ci];
    for bi in 0..b {
        for ti in 0..t {
            for vi in 0..v {
                for ci in 0..c {
                    let mut want = 0.0;
                    for u in 0..v {
                        let aff: f64 = (0..c).map(|q| at(g, bi, ti, vi, q) * at(g, bi, ti, u, q)).sum();
                        want += aff * at(y, bi, ti, u, ci);
                    }
                    want /= v as f64;
                    assert!((at(z, bi, ti, vi, ci) - want).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn output_is_or_of_event_stream_and_projection() {
    let (f, store, mut rng) = fusion(2);
    let (s, e) = (spikes(&mut rng, &SHAPE, 0.5), spikes(&mut rng, &SHAPE, 0.3));
    let mut ctx = Ctx::train(&store, 0, 0.0);
    let (sv, ev) = (ctx.constant(s), ctx.constant(e.clone()));
    let p = f.forward_parts(&mut ctx, sv, ev).unwrap();
    let (proj, out) = (ctx.value(p.projected), ctx.value(p.out));
    for i in 0..e.len() {
        let want = if e.data()[i] + proj.data()[i] >= 1.0 { 1.0 } else { 0.0 };
        assert_eq!(out.data()[i], want);
    }
}

#[test]
fn silent_skeleton_gives_no_interaction() {
    let (f, store, mut rng) = fusion(3);
    let e = spikes(&mut rng, &SHAPE, 0.5);
    let mut ctx = Ctx::train(&store, 0, 0.0);
    let (sv, ev) = (ctx.constant(Tensor::zeros(&SHAPE)), ctx.constant(e));
    let p = f.forward_parts(&mut ctx, sv, ev).unwrap();
    assert_eq!(ctx.value(p.gate).sum(), 0.0);
    assert_eq!(ctx.value(p.interaction).max_abs(), 0.0);
}

#[test]
fn silent_event_stream_gives_no_interaction() {
    let (f, store, mut rng) = fusion(4);
    let s = spikes(&mut rng, &SHAPE, 0.5);
    let mut ctx = Ctx::train(&store, 0, 0.0);
    let (sv, ev) = (ctx.constant(s), ctx.constant(Tensor::zeros(&SHAPE)));
    let p = f.forward_parts(&mut ctx, sv, ev).unwrap();
    assert_eq!(ctx.value(p.state).max_abs(), 0.0);
    assert_eq!(ctx.value(p.interaction).max_abs(), 0.0);
}

#[test]
fn roles_are_not_interchangeable() {
    let (f, store, mut rng) = fusion(5);
    let (s, e) = (spikes(&mut rng, &SHAPE, 0.5), spikes(&mut rng, &SHAPE, 0.2));
    let run = |a: &Tensor, b: &Tensor| {
        let mut ctx = Ctx::train(&store, 0, 0.0);
        let (av, bv) = (ctx.constant(a.clone()), ctx.constant(b.clone()));
        let y = f.forward(&mut ctx, av, bv).unwrap();
        ctx.value(y).clone()
    };
    assert_ne!(run(&s, &e), run(&e, &s));
}

#[test]
fn mismatched_inputs_are_rejected() {
    let (f, store, _) = fusion(6);
    let mut ctx = Ctx::train(&store, 0, 0.0);
    let a = ctx.constant(Tensor::zeros(&SHAPE));
    let b = ctx.constant(Tensor::zeros(&[2, 4, 6, 8]));
    assert!(f.forward(&mut ctx, a, b).is_err());
    assert!(direct_addition(&mut ctx, a, b).is_err());
}

#[test]
fn padding_appends_zero_tokens_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = spikes(&mut rng, &[2, 3, 4, 5], 0.5);
    let store = ParamStore::new();
    let mut ctx = Ctx::eval(&store);
    let xv = ctx.constant(x.clone());
    let y = pad_tokens(&mut ctx, xv, 7).unwrap();
    let y = ctx.value(y);
    assert_eq!(y.shape(), &[2, 3, 7, 5]);
    for bt in 0..6 {
        for v in 0..7 {
            for c in 0..5 {
                let got = y.data()[(bt * 7 + v) * 5 + c];
                let want = if v < 4 { x.data()[(bt * 4 + v) * 5 + c] } else { 0.0 };
                assert_eq!(got, want);
            }
        }
    }
    assert_eq!(y.sum(), x.sum());
    assert!(pad_tokens(&mut ctx, xv, 3).is_err());
}

#[test]
fn alignment_pads_to_the_larger_token_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let align = Align::new(&mut store, "align", 8, &mut rng).unwrap();
    let s = spikes(&mut rng, &[2, 4, 9, 8], 0.5);
    let e = spikes(&mut rng, &[2, 4, 6, 8], 0.5);
    let mut ctx = Ctx::train(&store, 0, 0.0);
    let (sv, ev) = (ctx.constant(s), ctx.constant(e));
    let (a, b) = align.forward(&mut ctx, sv, ev).unwrap();
    assert_eq!(ctx.value(a).shape(), &[2, 4, 9, 8]);
    assert_eq!(ctx.value(b).shape(), &[2, 4, 9, 8]);
    let b = ctx.value(b);
    for bt in 0..8 {
        assert!(b.data()[(bt * 9 + 6) * 8..(bt + 1) * 9 * 8].iter().all(|&v| v == 0.0), "padding carried spikes");
    }
}

#[test]
fn direct_addition_is_elementwise_or() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (s, e) = (spikes(&mut rng, &SHAPE, 0.5), spikes(&mut rng, &SHAPE, 0.5));
    let store = ParamStore::new();
    let mut ctx = Ctx::eval(&store);
    let (sv, ev) = (ctx.constant(s.clone()), ctx.constant(e.clone()));
    let y = direct_addition(&mut ctx, sv, ev).unwrap();
    for ((&o, &a), &b) in ctx.value(y).data().iter().zip(s.data()).zip(e.data()) {
        assert_eq!(o, a.max(b));
    }
}
