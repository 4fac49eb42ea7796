use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

use super::*;
use crate::models::ModelDims;
use crate::tensor::{grad_check_params, GradCheckConfig, Tensor};
use crate::world::rng::seeded;
use crate::world::vocab::{BOS, EOS};

const E: f64 = core::f64::consts::E;

fn mat(g: &mut Graph, rows: &[&[f64]]) -> Var {
    g.constant(Tensor::from_rows(rows).unwrap())
}

fn inv(g: &mut Graph, tau: f64) -> Var {
    g.constant(Tensor::scalar(1.0 / tau))
}

fn random(rows: usize, d: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::new([rows, d], (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn phi_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![1.0, 0.0]));
    let y = g.constant(Tensor::vector(vec![0.0, 1.0]));
    let one = inv(&mut g, 1.0);
    let p = phi(&mut g, x, x, one).unwrap();
    assert!((g.value(p).item() - E).abs() < 1e-12);
    let t = inv(&mut g, 0.07);
    let p = phi(&mut g, x, y, t).unwrap();
    assert_eq!(g.value(p).item(), 1.0);
    let z = g.constant(Tensor::vector(vec![1.0, libm::sqrt(3.0)]));
    let p = phi(&mut g, x, z, t).unwrap();
    let expect = libm::exp(0.5 / 0.07);
    assert!((g.value(p).item() - expect).abs() / expect < 1e-9);
    // exp(7.1429) is 1265.04 to six figures
    assert!((g.value(p).item() - 1265.04).abs() < 0.01);
    for bad in [0.0, -1.0, f64::INFINITY] {
        let s = g.constant(Tensor::scalar(bad));
        assert!(phi(&mut g, x, y, s).is_err());
    }
}

#[test]
fn contrastive_examples() {
    let mut g = Graph::new();
    let one = inv(&mut g, 1.0);
    let u = mat(&mut g, &[&[0.3, -0.2]]);
    let v = mat(&mut g, &[&[-1.0, 0.5]]);
    let l = contrastive_loss(&mut g, u, v, one).unwrap();
    assert_eq!(g.value(l).item(), 0.0);

    let same = mat(&mut g, &[&[1.0, 2.0][..]; 4]);
    let t = inv(&mut g, 0.07);
    let l = contrastive_loss(&mut g, same, same, t).unwrap();
    assert!((g.value(l).item() - libm::log(4.0)).abs() < 1e-9);

    let d = mat(&mut g, &[&[1.0, 0.0], &[0.0, 1.0]]);
    let l = contrastive_loss(&mut g, d, d, one).unwrap();
    assert!((g.value(l).item() - (libm::log(1.0 + E) - 1.0)).abs() < 1e-9);
    assert!((g.value(l).item() - 0.31326).abs() < 1e-5);

    let short = mat(&mut g, &[&[1.0, 0.0]]);
    assert!(contrastive_loss(&mut g, d, short, one).is_err());
}

#[test]
fn hard_negative_examples() {
    let mut g = Graph::new();
    let one = inv(&mut g, 1.0);
    let d = mat(&mut g, &[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
    let neg = mat(&mut g, &[&[0.0, 0.0, 1.0], &[0.0, 0.0, 2.0]]);
    let l = hard_negative_contrastive_loss(&mut g, d, d, Some(neg), one, false).unwrap();
    let i2t = libm::log(E + 3.0) - 1.0;
    let t2i = libm::log(1.0 + E) - 1.0;
    assert!((i2t - 0.74367).abs() < 1e-5);
    assert!((g.value(l).item() - 0.5 * (i2t + t2i)).abs() < 1e-9);
    assert!((g.value(l).item() - 0.52847).abs() < 1e-5);

    // symmetric variant adds the image's own negative to its text-to-image row
    let l = hard_negative_contrastive_loss(&mut g, d, d, Some(neg), one, true).unwrap();
    let sym = libm::log(E + 2.0) - 1.0;
    assert!((g.value(l).item() - 0.5 * (i2t + sym)).abs() < 1e-9);

    let bad = mat(&mut g, &[&[0.0, 0.0, 1.0], &[0.0, 0.0, 2.0], &[1.0, 1.0, 1.0]]);
    assert!(hard_negative_contrastive_loss(&mut g, d, d, Some(bad), one, false).is_err());
}

#[test]
fn no_negatives_reduces_to_contrastive() {
    let mut rng = seeded(1, 1);
    let mut g = Graph::new();
    let u = g.constant(random(5, 4, &mut rng));
    let v = g.constant(random(5, 4, &mut rng));
    let t = inv(&mut g, 0.2);
    let empty = g.constant(Tensor::zeros([0, 4]));
    let a = contrastive_loss(&mut g, u, v, t).unwrap();
    let b = hard_negative_contrastive_loss(&mut g, u, v, None, t, false).unwrap();
    let c = hard_negative_contrastive_loss(&mut g, u, v, Some(empty), t, true).unwrap();
    assert_eq!(g.value(a).item(), g.value(b).item());
    assert_eq!(g.value(a).item(), g.value(c).item());
}

#[test]
fn loss_grows_with_negative_similarity() {
    let mut rng = seeded(2, 1);
    let u = random(3, 4, &mut rng);
    let v = random(3, 4, &mut rng);
    let neg = random(6, 4, &mut rng);
    let eval = |neg: &Tensor| {
        let mut g = Graph::new();
        let (u, v, n) = (g.constant(u.clone()), g.constant(v.clone()), g.constant(neg.clone()));
        let t = inv(&mut g, 0.1);
        let l = hard_negative_contrastive_loss(&mut g, u, v, Some(n), t, false).unwrap();
        g.value(l).item()
    };
    let base = eval(&neg);
    // move negative 2 of image 1 (row 3) toward image 1
    let mut closer = neg.clone();
    for k in 0..4 {
        let x = closer.data()[3 * 4 + k];
        closer.data_mut()[3 * 4 + k] = 0.5 * x + 0.5 * u.data()[4 + k];
    }
    assert!(eval(&closer) > base);
}

/// Decoder whose logits are `bias` regardless of input.
fn stub_decoder(vocab: usize, bias: Vec<f64>) -> (ParamStore, Decoder) {
    let dims = ModelDims {
        text_vocab: vocab,
        ..ModelDims::default()
    };
    let mut store = ParamStore::new();
    let dec = dims.new_decoder(&mut store, &mut seeded(0, 0));
    store.set_value(dec.head.weight, Tensor::zeros([48, vocab])).unwrap();
    store.set_value(dec.head.bias.unwrap(), Tensor::vector(bias)).unwrap();
    (store, dec)
}

#[test]
fn reconstruction_examples() {
    let (store, dec) = stub_decoder(32, vec![0.0; 32]);
    let y = vec![BOS, 5, 6, 7, 8, EOS];
    let targets = vec![vec![y.clone(), y.clone()]; 3];
    let mut g = Graph::new();
    let h = g.constant(Tensor::filled([3, 48], 0.4));
    let l = token_reconstruction_loss(&mut g, &dec, &store, h, &targets).unwrap();
    assert!((g.value(l).item() - 5.0 * libm::log(32.0)).abs() < 1e-9);
    assert!((g.value(l).item() - 17.329).abs() < 1e-3);

    let mut bias = vec![0.0; 32];
    bias[9] = 1000.0;
    let (store, dec) = stub_decoder(32, bias);
    let h1 = g.constant(Tensor::zeros([1, 48]));
    let l = token_reconstruction_loss(&mut g, &dec, &store, h1, &[vec![vec![BOS, 9, 9, 9]]]).unwrap();
    assert_eq!(g.value(l).item(), 0.0);

    let mut bias = vec![libm::log(0.25 / 30.0); 32];
    bias[7] = libm::log(0.5);
    bias[EOS as usize] = libm::log(0.25);
    let (store, dec) = stub_decoder(32, bias);
    let l = token_reconstruction_loss(&mut g, &dec, &store, h1, &[vec![vec![BOS, 7, EOS]]]).unwrap();
    assert!((g.value(l).item() - 2.0794415416798357).abs() < 1e-9);

    let none: Vec<Vec<Vec<TokenId>>> = vec![vec![]];
    assert!(token_reconstruction_loss(&mut g, &dec, &store, h1, &none).is_err());
}

#[test]
fn alignment_examples() {
    let mut g = Graph::new();
    let one = inv(&mut g, 1.0);
    let a = mat(&mut g, &[&[1.0, 3.0]]);
    let b = mat(&mut g, &[&[-2.0, 1.0]]);
    let l = sentence_alignment_loss(&mut g, a, b, one).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    let same = mat(&mut g, &[&[0.5, 0.5][..]; 4]);
    let l = sentence_alignment_loss(&mut g, same, same, one).unwrap();
    assert!((g.value(l).item() - libm::log(4.0)).abs() < 1e-9);
    let d = mat(&mut g, &[&[1.0, 0.0], &[0.0, 1.0]]);
    let l = sentence_alignment_loss(&mut g, d, d, one).unwrap();
    assert!((g.value(l).item() - 0.31326).abs() < 1e-5);
}

#[test]
fn read_loss_examples() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::scalar(0.5));
    let r = g.constant(Tensor::scalar(2.0));
    let a = g.constant(Tensor::scalar(1.0));
    let l = read_loss(&mut g, c, Some(r), Some(a), LossWeights::default()).unwrap();
    assert!((g.value(l).item() - 1.2).abs() < 1e-12);
    let l = read_loss(&mut g, c, Some(r), Some(a), LossWeights { alpha: 0.0, beta: 0.0 }).unwrap();
    assert_eq!(g.value(l).item(), 0.5);
    assert!(read_loss(&mut g, c, Some(r), None, LossWeights { alpha: -0.1, beta: 0.5 }).is_err());
    assert!(LossWeights::new(0.1, -1.0).is_err());
    assert!(LossWeights::new(f64::NAN, 0.0).is_err());
    assert_eq!(LossWeights::default(), LossWeights::new(0.1, 0.5).unwrap());
}

struct Batch {
    u: Tensor,
    v: Tensor,
    neg: Tensor,
    para: Tensor,
    targets: Vec<Vec<Vec<TokenId>>>,
    h: Tensor,
}

fn random_batch(b: usize, m: usize, seed: u64) -> Batch {
    let mut rng = seeded(seed, 5);
    let targets = (0..b)
        .map(|_| {
            let len = rng.gen_range(1..6);
            let mut y = vec![BOS];
            y.extend((0..len).map(|_| rng.gen_range(3..51)));
            y.push(EOS);
            vec![y]
        })
        .collect();
    Batch {
        u: random(b, 8, &mut rng),
        v: random(b, 8, &mut rng),
        neg: random(b * m, 8, &mut rng),
        para: random(b, 8, &mut rng),
        targets,
        h: random(b, 48, &mut rng),
    }
}

fn permute_rows(t: &Tensor, perm: &[usize], block: usize) -> Tensor {
    let d = t.shape()[1];
    let mut data = Vec::with_capacity(t.len());
    for p in perm {
        data.extend_from_slice(&t.data()[p * block * d..(p + 1) * block * d]);
    }
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

fn all_losses(batch: &Batch, dec: &(ParamStore, Decoder), scale: f64) -> [f64; 5] {
    let mut g = Graph::new();
    let s = |t: &Tensor| {
        let mut t = t.clone();
        t.data_mut().iter_mut().for_each(|x| *x *= scale);
        t
    };
    let u = g.constant(s(&batch.u));
    let v = g.constant(s(&batch.v));
    let n = g.constant(s(&batch.neg));
    let p = g.constant(s(&batch.para));
    let h = g.constant(batch.h.clone());
    let t = inv(&mut g, 0.05);
    let c = contrastive_loss(&mut g, u, v, t).unwrap();
    let hn = hard_negative_contrastive_loss(&mut g, u, v, Some(n), t, false).unwrap();
    let r = token_reconstruction_loss(&mut g, &dec.1, &dec.0, h, &batch.targets).unwrap();
    let a = sentence_alignment_loss(&mut g, v, p, t).unwrap();
    let total = read_loss(&mut g, hn, Some(r), Some(a), LossWeights::default()).unwrap();
    [c, hn, r, a, total].map(|x| g.value(x).item())
}

fn trained_like_decoder() -> (ParamStore, Decoder) {
    let mut store = ParamStore::new();
    let dec = ModelDims::default().new_decoder(&mut store, &mut seeded(3, 3));
    (store, dec)
}

#[test]
fn losses_are_permutation_invariant_bitwise() {
    let dec = trained_like_decoder();
    for seed in 0..5 {
        let (b, m) = (7, 3);
        let batch = random_batch(b, m, seed);
        let base = all_losses(&batch, &dec, 1.0);
        let mut perm: Vec<usize> = (0..b).collect();
        perm.shuffle(&mut seeded(seed, 9));
        let permuted = Batch {
            u: permute_rows(&batch.u, &perm, 1),
            v: permute_rows(&batch.v, &perm, 1),
            neg: permute_rows(&batch.neg, &perm, m),
            para: permute_rows(&batch.para, &perm, 1),
            targets: perm.iter().map(|p| batch.targets[*p].clone()).collect(),
            h: permute_rows(&batch.h, &perm, 1),
        };
        let other = all_losses(&permuted, &dec, 1.0);
        for (x, y) in base.iter().zip(&other) {
            assert_eq!(x.to_bits(), y.to_bits(), "seed {seed}: {base:?} vs {other:?}");
        }
    }
}

#[test]
fn losses_are_scale_invariant() {
    let dec = trained_like_decoder();
    let batch = random_batch(6, 2, 11);
    let base = all_losses(&batch, &dec, 1.0);
    for c in [0.01, 3.7, 250.0] {
        let scaled = all_losses(&batch, &dec, c);
        for (x, y) in base.iter().zip(&scaled) {
            assert!((x - y).abs() < 1e-12 * x.abs().max(1.0), "c={c}: {x} vs {y}");
        }
    }
}

#[test]
fn full_objective_gradient_matches_finite_differences() {
    let dec = trained_like_decoder();
    let batch = random_batch(2, 1, 4);
    let mut store = dec.0.clone();
    let u = store.insert("u", batch.u.clone());
    let v = store.insert("v", batch.v.clone());
    let n = store.insert("neg", batch.neg.clone());
    let p = store.insert("para", batch.para.clone());
    let h = store.insert("h", batch.h.clone());
    let s = store.insert("log_scale", Tensor::scalar(1.2));
    for id in dec.1.ids() {
        store.set_requires_grad(id, false);
    }
    let mut coords = Vec::new();
    for id in [u, v, n, p, s] {
        coords.extend((0..store.value(id).len()).map(|i| (id, i)));
    }
    coords.extend((0..48).step_by(5).map(|i| (h, i)));
    let weights = LossWeights::default();
    let build = |g: &mut Graph, st: &ParamStore| {
        let (uu, vv, nn, pp, hh) = (g.param(st, u), g.param(st, v), g.param(st, n), g.param(st, p), g.param(st, h));
        let ss = g.param(st, s);
        let t = g.exp(ss)?;
        let c = hard_negative_contrastive_loss(g, uu, vv, Some(nn), t, false)?;
        let r = token_reconstruction_loss(g, &dec.1, st, hh, &batch.targets)?;
        let a = sentence_alignment_loss(g, vv, pp, t)?;
        read_loss(g, c, Some(r), Some(a), weights)
    };
    let report = grad_check_params(build, &store, &coords, GradCheckConfig::default()).unwrap();
    assert!(report.passed, "{report:?}");

    // the gradient of the sum is the weighted sum of component gradients
    let component_grad = |which: usize| {
        let mut st = store.clone();
        st.zero_grad();
        let mut g = Graph::new();
        let (uu, vv, nn, pp, hh) = (g.param(&st, u), g.param(&st, v), g.param(&st, n), g.param(&st, p), g.param(&st, h));
        let ss = g.param(&st, s);
        let t = g.exp(ss).unwrap();
        let c = hard_negative_contrastive_loss(&mut g, uu, vv, Some(nn), t, false).unwrap();
        let r = token_reconstruction_loss(&mut g, &dec.1, &st, hh, &batch.targets).unwrap();
        let a = sentence_alignment_loss(&mut g, vv, pp, t).unwrap();
        let root = match which {
            0 => c,
            1 => r,
            2 => a,
            _ => read_loss(&mut g, c, Some(r), Some(a), weights).unwrap(),
        };
        g.backward(root, &mut st).unwrap();
        [u, v, n, p, h, s]
            .iter()
            .flat_map(|id| st.grad(*id).data().to_vec())
            .collect::<Vec<f64>>()
    };
    let (gc, gr, ga, gt) = (component_grad(0), component_grad(1), component_grad(2), component_grad(3));
    for i in 0..gt.len() {
        let expect = gc[i] + 0.1 * gr[i] + 0.5 * ga[i];
        assert!((gt[i] - expect).abs() < 1e-12 * expect.abs().max(1.0));
    }
}

proptest! {
    #[test]
    fn contrastive_terms_respect_softmax_bounds(
        seed in 0u64..10_000,
        b in 1usize..6,
        m in 0usize..4,
        tau in 0.01f64..1.0,
    ) {
        let batch = random_batch(b, m, seed);
        let mut g = Graph::new();
        let u = g.constant(batch.u.clone());
        let v = g.constant(batch.v.clone());
        let n = g.constant(batch.neg.clone());
        let p = g.constant(batch.para.clone());
        let t = inv(&mut g, tau);
        let bound = 2.0 / tau + libm::log((b * (1 + m)) as f64);
        let c = hard_negative_contrastive_loss(&mut g, u, v, Some(n), t, false).unwrap();
        let a = sentence_alignment_loss(&mut g, v, p, t).unwrap();
        for x in [g.value(c).item(), g.value(a).item()] {
            prop_assert!(x >= 0.0 && x <= bound, "{x} vs {bound}");
        }
    }
}
