use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::models::{ModelBundle, ModelDims};
use crate::world::rng::seeded;
use crate::world::{build_benchmark, build_benchmark_with, generate_scenes, SuiteKind};

/// Fresh Gaussian vector for every embedding request.
struct RandomStub {
    rng: RefCell<ChaCha8Rng>,
    dim: usize,
}

impl RandomStub {
    fn new(seed: u64) -> Self {
        Self {
            rng: RefCell::new(seeded(seed, 0x57)),
            dim: 16,
        }
    }

    fn draw(&self, n: usize) -> Vec<Vec<f64>> {
        let mut rng = self.rng.borrow_mut();
        (0..n)
            .map(|_| (0..self.dim).map(|_| StandardNormal.sample(&mut *rng)).collect())
            .collect()
    }
}

impl Embedder for RandomStub {
    fn embed_texts(&self, texts: &[&[TokenId]]) -> Result<Vec<Vec<f64>>> {
        Ok(self.draw(texts.len()))
    }
    fn embed_images(&self, images: &[&[TokenId]]) -> Result<Vec<Vec<f64>>> {
        Ok(self.draw(images.len()))
    }
}

/// Same vector for everything, or a distinct basis vector per request.
struct FixedStub {
    orthogonal: bool,
    next: RefCell<usize>,
}

impl FixedStub {
    fn vecs(&self, n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let mut v = vec![0.0; 4096];
                if self.orthogonal {
                    let mut k = self.next.borrow_mut();
                    v[*k] = 1.0;
                    *k += 1;
                } else {
                    v[0] = 1.0;
                }
                v
            })
            .collect()
    }
}

impl Embedder for FixedStub {
    fn embed_texts(&self, texts: &[&[TokenId]]) -> Result<Vec<Vec<f64>>> {
        Ok(self.vecs(texts.len()))
    }
    fn embed_images(&self, images: &[&[TokenId]]) -> Result<Vec<Vec<f64>>> {
        Ok(self.vecs(images.len()))
    }
}

/// Multiplies another embedder's output by a constant.
struct Scaled<'a, E>(&'a E, f64);

impl<E: Embedder> Embedder for Scaled<'_, E> {
    fn embed_texts(&self, texts: &[&[TokenId]]) -> Result<Vec<Vec<f64>>> {
        let mut v = self.0.embed_texts(texts)?;
        v.iter_mut().flatten().for_each(|x| *x *= self.1);
        Ok(v)
    }
    fn embed_images(&self, images: &[&[TokenId]]) -> Result<Vec<Vec<f64>>> {
        let mut v = self.0.embed_images(images)?;
        v.iter_mut().flatten().for_each(|x| *x *= self.1);
        Ok(v)
    }
}

fn three_sigma(p: f64, n: usize) -> f64 {
    3.0 * libm::sqrt(p * (1.0 - p) / n as f64)
}

#[test]
fn verdict_examples() {
    assert_eq!(single_correct(0.9, &[0.7, 0.1]), Some(true));
    assert_eq!(single_correct(0.7, &[0.7]), Some(false));
    assert_eq!(single_correct(0.7, &[]), None);
    assert_eq!(itt_correct(&[0.9, 0.8], &[0.7]), Some(true));
    assert_eq!(itt_correct(&[0.9, 0.6], &[0.7]), Some(false));
    assert_eq!(tot_correct(0.95, &[vec![0.9, 0.2], vec![0.9, 0.5]]), Some(true));
    assert_eq!(tot_correct(0.8, &[vec![0.85], vec![0.1]]), Some(false));
    assert_eq!(tot_correct(0.8, &[vec![0.8], vec![0.1]]), Some(false));
}

#[test]
fn items_without_negatives_are_rejected() {
    let scenes = generate_scenes(5, 1);
    let mut items = build_benchmark(SuiteKind::Swap, &scenes, 1).unwrap();
    items[0].negatives.clear();
    assert!(rank_items(&RandomStub::new(0), &items).is_err());
    assert!(RankingResult::from_sims(0, "x", vec![0.1], vec![], None, vec![]).is_err());
}

#[test]
fn single_positive_chance_level() {
    let scenes = generate_scenes(2600, 2);
    let mut items = build_benchmark(SuiteKind::Replace, &scenes, 2).unwrap();
    items.truncate(2000);
    assert_eq!(items.len(), 2000);
    let acc = single_positive_accuracy(&RandomStub::new(1), &items).unwrap();
    assert!((acc - 0.5).abs() <= three_sigma(0.5, 2000), "{acc}");
    assert!(itt_accuracy(&RandomStub::new(1), &items).is_err());
}

#[test]
fn itt_chance_level() {
    let scenes = generate_scenes(2000, 3);
    let items = build_benchmark(SuiteKind::Paraphrase, &scenes, 3).unwrap();
    assert!(items.iter().all(|i| i.positives.len() == 2 && i.negatives.len() == 3));
    // both positives on top among 5 exchangeable scores: 2! 3! / 5!
    let p = 2.0 * 6.0 / 120.0;
    let acc = itt_accuracy(&RandomStub::new(2), &items).unwrap();
    assert!((acc - p).abs() <= three_sigma(p, items.len()), "{acc}");
}

#[test]
fn tot_chance_level() {
    let scenes = generate_scenes(2000, 4);
    let items = build_benchmark_with(SuiteKind::Paraphrase, &scenes, 4, 1).unwrap();
    let acc = tot_accuracy(&RandomStub::new(3), &items).unwrap();
    let p = 1.0 / 3.0;
    assert!((acc - p).abs() <= three_sigma(p, items.len()), "{acc}");
}

#[test]
fn retrieval_examples() {
    assert_eq!(recall_at_1(&[vec![0.3]]).unwrap(), (1.0, 1.0));
    // duplicated caption: columns 0 and 1 tie for image 0
    let sims = vec![vec![0.9, 0.9], vec![0.1, 0.8]];
    let (i2t, t2i) = recall_at_1(&sims).unwrap();
    assert_eq!(i2t, 0.5);
    assert_eq!(t2i, 0.5);
    assert!(recall_at_1(&[vec![0.1, 0.2]]).is_err());

    let stub = RandomStub::new(9);
    let img = [51u32; 6];
    let cap = [1u32, 2];
    let images: Vec<&[TokenId]> = vec![&img; 100];
    let caps: Vec<&[TokenId]> = vec![&cap; 100];
    let trials = 60;
    let mut total = 0.0;
    for _ in 0..trials {
        let (a, b) = retrieval_accuracy(&stub, &images, &caps).unwrap();
        total += a + b;
    }
    let mean = total / (2 * trials) as f64;
    assert!((mean - 0.01).abs() <= three_sigma(0.01, 100 * 2 * trials), "{mean}");
}

#[test]
fn pair_similarity_stubs_and_oracle() {
    let scenes = generate_scenes(50, 5);
    let items = build_benchmark(SuiteKind::Paraphrase, &scenes, 5).unwrap();
    let same = FixedStub {
        orthogonal: false,
        next: RefCell::new(0),
    };
    let t = track_pair_similarity(&same, &items, 3).unwrap();
    assert_eq!((t.epoch, t.pos_pos, t.pos1_neg, t.pos2_neg), (3, 1.0, 1.0, 1.0));
    let orth = FixedStub {
        orthogonal: true,
        next: RefCell::new(0),
    };
    let t = track_pair_similarity(&orth, &items, 0).unwrap();
    assert_eq!((t.pos_pos, t.pos1_neg, t.pos2_neg), (0.0, 0.0, 0.0));

    let model = ModelBundle::new(ModelDims::default(), 4, true);
    let t = track_pair_similarity(&model, &items, 0).unwrap();
    // independent per-item recomputation
    let (mut pp, mut p1, mut p2) = (0.0, 0.0, 0.0);
    for it in &items {
        let e = ModelBundle::embed_texts(&model, &[&it.positives[0].tokens, &it.positives[1].tokens]).unwrap();
        let negs: Vec<Vec<f64>> = it
            .negatives
            .iter()
            .map(|n| ModelBundle::embed_texts(&model, &[&n.tokens]).unwrap().remove(0))
            .collect();
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        pp += cos(&e[0], &e[1]);
        p1 += negs.iter().map(|n| cos(&e[0], n)).sum::<f64>() / negs.len() as f64;
        p2 += negs.iter().map(|n| cos(&e[1], n)).sum::<f64>() / negs.len() as f64;
    }
    let n = items.len() as f64;
    assert!((t.pos_pos - pp / n).abs() < 1e-12);
    assert!((t.pos1_neg - p1 / n).abs() < 1e-12);
    assert!((t.pos2_neg - p2 / n).abs() < 1e-12);
    assert!(t.pos_pos.abs() <= 1.0 && t.pos1_neg.abs() <= 1.0);
}

#[test]
fn metrics_are_scale_and_permutation_invariant() {
    let model = ModelBundle::new(ModelDims::default(), 7, true);
    let before = model.store.digest();
    let scenes = generate_scenes(200, 6);
    for kind in SuiteKind::ALL {
        let items = build_benchmark(kind, &scenes, 6).unwrap();
        let base = rank_items(&model, &items).unwrap();
        let s = summarize(&base).unwrap();
        for c in [1e-3, 7.0] {
            let r = rank_items(&Scaled(&model, c), &items).unwrap();
            let verdicts = |r: &[RankingResult]| {
                r.iter()
                    .map(|x| (x.correct_single, x.correct_itt, x.correct_tot))
                    .collect::<Vec<_>>()
            };
            assert_eq!(verdicts(&r), verdicts(&base));
            assert_eq!(summarize(&r).unwrap(), s);
        }
        let mut shuffled = items.clone();
        shuffled.shuffle(&mut seeded(1, 1));
        let r = rank_items(&model, &shuffled).unwrap();
        assert_eq!(summarize(&r).unwrap(), s);
        if kind == SuiteKind::Paraphrase {
            let a = trace_from_results(&base, 0).unwrap();
            let b = trace_from_results(&r, 0).unwrap();
            assert_eq!(a.pos_pos.to_bits(), b.pos_pos.to_bits());
            assert_eq!(a.pos_neg().to_bits(), b.pos_neg().to_bits());
            let sc = trace_from_results(&rank_items(&Scaled(&model, 7.0), &items).unwrap(), 0).unwrap();
            assert!((sc.pos_pos - a.pos_pos).abs() < 1e-12);
        }
    }
    assert_eq!(model.store.digest(), before);
}

#[test]
fn itt_implies_single_on_either_positive() {
    let model = ModelBundle::new(ModelDims::default(), 8, true);
    let scenes = generate_scenes(300, 8);
    let items = build_benchmark(SuiteKind::Paraphrase, &scenes, 8).unwrap();
    let results = rank_items(&model, &items).unwrap();
    for r in &results {
        if r.correct_itt == Some(true) {
            for p in &r.pos_sims {
                assert_eq!(single_correct(*p, &r.neg_sims), Some(true));
            }
        }
    }
    let s = summarize(&results).unwrap();
    assert!(s.itt.unwrap() <= s.single);
    let by_cat = summarize_by_category(&results);
    assert_eq!(by_cat.len(), 1);
    assert_eq!(by_cat["paraphrase"], s);
}
