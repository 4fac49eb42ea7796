use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use super::vocab::surface_text;
use super::*;

/// Independent grammar parser over surface text. It carries its own word
/// lists and returns the canonical (sorted) pair of readings.
mod oracle {
    use alloc::string::{String, ToString};
    use alloc::vec::Vec;

    const NOUNS: [(&str, &str); 12] = [
        ("cube", "block"), ("ball", "sphere"), ("cone", "funnel"), ("cylinder", "tube"),
        ("ring", "hoop"), ("star", "pentagram"), ("box", "crate"), ("pyramid", "tetrahedron"),
        ("disk", "plate"), ("cup", "mug"), ("bottle", "flask"), ("chair", "seat"),
    ];
    const ADJS: [(&str, &str); 8] = [
        ("red", "crimson"), ("blue", "azure"), ("green", "emerald"), ("yellow", "golden"),
        ("black", "ebony"), ("white", "ivory"), ("purple", "violet"), ("orange", "amber"),
    ];

    fn base(word: &str, table: &[(&str, &str)]) -> Option<String> {
        table
            .iter()
            .find(|(b, s)| *b == word || *s == word)
            .map(|(b, _)| b.to_string())
    }

    fn invert(rel: &str) -> &str {
        match rel {
            "left-of" => "right-of",
            "right-of" => "left-of",
            "above" => "below",
            "below" => "above",
            other => other,
        }
    }

    pub type Reading = (String, String, String, String, String);

    /// Canonical reading of a caption, or `None` if it is not grammatical.
    pub fn parse(text: &str) -> Option<Reading> {
        let w: Vec<&str> = text.split(' ').collect();
        if w.len() != 8 || w[0] != "the" || w[3] != "is" || w[5] != "the" {
            return None;
        }
        let rels = ["left-of", "right-of", "above", "below", "near", "far-from"];
        if !rels.contains(&w[4]) {
            return None;
        }
        let a1 = base(w[1], &ADJS)?;
        let n1 = base(w[2], &NOUNS)?;
        let a2 = base(w[6], &ADJS)?;
        let n2 = base(w[7], &NOUNS)?;
        if n1 == n2 {
            return None;
        }
        let fwd = (a1.clone(), n1.clone(), w[4].to_string(), a2.clone(), n2.clone());
        let inv = (a2, n2, invert(w[4]).to_string(), a1, n1);
        Some(if fwd <= inv { fwd } else { inv })
    }

    pub fn scene_reading(attr1: &str, noun1: &str, rel: &str, attr2: &str, noun2: &str) -> Reading {
        parse(&alloc::format!("the {attr1} {noun1} is {rel} the {attr2} {noun2}")).unwrap()
    }
}

fn scene_text(s: &Scene) -> String {
    surface_text(&caption_with_template(s, Template::BASE, Role::Original).tokens)
}

fn reading(s: &Scene) -> oracle::Reading {
    oracle::parse(&scene_text(s)).unwrap()
}

fn text(c: &CaptionRecord) -> String {
    surface_text(&c.tokens)
}

fn red_cube_left_of_blue_ball() -> Scene {
    let red = vocab::Attribute(0);
    let blue = vocab::Attribute(1);
    Scene::new(
        0,
        Object {
            noun: vocab::Noun(0),
            attr: red,
        },
        vocab::Relation(0),
        Object {
            noun: vocab::Noun(1),
            attr: blue,
        },
    )
    .unwrap()
}

#[test]
fn caption_set_contents() {
    let s = red_cube_left_of_blue_ball();
    let set = caption_set(&s);
    let texts: Vec<String> = set.iter().map(text).collect();
    assert!(set.len() >= 4);
    assert_eq!(texts[0], "the red cube is left-of the blue ball");
    assert!(texts.iter().any(|t| t == "the blue ball is right-of the red cube"));
    let unique: BTreeSet<_> = texts.iter().collect();
    assert_eq!(unique.len(), texts.len());
    assert_eq!(
        reading(&s),
        oracle::scene_reading("red", "cube", "left-of", "blue", "ball")
    );
    for c in &set {
        assert_eq!(oracle::parse(&text(c)), Some(reading(&s)));
        assert_eq!(c.tokens.first(), Some(&vocab::BOS));
        assert_eq!(c.tokens.last(), Some(&vocab::EOS));
        assert!(!c.tokens.contains(&vocab::PAD));
        assert_eq!(c.role, Role::Original);
        assert!(c.category.is_none());
    }
}

#[test]
fn caption_sets_round_trip_over_many_scenes() {
    for s in generate_scenes(500, 21) {
        for c in caption_set(&s) {
            assert_eq!(oracle::parse(&text(&c)), Some(reading(&s)), "{}", text(&c));
            let p = parse_caption(&c.tokens).unwrap();
            assert_eq!(p.meaning(), s.meaning());
        }
    }
}

#[test]
fn paraphrase_inversion_example_and_semantics() {
    let s = red_cube_left_of_blue_ball();
    let base = caption_set(&s).swap_remove(0);
    let mut seen = BTreeSet::new();
    for seed in 0..400 {
        let p = make_paraphrase(&base, seed).unwrap();
        assert_eq!(p.role, Role::Paraphrase);
        assert_ne!(p.tokens, base.tokens);
        assert_eq!(oracle::parse(&text(&p)), Some(reading(&s)));
        assert!(word_distance(&p.tokens, &base.tokens) >= 1);
        seen.insert(text(&p));
    }
    assert!(seen.contains("the blue ball is right-of the red cube"));
    // 31 non-identity rewordings exist
    assert_eq!(seen.len(), 31);
}

#[test]
fn paraphrase_is_deterministic_and_rejects_negatives() {
    let s = red_cube_left_of_blue_ball();
    let base = caption_set(&s).swap_remove(0);
    assert_eq!(make_paraphrase(&base, 5).unwrap(), make_paraphrase(&base, 5).unwrap());
    let neg = make_hard_negatives(&base, &s, 1, 0).unwrap().swap_remove(0);
    assert!(make_paraphrase(&neg, 0).is_err());
}

#[test]
fn paraphrases_round_trip_over_many_scenes() {
    for (i, s) in generate_scenes(300, 22).iter().enumerate() {
        for c in caption_set(s) {
            let p = make_paraphrase(&c, i as u64).unwrap();
            assert_ne!(p.tokens, c.tokens);
            assert_eq!(oracle::parse(&text(&p)), Some(reading(s)));
        }
    }
}

#[test]
fn swap_negative_examples() {
    let s = red_cube_left_of_blue_ball();
    let base = caption_set(&s).swap_remove(0);
    let so = make_negative_of(&base, &s, NegCategory::SwapObject, 0).unwrap().unwrap();
    assert_eq!(text(&so), "the red ball is left-of the blue cube");
    let sa = make_negative_of(&base, &s, NegCategory::SwapAttribute, 0).unwrap().unwrap();
    assert_eq!(text(&sa), "the blue cube is left-of the red ball");
    assert_eq!(so.role, Role::HardNegative);
    assert_eq!(so.category, Some(NegCategory::SwapObject));
}

#[test]
fn negatives_are_close_and_wrong() {
    for (i, s) in generate_scenes(400, 23).iter().enumerate() {
        for c in caption_set(s) {
            let negs = make_hard_negatives(&c, s, 3, i as u64).unwrap();
            assert_eq!(negs.len(), 3);
            let cats: BTreeSet<_> = negs.iter().map(|n| n.category.unwrap()).collect();
            assert_eq!(cats.len(), 3, "categories drawn without replacement");
            for n in &negs {
                let r = oracle::parse(&text(n)).expect("negative must be grammatical");
                assert_ne!(r, reading(s), "{}", text(n));
                let d = word_distance(&n.tokens, &c.tokens);
                assert!((1..=2).contains(&d));
            }
        }
    }
}

#[test]
fn negatives_deterministic_and_guarded() {
    let s = red_cube_left_of_blue_ball();
    let base = caption_set(&s).swap_remove(0);
    assert_eq!(
        make_hard_negatives(&base, &s, 3, 9).unwrap(),
        make_hard_negatives(&base, &s, 3, 9).unwrap()
    );
    assert!(make_hard_negatives(&base, &s, 6, 9).is_err());
    assert!(make_hard_negatives(&base, &s, 0, 9).is_err());

    // equal attributes: swapping them changes nothing, so only 4 apply
    let same_attr = Scene {
        second: Object {
            attr: s.first.attr,
            ..s.second
        },
        ..s
    };
    let c = caption_set(&same_attr).swap_remove(0);
    let cats = available_categories(&c, &same_attr).unwrap();
    assert!(!cats.contains(&NegCategory::SwapAttribute));
    assert_eq!(cats.len(), 4);
    assert!(make_hard_negatives(&c, &same_attr, 5, 0).is_err());
}

#[test]
fn all_categories_reachable() {
    let mut seen = BTreeSet::new();
    for (i, s) in generate_scenes(1000, 24).iter().enumerate() {
        let c = caption_set(s).swap_remove(0);
        for n in make_hard_negatives(&c, s, 3, i as u64).unwrap() {
            seen.insert(n.category.unwrap());
        }
    }
    assert_eq!(seen.len(), 5);
}

#[test]
fn swap_suite_items() {
    let (_, eval) = split_scenes(100, 200, 3).unwrap();
    let items = build_benchmark(SuiteKind::Swap, &eval, 1).unwrap();
    assert!(items.len() >= 190);
    for it in &items {
        assert_eq!(it.positives.len(), 1);
        assert_eq!(it.negatives.len(), 1);
        let (p, n) = (&it.positives[0], &it.negatives[0]);
        assert!(it.category.unwrap().is_swap());
        assert_eq!(word_distance(&p.tokens, &n.tokens), 2);
        let mut a = p.tokens.clone();
        let mut b = n.tokens.clone();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b, "a swap keeps the bag of words");
        assert_ne!(oracle::parse(&text(p)), oracle::parse(&text(n)));
    }
    assert_eq!(items, build_benchmark(SuiteKind::Swap, &eval, 1).unwrap());
}

#[test]
fn replace_and_paraphrase_suites() {
    let (_, eval) = split_scenes(100, 200, 3).unwrap();
    let rep = build_benchmark(SuiteKind::Replace, &eval, 2).unwrap();
    assert_eq!(rep.len(), 200);
    for it in &rep {
        assert!(!it.category.unwrap().is_swap());
        assert_eq!(word_distance(&it.positives[0].tokens, &it.negatives[0].tokens), 1);
    }
    let para = build_benchmark(SuiteKind::Paraphrase, &eval, 2).unwrap();
    assert_eq!(para.len(), 200);
    let by_id: alloc::collections::BTreeMap<u64, &Scene> = eval.iter().map(|s| (s.id, s)).collect();
    for it in &para {
        let scene = by_id[&it.image.scene_id];
        assert_eq!(it.positives.len(), 2);
        assert_eq!(it.negatives.len(), PARAPHRASE_SUITE_NEGATIVES);
        for p in &it.positives {
            assert_eq!(oracle::parse(&text(p)), Some(reading(scene)));
        }
        assert_ne!(it.positives[0].tokens, it.positives[1].tokens);
        for n in &it.negatives {
            assert_ne!(oracle::parse(&text(n)), Some(reading(scene)));
        }
    }
    assert!(build_benchmark(SuiteKind::Paraphrase, &[], 2).is_err());
}

fn paraphrase_records(n: usize) -> (Vec<Scene>, Vec<CaptionRecord>) {
    let scenes = generate_scenes(n, 31);
    let mut recs = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        let base = caption_set(s).swap_remove(0);
        recs.push(make_paraphrase(&base, i as u64).unwrap());
        recs.push(base);
    }
    (scenes, recs)
}

#[test]
fn noise_fraction_zero_is_identity() {
    let (_, recs) = paraphrase_records(50);
    assert_eq!(inject_paraphrase_noise(&recs, 0.0, 1).unwrap(), recs);
}

#[test]
fn noise_fraction_one_replaces_everything() {
    let (scenes, recs) = paraphrase_records(200);
    let out = inject_paraphrase_noise(&recs, 1.0, 1).unwrap();
    for r in out.iter().filter(|r| r.role == Role::Paraphrase) {
        let s = &scenes[r.scene_id as usize];
        assert_ne!(oracle::parse(&text(r)), Some(reading(s)));
    }
}

#[test]
fn noise_count_is_exact() {
    let (scenes, recs) = paraphrase_records(1000);
    let out = inject_paraphrase_noise(&recs, 0.1, 5).unwrap();
    let replaced = out
        .iter()
        .filter(|r| r.role == Role::Paraphrase)
        .filter(|r| oracle::parse(&text(r)) != Some(reading(&scenes[r.scene_id as usize])))
        .count();
    assert_eq!(replaced, 100);
    assert_eq!(out, inject_paraphrase_noise(&recs, 0.1, 5).unwrap());
    assert!(inject_paraphrase_noise(&recs, 1.5, 5).is_err());
}

#[test]
fn dataset_build_is_deterministic() {
    let scenes = generate_scenes(50, 3);
    let a = Dataset::build(&scenes, 3, 11).unwrap();
    let b = Dataset::build(&scenes, 3, 11).unwrap();
    assert_eq!(a, b);
    for e in &a.entries {
        assert_eq!(e.paraphrases.len(), e.captions.len());
        assert!(e.paraphrases.iter().all(|p| p.len() == 3));
        assert!(e.negatives.iter().all(|n| n.len() >= 3));
    }
    let mut noisy = a.clone();
    noisy.apply_paraphrase_noise(0.2, 1).unwrap();
    let total: usize = a.entries.iter().map(|e| e.paraphrases.iter().map(Vec::len).sum::<usize>()).sum();
    let changed: usize = a
        .entries
        .iter()
        .zip(&noisy.entries)
        .map(|(x, y)| {
            x.paraphrases
                .iter()
                .flatten()
                .zip(y.paraphrases.iter().flatten())
                .filter(|(p, q)| p != q)
                .count()
        })
        .sum();
    assert_eq!(changed, libm::round(0.2 * total as f64) as usize);
}
