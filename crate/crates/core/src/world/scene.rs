use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use rand::Rng;

use super::rng::seeded;
use super::vocab::{visual, Attribute, Noun, Relation, TokenId, JITTER_COUNT};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Object {
    pub noun: Noun,
    pub attr: Attribute,
}

/// Ground truth for one image: two attributed objects in a spatial relation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Scene {
    pub id: u64,
    pub first: Object,
    pub relation: Relation,
    pub second: Object,
}

/// Order-independent content of a scene: `(a rel b)` and `(b inv(rel) a)`
/// describe the same situation and share one `Meaning`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Meaning {
    pub first: Object,
    pub relation: Relation,
    pub second: Object,
}

impl Meaning {
    pub fn new(first: Object, relation: Relation, second: Object) -> Self {
        let direct = Meaning {
            first,
            relation,
            second,
        };
        let inverted = Meaning {
            first: second,
            relation: relation.inverse(),
            second: first,
        };
        direct.min(inverted)
    }
}

impl Scene {
    pub fn new(id: u64, first: Object, relation: Relation, second: Object) -> Result<Self> {
        if first.noun == second.noun {
            return Err(invalid("scene objects must have distinct nouns"));
        }
        if first.noun.0 as usize >= Noun::COUNT
            || second.noun.0 as usize >= Noun::COUNT
            || first.attr.0 as usize >= Attribute::COUNT
            || second.attr.0 as usize >= Attribute::COUNT
            || relation.0 as usize >= Relation::COUNT
        {
            return Err(invalid("scene component out of vocabulary range"));
        }
        Ok(Self {
            id,
            first,
            relation,
            second,
        })
    }

    pub fn meaning(&self) -> Meaning {
        Meaning::new(self.first, self.relation, self.second)
    }

    pub fn same_meaning(&self, other: &Scene) -> bool {
        self.meaning() == other.meaning()
    }
}

/// Draws `count` scenes uniformly over all valid component tuples.
pub fn generate_scenes(count: usize, seed: u64) -> Vec<Scene> {
    let mut rng = seeded(seed, 0x5ce7e);
    (0..count)
        .map(|i| {
            let n1 = rng.gen_range(0..Noun::COUNT as u8);
            let a1 = rng.gen_range(0..Attribute::COUNT as u8);
            let rel = rng.gen_range(0..Relation::COUNT as u8);
            let mut n2 = rng.gen_range(0..Noun::COUNT as u8 - 1);
            if n2 >= n1 {
                n2 += 1;
            }
            let a2 = rng.gen_range(0..Attribute::COUNT as u8);
            Scene {
                id: i as u64,
                first: Object {
                    noun: Noun(n1),
                    attr: Attribute(a1),
                },
                relation: Relation(rel),
                second: Object {
                    noun: Noun(n2),
                    attr: Attribute(a2),
                },
            }
        })
        .collect()
}

/// Training and held-out scenes with disjoint meanings.
///
/// Held-out scenes are also unique among themselves. Scene ids are
/// `0..train` for training and continue from `train` for held-out scenes.
pub fn split_scenes(train: usize, held_out: usize, seed: u64) -> Result<(Vec<Scene>, Vec<Scene>)> {
    if train == 0 || held_out == 0 {
        return Err(invalid("split sizes must be positive"));
    }
    let train_scenes = generate_scenes(train, seed);
    let mut taken: BTreeSet<Meaning> = train_scenes.iter().map(|s| s.meaning()).collect();
    let mut eval = Vec::with_capacity(held_out);
    let mut round = 1u64;
    while eval.len() < held_out {
        if round > 64 {
            return Err(invalid("scene space exhausted while drawing held-out scenes"));
        }
        for s in generate_scenes(held_out * 2, seed ^ round.wrapping_mul(0x9e37_79b9_7f4a_7c15)) {
            if eval.len() == held_out {
                break;
            }
            if taken.insert(s.meaning()) {
                eval.push(Scene {
                    id: (train + eval.len()) as u64,
                    ..s
                });
            }
        }
        round += 1;
    }
    Ok((train_scenes, eval))
}

/// A scene rendered as a sequence over the visual vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ImageRendering {
    pub scene_id: u64,
    pub tokens: [TokenId; 6],
}

pub fn render_image(scene: &Scene, jitter: u8) -> Result<ImageRendering> {
    if jitter as usize >= JITTER_COUNT {
        return Err(invalid(alloc::format!(
            "jitter id {jitter} out of range 0..{JITTER_COUNT}"
        )));
    }
    Ok(ImageRendering {
        scene_id: scene.id,
        tokens: [
            visual::noun(scene.first.noun),
            visual::attribute(scene.first.attr),
            visual::relation(scene.relation),
            visual::noun(scene.second.noun),
            visual::attribute(scene.second.attr),
            visual::jitter(jitter),
        ],
    })
}
