use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use super::rng::seeded;
use super::scene::{Meaning, Object, Scene};
use super::vocab::{classify, Attribute, Noun, Relation, TokenId, Word, BOS, EOS, IS, THE};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Original,
    Alternative,
    Paraphrase,
    HardNegative,
}

impl Role {
    pub const ALL: [Role; 4] = [
        Role::Original,
        Role::Alternative,
        Role::Paraphrase,
        Role::HardNegative,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Original => "original",
            Role::Alternative => "alternative",
            Role::Paraphrase => "paraphrase",
            Role::HardNegative => "hard-negative",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        Role::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NegCategory {
    SwapObject,
    SwapAttribute,
    ReplaceObject,
    ReplaceAttribute,
    ReplaceRelation,
}

impl NegCategory {
    pub const ALL: [NegCategory; 5] = [
        NegCategory::SwapObject,
        NegCategory::SwapAttribute,
        NegCategory::ReplaceObject,
        NegCategory::ReplaceAttribute,
        NegCategory::ReplaceRelation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NegCategory::SwapObject => "swap-object",
            NegCategory::SwapAttribute => "swap-attribute",
            NegCategory::ReplaceObject => "replace-object",
            NegCategory::ReplaceAttribute => "replace-attribute",
            NegCategory::ReplaceRelation => "replace-relation",
        }
    }

    pub fn parse(s: &str) -> Option<NegCategory> {
        NegCategory::ALL.into_iter().find(|c| c.as_str() == s)
    }

    pub fn is_swap(self) -> bool {
        matches!(self, NegCategory::SwapObject | NegCategory::SwapAttribute)
    }
}

/// How a caption words its scene: object order and, per slot, whether the
/// synonym is used. Slots are (attr1, noun1, attr2, noun2) in surface order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Template {
    pub inverted: bool,
    pub synonyms: [bool; 4],
}

impl Template {
    pub const BASE: Template = Template {
        inverted: false,
        synonyms: [false; 4],
    };

    pub fn id(self) -> u8 {
        let mut id = self.inverted as u8;
        for (i, s) in self.synonyms.iter().enumerate() {
            id |= (*s as u8) << (i + 1);
        }
        id
    }

    pub fn from_id(id: u8) -> Option<Template> {
        if id >= 32 {
            return None;
        }
        let mut synonyms = [false; 4];
        for (i, s) in synonyms.iter_mut().enumerate() {
            *s = id & (1 << (i + 1)) != 0;
        }
        Some(Template {
            inverted: id & 1 != 0,
            synonyms,
        })
    }
}

/// A tokenized caption and where it came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CaptionRecord {
    pub tokens: Vec<TokenId>,
    pub template: u8,
    pub role: Role,
    pub category: Option<NegCategory>,
    pub scene_id: u64,
}

/// A caption read back through the grammar, in surface order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParsedCaption {
    pub first: Object,
    pub relation: Relation,
    pub second: Object,
    /// Synonym flags for (attr1, noun1, attr2, noun2).
    pub synonyms: [bool; 4],
}

impl ParsedCaption {
    pub fn meaning(&self) -> Meaning {
        Meaning::new(self.first, self.relation, self.second)
    }

    pub fn tokens(&self) -> Vec<TokenId> {
        vec![
            BOS,
            THE,
            self.first.attr.token(self.synonyms[0]),
            self.first.noun.token(self.synonyms[1]),
            IS,
            self.relation.token(),
            THE,
            self.second.attr.token(self.synonyms[2]),
            self.second.noun.token(self.synonyms[3]),
            EOS,
        ]
    }
}

/// Parses `BOS the ATTR NOUN is REL the ATTR NOUN EOS`.
pub fn parse_caption(tokens: &[TokenId]) -> Option<ParsedCaption> {
    if tokens.len() != 10 {
        return None;
    }
    let fixed = [(0, BOS), (1, THE), (4, IS), (6, THE), (9, EOS)];
    if fixed.iter().any(|(i, t)| tokens[*i] != *t) {
        return None;
    }
    let attr = |t| match classify(t)? {
        Word::Attribute { attr, synonym } => Some((attr, synonym)),
        _ => None,
    };
    let noun = |t| match classify(t)? {
        Word::Noun { noun, synonym } => Some((noun, synonym)),
        _ => None,
    };
    let (a1, s0) = attr(tokens[2])?;
    let (n1, s1) = noun(tokens[3])?;
    let relation = match classify(tokens[5])? {
        Word::Relation(r) => r,
        _ => return None,
    };
    let (a2, s2) = attr(tokens[7])?;
    let (n2, s3) = noun(tokens[8])?;
    if n1 == n2 {
        return None;
    }
    Some(ParsedCaption {
        first: Object { noun: n1, attr: a1 },
        relation,
        second: Object { noun: n2, attr: a2 },
        synonyms: [s0, s1, s2, s3],
    })
}

/// Renders `scene` with the given wording.
pub fn caption_with_template(scene: &Scene, template: Template, role: Role) -> CaptionRecord {
    let (first, relation, second) = if template.inverted {
        (scene.second, scene.relation.inverse(), scene.first)
    } else {
        (scene.first, scene.relation, scene.second)
    };
    let parsed = ParsedCaption {
        first,
        relation,
        second,
        synonyms: template.synonyms,
    };
    CaptionRecord {
        tokens: parsed.tokens(),
        template: template.id(),
        role,
        category: None,
        scene_id: scene.id,
    }
}

/// Templates of the caption set, in order: base, inverted, and a synonym
/// variant of each.
pub const CAPTION_SET_TEMPLATES: [Template; 4] = [
    Template::BASE,
    Template {
        inverted: true,
        synonyms: [false; 4],
    },
    Template {
        inverted: false,
        synonyms: [true; 4],
    },
    Template {
        inverted: true,
        synonyms: [true; 4],
    },
];

/// The set of faithful captions describing a scene.
pub fn caption_set(scene: &Scene) -> Vec<CaptionRecord> {
    CAPTION_SET_TEMPLATES
        .iter()
        .map(|t| caption_with_template(scene, *t, Role::Original))
        .collect()
}

/// Rewords a caption by inversion and/or synonym substitution.
///
/// Draws uniformly among the 31 non-identity rewordings, so the output is
/// always a different token sequence with the same meaning.
pub fn make_paraphrase(caption: &CaptionRecord, seed: u64) -> Result<CaptionRecord> {
    if caption.role == Role::HardNegative {
        return Err(invalid("hard negatives cannot be paraphrased"));
    }
    let parsed = parse_caption(&caption.tokens)
        .ok_or_else(|| invalid("caption does not follow the grammar"))?;
    let mut rng = seeded(seed, 0x9a7a);
    let change: u8 = rng.gen_range(1..32);
    let flip = change & 1 != 0;
    let mut synonyms = parsed.synonyms;
    for (i, s) in synonyms.iter_mut().enumerate() {
        if change & (1 << (i + 1)) != 0 {
            *s = !*s;
        }
    }
    let out = if flip {
        ParsedCaption {
            first: parsed.second,
            relation: parsed.relation.inverse(),
            second: parsed.first,
            synonyms: [synonyms[2], synonyms[3], synonyms[0], synonyms[1]],
        }
    } else {
        ParsedCaption {
            synonyms,
            ..parsed
        }
    };
    let template = Template::from_id(caption.template).unwrap_or(Template::BASE);
    let template = Template {
        inverted: template.inverted ^ flip,
        synonyms: out.synonyms,
    };
    Ok(CaptionRecord {
        tokens: out.tokens(),
        template: template.id(),
        role: Role::Paraphrase,
        category: None,
        scene_id: caption.scene_id,
    })
}

fn perturb(p: &ParsedCaption, category: NegCategory, rng: &mut impl Rng) -> Vec<ParsedCaption> {
    let mut out = Vec::new();
    match category {
        NegCategory::SwapObject => {
            let mut q = *p;
            core::mem::swap(&mut q.first.noun, &mut q.second.noun);
            q.synonyms.swap(1, 3);
            out.push(q);
        }
        NegCategory::SwapAttribute => {
            let mut q = *p;
            core::mem::swap(&mut q.first.attr, &mut q.second.attr);
            q.synonyms.swap(0, 2);
            out.push(q);
        }
        NegCategory::ReplaceObject => {
            let mut slots = [0usize, 1];
            slots.shuffle(rng);
            for slot in slots {
                let mut nouns: Vec<u8> = (0..Noun::COUNT as u8)
                    .filter(|n| *n != p.first.noun.0 && *n != p.second.noun.0)
                    .collect();
                nouns.shuffle(rng);
                for n in nouns {
                    let mut q = *p;
                    if slot == 0 {
                        q.first.noun = Noun(n);
                        q.synonyms[1] = false;
                    } else {
                        q.second.noun = Noun(n);
                        q.synonyms[3] = false;
                    }
                    out.push(q);
                }
            }
        }
        NegCategory::ReplaceAttribute => {
            let mut slots = [0usize, 1];
            slots.shuffle(rng);
            for slot in slots {
                let current = if slot == 0 { p.first.attr } else { p.second.attr };
                let mut attrs: Vec<u8> = (0..Attribute::COUNT as u8)
                    .filter(|a| *a != current.0)
                    .collect();
                attrs.shuffle(rng);
                for a in attrs {
                    let mut q = *p;
                    if slot == 0 {
                        q.first.attr = Attribute(a);
                        q.synonyms[0] = false;
                    } else {
                        q.second.attr = Attribute(a);
                        q.synonyms[2] = false;
                    }
                    out.push(q);
                }
            }
        }
        NegCategory::ReplaceRelation => {
            let mut rels: Vec<u8> = (0..Relation::COUNT as u8)
                .filter(|r| *r != p.relation.0)
                .collect();
            rels.shuffle(rng);
            for r in rels {
                out.push(ParsedCaption {
                    relation: Relation(r),
                    ..*p
                });
            }
        }
    }
    out
}

/// The first perturbation of `category` that changes the meaning, if any.
fn negative_for(
    parsed: &ParsedCaption,
    meaning: Meaning,
    category: NegCategory,
    rng: &mut impl Rng,
) -> Option<ParsedCaption> {
    perturb(parsed, category, rng)
        .into_iter()
        .find(|q| q.meaning() != meaning)
}

/// Negative categories that can falsify this caption of `scene`.
pub fn available_categories(caption: &CaptionRecord, scene: &Scene) -> Result<Vec<NegCategory>> {
    let parsed = parse_caption(&caption.tokens)
        .ok_or_else(|| invalid("caption does not follow the grammar"))?;
    let mut rng = seeded(0, 0);
    Ok(NegCategory::ALL
        .into_iter()
        .filter(|c| negative_for(&parsed, scene.meaning(), *c, &mut rng).is_some())
        .collect())
}

/// `count` rule-based hard negatives, one per category, with categories
/// drawn uniformly without replacement.
pub fn make_hard_negatives(
    caption: &CaptionRecord,
    scene: &Scene,
    count: usize,
    seed: u64,
) -> Result<Vec<CaptionRecord>> {
    if count == 0 {
        return Err(invalid("hard negative count must be at least 1"));
    }
    let parsed = parse_caption(&caption.tokens)
        .ok_or_else(|| invalid("caption does not follow the grammar"))?;
    let meaning = scene.meaning();
    let mut rng = seeded(seed, 0x4e6);
    let mut categories = NegCategory::ALL.to_vec();
    categories.shuffle(&mut rng);
    let mut out = Vec::with_capacity(count);
    for category in categories {
        if out.len() == count {
            break;
        }
        if let Some(q) = negative_for(&parsed, meaning, category, &mut rng) {
            out.push(CaptionRecord {
                tokens: q.tokens(),
                template: caption.template,
                role: Role::HardNegative,
                category: Some(category),
                scene_id: caption.scene_id,
            });
        }
    }
    if out.len() < count {
        return Err(invalid(format!(
            "requested {count} hard negatives but only {} categories apply",
            out.len()
        )));
    }
    Ok(out)
}

/// A single negative of a fixed category, or `None` if the category cannot
/// falsify the caption.
pub fn make_negative_of(
    caption: &CaptionRecord,
    scene: &Scene,
    category: NegCategory,
    seed: u64,
) -> Result<Option<CaptionRecord>> {
    let parsed = parse_caption(&caption.tokens)
        .ok_or_else(|| invalid("caption does not follow the grammar"))?;
    let mut rng = seeded(seed, 0x4e7);
    Ok(
        negative_for(&parsed, scene.meaning(), category, &mut rng).map(|q| CaptionRecord {
            tokens: q.tokens(),
            template: caption.template,
            role: Role::HardNegative,
            category: Some(category),
            scene_id: caption.scene_id,
        }),
    )
}

/// Number of word positions at which two captions differ (equal lengths),
/// or the length difference plus mismatches otherwise.
pub fn word_distance(a: &[TokenId], b: &[TokenId]) -> usize {
    let common = a.len().min(b.len());
    let mismatches = a[..common]
        .iter()
        .zip(&b[..common])
        .filter(|(x, y)| x != y)
        .count();
    mismatches + a.len().max(b.len()) - common
}
