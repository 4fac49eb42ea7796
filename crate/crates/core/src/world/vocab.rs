use alloc::vec::Vec;

/// Token id in the text vocabulary or the visual vocabulary.
pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const THE: TokenId = 3;
pub const IS: TokenId = 4;

pub const NOUNS: [&str; 12] = [
    "cube", "ball", "cone", "cylinder", "ring", "star", "box", "pyramid", "disk", "cup", "bottle",
    "chair",
];
pub const NOUN_SYNONYMS: [&str; 12] = [
    "block", "sphere", "funnel", "tube", "hoop", "pentagram", "crate", "tetrahedron", "plate",
    "mug", "flask", "seat",
];
pub const ATTRIBUTES: [&str; 8] = [
    "red", "blue", "green", "yellow", "black", "white", "purple", "orange",
];
pub const ATTRIBUTE_SYNONYMS: [&str; 8] = [
    "crimson", "azure", "emerald", "golden", "ebony", "ivory", "violet", "amber",
];
pub const RELATIONS: [&str; 6] = ["left-of", "right-of", "above", "below", "near", "far-from"];

const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "the", "is"];

const NOUN_BASE: TokenId = 5;
const NOUN_SYN_BASE: TokenId = NOUN_BASE + 12;
const ATTR_BASE: TokenId = NOUN_SYN_BASE + 12;
const ATTR_SYN_BASE: TokenId = ATTR_BASE + 8;
const REL_BASE: TokenId = ATTR_SYN_BASE + 8;

/// Number of text tokens.
pub const TEXT_VOCAB: usize = REL_BASE as usize + 6;

/// Number of visual tokens. Visual ids start at [`VISUAL_OFFSET`].
pub const VISUAL_VOCAB: usize = 12 + 8 + 6 + JITTER_COUNT;
pub const VISUAL_OFFSET: TokenId = TEXT_VOCAB as TokenId;

/// Number of nuisance tokens distinguishing instances of one scene.
pub const JITTER_COUNT: usize = 4;

/// Object noun, indexing [`NOUNS`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Noun(pub u8);

/// Attribute adjective, indexing [`ATTRIBUTES`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Attribute(pub u8);

/// Spatial relation, indexing [`RELATIONS`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Relation(pub u8);

impl Noun {
    pub const COUNT: usize = 12;

    pub fn token(self, synonym: bool) -> TokenId {
        if synonym {
            NOUN_SYN_BASE + self.0 as TokenId
        } else {
            NOUN_BASE + self.0 as TokenId
        }
    }
}

impl Attribute {
    pub const COUNT: usize = 8;

    pub fn token(self, synonym: bool) -> TokenId {
        if synonym {
            ATTR_SYN_BASE + self.0 as TokenId
        } else {
            ATTR_BASE + self.0 as TokenId
        }
    }
}

impl Relation {
    pub const COUNT: usize = 6;

    pub fn token(self) -> TokenId {
        REL_BASE + self.0 as TokenId
    }

    /// The relation that holds with the two objects exchanged.
    pub fn inverse(self) -> Relation {
        Relation(match self.0 {
            0 => 1,
            1 => 0,
            2 => 3,
            3 => 2,
            r => r,
        })
    }

    pub fn is_symmetric(self) -> bool {
        self.inverse() == self
    }
}

/// What a text token denotes in the grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Word {
    Special(TokenId),
    Noun { noun: Noun, synonym: bool },
    Attribute { attr: Attribute, synonym: bool },
    Relation(Relation),
}

pub fn classify(token: TokenId) -> Option<Word> {
    match token {
        t if t < NOUN_BASE => Some(Word::Special(t)),
        t if t < NOUN_SYN_BASE => Some(Word::Noun {
            noun: Noun((t - NOUN_BASE) as u8),
            synonym: false,
        }),
        t if t < ATTR_BASE => Some(Word::Noun {
            noun: Noun((t - NOUN_SYN_BASE) as u8),
            synonym: true,
        }),
        t if t < ATTR_SYN_BASE => Some(Word::Attribute {
            attr: Attribute((t - ATTR_BASE) as u8),
            synonym: false,
        }),
        t if t < REL_BASE => Some(Word::Attribute {
            attr: Attribute((t - ATTR_SYN_BASE) as u8),
            synonym: true,
        }),
        t if (t as usize) < TEXT_VOCAB => Some(Word::Relation(Relation((t - REL_BASE) as u8))),
        _ => None,
    }
}

/// Surface form of a text token.
pub fn word(token: TokenId) -> Option<&'static str> {
    Some(match classify(token)? {
        Word::Special(t) => SPECIALS[t as usize],
        Word::Noun { noun, synonym } => {
            if synonym {
                NOUN_SYNONYMS[noun.0 as usize]
            } else {
                NOUNS[noun.0 as usize]
            }
        }
        Word::Attribute { attr, synonym } => {
            if synonym {
                ATTRIBUTE_SYNONYMS[attr.0 as usize]
            } else {
                ATTRIBUTES[attr.0 as usize]
            }
        }
        Word::Relation(r) => RELATIONS[r.0 as usize],
    })
}

/// Token id of a surface word.
pub fn lookup(w: &str) -> Option<TokenId> {
    (0..TEXT_VOCAB as TokenId).find(|t| word(*t) == Some(w))
}

/// Space-separated surface text of the words between BOS and EOS.
pub fn surface_text(tokens: &[TokenId]) -> alloc::string::String {
    let words: Vec<&str> = tokens
        .iter()
        .filter(|t| !matches!(**t, PAD | BOS | EOS))
        .map(|t| word(*t).unwrap_or("<unk>"))
        .collect();
    words.join(" ")
}

/// Visual token ids (already offset past the text vocabulary).
pub mod visual {
    use super::*;

    pub fn noun(n: Noun) -> TokenId {
        VISUAL_OFFSET + n.0 as TokenId
    }
    pub fn attribute(a: Attribute) -> TokenId {
        VISUAL_OFFSET + 12 + a.0 as TokenId
    }
    pub fn relation(r: Relation) -> TokenId {
        VISUAL_OFFSET + 20 + r.0 as TokenId
    }
    pub fn jitter(j: u8) -> TokenId {
        VISUAL_OFFSET + 26 + j as TokenId
    }
}
