//! The 64-token instruction vocabulary and its synonym table.
//!
//! Instructions have a fixed slot layout `[verb, modifier, color, noun,
//! relation]`; empty slots hold [`PAD`].

use std::fmt;

use super::{Color, Shape};
use crate::error::{GladError, Result};

pub const VOCAB_SIZE: usize = 64;
pub const INSTRUCTION_LEN: usize = 5;
pub const PAD: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Verb {
    Pick,
    Push,
    Lift,
    Place,
}

impl Verb {
    pub const ALL: [Verb; 4] = [Verb::Pick, Verb::Push, Verb::Lift, Verb::Place];

    /// Action-codebook id of the verb.
    pub fn code(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Extreme {
    Nearest,
    Farthest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Relation {
    LeftOf,
    RightOf,
    Behind,
    InFrontOf,
}

impl Relation {
    pub const ALL: [Relation; 4] = [
        Relation::LeftOf,
        Relation::RightOf,
        Relation::Behind,
        Relation::InFrontOf,
    ];

    /// Cell offset `(dx, dy)`; `dy < 0` is farther up the table image.
    pub fn offset(self) -> (i32, i32) {
        match self {
            Relation::LeftOf => (-1, 0),
            Relation::RightOf => (1, 0),
            Relation::Behind => (0, -1),
            Relation::InFrontOf => (0, 1),
        }
    }
}

/// Decoded meaning of one instruction slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Word {
    Pad,
    Verb(Verb),
    Extreme(Extreme),
    Color(Color),
    Shape(Shape),
    AnyObject,
    Relation(Relation),
}

// (canonical id, synonym id, meaning); ids 37..63 are reserved.
const TABLE: &[(u32, Option<u32>, Word, &str, &str)] = &[
    (1, Some(5), Word::Verb(Verb::Pick), "pick", "grab"),
    (2, Some(6), Word::Verb(Verb::Push), "push", "shove"),
    (3, Some(7), Word::Verb(Verb::Lift), "lift", "raise"),
    (4, Some(8), Word::Verb(Verb::Place), "place", "put"),
    (9, Some(11), Word::Extreme(Extreme::Nearest), "nearest", "closest"),
    (10, Some(12), Word::Extreme(Extreme::Farthest), "farthest", "furthest"),
    (13, None, Word::Color(Color::Red), "red", ""),
    (14, None, Word::Color(Color::Green), "green", ""),
    (15, None, Word::Color(Color::Blue), "blue", ""),
    (16, None, Word::Color(Color::Yellow), "yellow", ""),
    (21, Some(24), Word::Shape(Shape::Cube), "cube", "block"),
    (22, Some(25), Word::Shape(Shape::Sphere), "sphere", "ball"),
    (23, Some(26), Word::Shape(Shape::Tray), "tray", "plate"),
    (27, Some(28), Word::AnyObject, "object", "item"),
    (29, Some(33), Word::Relation(Relation::LeftOf), "left-of", "leftward-of"),
    (
        30,
        Some(34),
        Word::Relation(Relation::RightOf),
        "right-of",
        "rightward-of",
    ),
    (31, Some(35), Word::Relation(Relation::Behind), "behind", "beyond"),
    (
        32,
        Some(36),
        Word::Relation(Relation::InFrontOf),
        "in-front-of",
        "before",
    ),
];

pub fn decode(id: u32) -> Result<Word> {
    if id == PAD {
        return Ok(Word::Pad);
    }
    for &(canon, syn, word, _, _) in TABLE {
        if id == canon || Some(id) == syn {
            return Ok(word);
        }
    }
    Err(if (id as usize) < VOCAB_SIZE {
        GladError::Contract(format!("token {id} is reserved"))
    } else {
        GladError::Index {
            index: id as usize,
            bound: VOCAB_SIZE,
        }
    })
}

/// Canonical id for a word, or its synonym when `synonym` is set and one
/// exists.
pub fn encode(word: Word, synonym: bool) -> u32 {
    if word == Word::Pad {
        return PAD;
    }
    let &(canon, syn, ..) = TABLE
        .iter()
        .find(|e| e.2 == word)
        .expect("every word has a table entry");
    if synonym {
        syn.unwrap_or(canon)
    } else {
        canon
    }
}

/// Fixed rephrasing table: canonical ↔ synonym. Words without a synonym and
/// reserved ids map to themselves.
pub fn synonym(id: u32) -> u32 {
    for &(canon, syn, ..) in TABLE {
        if let Some(s) = syn {
            if id == canon {
                return s;
            }
            if id == s {
                return canon;
            }
        }
    }
    id
}

pub fn word_text(id: u32) -> &'static str {
    if id == PAD {
        return "_";
    }
    for &(canon, syn, _, c, s) in TABLE {
        if id == canon {
            return c;
        }
        if Some(id) == syn {
            return s;
        }
    }
    "?"
}

/// Human-readable rendering of an instruction, skipping pads.
pub struct Phrase<'a>(pub &'a [u32]);

impl fmt::Display for Phrase<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let words: Vec<&str> = self.0.iter().filter(|&&t| t != PAD).map(|&t| word_text(t)).collect();
        write!(f, "{}", words.join(" "))
    }
}
