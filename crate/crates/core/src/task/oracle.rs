use super::vocab::{self, Extreme, Relation, Verb, Word, INSTRUCTION_LEN};
use super::{Color, Object, Scene, Shape, ACTION_LEN, GRID};
use crate::error::{GladError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Noun {
    Shape(Shape),
    Any,
}

/// Meaning of an instruction, slot by slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Query {
    pub verb: Verb,
    pub extreme: Option<Extreme>,
    pub color: Option<Color>,
    pub noun: Noun,
    pub relation: Option<Relation>,
}

fn bad_slot(slot: usize, id: u32) -> GladError {
    GladError::Contract(format!("token {id} ({}) cannot fill slot {slot}", vocab::word_text(id)))
}

pub fn parse_instruction(ids: &[u32]) -> Result<Query> {
    if ids.len() != INSTRUCTION_LEN {
        return Err(GladError::dim("instruction", &[ids.len()], &[INSTRUCTION_LEN]));
    }
    let words: Vec<Word> = ids.iter().map(|&t| vocab::decode(t)).collect::<Result<_>>()?;
    let verb = match words[0] {
        Word::Verb(v) => v,
        _ => return Err(bad_slot(0, ids[0])),
    };
    let extreme = match words[1] {
        Word::Pad => None,
        Word::Extreme(e) => Some(e),
        _ => return Err(bad_slot(1, ids[1])),
    };
    let color = match words[2] {
        Word::Pad => None,
        Word::Color(c) => Some(c),
        _ => return Err(bad_slot(2, ids[2])),
    };
    let noun = match words[3] {
        Word::Shape(s) => Noun::Shape(s),
        Word::AnyObject => Noun::Any,
        _ => return Err(bad_slot(3, ids[3])),
    };
    let relation = match words[4] {
        Word::Pad => None,
        Word::Relation(r) => Some(r),
        _ => return Err(bad_slot(4, ids[4])),
    };
    Ok(Query {
        verb,
        extreme,
        color,
        noun,
        relation,
    })
}

impl Query {
    pub fn matches(&self, o: &Object) -> bool {
        self.color.map_or(true, |c| o.color == c)
            && match self.noun {
                Noun::Shape(s) => o.shape == s,
                Noun::Any => true,
            }
    }

    /// The object the instruction refers to.
    pub fn referent<'a>(&self, scene: &'a Scene) -> Result<&'a Object> {
        let cands: Vec<&Object> = scene.objects.iter().filter(|o| self.matches(o)).collect();
        if cands.is_empty() {
            return Err(GladError::Contract("instruction refers to no object".into()));
        }
        match self.extreme {
            Some(e) => {
                let mut best = cands[0];
                for &o in &cands[1..] {
                    let better = match e {
                        Extreme::Nearest => o.depth < best.depth,
                        Extreme::Farthest => o.depth > best.depth,
                    };
                    if better {
                        best = o;
                    }
                }
                if cands.iter().filter(|o| o.depth == best.depth).count() > 1 {
                    return Err(GladError::Contract("depth tie between candidates".into()));
                }
                Ok(best)
            }
            None if cands.len() == 1 => Ok(cands[0]),
            None => Err(GladError::Contract(format!(
                "ambiguous instruction: {} candidates",
                cands.len()
            ))),
        }
    }
}

/// `[verb, x, y, destination]` for `instruction` in `scene`.
///
/// The destination is the row-major index of the cell next to the single
/// tray for `place`, and 0 otherwise.
pub fn gold_actions(scene: &Scene, instruction: &[u32]) -> Result<[usize; ACTION_LEN]> {
    let q = parse_instruction(instruction)?;
    let target = q.referent(scene)?;
    let dest = match (q.verb, q.relation) {
        (Verb::Place, Some(rel)) => {
            if target.shape == Shape::Tray {
                return Err(GladError::Contract("cannot place a tray relative to itself".into()));
            }
            let trays: Vec<&Object> = scene.objects.iter().filter(|o| o.shape == Shape::Tray).collect();
            if trays.len() != 1 {
                return Err(GladError::Contract(format!(
                    "place needs exactly one tray, scene has {}",
                    trays.len()
                )));
            }
            let (dx, dy) = rel.offset();
            let x = trays[0].cell.0 as i32 + dx;
            let y = trays[0].cell.1 as i32 + dy;
            if x < 0 || y < 0 || x >= GRID as i32 || y >= GRID as i32 {
                return Err(GladError::Contract("destination is off the table".into()));
            }
            y as usize * GRID + x as usize
        }
        (Verb::Place, None) => return Err(GladError::Contract("place needs a relation".into())),
        (_, Some(_)) => return Err(GladError::Contract(format!("{:?} takes no relation", q.verb))),
        (_, None) => 0,
    };
    Ok([q.verb.code(), target.cell.0, target.cell.1, dest])
}
