use super::oracle::gold_actions;
use super::vocab::{encode, Extreme, Relation, Verb, Word, INSTRUCTION_LEN, PAD};
use super::{
    is_held_out, Color, Object, Perturbation, Scene, Shape, Size, Task, TaskConfig, DEPTH_GAP, DEPTH_MAX, DEPTH_MIN,
    GRID, MAX_OBJECTS, MIN_OBJECTS,
};
use crate::error::{GladError, Result};
use crate::tensor::Rng;

const SCENE_RETRIES: usize = 256;
const SPEC_RETRIES: usize = 32;

/// Instruction families. None of them mention color, so gold actions never
/// depend on appearance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Template {
    /// "pick cube" with exactly one cube present.
    ShapeUnique,
    /// "pick nearest cube" with at least two cubes present.
    ExtremeShape,
    /// "pick nearest object".
    ExtremeAny,
    /// "place sphere left-of tray".
    Place,
}

impl Template {
    const WEIGHTED: [(Template, f64); 4] = [
        (Template::ShapeUnique, 0.2),
        (Template::ExtremeShape, 0.35),
        (Template::ExtremeAny, 0.25),
        (Template::Place, 0.2),
    ];

    /// Whether resolving the referent needs depth order.
    pub fn uses_depth(self) -> bool {
        matches!(self, Template::ExtremeShape | Template::ExtremeAny)
    }
}

/// A task family member before a scene is attached: template plus slot fillers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TaskSpec {
    pub template: Template,
    pub verb: Verb,
    pub extreme: Option<Extreme>,
    pub shape: Option<Shape>,
    pub relation: Option<Relation>,
}

impl TaskSpec {
    /// Token ids; each word independently switches to its synonym when
    /// `synonym()` returns true.
    pub fn instruction(&self, mut synonym: impl FnMut() -> bool) -> [u32; INSTRUCTION_LEN] {
        let mut out = [PAD; INSTRUCTION_LEN];
        out[0] = encode(Word::Verb(self.verb), synonym());
        if let Some(e) = self.extreme {
            out[1] = encode(Word::Extreme(e), synonym());
        }
        out[3] = match self.shape {
            Some(s) => encode(Word::Shape(s), synonym()),
            None => encode(Word::AnyObject, synonym()),
        };
        if let Some(r) = self.relation {
            out[4] = encode(Word::Relation(r), synonym());
        }
        out
    }

    pub fn canonical(&self) -> [u32; INSTRUCTION_LEN] {
        self.instruction(|| false)
    }
}

/// Draw a task spec. Held-out verb/shape pairings are skipped unless
/// `allow_held_out`.
pub fn sample_spec(rng: &mut Rng, allow_held_out: bool) -> TaskSpec {
    loop {
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut template = Template::Place;
        for (t, w) in Template::WEIGHTED {
            acc += w;
            if u < acc {
                template = t;
                break;
            }
        }
        let verb = match template {
            Template::Place => Verb::Place,
            _ => *rng.choose(&[Verb::Pick, Verb::Push, Verb::Lift]),
        };
        let extreme = match template {
            Template::ExtremeShape | Template::ExtremeAny => Some(*rng.choose(&[Extreme::Nearest, Extreme::Farthest])),
            _ => None,
        };
        let shape = match template {
            Template::ShapeUnique | Template::ExtremeShape => Some(*rng.choose(&Shape::ALL)),
            Template::Place => Some(*rng.choose(&[Shape::Cube, Shape::Sphere])),
            Template::ExtremeAny => None,
        };
        let relation = match template {
            Template::Place => Some(*rng.choose(&Relation::ALL)),
            _ => None,
        };
        if !allow_held_out && shape.is_some_and(|s| is_held_out(verb, s)) {
            continue;
        }
        return TaskSpec {
            template,
            verb,
            extreme,
            shape,
            relation,
        };
    }
}

pub(crate) fn sample_cells(rng: &mut Rng, n: usize) -> Vec<(usize, usize)> {
    let mut cells: Vec<usize> = (0..GRID * GRID).collect();
    rng.shuffle(&mut cells);
    cells[..n].iter().map(|&c| (c % GRID, c / GRID)).collect()
}

pub(crate) fn sample_depths(rng: &mut Rng, n: usize) -> Vec<f64> {
    loop {
        let d: Vec<f64> = (0..n).map(|_| rng.uniform_range(DEPTH_MIN, DEPTH_MAX)).collect();
        let separated = (0..n).all(|i| (i + 1..n).all(|j| (d[i] - d[j]).abs() >= DEPTH_GAP));
        if separated {
            return d;
        }
    }
}

/// Fill in colors and sizes. With probability `bias` they follow depth
/// order (nearest is large and red, then green, blue, yellow); otherwise
/// they are drawn independently.
pub(crate) fn assign_appearance(objects: &mut [Object], rng: &mut Rng, bias: f64) {
    if rng.bernoulli(bias) {
        let mut order: Vec<usize> = (0..objects.len()).collect();
        order.sort_by(|&a, &b| objects[a].depth.total_cmp(&objects[b].depth));
        for (rank, &i) in order.iter().enumerate() {
            objects[i].color = Color::ALL[rank];
            objects[i].size = if rank == 0 { Size::Large } else { Size::Small };
        }
    } else {
        for o in objects.iter_mut() {
            o.color = *rng.choose(&Color::ALL);
            o.size = if rng.bernoulli(0.5) { Size::Large } else { Size::Small };
        }
    }
}

/// Whether `scene` is a valid instance of `spec`; returns the gold actions.
pub(crate) fn check_spec(spec: &TaskSpec, scene: &Scene, allow_held_out: bool) -> Option<[usize; super::ACTION_LEN]> {
    let instruction = spec.canonical();
    let gold = gold_actions(scene, &instruction).ok()?;
    if spec.template == Template::ExtremeShape {
        let s = spec.shape?;
        if scene.objects.iter().filter(|o| o.shape == s).count() < 2 {
            return None;
        }
    }
    let referent = scene.object_at((gold[1], gold[2]))?;
    if !allow_held_out && is_held_out(spec.verb, referent.shape) {
        return None;
    }
    Some(gold)
}

/// Sample a scene in which `spec` has a unique referent.
pub fn scene_for_spec(
    spec: &TaskSpec,
    rng: &mut Rng,
    cfg: &TaskConfig,
    seed: u64,
    allow_held_out: bool,
) -> Result<Scene> {
    for _ in 0..SCENE_RETRIES {
        let n = MIN_OBJECTS + rng.below(MAX_OBJECTS - MIN_OBJECTS + 1);
        let cells = sample_cells(rng, n);
        let depths = sample_depths(rng, n);
        let objects: Vec<Object> = cells
            .into_iter()
            .zip(depths)
            .map(|(cell, depth)| Object {
                shape: *rng.choose(&Shape::ALL),
                color: Color::Red,
                size: Size::Small,
                cell,
                depth,
            })
            .collect();
        let mut scene = Scene { seed, objects };
        if check_spec(spec, &scene, allow_held_out).is_some() {
            assign_appearance(&mut scene.objects, rng, cfg.appearance_bias);
            return Ok(scene);
        }
    }
    Err(GladError::Contract(format!(
        "no scene satisfies {spec:?} after {SCENE_RETRIES} tries"
    )))
}

/// One training-distribution sample at the default task configuration.
pub fn generate_scene(seed: u64) -> Result<(Scene, Task)> {
    generate_with(seed, &TaskConfig::default())
}

/// One training-distribution sample: random spec, matching scene, gold from
/// the oracle. Held-out pairings never appear.
pub fn generate_with(seed: u64, cfg: &TaskConfig) -> Result<(Scene, Task)> {
    let mut rng = Rng::named(seed, "task");
    for _ in 0..SPEC_RETRIES {
        let spec = sample_spec(&mut rng, false);
        let Ok(scene) = scene_for_spec(&spec, &mut rng, cfg, seed, false) else {
            continue;
        };
        let instruction = spec.instruction(|| rng.bernoulli(cfg.synonym_rate));
        let gold = gold_actions(&scene, &instruction)?;
        return Ok((
            scene,
            Task {
                instruction,
                gold,
                tag: Perturbation::Ori,
            },
        ));
    }
    Err(GladError::Contract(format!(
        "seed {seed}: task generation exhausted its retries"
    )))
}
