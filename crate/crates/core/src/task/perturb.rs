use super::generate::{assign_appearance, check_spec, sample_cells, sample_depths, scene_for_spec};
use super::oracle::{gold_actions, parse_instruction};
use super::vocab::{synonym, Extreme};
use super::{is_held_out, Perturbation, Scene, Task, TaskConfig, TaskSpec, Template, HELD_OUT};
use crate::error::{GladError, Result};
use crate::tensor::Rng;

const RETRIES: usize = 256;

/// Apply one perturbation family to a solved task.
///
/// * `Obj` redraws every color and size independently.
/// * `Pos` redraws cells and depths, keeping shapes and the instruction.
/// * `Sem` swaps every word for its synonym.
/// * `Task` asks for a verb/shape pairing that training never shows.
///
/// Gold actions are always re-derived from the oracle, and the result always
/// has a unique referent.
pub fn perturb(scene: &Scene, task: &Task, kind: Perturbation, seed: u64, cfg: &TaskConfig) -> Result<(Scene, Task)> {
    let mut rng = Rng::indexed(seed, "perturb", kind as u64);
    match kind {
        Perturbation::Ori => Ok((
            scene.clone(),
            Task {
                tag: kind,
                ..task.clone()
            },
        )),
        Perturbation::Obj => {
            let mut s = scene.clone();
            assign_appearance(&mut s.objects, &mut rng, 0.0);
            let gold = gold_actions(&s, &task.instruction)?;
            Ok((
                s,
                Task {
                    gold,
                    tag: kind,
                    ..task.clone()
                },
            ))
        }
        Perturbation::Pos => {
            let q = parse_instruction(&task.instruction)?;
            for _ in 0..RETRIES {
                let mut s = scene.clone();
                let cells = sample_cells(&mut rng, s.objects.len());
                let depths = sample_depths(&mut rng, s.objects.len());
                for ((o, c), d) in s.objects.iter_mut().zip(cells).zip(depths) {
                    o.cell = c;
                    o.depth = d;
                }
                let Ok(gold) = gold_actions(&s, &task.instruction) else {
                    continue;
                };
                let referent = s.object_at((gold[1], gold[2])).expect("gold cell is occupied");
                if is_held_out(q.verb, referent.shape) {
                    continue;
                }
                return Ok((
                    s,
                    Task {
                        gold,
                        tag: kind,
                        ..task.clone()
                    },
                ));
            }
            Err(GladError::Contract("pos perturbation exhausted its retries".into()))
        }
        Perturbation::Sem => {
            let instruction = task.instruction.map(synonym);
            let gold = gold_actions(scene, &instruction)?;
            Ok((
                scene.clone(),
                Task {
                    instruction,
                    gold,
                    tag: kind,
                },
            ))
        }
        Perturbation::Task => {
            let options = held_out_specs(scene);
            if !options.is_empty() {
                let spec = *rng.choose(&options);
                return finish_task(scene.clone(), &spec);
            }
            for _ in 0..RETRIES {
                let (verb, shape) = *rng.choose(&HELD_OUT);
                let extreme = if rng.bernoulli(0.5) {
                    Some(*rng.choose(&[Extreme::Nearest, Extreme::Farthest]))
                } else {
                    None
                };
                let spec = TaskSpec {
                    template: if extreme.is_some() {
                        Template::ExtremeShape
                    } else {
                        Template::ShapeUnique
                    },
                    verb,
                    extreme,
                    shape: Some(shape),
                    relation: None,
                };
                if let Ok(s) = scene_for_spec(&spec, &mut rng, cfg, scene.seed, true) {
                    return finish_task(s, &spec);
                }
            }
            Err(GladError::Contract("task perturbation exhausted its retries".into()))
        }
    }
}

/// Held-out specs that have a unique referent in `scene` as it stands.
fn held_out_specs(scene: &Scene) -> Vec<TaskSpec> {
    let mut out = Vec::new();
    for (verb, shape) in HELD_OUT {
        for (template, extreme) in [
            (Template::ShapeUnique, None),
            (Template::ExtremeShape, Some(Extreme::Nearest)),
            (Template::ExtremeShape, Some(Extreme::Farthest)),
        ] {
            let spec = TaskSpec {
                template,
                verb,
                extreme,
                shape: Some(shape),
                relation: None,
            };
            if check_spec(&spec, scene, true).is_some() {
                out.push(spec);
            }
        }
    }
    out
}

fn finish_task(scene: Scene, spec: &TaskSpec) -> Result<(Scene, Task)> {
    let instruction = spec.canonical();
    let gold = gold_actions(&scene, &instruction)?;
    Ok((
        scene,
        Task {
            instruction,
            gold,
            tag: Perturbation::Task,
        },
    ))
}
