use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use super::{generate_with, perturb, Perturbation, Scene, Size, Task, TaskConfig};
use crate::error::{GladError, Result};

/// One canonical line: seed, objects, instruction ids, gold ids and tag.
///
/// `seed=7 objects=cube/red/large@1,2:0.35;tray/blue/small@3,0:0.8 instruction=1,9,0,21,0 gold=0,1,2,0 tag=ori`
///
/// Depths are printed with the shortest round-trip representation.
pub fn dump_record(scene: &Scene, task: &Task) -> String {
    let mut line = format!("seed={} objects=", scene.seed);
    for (i, o) in scene.objects.iter().enumerate() {
        if i > 0 {
            line.push(';');
        }
        let size = match o.size {
            Size::Small => "small",
            Size::Large => "large",
        };
        let _ = write!(
            line,
            "{}/{}/{}@{},{}:{:?}",
            o.shape.name(),
            o.color.name(),
            size,
            o.cell.0,
            o.cell.1,
            o.depth
        );
    }
    let ids = |xs: &mut dyn Iterator<Item = String>| xs.collect::<Vec<_>>().join(",");
    let _ = write!(
        line,
        " instruction={} gold={} tag={}",
        ids(&mut task.instruction.iter().map(|t| t.to_string())),
        ids(&mut task.gold.iter().map(|t| t.to_string())),
        task.tag
    );
    line
}

/// Write `count` samples starting at `first_seed`, each followed by the
/// requested perturbations of it.
pub fn write_corpus(
    path: &Path,
    first_seed: u64,
    count: usize,
    kinds: &[Perturbation],
    cfg: &TaskConfig,
) -> Result<()> {
    let mut out = String::new();
    for seed in first_seed..first_seed + count as u64 {
        let (scene, task) = generate_with(seed, cfg)?;
        out.push_str(&dump_record(&scene, &task));
        out.push('\n');
        for &k in kinds.iter().filter(|&&k| k != Perturbation::Ori) {
            let (s, t) = perturb(&scene, &task, k, seed, cfg)?;
            out.push_str(&dump_record(&s, &t));
            out.push('\n');
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| GladError::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| GladError::io(path, e))
}
