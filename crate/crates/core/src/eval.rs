//! Success-rate evaluation over perturbation suites, report diffs, and
//! attention-map dumps.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::{FusionMode, ModelConfig};
use crate::error::{GladError, Result};
use crate::model::{Inputs, Model};
use crate::task::{
    generate_with, gold_actions, perturb, render_with, sample_spec, scene_for_spec, Image, Perturbation, Scene, Task,
    TaskConfig,
};
use crate::teacher::GeometryTeacher;
use crate::tensor::{stream_seed, Rng, Tensor};

pub const REPORT_HEADER: &str = "suite,perturbation,n_tasks,episodes,success_pct";

/// `n_tasks` task specs drawn from `seed`, each played for `episodes`
/// scenes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Suite {
    pub seed: u64,
    pub n_tasks: usize,
    pub episodes: usize,
}

impl Suite {
    pub fn new(seed: u64, n_tasks: usize, episodes: usize) -> Self {
        Suite {
            seed,
            n_tasks,
            episodes,
        }
    }

    pub fn label(&self) -> String {
        format!("seed{}", self.seed)
    }

    /// Every episode of one perturbation family, task-major. Instructions
    /// use canonical wording; scenes follow the training distribution
    /// before the perturbation is applied.
    pub fn cases(&self, kind: Perturbation, cfg: &TaskConfig) -> Result<Vec<(Scene, Task)>> {
        let mut out = Vec::with_capacity(self.n_tasks * self.episodes);
        for i in 0..self.n_tasks {
            let spec = sample_spec(&mut Rng::indexed(self.seed, "suite.spec", i as u64), false);
            let instruction = spec.canonical();
            for e in 0..self.episodes {
                let name = format!("suite.{i}.{e}");
                let seed = stream_seed(self.seed, &name);
                let mut rng = Rng::named(self.seed, &name);
                let scene = scene_for_spec(&spec, &mut rng, cfg, seed, false)?;
                let task = Task {
                    instruction,
                    gold: gold_actions(&scene, &instruction)?,
                    tag: Perturbation::Ori,
                };
                out.push(perturb(&scene, &task, kind, seed, cfg)?);
            }
        }
        Ok(out)
    }
}

/// Anything that maps scenes and instructions to action tokens.
pub trait Policy {
    fn act(&mut self, cases: &[(Scene, Task)]) -> Result<Vec<Vec<usize>>>;
}

/// Greedy decoding from a trained model.
pub struct ModelPolicy<'a> {
    pub model: &'a Model<f32>,
    pub task: TaskConfig,
    pub teacher: GeometryTeacher,
    pub chunk: usize,
}

impl<'a> ModelPolicy<'a> {
    pub fn new(model: &'a Model<f32>, task: TaskConfig, teacher: GeometryTeacher) -> Self {
        ModelPolicy {
            model,
            task,
            teacher,
            chunk: 50,
        }
    }
}

/// Inputs for a set of scenes, with teacher features when the model fuses
/// them.
pub fn model_inputs(
    cfg: &ModelConfig,
    cases: &[(Scene, Task)],
    task: &TaskConfig,
    teacher: &GeometryTeacher,
) -> Result<Inputs<f32>> {
    let images: Vec<Image> = cases.iter().map(|(s, _)| render_with(s, task)).collect();
    let refs: Vec<&Image> = images.iter().collect();
    let ins: Vec<&[u32]> = cases.iter().map(|(_, t)| &t.instruction[..]).collect();
    let mut inputs = Inputs::new(cfg, &refs, &ins)?;
    if cfg.fusion == FusionMode::EarlyWeighted {
        let mut data = Vec::new();
        for (s, _) in cases {
            data.extend_from_slice(teacher.single_frame(s, cfg.n_patches())?.data());
        }
        inputs = inputs.with_teacher(Tensor::new(&[cases.len() * cfg.n_patches(), cfg.d_teacher], data)?);
    }
    Ok(inputs)
}

impl Policy for ModelPolicy<'_> {
    fn act(&mut self, cases: &[(Scene, Task)]) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(cases.len());
        for chunk in cases.chunks(self.chunk.max(1)) {
            let inputs = model_inputs(&self.model.cfg, chunk, &self.task, &self.teacher)?;
            out.extend(self.model.decode_actions(&inputs)?);
        }
        Ok(out)
    }
}

/// Answers with the oracle's gold actions.
pub struct OraclePolicy;

impl Policy for OraclePolicy {
    fn act(&mut self, cases: &[(Scene, Task)]) -> Result<Vec<Vec<usize>>> {
        cases
            .iter()
            .map(|(s, t)| gold_actions(s, &t.instruction).map(|g| g.to_vec()))
            .collect()
    }
}

/// Uniform random tokens.
pub struct RandomPolicy {
    pub rng: Rng,
    pub codebook: usize,
    pub len: usize,
}

impl Policy for RandomPolicy {
    fn act(&mut self, cases: &[(Scene, Task)]) -> Result<Vec<Vec<usize>>> {
        Ok(cases
            .iter()
            .map(|_| (0..self.len).map(|_| self.rng.below(self.codebook)).collect())
            .collect())
    }
}

/// Exact-match chance rate `(1/K)^N`.
pub fn chance_rate(codebook: usize, len: usize) -> f64 {
    (1.0 / codebook as f64).powi(len as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub suite: String,
    pub perturbation: Perturbation,
    pub n_tasks: usize,
    /// Episodes per task.
    pub episodes: usize,
    pub success_pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Episodes actually scored.
    pub executed: usize,
}

impl EvalReport {
    pub fn get(&self, suite: &str, kind: Perturbation) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.suite == suite && r.perturbation == kind)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.2}",
                r.suite, r.perturbation, r.n_tasks, r.episodes, r.success_pct
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| GladError::Format {
            offset: line,
            msg: format!("report line {}: {msg}", line + 1),
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == REPORT_HEADER => {}
            _ => return Err(bad(0, "missing header")),
        }
        let mut rows = Vec::new();
        let mut executed = 0;
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(i, "expected 5 fields"));
            }
            let n_tasks: usize = f[2].parse().map_err(|_| bad(i, "bad n_tasks"))?;
            let episodes: usize = f[3].parse().map_err(|_| bad(i, "bad episodes"))?;
            let pct: f64 = f[4].parse().map_err(|_| bad(i, "bad success_pct"))?;
            if !(0.0..=100.0).contains(&pct) {
                return Err(bad(i, "success_pct outside [0, 100]"));
            }
            executed += n_tasks * episodes;
            rows.push(EvalRow {
                suite: f[0].to_string(),
                perturbation: f[1].parse().map_err(|_| bad(i, "unknown perturbation"))?,
                n_tasks,
                episodes,
                success_pct: pct,
            });
        }
        Ok(EvalReport { rows, executed })
    }
}

/// Score `policy` on every perturbation family of every suite.
pub fn run_eval(
    policy: &mut dyn Policy,
    suites: &[Suite],
    kinds: &[Perturbation],
    task: &TaskConfig,
) -> Result<EvalReport> {
    let mut rows = Vec::new();
    let mut executed = 0;
    for suite in suites {
        for &kind in kinds {
            let cases = suite.cases(kind, task)?;
            let actions = policy.act(&cases)?;
            if actions.len() != cases.len() {
                return Err(GladError::Contract(
                    "policy returned the wrong number of answers".into(),
                ));
            }
            let hits = cases
                .iter()
                .zip(&actions)
                .filter(|((_, t), a)| a.as_slice() == t.gold.as_slice())
                .count();
            executed += cases.len();
            rows.push(EvalRow {
                suite: suite.label(),
                perturbation: kind,
                n_tasks: suite.n_tasks,
                episodes: suite.episodes,
                success_pct: 100.0 * hits as f64 / cases.len().max(1) as f64,
            });
        }
    }
    Ok(EvalReport { rows, executed })
}

/// Per-cell comparison of two reports on identical suites.
#[derive(Debug, Clone, PartialEq)]
pub struct CellDiff {
    pub suite: String,
    pub perturbation: Perturbation,
    pub a: f64,
    pub b: f64,
}

impl CellDiff {
    pub fn delta(&self) -> f64 {
        self.b - self.a
    }
}

pub fn compare_reports(a: &EvalReport, b: &EvalReport) -> Result<Vec<CellDiff>> {
    let key = |r: &EvalRow| (r.suite.clone(), r.perturbation as u8, r.n_tasks, r.episodes);
    let mut ka: Vec<_> = a.rows.iter().map(key).collect();
    let mut kb: Vec<_> = b.rows.iter().map(key).collect();
    ka.sort();
    kb.sort();
    if ka != kb {
        return Err(GladError::Contract("reports cover different suites".into()));
    }
    Ok(a.rows
        .iter()
        .map(|ra| {
            let rb = b.get(&ra.suite, ra.perturbation).expect("keys matched");
            CellDiff {
                suite: ra.suite.clone(),
                perturbation: ra.perturbation,
                a: ra.success_pct,
                b: rb.success_pct,
            }
        })
        .collect())
}

/// Side-by-side CSV: per suite, rows `a`, `b`, `delta` (b − a) and
/// `b_better`, columns in the fixed perturbation order.
pub fn robustness_report(a: &EvalReport, b: &EvalReport) -> Result<String> {
    let diffs = compare_reports(a, b)?;
    let mut suites: Vec<&str> = Vec::new();
    for d in &diffs {
        if !suites.contains(&d.suite.as_str()) {
            suites.push(&d.suite);
        }
    }
    let mut s = String::from("suite,row");
    for k in Perturbation::ALL {
        let _ = write!(s, ",{}", k.title());
    }
    s.push('\n');
    for suite in suites {
        let cell = |k: Perturbation| diffs.iter().find(|d| d.suite == suite && d.perturbation == k);
        for row in ["a", "b", "delta", "b_better"] {
            let _ = write!(s, "{suite},{row}");
            for k in Perturbation::ALL {
                let v = match (cell(k), row) {
                    (None, _) => String::new(),
                    (Some(d), "a") => format!("{:.2}", d.a),
                    (Some(d), "b") => format!("{:.2}", d.b),
                    (Some(d), "delta") => format!("{:+.2}", d.delta()),
                    (Some(d), _) => u8::from(d.delta() > 0.0).to_string(),
                };
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
    }
    Ok(s)
}

/// Attention from `query` (default: the position predicting the first
/// action) onto the image patches of the scene generated from
/// `scene_seed`. `head = None` averages heads.
pub fn attention_for_scene(
    model: &Model<f32>,
    scene_seed: u64,
    task: &TaskConfig,
    teacher: &GeometryTeacher,
    layer: usize,
    head: Option<usize>,
    query: Option<usize>,
) -> Result<(Scene, Vec<f64>)> {
    let cfg = &model.cfg;
    let (scene, t) = generate_with(scene_seed, task)?;
    let cases = [(scene, t)];
    let n = cfg.action_len;
    let inputs = model_inputs(cfg, &cases, task, teacher)?.with_actions(n - 1, cases[0].1.gold[..n - 1].to_vec());
    let q = query.unwrap_or_else(|| cfg.action_query(0));
    let map = model.attention_map(&inputs, layer, head, q)?;
    let [(scene, _)] = cases;
    Ok((scene, map))
}

/// Binary P6 overlay: red is the attention weight scaled by its maximum,
/// green and blue carry the scene's luminance.
pub fn attention_overlay(image: &Image, map: &[f64], patch: usize) -> Result<Vec<u8>> {
    let per_row = image.width / patch;
    if per_row * (image.height / patch) != map.len() {
        return Err(GladError::dim(
            "attention_overlay",
            &[map.len()],
            &[per_row * (image.height / patch)],
        ));
    }
    let max = map.iter().cloned().fold(0.0f64, f64::max);
    let gray = image.gray();
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    let byte = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    for y in 0..image.height {
        for x in 0..image.width {
            let heat = if max > 0.0 {
                map[(y / patch) * per_row + x / patch] / max
            } else {
                0.0
            };
            let g = byte(gray[y * image.width + x] as f64);
            out.extend_from_slice(&[byte(heat), g, g]);
        }
    }
    Ok(out)
}

pub fn attention_csv(map: &[f64], per_row: usize) -> String {
    let mut s = String::from("patch,row,col,weight\n");
    for (i, w) in map.iter().enumerate() {
        let _ = writeln!(s, "{i},{},{},{w}", i / per_row, i % per_row);
    }
    s
}

/// Write the overlay to `out` and the raw weights next to it as CSV.
/// Returns the weights.
#[allow(clippy::too_many_arguments)]
pub fn dump_attention(
    model: &Model<f32>,
    scene_seed: u64,
    task: &TaskConfig,
    teacher: &GeometryTeacher,
    layer: usize,
    head: Option<usize>,
    query: Option<usize>,
    out: &Path,
) -> Result<Vec<f64>> {
    let (scene, map) = attention_for_scene(model, scene_seed, task, teacher, layer, head, query)?;
    let image = render_with(&scene, task);
    let ppm = attention_overlay(&image, &map, model.cfg.patch_size)?;
    std::fs::write(out, ppm).map_err(|e| GladError::io(out, e))?;
    let csv_path = out.with_extension("csv");
    let per_row = model.cfg.image_size / model.cfg.patch_size;
    std::fs::write(&csv_path, attention_csv(&map, per_row)).map_err(|e| GladError::io(&csv_path, e))?;
    Ok(map)
}
