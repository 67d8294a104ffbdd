//! Two-stage training: batch assembly, the distillation-aware step, the
//! trainer loop, metrics and checkpoints.
//!
//! The step is generic over a [`DistillPath`]. `NoDistill` removes the
//! alignment branch at compile time; with `WithDistill` and `lambda = 0` the
//! two produce the same parameter trajectory.

mod checkpoint;
mod optim;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

pub use checkpoint::{Checkpoint, Record, RecordData, MAGIC, VERSION};
pub use optim::{adamw_update, global_grad_norm, AdamState};

use crate::config::{FusionMode, ModelConfig, RunConfig, Stage, TrainConfig};
use crate::distill::{align_vars, check_lambda, distill_loss, total_loss_var, LossBundle};
use crate::error::{GladError, Result};
use crate::model::{Inputs, Model};
use crate::task::{generate_with, render_with, Image, Scene, Task, TaskConfig};
use crate::teacher::GeometryTeacher;
use crate::tensor::{grad_check, GradCheckReport, Rng, Scalar, Tape, Tensor, Var};

/// Compile-time switch for the distillation branch of the step.
pub trait DistillPath {
    const ENABLED: bool;
}

pub struct WithDistill;
pub struct NoDistill;

impl DistillPath for WithDistill {
    const ENABLED: bool = true;
}

impl DistillPath for NoDistill {
    const ENABLED: bool = false;
}

/// One generated training example with its pooled teacher features.
#[derive(Debug, Clone)]
pub struct Sample {
    pub scene: Scene,
    pub task: Task,
    pub image: Image,
    /// `[N_p, d_t]`
    pub teacher: Tensor<f32>,
}

pub fn make_sample(seed: u64, task: &TaskConfig, teacher: &GeometryTeacher, n_patches: usize) -> Result<Sample> {
    let (scene, t) = generate_with(seed, task)?;
    Ok(Sample {
        image: render_with(&scene, task),
        teacher: teacher.single_frame(&scene, n_patches)?,
        scene,
        task: t,
    })
}

/// Teacher-forced batch: the first `N-1` gold actions are fed, all `N` are
/// targets.
#[derive(Debug, Clone)]
pub struct Batch<T = f32> {
    pub inputs: Inputs<T>,
    pub targets: Vec<usize>,
    /// `[batch·N_p, d_t]`
    pub teacher: Tensor<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn cast<U: Scalar>(&self) -> Batch<U> {
        Batch {
            inputs: Inputs {
                batch: self.inputs.batch,
                patches: self.inputs.patches.cast(),
                instructions: self.inputs.instructions.clone(),
                prefix: self.inputs.prefix,
                actions: self.inputs.actions.clone(),
                teacher: self.inputs.teacher.as_ref().map(|t| t.cast()),
            },
            targets: self.targets.clone(),
            teacher: self.teacher.cast(),
        }
    }
}

impl Batch {
    pub fn new(cfg: &ModelConfig, samples: &[&Sample]) -> Result<Self> {
        let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
        let ins: Vec<&[u32]> = samples.iter().map(|s| &s.task.instruction[..]).collect();
        let n = cfg.action_len;
        if samples.iter().any(|s| s.task.gold.len() != n) {
            return Err(GladError::Config(format!("model expects {n} action tokens per task")));
        }
        let prefix: Vec<usize> = samples.iter().flat_map(|s| s.task.gold[..n - 1].to_vec()).collect();
        let targets: Vec<usize> = samples.iter().flat_map(|s| s.task.gold.to_vec()).collect();
        let mut t = Vec::with_capacity(samples.len() * cfg.n_patches() * cfg.d_teacher);
        for s in samples {
            if s.teacher.shape() != [cfg.n_patches(), cfg.d_teacher] {
                return Err(GladError::dim(
                    "teacher",
                    s.teacher.shape(),
                    &[cfg.n_patches(), cfg.d_teacher],
                ));
            }
            t.extend_from_slice(s.teacher.data());
        }
        let teacher = Tensor::new(&[samples.len() * cfg.n_patches(), cfg.d_teacher], t)?;
        let inputs = Inputs::new(cfg, &images, &ins)?
            .with_actions(n - 1, prefix)
            .with_teacher(teacher.clone());
        Ok(Batch {
            inputs,
            targets,
            teacher,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: LossBundle,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Whether the alignment network takes part in training under `cfg`.
pub fn distill_active(cfg: &ModelConfig) -> bool {
    cfg.fusion == FusionMode::LateHidden && cfg.lambda > 0.0
}

/// Mark trainable parameters for `stage`. Stage 1 trains everything, stage
/// 2 only adapters, the action head and the alignment network. The
/// alignment network is frozen whenever it cannot receive a gradient.
pub fn set_trainable<T: Scalar>(model: &mut Model<T>, stage: Stage) {
    let align = distill_active(&model.cfg);
    model.store.set_trainable(|n| {
        if n.starts_with("align.") {
            return align;
        }
        match stage {
            Stage::Pretrain => !n.starts_with("lora."),
            Stage::Posttrain => n.starts_with("lora.") || n.starts_with("head."),
        }
    });
}

/// Forward, loss, backward and one AdamW update.
pub fn train_step<P: DistillPath>(
    model: &mut Model<f32>,
    opt: &mut AdamState<f32>,
    batch: &Batch,
    train: &TrainConfig,
    step: u64,
) -> Result<StepStats> {
    step_inner::<P>(model, opt, batch, train, step).map_err(|e| match e {
        GladError::Numeric(m) if !m.contains("at step") => GladError::Numeric(format!("{m} at step {step}")),
        e => e,
    })
}

/// Loss vars of one objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub total: Var,
    pub l_vla: Var,
    pub l_distill: Option<Var>,
}

/// `l_vla + lambda · l_distill` on `tape` with parameters bound as `vars`.
/// `NoDistill` never builds the alignment branch.
pub fn objective<T: Scalar, P: DistillPath>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    vars: &[Var],
    batch: &Batch<T>,
) -> Result<Objective> {
    let cfg = model.cfg;
    check_lambda(cfg.lambda)?;
    let fwd = model.forward(tape, vars, &batch.inputs)?;
    let logits = model.action_logits(tape, &fwd, cfg.action_len)?;
    let l_vla = tape.cross_entropy(logits, &batch.targets)?;
    if !P::ENABLED {
        return Ok(Objective {
            total: l_vla,
            l_vla,
            l_distill: None,
        });
    }
    let h = model.extract_image_hidden(tape, &fwd, cfg.align_layer)?;
    let (a1, a2) = (model.ids.align1, model.ids.align2);
    let aligned = align_vars(
        tape,
        h,
        vars[a1.w.index()],
        vars[a1.b.index()],
        vars[a2.w.index()],
        vars[a2.b.index()],
    )?;
    let t = tape.constant(batch.teacher.clone());
    let ld = distill_loss(tape, aligned, t)?;
    Ok(Objective {
        total: total_loss_var(tape, l_vla, ld, cfg.lambda)?,
        l_vla,
        l_distill: Some(ld),
    })
}

fn step_inner<P: DistillPath>(
    model: &mut Model<f32>,
    opt: &mut AdamState<f32>,
    batch: &Batch,
    train: &TrainConfig,
    step: u64,
) -> Result<StepStats> {
    let mut tape = Tape::new();
    let vars = model.store.bind(&mut tape);
    let obj = objective::<f32, P>(model, &mut tape, &vars, batch)?;
    let scalar = |v: Var| tape.value(v).data()[0] as f64;
    let l_total = scalar(obj.total);
    let (l_distill, lambda) = match obj.l_distill {
        Some(ld) => (scalar(ld), model.cfg.lambda),
        None => (0.0, 0.0),
    };
    let l_vla = scalar(obj.l_vla);
    if !l_total.is_finite() {
        return Err(GladError::Numeric(format!("non-finite loss {l_total} at step {step}")));
    }
    tape.backward(obj.total)?;
    model.store.zero_grad();
    model.store.absorb_grads(&mut tape);
    let grad_norm = adamw_update(&mut model.store, opt, train);
    Ok(StepStats {
        loss: LossBundle {
            l_vla,
            l_distill,
            lambda,
            l_total,
        },
        grad_norm,
    })
}

/// Small configuration for finite-difference checks of the full objective:
/// four 16-pixel patches, width 16, two layers, 8 teacher dimensions.
pub fn gradcheck_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.model.patch_size = 16;
    c.model.d_llm = 16;
    c.model.n_layers = 2;
    c.model.n_heads = 2;
    c.model.d_teacher = 8;
    c.model.align_layer = 2;
    c.model.lambda = 0.5;
    c.teacher.dim = 8;
    c.train.batch_size = 2;
    c
}

/// Central-difference check of every parameter coordinate of the combined
/// objective in f64 on one generated batch.
pub fn gradcheck_objective(cfg: &RunConfig, eps: f64) -> Result<GradCheckReport> {
    cfg.validate()?;
    let trainer = Trainer::new(*cfg)?;
    let batch: Batch<f64> = trainer.clone().next_batch()?.cast();
    let model: Model<f64> = trainer.model.cast();
    let params: Vec<Tensor<f64>> = model.store.iter().map(|(_, p)| p.value.clone()).collect();
    let f = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let o = match model.cfg.fusion {
            FusionMode::LateHidden => objective::<f64, WithDistill>(&model, tape, vars, &batch)?,
            FusionMode::EarlyWeighted => objective::<f64, NoDistill>(&model, tape, vars, &batch)?,
        };
        Ok(o.total)
    };
    grad_check(f, &params, eps)
}

/// Stage-1 step: late fusion, no adapters, distillation on.
pub fn pretrain_step(
    model: &mut Model<f32>,
    opt: &mut AdamState<f32>,
    batch: &Batch,
    train: &TrainConfig,
    step: u64,
) -> Result<StepStats> {
    if model.cfg.fusion != FusionMode::LateHidden || model.lora.is_some() {
        return Err(GladError::Contract(
            "pretrain_step needs a late-fusion model without adapters".into(),
        ));
    }
    train_step::<WithDistill>(model, opt, batch, train, step)
}

/// Stage-2 step: same losses, adapters required.
pub fn posttrain_step(
    model: &mut Model<f32>,
    opt: &mut AdamState<f32>,
    batch: &Batch,
    train: &TrainConfig,
    step: u64,
) -> Result<StepStats> {
    if model.lora.is_none() {
        return Err(GladError::Contract("posttrain_step needs LoRA adapters".into()));
    }
    match model.cfg.fusion {
        FusionMode::LateHidden => train_step::<WithDistill>(model, opt, batch, train, step),
        FusionMode::EarlyWeighted => train_step::<NoDistill>(model, opt, batch, train, step),
    }
}

/// Model weights from a checkpoint; adapters are installed when the file
/// carries them.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<Model<f32>> {
    let cfg = &ck.config;
    let mut model = Model::new(cfg.model, cfg.train.seed)?;
    if ck.records.iter().any(|r| r.name.starts_with("lora.")) {
        model.install_lora(cfg.train.lora_rank, cfg.train.lora_alpha, cfg.train.seed)?;
    }
    let bad = |msg: String| GladError::Format { offset: 0, msg };
    for (id, name) in model.param_names().into_iter().enumerate() {
        let r = ck
            .get(&name)
            .ok_or_else(|| bad(format!("checkpoint lacks parameter {name}")))?;
        let p = model.store.get_mut(crate::tensor::ParamId(id));
        if r.data.shape() != p.value.shape() {
            return Err(bad(format!("parameter {name} has shape {:?}", r.data.shape())));
        }
        p.value = r.data.to_tensor();
    }
    if let Some(r) = ck
        .records
        .iter()
        .find(|r| !r.name.starts_with("optim.") && model.store.id(&r.name).is_none())
    {
        return Err(bad(format!("unknown record {}", r.name)));
    }
    Ok(model)
}

/// Single-writer training loop over a data stream or a fixed dataset.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model<f32>,
    pub teacher: GeometryTeacher,
    pub opt: AdamState<f32>,
    pub step: u64,
    rng: Rng,
    dataset: Vec<Sample>,
}

impl Trainer {
    /// Fresh stage-1 run.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.train.stage != Stage::Pretrain {
            return Err(GladError::Config("stage 2 starts from a pretrained model".into()));
        }
        let model = Model::new(cfg.model, cfg.train.seed)?;
        Self::assemble(cfg, model)
    }

    /// Fresh stage-2 run on top of `pretrained`: adapters are installed and
    /// the optimizer starts from zero.
    pub fn posttrain(mut pretrained: Model<f32>, cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.train.stage != Stage::Posttrain {
            return Err(GladError::Config("posttrain needs train.stage = posttrain".into()));
        }
        // the distillation weight belongs to the objective, not the weights
        let mut same = pretrained.cfg;
        same.lambda = cfg.model.lambda;
        if same != cfg.model {
            return Err(GladError::Config(
                "pretrained model config differs from run config".into(),
            ));
        }
        pretrained.cfg = same;
        pretrained.install_lora(cfg.train.lora_rank, cfg.train.lora_alpha, cfg.train.seed)?;
        Self::assemble(cfg, pretrained)
    }

    fn assemble(cfg: RunConfig, mut model: Model<f32>) -> Result<Self> {
        set_trainable(&mut model, cfg.train.stage);
        let teacher = GeometryTeacher::new(cfg.teacher)?;
        let mut t = Trainer {
            opt: AdamState::new(model.store.len()),
            rng: Rng::named(cfg.train.seed, &format!("data.{}", cfg.train.stage)),
            cfg,
            model,
            teacher,
            step: 0,
            dataset: Vec::new(),
        };
        if cfg.train.dataset_size > 0 {
            let mut rng = Rng::named(cfg.train.seed, "dataset");
            for _ in 0..cfg.train.dataset_size {
                let s = rng.next_u64();
                t.dataset.push(t.sample(s)?);
            }
        }
        Ok(t)
    }

    fn sample(&self, seed: u64) -> Result<Sample> {
        make_sample(seed, &self.cfg.task, &self.teacher, self.cfg.model.n_patches())
    }

    pub fn dataset(&self) -> &[Sample] {
        &self.dataset
    }

    /// The next batch: fresh scenes from the data stream, or the fixed
    /// dataset cycled in order.
    pub fn next_batch(&mut self) -> Result<Batch> {
        let b = self.cfg.train.batch_size;
        let owned: Vec<Sample>;
        let refs: Vec<&Sample> = if self.dataset.is_empty() {
            let seeds: Vec<u64> = (0..b).map(|_| self.rng.next_u64()).collect();
            owned = seeds.into_iter().map(|s| self.sample(s)).collect::<Result<_>>()?;
            owned.iter().collect()
        } else {
            let n = self.dataset.len() as u64;
            (0..b as u64)
                .map(|i| &self.dataset[((self.step * b as u64 + i) % n) as usize])
                .collect()
        };
        Batch::new(&self.cfg.model, &refs)
    }

    /// One step through an explicit distillation path.
    pub fn step_with<P: DistillPath>(&mut self) -> Result<StepStats> {
        let batch = self.next_batch()?;
        let stats = train_step::<P>(&mut self.model, &mut self.opt, &batch, &self.cfg.train, self.step)?;
        self.step += 1;
        Ok(stats)
    }

    /// One step; late fusion distills, early fusion feeds the teacher as
    /// input instead.
    pub fn step(&mut self) -> Result<StepStats> {
        match self.cfg.model.fusion {
            FusionMode::LateHidden => self.step_with::<WithDistill>(),
            FusionMode::EarlyWeighted => self.step_with::<NoDistill>(),
        }
    }

    /// Run until `self.step == until`, appending metrics and writing
    /// periodic checkpoints into `ckpt_dir` when given.
    pub fn run(&mut self, until: u64, mut metrics: Option<&mut MetricsLog>, ckpt_dir: Option<&Path>) -> Result<()> {
        let every = self.cfg.train.checkpoint_every as u64;
        while self.step < until {
            let s = self.step()?;
            if let Some(m) = metrics.as_deref_mut() {
                m.append(self.step, &s)?;
            }
            if let (Some(dir), true) = (ckpt_dir, every > 0 && self.step % every == 0) {
                self.checkpoint().save(&dir.join(format!("step_{}.ckpt", self.step)))?;
            }
        }
        if let Some(m) = metrics {
            m.flush()?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut records: Vec<Record> = self
            .model
            .store
            .iter()
            .map(|(_, p)| Record::new(p.name.clone(), &p.value))
            .collect();
        for (kind, moments) in [("m", &self.opt.m), ("v", &self.opt.v)] {
            for ((_, p), t) in self.model.store.iter().zip(moments) {
                if let Some(t) = t {
                    records.push(Record::new(format!("optim.{kind}.{}", p.name), t));
                }
            }
        }
        Checkpoint {
            config: self.cfg,
            step: self.step,
            rng_state: self.rng.state(),
            records,
        }
    }

    /// Resume exactly where `ck` left off.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = model_from_checkpoint(ck)?;
        let mut t = Self::assemble(ck.config, model)?;
        for (kind, moments) in [("m", &mut t.opt.m), ("v", &mut t.opt.v)] {
            for ((_, p), slot) in t.model.store.iter().zip(moments.iter_mut()) {
                *slot = ck.get(&format!("optim.{kind}.{}", p.name)).map(|r| r.data.to_tensor());
            }
        }
        t.opt.step = ck.step;
        t.step = ck.step;
        t.rng = Rng::from_state(&ck.rng_state).map_err(|e| GladError::Format {
            offset: 0,
            msg: e.to_string(),
        })?;
        Ok(t)
    }
}

pub const METRICS_HEADER: &str = "step,l_vla,l_distill,l_total,grad_norm";

pub fn metrics_row(step: u64, s: &StepStats) -> String {
    format!(
        "{step},{},{},{},{}",
        s.loss.l_vla, s.loss.l_distill, s.loss.l_total, s.grad_norm
    )
}

/// Append-only metrics CSV.
pub struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsLog {
    /// Open for appending; the header is written when the file is new or
    /// empty.
    pub fn open(path: &Path) -> Result<Self> {
        let io = |e| GladError::io(path, e);
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        let empty = file.metadata().map_err(io)?.len() == 0;
        let mut log = MetricsLog {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        if empty {
            writeln!(log.out, "{METRICS_HEADER}").map_err(io)?;
        }
        Ok(log)
    }

    pub fn append(&mut self, step: u64, s: &StepStats) -> Result<()> {
        writeln!(self.out, "{}", metrics_row(step, s)).map_err(|e| GladError::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| GladError::io(&self.path, e))
    }
}

#[cfg(test)]
mod tests;
