use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use glad_core::eval::{dump_attention, robustness_report, run_eval, EvalReport, ModelPolicy, Suite};
use glad_core::task::{write_corpus, Perturbation};
use glad_core::teacher::GeometryTeacher;
use glad_core::training::{
    gradcheck_config, gradcheck_objective, model_from_checkpoint, Checkpoint, MetricsLog, Trainer,
};
use glad_core::{GladError, Result, RunConfig, Stage, TrainConfig};

/// Relative error below which `gradcheck` passes.
const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "glad",
    version,
    about = "Geometry distillation lab for desk-scale VLA models"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Config file in `section.key = value` form.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed; overrides GLAD_SEED and the config file.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_name = "LAYER")]
    align_layer: Option<usize>,
    #[arg(long, value_parser = ["late", "early"])]
    fusion: Option<String>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Stage 1: full training with optional hidden-state distillation.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Continue from a stage-1 checkpoint; --steps is the new total.
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
    },
    /// Stage 2: LoRA adaptation of a pretrained checkpoint.
    Posttrain {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "CKPT")]
        from: PathBuf,
    },
    /// Success rates of a checkpoint on perturbation suites.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        tasks: usize,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
        /// Comma-separated subset of ori,obj,pos,sem,task.
        #[arg(long, default_value = "ori,obj,pos,sem,task")]
        perturbations: String,
    },
    /// Side-by-side diff of two eval reports (b against a).
    Compare {
        #[command(flatten)]
        common: Common,
        a: PathBuf,
        b: PathBuf,
    },
    /// Attention heat map over the image patches of one scene.
    Attnmap {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        /// 1-based; defaults to the last layer.
        #[arg(long)]
        layer: Option<usize>,
        /// Defaults to the mean over heads.
        #[arg(long)]
        head: Option<usize>,
        /// Query position; defaults to the one predicting the first action.
        #[arg(long)]
        query: Option<usize>,
    },
    /// Finite-difference check of the training objective on a toy model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
    /// Dump generated scenes and their perturbations as text.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value = "ori,obj,pos,sem,task")]
        perturbations: String,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.cmd) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("glad: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("GLAD_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| GladError::Config(format!("GLAD_SEED: cannot parse {v:?}"))),
        Err(_) => Ok(None),
    }
}

impl Common {
    fn seed(&self) -> Result<Option<u64>> {
        Ok(self.seed.or(env_seed()?))
    }

    fn apply_file(&self, c: &mut RunConfig) -> Result<()> {
        if let Some(p) = &self.config {
            let text = std::fs::read_to_string(p).map_err(|e| GladError::io(p, e))?;
            c.apply_text(&text)?;
        }
        Ok(())
    }

    /// Flags on top of whatever `c` holds.
    fn apply_flags(&self, c: &mut RunConfig) -> Result<()> {
        if let Some(s) = self.seed()? {
            c.train.seed = s;
        }
        if let Some(n) = self.steps {
            c.train.steps = n;
        }
        if let Some(l) = self.lambda {
            c.model.lambda = l;
        }
        if let Some(l) = self.align_layer {
            c.model.align_layer = l;
        }
        if let Some(f) = &self.fusion {
            c.model.fusion = f.parse()?;
        }
        Ok(())
    }

    fn touches_config(&self) -> bool {
        self.config.is_some()
            || self.lambda.is_some()
            || self.align_layer.is_some()
            || self.fusion.is_some()
            || self.seed.is_some()
    }

    fn out_dir(&self) -> Result<&Path> {
        std::fs::create_dir_all(&self.out).map_err(|e| GladError::io(&self.out, e))?;
        Ok(&self.out)
    }
}

fn parse_kinds(list: &str) -> Result<Vec<Perturbation>> {
    let mut out = Vec::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let k = Perturbation::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| GladError::Config(format!("unknown perturbation {name:?}")))?;
        if !out.contains(&k) {
            out.push(k);
        }
    }
    if out.is_empty() {
        return Err(GladError::Config("no perturbations selected".into()));
    }
    Ok(out)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| GladError::io(path, e))
}

fn train(mut t: Trainer, common: &Common, name: &str) -> Result<()> {
    let out = common.out_dir()?;
    write(&out.join(format!("{name}.config")), &t.cfg.to_text())?;
    let mut log = MetricsLog::open(&out.join("metrics.csv"))?;
    t.run(t.cfg.train.steps as u64, Some(&mut log), Some(out))?;
    let path = out.join(format!("{name}.ckpt"));
    t.checkpoint().save(&path)?;
    println!("{}", path.display());
    Ok(())
}

fn run(cmd: Cmd) -> Result<u8> {
    match cmd {
        Cmd::Pretrain { common, resume } => {
            let t = match resume {
                Some(p) => {
                    if common.touches_config() {
                        return Err(GladError::Config(
                            "--resume takes its config from the checkpoint; only --steps applies".into(),
                        ));
                    }
                    let ck = Checkpoint::load(&p)?;
                    if ck.config.train.stage != Stage::Pretrain {
                        return Err(GladError::Config(format!(
                            "{} is not a pretrain checkpoint",
                            p.display()
                        )));
                    }
                    let mut t = Trainer::from_checkpoint(&ck)?;
                    if let Some(n) = common.steps {
                        t.cfg.train.steps = n;
                    }
                    t
                }
                None => {
                    let mut c = RunConfig::default();
                    common.apply_file(&mut c)?;
                    c.train.stage = Stage::Pretrain;
                    common.apply_flags(&mut c)?;
                    Trainer::new(c)?
                }
            };
            train(t, &common, "pretrain")?;
        }
        Cmd::Posttrain { common, from } => {
            let ck = Checkpoint::load(&from)?;
            let model = model_from_checkpoint(&ck)?;
            if model.lora.is_some() {
                return Err(GladError::Config(format!(
                    "{} already carries adapters",
                    from.display()
                )));
            }
            let mut c = ck.config;
            c.train = TrainConfig {
                seed: c.train.seed,
                batch_size: c.train.batch_size,
                lora_rank: c.train.lora_rank,
                lora_alpha: c.train.lora_alpha,
                ..TrainConfig::posttrain()
            };
            common.apply_file(&mut c)?;
            c.train.stage = Stage::Posttrain;
            common.apply_flags(&mut c)?;
            train(Trainer::posttrain(model, c)?, &common, "posttrain")?;
        }
        Cmd::Eval {
            common,
            checkpoint,
            tasks,
            episodes,
            perturbations,
        } => {
            let kinds = parse_kinds(&perturbations)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let model = model_from_checkpoint(&ck)?;
            let cfg = ck.config;
            let suite = Suite::new(common.seed()?.unwrap_or(0), tasks, episodes);
            let mut policy = ModelPolicy::new(&model, cfg.task, GeometryTeacher::new(cfg.teacher)?);
            let report = run_eval(&mut policy, &[suite], &kinds, &cfg.task)?;
            let csv = report.to_csv();
            write(&common.out_dir()?.join("eval.csv"), &csv)?;
            print!("{csv}");
        }
        Cmd::Compare { common, a, b } => {
            let read = |p: &Path| -> Result<EvalReport> {
                EvalReport::from_csv(&std::fs::read_to_string(p).map_err(|e| GladError::io(p, e))?)
            };
            let csv = robustness_report(&read(&a)?, &read(&b)?)?;
            write(&common.out_dir()?.join("compare.csv"), &csv)?;
            print!("{csv}");
        }
        Cmd::Attnmap {
            common,
            checkpoint,
            layer,
            head,
            query,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let model = model_from_checkpoint(&ck)?;
            let cfg = ck.config;
            let layer = layer.unwrap_or(cfg.model.n_layers);
            let path = common.out_dir()?.join("attn.ppm");
            let scene_seed = common.seed()?.unwrap_or(0);
            let teacher = GeometryTeacher::new(cfg.teacher)?;
            dump_attention(&model, scene_seed, &cfg.task, &teacher, layer, head, query, &path)?;
            println!("{}", path.display());
        }
        Cmd::Gradcheck { common, eps } => {
            let mut c = gradcheck_config();
            common.apply_file(&mut c)?;
            common.apply_flags(&mut c)?;
            let r = gradcheck_objective(&c, eps)?;
            let pass = r.max_rel_error < GRADCHECK_TOL;
            println!(
                "coordinates {} max_rel_error {:.3e} worst {:?} {}",
                r.coordinates,
                r.max_rel_error,
                r.worst,
                if pass { "PASS" } else { "FAIL" }
            );
            return Ok(if pass { 0 } else { 1 });
        }
        Cmd::GenCorpus {
            common,
            count,
            perturbations,
        } => {
            let kinds = parse_kinds(&perturbations)?;
            let mut c = RunConfig::default();
            common.apply_file(&mut c)?;
            common.apply_flags(&mut c)?;
            c.validate()?;
            let path = common.out_dir()?.join("corpus.txt");
            write_corpus(&path, c.train.seed, count, &kinds, &c.task)?;
            println!("{}", path.display());
        }
    }
    Ok(0)
}
