//! The student policy: two linear patch encoders, an MLP projector and a
//! pre-norm decoder-only transformer over `[image | instruction | actions]`
//! with a next-action head.
//!
//! Parameters live in a [`ParamStore`] in a fixed registration order. A
//! forward pass takes the store bound onto a tape (`store.bind(&mut tape)`),
//! so callers can swap in perturbed copies for gradient checking.

use crate::config::{FusionMode, ModelConfig};
use crate::distill;
use crate::error::{GladError, Result};
use crate::lora;
use crate::task::Image;
use crate::tensor::{ParamId, ParamStore, Rng, Scalar, Tape, Tensor, Var};

const MLP_RATIO: usize = 4;
const EMBED_STD: f64 = 0.2;

#[derive(Debug, Clone, Copy)]
pub struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub struct LayerIds {
    pub ln1: (ParamId, ParamId),
    /// Query, key, value and output projections.
    pub attn: [LinearIds; 4],
    pub ln2: (ParamId, ParamId),
    pub up: LinearIds,
    pub down: LinearIds,
}

#[derive(Debug, Clone)]
pub struct ModelIds {
    pub dino: LinearIds,
    pub siglip: LinearIds,
    pub proj1: LinearIds,
    pub proj2: LinearIds,
    pub embed_instr: ParamId,
    pub embed_action: ParamId,
    pub embed_pos: ParamId,
    pub layers: Vec<LayerIds>,
    pub ln_f: (ParamId, ParamId),
    pub head: LinearIds,
    pub align1: LinearIds,
    pub align2: LinearIds,
    /// Teacher projection and gate, present in early-fusion models only.
    pub fusion: Option<(LinearIds, ParamId)>,
}

/// Installed adapters: `(A, B)` for q, k, v, o of every layer.
#[derive(Debug, Clone)]
pub struct LoraIds {
    pub rank: usize,
    pub alpha: f64,
    pub adapters: Vec<[(ParamId, ParamId); 4]>,
}

pub const ATTN_NAMES: [&str; 4] = ["q", "k", "v", "o"];

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub ids: ModelIds,
    pub lora: Option<LoraIds>,
}

/// One batch of model inputs.
#[derive(Debug, Clone)]
pub struct Inputs<T> {
    pub batch: usize,
    /// `[batch·N_p, patch_dim]`
    pub patches: Tensor<T>,
    /// `batch·instruction_len` token ids.
    pub instructions: Vec<u32>,
    /// Number of action tokens fed per sequence.
    pub prefix: usize,
    /// `batch·prefix` action ids.
    pub actions: Vec<usize>,
    /// `[batch·N_p, d_teacher]`, consumed only by early fusion.
    pub teacher: Option<Tensor<T>>,
}

impl<T: Scalar> Inputs<T> {
    pub fn new(cfg: &ModelConfig, images: &[&Image], instructions: &[&[u32]]) -> Result<Self> {
        if images.len() != instructions.len() {
            return Err(GladError::dim("Inputs", &[images.len()], &[instructions.len()]));
        }
        let mut patches = Vec::with_capacity(images.len() * cfg.n_patches() * cfg.patch_dim());
        for img in images {
            if img.height != cfg.image_size || img.width != cfg.image_size {
                return Err(GladError::Config(format!(
                    "image {}x{} does not match configured size {}",
                    img.height, img.width, cfg.image_size
                )));
            }
            patches.extend(img.patches(cfg.patch_size)?.into_iter().map(|x| T::from_f64(x as f64)));
        }
        let mut ids = Vec::with_capacity(images.len() * cfg.instruction_len);
        for ins in instructions {
            if ins.len() != cfg.instruction_len {
                return Err(GladError::dim("instruction", &[ins.len()], &[cfg.instruction_len]));
            }
            ids.extend_from_slice(ins);
        }
        let batch = images.len();
        if batch == 0 {
            return Err(GladError::Contract("empty batch".into()));
        }
        Ok(Inputs {
            batch,
            patches: Tensor::new(&[batch * cfg.n_patches(), cfg.patch_dim()], patches)?,
            instructions: ids,
            prefix: 0,
            actions: Vec::new(),
            teacher: None,
        })
    }

    pub fn with_actions(mut self, prefix: usize, actions: Vec<usize>) -> Self {
        self.prefix = prefix;
        self.actions = actions;
        self
    }

    pub fn with_teacher(mut self, teacher: Tensor<T>) -> Self {
        self.teacher = Some(teacher);
        self
    }
}

/// Vars of one forward pass. `hidden[l]` is the residual stream after layer
/// `l + 1`; `attn[l]` carries that layer's attention probabilities.
#[derive(Debug, Clone)]
pub struct Forward {
    pub batch: usize,
    pub seq: usize,
    pub hidden: Vec<Var>,
    pub attn: Vec<Var>,
    pub logits: Var,
}

fn xavier<T: Scalar>(rng: &mut Rng, d_out: usize, d_in: usize) -> Tensor<T> {
    let limit = (6.0 / (d_in + d_out) as f64).sqrt();
    let data = (0..d_out * d_in)
        .map(|_| T::from_f64(rng.uniform_range(-limit, limit)))
        .collect();
    Tensor::new(&[d_out, d_in], data).expect("shape matches data")
}

fn normal<T: Scalar>(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Tensor<T> {
    let data = (0..rows * cols).map(|_| T::from_f64(rng.normal() * std)).collect();
    Tensor::new(&[rows, cols], data).expect("shape matches data")
}

struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    seed: u64,
}

impl<T: Scalar> Builder<'_, T> {
    fn add(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        self.store.add(name, value)
    }

    fn rng(&self, name: &str) -> Rng {
        Rng::named(self.seed, &format!("init.{name}"))
    }

    fn linear(&mut self, name: &str, d_out: usize, d_in: usize) -> Result<LinearIds> {
        let w = xavier(&mut self.rng(name), d_out, d_in);
        Ok(LinearIds {
            w: self.add(&format!("{name}.w"), w)?,
            b: self.add(&format!("{name}.b"), Tensor::zeros(&[d_out]))?,
        })
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<(ParamId, ParamId)> {
        Ok((
            self.add(&format!("{name}.g"), Tensor::full(&[d], T::ONE))?,
            self.add(&format!("{name}.b"), Tensor::zeros(&[d]))?,
        ))
    }

    fn embedding(&mut self, name: &str, rows: usize, d: usize) -> Result<ParamId> {
        let t = normal(&mut self.rng(name), rows, d, EMBED_STD);
        self.add(name, t)
    }
}

impl<T: Scalar> Model<T> {
    /// Fresh model with every parameter drawn from its own named stream of
    /// `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_llm;
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            seed,
        };
        let dino = b.linear("enc.dino", d / 2, cfg.patch_dim())?;
        let siglip = b.linear("enc.siglip", d / 2, cfg.patch_dim())?;
        let proj1 = b.linear("proj.fc1", d, d)?;
        let proj2 = b.linear("proj.fc2", d, d)?;
        let embed_instr = b.embedding("embed.instr", cfg.vocab, d)?;
        let embed_action = b.embedding("embed.action", cfg.action_codebook, d)?;
        let embed_pos = b.embedding("embed.pos", cfg.seq_len(), d)?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let p = format!("layers.{i}");
            let ln1 = b.norm(&format!("{p}.ln1"), d)?;
            let mut attn = Vec::with_capacity(4);
            for n in ATTN_NAMES {
                attn.push(b.linear(&format!("{p}.attn.{n}"), d, d)?);
            }
            let ln2 = b.norm(&format!("{p}.ln2"), d)?;
            let up = b.linear(&format!("{p}.mlp.up"), MLP_RATIO * d, d)?;
            let down = b.linear(&format!("{p}.mlp.down"), d, MLP_RATIO * d)?;
            layers.push(LayerIds {
                ln1,
                attn: [attn[0], attn[1], attn[2], attn[3]],
                ln2,
                up,
                down,
            });
        }
        let ln_f = b.norm("ln_f", d)?;
        let head = b.linear("head", cfg.action_codebook, d)?;
        let align1 = b.linear("align.fc1", cfg.d_teacher, d)?;
        let align2 = b.linear("align.fc2", cfg.d_teacher, cfg.d_teacher)?;
        let fusion = match cfg.fusion {
            FusionMode::EarlyWeighted => {
                let tp = b.linear("fusion.teacher_proj", d, cfg.d_teacher)?;
                let gate = b.add("fusion.gate", Tensor::zeros(&[1]))?;
                Some((tp, gate))
            }
            FusionMode::LateHidden => None,
        };
        Ok(Model {
            cfg,
            store,
            ids: ModelIds {
                dino,
                siglip,
                proj1,
                proj2,
                embed_instr,
                embed_action,
                embed_pos,
                layers,
                ln_f,
                head,
                align1,
                align2,
                fusion,
            },
            lora: None,
        })
    }

    /// Same parameters in another element type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg,
            store: self.store.cast(),
            ids: self.ids.clone(),
            lora: self.lora.clone(),
        }
    }

    /// Add rank-`rank` adapters to every attention projection. Fails if
    /// adapters are already installed.
    pub fn install_lora(&mut self, rank: usize, alpha: f64, seed: u64) -> Result<()> {
        if self.lora.is_some() {
            return Err(GladError::Contract("adapters already installed".into()));
        }
        let d = self.cfg.d_llm;
        lora::check_rank(rank, d, d)?;
        if !(alpha > 0.0) {
            return Err(GladError::Config(format!("LoRA alpha {alpha} must be positive")));
        }
        let mut adapters = Vec::with_capacity(self.cfg.n_layers);
        for i in 0..self.cfg.n_layers {
            let mut ids = [(ParamId(0), ParamId(0)); 4];
            for (k, n) in ATTN_NAMES.iter().enumerate() {
                let name = format!("lora.layers.{i}.attn.{n}");
                let mut rng = Rng::named(seed, &format!("init.{name}"));
                let a = self.store.add(&format!("{name}.a"), lora::init_a(&mut rng, rank, d))?;
                let b = self.store.add(&format!("{name}.b"), Tensor::zeros(&[d, rank]))?;
                ids[k] = (a, b);
            }
            adapters.push(ids);
        }
        self.lora = Some(LoraIds { rank, alpha, adapters });
        Ok(())
    }

    /// Dense model with every adapter folded into its base weight.
    pub fn merge_lora(&self) -> Result<Model<T>> {
        let mut out = Model::new(self.cfg, 0)?;
        for (_, p) in out.store.iter_mut() {
            let src = self
                .store
                .by_name(&p.name)
                .ok_or_else(|| GladError::Contract(format!("missing parameter {}", p.name)))?;
            p.value = src.value.clone();
        }
        if let Some(l) = &self.lora {
            for (i, layer) in out.ids.layers.clone().iter().enumerate() {
                for k in 0..4 {
                    let (a, b) = l.adapters[i][k];
                    let ad = lora::LoRAAdapter {
                        base: self.store.get(self.ids.layers[i].attn[k].w).value.clone(),
                        a: self.store.get(a).value.clone(),
                        b: self.store.get(b).value.clone(),
                        rank: l.rank,
                        alpha: l.alpha,
                    };
                    out.store.get_mut(layer.attn[k].w).value = lora::merge(&ad);
                }
            }
        }
        Ok(out)
    }

    /// Overwrite a parameter by name.
    pub fn assign(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| GladError::Contract(format!("unknown parameter {name}")))?;
        let p = self.store.get_mut(id);
        if p.value.shape() != value.shape() {
            return Err(GladError::dim("assign", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    /// Bind every parameter as a constant (no gradient bookkeeping).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.store.iter().map(|(_, p)| tape.constant(p.value.clone())).collect()
    }

    fn lin(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, l: LinearIds) -> Result<Var> {
        tape.linear(x, vars[l.w.index()], Some(vars[l.b.index()]))
    }

    /// Dual patch encoders, concatenated and projected: `[rows, d_llm]`.
    pub fn encode_patches(&self, tape: &mut Tape<T>, vars: &[Var], patches: &Tensor<T>) -> Result<Var> {
        let (_, cols) = patches.dims2();
        if cols != self.cfg.patch_dim() {
            return Err(GladError::Config(format!(
                "patch width {cols} does not match configured {}",
                self.cfg.patch_dim()
            )));
        }
        let x = tape.constant(patches.clone());
        let a = self.lin(tape, vars, x, self.ids.dino)?;
        let b = self.lin(tape, vars, x, self.ids.siglip)?;
        let v = tape.concat_cols(a, b)?;
        let h = self.lin(tape, vars, v, self.ids.proj1)?;
        let h = tape.gelu(h);
        self.lin(tape, vars, h, self.ids.proj2)
    }

    /// Vision tokens `[N_p, d_llm]` for one image.
    pub fn encode_image(&self, image: &Image) -> Result<Tensor<T>> {
        let inputs = Inputs::<T>::new(&self.cfg, &[image], &[&vec![0; self.cfg.instruction_len]])?;
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape);
        let v = self.encode_patches(&mut tape, &vars, &inputs.patches)?;
        Ok(tape.value(v).clone())
    }

    fn attn_proj(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, layer: usize, k: usize) -> Result<Var> {
        let l = self.ids.layers[layer].attn[k];
        match &self.lora {
            Some(lo) => {
                let (a, b) = lo.adapters[layer][k];
                let s = T::from_f64(lo.alpha / lo.rank as f64);
                lora::lora_linear(
                    tape,
                    x,
                    vars[l.w.index()],
                    Some(vars[l.b.index()]),
                    vars[a.index()],
                    vars[b.index()],
                    s,
                )
            }
            None => self.lin(tape, vars, x, l),
        }
    }

    /// Full forward pass on `tape`.
    pub fn forward(&self, tape: &mut Tape<T>, vars: &[Var], inputs: &Inputs<T>) -> Result<Forward> {
        let cfg = &self.cfg;
        let (bsz, np, il) = (inputs.batch, cfg.n_patches(), cfg.instruction_len);
        if bsz == 0 {
            return Err(GladError::Contract("forward on an empty sequence".into()));
        }
        if vars.len() != self.store.len() {
            return Err(GladError::Contract(format!(
                "{} vars bound for {} parameters",
                vars.len(),
                self.store.len()
            )));
        }
        let prefix = inputs.prefix;
        if prefix >= cfg.action_len || inputs.actions.len() != bsz * prefix {
            return Err(GladError::Contract(format!(
                "action prefix {prefix} with {} ids for batch {bsz}",
                inputs.actions.len()
            )));
        }
        if inputs.instructions.len() != bsz * il || inputs.patches.dims2().0 != bsz * np {
            return Err(GladError::Contract("inputs disagree with batch size".into()));
        }
        if let Some(&bad) = inputs.instructions.iter().find(|&&t| t as usize >= cfg.vocab) {
            return Err(GladError::Index {
                index: bad as usize,
                bound: cfg.vocab,
            });
        }
        let seq = np + il + prefix;

        let mut vision = self.encode_patches(tape, vars, &inputs.patches)?;
        if let Some((tp, gate)) = self.ids.fusion {
            let teacher = inputs
                .teacher
                .as_ref()
                .ok_or_else(|| GladError::Contract("early fusion needs teacher features".into()))?;
            let t = tape.constant(teacher.clone());
            let proj = self.lin(tape, vars, t, tp)?;
            vision = distill::weighted_fusion(tape, vision, proj, vars[gate.index()])?;
        }

        let ids: Vec<usize> = inputs.instructions.iter().map(|&t| t as usize).collect();
        let instr = tape.gather_rows(vars[self.ids.embed_instr.index()], &ids)?;
        let mut parts = vec![vision, instr];
        if prefix > 0 {
            let act = tape.gather_rows(vars[self.ids.embed_action.index()], &inputs.actions)?;
            parts.push(act);
        }
        let stacked = tape.concat_rows(&parts)?;
        let mut order = Vec::with_capacity(bsz * seq);
        for b in 0..bsz {
            order.extend(b * np..(b + 1) * np);
            let base = bsz * np + b * il;
            order.extend(base..base + il);
            let base = bsz * (np + il) + b * prefix;
            order.extend(base..base + prefix);
        }
        let x = tape.gather_rows(stacked, &order)?;
        let pos = if seq == cfg.seq_len() {
            vars[self.ids.embed_pos.index()]
        } else {
            tape.gather_rows(vars[self.ids.embed_pos.index()], &(0..seq).collect::<Vec<_>>())?
        };
        let mut x = tape.add_tiled(x, pos)?;

        let mut hidden = Vec::with_capacity(cfg.n_layers);
        let mut attn = Vec::with_capacity(cfg.n_layers);
        for (li, layer) in self.ids.layers.iter().enumerate() {
            let h = tape.layer_norm(x, vars[layer.ln1.0.index()], vars[layer.ln1.1.index()])?;
            let q = self.attn_proj(tape, vars, h, li, 0)?;
            let k = self.attn_proj(tape, vars, h, li, 1)?;
            let v = self.attn_proj(tape, vars, h, li, 2)?;
            let a = tape.causal_attention(q, k, v, bsz, seq, cfg.n_heads)?;
            attn.push(a);
            let o = self.attn_proj(tape, vars, a, li, 3)?;
            x = tape.add(x, o)?;
            let h = tape.layer_norm(x, vars[layer.ln2.0.index()], vars[layer.ln2.1.index()])?;
            let u = self.lin(tape, vars, h, layer.up)?;
            let u = tape.gelu(u);
            let dn = self.lin(tape, vars, u, layer.down)?;
            x = tape.add(x, dn)?;
            hidden.push(x);
        }
        let y = tape.layer_norm(x, vars[self.ids.ln_f.0.index()], vars[self.ids.ln_f.1.index()])?;
        let logits = self.lin(tape, vars, y, self.ids.head)?;
        Ok(Forward {
            batch: bsz,
            seq,
            hidden,
            attn,
            logits,
        })
    }

    /// Forward pass with frozen parameters on a fresh tape.
    pub fn run(&self, inputs: &Inputs<T>) -> Result<(Tape<T>, Forward)> {
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape);
        let f = self.forward(&mut tape, &vars, inputs)?;
        Ok((tape, f))
    }

    /// Image-token rows `[batch·N_p, d_llm]` of the residual stream after
    /// `layer` (1-based).
    pub fn extract_image_hidden(&self, tape: &mut Tape<T>, fwd: &Forward, layer: usize) -> Result<Var> {
        if layer == 0 || layer > fwd.hidden.len() {
            return Err(GladError::Config(format!(
                "layer {layer} outside [1, {}]",
                fwd.hidden.len()
            )));
        }
        let np = self.cfg.n_patches();
        let rows: Vec<usize> = (0..fwd.batch).flat_map(|b| b * fwd.seq..b * fwd.seq + np).collect();
        tape.gather_rows(fwd.hidden[layer - 1], &rows)
    }

    /// Logit rows `[batch·n, K]` at the positions predicting actions `0..n`.
    pub fn action_logits(&self, tape: &mut Tape<T>, fwd: &Forward, n: usize) -> Result<Var> {
        let rows: Vec<usize> = (0..fwd.batch)
            .flat_map(|b| (0..n).map(move |i| (b, i)))
            .map(|(b, i)| b * fwd.seq + self.cfg.action_query(i))
            .collect();
        tape.gather_rows(fwd.logits, &rows)
    }

    /// Greedy decoding of `action_len` tokens per sequence; argmax ties go
    /// to the lowest id.
    pub fn decode_actions(&self, inputs: &Inputs<T>) -> Result<Vec<Vec<usize>>> {
        let n = self.cfg.action_len;
        let bsz = inputs.batch;
        let mut out = vec![Vec::with_capacity(n); bsz];
        for i in 0..n {
            let mut step = inputs.clone();
            step.prefix = i;
            step.actions = out.iter().flat_map(|a: &Vec<usize>| a.iter().copied()).collect();
            let (tape, f) = self.run(&step)?;
            let logits = tape.value(f.logits);
            for (b, seq_out) in out.iter_mut().enumerate() {
                seq_out.push(argmax(logits.row(b * f.seq + self.cfg.action_query(i))));
            }
        }
        Ok(out)
    }

    /// Attention from `query` onto the image span of sequence 0, renormalized
    /// over that span. `head = None` averages the heads.
    pub fn attention_map(
        &self,
        inputs: &Inputs<T>,
        layer: usize,
        head: Option<usize>,
        query: usize,
    ) -> Result<Vec<f64>> {
        let cfg = &self.cfg;
        if layer == 0 || layer > cfg.n_layers {
            return Err(GladError::Config(format!(
                "layer {layer} outside [1, {}]",
                cfg.n_layers
            )));
        }
        if let Some(h) = head {
            if h >= cfg.n_heads {
                return Err(GladError::Config(format!("head {h} outside [0, {})", cfg.n_heads)));
            }
        }
        let seq = cfg.n_patches() + cfg.instruction_len + inputs.prefix;
        if query >= seq {
            return Err(GladError::Config(format!("query position {query} outside [0, {seq})")));
        }
        let (tape, f) = self.run(inputs)?;
        let (probs, _, heads, s) = tape
            .attention_probs(f.attn[layer - 1])
            .ok_or_else(|| GladError::Contract("layer output is not an attention node".into()))?;
        let np = cfg.n_patches();
        let hs: Vec<usize> = match head {
            Some(h) => vec![h],
            None => (0..heads).collect(),
        };
        let mut map = vec![0.0f64; np];
        for &h in &hs {
            let row = &probs[(h * s + query) * s..(h * s + query) * s + s];
            for j in 0..np {
                map[j] += row[j].to_f64();
            }
        }
        let total: f64 = map.iter().sum();
        if !(total > 0.0) {
            return Err(GladError::Numeric("attention on the image span vanished".into()));
        }
        Ok(map.into_iter().map(|x| x / total).collect())
    }

    /// Names of every parameter.
    pub fn param_names(&self) -> Vec<String> {
        self.store.iter().map(|(_, p)| p.name.clone()).collect()
    }
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests;
