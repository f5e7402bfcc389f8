//! Optimization: configuration, a decoupled-weight-decay Adam optimizer, the
//! training step and loop, checkpoints and the ablation grid.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{harmonization_contrastive_loss, ContrastiveConfig, ContrastiveOutcome, EmbeddingHead};
use crate::data::{collate, item_seed, Dataset};
use crate::error::{HarmonizeError, Result};
use crate::metrics::{evaluate_dataset, EvalItem, EvalSummary, MetricReport};
use crate::model::{Network, NetworkConfig};
use crate::nn::{Mode, ParamStore};
use crate::objectives::{total_loss, LossReport, LossTerms, LossWeights};
use crate::style_fusion::FusionMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Flat training configuration; every field is one config-file key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; off when null.
    pub grad_clip: Option<f64>,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub steps: Option<usize>,
    pub seed: u64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub k: usize,
    pub tau: f64,
    pub patch_size: usize,
    pub downsample_factor: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub use_style_fusion: bool,
    pub use_lhcl: bool,
    pub use_lpixel: bool,
    /// Evaluate every n steps; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Checkpoint every n steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub base_width: usize,
    pub stages: usize,
    pub image_size: usize,
    pub s2am_refine: bool,
    pub blend_background_at_inference: bool,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let net = NetworkConfig::full();
        let c = ContrastiveConfig::default();
        let w = LossWeights::default();
        Self {
            batch_size: 8,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: None,
            epochs: 60,
            steps: None,
            seed: 0,
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            lambda3: w.lambda3,
            k: c.k,
            tau: c.tau,
            patch_size: c.patch_size,
            downsample_factor: c.downsample_factor,
            embed_dim: c.embed_dim,
            hidden_dim: c.hidden_dim,
            use_style_fusion: true,
            use_lhcl: true,
            use_lpixel: true,
            eval_every: 0,
            checkpoint_every: 0,
            base_width: net.base_width,
            stages: net.stages,
            image_size: net.image_size,
            s2am_refine: net.s2am_refine,
            blend_background_at_inference: net.blend_background_at_inference,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    /// Full-size settings.
    pub fn full() -> Self {
        Self::default()
    }

    /// Canonical desk-scale recipe: width 8, 64x64, K=16, patch 4, factor 2, 300 steps.
    pub fn toy() -> Self {
        let net = NetworkConfig::toy();
        let c = ContrastiveConfig::toy();
        Self {
            steps: Some(300),
            k: c.k,
            patch_size: c.patch_size,
            downsample_factor: c.downsample_factor,
            base_width: net.base_width,
            stages: net.stages,
            image_size: net.image_size,
            s2am_refine: net.s2am_refine,
            ..Self::default()
        }
    }

    pub fn network_config(&self) -> NetworkConfig {
        let mut n = NetworkConfig::new(4, self.base_width, self.stages, self.base_width << self.stages, self.image_size);
        n.s2am_refine = self.s2am_refine;
        n.blend_background_at_inference = self.blend_background_at_inference;
        n.fusion = if self.use_style_fusion {
            FusionMode::External
        } else {
            FusionMode::Disabled
        };
        n
    }

    pub fn contrastive_config(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            k: self.k,
            tau: self.tau,
            patch_size: self.patch_size,
            downsample_factor: self.downsample_factor,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            seed: self.seed,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
        }
    }

    pub fn loss_terms(&self) -> LossTerms {
        LossTerms {
            use_lpixel: self.use_lpixel,
            use_lhcl: self.use_lhcl,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarmonizeError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            return bad(format!("adam_eps must be > 0, got {}", self.adam_eps));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("grad_clip must be > 0, got {c}"));
            }
        }
        self.loss_weights().validate()?;
        self.contrastive_config().validate()?;
        self.network_config().validate()
    }

    /// Sets one key from its textual value (parsed as JSON, else taken as a
    /// string). Unknown keys and ill-typed values are rejected by name.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let parsed = serde_json::from_str(value).unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
        self.apply_value(key, parsed)
    }

    /// Sets one key from a JSON value.
    pub fn apply_value(&mut self, key: &str, value: serde_json::Value) -> Result<()> {
        let mut doc = serde_json::to_value(&*self)?;
        let map = doc
            .as_object_mut()
            .ok_or_else(|| HarmonizeError::Config("config is not an object".into()))?;
        if !map.contains_key(key) {
            return Err(HarmonizeError::Config(format!("unknown config key `{key}`")));
        }
        let shown = value.to_string();
        map.insert(key.to_string(), value);
        *self = serde_json::from_value(doc)
            .map_err(|e| HarmonizeError::Config(format!("bad value {shown} for `{key}`: {e}")))?;
        Ok(())
    }

    /// Applies every key of a JSON object file on top of this config.
    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| HarmonizeError::io(path, e))?;
        let doc: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| HarmonizeError::Config(format!("{}: {e}", path.display())))?;
        let serde_json::Value::Object(map) = doc else {
            return Err(HarmonizeError::Config(format!("{} is not a JSON object", path.display())));
        };
        for (k, v) in map {
            self.apply_value(&k, v)?;
        }
        Ok(())
    }

    /// Applies `key=value` strings in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = parse_override(o.as_ref())?;
            self.apply_override(k, v)?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| HarmonizeError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HarmonizeError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size.max(1))
    }

    pub fn total_steps(&self, n_train: usize) -> usize {
        self.steps.unwrap_or(self.epochs * self.steps_per_epoch(n_train))
    }
}

pub fn parse_override(s: &str) -> Result<(&str, &str)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim(), v.trim())),
        _ => Err(HarmonizeError::Config(format!("override {s:?} is not key=value"))),
    }
}

/// First and second moment estimates of one parameter.
#[derive(Debug, Clone)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    pub steps: u64,
}

/// Adam with decoupled weight decay. Parameters without a gradient are
/// left untouched, decay included.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub state: BTreeMap<String, Moments>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub grad_norm: f64,
    pub updated: usize,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            grad_clip: cfg.grad_clip,
            state: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &[(String, Var)], grads: &GradStore) -> Result<UpdateStats> {
        let present: Vec<(&String, &Var, &Tensor)> = params
            .iter()
            .filter_map(|(n, v)| grads.get(v.as_tensor()).map(|g| (n, v, g)))
            .collect();
        let mut sq = 0.0;
        for (_, _, g) in &present {
            sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(HarmonizeError::numeric("gradient norm", grad_norm));
        }
        let scale = match self.grad_clip {
            Some(c) if grad_norm > c => c / (grad_norm + 1e-6),
            _ => 1.0,
        };
        for (name, var, g) in &present {
            let g = if scale != 1.0 { (*g * scale)? } else { (*g).clone() };
            let st = match self.state.entry((*name).clone()) {
                Entry::Occupied(e) => e.into_mut(),
                Entry::Vacant(e) => e.insert(Moments {
                    m: g.zeros_like()?,
                    v: g.zeros_like()?,
                    steps: 0,
                }),
            };
            st.steps += 1;
            st.m = ((&st.m * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            st.v = ((&st.v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let bc1 = 1.0 - self.beta1.powi(st.steps as i32);
            let bc2 = 1.0 - self.beta2.powi(st.steps as i32);
            let denom = ((st.v.sqrt()? / bc2.sqrt())? + self.eps)?;
            let p = var.as_tensor();
            let decayed = (p * (1.0 - self.lr * self.weight_decay))?;
            let next = (decayed - (st.m.div(&denom)? * (self.lr / bc1))?)?;
            var.set(&next)?;
        }
        Ok(UpdateStats {
            grad_norm,
            updated: present.len(),
        })
    }
}

/// Everything a run mutates: generator, embedding head, optimizer, step.
pub struct TrainState {
    pub config: TrainConfig,
    pub network: Network,
    pub head_store: ParamStore,
    pub head: EmbeddingHead,
    pub optimizer: AdamW,
    pub step: u64,
}

const HEAD_STREAM: u64 = 0x4845_4144;
const SHUFFLE_STREAM: u64 = 0x5348_5546;
const CONTRASTIVE_STREAM: u64 = 0x4843_4c00;

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let dtype = config.precision.dtype();
        let network = Network::new(config.network_config(), config.seed, dtype)?;
        let mut head_store = ParamStore::new(item_seed(config.seed, HEAD_STREAM, 0), dtype);
        let head = EmbeddingHead::new(&mut head_store, "head", &config.contrastive_config())?;
        let optimizer = AdamW::new(&config);
        Ok(Self {
            config,
            network,
            head_store,
            head,
            optimizer,
            step: 0,
        })
    }

    /// Trainable variables of generator and head, prefixed `net.` / `head.`.
    pub fn named_params(&self) -> Vec<(String, Var)> {
        let net = self.network.store().params().iter().map(|(n, v)| (format!("net.{n}"), v.clone()));
        let head = self.head_store.params().iter().map(|(n, v)| (format!("head.{n}"), v.clone()));
        net.chain(head).collect()
    }

    pub fn evaluate(&self, items: &[Result<EvalItem>]) -> Result<EvalSummary> {
        evaluate_dataset(&self.network, items, self.config.image_size)
    }
}

/// One training batch: (N, 3, S, S), (N, 1, S, S), (N, 3, S, S).
#[derive(Debug, Clone)]
pub struct Batch {
    pub composite: Tensor,
    pub mask: Tensor,
    pub target: Tensor,
    pub ids: Vec<String>,
}

/// Item order for `epoch`, a fixed permutation of (seed, epoch).
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(item_seed(seed, SHUFFLE_STREAM, epoch)));
    order
}

/// The batch used at global step `step`; depends only on (seed, step).
pub fn batch_for_step(dataset: &mut Dataset, cfg: &TrainConfig, step: u64) -> Result<Batch> {
    let n = dataset.len();
    if n == 0 {
        return Err(HarmonizeError::Argument("training set is empty".into()));
    }
    let spe = cfg.steps_per_epoch(n) as u64;
    let (epoch, b) = (step / spe, (step % spe) as usize);
    let order = epoch_order(n, cfg.seed, epoch);
    let end = ((b + 1) * cfg.batch_size).min(n);
    let samples = order[b * cfg.batch_size..end]
        .iter()
        .map(|&i| dataset.sample(i, true, cfg.image_size, cfg.seed, epoch))
        .collect::<Result<Vec<_>>>()?;
    let (composite, mask, target) = collate(&samples)?;
    Ok(Batch {
        composite,
        mask,
        target,
        ids: samples.into_iter().map(|s| s.id).collect(),
    })
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub step: u64,
    pub report: LossReport,
    pub update: UpdateStats,
    pub contrastive: Option<ContrastiveOutcome>,
}

/// Forward, combined loss, backward and one optimizer update over generator
/// and head. Disabled terms are neither evaluated nor differentiated.
pub fn train_step(state: &mut TrainState, batch: &Batch) -> Result<StepOutput> {
    let cfg = state.config.clone();
    let dt = state.network.dtype();
    let comp = batch.composite.to_dtype(dt)?;
    let mask = batch.mask.to_dtype(dt)?;
    let target = batch.target.to_dtype(dt)?;
    let out = state.network.forward(&comp, &mask, Mode::Train)?;
    let terms = cfg.loss_terms();
    let eff = terms.effective(cfg.loss_weights());
    let contrastive = if eff.lambda3 > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, CONTRASTIVE_STREAM, state.step));
        Some(harmonization_contrastive_loss(
            &out,
            &target,
            &mask,
            &state.head,
            &cfg.contrastive_config(),
            &mut rng,
        )?)
    } else {
        None
    };
    let (total, report) = total_loss(
        &out,
        &target,
        &mask,
        cfg.loss_weights(),
        terms,
        contrastive.as_ref().map(|c| (&c.loss, c.skipped)),
    )
    .inspect_err(|e| log::error!("step {}: {e}; batch {:?}", state.step, batch.ids))?;
    let grads = total.backward()?;
    let update = state
        .optimizer
        .step(&state.named_params(), &grads)
        .inspect_err(|e| log::error!("step {}: {e}; losses {report:?}", state.step))?;
    let step = state.step;
    state.step += 1;
    Ok(StepOutput {
        step,
        report,
        update,
        contrastive,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    #[serde(flatten)]
    pub report: LossReport,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub aggregate: Option<MetricReport>,
}

#[derive(Default)]
pub struct LoopOptions<'a> {
    /// Where the log and checkpoints go; nothing is written when `None`.
    pub run_dir: Option<PathBuf>,
    /// Stop before this global step instead of the configured total.
    pub until: Option<u64>,
    pub on_step: Option<&'a mut dyn FnMut(&StepOutput)>,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub final_eval: Option<EvalSummary>,
    pub checkpoint: Option<PathBuf>,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

struct RunLog {
    file: Option<BufWriter<fs::File>>,
    path: PathBuf,
}

impl RunLog {
    fn open(dir: Option<&Path>) -> Result<Self> {
        let Some(dir) = dir else {
            return Ok(Self {
                file: None,
                path: PathBuf::new(),
            });
        };
        fs::create_dir_all(dir).map_err(|e| HarmonizeError::io(dir, e))?;
        let path = dir.join(LOG_FILE);
        let f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| HarmonizeError::io(&path, e))?;
        Ok(Self {
            file: Some(BufWriter::new(f)),
            path,
        })
    }

    fn write(&mut self, kind: &str, record: &impl Serialize) -> Result<()> {
        if let Some(f) = &mut self.file {
            let mut v = serde_json::to_value(record)?;
            v["kind"] = kind.into();
            writeln!(f, "{v}").map_err(|e| HarmonizeError::io(&self.path, e))?;
            f.flush().map_err(|e| HarmonizeError::io(&self.path, e))?;
        }
        Ok(())
    }
}

/// Runs steps from `state.step` to the configured total with periodic
/// evaluation and checkpoints, then a final evaluation and checkpoint.
pub fn train_loop(
    mut state: TrainState,
    train: &mut Dataset,
    eval: &[Result<EvalItem>],
    mut opts: LoopOptions<'_>,
) -> Result<TrainOutcome> {
    let cfg = state.config.clone();
    let total = cfg.total_steps(train.len()) as u64;
    let end = opts.until.map_or(total, |u| u.min(total));
    let spe = cfg.steps_per_epoch(train.len()).max(1) as u64;
    let run_dir = opts.run_dir.clone();
    let mut log = RunLog::open(run_dir.as_deref())?;
    let mut history = Vec::new();
    let mut evals = Vec::new();
    let run_eval = |state: &TrainState, evals: &mut Vec<EvalRecord>, log: &mut RunLog| -> Result<Option<EvalSummary>> {
        if eval.is_empty() {
            return Ok(None);
        }
        let summary = state.evaluate(eval)?;
        let rec = EvalRecord {
            step: state.step,
            aggregate: summary.aggregate,
        };
        log.write("eval", &rec)?;
        evals.push(rec);
        Ok(Some(summary))
    };
    while state.step < end {
        let batch = batch_for_step(train, &cfg, state.step)?;
        let out = train_step(&mut state, &batch)?;
        let rec = StepRecord {
            step: out.step,
            epoch: out.step / spe,
            report: out.report,
            grad_norm: out.update.grad_norm,
        };
        log::debug!("step {} total {:.6}", rec.step, rec.report.total);
        log.write("step", &rec)?;
        history.push(rec);
        if let Some(f) = opts.on_step.as_mut() {
            f(&out);
        }
        if cfg.eval_every > 0 && state.step.is_multiple_of(cfg.eval_every as u64) && state.step < end {
            run_eval(&state, &mut evals, &mut log)?;
        }
        if let (Some(dir), true) = (&run_dir, cfg.checkpoint_every > 0) {
            if state.step.is_multiple_of(cfg.checkpoint_every as u64) && state.step < end {
                save_checkpoint(&state, &dir.join(format!("step{:06}.ckpt", state.step)))?;
            }
        }
    }
    let final_eval = run_eval(&state, &mut evals, &mut log)?;
    let checkpoint = match &run_dir {
        Some(dir) => {
            let p = dir.join(FINAL_CHECKPOINT);
            save_checkpoint(&state, &p)?;
            Some(p)
        }
        None => None,
    };
    Ok(TrainOutcome {
        state,
        history,
        evals,
        final_eval,
        checkpoint,
    })
}

pub const CHECKPOINT_MAGIC: &[u8; 20] = b"HARMONIZE-LAB-CKPT-1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: Precision,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    step: u64,
    config: TrainConfig,
    adam_steps: BTreeMap<String, u64>,
    tensors: Vec<TensorEntry>,
}

fn precision_of(t: &Tensor) -> Result<Precision> {
    match t.dtype() {
        DType::F32 => Ok(Precision::F32),
        DType::F64 => Ok(Precision::F64),
        d => Err(HarmonizeError::Checkpoint(format!("unsupported dtype {d:?}"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match precision_of(t)? {
        Precision::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|x| x.to_le_bytes()).collect(),
        Precision::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|x| x.to_le_bytes()).collect(),
    })
}

fn tensor_from_bytes(bytes: &[u8], entry: &TensorEntry) -> Result<Tensor> {
    let dev = candle_core::Device::Cpu;
    let t = match entry.dtype {
        Precision::F32 => {
            let v: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                .collect();
            Tensor::from_vec(v, entry.shape.as_slice(), &dev)?
        }
        Precision::F64 => {
            let v: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            Tensor::from_vec(v, entry.shape.as_slice(), &dev)?
        }
    };
    Ok(t)
}

/// Every tensor in a state, under stable checkpoint names.
fn state_tensors(state: &TrainState) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    let store = state.network.store();
    for (n, v) in store.params() {
        out.push((format!("net.param.{n}"), v.as_tensor().clone()));
    }
    for (n, v) in store.buffers() {
        out.push((format!("net.buffer.{n}"), v.as_tensor().clone()));
    }
    for (n, v) in state.head_store.params() {
        out.push((format!("head.param.{n}"), v.as_tensor().clone()));
    }
    for (n, m) in &state.optimizer.state {
        out.push((format!("adam.m.{n}"), m.m.clone()));
        out.push((format!("adam.v.{n}"), m.v.clone()));
    }
    out
}

/// Layout: magic, u64 LE header length, JSON header, raw LE tensor data.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    for (name, t) in state_tensors(state) {
        let bytes = tensor_bytes(&t)?;
        entries.push(TensorEntry {
            name,
            dtype: precision_of(&t)?,
            shape: t.dims().to_vec(),
            offset: blob.len() as u64,
            len: bytes.len() as u64,
        });
        blob.extend_from_slice(&bytes);
    }
    let header = CheckpointHeader {
        step: state.step,
        config: state.config.clone(),
        adam_steps: state.optimizer.state.iter().map(|(n, m)| (n.clone(), m.steps)).collect(),
        tensors: entries,
    };
    let header = serde_json::to_vec(&header)?;
    let tmp = path.with_extension("ckpt.tmp");
    let io = |e| HarmonizeError::io(path, e);
    {
        let mut f = BufWriter::new(fs::File::create(&tmp).map_err(io)?);
        f.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        f.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
        f.write_all(&header).map_err(io)?;
        f.write_all(&blob).map_err(io)?;
        f.flush().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

/// Rebuilds the state a checkpoint was taken from.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| HarmonizeError::io(path, e))?;
    let bad = |m: &str| HarmonizeError::Checkpoint(format!("{}: {m}", path.display()));
    let m = CHECKPOINT_MAGIC.len();
    if bytes.len() < m + 8 || &bytes[..m] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let hlen = u64::from_le_bytes(bytes[m..m + 8].try_into().expect("8 bytes")) as usize;
    let body = m + 8 + hlen;
    if bytes.len() < body {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[m + 8..body])?;
    let data = &bytes[body..];
    let mut state = TrainState::new(header.config)?;
    state.step = header.step;
    let mut adam: BTreeMap<String, (Option<Tensor>, Option<Tensor>)> = BTreeMap::new();
    let mut seen = 0usize;
    for e in &header.tensors {
        let (lo, hi) = (e.offset as usize, (e.offset + e.len) as usize);
        let t = tensor_from_bytes(data.get(lo..hi).ok_or_else(|| bad("truncated tensor data"))?, e)?;
        if t.elem_count() != e.shape.iter().product::<usize>() {
            return Err(bad(&format!("{} has the wrong length", e.name)));
        }
        if let Some(n) = e.name.strip_prefix("net.param.").or_else(|| e.name.strip_prefix("net.buffer.")) {
            state.network.store().set(n, &t)?;
            seen += 1;
        } else if let Some(n) = e.name.strip_prefix("head.param.") {
            state.head_store.set(n, &t)?;
            seen += 1;
        } else if let Some(n) = e.name.strip_prefix("adam.m.") {
            adam.entry(n.to_string()).or_default().0 = Some(t);
        } else if let Some(n) = e.name.strip_prefix("adam.v.") {
            adam.entry(n.to_string()).or_default().1 = Some(t);
        } else {
            return Err(bad(&format!("unexpected tensor {}", e.name)));
        }
    }
    let expected = state.network.store().params().len()
        + state.network.store().buffers().len()
        + state.head_store.params().len();
    if seen != expected {
        return Err(bad(&format!("expected {expected} model tensors, found {seen}")));
    }
    for (name, (m, v)) in adam {
        let (Some(m), Some(v)) = (m, v) else {
            return Err(bad(&format!("incomplete optimizer state for {name}")));
        };
        let steps = *header
            .adam_steps
            .get(&name)
            .ok_or_else(|| bad(&format!("missing step count for {name}")))?;
        state.optimizer.state.insert(name, Moments { m, v, steps });
    }
    Ok(state)
}

/// One cell of the ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub label: String,
    pub use_lpixel: bool,
    pub use_style_fusion: bool,
    pub use_lhcl: bool,
    pub k: Option<usize>,
}

impl AblationCell {
    fn flags(label: &str, lpixel: bool, sf: bool, lhcl: bool) -> Self {
        Self {
            label: label.into(),
            use_lpixel: lpixel,
            use_style_fusion: sf,
            use_lhcl: lhcl,
            k: None,
        }
    }

    /// The four loss/fusion rows, L1 only through the full model.
    pub fn flag_rows() -> Vec<Self> {
        vec![
            Self::flags("1", false, false, false),
            Self::flags("2", true, false, false),
            Self::flags("3", true, true, false),
            Self::flags("4", true, true, true),
        ]
    }

    /// Full model at each patch count.
    pub fn k_rows(ks: &[usize]) -> Vec<Self> {
        ks.iter()
            .map(|&k| Self {
                k: Some(k),
                ..Self::flags(&k.to_string(), true, true, true)
            })
            .collect()
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        c.use_lpixel = self.use_lpixel;
        c.use_style_fusion = self.use_style_fusion;
        c.use_lhcl = self.use_lhcl;
        if let Some(k) = self.k {
            c.k = k;
        }
        c
    }
}

pub const FULL_K_GRID: [usize; 4] = [128, 256, 512, 1024];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellRun {
    pub seed: u64,
    pub report: Option<MetricReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub runs: Vec<CellRun>,
    /// Per-metric median over the successful seeds.
    pub median: Option<MetricReport>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn median_report(reports: &[MetricReport]) -> Option<MetricReport> {
    let first = reports.first()?;
    let col = |f: &dyn Fn(&MetricReport) -> f64| median(reports.iter().map(f).collect());
    let opt = |f: &dyn Fn(&MetricReport) -> Option<f64>| {
        let v: Vec<f64> = reports.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| median(v))
    };
    Some(MetricReport {
        mse: col(&|r| r.mse),
        psnr: col(&|r| r.psnr),
        ssim: col(&|r| r.ssim),
        fmse: opt(&|r| r.fmse),
        fssim: opt(&|r| r.fssim),
        resolution: first.resolution,
    })
}

/// Trains and evaluates every cell once per seed. A failing run is recorded
/// in its row and does not stop the grid.
pub fn run_ablation_grid(
    base: &TrainConfig,
    cells: &[AblationCell],
    seeds: &[u64],
    train: &mut Dataset,
    eval: &[Result<EvalItem>],
    run_dir: Option<&Path>,
) -> Vec<AblationRow> {
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = cell.apply(base);
            cfg.seed = seed;
            let dir = run_dir.map(|d| d.join(format!("cell{}_seed{seed}", cell.label)));
            let result = TrainState::new(cfg).and_then(|state| {
                let opts = LoopOptions {
                    run_dir: dir,
                    ..LoopOptions::default()
                };
                train_loop(state, train, eval, opts)
            });
            let run = match result {
                Ok(o) => CellRun {
                    seed,
                    report: o.final_eval.and_then(|s| s.aggregate),
                    error: None,
                },
                Err(e) => {
                    log::warn!("ablation cell {} seed {seed} failed: {e}", cell.label);
                    CellRun {
                        seed,
                        report: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            log::info!("ablation cell {} seed {seed}: {:?}", cell.label, run.report);
            runs.push(run);
        }
        let ok: Vec<MetricReport> = runs.iter().filter_map(|r| r.report).collect();
        rows.push(AblationRow {
            cell: cell.clone(),
            median: median_report(&ok),
            runs,
        });
    }
    rows
}

fn mark(b: bool) -> &'static str {
    if b {
        "x"
    } else {
        ""
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.2}"))
}

/// `# | L1 | Lpixel | S.F. | LHCL | MSE | PSNR | fSSIM` rows.
pub fn format_flag_table(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{:<3}| {:^3} {:^6} {:^4} {:^4} | {:>8} {:>7} {:>7}\n",
        "#", "L1", "Lpixel", "S.F.", "LHCL", "MSE", "PSNR", "fSSIM"
    );
    for r in rows {
        let c = &r.cell;
        let (mse, psnr, fssim) = match &r.median {
            Some(m) => (format!("{:.2}", m.mse), format!("{:.2}", m.psnr), fmt_opt(m.fssim)),
            None => ("failed".into(), String::new(), String::new()),
        };
        s.push_str(&format!(
            "{:<3}| {:^3} {:^6} {:^4} {:^4} | {:>8} {:>7} {:>7}\n",
            c.label,
            "x",
            mark(c.use_lpixel),
            mark(c.use_style_fusion),
            mark(c.use_lhcl),
            mse,
            psnr,
            fssim
        ));
    }
    s
}

/// `Number of K | MSE | PSNR | SSIM` rows.
pub fn format_k_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<12}| {:>8} {:>7} {:>7}\n", "Number of K", "MSE", "PSNR", "SSIM");
    for r in rows {
        let k = r.cell.k.map_or_else(|| r.cell.label.clone(), |k| k.to_string());
        match &r.median {
            Some(m) => s.push_str(&format!("{k:<12}| {:>8.2} {:>7.2} {:>7.2}\n", m.mse, m.psnr, m.ssim)),
            None => s.push_str(&format!("{k:<12}| {:>8}\n", "failed")),
        }
    }
    s
}
