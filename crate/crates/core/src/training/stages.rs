use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::log::{LossLog, LossRecord};
use super::loss::{layer_mse, mse_value, soft_target_loss};
use super::optim::AdamW;
use super::plan::{SoftTarget, Stage, TrainPlan};
use super::schedule::LrSchedule;
use crate::data::{ActivationDataset, WindowSet};
use crate::model::{Capture, Model, TrainSnapshot};
use crate::params::{Bound, ParamId};
use crate::tensor::{Graph, Scalar, Tensor, Var};
use crate::{Error, Result};

/// Environment variable overriding the worker thread count.
pub const THREADS_ENV: &str = "HYENA_THREADS";

pub(crate) fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&t| t > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|t| t.get())
                .unwrap_or(1)
        })
}

/// Maps `f` over `0..n` on [`thread_count`] threads, preserving order.
pub(crate) fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let threads = thread_count().min(n);
    if threads <= 1 {
        return (0..n).map(f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    std::thread::scope(|s| {
        let workers: Vec<_> = (0..threads)
            .map(|_| {
                s.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        if i >= n {
                            break done;
                        }
                        done.push((i, f(i)));
                    }
                })
            })
            .collect();
        for w in workers {
            for (i, v) in w.join().expect("worker panicked") {
                slots[i] = Some(v);
            }
        }
    });
    slots
        .into_iter()
        .map(|v| v.expect("every index mapped"))
        .collect()
}

/// Teacher hidden states for distillation: stored datasets, or the teacher
/// itself run on the fly over a window set.
pub enum Activations<'a, F: Scalar> {
    Stored(Vec<ActivationDataset>),
    Teacher {
        teacher: &'a Model<F>,
        windows: &'a WindowSet,
    },
}

impl<'a, F: Scalar> Activations<'a, F> {
    /// Stored datasets, which must all cover the same windows.
    pub fn stored(datasets: Vec<ActivationDataset>) -> Result<Self> {
        if let Some(first) = datasets.first() {
            let m = first.manifest();
            for d in &datasets[1..] {
                let o = d.manifest();
                if o.windows_digest != m.windows_digest
                    || o.teacher_digest != m.teacher_digest
                    || d.len() != first.len()
                {
                    return Err(Error::Provenance(format!(
                        "{} and {} were not built from the same teacher and windows",
                        first.path().display(),
                        d.path().display()
                    )));
                }
            }
        }
        Ok(Activations::Stored(datasets))
    }

    pub fn teacher(teacher: &'a Model<F>, windows: &'a WindowSet) -> Self {
        Activations::Teacher { teacher, windows }
    }

    pub fn len(&self) -> usize {
        match self {
            Activations::Stored(d) => d.first().map_or(0, ActivationDataset::len),
            Activations::Teacher { windows, .. } => windows.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn context_len(&self) -> usize {
        match self {
            Activations::Stored(d) => d.first().map_or(0, |d| d.manifest().context_len),
            Activations::Teacher { windows, .. } => windows.context_len(),
        }
    }

    /// Checks provenance and that every layer in `layers` is available.
    pub fn check(&self, teacher: &Model<F>, layers: &[usize]) -> Result<()> {
        match self {
            Activations::Stored(datasets) => {
                for &l in layers {
                    let d = datasets.iter().find(|d| d.layer() == l).ok_or_else(|| {
                        Error::Data(format!("no activation dataset for layer {l}"))
                    })?;
                    d.verify_teacher(&teacher.digest())?;
                    if d.manifest().d_model != teacher.config().d_model {
                        return Err(Error::shape(format!(
                            "dataset for layer {l} has width {}, teacher has {}",
                            d.manifest().d_model,
                            teacher.config().d_model
                        )));
                    }
                }
            }
            Activations::Teacher { teacher: t, .. } => {
                if t.digest() != teacher.digest() {
                    return Err(Error::Provenance(
                        "activation source uses a different teacher".into(),
                    ));
                }
                if let Some(&l) = layers.iter().find(|&&l| l >= t.n_layers()) {
                    return Err(Error::Data(format!("teacher has no layer {l}")));
                }
            }
        }
        if self.is_empty() {
            return Err(Error::Data("activation source is empty".into()));
        }
        Ok(())
    }

    /// Tokens of sample `i` and the teacher output after each of `layers`.
    pub fn sample(&self, i: usize, layers: &[usize]) -> Result<(Vec<usize>, Vec<Tensor<F>>)> {
        match self {
            Activations::Stored(datasets) => {
                let mut tokens = None;
                let mut out = Vec::with_capacity(layers.len());
                for &l in layers {
                    let d = datasets.iter().find(|d| d.layer() == l).ok_or_else(|| {
                        Error::Data(format!("no activation dataset for layer {l}"))
                    })?;
                    let rec = d.read(i)?;
                    tokens.get_or_insert_with(|| {
                        rec.tokens.iter().map(|&t| t as usize).collect::<Vec<_>>()
                    });
                    out.push(rec.hidden.cast());
                }
                Ok((tokens.unwrap_or_default(), out))
            }
            Activations::Teacher { teacher, windows } => {
                let tokens = windows.indices(i);
                let deepest = layers.iter().map(|l| l + 1).max().unwrap_or(0);
                let hidden = teacher.hidden_states(&tokens, deepest)?;
                Ok((tokens, layers.iter().map(|&l| hidden[l].clone()).collect()))
            }
        }
    }
}

/// Mean over all samples of the layer-`layer` MSE between student and teacher.
pub fn layer_val_mse<F: Scalar>(
    student: &Model<F>,
    source: &Activations<'_, F>,
    layer: usize,
) -> Result<f64> {
    let per = par_map(source.len(), |i| -> Result<f64> {
        let (tokens, targets) = source.sample(i, &[layer])?;
        let hidden = student.hidden_states(&tokens, layer + 1)?;
        mse_value(&hidden[layer], &targets[0])
    });
    let vals = per.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(vals.iter().sum::<f64>() / vals.len().max(1) as f64)
}

/// Per-sample loss built inside a fresh graph.
trait Objective<F: Scalar>: Sync {
    fn loss<'g>(&self, model: &Model<F>, b: &Bound<'g, '_, F>, sample: usize)
        -> Result<Var<'g, F>>;
}

struct NextToken<'a, F: Scalar> {
    windows: &'a WindowSet,
    soft: Option<(&'a Model<F>, SoftTarget)>,
}

impl<F: Scalar> Objective<F> for NextToken<'_, F> {
    fn loss<'g>(
        &self,
        model: &Model<F>,
        b: &Bound<'g, '_, F>,
        sample: usize,
    ) -> Result<Var<'g, F>> {
        let tokens = self.windows.indices(sample);
        let (input, targets) = (&tokens[..tokens.len() - 1], &tokens[1..]);
        let logits = model
            .forward_graph(b, input, None, true)?
            .logits
            .expect("logits requested");
        match self.soft {
            None => logits.cross_entropy(targets),
            Some((teacher, st)) => {
                let t = teacher.forward(input, Capture::None)?.logits;
                soft_target_loss(logits, &t, st.temperature, targets, st.weight)
            }
        }
    }
}

struct LayerMatch<'a, 'b, F: Scalar> {
    source: &'b Activations<'a, F>,
    layers: Vec<usize>,
    weights: Vec<f64>,
}

impl<F: Scalar> Objective<F> for LayerMatch<'_, '_, F> {
    fn loss<'g>(
        &self,
        model: &Model<F>,
        b: &Bound<'g, '_, F>,
        sample: usize,
    ) -> Result<Var<'g, F>> {
        let (tokens, targets) = self.source.sample(sample, &self.layers)?;
        let deepest = self.layers.iter().map(|l| l + 1).max().unwrap_or(0);
        let trace = model.forward_graph(b, &tokens, Some(deepest), false)?;
        let g = b.graph();
        let mut total: Option<Var<'g, F>> = None;
        for ((&l, t), &w) in self.layers.iter().zip(targets).zip(&self.weights) {
            let target = g.constant(t.shape().to_vec(), t.into_data())?;
            let term = layer_mse(target, trace.hidden[l])?;
            let term = if w == 1.0 { term } else { term.scale(w)? };
            total = Some(match total {
                None => term,
                Some(acc) => acc.add(&term)?,
            });
        }
        total.ok_or_else(|| Error::config("objective has no layers"))
    }
}

/// Where a loop is inside a stage, stored in checkpoints for resuming.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub stage: Stage,
    pub layer: Option<usize>,
    /// Optimizer steps completed in this loop.
    pub step: u64,
    pub total_steps: u64,
    pub initial_loss: Option<f64>,
    pub streak: usize,
    pub plan: TrainPlan,
}

impl Progress {
    pub fn from_snapshot<F: Scalar>(snap: &TrainSnapshot<F>) -> Result<Self> {
        serde_json::from_value(snap.state["progress"].clone())
            .map_err(|e| Error::corrupt(format!("training progress: {e}")))
    }
}

/// Checkpointing, resume and logging around the stage drivers.
#[derive(Default)]
pub struct RunControl<F: Scalar> {
    /// Resumable checkpoint written on the plan's cadence, when halting and
    /// at the end of every loop.
    pub checkpoint: Option<PathBuf>,
    pub resume: Option<TrainSnapshot<F>>,
    /// Stop after this many optimizer steps in this call.
    pub halt_after: Option<u64>,
    pub log: LossLog,
    steps_run: u64,
}

impl<F: Scalar> RunControl<F> {
    pub fn new() -> Self {
        RunControl {
            checkpoint: None,
            resume: None,
            halt_after: None,
            log: LossLog::new(),
            steps_run: 0,
        }
    }

    pub fn steps_run(&self) -> u64 {
        self.steps_run
    }

    fn halted(&self) -> bool {
        self.halt_after.is_some_and(|h| self.steps_run >= h)
    }

    /// Resume snapshot for `(stage, layer)`, if the pending one matches.
    fn take_resume(
        &mut self,
        stage: Stage,
        layer: Option<usize>,
        plan: &TrainPlan,
    ) -> Result<Option<(Progress, TrainSnapshot<F>)>> {
        let Some(snap) = &self.resume else {
            return Ok(None);
        };
        let p = Progress::from_snapshot(snap)?;
        if p.stage != stage {
            return Err(Error::config(format!(
                "checkpoint is from stage {}, not {stage}",
                p.stage
            )));
        }
        if p.plan != *plan {
            return Err(Error::config(
                "checkpoint was written under a different training plan",
            ));
        }
        if p.layer != layer {
            return Ok(None);
        }
        let snap = self.resume.take().expect("checked above");
        Ok(Some((p, snap)))
    }
}

/// Per-epoch seeded permutation of sample indices.
struct DataOrder {
    n: usize,
    seed: u64,
    epoch: Option<u64>,
    perm: Vec<usize>,
}

impl DataOrder {
    fn new(n: usize, seed: u64) -> Self {
        DataOrder {
            n,
            seed,
            epoch: None,
            perm: Vec::new(),
        }
    }

    fn sample(&mut self, k: u64) -> usize {
        let epoch = k / self.n as u64;
        if self.epoch != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(epoch);
            self.perm = (0..self.n).collect();
            self.perm.shuffle(&mut rng);
            self.epoch = Some(epoch);
        }
        self.perm[(k % self.n as u64) as usize]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopReport {
    pub layer: Option<usize>,
    pub steps: u64,
    pub tokens: u64,
    /// Steps executed by this call; less than `steps` when resumed.
    pub steps_run: u64,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub val_mse_start: Option<f64>,
    pub val_mse_end: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    /// False when stopped early by [`RunControl::halt_after`].
    pub completed: bool,
    pub loops: Vec<LoopReport>,
}

impl StageReport {
    pub fn steps(&self) -> u64 {
        self.loops.iter().map(|l| l.steps).sum()
    }

    pub fn tokens(&self) -> u64 {
        self.loops.iter().map(|l| l.tokens).sum()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.loops.iter().rev().find_map(|l| l.final_loss)
    }
}

struct LoopSpec {
    stage: Stage,
    layer: Option<usize>,
    n_samples: usize,
    context_len: usize,
    mask: Vec<bool>,
    seed: u64,
}

fn save_checkpoint<F: Scalar>(
    model: &Model<F>,
    opt: &AdamW<F>,
    progress: &Progress,
    ctl: &RunControl<F>,
) -> Result<()> {
    if let Some(path) = &ctl.checkpoint {
        let state = serde_json::to_value(progress).map_err(|e| Error::corrupt(e.to_string()))?;
        model.save_with_state(&opt.snapshot(model.params(), state), path)?;
    }
    Ok(())
}

/// Averaged gradients and mean loss over one batch.
fn batch_gradients<F: Scalar>(
    model: &Model<F>,
    mask: &[bool],
    objective: &dyn Objective<F>,
    samples: &[usize],
) -> Result<(f64, Vec<(ParamId, Vec<F>)>)> {
    let per = par_map(
        samples.len(),
        |j| -> Result<(f64, Vec<(ParamId, Vec<F>)>)> {
            let g = Graph::new();
            let b = Bound::new(&g, model.params(), Some(mask));
            let loss = objective.loss(model, &b, samples[j])?;
            let mut grads = g.backward(&loss)?;
            Ok((loss.item().f64(), b.collect(&mut grads)))
        },
    );
    let mut sums: Vec<Option<Vec<F>>> = vec![None; model.params().len()];
    let mut loss = 0.0;
    for r in per {
        let (l, grads) = r?;
        loss += l;
        for (id, g) in grads {
            match &mut sums[id.0] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += *v),
                slot => *slot = Some(g),
            }
        }
    }
    let inv = F::c(1.0 / samples.len() as f64);
    let grads = sums
        .into_iter()
        .enumerate()
        .filter_map(|(i, g)| {
            g.map(|mut g| {
                g.iter_mut().for_each(|v| *v *= inv);
                (ParamId(i), g)
            })
        })
        .collect();
    Ok((loss / samples.len() as f64, grads))
}

fn run_loop<F: Scalar>(
    model: &mut Model<F>,
    plan: &TrainPlan,
    spec: LoopSpec,
    objective: &dyn Objective<F>,
    ctl: &mut RunControl<F>,
) -> Result<(LoopReport, bool)> {
    let total = plan.steps_for(spec.n_samples, spec.context_len);
    let schedule: LrSchedule = plan.schedule.resolve(total)?;
    let (mut progress, mut opt) = match ctl.take_resume(spec.stage, spec.layer, plan)? {
        Some((p, snap)) => (p, AdamW::restore(&snap, model.params())?),
        None => (
            Progress {
                stage: spec.stage,
                layer: spec.layer,
                step: 0,
                total_steps: total,
                initial_loss: None,
                streak: 0,
                plan: plan.clone(),
            },
            AdamW::new(plan.optim, model.params().len())?,
        ),
    };
    let mut report = LoopReport {
        layer: spec.layer,
        steps: total,
        tokens: plan.tokens_for(total, spec.context_len),
        steps_run: 0,
        initial_loss: progress.initial_loss,
        final_loss: None,
        val_mse_start: None,
        val_mse_end: None,
    };
    let mut order = DataOrder::new(spec.n_samples, spec.seed);
    let bs = plan.batch_size as u64;
    let start = Instant::now();
    while progress.step < total {
        if ctl.halted() {
            save_checkpoint(model, &opt, &progress, ctl)?;
            return Ok((report, false));
        }
        let s = progress.step;
        let samples: Vec<usize> = (s * bs..(s + 1) * bs).map(|k| order.sample(k)).collect();
        let lr = schedule.lr_at(s);
        let (loss, grads) = batch_gradients(model, &spec.mask, objective, &samples)?;
        if !loss.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite loss {loss} at step {s} of {}",
                spec.stage
            )));
        }
        opt.step(model.params_mut(), &grads, lr)?;
        let initial = *progress.initial_loss.get_or_insert(loss);
        let threshold = plan.divergence_factor * initial;
        progress.streak = if loss > threshold {
            progress.streak + 1
        } else {
            0
        };
        if progress.streak >= plan.divergence_window {
            return Err(Error::Diverged {
                step: s,
                loss,
                threshold,
                window: plan.divergence_window,
            });
        }
        progress.step += 1;
        ctl.steps_run += 1;
        report.steps_run += 1;
        report.initial_loss = progress.initial_loss;
        report.final_loss = Some(loss);
        ctl.log.push(LossRecord {
            step: s,
            stage: spec.stage,
            layer: spec.layer,
            lr,
            loss,
            wall_ms: start.elapsed().as_millis() as u64,
        })?;
        if plan
            .checkpoint_every
            .is_some_and(|k| progress.step % k == 0)
            && progress.step < total
        {
            save_checkpoint(model, &opt, &progress, ctl)?;
        }
    }
    save_checkpoint(model, &opt, &progress, ctl)?;
    Ok((report, true))
}

fn check_windows<F: Scalar>(model: &Model<F>, windows: &WindowSet) -> Result<()> {
    if windows.context_len() < 2 || windows.context_len() > model.config().context_len + 1 {
        return Err(Error::config(format!(
            "windows of {} tokens do not fit a model with context {}",
            windows.context_len(),
            model.config().context_len
        )));
    }
    if windows.is_empty() {
        return Err(Error::Data("no training windows".into()));
    }
    Ok(())
}

fn next_token_stage<F: Scalar>(
    stage: Stage,
    model: &mut Model<F>,
    windows: &WindowSet,
    teacher: Option<&Model<F>>,
    plan: &TrainPlan,
    ctl: &mut RunControl<F>,
) -> Result<StageReport> {
    plan.validate()?;
    check_windows(model, windows)?;
    let soft = match (plan.soft_target, teacher) {
        (None, _) => None,
        (Some(st), Some(t)) => {
            if t.config().vocab_size != model.config().vocab_size {
                return Err(Error::config("teacher and student vocabularies differ"));
            }
            Some((t, st))
        }
        (Some(_), None) => return Err(Error::config("soft-target training needs a teacher")),
    };
    let objective = NextToken { windows, soft };
    let spec = LoopSpec {
        stage,
        layer: None,
        n_samples: windows.len(),
        context_len: windows.context_len(),
        mask: model.all_trainable_mask(),
        seed: plan.seed,
    };
    let (report, completed) = run_loop(model, plan, spec, &objective, ctl)?;
    Ok(StageReport {
        stage,
        completed,
        loops: vec![report],
    })
}

/// Next-token cross-entropy training of every parameter.
pub fn pretrain<F: Scalar>(
    model: &mut Model<F>,
    windows: &WindowSet,
    plan: &TrainPlan,
    ctl: &mut RunControl<F>,
) -> Result<StageReport> {
    next_token_stage(Stage::Pretrain, model, windows, None, plan, ctl)
}

/// The pretraining loop warm-started from a distilled student; with
/// `plan.soft_target` set the loss mixes in the teacher's soft targets.
pub fn ce_finetune<F: Scalar>(
    student: &mut Model<F>,
    windows: &WindowSet,
    teacher: Option<&Model<F>>,
    plan: &TrainPlan,
    ctl: &mut RunControl<F>,
) -> Result<StageReport> {
    next_token_stage(Stage::Finetune, student, windows, teacher, plan, ctl)
}

fn check_pair<F: Scalar>(teacher: &Model<F>, student: &Model<F>) -> Result<()> {
    let (t, s) = (teacher.config(), student.config());
    if t.d_model != s.d_model || t.n_layers != s.n_layers || t.vocab_size != s.vocab_size {
        return Err(Error::config(format!(
            "teacher ({} layers, width {}, vocab {}) and student ({} layers, width {}, vocab {}) are incompatible",
            t.n_layers, t.d_model, t.vocab_size, s.n_layers, s.d_model, s.vocab_size
        )));
    }
    Ok(())
}

/// Parameters unfrozen while distilling `layer`: the whole block, plus the
/// embedding for the first one.
pub fn pkt_mask<F: Scalar>(student: &Model<F>, layer: usize) -> Vec<bool> {
    let mut prefixes = vec![format!("layers.{layer}")];
    if layer == 0 {
        prefixes.push("embed".into());
    }
    student.mask_prefixes(&prefixes)
}

pub(crate) fn distill_layer<F: Scalar>(
    student: &mut Model<F>,
    train: &Activations<'_, F>,
    val: Option<&Activations<'_, F>>,
    layer: usize,
    plan: &TrainPlan,
    ctl: &mut RunControl<F>,
) -> Result<(LoopReport, bool)> {
    let val_start = val.map(|v| layer_val_mse(student, v, layer)).transpose()?;
    let objective = LayerMatch {
        source: train,
        layers: vec![layer],
        weights: vec![1.0],
    };
    let spec = LoopSpec {
        stage: Stage::Pkt,
        layer: Some(layer),
        n_samples: train.len(),
        context_len: train.context_len(),
        mask: pkt_mask(student, layer),
        seed: plan.seed ^ (layer as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
    };
    let (mut report, completed) = run_loop(student, plan, spec, &objective, ctl)?;
    if report.steps_run > 0 || report.steps == 0 {
        report.val_mse_start = val_start;
    }
    if completed {
        report.val_mse_end = val.map(|v| layer_val_mse(student, v, layer)).transpose()?;
    }
    Ok((report, completed))
}

/// Layer-by-layer distillation: block `i` is trained to reproduce the
/// teacher's output after layer `i`, then frozen.
pub fn progressive_knowledge_transfer<F: Scalar>(
    teacher: &Model<F>,
    student: &mut Model<F>,
    train: &Activations<'_, F>,
    val: Option<&Activations<'_, F>>,
    plan: &TrainPlan,
    ctl: &mut RunControl<F>,
) -> Result<StageReport> {
    plan.validate()?;
    check_pair(teacher, student)?;
    let layers: Vec<usize> = (0..student.n_layers()).collect();
    train.check(teacher, &layers)?;
    if let Some(v) = val {
        v.check(teacher, &layers)?;
    }
    let first = match &ctl.resume {
        Some(snap) => Progress::from_snapshot(snap)?.layer.unwrap_or(0),
        None => 0,
    };
    let mut loops = Vec::new();
    for layer in first..student.n_layers() {
        let (report, completed) = distill_layer(student, train, val, layer, plan, ctl)?;
        loops.push(report);
        if !completed {
            return Ok(StageReport {
                stage: Stage::Pkt,
                completed: false,
                loops,
            });
        }
    }
    Ok(StageReport {
        stage: Stage::Pkt,
        completed: true,
        loops,
    })
}

/// Distillation of all layers at once against the weighted sum of per-layer
/// MSEs; nothing is frozen.
pub fn joint_knowledge_transfer<F: Scalar>(
    teacher: &Model<F>,
    student: &mut Model<F>,
    train: &Activations<'_, F>,
    plan: &TrainPlan,
    ctl: &mut RunControl<F>,
) -> Result<StageReport> {
    plan.validate()?;
    check_pair(teacher, student)?;
    let n = student.n_layers();
    let layers: Vec<usize> = (0..n).collect();
    train.check(teacher, &layers)?;
    let weights = plan.layer_weights.clone().unwrap_or_else(|| vec![1.0; n]);
    if weights.len() != n {
        return Err(Error::config(format!(
            "{} layer weights for {n} layers",
            weights.len()
        )));
    }
    let objective = LayerMatch {
        source: train,
        layers,
        weights,
    };
    let spec = LoopSpec {
        stage: Stage::Jkt,
        layer: None,
        n_samples: train.len(),
        context_len: train.context_len(),
        mask: student.all_trainable_mask(),
        seed: plan.seed,
    };
    let (report, completed) = run_loop(student, plan, spec, &objective, ctl)?;
    Ok(StageReport {
        stage: Stage::Jkt,
        completed,
        loops: vec![report],
    })
}

/// Joint objective value on one sample, without gradients.
pub fn joint_objective<F: Scalar>(
    student: &Model<F>,
    train: &Activations<'_, F>,
    sample: usize,
    weights: &[f64],
) -> Result<f64> {
    let objective = LayerMatch {
        source: train,
        layers: (0..weights.len()).collect(),
        weights: weights.to_vec(),
    };
    let g = Graph::new();
    let b = Bound::new(&g, student.params(), None);
    Ok(objective.loss(student, &b, sample)?.item().f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn data_order_is_a_permutation_per_epoch() {
        let mut o = DataOrder::new(7, 3);
        let mut first: Vec<usize> = (0..7).map(|k| o.sample(k)).collect();
        let second: Vec<usize> = (7..14).map(|k| o.sample(k)).collect();
        assert_ne!(first, second);
        first.sort();
        assert_eq!(first, (0..7).collect::<Vec<_>>());
        let mut fresh = DataOrder::new(7, 3);
        assert_eq!(fresh.sample(9), second[2]);
    }

    #[test]
    fn par_map_keeps_order() {
        assert_eq!(par_map(5, |i| i * i), vec![0, 1, 4, 9, 16]);
    }
}
