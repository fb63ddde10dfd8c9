//! Joint multi-cell training, evaluation and the optimizer.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::rc::Rc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{load_split, Sample, Split};
use crate::error::{Error, Result};
use crate::loss::{boundary_loss, gt_to_boundary, segmentation_loss, LossWeights};
use crate::metrics::{MetricAccumulator, Metrics};
use crate::model::{Bound, GradBuffer, Input, Model, ModelConfig, ParamStore};
use crate::prompt::discrimination_loss;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::types::{Cell, Domain, Task};

/// Which prompt families and losses are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub use_domain_prompts: bool,
    pub use_task_prompts_enc: bool,
    pub use_task_prompts_dec: bool,
    pub use_dis_loss: bool,
}

impl Ablation {
    /// Everything on.
    pub const FULL: Ablation = Ablation {
        use_domain_prompts: true,
        use_task_prompts_enc: true,
        use_task_prompts_dec: true,
        use_dis_loss: true,
    };
    /// Shared backbone only: no prompts, no discrimination loss.
    pub const BASELINE: Ablation = Ablation {
        use_domain_prompts: false,
        use_task_prompts_enc: false,
        use_task_prompts_dec: false,
        use_dis_loss: false,
    };

    /// Zeroes the prompt lengths of disabled families.
    pub fn apply(&self, cfg: &ModelConfig) -> ModelConfig {
        let mut out = cfg.clone();
        if !self.use_domain_prompts {
            out.domain_prompt_lengths = [0; 4];
        }
        if !self.use_task_prompts_enc {
            out.task_prompt_lengths = [0; 4];
        }
        if !self.use_task_prompts_dec {
            out.decoder_task_prompt_length = 0;
        }
        out
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::FULL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub base_lr: f64,
    pub per_task_batch: usize,
    pub cells: Vec<Cell>,
    pub weights: LossWeights,
    pub ablation: Ablation,
    /// Steps between evaluation and correlation snapshots; 0 disables them.
    pub eval_every: usize,
    pub seed: u64,
    pub crop: bool,
    pub flip: bool,
    pub clip_norm: f64,
    /// Clip the discrimination-loss gradient and the segmentation/boundary
    /// gradient to `clip_norm` separately before summing them.
    pub clip_per_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 3000,
            base_lr: 1e-4,
            per_task_batch: 2,
            cells: Cell::training_default(),
            weights: LossWeights::default(),
            ablation: Ablation::FULL,
            eval_every: 500,
            seed: 0,
            crop: true,
            flip: true,
            clip_norm: 5.0,
            clip_per_loss: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        if self.cells.is_empty() {
            return Err(Error::Config("no training cells".into()));
        }
        if self.per_task_batch == 0 {
            return Err(Error::Config("per_task_batch must be positive".into()));
        }
        if !(self.base_lr > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("base_lr and clip_norm must be positive".into()));
        }
        self.weights.validate()
    }
}

/// Step learning rate: `base` for the first half, `base / 10` until three
/// quarters, `base / 100` afterwards.
pub fn lr_schedule(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::Config(format!("step {step} outside schedule of {total_steps} steps")));
    }
    Ok(if 2 * step < total_steps {
        base_lr
    } else if 4 * step < 3 * total_steps {
        base_lr / 10.0
    } else {
        base_lr / 100.0
    })
}

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![None; store.len()],
            v: vec![None; store.len()],
        }
    }

    /// One update of every parameter that has a gradient; parameters absent
    /// from `grads` are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer, lr: f64) -> Result<()> {
        for (id, g) in grads.iter() {
            if !g.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient for `{}`", store.name(id))));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, g) in grads.iter() {
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.get_mut(id);
            for (((p, m), v), g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// One cropped, possibly flipped training example.
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub domain: Domain,
    pub task: Task,
    pub rgb: Tensor,
    pub aux: Option<Tensor>,
    pub gt: Rc<Tensor>,
    pub boundary: Rc<Tensor>,
}

impl BatchItem {
    pub fn from_sample(s: &Sample, size: usize, offset: (usize, usize), flip: bool) -> Result<Self> {
        let gt = crop(&s.gt, size, offset, flip)?;
        Ok(BatchItem {
            domain: s.domain,
            task: s.task,
            rgb: crop(&s.rgb, size, offset, flip)?,
            aux: s.aux.as_ref().map(|a| crop(a, size, offset, flip)).transpose()?,
            boundary: Rc::new(gt_to_boundary(&gt)),
            gt: Rc::new(gt),
        })
    }

    pub fn input(&self) -> Input<'_> {
        Input {
            rgb: &self.rgb,
            aux: self.aux.as_ref(),
        }
    }
}

/// Crops the trailing two axes to `size x size` at `(row, col)` and
/// optionally mirrors them horizontally.
pub fn crop(t: &Tensor, size: usize, offset: (usize, usize), flip: bool) -> Result<Tensor> {
    let shape = t.shape();
    let r = shape.len();
    if r < 2 {
        return Err(Error::shape("crop", format!("need at least 2 axes, got {shape:?}")));
    }
    let (h, w) = (shape[r - 2], shape[r - 1]);
    if offset.0 + size > h || offset.1 + size > w {
        return Err(Error::shape("crop", format!("{size}x{size} at {offset:?} exceeds {h}x{w}")));
    }
    let lead: usize = shape[..r - 2].iter().product();
    let mut out = Vec::with_capacity(lead * size * size);
    for l in 0..lead {
        for y in 0..size {
            for x in 0..size {
                let xs = if flip { size - 1 - x } else { x };
                out.push(t.data()[(l * h + offset.0 + y) * w + offset.1 + xs]);
            }
        }
    }
    let mut out_shape = shape[..r - 2].to_vec();
    out_shape.extend([size, size]);
    Tensor::new(&out_shape, out)
}

/// Training samples grouped by cell, in batching order.
#[derive(Clone, Debug, Default)]
pub struct CellSet {
    pub cells: Vec<(Cell, Vec<Sample>)>,
}

impl CellSet {
    pub fn load(root: &Path, cells: &[Cell], split: Split) -> Result<Self> {
        let cells = cells
            .iter()
            .map(|&c| Ok((c, load_split(root, c.domain, c.task, split)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(CellSet { cells })
    }

    pub fn get(&self, cell: Cell) -> Option<&[Sample]> {
        self.cells.iter().find(|(c, _)| *c == cell).map(|(_, s)| s.as_slice())
    }
}

/// Draws `per_task_batch` samples (with replacement) from every cell in
/// order, applying the same random crop and flip to all maps of a sample.
pub fn make_batch(data: &CellSet, per_task_batch: usize, size: usize, crop_on: bool, flip_on: bool, rng: &mut Rng) -> Result<Vec<BatchItem>> {
    let mut batch = Vec::with_capacity(data.cells.len() * per_task_batch);
    for (cell, samples) in &data.cells {
        if samples.is_empty() {
            return Err(Error::Config(format!("training cell {cell} has no samples")));
        }
        for _ in 0..per_task_batch {
            let s = &samples[rng.gen_range(0..samples.len())];
            let full = s.size();
            if full < size {
                return Err(Error::Config(format!("sample {} is {full}px, model expects {size}px", s.id)));
            }
            let slack = full - size;
            let offset = if crop_on {
                (rng.gen_range(0..=slack), rng.gen_range(0..=slack))
            } else {
                (slack / 2, slack / 2)
            };
            let flip = flip_on && rng.gen_bool(0.5);
            batch.push(BatchItem::from_sample(s, size, offset, flip)?);
        }
    }
    Ok(batch)
}

/// Losses of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss_seg: f64,
    pub loss_bnd: f64,
    pub loss_dis: Option<f64>,
    pub lr: f64,
}

impl StepLog {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.seg * self.loss_seg + w.bnd * self.loss_bnd + w.dis * self.loss_dis.unwrap_or(0.0)
    }
}

pub const LOG_HEADER: &str = "step,loss_seg,loss_bnd,loss_dis,lr";

pub fn log_csv(rows: &[StepLog]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in rows {
        let dis = r.loss_dis.map(|d| format!("{d:.10e}")).unwrap_or_default();
        let _ = writeln!(out, "{},{:.10e},{:.10e},{dis},{:e}", r.step, r.loss_seg, r.loss_bnd, r.lr);
    }
    out
}

/// Gradients and losses of one batch, with the discrimination-loss gradient
/// kept apart from the segmentation/boundary gradient.
pub struct SplitGradients {
    pub task: GradBuffer,
    pub dis: Option<GradBuffer>,
    pub loss_seg: f64,
    pub loss_bnd: f64,
    pub loss_dis: Option<f64>,
}

pub fn split_gradients(model: &Model, batch: &[BatchItem], weights: &LossWeights, use_dis: bool) -> Result<SplitGradients> {
    let mut grads = GradBuffer::new(&model.params);
    let scale = 1.0 / batch.len() as f64;
    let (mut seg_sum, mut bnd_sum) = (0.0, 0.0);
    for item in batch {
        let tape = Tape::new();
        let p = Bound::new(&tape, &model.params);
        let out = model.forward(&p, item.input(), item.domain, item.task)?;
        let seg = segmentation_loss(out.mask_logits, &item.gt)?;
        let bnd = boundary_loss(out.boundary_logits, &item.boundary)?;
        seg_sum += seg.value().item()?;
        bnd_sum += bnd.value().item()?;
        let loss = seg.scale(weights.seg).add(bnd.scale(weights.bnd))?;
        let mut g = tape.backward(loss)?;
        grads.absorb(p.collect(&mut g), scale)?;
    }
    let (mut dis_grads, mut dis_value) = (None, None);
    if use_dis {
        let tape = Tape::new();
        let p = Bound::new(&tape, &model.params);
        if let Some(dis) = discrimination_loss(&model.bank.aggregate(&p)?)? {
            dis_value = Some(dis.loss.value().item()?);
            let mut g = tape.backward(dis.loss.scale(weights.dis))?;
            let mut buf = GradBuffer::new(&model.params);
            buf.absorb(p.collect(&mut g), 1.0)?;
            dis_grads = Some(buf);
        }
    }
    let n = batch.len() as f64;
    Ok(SplitGradients { task: grads, dis: dis_grads, loss_seg: seg_sum / n, loss_bnd: bnd_sum / n, loss_dis: dis_value })
}

/// Gradients and losses of one batch. Segmentation and boundary losses are
/// averaged over the whole batch; the discrimination loss is added once.
pub fn batch_gradients(model: &Model, batch: &[BatchItem], weights: &LossWeights, use_dis: bool) -> Result<(GradBuffer, f64, f64, Option<f64>)> {
    let s = split_gradients(model, batch, weights, use_dis)?;
    let mut grads = s.task;
    if let Some(d) = &s.dis {
        grads.merge(d)?;
    }
    Ok((grads, s.loss_seg, s.loss_bnd, s.loss_dis))
}

fn clip(grads: &mut GradBuffer, max_norm: f64) {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
}

/// Everything a run produces besides the trained weights.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<StepLog>,
    pub snapshots: Vec<Snapshot>,
}

#[derive(Clone, Debug)]
pub struct Snapshot {
    pub step: usize,
    pub correlation_csv: String,
    pub metrics: Vec<Metrics>,
}

/// Runs the training loop on `model` in place. The model's prompt lengths
/// must already reflect the ablation (see [`Ablation::apply`]). `test`
/// enables periodic evaluation snapshots.
pub fn train(cfg: &TrainConfig, model: &mut Model, data: &CellSet, test: Option<&CellSet>) -> Result<TrainReport> {
    cfg.validate()?;
    let expected = cfg.ablation.apply(&model.config);
    if expected != model.config {
        return Err(Error::Config("model prompt lengths do not match the ablation flags".into()));
    }
    for cell in &cfg.cells {
        if data.get(*cell).is_none() {
            return Err(Error::Config(format!("no training data for cell {cell}")));
        }
    }
    let ordered = CellSet {
        cells: cfg
            .cells
            .iter()
            .map(|&c| (c, data.get(c).expect("checked").to_vec()))
            .collect(),
    };
    let size = model.config.image_size;
    let mut rng = rng::seeded(rng::mix_seed(&[cfg.seed, 0x7a11]));
    let mut adam = Adam::new(&model.params);
    let mut log = Vec::with_capacity(cfg.total_steps);
    let mut snapshots = Vec::new();
    for step in 0..cfg.total_steps {
        let lr = lr_schedule(step, cfg.total_steps, cfg.base_lr)?;
        let batch = make_batch(&ordered, cfg.per_task_batch, size, cfg.crop, cfg.flip, &mut rng)?;
        let SplitGradients { task: mut grads, dis: dis_grads, loss_seg: seg, loss_bnd: bnd, loss_dis: dis } =
            split_gradients(model, &batch, &cfg.weights, cfg.ablation.use_dis_loss)?;
        let finite = grads.is_finite() && dis_grads.as_ref().map_or(true, |d| d.is_finite());
        if !seg.is_finite() || !bnd.is_finite() || dis.is_some_and(|d| !d.is_finite()) || !finite {
            return Err(Error::Numerical(format!("non-finite loss or gradient at step {step}")));
        }
        if cfg.clip_per_loss {
            clip(&mut grads, cfg.clip_norm);
            if let Some(mut d) = dis_grads {
                clip(&mut d, cfg.clip_norm);
                grads.merge(&d)?;
            }
        } else {
            if let Some(d) = &dis_grads {
                grads.merge(d)?;
            }
            clip(&mut grads, cfg.clip_norm);
        }
        adam.step(&mut model.params, &grads, lr)?;
        log.push(StepLog {
            step,
            loss_seg: seg,
            loss_bnd: bnd,
            loss_dis: dis,
            lr,
        });
        let done = step + 1;
        if cfg.eval_every > 0 && (done % cfg.eval_every == 0 || done == cfg.total_steps) {
            let mut metrics = Vec::new();
            if let Some(test) = test {
                for (cell, samples) in &test.cells {
                    if samples.is_empty() {
                        continue;
                    }
                    let (max_f, mae) = evaluate_samples(model, samples, *cell, false)?;
                    metrics.push(Metrics {
                        dataset: cell.dir_name(),
                        domain: cell.domain.to_string(),
                        task: cell.task.to_string(),
                        max_f,
                        mae,
                        zero_shot: !cfg.cells.contains(cell),
                        rgb_only: false,
                        split: Split::Test.to_string(),
                        samples: samples.len(),
                    });
                }
            }
            snapshots.push(Snapshot {
                step: done,
                correlation_csv: model.bank.correlation_report(&model.params).to_csv(),
                metrics,
            });
        }
    }
    Ok(TrainReport { log, snapshots })
}

/// Dataset-level `(maxF, mae)` for `samples` under the prompt composition of
/// `cell`. With `rgb_only` the auxiliary maps are ignored and the rgb domain
/// prompts are used with the same task prompts. Samples are centre-cropped
/// to the model's input size.
pub fn evaluate_samples(model: &Model, samples: &[Sample], cell: Cell, rgb_only: bool) -> Result<(f64, f64)> {
    let size = model.config.image_size;
    let mut acc = MetricAccumulator::default();
    for s in samples {
        let full = s.size();
        if full < size {
            return Err(Error::Config(format!("sample {} is {full}px, model expects {size}px", s.id)));
        }
        let o = (full - size) / 2;
        let item = BatchItem::from_sample(s, size, (o, o), false)?;
        let (input, domain) = if rgb_only {
            (
                Input {
                    rgb: &item.rgb,
                    aux: None,
                },
                Domain::Rgb,
            )
        } else {
            (item.input(), cell.domain)
        };
        let pred = model.predict(input, domain, cell.task)?;
        acc.add(&pred.mask_probs(), &item.gt)?;
    }
    acc.finish()
        .ok_or_else(|| Error::Config(format!("no test samples for cell {cell}")))
}

/// Writes the log, snapshot CSV/JSON files and the resolved config below
/// `dir`.
pub fn write_report(dir: &Path, cfg: &TrainConfig, report: &TrainReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let log_path = dir.join("log.csv");
    fs::write(&log_path, log_csv(&report.log)).map_err(|e| Error::io(&log_path, e))?;
    let cfg_path = dir.join("train_config.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(cfg)? + "\n").map_err(|e| Error::io(&cfg_path, e))?;
    if !report.snapshots.is_empty() {
        let snap_dir = dir.join("snapshots");
        fs::create_dir_all(&snap_dir).map_err(|e| Error::io(&snap_dir, e))?;
        for s in &report.snapshots {
            let p = snap_dir.join(format!("correlation_step{:06}.csv", s.step));
            fs::write(&p, &s.correlation_csv).map_err(|e| Error::io(&p, e))?;
            if !s.metrics.is_empty() {
                let p = snap_dir.join(format!("metrics_step{:06}.json", s.step));
                fs::write(&p, serde_json::to_string_pretty(&s.metrics)? + "\n").map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    Ok(())
}
