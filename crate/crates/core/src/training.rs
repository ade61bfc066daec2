//! Toy-scale in-context training: task batches across domains, prompt
//! retrieval from a frozen hard-anchor set, and joint AdamW updates of the
//! network and the retrieved soft anchors.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HicError, Result};
use crate::motion::{derive_task_with_ratio, Domain, TaskSample, DEFAULT_MASK_RATIO};
use crate::numeric::{grad_check, GradCheckReport, NdBuffer, Tape, Var};
use crate::prompting::{retrieve_prompt, AnchorSet, CorpusEntry, Retrieval, SoftAnchor};
use crate::synth::Dataset;
use crate::xfusion::{forward, loss, mean_joint_error, mpjpe, LossWeights, XFusionNet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplicative learning-rate factor applied after every epoch.
    pub lr_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub loss: LossWeights,
    pub seed: u64,
    pub domains: Vec<Domain>,
    pub mask_ratio: f64,
    pub train_soft_anchors: bool,
    pub domain_filter_retrieval: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            lr_decay: 0.99,
            steps: 500,
            batch_size: 4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            loss: LossWeights::default(),
            seed: 0,
            domains: Domain::ALL.to_vec(),
            mask_ratio: DEFAULT_MASK_RATIO,
            train_soft_anchors: true,
            domain_filter_retrieval: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(HicError::config("learning_rate", "must be finite and ≥ 0"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(HicError::config("lr_decay", "must lie in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(HicError::config("batch_size", "must be positive"));
        }
        if self.domains.is_empty() {
            return Err(HicError::config("domains", "at least one domain is required"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(HicError::config("beta1", "moment factors must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(HicError::config("eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(HicError::config("weight_decay", "must be ≥ 0"));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(HicError::config("mask_ratio", "must lie in [0, 1]"));
        }
        self.loss
            .validate()
            .map_err(|e| HicError::config("loss", e.to_string()))
    }

    /// Optimizer steps per pass over every (clip, domain) pair.
    pub fn steps_per_epoch(&self, clips: usize) -> usize {
        (clips * self.domains.len()).div_ceil(self.batch_size).max(1)
    }
}

/// `lr₀ · decay^epoch`.
pub fn lr_at_epoch(base: f64, decay: f64, epoch: usize) -> f64 {
    base * decay.powi(epoch as i32)
}

/// One query with its retrieved prompt.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub clip: usize,
    pub sample: TaskSample,
    pub prompt: Retrieval,
}

/// Samples `batch_size` (clip, domain) pairs uniformly, derives the task
/// samples and retrieves a prompt for each query.
pub fn build_batch(
    dataset: &Dataset,
    anchors: &AnchorSet,
    domains: &[Domain],
    batch_size: usize,
    seed: u64,
    mask_ratio: f64,
    domain_filter: bool,
) -> Result<Vec<BatchItem>> {
    if dataset.is_empty() {
        return Err(HicError::State("dataset is empty".into()));
    }
    if anchors.is_empty() {
        return Err(HicError::State("anchor set is empty".into()));
    }
    if domains.is_empty() {
        return Err(HicError::State("no domains enabled".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch_size)
        .map(|_| {
            let clip = rng.gen_range(0..dataset.len());
            let domain = domains[rng.gen_range(0..domains.len())];
            let mask_seed: u64 = rng.gen();
            let sample =
                derive_task_with_ratio(&dataset.clips[clip], domain, mask_seed, mask_ratio)?;
            let prompt = retrieve_prompt(&sample.query_input, anchors, domain_filter.then_some(domain))?;
            Ok(BatchItem {
                clip,
                sample,
                prompt,
            })
        })
        .collect()
}

/// Loss components of one sample or averaged over several.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub total: f64,
    pub position: f64,
    pub velocity: f64,
    pub shape: f64,
}

impl LossStats {
    fn accumulate(&mut self, o: &LossStats) {
        self.total += o.total;
        self.position += o.position;
        self.velocity += o.velocity;
        self.shape += o.shape;
    }

    fn scaled(mut self, f: f64) -> LossStats {
        self.total *= f;
        self.position *= f;
        self.velocity *= f;
        self.shape *= f;
        self
    }
}

struct SampleGrad {
    stats: LossStats,
    params: Vec<NdBuffer>,
    soft: (NdBuffer, NdBuffer),
}

/// Records network, soft anchor, prompt and query on a tape; returns the
/// loss handles, the parameter leaves and the soft-anchor factor leaves.
fn record_sample(
    tape: &mut Tape,
    net: &XFusionNet,
    anchors: &AnchorSet,
    sample: &TaskSample,
    prompt: usize,
    weights: &LossWeights,
) -> Result<(crate::xfusion::LossVars, Vec<Var>, (Var, Var))> {
    let w = net.params.register(tape);
    let soft = &anchors.soft[prompt];
    let w1 = tape.leaf(soft.w1.clone());
    let w2 = tape.leaf(soft.w2.clone());
    let u = tape.mul(w1, w2)?;
    let anchor = &anchors.anchors[prompt];
    let q = tape.leaf(sample.query_input.values().clone());
    let p = tape.leaf(anchor.input.values().clone());
    let g = tape.leaf(anchor.target.values().clone());
    let out = forward(tape, net.config(), &net.layout, &net.graphs, &w, q, p, g, u)?;
    let lv = loss(tape, out.prediction, out.shape_params, sample, weights)?;
    Ok((lv, w, (w1, w2)))
}

fn stats_of(tape: &Tape, lv: &crate::xfusion::LossVars) -> LossStats {
    LossStats {
        total: tape.value(lv.total).scalar_value(),
        position: tape.value(lv.position).scalar_value(),
        velocity: lv.velocity.map_or(0.0, |v| tape.value(v).scalar_value()),
        shape: lv.shape.map_or(0.0, |v| tape.value(v).scalar_value()),
    }
}

fn sample_grad(
    net: &XFusionNet,
    anchors: &AnchorSet,
    item: &BatchItem,
    weights: &LossWeights,
) -> Result<SampleGrad> {
    let mut tape = Tape::new();
    let (lv, w, (w1, w2)) =
        record_sample(&mut tape, net, anchors, &item.sample, item.prompt.index, weights)?;
    let grads = tape.backward(lv.total)?;
    Ok(SampleGrad {
        stats: stats_of(&tape, &lv),
        params: w.iter().map(|&v| grads.get(v)).collect(),
        soft: (grads.get(w1), grads.get(w2)),
    })
}

/// Loss of one sample without gradients.
pub fn sample_loss(
    net: &XFusionNet,
    anchors: &AnchorSet,
    sample: &TaskSample,
    prompt: usize,
    weights: &LossWeights,
) -> Result<LossStats> {
    let mut tape = Tape::new();
    let (lv, _, _) = record_sample(&mut tape, net, anchors, sample, prompt, weights)?;
    Ok(stats_of(&tape, &lv))
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: NdBuffer,
    v: NdBuffer,
    steps: u32,
}

impl Moments {
    fn new(like: &NdBuffer) -> Self {
        Moments {
            m: NdBuffer::zeros(like.shape()),
            v: NdBuffer::zeros(like.shape()),
            steps: 0,
        }
    }
}

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    /// `p ← p·(1 − lr·λ) − lr·m̂ / (√v̂ + ε)` with bias-corrected moments.
    fn update(&self, p: &mut NdBuffer, g: &NdBuffer, st: &mut Moments, lr: f64) {
        st.steps += 1;
        let c1 = 1.0 - self.beta1.powi(st.steps as i32);
        let c2 = 1.0 - self.beta2.powi(st.steps as i32);
        let decay = 1.0 - lr * self.weight_decay;
        let (m, v) = (st.m.data_mut(), st.v.data_mut());
        for (i, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gv;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gv * gv;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            *pv = *pv * decay - lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Optimizer moments of every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    params: Vec<Moments>,
    soft: Vec<(Moments, Moments)>,
}

impl OptimizerState {
    pub fn new(net: &XFusionNet, anchors: &AnchorSet) -> Self {
        OptimizerState {
            params: net.params.tensors.iter().map(Moments::new).collect(),
            soft: anchors
                .soft
                .iter()
                .map(|s| (Moments::new(&s.w1), Moments::new(&s.w2)))
                .collect(),
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub position: f64,
    pub velocity: f64,
    pub shape: f64,
}

/// Network, anchors and optimizer moments under training.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: XFusionNet,
    pub anchors: AnchorSet,
    pub config: TrainConfig,
    pub optimizer: OptimizerState,
    pub step: usize,
}

impl Trainer {
    pub fn new(net: XFusionNet, anchors: AnchorSet, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let c = net.config();
        if anchors.is_empty() {
            return Err(HicError::State("anchor set is empty".into()));
        }
        if (anchors.frames(), anchors.joints(), anchors.hidden()) != (c.frames, c.joints, c.hidden) {
            return Err(HicError::dim(format!(
                "anchors are [{}, {}] with hidden {}, network expects [{}, {}] with hidden {}",
                anchors.frames(),
                anchors.joints(),
                anchors.hidden(),
                c.frames,
                c.joints,
                c.hidden
            )));
        }
        let optimizer = OptimizerState::new(&net, &anchors);
        Ok(Trainer {
            net,
            anchors,
            config,
            optimizer,
            step: 0,
        })
    }

    fn adamw(&self) -> AdamW {
        AdamW {
            beta1: self.config.beta1,
            beta2: self.config.beta2,
            eps: self.config.eps,
            weight_decay: self.config.weight_decay,
        }
    }

    pub fn lr_at_step(&self, step: usize, clips: usize) -> f64 {
        let epoch = step / self.config.steps_per_epoch(clips);
        lr_at_epoch(self.config.learning_rate, self.config.lr_decay, epoch)
    }

    /// Deterministic batch of the current step.
    pub fn next_batch(&self, dataset: &Dataset) -> Result<Vec<BatchItem>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.step as u64 + 1);
        build_batch(
            dataset,
            &self.anchors,
            &self.config.domains,
            self.config.batch_size,
            rng.gen(),
            self.config.mask_ratio,
            self.config.domain_filter_retrieval,
        )
    }

    /// Backpropagates the mean batch loss and applies one AdamW update at
    /// learning rate `lr`. Soft anchors move only when retrieved.
    pub fn train_step(&mut self, batch: &[BatchItem], lr: f64) -> Result<LossStats> {
        if batch.is_empty() {
            return Err(HicError::State("empty batch".into()));
        }
        let step = self.step;
        let tag = |e: HicError| match e {
            HicError::Numeric { op, detail } => HicError::Numeric {
                op: format!("batch {step}: {op}"),
                detail,
            },
            other => other,
        };
        let results: Vec<SampleGrad> = batch
            .par_iter()
            .map(|item| sample_grad(&self.net, &self.anchors, item, &self.config.loss))
            .collect::<Result<_>>()
            .map_err(tag)?;

        let inv = 1.0 / batch.len() as f64;
        let mut stats = LossStats::default();
        let mut grads: Vec<Vec<f64>> =
            self.net.params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        let mut soft_grads: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; self.anchors.len()];
        for (item, r) in batch.iter().zip(&results) {
            stats.accumulate(&r.stats);
            for (acc, g) in grads.iter_mut().zip(&r.params) {
                acc.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b * inv);
            }
            let slot = soft_grads[item.prompt.index].get_or_insert_with(|| {
                (vec![0.0; r.soft.0.len()], vec![0.0; r.soft.1.len()])
            });
            slot.0.iter_mut().zip(r.soft.0.data()).for_each(|(a, b)| *a += b * inv);
            slot.1.iter_mut().zip(r.soft.1.data()).for_each(|(a, b)| *a += b * inv);
        }
        let stats = stats.scaled(inv);
        if !stats.total.is_finite() {
            return Err(HicError::numeric(format!("batch {step}"), "non-finite loss"));
        }

        let opt = self.adamw();
        for ((p, g), st) in self
            .net
            .params
            .tensors
            .iter_mut()
            .zip(grads)
            .zip(&mut self.optimizer.params)
        {
            let g = NdBuffer::new(p.shape().to_vec(), g).map_err(tag)?;
            opt.update(p, &g, st, lr);
        }
        if self.config.train_soft_anchors {
            for (k, g) in soft_grads.into_iter().enumerate() {
                let Some((g1, g2)) = g else { continue };
                let SoftAnchor { w1, w2 } = &mut self.anchors.soft[k];
                let (m1, m2) = &mut self.optimizer.soft[k];
                let g1 = NdBuffer::new(w1.shape().to_vec(), g1).map_err(tag)?;
                let g2 = NdBuffer::new(w2.shape().to_vec(), g2).map_err(tag)?;
                opt.update(w1, &g1, m1, lr);
                opt.update(w2, &g2, m2, lr);
            }
        }
        self.step += 1;
        Ok(stats)
    }

    /// Runs `config.steps` steps, writing one JSON line per step to `log`.
    pub fn train(&mut self, dataset: &Dataset, mut log: Option<&mut dyn Write>) -> Result<Vec<StepRecord>> {
        let mut records = Vec::with_capacity(self.config.steps);
        for _ in 0..self.config.steps {
            let lr = self.lr_at_step(self.step, dataset.len());
            let batch = self.next_batch(dataset)?;
            let s = self.train_step(&batch, lr)?;
            let rec = StepRecord {
                step: self.step,
                lr,
                loss: s.total,
                position: s.position,
                velocity: s.velocity,
                shape: s.shape,
            };
            if let Some(w) = log.as_deref_mut() {
                let line = serde_json::to_string(&rec).expect("record serializes");
                writeln!(w, "{line}")?;
            }
            records.push(rec);
        }
        Ok(records)
    }
}

/// Mask seed used for a (clip, domain) pair outside of training batches.
pub fn eval_mask_seed(clip: usize, domain: Domain) -> u64 {
    (clip as u64) * Domain::ALL.len() as u64 + domain.index() as u64
}

/// Every (clip, domain) task with deterministic masks.
pub fn all_tasks(dataset: &Dataset, domains: &[Domain], mask_ratio: f64) -> Result<Vec<TaskSample>> {
    let mut out = Vec::with_capacity(dataset.len() * domains.len());
    for (ci, clip) in dataset.clips.iter().enumerate() {
        for &d in domains {
            out.push(derive_task_with_ratio(clip, d, eval_mask_seed(ci, d), mask_ratio)?);
        }
    }
    Ok(out)
}

/// Tasks of `dataset` as a sampling corpus.
pub fn task_corpus(dataset: &Dataset, domains: &[Domain], mask_ratio: f64) -> Result<Vec<CorpusEntry>> {
    Ok(all_tasks(dataset, domains, mask_ratio)?
        .into_iter()
        .map(CorpusEntry::from)
        .collect())
}

/// Mean loss over every (clip, domain) pair with deterministic masks.
pub fn dataset_loss(
    dataset: &Dataset,
    anchors: &AnchorSet,
    net: &XFusionNet,
    domains: &[Domain],
    weights: &LossWeights,
    domain_filter: bool,
) -> Result<LossStats> {
    let tasks = all_tasks(dataset, domains, DEFAULT_MASK_RATIO)?;
    let per: Vec<LossStats> = tasks
        .par_iter()
        .map(|t| {
            let r = retrieve_prompt(&t.query_input, anchors, domain_filter.then_some(t.domain))?;
            sample_loss(net, anchors, t, r.index, weights)
        })
        .collect::<Result<_>>()?;
    let mut total = LossStats::default();
    per.iter().for_each(|s| total.accumulate(s));
    Ok(total.scaled(1.0 / per.len() as f64))
}

/// One row of an evaluation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub domain: String,
    /// `mpjpe_mm` for pose outputs, `param_l2` for mesh outputs.
    pub metric: String,
    pub value: f64,
    pub samples: usize,
}

/// Per-domain evaluation with prompts retrieved from `anchors`.
pub fn evaluate(
    dataset: &Dataset,
    anchors: &AnchorSet,
    net: &XFusionNet,
    domains: &[Domain],
    domain_filter: bool,
) -> Result<Vec<EvalRow>> {
    evaluate_with(dataset, domains, |t| {
        let r = retrieve_prompt(&t.query_input, anchors, domain_filter.then_some(t.domain))?;
        let a = &anchors.anchors[r.index];
        let pred = net.predict(
            t.query_input.values(),
            a.input.values(),
            a.target.values(),
            &anchors.soft[r.index].value(),
        )?;
        Ok(pred.motion)
    })
}

/// Evaluation of an arbitrary predictor.
pub fn evaluate_with<P>(dataset: &Dataset, domains: &[Domain], predict: P) -> Result<Vec<EvalRow>>
where
    P: Fn(&TaskSample) -> Result<NdBuffer> + Sync,
{
    let mut rows = Vec::with_capacity(domains.len());
    for &d in domains {
        let tasks = all_tasks(dataset, &[d], DEFAULT_MASK_RATIO)?;
        let errs: Vec<f64> = tasks
            .par_iter()
            .map(|t| {
                let pred = predict(t)?;
                if d.outputs_mesh() {
                    mean_joint_error(&pred, &t.query_target)
                } else {
                    Ok(mpjpe(&pred, &t.query_target)? * dataset.length_unit_mm)
                }
            })
            .collect::<Result<_>>()?;
        rows.push(EvalRow {
            domain: d.code().to_string(),
            metric: if d.outputs_mesh() { "param_l2" } else { "mpjpe_mm" }.to_string(),
            value: errs.iter().sum::<f64>() / errs.len() as f64,
            samples: errs.len(),
        });
    }
    Ok(rows)
}

/// Gradient check of the full forward pass and loss of one sample,
/// including the retrieved soft anchor's factors.
pub fn network_grad_check(
    net: &XFusionNet,
    anchors: &AnchorSet,
    sample: &TaskSample,
    prompt: usize,
    weights: &LossWeights,
) -> Result<GradCheckReport> {
    let mut params = net.params.tensors.clone();
    let n = params.len();
    params.push(anchors.soft[prompt].w1.clone());
    params.push(anchors.soft[prompt].w2.clone());
    let anchor = &anchors.anchors[prompt];
    let f = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let u = tape.mul(vars[n], vars[n + 1])?;
        let q = tape.leaf(sample.query_input.values().clone());
        let p = tape.leaf(anchor.input.values().clone());
        let g = tape.leaf(anchor.target.values().clone());
        let out = forward(tape, net.config(), &net.layout, &net.graphs, &vars[..n], q, p, g, u)?;
        Ok(loss(tape, out.prediction, out.shape_params, sample, weights)?.total)
    };
    grad_check(f, &params)
}
