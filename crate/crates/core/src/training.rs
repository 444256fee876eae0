//! The alternating training loop: `n_repeat` discriminator (and segmentor) updates
//! per generator update, with loss telemetry and per-epoch sample snapshots.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::grad;
use crate::data::{stack, BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::losses::{
    discriminator_objective, generator_objective, segmentor_objective, LossParts, LossReport, LossWeights, StepBatch,
    TermMask,
};
use crate::networks::{build_segmentor, ArchConfig, BoundParams, ModelBundle, ParamSet, SegmentorParams};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;
use crate::types::{AttributeLabel, ImageTensor, JointSample, LatentVector, SegmentationMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentorMode {
    /// S is updated alongside D.
    #[default]
    Joint,
    /// S is fixed (typically pretrained) and only carries gradients into G.
    PretrainedFrozen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub m: usize,
    pub n_repeat: usize,
    pub weights: LossWeights,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub epochs: usize,
    pub seed: u64,
    pub segmentor_mode: SegmentorMode,
    pub ablation: TermMask,
    pub arch: ArchConfig,
    /// Random horizontal flips of sampled batches.
    pub flip: bool,
    /// Fixed inputs rendered at the end of every epoch.
    pub snapshot_count: usize,
    /// Stops after this many outer iterations when nonzero.
    pub max_iterations: u64,
}

impl TrainConfig {
    pub fn new(arch: ArchConfig) -> Self {
        Self {
            m: 16,
            n_repeat: 5,
            weights: LossWeights::default(),
            lr: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            epochs: 20,
            seed: 0,
            segmentor_mode: SegmentorMode::Joint,
            ablation: TermMask::default(),
            arch,
            flip: false,
            snapshot_count: 8,
            max_iterations: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("batch size m must be at least 1".into()));
        }
        if self.n_repeat == 0 {
            return Err(Error::Config("n_repeat must be at least 1".into()));
        }
        self.weights.validate()?;
        self.adam().validate()?;
        self.arch.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.adam_beta1, beta2: self.adam_beta2, ..AdamConfig::default() }
    }

    /// Whether segmentor updates run in the loop.
    pub fn trains_segmentor(&self) -> bool {
        self.segmentor_mode == SegmentorMode::Joint && !self.ablation.disable_segmentor
    }

    pub fn iterations_per_epoch(&self, dataset_len: usize) -> u64 {
        dataset_len.div_ceil(self.m) as u64
    }
}

/// Number of parameter updates applied to each network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateCounters {
    pub d: u64,
    pub s: u64,
    pub g: u64,
}

/// One outer iteration's telemetry. Discriminator and segmentor parts are the
/// means over the iteration's repeats; totals are recomposed from the parts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iteration: u64,
    pub epoch: u64,
    pub elapsed_secs: f64,
    #[serde(flatten)]
    pub report: LossReport,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<HistoryRecord>,
    /// `(epoch, rendered fixed inputs)` after each completed epoch.
    pub snapshots: Vec<(u64, Vec<ImageTensor>)>,
}

impl TrainHistory {
    pub fn epoch_records(&self, epoch: u64) -> Vec<&HistoryRecord> {
        self.records.iter().filter(|r| r.epoch == epoch).collect()
    }

    /// Mean generator total of one epoch.
    pub fn mean_total_g(&self, epoch: u64) -> Option<f64> {
        let recs = self.epoch_records(epoch);
        (!recs.is_empty()).then(|| recs.iter().map(|r| r.report.total_g).sum::<f64>() / recs.len() as f64)
    }

    /// Line-delimited JSON, one record per line.
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("history records serialize") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::InvalidValue(format!("history line: {e}"))))
            .collect::<Result<_>>()?;
        Ok(Self { records, snapshots: Vec::new() })
    }

    /// Plot-ready CSV with one row per outer iteration; excluded parts are empty.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "iteration", "epoch", "elapsed_secs", "adv_d", "adv_g", "gp", "cls_real", "cls_fake", "seg_real",
            "seg_fake", "total_s", "total_d", "total_g",
        ])
        .expect("in-memory csv");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            let p = &r.report.parts;
            w.write_record([
                r.iteration.to_string(),
                r.epoch.to_string(),
                r.elapsed_secs.to_string(),
                p.adv_d.to_string(),
                p.adv_g.to_string(),
                p.gp.to_string(),
                p.cls_real.to_string(),
                p.cls_fake.to_string(),
                opt(p.seg_real),
                opt(p.seg_fake),
                r.report.total_s.to_string(),
                r.report.total_d.to_string(),
                r.report.total_g.to_string(),
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
    }
}

/// Uniformly random permutation of a batch of segmentations.
pub fn shuffle_targets(segmentations: &[SegmentationMap], rng: &mut impl Rng) -> Result<Vec<SegmentationMap>> {
    if segmentations.is_empty() {
        return Err(Error::InvalidValue("cannot shuffle an empty batch".into()));
    }
    let mut out = segmentations.to_vec();
    out.shuffle(rng);
    Ok(out)
}

/// Builds the tensors for one step: shuffles targets, draws latents and mixing weights.
pub fn make_step_batch(samples: &[JointSample], n_z: usize, rng: &mut impl Rng) -> Result<StepBatch<f32>> {
    let (images, labels, segmentations) = stack::<f32>(samples)?;
    let segs: Vec<SegmentationMap> = samples.iter().map(|s| s.segmentation.clone()).collect();
    let targets = SegmentationMap::batch(&shuffle_targets(&segs, rng)?)?;
    let zs: Vec<LatentVector> = (0..samples.len()).map(|_| LatentVector::sample(n_z, rng)).collect();
    let eps = (0..samples.len()).map(|_| rng.random::<f32>()).collect();
    Ok(StepBatch { images, labels, segmentations, targets, latents: LatentVector::batch(&zs)?, eps })
}

fn gradients(total: &crate::autograd::Var<f32>, bound: &BoundParams<f32>) -> Vec<Tensor<f32>> {
    let inputs: Vec<_> = bound.vars().iter().collect();
    grad(total, &inputs, false).into_iter().map(|g| g.value().clone()).collect()
}

fn check_finite(iteration: u64, parts: &LossParts) -> Result<()> {
    let all = [parts.adv_d, parts.adv_g, parts.gp, parts.cls_real, parts.cls_fake];
    if all.iter().chain(parts.seg_real.iter()).chain(parts.seg_fake.iter()).all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { iteration, parts: format!("{parts:?}") })
    }
}

/// Fixed evaluation inputs re-rendered after every epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotInputs {
    pub latents: Vec<LatentVector>,
    pub labels: Vec<AttributeLabel>,
    pub segmentations: Vec<SegmentationMap>,
}

/// Optimizer, sampler and random state of a run at an iteration boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    pub config: TrainConfig,
    pub iteration: u64,
    pub counters: UpdateCounters,
    pub rng: ChaCha8Rng,
    pub sampler: BatchSampler,
    pub sampler_len: usize,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub opt_s: Adam,
}

/// Complete mutable state of a run; everything needed to resume exactly.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub bundle: ModelBundle,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub opt_s: Adam,
    pub rng: ChaCha8Rng,
    pub sampler: BatchSampler,
    /// Completed outer iterations.
    pub iteration: u64,
    pub counters: UpdateCounters,
    pub history: TrainHistory,
    pub snapshot_inputs: SnapshotInputs,
    dataset_len: usize,
    started: Instant,
}

impl Trainer {
    /// Fresh run: parameters and snapshot inputs come from `config.seed`; the
    /// training stream is a separate stream of the same seed.
    pub fn new(config: TrainConfig, dataset: &Dataset) -> Result<Self> {
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        let bundle = ModelBundle::new(&config.arch, &mut init)?;
        Self::with_bundle(config, dataset, bundle)
    }

    /// Fresh run around an existing bundle (e.g. with a pretrained segmentor).
    pub fn with_bundle(config: TrainConfig, dataset: &Dataset, bundle: ModelBundle) -> Result<Self> {
        config.validate()?;
        if bundle.arch() != &config.arch {
            return Err(Error::Config("bundle architecture differs from the training configuration".into()));
        }
        if dataset.len() < config.m {
            return Err(Error::Config(format!("dataset has {} samples, fewer than m = {}", dataset.len(), config.m)));
        }
        let a = &config.arch;
        if (dataset.image_size, dataset.n_s, dataset.n_c) != (a.image_size, a.n_s, a.n_c) {
            return Err(Error::Config(format!(
                "dataset geometry (size {}, n_s {}, n_c {}) does not match the architecture (size {}, n_s {}, n_c {})",
                dataset.image_size, dataset.n_s, dataset.n_c, a.image_size, a.n_s, a.n_c
            )));
        }
        let mut snap_rng = ChaCha8Rng::seed_from_u64(config.seed);
        snap_rng.set_stream(2);
        let k = config.snapshot_count.min(dataset.len());
        let picks = rand::seq::index::sample(&mut snap_rng, dataset.len(), k).into_vec();
        let snapshot_inputs = SnapshotInputs {
            latents: (0..k).map(|_| LatentVector::sample(a.n_z, &mut snap_rng)).collect(),
            labels: picks.iter().map(|&i| dataset.samples[i].label.clone()).collect(),
            segmentations: picks.iter().map(|&i| dataset.samples[(i + 1) % dataset.len()].segmentation.clone()).collect(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let adam = config.adam();
        let mut sampler = BatchSampler::new(dataset.len());
        sampler.flip = config.flip;
        Ok(Self {
            opt_g: Adam::new(adam, &bundle.generator.params),
            opt_d: Adam::new(adam, &bundle.discriminator.params),
            opt_s: Adam::new(adam, &bundle.segmentor.params),
            config,
            bundle,
            rng,
            sampler,
            iteration: 0,
            counters: UpdateCounters::default(),
            history: TrainHistory::default(),
            snapshot_inputs,
            dataset_len: dataset.len(),
            started: Instant::now(),
        })
    }

    /// Continues a run from saved state; the history restarts empty.
    pub fn resume(dataset: &Dataset, bundle: ModelBundle, state: TrainingState) -> Result<Self> {
        let mut t = Self::with_bundle(state.config, dataset, bundle)?;
        if state.sampler_len != dataset.len() {
            return Err(Error::InvalidState(format!(
                "checkpoint was taken on a dataset of {} samples, got {}",
                state.sampler_len,
                dataset.len()
            )));
        }
        t.opt_g = state.opt_g;
        t.opt_d = state.opt_d;
        t.opt_s = state.opt_s;
        t.rng = state.rng;
        t.sampler = state.sampler;
        t.iteration = state.iteration;
        t.counters = state.counters;
        Ok(t)
    }

    /// Everything besides the parameters needed to continue this run.
    pub fn state(&self) -> TrainingState {
        TrainingState {
            config: self.config.clone(),
            iteration: self.iteration,
            counters: self.counters,
            rng: self.rng.clone(),
            sampler: self.sampler.clone(),
            sampler_len: self.dataset_len,
            opt_g: self.opt_g.clone(),
            opt_d: self.opt_d.clone(),
            opt_s: self.opt_s.clone(),
        }
    }

    pub fn iterations_per_epoch(&self) -> u64 {
        self.config.iterations_per_epoch(self.dataset_len)
    }

    pub fn epoch(&self) -> u64 {
        self.iteration / self.iterations_per_epoch()
    }

    pub fn mask(&self) -> TermMask {
        self.config.ablation
    }

    fn weights(&self) -> LossWeights {
        self.config.weights
    }

    /// One descent step on the discriminator objective.
    pub fn discriminator_step(&mut self, batch: &StepBatch<f32>) -> Result<LossParts> {
        let b = &self.bundle;
        let dp = b.discriminator.params.bind(true);
        let (total, parts) =
            discriminator_objective(&b.generator, &b.discriminator, &dp, batch, &self.weights(), self.mask())?;
        check_finite(self.iteration, &parts)?;
        let grads = gradients(&total, &dp);
        self.opt_d.update(&mut self.bundle.discriminator.params, &grads)?;
        self.counters.d += 1;
        Ok(parts)
    }

    /// One descent step on the segmentor's real-image loss.
    pub fn segmentor_step(&mut self, batch: &StepBatch<f32>) -> Result<f64> {
        if self.config.segmentor_mode == SegmentorMode::PretrainedFrozen {
            return Err(Error::InvalidState("segmentor is frozen in pretrained mode".into()));
        }
        let sp = self.bundle.segmentor.params.bind(true);
        let (total, value) = segmentor_objective(&self.bundle.segmentor, &sp, batch)?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: self.iteration, parts: format!("seg_real={value}") });
        }
        let grads = gradients(&total, &sp);
        self.opt_s.update(&mut self.bundle.segmentor.params, &grads)?;
        self.counters.s += 1;
        Ok(value)
    }

    /// One descent step on the generator objective.
    pub fn generator_step(&mut self, batch: &StepBatch<f32>) -> Result<LossParts> {
        let b = &self.bundle;
        let gp = b.generator.params.bind(true);
        let (total, parts) =
            generator_objective(&b.generator, &gp, &b.discriminator, &b.segmentor, batch, &self.weights(), self.mask())?;
        check_finite(self.iteration, &parts)?;
        let grads = gradients(&total, &gp);
        self.opt_g.update(&mut self.bundle.generator.params, &grads)?;
        self.counters.g += 1;
        Ok(parts)
    }

    /// `n_repeat` D (and S) updates on fresh batches, then one G update on the last
    /// batch's latents, labels and shuffled targets.
    pub fn outer_iteration(&mut self, dataset: &Dataset) -> Result<LossReport> {
        if dataset.len() != self.dataset_len {
            return Err(Error::InvalidState("trainer was created for a different dataset".into()));
        }
        let n = self.config.n_repeat;
        let mut acc = LossParts::default();
        let mut seg_sum = 0.0;
        let mut last = None;
        for _ in 0..n {
            let samples = self.sampler.next_batch(dataset, self.config.m, &mut self.rng)?;
            let batch = make_step_batch(&samples, self.config.arch.n_z, &mut self.rng)?;
            let d = self.discriminator_step(&batch)?;
            acc.adv_d += d.adv_d;
            acc.gp += d.gp;
            acc.cls_real += d.cls_real;
            if self.config.trains_segmentor() {
                seg_sum += self.segmentor_step(&batch)?;
            }
            last = Some(batch);
        }
        let g = self.generator_step(&last.expect("n_repeat >= 1"))?;
        let k = n as f64;
        let parts = LossParts {
            adv_d: acc.adv_d / k,
            gp: acc.gp / k,
            cls_real: acc.cls_real / k,
            seg_real: self.config.trains_segmentor().then(|| seg_sum / k),
            adv_g: g.adv_g,
            cls_fake: g.cls_fake,
            seg_fake: g.seg_fake,
        };
        let report = LossReport::new(parts, &self.weights(), self.mask());
        self.history.records.push(HistoryRecord {
            iteration: self.iteration,
            epoch: self.epoch(),
            elapsed_secs: self.started.elapsed().as_secs_f64(),
            report,
        });
        self.iteration += 1;
        if self.iteration % self.iterations_per_epoch() == 0 {
            let images = self.render_snapshots()?;
            self.history.snapshots.push((self.epoch() - 1, images));
        }
        Ok(report)
    }

    pub fn render_snapshots(&self) -> Result<Vec<ImageTensor>> {
        let s = &self.snapshot_inputs;
        if s.latents.is_empty() {
            return Ok(Vec::new());
        }
        self.bundle.generator.generate(&s.latents, &s.labels, &s.segmentations)
    }

    /// Total outer iterations this configuration asks for.
    pub fn planned_iterations(&self) -> u64 {
        let full = self.config.epochs as u64 * self.iterations_per_epoch();
        match self.config.max_iterations {
            0 => full,
            cap => full.min(cap),
        }
    }

    pub fn is_finished(&self) -> bool {
        self.iteration >= self.planned_iterations()
    }

    /// Runs until the plan is complete, calling `on_iteration` after each outer
    /// iteration (for logging or checkpointing).
    pub fn run(&mut self, dataset: &Dataset, mut on_iteration: impl FnMut(&Trainer) -> Result<()>) -> Result<()> {
        while !self.is_finished() {
            self.outer_iteration(dataset)?;
            on_iteration(self)?;
        }
        Ok(())
    }
}

/// Runs a complete training job.
pub fn train(config: TrainConfig, dataset: &Dataset) -> Result<(ModelBundle, TrainHistory)> {
    let mut t = Trainer::new(config, dataset)?;
    t.run(dataset, |_| Ok(()))?;
    Ok((t.bundle, t.history))
}

/// Trains a segmentor alone on real images for `config.epochs` epochs. Returns the
/// parameters and the per-step loss stream.
pub fn pretrain_segmentor(config: &TrainConfig, dataset: &Dataset) -> Result<(SegmentorParams<f32>, Vec<f64>)> {
    config.validate()?;
    if dataset.len() < config.m {
        return Err(Error::Config(format!("dataset has {} samples, fewer than m = {}", dataset.len(), config.m)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut s = build_segmentor::<f32>(&config.arch, &mut rng)?;
    rng.set_stream(3);
    let mut opt = Adam::new(config.adam(), &s.params);
    let mut sampler = BatchSampler::new(dataset.len());
    sampler.flip = config.flip;
    let mut losses = Vec::new();
    let mut steps = config.epochs as u64 * config.iterations_per_epoch(dataset.len());
    if config.max_iterations > 0 {
        steps = steps.min(config.max_iterations);
    }
    for step in 0..steps {
        let samples = sampler.next_batch(dataset, config.m, &mut rng)?;
        let (images, _, segmentations) = stack::<f32>(&samples)?;
        let batch = StepBatch {
            images,
            labels: Tensor::zeros(&[samples.len(), config.arch.n_c]),
            targets: segmentations.clone(),
            segmentations,
            latents: Tensor::zeros(&[samples.len(), config.arch.n_z]),
            eps: vec![0.0; samples.len()],
        };
        let sp = s.params.bind(true);
        let (total, value) = segmentor_objective(&s, &sp, &batch)?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: step, parts: format!("seg_real={value}") });
        }
        let grads = gradients(&total, &sp);
        opt.update(&mut s.params, &grads)?;
        losses.push(value);
    }
    Ok((s, losses))
}

/// Parameter blocks that differ between two sets (by name).
pub fn changed_blocks(a: &ParamSet<f32>, b: &ParamSet<f32>) -> Vec<String> {
    a.blocks()
        .iter()
        .zip(b.blocks())
        .filter(|(x, y)| x.tensor.data().iter().zip(y.tensor.data()).any(|(p, q)| p.to_bits() != q.to_bits()))
        .map(|(x, _)| x.name.clone())
        .collect()
}
