//! The training schedule: three detection phases on progressively harder
//! data, each initialized from the previous phase's weights, all feeding one
//! detection cache; then a segmentation stage on the union of the two
//! cropped sets, feeding a segmentation cache.
//!
//! * D1: raw items cropped around their ground truth (plus a margin).
//! * D2: raw items cropped around the thresholded prediction of the
//!   detection cache as it stands after phase I (frozen once built).
//! * D3: the raw items themselves, empty slices included.
//!
//! Seeds: the initial weights come from `derive_seed(seed, 0)`. Phase `k`
//! (1 = I, 2 = II, 3 = III, 4 = segmentation) shuffles epoch `e` (from 0)
//! with `derive_seed(derive_seed(derive_seed(seed, k), opt.seed), e)`, where
//! `opt` is that phase's optimizer configuration.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{train_step, Backbone, Discriminator, OptState, OptimizerConfig};
use crate::ema::{CacheModel, SwitchMode, DEFAULT_ALPHA};
use crate::error::{CksError, Result};
use crate::evaluation::dsc;
use crate::geometry::{
    bbox_from_mask, crop_image_with, crop_mask_with, pad_to_align, plan_crop, threshold, DEFAULT_MARGIN,
};
use crate::losses::LossConfig;
use crate::predictor::{plan_from_probs, predict, predict_full, PredictConfig};
use crate::rng::{derive_seed, Rng64};
use crate::synthdata_io::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::types::{DatasetItem, DatasetPhase, Image, LayoutId, LossBreakdown, Mask, ParamVector, PhaseId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    I,
    II,
    III,
    #[serde(rename = "seg")]
    Segmentation,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::I, Phase::II, Phase::III, Phase::Segmentation];

    pub fn number(self) -> u64 {
        match self {
            Phase::I => 1,
            Phase::II => 2,
            Phase::III => 3,
            Phase::Segmentation => 4,
        }
    }

    /// Detection phase from its number (1, 2 or 3).
    pub fn detection(n: u64) -> Option<Phase> {
        match n {
            1 => Some(Phase::I),
            2 => Some(Phase::II),
            3 => Some(Phase::III),
            _ => None,
        }
    }

    fn dir_name(self) -> &'static str {
        match self {
            Phase::I => "phase1",
            Phase::II => "phase2",
            Phase::III => "phase3",
            Phase::Segmentation => "segmentation",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::I => "I",
            Phase::II => "II",
            Phase::III => "III",
            Phase::Segmentation => "seg",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheCadence {
    PerStep,
    PerEpoch,
}

/// What D2 uses when the thresholded cache prediction is empty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum D2Fallback {
    WholeImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseConfig {
    pub phase1: OptimizerConfig,
    pub phase2: OptimizerConfig,
    pub phase3: OptimizerConfig,
    pub segmentation: OptimizerConfig,
    pub alpha: f64,
    pub switch_mode: SwitchMode,
    pub cache_update: CacheCadence,
    pub crop_margin: usize,
    pub d2_threshold: f64,
    pub d2_fallback: D2Fallback,
    pub seed: u64,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        PhaseConfig {
            phase1: OptimizerConfig::default(),
            phase2: OptimizerConfig::default(),
            phase3: OptimizerConfig::default(),
            segmentation: OptimizerConfig::default(),
            alpha: DEFAULT_ALPHA,
            switch_mode: SwitchMode::Momentum,
            cache_update: CacheCadence::PerStep,
            crop_margin: DEFAULT_MARGIN,
            d2_threshold: 0.5,
            d2_fallback: D2Fallback::WholeImage,
            seed: 0,
        }
    }
}

impl PhaseConfig {
    pub fn optimizer(&self, phase: Phase) -> &OptimizerConfig {
        match phase {
            Phase::I => &self.phase1,
            Phase::II => &self.phase2,
            Phase::III => &self.phase3,
            Phase::Segmentation => &self.segmentation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for phase in Phase::ALL {
            self.optimizer(phase).validate()?;
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(CksError::AlphaOutOfRange(self.alpha));
        }
        if !(self.d2_threshold > 0.0 && self.d2_threshold < 1.0) {
            return Err(CksError::InvalidArgument(format!(
                "d2_threshold must lie in (0, 1), got {}",
                self.d2_threshold
            )));
        }
        Ok(())
    }

    fn shuffle_stream(&self, phase: Phase) -> u64 {
        derive_seed(derive_seed(self.seed, phase.number()), self.optimizer(phase).seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub phase: Phase,
    /// 1-based epoch within the phase.
    pub epoch: usize,
    /// Optimizer steps taken by the whole run so far.
    pub steps: u64,
    /// Mean pre-step loss over the epoch's batches.
    pub loss: LossBreakdown,
    /// Mean validation DSC of the phase's cache at the end of the epoch:
    /// detection phases score the detection cache on full images, the
    /// segmentation stage scores the crop-then-segment workflow.
    pub val_dsc: Option<f64>,
}

/// A built crop set with its bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct BuiltSet {
    pub data: DatasetPhase,
    /// Raw items left out because their ground truth is empty.
    pub skipped_empty: usize,
    /// Items whose crop fell back to the whole image.
    pub fallbacks: usize,
}

/// D1: every raw item with a non-empty mask, cropped around its ground truth.
pub fn build_d1(raw: &DatasetPhase, margin: usize, align: usize) -> Result<BuiltSet> {
    let mut items = Vec::with_capacity(raw.len());
    let mut skipped = 0;
    for it in raw.items() {
        let Some(b) = bbox_from_mask(&it.mask) else {
            skipped += 1;
            continue;
        };
        let rec = plan_crop(it.image.shape(), b, margin, align)?;
        items.push(DatasetItem::new(
            it.id.clone(),
            crop_image_with(&it.image, &rec)?,
            crop_mask_with(&it.mask, &rec)?,
            Some(rec),
        )?);
    }
    if items.is_empty() {
        return Err(CksError::EmptyDataset(format!(
            "all {} raw items have empty masks; nothing to crop",
            raw.len()
        )));
    }
    Ok(BuiltSet {
        data: DatasetPhase::new(PhaseId::D1, items)?,
        skipped_empty: skipped,
        fallbacks: 0,
    })
}

/// D2: every raw item with a non-empty mask, cropped around `det`'s
/// prediction thresholded at `threshold`; an empty prediction falls back to
/// the whole image.
pub fn build_d2(
    raw: &DatasetPhase,
    det: &(impl Discriminator + ?Sized),
    margin: usize,
    align: usize,
    threshold: f64,
) -> Result<BuiltSet> {
    let mut items = Vec::with_capacity(raw.len());
    let mut skipped = 0;
    let mut fallbacks = 0;
    for it in raw.items() {
        if it.mask.is_empty() {
            skipped += 1;
            continue;
        }
        let p = predict_full(det, &it.image)?;
        let (rec, fallback) = plan_from_probs(&p, threshold, margin, align)?;
        fallbacks += usize::from(fallback);
        items.push(DatasetItem::new(
            it.id.clone(),
            crop_image_with(&it.image, &rec)?,
            crop_mask_with(&it.mask, &rec)?,
            Some(rec),
        )?);
    }
    Ok(BuiltSet {
        data: DatasetPhase::new(PhaseId::D2, items)?,
        skipped_empty: skipped,
        fallbacks,
    })
}

/// Mean DSC of `det`'s thresholded full-image predictions.
pub fn detection_dsc(det: &(impl Discriminator + ?Sized), val: &DatasetPhase, t: f64) -> Result<f64> {
    if val.is_empty() {
        return Err(CksError::EmptyDataset("validation set is empty".into()));
    }
    let mut total = 0.0;
    for it in val.items() {
        total += dsc(&threshold(&predict_full(det, &it.image)?, t)?, &it.mask)?;
    }
    Ok(total / val.len() as f64)
}

/// Mean DSC of the crop-then-segment workflow.
pub fn workflow_dsc(
    det: &(impl Discriminator + ?Sized),
    seg: &(impl Discriminator + ?Sized),
    val: &DatasetPhase,
    cfg: &PredictConfig,
) -> Result<f64> {
    if val.is_empty() {
        return Err(CksError::EmptyDataset("validation set is empty".into()));
    }
    let mut total = 0.0;
    for it in val.items() {
        total += dsc(&predict(&it.image, det, seg, cfg)?.mask, &it.mask)?;
    }
    Ok(total / val.len() as f64)
}

/// One optimizer step as seen by an observer.
pub struct StepEvent<'a> {
    pub phase: Phase,
    /// Run-wide step number, from 1.
    pub step: u64,
    pub before: &'a ParamVector,
    pub after: &'a ParamVector,
    pub cache: &'a CacheModel,
}

/// How long a phase trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Budget {
    Epochs(usize),
    /// Exactly this many optimizer steps; the last epoch may be partial.
    Steps(u64),
}

pub fn steps_per_epoch(items: usize, batch_size: usize) -> u64 {
    items.div_ceil(batch_size) as u64
}

/// Result of one phase.
#[derive(Clone, Debug)]
pub struct PhaseOutcome {
    pub theta: ParamVector,
    pub cache: CacheModel,
    pub history: Vec<HistoryEntry>,
}

/// Where a phase's starting weights came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Init,
    Phase(Phase),
    DetectionCache,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub phase: Phase,
    pub init_from: Origin,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SetStats {
    pub count: usize,
    pub skipped_empty: usize,
    pub fallbacks: usize,
    pub mean_fg_ratio: f64,
}

impl SetStats {
    fn of(b: &BuiltSet) -> Self {
        SetStats {
            count: b.data.len(),
            skipped_empty: b.skipped_empty,
            fallbacks: b.fallbacks,
            mean_fg_ratio: b.data.mean_foreground_ratio(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub d1: Option<SetStats>,
    pub d2: Option<SetStats>,
    pub d3: Option<SetStats>,
}

#[derive(Clone, Debug)]
pub struct RunState {
    pub layout: LayoutId,
    pub theta_1: Option<ParamVector>,
    pub theta_2: Option<ParamVector>,
    pub theta_3: Option<ParamVector>,
    pub detection_cache: CacheModel,
    pub theta_seg: ParamVector,
    pub segmentation_cache: CacheModel,
    pub history: Vec<HistoryEntry>,
    pub lineage: Vec<Lineage>,
    pub stats: DatasetStats,
    pub total_steps: u64,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Checkpoints, history and logs go here; an existing run in this
    /// directory is resumed at phase granularity.
    pub run_dir: Option<PathBuf>,
    /// Detection phases to leave out.
    pub ablate: BTreeSet<Phase>,
    /// Used for the validation scores recorded during the segmentation stage.
    pub predict: PredictConfig,
}

type Observer<'a> = Box<dyn FnMut(&StepEvent<'_>) + 'a>;
type Logger<'a> = Box<dyn FnMut(&str) + 'a>;

/// Runs the schedule for one backbone and configuration.
pub struct Curriculum<'a, B: Backbone + ?Sized> {
    backbone: &'a B,
    cfg: PhaseConfig,
    loss: LossConfig,
    steps: u64,
    observer: Option<Observer<'a>>,
    logger: Option<Logger<'a>>,
}

struct Training<'d> {
    phase: Phase,
    items: Vec<(&'d Image, &'d Mask)>,
    budget: Budget,
}

enum Validation<'v> {
    None,
    Detection(&'v DatasetPhase),
    Workflow(&'v DatasetPhase, &'v CacheModel, &'v PredictConfig),
}

impl<'a, B: Backbone + ?Sized> Curriculum<'a, B> {
    pub fn new(backbone: &'a B, cfg: PhaseConfig, loss: LossConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Curriculum {
            backbone,
            cfg,
            loss,
            steps: 0,
            observer: None,
            logger: None,
        })
    }

    /// Called after every optimizer step.
    pub fn with_observer(mut self, f: impl FnMut(&StepEvent<'_>) + 'a) -> Self {
        self.observer = Some(Box::new(f));
        self
    }

    /// Receives one line per finished epoch and phase.
    pub fn with_logger(mut self, f: impl FnMut(&str) + 'a) -> Self {
        self.logger = Some(Box::new(f));
        self
    }

    pub fn config(&self) -> &PhaseConfig {
        &self.cfg
    }

    /// Optimizer steps taken so far by this trainer.
    pub fn total_steps(&self) -> u64 {
        self.steps
    }

    fn align(&self) -> usize {
        self.backbone.input_align()
    }

    fn log(&mut self, line: &str) {
        if let Some(f) = self.logger.as_mut() {
            f(line);
        }
    }

    pub fn initial_params(&self) -> ParamVector {
        self.backbone.init_params(derive_seed(self.cfg.seed, 0))
    }

    pub fn new_cache(&self, theta: &ParamVector) -> Result<CacheModel> {
        CacheModel::new(theta, self.cfg.alpha, self.cfg.switch_mode)
    }

    pub fn build_d1(&self, raw: &DatasetPhase) -> Result<BuiltSet> {
        build_d1(raw, self.cfg.crop_margin, self.align())
    }

    pub fn build_d2(&self, raw: &DatasetPhase, cache: &CacheModel) -> Result<BuiltSet> {
        let det = cache.view(self.backbone)?;
        build_d2(raw, &det, self.cfg.crop_margin, self.align(), self.cfg.d2_threshold)
    }

    fn run_training(
        &mut self,
        job: Training<'_>,
        theta0: &ParamVector,
        cache: &mut CacheModel,
        val: Validation<'_>,
    ) -> Result<(ParamVector, Vec<HistoryEntry>)> {
        let opt = self.cfg.optimizer(job.phase).clone();
        let per_epoch = steps_per_epoch(job.items.len(), opt.batch_size);
        let (epochs, step_cap) = match job.budget {
            Budget::Epochs(e) => (e, u64::MAX),
            Budget::Steps(s) if per_epoch == 0 => (0, s),
            Budget::Steps(s) => (s.div_ceil(per_epoch) as usize, s),
        };
        if epochs > 0 && job.items.is_empty() {
            return Err(CksError::EmptyDataset(format!(
                "phase {} has no training items",
                job.phase
            )));
        }
        let stream = self.cfg.shuffle_stream(job.phase);
        let mut theta = theta0.clone();
        let mut state = OptState::new(theta.len());
        let mut history = Vec::with_capacity(epochs);
        let mut taken = 0u64;
        for epoch in 0..epochs {
            let mut order: Vec<usize> = (0..job.items.len()).collect();
            Rng64::new(derive_seed(stream, epoch as u64)).shuffle(&mut order);
            let mut losses = Vec::with_capacity(per_epoch as usize);
            for chunk in order.chunks(opt.batch_size) {
                if taken == step_cap {
                    break;
                }
                let batch: Vec<(&Image, &Mask)> = chunk.iter().map(|&i| job.items[i]).collect();
                let (next, next_state, breakdown) = train_step(self.backbone, &theta, &batch, &opt, &self.loss, state)
                    .map_err(|e| match e {
                        CksError::NonFiniteLoss { breakdown, .. } => CksError::NonFiniteLoss {
                            step: self.steps + 1,
                            breakdown,
                        },
                        other => other,
                    })?;
                state = next_state;
                taken += 1;
                self.steps += 1;
                if self.cfg.cache_update == CacheCadence::PerStep {
                    cache.update(&next)?;
                }
                if let Some(f) = self.observer.as_mut() {
                    f(&StepEvent {
                        phase: job.phase,
                        step: self.steps,
                        before: &theta,
                        after: &next,
                        cache,
                    });
                }
                theta = next;
                losses.push(breakdown);
            }
            if self.cfg.cache_update == CacheCadence::PerEpoch {
                cache.update(&theta)?;
            }
            let val_dsc = match val {
                Validation::None => None,
                Validation::Detection(v) => Some(detection_dsc(&cache.view(self.backbone)?, v, 0.5)?),
                Validation::Workflow(v, det, pcfg) => Some(workflow_dsc(
                    &det.view(self.backbone)?,
                    &cache.view(self.backbone)?,
                    v,
                    pcfg,
                )?),
            };
            let entry = HistoryEntry {
                phase: job.phase,
                epoch: epoch + 1,
                steps: self.steps,
                loss: LossBreakdown::mean(&losses),
                val_dsc,
            };
            let line = format!(
                "[phase {}] epoch {}/{} steps {} loss {:.4} (iou {:.4} bce {:.4} s {:.4}){}",
                entry.phase,
                entry.epoch,
                epochs,
                entry.steps,
                entry.loss.l_total,
                entry.loss.l_iou,
                entry.loss.l_bce,
                entry.loss.l_s,
                entry.val_dsc.map(|d| format!(" val_dsc {d:.4}")).unwrap_or_default()
            );
            self.log(&line);
            history.push(entry);
        }
        Ok((theta, history))
    }

    fn pairs(data: &DatasetPhase) -> Vec<(&Image, &Mask)> {
        data.items().iter().map(|it| (&it.image, &it.mask)).collect()
    }

    /// Phase I: trains fresh weights on D1 and starts the detection cache
    /// from those same initial weights.
    pub fn run_phase1(&mut self, d1: &DatasetPhase, val: Option<&DatasetPhase>) -> Result<PhaseOutcome> {
        let theta0 = self.initial_params();
        let mut cache = self.new_cache(&theta0)?;
        let epochs = self.cfg.phase1.epochs;
        self.run_detection(
            Phase::I,
            Self::pairs(d1),
            &theta0,
            &mut cache,
            Budget::Epochs(epochs),
            val,
        )
        .map(|(theta, history)| PhaseOutcome { theta, cache, history })
    }

    /// Phase II: continues from `theta_1` on D2.
    pub fn run_phase2(
        &mut self,
        d2: &DatasetPhase,
        theta_1: &ParamVector,
        mut cache: CacheModel,
        val: Option<&DatasetPhase>,
    ) -> Result<PhaseOutcome> {
        if d2.is_empty() {
            return Err(CksError::EmptyDataset("D2 is empty".into()));
        }
        let epochs = self.cfg.phase2.epochs;
        self.run_detection(
            Phase::II,
            Self::pairs(d2),
            theta_1,
            &mut cache,
            Budget::Epochs(epochs),
            val,
        )
        .map(|(theta, history)| PhaseOutcome { theta, cache, history })
    }

    /// Phase III: continues from `theta_2` on the raw images, padded to the
    /// backbone alignment.
    pub fn run_phase3(
        &mut self,
        raw: &DatasetPhase,
        theta_2: &ParamVector,
        mut cache: CacheModel,
        val: Option<&DatasetPhase>,
        budget: Budget,
    ) -> Result<PhaseOutcome> {
        let padded = pad_dataset(raw, self.align())?;
        self.run_detection(Phase::III, Self::pairs(&padded), theta_2, &mut cache, budget, val)
            .map(|(theta, history)| PhaseOutcome { theta, cache, history })
    }

    fn run_detection(
        &mut self,
        phase: Phase,
        items: Vec<(&Image, &Mask)>,
        theta0: &ParamVector,
        cache: &mut CacheModel,
        budget: Budget,
        val: Option<&DatasetPhase>,
    ) -> Result<(ParamVector, Vec<HistoryEntry>)> {
        let job = Training { phase, items, budget };
        let val = val.map_or(Validation::None, Validation::Detection);
        self.run_training(job, theta0, cache, val)
    }

    /// Segmentation stage: fresh optimizer, weights initialized from the
    /// detection cache, trained on D1 followed by D2. The detection cache is
    /// only read.
    pub fn run_segmentation_stage(
        &mut self,
        d1: &DatasetPhase,
        d2: &DatasetPhase,
        detection_cache: &CacheModel,
        val: Option<(&DatasetPhase, &PredictConfig)>,
    ) -> Result<PhaseOutcome> {
        let theta0 = detection_cache.theta_mu().clone();
        let mut cache = self.new_cache(&theta0)?;
        let mut items = Self::pairs(d1);
        items.extend(Self::pairs(d2));
        let job = Training {
            phase: Phase::Segmentation,
            items,
            budget: Budget::Epochs(self.cfg.segmentation.epochs),
        };
        let val = val.map_or(Validation::None, |(v, p)| Validation::Workflow(v, detection_cache, p));
        let (theta, history) = self.run_training(job, &theta0, &mut cache, val)?;
        Ok(PhaseOutcome { theta, cache, history })
    }

    /// Runs every phase not listed in `opts.ablate`, in order. When phase
    /// III runs, it is given the optimizer steps of the left-out phases on
    /// top of its own so the detection step budget stays equal.
    pub fn run_full(&mut self, train: &DatasetPhase, val: &DatasetPhase, opts: &RunOptions) -> Result<RunState> {
        if opts.ablate.contains(&Phase::Segmentation) {
            return Err(CksError::InvalidArgument(
                "only detection phases can be left out".into(),
            ));
        }
        let store = opts.run_dir.as_deref().map(RunStore::new);
        let manifest = RunManifest {
            schema_version: RUN_SCHEMA_VERSION,
            layout_id: self.backbone.layout_id().0,
            config: self.cfg.clone(),
            ablate: opts.ablate.iter().copied().collect(),
            predict: opts.predict.clone(),
        };
        let mut progress = match &store {
            Some(s) => s.open(&manifest)?,
            None => Progress::default(),
        };
        self.steps = progress.total_steps;
        let runs = |p: Phase| !opts.ablate.contains(&p);

        let d1 = self.build_d1(train)?;
        let theta_init = self.initial_params();
        let mut cache = self.new_cache(&theta_init)?;
        let mut latest: (ParamVector, Origin) = (theta_init, Origin::Init);
        let mut thetas: [Option<ParamVector>; 3] = [None, None, None];
        let mut lineage = Vec::new();
        let mut stats = DatasetStats {
            d1: Some(SetStats::of(&d1)),
            d2: None,
            d3: Some(SetStats {
                count: train.len(),
                skipped_empty: 0,
                fallbacks: 0,
                mean_fg_ratio: train.mean_foreground_ratio(),
            }),
        };
        let mut d2: Option<BuiltSet> = None;

        // D1 and D2 both hold one item per non-empty raw slice.
        let extra_steps: u64 = [Phase::I, Phase::II]
            .into_iter()
            .filter(|&p| !runs(p))
            .map(|p| {
                let opt = self.cfg.optimizer(p);
                opt.epochs as u64 * steps_per_epoch(d1.data.len(), opt.batch_size)
            })
            .sum();

        for phase in [Phase::I, Phase::II, Phase::III] {
            if !runs(phase) {
                continue;
            }
            lineage.push(Lineage {
                phase,
                init_from: latest.1,
            });
            if phase == Phase::II && d2.is_none() {
                let built = self.build_d2(train, &cache)?;
                stats.d2 = Some(SetStats::of(&built));
                d2 = Some(built);
            }
            let outcome = if progress.completed.contains(&phase) {
                let s = store.as_ref().expect("completed phases imply a run directory");
                s.load_phase(phase)?
            } else {
                let started = self.steps;
                let outcome = match phase {
                    Phase::I => self.run_phase1(&d1.data, Some(val)),
                    Phase::II => {
                        let set = &d2.as_ref().expect("built above").data;
                        self.run_phase2(set, &latest.0, cache.clone(), Some(val))
                    }
                    _ => {
                        let opt = &self.cfg.phase3;
                        let own = opt.epochs as u64 * steps_per_epoch(train.len(), opt.batch_size);
                        let budget = if extra_steps > 0 {
                            Budget::Steps(own + extra_steps)
                        } else {
                            Budget::Epochs(opt.epochs)
                        };
                        self.run_phase3(train, &latest.0, cache.clone(), Some(val), budget)
                    }
                }
                .map_err(|e| annotate(phase, e))?;
                progress.history.extend(outcome.history.iter().cloned());
                progress.completed.insert(phase);
                progress.total_steps = self.steps;
                if let Some(s) = &store {
                    s.save_phase(phase, &outcome, self.steps)?;
                    s.commit(&progress, &stats)?;
                }
                self.log(&format!(
                    "[phase {phase}] done: {} steps, detection cache updated {} times",
                    self.steps - started,
                    outcome.cache.update_count()
                ));
                outcome
            };
            // Phase I's cache is the one D2 is cut with.
            if phase == Phase::I && runs(Phase::II) {
                let built = self.build_d2(train, &outcome.cache)?;
                stats.d2 = Some(SetStats::of(&built));
                d2 = Some(built);
            }
            cache = outcome.cache;
            thetas[phase.number() as usize - 1] = Some(outcome.theta.clone());
            latest = (outcome.theta, Origin::Phase(phase));
        }

        let d2 = match d2 {
            Some(d) => d,
            None => {
                let built = self.build_d2(train, &cache)?;
                stats.d2 = Some(SetStats::of(&built));
                built
            }
        };
        lineage.push(Lineage {
            phase: Phase::Segmentation,
            init_from: Origin::DetectionCache,
        });
        let seg = if progress.completed.contains(&Phase::Segmentation) {
            store
                .as_ref()
                .expect("completed phases imply a run directory")
                .load_phase(Phase::Segmentation)?
        } else {
            let outcome = self
                .run_segmentation_stage(&d1.data, &d2.data, &cache, Some((val, &opts.predict)))
                .map_err(|e| annotate(Phase::Segmentation, e))?;
            progress.history.extend(outcome.history.iter().cloned());
            progress.completed.insert(Phase::Segmentation);
            progress.total_steps = self.steps;
            if let Some(s) = &store {
                s.save_phase(Phase::Segmentation, &outcome, self.steps)?;
                s.commit(&progress, &stats)?;
            }
            outcome
        };
        if let Some(s) = &store {
            // Rewrite once more so the dataset statistics are complete.
            s.commit(&progress, &stats)?;
        }

        let [theta_1, theta_2, theta_3] = thetas;
        Ok(RunState {
            layout: self.backbone.layout_id(),
            theta_1,
            theta_2,
            theta_3,
            detection_cache: cache,
            theta_seg: seg.theta,
            segmentation_cache: seg.cache,
            history: progress.history,
            lineage,
            stats,
            total_steps: self.steps,
        })
    }
}

fn annotate(phase: Phase, e: CksError) -> CksError {
    CksError::InPhase {
        phase: phase.to_string(),
        source: Box::new(e),
    }
}

/// Pads images and masks of a raw set to the alignment (zeros bottom/right).
fn pad_dataset(raw: &DatasetPhase, align: usize) -> Result<DatasetPhase> {
    if raw
        .items()
        .iter()
        .all(|it| it.image.height() % align == 0 && it.image.width() % align == 0)
    {
        return Ok(raw.clone());
    }
    let items = raw
        .items()
        .iter()
        .map(|it| {
            let (image, rec) = pad_to_align(&it.image, align)?;
            DatasetItem::new(it.id.clone(), image, crop_mask_with(&it.mask, &rec)?, None)
        })
        .collect::<Result<Vec<_>>>()?;
    DatasetPhase::new(PhaseId::D3, items)
}

pub const RUN_SCHEMA_VERSION: u32 = 1;
pub const HISTORY_FILE: &str = "history.json";
pub const RUN_FILE: &str = "run.json";
pub const LOG_FILE: &str = "train.log";

/// Identity of a run directory; a resumed run must match it exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub layout_id: String,
    pub config: PhaseConfig,
    pub ablate: Vec<Phase>,
    pub predict: PredictConfig,
}

/// `history.json`: written after every phase; lists the phases whose
/// checkpoints are complete.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HistoryFile {
    pub schema_version: u32,
    pub completed: Vec<Phase>,
    pub total_steps: u64,
    pub entries: Vec<HistoryEntry>,
    pub datasets: DatasetStats,
}

#[derive(Default)]
struct Progress {
    completed: BTreeSet<Phase>,
    history: Vec<HistoryEntry>,
    total_steps: u64,
}

/// Layout of a run directory:
///
/// ```text
/// run.json                          RunManifest
/// history.json                      HistoryFile
/// train.log                         one line per epoch and phase
/// checkpoints/<phase>/model.ckpt    final weights of the phase
/// checkpoints/<phase>/cache.ckpt    the phase's cache at its end
/// ```
///
/// `<phase>` is `phase1`, `phase2`, `phase3` or `segmentation`.
pub struct RunStore {
    dir: PathBuf,
}

impl RunStore {
    pub fn new(dir: &Path) -> Self {
        RunStore { dir: dir.to_path_buf() }
    }

    pub fn phase_dir(&self, phase: Phase) -> PathBuf {
        self.dir.join("checkpoints").join(phase.dir_name())
    }

    pub fn model_path(&self, phase: Phase) -> PathBuf {
        self.phase_dir(phase).join("model.ckpt")
    }

    pub fn cache_path(&self, phase: Phase) -> PathBuf {
        self.phase_dir(phase).join("cache.ckpt")
    }

    fn open(&self, manifest: &RunManifest) -> Result<Progress> {
        fs::create_dir_all(&self.dir).map_err(|e| CksError::io(&self.dir, e))?;
        let run_path = self.dir.join(RUN_FILE);
        if run_path.exists() {
            let text = fs::read_to_string(&run_path).map_err(|e| CksError::io(&run_path, e))?;
            let existing: RunManifest = serde_json::from_str(&text)?;
            if &existing != manifest {
                return Err(CksError::Config(format!(
                    "{} was created with a different configuration; use a fresh run directory",
                    self.dir.display()
                )));
            }
        } else {
            write_json(&run_path, manifest)?;
        }
        let hist_path = self.dir.join(HISTORY_FILE);
        if !hist_path.exists() {
            return Ok(Progress::default());
        }
        let history = read_history(&self.dir)?;
        Ok(Progress {
            completed: history.completed.into_iter().collect(),
            history: history.entries,
            total_steps: history.total_steps,
        })
    }

    fn save_phase(&self, phase: Phase, outcome: &PhaseOutcome, steps: u64) -> Result<()> {
        let tag = phase.to_string();
        save_checkpoint(
            &self.model_path(phase),
            &outcome.theta,
            &CheckpointMeta::for_params(&outcome.theta, tag.clone(), steps),
        )?;
        let c = &outcome.cache;
        let meta = CheckpointMeta {
            alpha: Some(c.alpha()),
            mode: Some(c.mode()),
            update_count: Some(c.update_count()),
            ..CheckpointMeta::for_params(c.theta_mu(), tag, steps)
        };
        save_checkpoint(&self.cache_path(phase), c.theta_mu(), &meta)
    }

    pub fn load_cache(&self, phase: Phase) -> Result<CacheModel> {
        let (theta, meta) = load_checkpoint(&self.cache_path(phase))?;
        let (Some(alpha), Some(mode), Some(count)) = (meta.alpha, meta.mode, meta.update_count) else {
            return Err(CksError::Config(format!(
                "{} lacks cache metadata",
                self.cache_path(phase).display()
            )));
        };
        CacheModel::restore(theta, alpha, count, mode)
    }

    fn load_phase(&self, phase: Phase) -> Result<PhaseOutcome> {
        let (theta, _) = load_checkpoint(&self.model_path(phase))?;
        let cache = self.load_cache(phase)?;
        let history = read_history(&self.dir)?
            .entries
            .into_iter()
            .filter(|e| e.phase == phase)
            .collect();
        Ok(PhaseOutcome { theta, cache, history })
    }

    fn commit(&self, progress: &Progress, stats: &DatasetStats) -> Result<()> {
        let file = HistoryFile {
            schema_version: RUN_SCHEMA_VERSION,
            completed: progress.completed.iter().copied().collect(),
            total_steps: progress.total_steps,
            entries: progress.history.clone(),
            datasets: stats.clone(),
        };
        write_json(&self.dir.join(HISTORY_FILE), &file)?;
        let log_path = self.dir.join(LOG_FILE);
        let mut log = fs::File::create(&log_path).map_err(|e| CksError::io(&log_path, e))?;
        for e in &file.entries {
            writeln!(
                log,
                "[phase {}] epoch {} steps {} loss {:.6} iou {:.6} bce {:.6} s {:.6} val_dsc {}",
                e.phase,
                e.epoch,
                e.steps,
                e.loss.l_total,
                e.loss.l_iou,
                e.loss.l_bce,
                e.loss.l_s,
                e.val_dsc.map_or("-".to_string(), |d| format!("{d:.6}"))
            )
            .map_err(|err| CksError::io(&log_path, err))?;
        }
        Ok(())
    }
}

pub fn read_history(run_dir: &Path) -> Result<HistoryFile> {
    let path = run_dir.join(HISTORY_FILE);
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CksError::MissingFile(path.clone()),
        _ => CksError::io(&path, e),
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, text).map_err(|e| CksError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CksError::io(path, e))
}
