//! The replay loop: one pass over a timestamped event stream through
//! inference, drift detection, gated validation, and fine-tuning, charging
//! the energy cost table along the way.
//!
//! Flow per event: background events feed the background drift detector
//! (after an unconditional bootstrap fill of the repository); animal events
//! are classified and feed the class-distribution detector. Detector
//! triggers route to the matching validation path, honoring the cooldown;
//! positive verdicts fine-tune the head on freshly synthesized data mixing
//! recent and historical backgrounds, then re-establish the reference
//! accuracy. Baselines reuse the same loop with altered trigger/selection
//! policies. Fixed seeds replay bit-identically.

use std::collections::VecDeque;
use std::path::PathBuf;

use image::RgbImage;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{
    BackgroundImage, ClassId, EventKind, LabelAccess, Scenario, SECONDS_PER_DAY,
    STREAM_BG_ID_BASE,
};
use crate::drift::{bdd_step, cdd_step, BackgroundRepository, BddState, CddState, CddStep};
use crate::model::{
    fine_tune, predict_class, train_head, Featurizer, FeaturizerSpec, Model, TrainableMask,
};
use crate::rng::{derive_rng, derive_seed};
use crate::synthesis::{
    soften_counts, synthesize_batch, ClassDistribution, SyntheticSample,
};
use crate::validation::{
    refresh_reference, validate_background_drift, validate_class_drift, ValidationCache,
    ValidationSynthCfg,
};

use super::metrics::{
    BddRecord, CddRecord, CollectedSampleRecord, FineTuneReason, FineTuneRecord, MetricsLog,
    PredictionRecord, ValidationRecord,
};
use super::{EnergyCostTable, Mode, PipelineConfig, SimError, SimResult};

const TAG_FEATURIZER: u64 = 0x10;
const TAG_PRETRAIN: u64 = 0x11;
const TAG_BDD: u64 = 0x12;
const TAG_SYNTH: u64 = 0x13;
const TAG_VALIDATION: u64 = 0x14;
const TAG_RESERVOIR: u64 = 0x15;
const TAG_FINE_TUNE: u64 = 0x16;

/// Cap on the buffer of recent animal events the collected-sample baselines
/// may draw from.
const RECENT_ANIMAL_CAP: usize = 512;

/// Reserved fraction of objects per class, held out for validation.
const RESERVED_FRACTION: f64 = 0.10;

/// Replay result: the metrics ledger and the final model.
#[derive(Debug)]
pub struct ReplayOutcome {
    pub log: MetricsLog,
    pub model: Model,
}

/// Split the object repository per class: roughly 10% of each class
/// (at least one object, and never the whole class) is reserved for
/// validation; the rest trains. Deterministic: the last objects of each
/// class are reserved.
pub fn split_reserved(
    objects: &[crate::corpus::AnimalObject],
) -> (Vec<crate::corpus::AnimalObject>, Vec<crate::corpus::AnimalObject>) {
    use std::collections::BTreeMap;
    let mut by_class: BTreeMap<ClassId, Vec<&crate::corpus::AnimalObject>> = BTreeMap::new();
    for obj in objects {
        by_class.entry(obj.class).or_default().push(obj);
    }
    let mut train = Vec::new();
    let mut reserved = Vec::new();
    for (_, group) in by_class {
        let n = group.len();
        let n_res = if n >= 2 {
            ((n as f64 * RESERVED_FRACTION).round() as usize).clamp(1, n - 1)
        } else {
            0
        };
        for (i, obj) in group.into_iter().enumerate() {
            if i < n - n_res {
                train.push(obj.clone());
            } else {
                reserved.push(obj.clone());
            }
        }
    }
    (train, reserved)
}

/// Class counts of the labeled source set.
fn source_distribution(scenario: &Scenario) -> ClassDistribution {
    let mut dist = ClassDistribution::new(scenario.num_classes);
    for img in &scenario.source {
        if img.label < scenario.num_classes {
            dist.increment(img.label);
        }
    }
    dist
}

/// Build and pretrain the model on the scenario's source set (offline
/// phase; charges no device energy). The full head trains here regardless
/// of the in-situ trainable mask.
pub fn pretrain_model(scenario: &Scenario, cfg: &PipelineConfig) -> SimResult<Model> {
    let featurizer = Featurizer::new(FeaturizerSpec {
        seed: derive_seed(cfg.seed, TAG_FEATURIZER),
        ..FeaturizerSpec::default()
    });
    let mut model = Model::new(featurizer, scenario.num_classes, TrainableMask::LinearBiasNorm);
    if !scenario.source.is_empty() {
        let images: Vec<&RgbImage> = scenario.source.iter().map(|s| &s.pixels).collect();
        let labels: Vec<ClassId> = scenario.source.iter().map(|s| s.label).collect();
        let features = model.featurizer.featurize_batch(&images)?;
        let mut tcfg = cfg.train;
        tcfg.seed = derive_seed(cfg.seed, TAG_PRETRAIN);
        train_head(&mut model.head, &features, &labels, &tcfg)?;
    }
    model.head.mask = cfg.trainable_mask;
    Ok(model)
}

/// Last-`window` prediction counts, the "current class distribution" fed to
/// softening and the validation estimates.
struct RollingCounts {
    queue: VecDeque<ClassId>,
    counts: ClassDistribution,
    window: usize,
}

impl RollingCounts {
    fn new(num_classes: usize, window: usize) -> Self {
        Self {
            queue: VecDeque::with_capacity(window + 1),
            counts: ClassDistribution::new(num_classes),
            window,
        }
    }

    fn push(&mut self, class: ClassId) {
        self.queue.push_back(class);
        self.counts.increment(class);
        if self.queue.len() > self.window {
            let old = self.queue.pop_front().unwrap();
            self.counts.counts[old] -= 1;
        }
    }
}

struct ReplayState<'a> {
    scenario: &'a Scenario,
    cfg: &'a PipelineConfig,
    costs: &'a EnergyCostTable,
    mode: Mode,
    model: Model,
    bdd: BddState,
    cdd: CddState,
    cache: ValidationCache,
    rolling: RollingCounts,
    source_dist: ClassDistribution,
    train_objects: Vec<crate::corpus::AnimalObject>,
    reserved_objects: Vec<crate::corpus::AnimalObject>,
    pending_new_bgs: Vec<u64>,
    bootstrap_done: bool,
    next_periodic: Option<f64>,
    reservoir_seen: u64,
    /// (event index, prediction at event time), newest at the back.
    recent_animals: VecDeque<(usize, ClassId)>,
    /// (event index, label) acquired by collected-sample baselines.
    collect_buffer: Vec<(usize, ClassId)>,
    fine_tune_counter: u64,
    log: MetricsLog,
    evaluator_access: LabelAccess,
    training_access: LabelAccess,
    rng_bdd: ChaCha8Rng,
    rng_synth: ChaCha8Rng,
    rng_val: ChaCha8Rng,
    rng_reservoir: ChaCha8Rng,
}

impl<'a> ReplayState<'a> {
    fn latest_distribution(&self) -> ClassDistribution {
        if self.rolling.counts.total() > 0 {
            self.rolling.counts.clone()
        } else {
            self.source_dist.clone()
        }
    }

    fn softened_distribution(&self) -> ClassDistribution {
        soften_counts(&self.latest_distribution(), self.cfg.synthesis.temperature)
    }

    fn validation_synth_cfg(&self) -> ValidationSynthCfg {
        ValidationSynthCfg {
            per_background: self.cfg.validation.per_background,
            max_set_size: self.cfg.validation.max_set_size,
            policy: self.cfg.synthesis.policy(),
        }
    }

    fn handle_background(&mut self, index: usize, t: f64) -> SimResult<()> {
        if self.mode == Mode::NoFt {
            return Ok(());
        }
        let ev = &self.scenario.stream[index];
        let bg = BackgroundImage {
            id: STREAM_BG_ID_BASE + index as u64,
            pixels: ev.image.pixels.clone(),
            timestamp: t,
            location_id: ev.image.location_id.clone(),
        };

        // Bootstrap: the repository fills with the first pool_window
        // backgrounds unconditionally, then one initial fine-tune runs.
        if !self.bootstrap_done {
            self.bdd.repo.push(bg);
            self.log.bdd.push(BddRecord {
                timestamp: t,
                bg_id: STREAM_BG_ID_BASE + index as u64,
                p_value: None,
                added: true,
                evicted: None,
            });
            if self.mode.uses_collected_samples() {
                self.collect_one(t)?;
            }
            if self.bdd.repo.len() >= self.bdd.repo.pool_window() {
                self.bootstrap(t)?;
            }
            return Ok(());
        }

        match self.mode {
            Mode::WildfitSyn => Ok(()), // repository frozen after bootstrap
            Mode::Periodic { .. } => {
                // Random-sampling repository maintenance (reservoir over the
                // whole background stream).
                self.reservoir_seen += 1;
                let capacity = self.bdd.repo.capacity() as u64;
                let added = if self.bdd.repo.len() < self.bdd.repo.capacity() {
                    self.bdd.repo.push(bg);
                    true
                } else {
                    let j = self.rng_reservoir.random_range(0..self.reservoir_seen);
                    if j < capacity {
                        self.bdd.repo.replace(j as usize, bg);
                        true
                    } else {
                        false
                    }
                };
                self.log.bdd.push(BddRecord {
                    timestamp: t,
                    bg_id: STREAM_BG_ID_BASE + index as u64,
                    p_value: None,
                    added,
                    evicted: None,
                });
                Ok(())
            }
            _ => {
                let bg_id = bg.id;
                let outcome = bdd_step(&mut self.bdd, bg, &mut self.rng_bdd)?;
                self.log.energy.bdd_tests += 1;
                self.log.bdd.push(BddRecord {
                    timestamp: t,
                    bg_id,
                    p_value: outcome.p_value,
                    added: outcome.added,
                    evicted: outcome.evicted,
                });
                if outcome.added {
                    self.pending_new_bgs.push(bg_id);
                    if outcome.evicted.is_some() {
                        let repo = &self.bdd.repo;
                        self.cache.retain_backgrounds(|id| repo.contains_id(id));
                    }
                    if self.mode.uses_collected_samples() {
                        self.collect_one(t)?;
                    }
                    if self.mode.validates_background() {
                        self.maybe_validate_background(t)?;
                    }
                }
                Ok(())
            }
        }
    }

    fn maybe_validate_background(&mut self, t: f64) -> SimResult<()> {
        // The replay honors the cooldown; calling the validator inside the
        // window would be a caller bug and an error.
        if let Some(last) = self.cache.last_bdd_validation_time {
            if t - last < self.cache.cooldown_days * SECONDS_PER_DAY {
                return Ok(());
            }
        }
        if self.pending_new_bgs.is_empty() {
            return Ok(());
        }
        let dist = self.softened_distribution();
        let synth_cfg = self.validation_synth_cfg();
        let pending = std::mem::take(&mut self.pending_new_bgs);
        let verdict = validate_background_drift(
            &mut self.cache,
            &self.model,
            &self.bdd.repo,
            &pending,
            &self.reserved_objects,
            &dist,
            &synth_cfg,
            &mut self.rng_val,
            t,
        )?;
        self.log.energy.validation_images += verdict.images_inferred as u64;
        self.log.validations.push(ValidationRecord {
            timestamp: t,
            kind: crate::drift::DriftKind::Background,
            measured_accuracy: verdict.measured_accuracy,
            fine_tune_needed: verdict.fine_tune_needed,
            images_inferred: verdict.images_inferred,
            images_reused: verdict.images_reused,
        });
        if verdict.fine_tune_needed {
            self.do_fine_tune(FineTuneReason::BackgroundDrift, t)?;
        }
        Ok(())
    }

    fn handle_animal(&mut self, index: usize, t: f64) -> SimResult<()> {
        let ev = &self.scenario.stream[index];
        let features = self.model.featurizer.featurize(&ev.image.pixels)?;
        self.log.energy.inferences += 1;
        let prediction = predict_class(&self.model.head, &features)?;
        let hidden = ev.hidden_label(&self.evaluator_access);
        self.log.predictions.push(PredictionRecord {
            timestamp: t,
            hidden_label: hidden,
            prediction,
            correct: prediction == hidden,
        });
        self.rolling.push(prediction);
        if self.mode.uses_collected_samples() {
            self.recent_animals.push_back((index, prediction));
            if self.recent_animals.len() > RECENT_ANIMAL_CAP {
                self.recent_animals.pop_front();
            }
        }

        if self.mode.uses_cdd() && self.bootstrap_done {
            match cdd_step(&mut self.cdd, prediction, t)? {
                CddStep::Accumulating => {}
                CddStep::Reset => {
                    self.log.energy.cdd_tests += 1;
                    self.log.cdd.push(CddRecord {
                        timestamp: t,
                        p_value: None,
                        triggered: false,
                        reset: true,
                    });
                }
                CddStep::Tested { p_value, trigger } => {
                    self.log.energy.cdd_tests += 1;
                    self.log.cdd.push(CddRecord {
                        timestamp: t,
                        p_value: Some(p_value),
                        triggered: trigger.is_some(),
                        reset: false,
                    });
                    if let Some(trig) = trigger {
                        if matches!(self.mode, Mode::TriggeredCdd { .. }) {
                            self.do_fine_tune(FineTuneReason::CddDirect, t)?;
                        } else {
                            let latest = match trig.payload {
                                crate::drift::DriftPayload::Distribution(d) => d,
                                _ => self.latest_distribution(),
                            };
                            let verdict = validate_class_drift(&self.cache, &latest)?;
                            self.log.validations.push(ValidationRecord {
                                timestamp: t,
                                kind: crate::drift::DriftKind::ClassDistribution,
                                measured_accuracy: verdict.measured_accuracy,
                                fine_tune_needed: verdict.fine_tune_needed,
                                images_inferred: verdict.images_inferred,
                                images_reused: verdict.images_reused,
                            });
                            if verdict.fine_tune_needed {
                                self.do_fine_tune(FineTuneReason::ClassDrift, t)?;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Acquire one training sample for the collected-sample baselines: the
    /// most recent unconsumed animal event, labeled by a fresh model
    /// prediction (pseudolabel) or ground truth (gtlabel).
    fn collect_one(&mut self, t: f64) -> SimResult<()> {
        let Some((index, _pred_at_event)) = self.recent_animals.pop_back() else {
            return Ok(());
        };
        let ev = &self.scenario.stream[index];
        let (label, pred_at_collection) = match self.mode {
            Mode::Gtlabel => {
                let features = self.model.featurizer.featurize(&ev.image.pixels)?;
                self.log.energy.inferences += 1;
                let pred = predict_class(&self.model.head, &features)?;
                (ev.hidden_label(&self.training_access), pred)
            }
            _ => {
                let features = self.model.featurizer.featurize(&ev.image.pixels)?;
                self.log.energy.inferences += 1;
                let pred = predict_class(&self.model.head, &features)?;
                (pred, pred)
            }
        };
        self.collect_buffer.push((index, label));
        self.log.collected.push(CollectedSampleRecord {
            timestamp: t,
            event_index: index,
            label_used: label,
            prediction_at_collection: pred_at_collection,
        });
        Ok(())
    }

    fn bootstrap(&mut self, t: f64) -> SimResult<()> {
        self.bootstrap_done = true;
        self.do_fine_tune(FineTuneReason::Bootstrap, t)?;
        if let Mode::Periodic { days } | Mode::PeriodicBdd { days } = self.mode {
            self.next_periodic = Some(t + days * SECONDS_PER_DAY);
        }
        Ok(())
    }

    /// Synthesize the fine-tune batch: half from the recent pool window,
    /// half uniformly from the whole repository.
    fn synthesize_train_batch(&mut self) -> SimResult<Vec<SyntheticSample>> {
        let softened = self.softened_distribution();
        let policy = self.cfg.synthesis.policy();
        let n = self.cfg.synthesis.train_batch;
        let pool: Vec<&BackgroundImage> = self.bdd.repo.pool().collect();
        let all: Vec<&BackgroundImage> = self.bdd.repo.iter().collect();
        let n_pool = n / 2;
        let n_all = n - n_pool;
        let mut samples = synthesize_batch(
            &self.train_objects,
            &pool,
            &softened,
            n_pool.max(1),
            &policy,
            &mut self.rng_synth,
        )?;
        samples.extend(synthesize_batch(
            &self.train_objects,
            &all,
            &softened,
            n_all.max(1),
            &policy,
            &mut self.rng_synth,
        )?);
        Ok(samples)
    }

    fn dump_batch(&self, samples: &[SyntheticSample], round: u64) -> SimResult<()> {
        let Some(dir) = &self.cfg.dump_synth_dir else {
            return Ok(());
        };
        let dir = PathBuf::from(dir).join(format!("ft_{round:03}"));
        std::fs::create_dir_all(&dir).map_err(|source| SimError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let sidecar = dir.join("samples.jsonl");
        let mut lines = String::new();
        for (i, s) in samples.iter().enumerate() {
            let name = format!("sample_{i:04}.png");
            s.image.save(dir.join(&name)).map_err(|e| SimError::Io {
                path: dir.join(&name).display().to_string(),
                source: std::io::Error::other(e),
            })?;
            lines.push_str(
                &serde_json::json!({
                    "file": name,
                    "label": s.label,
                    "provenance": s.provenance,
                })
                .to_string(),
            );
            lines.push('\n');
        }
        std::fs::write(&sidecar, lines).map_err(|source| SimError::Io {
            path: sidecar.display().to_string(),
            source,
        })
    }

    fn do_fine_tune(&mut self, reason: FineTuneReason, t: f64) -> SimResult<()> {
        let round = self.fine_tune_counter;
        self.fine_tune_counter += 1;

        // Assemble training data.
        let scenario = self.scenario;
        let synthesized;
        let owned_pairs: Vec<(&RgbImage, ClassId)> = if self.mode.uses_collected_samples() {
            if self.collect_buffer.is_empty() {
                log::info!("fine-tune skipped at t={t:.0}s: no collected samples yet");
                return Ok(());
            }
            self.collect_buffer
                .iter()
                .map(|(idx, label)| (&scenario.stream[*idx].image.pixels, *label))
                .collect()
        } else {
            synthesized = self.synthesize_train_batch()?;
            self.dump_batch(&synthesized, round)?;
            synthesized.iter().map(|s| (&s.image, s.label)).collect()
        };

        let mut tcfg = self.cfg.train;
        tcfg.seed = derive_seed(self.cfg.seed, TAG_FINE_TUNE ^ (round << 8));
        let report = fine_tune(&mut self.model, &owned_pairs, &tcfg)?;
        let iterations = (report.epochs_run * report.batches_per_epoch) as u64;
        self.log.energy.fine_tune_iterations += iterations;
        self.log.fine_tunes.push(FineTuneRecord {
            timestamp: t,
            reason,
            epochs: report.epochs_run,
            batches_per_epoch: report.batches_per_epoch,
            samples: report.samples,
            duration_s: iterations as f64 * self.costs.fine_tune_seconds_per_iteration,
        });
        log::info!(
            "fine-tune #{round} ({reason:?}) at t={:.2} days: {} samples, {} epochs",
            t / SECONDS_PER_DAY,
            report.samples,
            report.epochs_run
        );

        // The fine-tuned model defines the new references.
        let latest = self.latest_distribution();
        self.cdd.reference = latest.clone();
        self.cdd.recent.clear();

        if self.mode.has_validation_gate() {
            let softened = self.softened_distribution();
            let policy = self.cfg.synthesis.policy();
            let per_bg = self.cfg.validation.refresh_per_background;
            let mut full_set = Vec::new();
            for bg in self.bdd.repo.iter() {
                full_set.extend(synthesize_batch(
                    &self.reserved_objects,
                    &[bg],
                    &softened,
                    per_bg,
                    &policy,
                    &mut self.rng_val,
                )?);
            }
            if !full_set.is_empty() {
                refresh_reference(&mut self.cache, &self.model, &full_set, &latest)?;
                self.log.energy.validation_images += full_set.len() as u64;
                // A fresh reference also restarts the background cooldown.
                self.cache.last_bdd_validation_time = Some(t);
                self.pending_new_bgs.clear();
            }
        }
        Ok(())
    }
}

/// Replay the scenario under the given pipeline configuration and cost
/// table; returns the metrics ledger and the final model.
pub fn replay_full(
    scenario: &Scenario,
    cfg: &PipelineConfig,
    costs: &EnergyCostTable,
) -> SimResult<ReplayOutcome> {
    cfg.validate()?;
    if scenario.num_classes < 2 {
        return Err(SimError::Config("scenario needs at least 2 classes".into()));
    }

    let model = pretrain_model(scenario, cfg)?;
    let (train_objects, reserved_objects) = split_reserved(&scenario.objects);
    let source_dist = source_distribution(scenario);

    let mut state = ReplayState {
        scenario,
        cfg,
        costs,
        mode: cfg.mode,
        model,
        bdd: BddState::new(
            BackgroundRepository::new(cfg.bdd.capacity, cfg.bdd.pool_window),
            cfg.bdd.alpha,
            cfg.bdd.lsdd.to_params(),
        ),
        cdd: CddState::new(
            scenario.num_classes,
            source_dist.clone(),
            cfg.cdd.window,
            match cfg.mode {
                Mode::TriggeredCdd { alpha } => alpha,
                _ => cfg.cdd.alpha,
            },
        ),
        cache: ValidationCache::new(
            scenario.num_classes,
            cfg.validation.thr,
            cfg.validation.cooldown_days,
        ),
        rolling: RollingCounts::new(scenario.num_classes, cfg.cdd.window),
        source_dist,
        train_objects,
        reserved_objects,
        pending_new_bgs: Vec::new(),
        bootstrap_done: false,
        next_periodic: None,
        reservoir_seen: 0,
        recent_animals: VecDeque::new(),
        collect_buffer: Vec::new(),
        fine_tune_counter: 0,
        log: MetricsLog::new(cfg.mode.to_string(), cfg.seed),
        evaluator_access: LabelAccess::new("evaluator"),
        training_access: LabelAccess::new("training"),
        rng_bdd: derive_rng(cfg.seed, TAG_BDD),
        rng_synth: derive_rng(cfg.seed, TAG_SYNTH),
        rng_val: derive_rng(cfg.seed, TAG_VALIDATION),
        rng_reservoir: derive_rng(cfg.seed, TAG_RESERVOIR),
    };

    for index in 0..scenario.stream.len() {
        let event = &scenario.stream[index];
        let t = event.timestamp();

        // Scheduled fine-tunes fire on the first event past the deadline.
        if let Some(next) = state.next_periodic {
            if t >= next {
                state.do_fine_tune(FineTuneReason::Schedule, t)?;
                let days = match state.mode {
                    Mode::Periodic { days } | Mode::PeriodicBdd { days } => days,
                    _ => unreachable!("next_periodic only set for periodic modes"),
                };
                let mut deadline = next;
                while deadline <= t {
                    deadline += days * SECONDS_PER_DAY;
                }
                state.next_periodic = Some(deadline);
            }
        }

        match event.kind {
            EventKind::Background => state.handle_background(index, t)?,
            EventKind::Animal => state.handle_animal(index, t)?,
        }
    }

    state.log.sim_duration_s = scenario
        .stream
        .last()
        .map(|e| e.timestamp())
        .unwrap_or(0.0);
    state.log.label_reads_evaluator = state.evaluator_access.count();
    state.log.label_reads_training = state.training_access.count();

    Ok(ReplayOutcome {
        log: state.log,
        model: state.model,
    })
}

/// Replay and return only the metrics ledger.
pub fn replay(
    scenario: &Scenario,
    cfg: &PipelineConfig,
    costs: &EnergyCostTable,
) -> SimResult<MetricsLog> {
    replay_full(scenario, cfg, costs).map(|o| o.log)
}
