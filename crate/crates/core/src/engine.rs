//! Event loop for one experiment: chunk arrivals, heartbeats, monitor ticks
//! and annotation, all on the simulated clock.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baselines::{run_strategy, Strategy, StrategyState};
use crate::config::{AnnotatorMode, DatasetSource, ExperimentConfig, FieldError};
use crate::coordinator::{run_chunk_backup, ChunkTrace, ProtocolError, SimEnv};
use crate::datamodel::{chunk_scene, generate_dataset, load_dataset, DatasetError, Scene, SimTime, VideoChunk};
use crate::hitl::{AnnotationError, HitlState, LearnError, LearnerState, TrainingEvent};
use crate::metrics::{evaluate, scene_offsets, MetricsError, MetricsReport};
use crate::oracle::{CostCurve, FeatureSynthesizer, ModelZoo};
use crate::quality::DeviceClass;
use crate::runtime::{
    Action, FailureDetector, FunctionKind, FunctionRegistry, FunctionSpec, Monitor, MonitorSample,
    Observation, Outage, Policy, RuntimeError,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid config")]
    Config(Vec<FieldError>),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("dataset `{0}` must be resolved by the caller")]
    UnresolvedDataset(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

/// Operator actions on a running experiment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Control {
    Pause,
    Resume,
    KillCloud,
    RestoreCloud,
    SetPolicy { policy_id: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailoverRecord {
    pub at: SimTime,
    pub cloud_available: bool,
}

/// Everything the engine reports while running.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EngineEvent {
    Chunk { trace: ChunkTrace },
    Monitor { sample: MonitorSample },
    Failover { record: FailoverRecord },
    Training { event: TrainingEvent },
    Control { at: SimTime, control: Control },
    Finished { at: SimTime },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub report: MetricsReport,
    pub traces: Vec<ChunkTrace>,
    pub monitor: Vec<MonitorSample>,
    pub training: Vec<TrainingEvent>,
    pub failovers: Vec<FailoverRecord>,
    /// SHA-256 of the final learner state.
    pub learner_hash: String,
}

#[derive(Debug, Clone, Copy)]
enum Ev {
    ChunkReady(usize),
    Heartbeat,
    MonitorTick,
    Annotate,
}

/// Resolves a dataset source that does not need a registry.
pub fn load_scenes(source: &DatasetSource, seed: u64) -> Result<Vec<Scene>, EngineError> {
    match source {
        DatasetSource::Generate { spec, seed: s } => Ok(generate_dataset(spec, s.unwrap_or(seed))?),
        DatasetSource::Path { path } => Ok(load_dataset(path)?),
        DatasetSource::Id { id } => Err(EngineError::UnresolvedDataset(id.clone())),
    }
}

/// Fog learner initialized from the synthesizer's class prototypes, i.e. a
/// head trained before any drift.
pub fn pretrained_learner(synth: &FeatureSynthesizer, cfg: &ExperimentConfig) -> Result<LearnerState, LearnError> {
    let weights = (0..synth.classes())
        .map(|k| {
            let mut w = synth.class_mean(k, 0.0);
            w.push(0.0);
            w
        })
        .collect();
    LearnerState::new(weights, cfg.learner.clone())
}

pub fn learner_hash(learner: &LearnerState) -> String {
    let bytes = serde_json::to_vec(learner).expect("learner serializes");
    let digest = Sha256::digest(&bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub struct Engine {
    config: ExperimentConfig,
    scenes: Vec<Scene>,
    chunks: Vec<(usize, VideoChunk)>,
    env: SimEnv,
    registry: FunctionRegistry,
    policy: Policy,
    detector: FailureDetector,
    states: Vec<StrategyState>,
    queue: crate::runtime::EventQueue<Ev>,
    held: VecDeque<usize>,
    traces: Vec<ChunkTrace>,
    monitor: Monitor,
    failovers: Vec<FailoverRecord>,
    now: SimTime,
    finished: bool,
    killed: bool,
}

impl Engine {
    /// Builds an engine, loading or generating the dataset if needed.
    pub fn from_config(config: ExperimentConfig) -> Result<Self, EngineError> {
        config.validate().map_err(EngineError::Config)?;
        let scenes = load_scenes(&config.dataset, config.seed)?;
        Self::new(config, scenes)
    }

    pub fn new(config: ExperimentConfig, scenes: Vec<Scene>) -> Result<Self, EngineError> {
        config.validate().map_err(EngineError::Config)?;
        let classes = scenes.iter().map(|s| s.classes).max().unwrap_or(1).max(1);
        let synth = FeatureSynthesizer::new(config.features.clone(), classes, config.seed);
        let learner = pretrained_learner(&synth, &config)?;
        let mut env = SimEnv::new(
            config.network.wan(),
            config.detector.clone(),
            synth,
            HitlState::new(learner),
            config.seed,
        );
        env.size = config.size_model;
        env.encode = config.encode_time;
        env.backup = config.backup;
        env.costs = config.costs;

        let mut registry = FunctionRegistry::new(Arc::new(ModelZoo::new()));
        let functions = [
            ("fog_encoder", FunctionKind::Encode, DeviceClass::Fog, 0.0, 0.0),
            (
                "cloud_detector",
                FunctionKind::Infer,
                DeviceClass::Cloud,
                0.0,
                config.detector.infer_ms_per_frame.cloud,
            ),
            (
                "fog_classifier",
                FunctionKind::Infer,
                DeviceClass::Fog,
                config.costs.fog_classifier.fixed_ms,
                config.costs.fog_classifier.per_item_ms,
            ),
            (
                "backup_detector",
                FunctionKind::Infer,
                DeviceClass::Fog,
                0.0,
                config.backup.infer_ms_per_frame,
            ),
            (
                "fog_trainer",
                FunctionKind::Train,
                DeviceClass::Fog,
                config.costs.train_ms_per_label,
                0.0,
            ),
        ];
        for (id, kind, device, fixed_ms, per_item_ms) in functions {
            registry.register_function(FunctionSpec {
                function_id: id.into(),
                kind,
                device_class: device,
                cost: CostCurve { fixed_ms, per_item_ms },
                replicas: 1,
            })?;
        }
        for p in [Policy::backup_failover(), Policy::hold_for_cloud()] {
            registry.register_policy(p)?;
        }
        if registry.policy(&config.failover.policy.policy_id).is_none() {
            registry.register_policy(config.failover.policy.clone())?;
        }

        let offsets = scene_offsets(&scenes);
        let mut chunks: Vec<(usize, VideoChunk)> = Vec::new();
        for (s, scene) in scenes.iter().enumerate() {
            let shift = SimTime::from_secs_f64(offsets[s]);
            for mut c in chunk_scene(scene, &config.chunking, &config.size_model) {
                c.ready_at = c.ready_at + shift;
                chunks.push((s, c));
            }
        }
        let mut queue = crate::runtime::EventQueue::new();
        for (i, (_, c)) in chunks.iter().enumerate() {
            queue.push(c.ready_at, Ev::ChunkReady(i));
        }
        let beat = config.failover.heartbeat.interval();
        queue.push(beat, Ev::Heartbeat);
        let period = SimTime::from_secs_f64(config.monitor_period_s);
        queue.push(period, Ev::MonitorTick);

        Ok(Engine {
            policy: config.failover.policy.clone(),
            detector: FailureDetector::new(config.failover.heartbeat),
            states: vec![StrategyState::default(); scenes.len()],
            monitor: Monitor::new(period),
            finished: chunks.is_empty(),
            config,
            scenes,
            chunks,
            env,
            registry,
            queue,
            held: VecDeque::new(),
            traces: Vec::new(),
            failovers: Vec::new(),
            now: SimTime::ZERO,
            killed: false,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn scenes(&self) -> &[Scene] {
        &self.scenes
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn chunk_count(&self) -> usize {
        self.chunks.len()
    }

    pub fn traces(&self) -> &[ChunkTrace] {
        &self.traces
    }

    /// Shared annotation queue and learner.
    pub fn hitl(&self) -> Arc<Mutex<HitlState>> {
        self.env.hitl.clone()
    }

    pub fn registry(&self) -> &FunctionRegistry {
        &self.registry
    }

    pub fn next_event_time(&self) -> Option<SimTime> {
        if self.finished {
            None
        } else {
            self.queue.peek_time()
        }
    }

    /// Metrics over the chunks finished so far.
    pub fn report(&self) -> Result<MetricsReport, EngineError> {
        let mut r = evaluate(&self.scenes, &self.traces, &self.config.metrics)?;
        if r.strategy.is_empty() {
            r.strategy = self.config.strategy.name().to_string();
        }
        Ok(r)
    }

    /// Applies an operator action at the current simulated time.
    pub fn control(&mut self, c: Control) -> Result<EngineEvent, EngineError> {
        let now_s = self.now.as_secs_f64();
        match &c {
            Control::KillCloud if !self.killed => {
                for link in [&mut self.env.uplink.link, &mut self.env.downlink.link] {
                    link.outages.push(Outage {
                        start_s: now_s,
                        end_s: None,
                    });
                }
                self.killed = true;
            }
            Control::RestoreCloud if self.killed => {
                for link in [&mut self.env.uplink.link, &mut self.env.downlink.link] {
                    if let Some(o) = link.outages.iter_mut().rev().find(|o| o.end_s.is_none()) {
                        // an outage that never started is simply dropped
                        o.end_s = Some(now_s.max(o.start_s + 1e-6));
                    }
                }
                self.killed = false;
            }
            Control::SetPolicy { policy_id } => {
                self.policy = self
                    .registry
                    .policy(policy_id)
                    .cloned()
                    .ok_or_else(|| RuntimeError::Unknown(policy_id.clone()))?;
            }
            _ => {}
        }
        Ok(EngineEvent::Control { at: self.now, control: c })
    }

    /// Processes the next event; returns what it produced.
    pub fn step(&mut self) -> Result<Vec<EngineEvent>, EngineError> {
        if self.finished {
            return Ok(Vec::new());
        }
        let Some((t, ev)) = self.queue.pop() else {
            self.finished = true;
            return Ok(vec![EngineEvent::Finished { at: self.now }]);
        };
        self.now = self.now.max(t);
        let mut out = Vec::new();
        match ev {
            Ev::ChunkReady(i) => self.route(i, t, &mut out)?,
            Ev::Heartbeat => self.heartbeat(t, &mut out)?,
            Ev::MonitorTick => {
                let depths = vec![self.held.len(), self.env.hitl.lock().expect("hitl lock").queue.pending_count()];
                let workers = [&self.env.fog_encoder, &self.env.fog_gpu, &self.env.cloud_gpu];
                let sample = self.monitor.sample(t, workers, depths).clone();
                out.push(EngineEvent::Monitor { sample });
                if !self.all_done() {
                    self.queue.push(t + self.monitor.period, Ev::MonitorTick);
                }
            }
            Ev::Annotate => self.annotate(t, &mut out)?,
        }
        if self.all_done() && self.queue.is_empty() {
            self.finished = true;
            out.push(EngineEvent::Finished { at: self.now });
        }
        Ok(out)
    }

    /// Runs events up to and including time `t`.
    pub fn run_until(&mut self, t: SimTime) -> Result<Vec<EngineEvent>, EngineError> {
        let mut out = Vec::new();
        while let Some(next) = self.next_event_time() {
            if next > t {
                break;
            }
            out.extend(self.step()?);
        }
        self.now = self.now.max(t);
        Ok(out)
    }

    /// Runs to completion and evaluates.
    pub fn run(mut self) -> Result<ExperimentOutput, EngineError> {
        while !self.finished {
            self.step()?;
        }
        self.output()
    }

    pub fn output(&self) -> Result<ExperimentOutput, EngineError> {
        let hitl = self.env.hitl.lock().expect("hitl lock");
        Ok(ExperimentOutput {
            report: self.report()?,
            traces: self.traces.clone(),
            monitor: self.monitor.samples.clone(),
            training: hitl.events.clone(),
            failovers: self.failovers.clone(),
            learner_hash: learner_hash(&hitl.learner),
        })
    }

    fn all_done(&self) -> bool {
        self.traces.len() == self.chunks.len()
    }

    fn route(&mut self, i: usize, t: SimTime, out: &mut Vec<EngineEvent>) -> Result<(), EngineError> {
        let obs = Observation {
            cloud_reachable: self.detector.cloud_available(),
            queue_depth: self.held.len() as f64,
        };
        match self.policy.decide(&obs) {
            Action::UseBackup => {
                let (scene, chunk) = &self.chunks[i];
                let (_, mut trace) =
                    run_chunk_backup(chunk, self.config.failover.backup_accept, &mut self.env, t);
                trace.strategy = self.config.strategy.name().to_string();
                trace.scene = *scene;
                self.record(trace, out);
            }
            Action::HoldForCloud => self.held.push_back(i),
            _ => {
                self.env.clock = t;
                let (scene, chunk) = &self.chunks[i];
                let scene = *scene;
                match run_strategy(
                    &self.config.strategy,
                    chunk,
                    &self.config.protocol,
                    &mut self.env,
                    &mut self.states[scene],
                ) {
                    Ok((_, mut trace)) => {
                        trace.scene = scene;
                        self.record(trace, out);
                    }
                    // cached on the fog until the detector decides
                    Err(ProtocolError::CloudUnavailable { .. }) => self.held.push_back(i),
                    Err(e) => return Err(e.into()),
                }
            }
        }
        Ok(())
    }

    fn heartbeat(&mut self, t: SimTime, out: &mut Vec<EngineEvent>) -> Result<(), EngineError> {
        let answered = self.env.cloud_reachable(t);
        if let Some(available) = self.detector.beat(answered) {
            let record = FailoverRecord {
                at: t,
                cloud_available: available,
            };
            self.failovers.push(record.clone());
            out.push(EngineEvent::Failover { record });
        }
        // cached chunks are retried on every beat; the policy decides where
        for _ in 0..self.held.len() {
            let i = self.held.pop_front().expect("non-empty");
            self.route(i, t, out)?;
        }
        if !self.all_done() {
            self.queue.push(t + self.config.failover.heartbeat.interval(), Ev::Heartbeat);
        }
        Ok(())
    }

    fn record(&mut self, trace: ChunkTrace, out: &mut Vec<EngineEvent>) {
        let end = trace.stages.iter().map(|s| s.at).max().unwrap_or(self.now);
        let start = trace.stage("ready").unwrap_or(end);
        self.monitor.record_completion(end - start);
        if self.config.annotator.mode == AnnotatorMode::Scripted {
            self.queue
                .push(end + SimTime::from_secs_f64(self.config.annotator.label_delay_s), Ev::Annotate);
        }
        self.traces.push(trace.clone());
        out.push(EngineEvent::Chunk { trace });
    }

    /// Scripted annotator: labels the oldest pending tasks from ground truth,
    /// dismisses background regions and stale leftovers.
    fn annotate(&mut self, t: SimTime, out: &mut Vec<EngineEvent>) -> Result<(), EngineError> {
        let delay = SimTime::from_secs_f64(self.config.annotator.label_delay_s);
        let train = SimTime::from_millis_f64(self.config.costs.train_ms_per_label);
        let hitl = self.env.hitl.clone();
        let mut hitl = hitl.lock().expect("hitl lock");
        let mut labeled = 0;
        while let Some(task) = hitl.queue.next_task() {
            let class = (labeled < self.config.annotator.labels_per_chunk)
                .then(|| self.ground_truth_class(task.chunk_id, task.frame_index, &task.region))
                .flatten();
            match class {
                Some(c) if hitl.queue.budget_remaining() > 0 => {
                    let at = t + SimTime(delay.0 * labeled as u64);
                    let (_, done) = self.env.fog_gpu.reserve(at, train);
                    match hitl.submit_label(task.task_id, c, done) {
                        Ok(event) => out.push(EngineEvent::Training { event }),
                        Err(AnnotationError::Learn(e)) => return Err(e.into()),
                        Err(_) => {}
                    }
                    labeled += 1;
                }
                _ => {
                    let _ = hitl.queue.dismiss(task.task_id);
                }
            }
        }
        Ok(())
    }

    fn ground_truth_class(&self, chunk_id: u64, frame_index: u64, region: &crate::datamodel::BBox) -> Option<usize> {
        // chunk ids restart per scene; the newest matching chunk is the one in flight
        let (scene, _) = self
            .traces
            .iter()
            .rev()
            .find(|tr| tr.chunk_id == chunk_id && tr.keyframe_indices.contains(&frame_index))
            .map(|tr| (tr.scene, ()))?;
        let frames = &self.scenes[scene].frames;
        let i = frames.binary_search_by_key(&frame_index, |f| f.frame_index).ok()?;
        frames[i].dominant_object(region).map(|o| o.class_id)
    }
}

/// Runs one experiment end to end.
pub fn run_experiment(config: ExperimentConfig) -> Result<ExperimentOutput, EngineError> {
    Engine::from_config(config)?.run()
}

/// Same experiment on pre-loaded scenes with a different strategy.
pub fn run_with_strategy(
    config: &ExperimentConfig,
    scenes: &[Scene],
    strategy: Strategy,
) -> Result<ExperimentOutput, EngineError> {
    let mut c = config.clone();
    c.strategy = strategy;
    Engine::new(c, scenes.to_vec())?.run()
}
