use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use hilo_core::config::Mode;
use hilo_core::engine::{learner_hash, Control, Engine, EngineEvent};
use hilo_core::hitl::HitlState;
use hilo_core::{MetricsReport, SimTime};
use serde::Serialize;
use tokio::sync::Notify;
use tokio::time::Instant;

use crate::error::ApiError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Running,
    Paused,
    Finished,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentStatus {
    pub experiment_id: String,
    pub status: Status,
    pub mode: Mode,
    pub strategy: String,
    pub chunks_total: usize,
    pub chunks_done: usize,
    pub sim_time_s: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LearnerStatus {
    pub experiment_id: String,
    pub learner_hash: String,
    pub budget: usize,
    pub budget_remaining: usize,
    pub labeled: usize,
    pub pending: usize,
    pub finalized: bool,
}

struct RunState {
    status: Status,
    report: Option<MetricsReport>,
    error: Option<String>,
}

/// One experiment: a single-writer engine plus the event log readers follow.
pub struct Experiment {
    pub id: String,
    pub mode: Mode,
    pub pacing: f64,
    strategy: String,
    engine: Mutex<Engine>,
    hitl: Arc<Mutex<HitlState>>,
    log: Mutex<Vec<EngineEvent>>,
    appended: Notify,
    wake: Notify,
    state: Mutex<RunState>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl Experiment {
    pub fn new(id: String, engine: Engine) -> Self {
        let cfg = engine.config();
        Experiment {
            id,
            mode: cfg.mode,
            pacing: cfg.pacing,
            strategy: cfg.strategy.name().to_string(),
            hitl: engine.hitl(),
            engine: Mutex::new(engine),
            log: Mutex::new(Vec::new()),
            appended: Notify::new(),
            wake: Notify::new(),
            state: Mutex::new(RunState {
                status: Status::Running,
                report: None,
                error: None,
            }),
        }
    }

    pub fn status(&self) -> ExperimentStatus {
        let (total, done, now) = {
            let e = lock(&self.engine);
            (e.chunk_count(), e.traces().len(), e.now().as_secs_f64())
        };
        let st = lock(&self.state);
        ExperimentStatus {
            experiment_id: self.id.clone(),
            status: st.status,
            mode: self.mode,
            strategy: self.strategy.clone(),
            chunks_total: total,
            chunks_done: done,
            sim_time_s: now,
            error: st.error.clone(),
        }
    }

    fn run_status(&self) -> Status {
        lock(&self.state).status
    }

    pub fn is_done(&self) -> bool {
        matches!(self.run_status(), Status::Finished | Status::Failed)
    }

    fn push(&self, events: Vec<EngineEvent>) {
        if events.is_empty() {
            return;
        }
        lock(&self.log).extend(events);
        self.appended.notify_waiters();
    }

    fn fail(&self, message: String) {
        {
            let mut st = lock(&self.state);
            st.status = Status::Failed;
            st.error = Some(message);
        }
        self.appended.notify_waiters();
    }

    fn finish(&self) {
        let report = lock(&self.engine).report();
        {
            let mut st = lock(&self.state);
            match report {
                Ok(r) => {
                    st.status = Status::Finished;
                    st.report = Some(r);
                }
                Err(e) => {
                    st.status = Status::Failed;
                    st.error = Some(e.to_string());
                }
            }
        }
        self.appended.notify_waiters();
    }

    /// Processes one engine event. Returns false once the run is over.
    fn step(&self) -> bool {
        let result = {
            let mut e = lock(&self.engine);
            e.step().map(|ev| (ev, e.is_finished()))
        };
        match result {
            Ok((events, finished)) => {
                self.push(events);
                if finished {
                    self.finish();
                }
                !finished
            }
            Err(e) => {
                self.fail(e.to_string());
                false
            }
        }
    }

    /// Runs to completion on the calling thread.
    pub fn run_batch(&self) {
        while self.step() {}
    }

    /// Paces the engine against the wall clock: `pacing` simulated seconds
    /// per real second. Pause holds the clock; controls wake the loop.
    pub async fn run_live(self: Arc<Self>) {
        let mut anchor: Option<(Instant, SimTime)> = None;
        loop {
            let woken = self.wake.notified();
            match self.run_status() {
                Status::Finished | Status::Failed => return,
                Status::Paused => {
                    anchor = None;
                    woken.await;
                    continue;
                }
                Status::Running => {}
            }
            let (next, now) = {
                let e = lock(&self.engine);
                (e.next_event_time(), e.now())
            };
            let Some(next) = next else {
                self.step();
                continue;
            };
            let (w0, s0) = *anchor.get_or_insert((Instant::now(), now));
            let ahead = next.as_secs_f64() - s0.as_secs_f64();
            let due = w0 + Duration::from_secs_f64((ahead / self.pacing).max(0.0));
            tokio::select! {
                _ = tokio::time::sleep_until(due) => {
                    if !self.step() {
                        return;
                    }
                }
                _ = woken => {}
            }
        }
    }

    pub fn control(&self, c: Control) -> Result<EngineEvent, ApiError> {
        if self.is_done() {
            return Err(ApiError::new(
                axum::http::StatusCode::CONFLICT,
                "finished",
                format!("experiment {} is no longer running", self.id),
            ));
        }
        let ev = lock(&self.engine).control(c.clone()).map_err(|e| {
            ApiError::bad_request(e.to_string()).with_field("policy_id")
        })?;
        {
            let mut st = lock(&self.state);
            match c {
                Control::Pause => st.status = Status::Paused,
                Control::Resume if st.status == Status::Paused => st.status = Status::Running,
                _ => {}
            }
        }
        self.push(vec![ev.clone()]);
        self.wake.notify_one();
        Ok(ev)
    }

    /// Final report once finished, otherwise metrics over chunks so far.
    pub fn metrics(&self) -> Result<MetricsReport, ApiError> {
        if let Some(r) = &lock(&self.state).report {
            return Ok(r.clone());
        }
        lock(&self.engine)
            .report()
            .map_err(|e| ApiError::internal(e.to_string()))
    }

    pub fn event(&self, i: usize) -> Option<EngineEvent> {
        lock(&self.log).get(i).cloned()
    }

    pub fn appended(&self) -> tokio::sync::futures::Notified<'_> {
        self.appended.notified()
    }

    pub fn hitl(&self) -> MutexGuard<'_, HitlState> {
        lock(&self.hitl)
    }

    pub fn sim_now(&self) -> SimTime {
        lock(&self.engine).now()
    }

    pub fn learner_status(&self) -> LearnerStatus {
        let h = self.hitl();
        LearnerStatus {
            experiment_id: self.id.clone(),
            learner_hash: learner_hash(&h.learner),
            budget: h.queue.budget(),
            budget_remaining: h.queue.budget_remaining(),
            labeled: h.queue.labeled_count(),
            pending: h.queue.pending_count(),
            finalized: h.learner.ensemble.is_some(),
        }
    }

    pub fn record(&self, ev: EngineEvent) {
        self.push(vec![ev]);
    }
}
