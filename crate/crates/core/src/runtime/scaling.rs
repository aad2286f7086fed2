//! Autoscaling of a replicated inference function under changing load.

use std::collections::VecDeque;

use rand::RngExt;
use serde::{Deserialize, Serialize};

use super::{EventQueue, Monitor, MonitorSample, RuntimeError, Worker};
use crate::datamodel::SimTime;
use crate::oracle::CostCurve;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoscaleConfig {
    /// Scale out when the window's mean per-replica queue depth exceeds this.
    pub high_water: f64,
    /// Scale in when it falls below this.
    pub low_water: f64,
    /// Monitor samples per provisioning decision.
    pub window_samples: usize,
    pub min_replicas: u32,
    pub max_replicas: u32,
    pub sample_period_s: f64,
    /// Delay before a new replica accepts work.
    pub spin_up_s: f64,
}

impl Default for AutoscaleConfig {
    fn default() -> Self {
        AutoscaleConfig {
            high_water: 2.0,
            low_water: 0.25,
            window_samples: 3,
            min_replicas: 1,
            max_replicas: 8,
            sample_period_s: 1.0,
            spin_up_s: 1.0,
        }
    }
}

impl AutoscaleConfig {
    pub fn validate(&self) -> Result<(), RuntimeError> {
        if !(self.low_water >= 0.0 && self.high_water > self.low_water) {
            return Err(RuntimeError::Config(
                "autoscale needs 0 <= low_water < high_water".into(),
            ));
        }
        if self.window_samples == 0 || !(self.sample_period_s > 0.0) {
            return Err(RuntimeError::Config(
                "autoscale window and sample period must be positive".into(),
            ));
        }
        if self.min_replicas == 0 || self.min_replicas > self.max_replicas {
            return Err(RuntimeError::Config(
                "autoscale needs 1 <= min_replicas <= max_replicas".into(),
            ));
        }
        if !(self.spin_up_s >= 0.0) {
            return Err(RuntimeError::Config("spin_up_s must be >= 0".into()));
        }
        Ok(())
    }
}

/// Replica change for one monitor window. Never leaves `[min, max]`; inside
/// the `[low_water, high_water]` band nothing changes.
pub fn provision(window: &[MonitorSample], replicas: u32, cfg: &AutoscaleConfig) -> i32 {
    if window.is_empty() {
        return 0;
    }
    let depth = window.iter().map(MonitorSample::mean_queue_depth).sum::<f64>() / window.len() as f64;
    let target = if depth > cfg.high_water {
        let want = (replicas as f64 * depth / cfg.high_water).ceil() as u32;
        want.max(replicas + 1)
    } else if depth < cfg.low_water {
        replicas.saturating_sub(1)
    } else {
        replicas
    };
    target.clamp(cfg.min_replicas, cfg.max_replicas) as i32 - replicas as i32
}

#[derive(Debug, Clone, PartialEq)]
struct Replica {
    worker: Worker,
    queue: VecDeque<(u64, SimTime)>,
    active: bool,
    ready_at: SimTime,
    busy: bool,
}

impl Replica {
    fn new(ready_at: SimTime) -> Self {
        Replica {
            worker: Worker::default(),
            queue: VecDeque::new(),
            active: true,
            ready_at,
            busy: false,
        }
    }

    fn load(&self) -> usize {
        self.queue.len() + usize::from(self.busy)
    }
}

/// Replicas of one function behind a least-loaded balancer.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerPool {
    replicas: Vec<Replica>,
    service: CostCurve,
}

impl WorkerPool {
    pub fn new(initial: u32, service: CostCurve) -> Self {
        WorkerPool {
            replicas: (0..initial).map(|_| Replica::new(SimTime::ZERO)).collect(),
            service,
        }
    }

    pub fn active_replicas(&self) -> u32 {
        self.replicas.iter().filter(|r| r.active).count() as u32
    }

    /// Index of the active replica with the least outstanding work; replicas
    /// still spinning up are used only if nothing else is active.
    fn pick(&self, now: SimTime) -> usize {
        let candidates = || self.replicas.iter().enumerate().filter(|(_, r)| r.active);
        candidates()
            .filter(|(_, r)| r.ready_at <= now)
            .min_by_key(|(i, r)| (r.load(), *i))
            .or_else(|| candidates().min_by_key(|(i, r)| (r.ready_at, r.load(), *i)))
            .map(|(i, _)| i)
            .expect("at least one active replica")
    }

    fn workers(&self) -> impl Iterator<Item = &Worker> {
        self.replicas.iter().filter(|r| r.active).map(|r| &r.worker)
    }

    fn queue_depths(&self) -> Vec<usize> {
        self.replicas.iter().filter(|r| r.active).map(|r| r.queue.len()).collect()
    }
}

/// Load-step experiment for the autoscaler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScalingScenario {
    pub base_rate_per_s: f64,
    pub step_factor: f64,
    pub step_at_s: f64,
    pub drop_at_s: f64,
    pub duration_s: f64,
    pub service: CostCurve,
    pub slo_ms: f64,
    pub autoscale: AutoscaleConfig,
    pub seed: u64,
}

impl Default for ScalingScenario {
    fn default() -> Self {
        ScalingScenario {
            base_rate_per_s: 4.0,
            step_factor: 4.0,
            step_at_s: 30.0,
            drop_at_s: 90.0,
            duration_s: 150.0,
            service: CostCurve {
                fixed_ms: 0.0,
                per_item_ms: 100.0,
            },
            slo_ms: 1000.0,
            autoscale: AutoscaleConfig::default(),
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingOutcome {
    /// Replica count after each change, starting with the initial count.
    pub replica_timeline: Vec<(SimTime, u32)>,
    pub latencies_ms: Vec<f64>,
    pub samples: Vec<MonitorSample>,
    pub p50_ms: f64,
    pub requests: usize,
}

impl ScalingOutcome {
    pub fn replicas_at(&self, t: SimTime) -> u32 {
        self.replica_timeline
            .iter()
            .take_while(|(at, _)| *at <= t)
            .last()
            .map_or(0, |(_, r)| *r)
    }

    pub fn peak_replicas(&self) -> u32 {
        self.replica_timeline.iter().map(|(_, r)| *r).max().unwrap_or(0)
    }
}

enum Ev {
    Arrival,
    Done(usize),
    Tick,
    Ready(usize),
}

impl ScalingScenario {
    pub fn rate_at(&self, t: f64) -> f64 {
        if t >= self.step_at_s && t < self.drop_at_s {
            self.base_rate_per_s * self.step_factor
        } else {
            self.base_rate_per_s
        }
    }

    pub fn run(&self) -> Result<ScalingOutcome, RuntimeError> {
        self.autoscale.validate()?;
        if !(self.base_rate_per_s > 0.0 && self.step_factor > 0.0 && self.duration_s > 0.0) {
            return Err(RuntimeError::Config("rates and duration must be positive".into()));
        }
        let cfg = &self.autoscale;
        let end = SimTime::from_secs_f64(self.duration_s);
        let period = SimTime::from_secs_f64(cfg.sample_period_s);
        let service = self.service.latency(1);
        let mut rng = seed::rng(self.seed, &[seed::TAG_ARRIVALS]);
        let mut pool = WorkerPool::new(cfg.min_replicas, self.service);
        let mut monitor = Monitor::new(period);
        let mut q = EventQueue::new();
        let mut timeline = vec![(SimTime::ZERO, pool.active_replicas())];
        let mut latencies = Vec::new();
        let mut ticks = 0usize;
        let mut next_id = 0u64;

        let exp = |rng: &mut rand_chacha::ChaCha8Rng, rate: f64| -> SimTime {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            SimTime::from_secs_f64(-u.ln() / rate)
        };
        q.push(exp(&mut rng, self.rate_at(0.0)), Ev::Arrival);
        q.push(period, Ev::Tick);

        let start_service = |pool: &mut WorkerPool, i: usize, now: SimTime, q: &mut EventQueue<Ev>| {
            let r = &mut pool.replicas[i];
            if r.busy || now < r.ready_at {
                return;
            }
            if r.queue.pop_front().is_some() {
                r.busy = true;
                let (_, done) = r.worker.reserve(now, service);
                q.push(done, Ev::Done(i));
            }
        };
        // Requests carry their arrival time; completion pops the head in service.
        let mut in_service: Vec<Option<SimTime>> = vec![None; pool.replicas.len()];

        while let Some((now, ev)) = q.pop() {
            if now > end {
                break;
            }
            match ev {
                Ev::Arrival => {
                    let i = pool.pick(now);
                    pool.replicas[i].queue.push_back((next_id, now));
                    next_id += 1;
                    if !pool.replicas[i].busy && now >= pool.replicas[i].ready_at {
                        let arrived = pool.replicas[i].queue.front().map(|(_, t)| *t);
                        start_service(&mut pool, i, now, &mut q);
                        in_service[i] = arrived;
                    }
                    let rate = self.rate_at(now.as_secs_f64());
                    q.push(now + exp(&mut rng, rate), Ev::Arrival);
                }
                Ev::Done(i) => {
                    if let Some(arrived) = in_service[i].take() {
                        let latency = now - arrived;
                        latencies.push(latency.as_millis_f64());
                        monitor.record_completion(latency);
                    }
                    pool.replicas[i].busy = false;
                    let next = pool.replicas[i].queue.front().map(|(_, t)| *t);
                    start_service(&mut pool, i, now, &mut q);
                    if pool.replicas[i].busy {
                        in_service[i] = next;
                    }
                }
                Ev::Ready(i) => {
                    let next = pool.replicas[i].queue.front().map(|(_, t)| *t);
                    start_service(&mut pool, i, now, &mut q);
                    if pool.replicas[i].busy {
                        in_service[i] = next;
                    }
                }
                Ev::Tick => {
                    let depths = pool.queue_depths();
                    let workers: Vec<Worker> = pool.workers().cloned().collect();
                    monitor.sample(now, workers.iter(), depths);
                    ticks += 1;
                    if ticks % cfg.window_samples == 0 {
                        let window = &monitor.samples[monitor.samples.len() - cfg.window_samples..];
                        let delta = provision(window, pool.active_replicas(), cfg);
                        if delta > 0 {
                            for _ in 0..delta {
                                let ready = now + SimTime::from_secs_f64(cfg.spin_up_s);
                                pool.replicas.push(Replica::new(ready));
                                in_service.push(None);
                                q.push(ready, Ev::Ready(pool.replicas.len() - 1));
                            }
                        } else if delta < 0 {
                            for _ in 0..(-delta) {
                                retire_one(&mut pool, now, &mut q, &mut in_service, service);
                            }
                        }
                        if delta != 0 {
                            timeline.push((now, pool.active_replicas()));
                        }
                    }
                    q.push(now + period, Ev::Tick);
                }
            }
        }
        let p50_ms = crate::metrics::percentile(&latencies, 50.0);
        Ok(ScalingOutcome {
            replica_timeline: timeline,
            requests: latencies.len(),
            latencies_ms: latencies,
            samples: monitor.samples,
            p50_ms,
        })
    }
}

/// Deactivates the least-loaded active replica and hands its queue to the
/// remaining ones. Work in service finishes normally.
fn retire_one(
    pool: &mut WorkerPool,
    now: SimTime,
    q: &mut EventQueue<Ev>,
    in_service: &mut [Option<SimTime>],
    service: SimTime,
) {
    if pool.active_replicas() <= 1 {
        return;
    }
    let i = pool.pick(now);
    pool.replicas[i].active = false;
    let orphaned: Vec<(u64, SimTime)> = pool.replicas[i].queue.drain(..).collect();
    for req in orphaned {
        let j = pool.pick(now);
        let r = &mut pool.replicas[j];
        r.queue.push_back(req);
        if !r.busy && now >= r.ready_at {
            let arrived = r.queue.front().map(|(_, t)| *t);
            r.queue.pop_front();
            r.busy = true;
            let (_, done) = r.worker.reserve(now, service);
            q.push(done, Ev::Done(j));
            in_service[j] = arrived;
        }
    }
}
