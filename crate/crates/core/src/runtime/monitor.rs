use serde::{Deserialize, Serialize};

use super::Worker;
use crate::datamodel::SimTime;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorSample {
    pub timestamp: SimTime,
    /// Busy fraction of the sampling period, one entry per replica.
    pub utilization: Vec<f64>,
    pub queue_depths: Vec<usize>,
    /// Completions per second during the period.
    pub throughput: f64,
    pub latency_ewma_ms: f64,
    pub replicas: u32,
}

impl MonitorSample {
    pub fn mean_queue_depth(&self) -> f64 {
        if self.queue_depths.is_empty() {
            0.0
        } else {
            self.queue_depths.iter().sum::<usize>() as f64 / self.queue_depths.len() as f64
        }
    }

    pub fn mean_utilization(&self) -> f64 {
        if self.utilization.is_empty() {
            0.0
        } else {
            self.utilization.iter().sum::<f64>() / self.utilization.len() as f64
        }
    }
}

/// Periodic sampler of worker utilization, queues and latency.
#[derive(Debug, Clone, PartialEq)]
pub struct Monitor {
    pub period: SimTime,
    pub alpha: f64,
    ewma_ms: Option<f64>,
    completed: usize,
    pub samples: Vec<MonitorSample>,
}

impl Monitor {
    pub fn new(period: SimTime) -> Self {
        Monitor {
            period,
            alpha: 0.2,
            ewma_ms: None,
            completed: 0,
            samples: Vec::new(),
        }
    }

    pub fn record_completion(&mut self, latency: SimTime) {
        let ms = latency.as_millis_f64();
        self.ewma_ms = Some(match self.ewma_ms {
            None => ms,
            Some(prev) => self.alpha * ms + (1.0 - self.alpha) * prev,
        });
        self.completed += 1;
    }

    pub fn latency_ewma_ms(&self) -> f64 {
        self.ewma_ms.unwrap_or(0.0)
    }

    /// Closes the period ending at `now`.
    pub fn sample<'a>(
        &mut self,
        now: SimTime,
        workers: impl IntoIterator<Item = &'a Worker>,
        queue_depths: Vec<usize>,
    ) -> &MonitorSample {
        let from = now - self.period;
        let span = (now - from).0.max(1) as f64;
        let utilization: Vec<f64> = workers
            .into_iter()
            .map(|w| (w.busy_within(from, now).0 as f64 / span).clamp(0.0, 1.0))
            .collect();
        let sample = MonitorSample {
            timestamp: now,
            replicas: utilization.len() as u32,
            utilization,
            queue_depths,
            throughput: self.completed as f64 / self.period.as_secs_f64().max(1e-9),
            latency_ewma_ms: self.latency_ewma_ms(),
        };
        self.completed = 0;
        self.samples.push(sample);
        self.samples.last().expect("just pushed")
    }
}
