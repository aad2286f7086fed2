use serde::{Deserialize, Serialize};

use super::RuntimeError;
use crate::datamodel::SimTime;

/// Window `[start_s, end_s)` during which a link carries nothing.
/// An open-ended outage has no `end_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outage {
    pub start_s: f64,
    #[serde(default)]
    pub end_s: Option<f64>,
}

impl Outage {
    pub fn covers(&self, t: SimTime) -> bool {
        let s = t.as_secs_f64();
        s >= self.start_s && self.end_s.is_none_or(|e| s < e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkLink {
    pub name: String,
    pub bandwidth_bps: f64,
    pub propagation_delay_ms: f64,
    #[serde(default)]
    pub outages: Vec<Outage>,
}

impl NetworkLink {
    pub fn new(name: &str, bandwidth_bps: f64, propagation_delay_ms: f64) -> Self {
        NetworkLink {
            name: name.to_string(),
            bandwidth_bps,
            propagation_delay_ms,
            outages: Vec::new(),
        }
    }

    /// Co-located client and fog, 10 Gbps.
    pub fn lan() -> Self {
        Self::new("client_fog", 10e9, 0.1)
    }

    /// Fog to cloud WAN at `mbps`.
    pub fn wan(mbps: f64) -> Self {
        Self::new("fog_cloud", mbps * 1e6, 20.0)
    }

    pub fn validate(&self) -> Result<(), RuntimeError> {
        if !(self.bandwidth_bps > 0.0 && self.bandwidth_bps.is_finite()) {
            return Err(RuntimeError::Config(format!(
                "link `{}` bandwidth must be positive",
                self.name
            )));
        }
        if !(self.propagation_delay_ms >= 0.0) {
            return Err(RuntimeError::Config(format!(
                "link `{}` delay must be non-negative",
                self.name
            )));
        }
        for o in &self.outages {
            if o.end_s.is_some_and(|e| e <= o.start_s) {
                return Err(RuntimeError::Config(format!(
                    "link `{}` outage must end after it starts",
                    self.name
                )));
            }
        }
        Ok(())
    }

    pub fn is_up(&self, t: SimTime) -> bool {
        !self.outages.iter().any(|o| o.covers(t))
    }

    /// Transfer duration of `bytes` excluding queueing.
    pub fn duration(&self, bytes: u64) -> SimTime {
        let micros = self.propagation_delay_ms * 1e3 + bytes as f64 * 8.0 / self.bandwidth_bps * 1e6;
        SimTime(micros.round() as u64)
    }

    fn serialization(&self, bytes: u64) -> SimTime {
        SimTime((bytes as f64 * 8.0 / self.bandwidth_bps * 1e6).round() as u64)
    }
}

/// Arrival time of `bytes` sent at `now` over an idle link.
pub fn transmit(bytes: u64, link: &NetworkLink, now: SimTime) -> Result<SimTime, RuntimeError> {
    if !link.is_up(now) {
        return Err(RuntimeError::LinkDown {
            link: link.name.clone(),
            at: now,
        });
    }
    Ok(now + link.duration(bytes))
}

/// A link plus its FIFO transmit queue.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkState {
    pub link: NetworkLink,
    pub busy_until: SimTime,
    pub bytes_sent: u64,
}

impl LinkState {
    pub fn new(link: NetworkLink) -> Self {
        LinkState {
            link,
            busy_until: SimTime::ZERO,
            bytes_sent: 0,
        }
    }

    /// Sends after any queued transfer finishes; returns the arrival time.
    pub fn send(&mut self, bytes: u64, now: SimTime) -> Result<SimTime, RuntimeError> {
        let start = now.max(self.busy_until);
        if !self.link.is_up(now) || !self.link.is_up(start) {
            return Err(RuntimeError::LinkDown {
                link: self.link.name.clone(),
                at: now,
            });
        }
        self.busy_until = start + self.link.serialization(bytes);
        self.bytes_sent += bytes;
        Ok(start + self.link.duration(bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn megabyte_over_ten_mbps() {
        let link = NetworkLink::new("wan", 10e6, 0.0);
        assert_eq!(transmit(1_250_000, &link, SimTime::ZERO), Ok(SimTime::from_secs_f64(1.0)));
    }

    #[test]
    fn zero_bytes_costs_propagation_only() {
        let link = NetworkLink::new("wan", 10e6, 35.0);
        assert_eq!(transmit(0, &link, SimTime(7)), Ok(SimTime(7) + SimTime::from_millis_f64(35.0)));
    }

    #[test]
    fn send_during_outage_fails() {
        let mut link = NetworkLink::new("wan", 10e6, 0.0);
        link.outages.push(Outage {
            start_s: 25.0,
            end_s: Some(40.0),
        });
        assert!(transmit(10, &link, SimTime::from_secs_f64(24.9)).is_ok());
        assert!(matches!(
            transmit(10, &link, SimTime::from_secs_f64(25.0)),
            Err(RuntimeError::LinkDown { .. })
        ));
        assert!(transmit(10, &link, SimTime::from_secs_f64(40.0)).is_ok());
    }

    #[test]
    fn transfer_time_linear_in_bytes() {
        let link = NetworkLink::new("wan", 15e6, 12.0);
        let base = link.duration(0).0 as i64;
        let unit = link.duration(15_000).0 as i64 - base;
        for k in 0..50u64 {
            let d = link.duration(15_000 * k).0 as i64 - base;
            assert!((d - unit * k as i64).abs() <= 1, "k={k}");
        }
    }

    #[test]
    fn queued_sends_serialize() {
        let mut l = LinkState::new(NetworkLink::new("wan", 8e6, 0.0));
        // 1 MB at 8 Mbps = 1 s each
        assert_eq!(l.send(1_000_000, SimTime::ZERO).unwrap(), SimTime::from_secs_f64(1.0));
        assert_eq!(l.send(1_000_000, SimTime::ZERO).unwrap(), SimTime::from_secs_f64(2.0));
        assert_eq!(l.bytes_sent, 2_000_000);
    }
}
