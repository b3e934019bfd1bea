//! Synthetic load: simulated bridges whose sensors report a noisy sinusoid.

use std::f64::consts::TAU;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::RecordPublisher;
use crate::records::{ActivePowerRecord, SensorId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct SimulatorConfig {
    pub bridges: u32,
    pub sensors_per_bridge: u32,
    pub period_ms: u64,
    pub seed: u64,
    /// Mean draw of a sensor; each sensor gets a level between half and
    /// one and a half times this.
    pub base_w: f64,
    pub amplitude_w: f64,
    pub noise_w: f64,
    pub cycle_ms: u64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self {
            bridges: 1,
            sensors_per_bridge: 1,
            period_ms: 1000,
            seed: 0,
            base_w: 400.0,
            amplitude_w: 100.0,
            noise_w: 10.0,
            cycle_ms: 600_000,
        }
    }
}

#[derive(Debug, Error)]
#[error("invalid simulator configuration: {0}")]
pub struct InvalidSimulatorConfig(&'static str);

impl SimulatorConfig {
    pub fn new(bridges: u32, sensors_per_bridge: u32, period_ms: u64, seed: u64) -> Self {
        Self {
            bridges,
            sensors_per_bridge,
            period_ms,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), InvalidSimulatorConfig> {
        if self.bridges == 0 {
            return Err(InvalidSimulatorConfig("bridges must be at least 1"));
        }
        if self.sensors_per_bridge == 0 {
            return Err(InvalidSimulatorConfig("sensorsPerBridge must be at least 1"));
        }
        if self.period_ms == 0 {
            return Err(InvalidSimulatorConfig("periodMs must be at least 1"));
        }
        if self.cycle_ms == 0 {
            return Err(InvalidSimulatorConfig("cycleMs must be at least 1"));
        }
        let finite = [self.base_w, self.amplitude_w, self.noise_w];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(InvalidSimulatorConfig("power parameters must be finite and non-negative"));
        }
        Ok(())
    }

    /// Records per second across all bridges.
    pub fn offered_load(&self) -> f64 {
        self.bridges as f64 * self.sensors_per_bridge as f64 * 1000.0 / self.period_ms as f64
    }

    pub fn sensor_id(bridge: u32, sensor: u32) -> SensorId {
        SensorId::new(format!("sim-{bridge}-{sensor}")).expect("simulator ids are valid")
    }
}

/// One simulated bridge. Its value sequence depends only on the seed and the
/// bridge index.
pub struct SimulatedBridge {
    config: SimulatorConfig,
    sensors: Vec<SensorId>,
    levels: Vec<f64>,
    phases: Vec<f64>,
    rng: ChaCha8Rng,
    tick: u64,
}

impl SimulatedBridge {
    pub fn new(config: &SimulatorConfig, bridge: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(bridge as u64);
        let n = config.sensors_per_bridge;
        let sensors = (0..n).map(|s| SimulatorConfig::sensor_id(bridge, s)).collect();
        let levels = (0..n)
            .map(|_| config.base_w * rng.gen_range(0.5..1.5))
            .collect();
        let phases = (0..n).map(|_| rng.gen_range(0.0..TAU)).collect();
        Self {
            config: config.clone(),
            sensors,
            levels,
            phases,
            rng,
            tick: 0,
        }
    }

    pub fn sensors(&self) -> &[SensorId] {
        &self.sensors
    }

    /// Values of all sensors for the next tick.
    pub fn next_values(&mut self) -> Vec<f64> {
        let t = (self.tick * self.config.period_ms) as f64 / self.config.cycle_ms as f64;
        self.tick += 1;
        let amplitude = self.config.amplitude_w;
        let noise = self.config.noise_w;
        (0..self.sensors.len())
            .map(|i| {
                let wave = amplitude * (TAU * t + self.phases[i]).sin();
                let jitter = if noise > 0.0 { self.rng.gen_range(-noise..=noise) } else { 0.0 };
                (self.levels[i] + wave + jitter).max(0.0)
            })
            .collect()
    }

    pub fn next_records(&mut self, timestamp: i64) -> Vec<ActivePowerRecord> {
        self.next_values()
            .into_iter()
            .zip(&self.sensors)
            .map(|(v, id)| ActivePowerRecord {
                identifier: id.clone(),
                timestamp,
                value_in_w: v,
            })
            .collect()
    }
}

pub struct SimulatorHandle {
    stop: Arc<AtomicBool>,
    published: Arc<AtomicU64>,
    failed: Arc<AtomicU64>,
    threads: Vec<JoinHandle<()>>,
}

impl SimulatorHandle {
    pub fn published(&self) -> u64 {
        self.published.load(Ordering::Relaxed)
    }

    pub fn failed(&self) -> u64 {
        self.failed.load(Ordering::Relaxed)
    }

    pub fn is_running(&self) -> bool {
        !self.stop.load(Ordering::Relaxed)
    }

    /// Stops all bridges and returns the number of records published.
    pub fn stop(mut self) -> u64 {
        self.shutdown();
        self.published()
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for SimulatorHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn now_ms() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}

/// Starts one thread per simulated bridge. Every `periodMs` each bridge
/// publishes one record per sensor, stamped with the tick's scheduled time.
pub fn run_simulator<P>(config: SimulatorConfig, publisher: P) -> Result<SimulatorHandle, InvalidSimulatorConfig>
where
    P: RecordPublisher + Clone + 'static,
{
    config.validate()?;
    let stop = Arc::new(AtomicBool::new(false));
    let published = Arc::new(AtomicU64::new(0));
    let failed = Arc::new(AtomicU64::new(0));
    let start = Instant::now();
    let start_ms = now_ms();
    let period = Duration::from_millis(config.period_ms);
    let threads = (0..config.bridges)
        .map(|b| {
            let mut bridge = SimulatedBridge::new(&config, b);
            let publisher = publisher.clone();
            let (stop, published, failed) = (Arc::clone(&stop), Arc::clone(&published), Arc::clone(&failed));
            thread::Builder::new()
                .name(format!("sim-bridge-{b}"))
                .spawn(move || {
                    let mut tick: u32 = 0;
                    while !stop.load(Ordering::Relaxed) {
                        let deadline = start + period * tick;
                        loop {
                            let now = Instant::now();
                            if now >= deadline || stop.load(Ordering::Relaxed) {
                                break;
                            }
                            thread::sleep((deadline - now).min(Duration::from_millis(50)));
                        }
                        if stop.load(Ordering::Relaxed) {
                            break;
                        }
                        let ts = start_ms + (tick as u64 * config.period_ms) as i64;
                        let records = bridge.next_records(ts);
                        match publisher.publish_batch(&records) {
                            Ok(()) => {
                                published.fetch_add(records.len() as u64, Ordering::Relaxed);
                            }
                            Err(e) => {
                                failed.fetch_add(records.len() as u64, Ordering::Relaxed);
                                tracing::warn!(bridge = b, error = %e, "simulator publish failed");
                            }
                        }
                        tick += 1;
                    }
                })
                .expect("spawn simulator thread")
        })
        .collect();
    Ok(SimulatorHandle {
        stop,
        published,
        failed,
        threads,
    })
}
