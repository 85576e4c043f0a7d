//! Scenario files: TOML describing clocks, timing, skews, memory images and a
//! DMA plan. Relative paths resolve against the scenario file's directory.
//!
//! ```toml
//! seed = 7
//!
//! [clock]
//! horizon = 100000
//!
//! [phy]
//! ready = true
//! skew_ps = [0, 250, 600]   # or one value for every lane; missing lanes are 0
//!
//! [stream]
//! path = "nops.words"       # command words, one hex word per line
//!
//! [output]
//! report = "out/report.json"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bridge::{min_read_latency_sys, BridgeConfig, DEFAULT_FIFO_DEPTH};
use crate::busmap::{MemoryLayout, SRAM_BASE};
use crate::cmdword::{parse_binary, parse_hex_words, parse_stream, render_binary, StreamError};
use crate::device::{DeviceConfig, TimingParams};
use crate::dma::{DmaDescriptor, Endpoint, ENGINES};
use crate::phy::{Corruption, DelayConfig, Direction, LaneSkew, DEFAULT_EYE_HALF_WIDTH_PS, DEFAULT_TAP_PS, LANES, MAX_TAP};
use crate::sim::{RunReport, SimConfig, Simulator, Warmup};
use crate::training::{
    initialize_device, read_training, verify_link, write_leveling, DeviceTiming, InitReport, TrainingConfig,
    TrainingError, TrainingReport,
};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {error}")]
    Io { path: PathBuf, error: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid scenario: {field}: {message}")]
    Invalid { field: String, message: String },
    #[error("{path}: {error}")]
    Stream { path: PathBuf, error: StreamError },
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid { field: field.into(), message: message.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClockConfig {
    pub phy_mhz: f64,
    pub sys_mhz: f64,
    /// Upper bound on subsystem cycles.
    pub horizon: u64,
}

impl Default for ClockConfig {
    fn default() -> Self {
        Self { phy_mhz: 2133.0, sys_mhz: 1066.5, horizon: 10_000_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BridgeSection {
    pub fifo_depth: usize,
    pub read_latency_sys: Option<u64>,
    pub write_latency_sys: Option<u64>,
    pub warmup: Warmup,
}

impl Default for BridgeSection {
    fn default() -> Self {
        Self { fifo_depth: DEFAULT_FIFO_DEPTH, read_latency_sys: None, write_latency_sys: None, warmup: Warmup::FirstIssue }
    }
}

/// One value for every lane, or a list (missing trailing lanes take 0).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerLane {
    All(u32),
    Lanes(Vec<u32>),
}

impl Default for PerLane {
    fn default() -> Self {
        PerLane::All(0)
    }
}

impl PerLane {
    fn expand(&self, field: &str) -> Result<[u32; LANES], ScenarioError> {
        match self {
            PerLane::All(v) => Ok([*v; LANES]),
            PerLane::Lanes(v) if v.len() > LANES => Err(invalid(field, format!("{} values for {LANES} lanes", v.len()))),
            PerLane::Lanes(v) => Ok(std::array::from_fn(|i| v.get(i).copied().unwrap_or(0))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhySection {
    pub tap_ps: u32,
    pub eye_half_width_ps: u32,
    pub skew_ps: PerLane,
    pub read_taps: PerLane,
    pub write_taps: PerLane,
    /// PHY readiness flag at power-up; training sets it itself.
    pub ready: bool,
    pub corruption: Corruption,
}

impl Default for PhySection {
    fn default() -> Self {
        Self {
            tap_ps: DEFAULT_TAP_PS,
            eye_half_width_ps: DEFAULT_EYE_HALF_WIDTH_PS,
            skew_ps: PerLane::default(),
            read_taps: PerLane::default(),
            write_taps: PerLane::default(),
            ready: false,
            corruption: Corruption::Invert,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamFormat {
    #[default]
    Text,
    Binary,
}

/// A command stream loaded into SRAM and sent to the FIFO by DMA.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSection {
    pub path: PathBuf,
    #[serde(default)]
    pub format: StreamFormat,
    #[serde(default)]
    pub base: u32,
    #[serde(default)]
    pub engine: usize,
    #[serde(default = "one")]
    pub rate: u32,
}

fn one() -> u32 {
    1
}

/// `"fifo"`, `"databuf:N"`, or a bus address (integer or `"0x..."`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EndpointSpec {
    Address(u32),
    Named(String),
}

impl EndpointSpec {
    fn resolve(&self, field: &str) -> Result<Endpoint, ScenarioError> {
        match self {
            EndpointSpec::Address(a) => Ok(Endpoint::Memory(*a)),
            EndpointSpec::Named(s) if s == "fifo" => Ok(Endpoint::CommandFifo),
            EndpointSpec::Named(s) => {
                if let Some(slot) = s.strip_prefix("databuf:") {
                    let slot: u8 = slot.parse().map_err(|_| invalid(field, format!("bad data buffer slot in {s:?}")))?;
                    return Ok(Endpoint::DataBuffer { first_slot: slot });
                }
                let hex = s.strip_prefix("0x").ok_or_else(|| invalid(field, format!("unknown endpoint {s:?}")))?;
                u32::from_str_radix(hex, 16)
                    .map(Endpoint::Memory)
                    .map_err(|_| invalid(field, format!("bad address {s:?}")))
            }
        }
    }
}

/// A DMA transfer armed at cycle `start`, or as soon after as its engine is idle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DmaSection {
    #[serde(default)]
    pub engine: usize,
    pub src: EndpointSpec,
    pub dst: EndpointSpec,
    pub len: u32,
    #[serde(default = "one")]
    pub rate: u32,
    #[serde(default)]
    pub start: u64,
}

/// Data placed in SRAM: raw bytes, or hex words (one per line) stored little-endian.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSection {
    pub base: u32,
    pub path: PathBuf,
    #[serde(default)]
    pub format: StreamFormat,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub trace: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    pub clock: ClockConfig,
    pub memory: MemoryLayout,
    pub timing: TimingParams,
    pub bridge: BridgeSection,
    pub phy: PhySection,
    pub device: DeviceSection,
    pub stream: Option<StreamSection>,
    pub dma: Vec<DmaSection>,
    pub image: Vec<ImageSection>,
    pub output: OutputSection,
    pub training: TrainingConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceSection {
    pub initialized: bool,
    pub stuck_in_reset: bool,
}

/// A built simulator plus the DMA transfers still waiting to be armed.
pub struct Prepared {
    pub sim: Simulator,
    pub horizon: u64,
    plan: Vec<(u64, usize, DmaDescriptor)>,
}

pub struct RunOutput {
    pub report: RunReport,
    pub trace: Vec<u8>,
    /// False when the horizon cut the run short.
    pub quiescent: bool,
}

/// Everything the training flow produced, in the order it ran. Later stages
/// are absent when an earlier one could not complete.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct TrainSummary {
    pub init: Option<InitReport>,
    pub read: Option<TrainingReport>,
    pub write: Option<TrainingReport>,
    pub verify_bursts: u32,
    pub verify_ratio: Option<f64>,
    /// Lanes without a passing window, per direction.
    pub no_eye_read: Vec<usize>,
    pub no_eye_write: Vec<usize>,
    pub error: Option<String>,
    pub run: RunReport,
}

impl TrainSummary {
    /// Every lane trained in both directions and verification was error-free.
    pub fn converged(&self) -> bool {
        self.error.is_none()
            && self.no_eye_read.is_empty()
            && self.no_eye_write.is_empty()
            && self.verify_ratio == Some(1.0)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serializes");
        s.push('\n');
        s
    }
}

pub struct TrainOutput {
    pub summary: TrainSummary,
    pub trace: Vec<u8>,
}

fn sweep(
    r: Result<TrainingReport, TrainingError>,
    no_eye: &mut Vec<usize>,
) -> Result<TrainingReport, String> {
    match r {
        Ok(rep) => Ok(rep),
        Err(TrainingError::NoEyeFound { lanes, report, .. }) => {
            *no_eye = lanes;
            Ok(report)
        }
        Err(e) => Err(e.to_string()),
    }
}

impl Scenario {
    pub fn from_path(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|error| ScenarioError::Io { path: path.into(), error })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, base).map_err(|e| match e {
            ScenarioError::Parse { message, .. } => ScenarioError::Parse { path: path.into(), message },
            other => other,
        })
    }

    /// Parses and validates. `base_dir` anchors relative paths.
    pub fn from_toml_str(text: &str, base_dir: PathBuf) -> Result<Self, ScenarioError> {
        let mut s: Scenario =
            toml::from_str(text).map_err(|e| ScenarioError::Parse { path: PathBuf::new(), message: e.to_string() })?;
        s.base_dir = base_dir;
        s.validate()?;
        Ok(s)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let c = &self.clock;
        if !(c.phy_mhz > 0.0 && c.sys_mhz > 0.0) {
            return Err(invalid("clock", "frequencies must be positive"));
        }
        if (c.phy_mhz - 2.0 * c.sys_mhz).abs() > 1e-9 * c.phy_mhz {
            return Err(invalid("clock.sys_mhz", "must be exactly half of clock.phy_mhz"));
        }
        self.memory.validate().map_err(|m| invalid("memory", m))?;
        self.timing.validate().map_err(|m| invalid("timing", m))?;
        let b = &self.bridge;
        if b.fifo_depth == 0 {
            return Err(invalid("bridge.fifo_depth", "must be at least 1"));
        }
        if let Some(rl) = b.read_latency_sys {
            let min = min_read_latency_sys(&self.timing);
            if rl < min {
                return Err(invalid("bridge.read_latency_sys", format!("must be at least {min} for rl = {}", self.timing.rl)));
            }
        }
        if self.phy.tap_ps == 0 {
            return Err(invalid("phy.tap_ps", "must be at least 1"));
        }
        self.phy.skew_ps.expand("phy.skew_ps")?;
        for (field, taps) in [("phy.read_taps", &self.phy.read_taps), ("phy.write_taps", &self.phy.write_taps)] {
            if taps.expand(field)?.iter().any(|&t| t > u32::from(MAX_TAP)) {
                return Err(invalid(field, format!("taps must be 0..={MAX_TAP}")));
            }
        }
        if let Some(st) = &self.stream {
            if st.engine >= ENGINES {
                return Err(invalid("stream.engine", "must be 0 or 1"));
            }
            if st.rate == 0 || st.rate > 255 {
                return Err(invalid("stream.rate", "must be 1..=255"));
            }
        }
        for (i, d) in self.dma.iter().enumerate() {
            if d.engine >= ENGINES {
                return Err(invalid(format!("dma[{i}].engine"), "must be 0 or 1"));
            }
            if d.rate == 0 || d.rate > 255 {
                return Err(invalid(format!("dma[{i}].rate"), "must be 1..=255"));
            }
            d.src.resolve(&format!("dma[{i}].src"))?;
            d.dst.resolve(&format!("dma[{i}].dst"))?;
        }
        if self.training.retries == 0 {
            return Err(invalid("training.retries", "must be at least 1"));
        }
        for (field, p) in self
            .stream
            .iter()
            .map(|s| ("stream.path".to_string(), &s.path))
            .chain(self.image.iter().enumerate().map(|(i, im)| (format!("image[{i}].path"), &im.path)))
        {
            if !self.resolve(p).is_file() {
                return Err(invalid(field, format!("no such file: {}", self.resolve(p).display())));
            }
        }
        Ok(())
    }

    pub fn sim_config(&self, trace: bool) -> Result<SimConfig, ScenarioError> {
        let mut delays = DelayConfig::default();
        delays.tap_ps = self.phy.tap_ps;
        let read = self.phy.read_taps.expand("phy.read_taps")?;
        let write = self.phy.write_taps.expand("phy.write_taps")?;
        for lane in 0..LANES {
            delays.set(lane, Direction::Read, read[lane]).map_err(|e| invalid("phy.read_taps", e.to_string()))?;
            delays.set(lane, Direction::Write, write[lane]).map_err(|e| invalid("phy.write_taps", e.to_string()))?;
        }
        let mut bridge = BridgeConfig::for_timing(&self.timing);
        bridge.fifo_depth = self.bridge.fifo_depth;
        if let Some(v) = self.bridge.read_latency_sys {
            bridge.read_latency_sys = v;
        }
        if let Some(v) = self.bridge.write_latency_sys {
            bridge.write_latency_sys = v;
        }
        Ok(SimConfig {
            seed: self.seed,
            layout: self.memory,
            bridge,
            device: DeviceConfig {
                timing: self.timing,
                initialized: self.device.initialized,
                stuck_in_reset: self.device.stuck_in_reset,
            },
            delays,
            skew: LaneSkew { skew_ps: self.phy.skew_ps.expand("phy.skew_ps")?, eye_half_width_ps: self.phy.eye_half_width_ps },
            phy_ready: self.phy.ready,
            corruption: self.phy.corruption,
            warmup: self.bridge.warmup,
            trace,
        })
    }

    /// Training parameters with the device timing filled in from `[timing]`.
    pub fn training_config(&self) -> TrainingConfig {
        let t = self.timing;
        TrainingConfig {
            timing: DeviceTiming { t_rcd: t.t_rcd, t_rp: t.t_rp, t_ras: t.t_ras, t_ccd: t.t_ccd, rl: t.rl, wl: t.wl },
            ..self.training
        }
    }

    fn read_words(&self, path: &Path, format: StreamFormat, commands: bool) -> Result<Vec<u8>, ScenarioError> {
        let full = self.resolve(path);
        let bytes = std::fs::read(&full).map_err(|error| ScenarioError::Io { path: full.clone(), error })?;
        let words = match format {
            StreamFormat::Binary => return Ok(bytes),
            StreamFormat::Text => {
                let text = String::from_utf8(bytes)
                    .map_err(|_| ScenarioError::Parse { path: full.clone(), message: "not UTF-8 text".into() })?;
                let parsed = if commands {
                    parse_stream(&text)
                } else {
                    parse_hex_words(&text).map(|ws| ws.into_iter().map(|(_, w)| w).collect())
                };
                parsed.map_err(|error| ScenarioError::Stream { path: full.clone(), error })?
            }
        };
        Ok(render_binary(&words))
    }

    /// Builds the simulator: loads images and the stream, arms DMA due at cycle 0.
    pub fn prepare(&self, trace: bool) -> Result<Prepared, ScenarioError> {
        let mut sim = Simulator::new(self.sim_config(trace)?);
        for (i, im) in self.image.iter().enumerate() {
            let bytes = self.read_words(&im.path, im.format, false)?;
            sim.platform_mut().map.load(im.base, &bytes).map_err(|e| invalid(format!("image[{i}]"), e.to_string()))?;
        }
        let mut plan = Vec::new();
        if let Some(st) = &self.stream {
            let bytes = self.read_words(&st.path, st.format, true)?;
            if st.format == StreamFormat::Binary {
                parse_binary(&bytes).map_err(|error| ScenarioError::Stream { path: self.resolve(&st.path), error })?;
            }
            let base = if st.base == 0 { SRAM_BASE } else { st.base };
            sim.platform_mut().map.load(base, &bytes).map_err(|e| invalid("stream", e.to_string()))?;
            let len = (bytes.len() / 8) as u32;
            if len > 0 {
                let desc = DmaDescriptor { src: Endpoint::Memory(base), dst: Endpoint::CommandFifo, len_words64: len, rate: st.rate };
                plan.push((0, st.engine, desc));
            }
        }
        for (i, d) in self.dma.iter().enumerate() {
            let desc = DmaDescriptor {
                src: d.src.resolve(&format!("dma[{i}].src"))?,
                dst: d.dst.resolve(&format!("dma[{i}].dst"))?,
                len_words64: d.len,
                rate: d.rate,
            };
            plan.push((d.start, d.engine, desc));
        }
        let mut prepared = Prepared { sim, horizon: self.clock.horizon, plan };
        prepared.arm_due().map_err(|(i, e)| invalid(format!("dma plan entry {i}"), e))?;
        Ok(prepared)
    }

    /// Initialization, read training, write leveling and a verification pass
    /// of `training.verify_bursts` bursts on a fresh platform. Images are
    /// loaded; the stream and DMA plan are not used.
    pub fn train(&self, trace: bool) -> Result<TrainOutput, ScenarioError> {
        let mut sim = Simulator::new(self.sim_config(trace)?);
        for (i, im) in self.image.iter().enumerate() {
            let bytes = self.read_words(&im.path, im.format, false)?;
            sim.platform_mut().map.load(im.base, &bytes).map_err(|e| invalid(format!("image[{i}]"), e.to_string()))?;
        }
        let cfg = self.training_config();
        let mut out = TrainSummary { verify_bursts: cfg.verify_bursts, ..Default::default() };
        let result = (|| {
            out.init = Some(initialize_device(&mut sim, &cfg).map_err(|e| e.to_string())?);
            out.read = Some(sweep(read_training(&mut sim, &cfg), &mut out.no_eye_read)?);
            out.write = Some(sweep(write_leveling(&mut sim, &cfg), &mut out.no_eye_write)?);
            if out.no_eye_read.is_empty() && out.no_eye_write.is_empty() {
                let ratio = verify_link(&mut sim, &cfg, cfg.verify_bursts, self.seed).map_err(|e| e.to_string())?;
                out.verify_ratio = Some(ratio);
            }
            Ok::<(), String>(())
        })();
        out.error = result.err();
        out.run = sim.report();
        Ok(TrainOutput { summary: out, trace: sim.take_trace() })
    }

    /// Prepares and runs to quiescence or the horizon.
    pub fn run(&self, trace: bool) -> Result<RunOutput, ScenarioError> {
        self.prepare(trace)?.run()
    }
}

impl Prepared {
    /// Arms every plan entry whose start cycle has come and whose engine is
    /// free, in file order per engine.
    fn arm_due(&mut self) -> Result<(), (usize, String)> {
        let now = self.sim.cycle();
        let mut claimed = [false; ENGINES];
        let mut i = 0;
        while i < self.plan.len() {
            let (start, engine, desc) = self.plan[i];
            let free = !self.sim.platform().dma.status(engine).busy && !claimed[engine];
            claimed[engine] = true;
            if start <= now && free {
                self.sim.start_dma(engine, desc).map_err(|e| (i, e.to_string()))?;
                self.plan.remove(i);
            } else {
                i += 1;
            }
        }
        Ok(())
    }

    pub fn run(mut self) -> Result<RunOutput, ScenarioError> {
        loop {
            let idle = self.sim.is_quiescent();
            if idle && self.plan.is_empty() {
                break;
            }
            if self.sim.cycle() >= self.horizon {
                break;
            }
            self.sim.step();
            self.arm_due().map_err(|(i, e)| invalid(format!("dma plan entry {i}"), e))?;
        }
        let quiescent = self.sim.is_quiescent() && self.plan.is_empty();
        let trace = self.sim.take_trace();
        Ok(RunOutput { report: self.sim.report(), trace, quiescent })
    }
}
