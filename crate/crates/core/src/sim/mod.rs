//! Cycle-stepped kernel tying DMA, bridge, PHY and device together.
//!
//! Subsystem cycle `n` runs, in order:
//!
//! 1. firmware FIFO pushes staged during cycle `n - 1` enter the FIFO,
//! 2. DMA engine 0, then engine 1,
//! 3. the bridge control unit (captures due, then hold / issue / idle),
//! 4. PHY cycles `2n` and `2n + 1`: the device sees the two CA beats and the
//!    command is timed at `2n`; data events due on either PHY cycle fire.
//!
//! Anything written to the FIFO during cycle `n` is poppable from `n + 1`.

mod report;
pub mod trace;

use crate::bridge::{Activity, Bridge, BridgeConfig, BridgeError, StepOutcome};
use crate::busmap::{BusError, DmaShadow, MemoryLayout, MemoryMap, RegisterBus};
use crate::cmdword::Word64;
use crate::device::{Device, DeviceCommand, DeviceConfig, DeviceError, DeviceEvent, Effect};
use crate::dma::{DmaDescriptor, DmaEngines, DmaError, DmaPorts, Endpoint, ENGINES, WORDS_PER_SLOT};
use crate::phy::{Burst, Corruption, DelayConfig, Direction, LaneSkew, Phy, PhyError};

pub use report::{RunReport, Warmup};
pub use trace::{parse_trace, TraceError, TraceRecord};

/// Everything needed to build a [`Simulator`].
#[derive(Debug, Clone, Default)]
pub struct SimConfig {
    pub seed: u64,
    pub layout: MemoryLayout,
    pub bridge: BridgeConfig,
    pub device: DeviceConfig,
    pub delays: DelayConfig,
    pub skew: LaneSkew,
    pub phy_ready: bool,
    pub corruption: Corruption,
    pub warmup: Warmup,
    pub trace: bool,
}

/// The hardware state reachable from the register bus.
#[derive(Debug, Clone)]
pub struct Platform {
    pub map: MemoryMap,
    pub bridge: Bridge,
    pub phy: Phy,
    pub device: Device,
    pub dma: DmaEngines,
    pub(crate) dma_shadow: [DmaShadow; ENGINES],
    pub(crate) fifo_lo: Option<u32>,
    pub(crate) staged_pushes: Vec<u64>,
    pub(crate) slot_sel: u8,
    pub(crate) reset_asserted: bool,
    pub(crate) cycle: u64,
}

struct KernelPorts<'a> {
    map: &'a mut MemoryMap,
    bridge: &'a mut Bridge,
    ready_at: u64,
}

fn slot_of(first_slot: u8, index: u32) -> (usize, usize) {
    (usize::from(first_slot) + (index / WORDS_PER_SLOT) as usize, (index % WORDS_PER_SLOT) as usize)
}

impl DmaPorts for KernelPorts<'_> {
    fn load(&mut self, ep: Endpoint, index: u32) -> Option<u64> {
        match ep {
            Endpoint::Memory(a) => self.map.read_u64(a.checked_add(8 * index)?),
            Endpoint::DataBuffer { first_slot } => {
                let (slot, word) = slot_of(first_slot, index);
                self.bridge.slot_read(slot).ok().map(|r| r.payload.word64(word))
            }
            Endpoint::CommandFifo => None,
        }
    }

    fn store(&mut self, ep: Endpoint, index: u32, word: u64) -> bool {
        match ep {
            Endpoint::Memory(a) => a.checked_add(8 * index).is_some_and(|a| self.map.write_u64(a, word)),
            Endpoint::DataBuffer { first_slot } => {
                let (slot, w) = slot_of(first_slot, index);
                self.bridge.buffer_mut().write_word64(slot, w, word).is_ok()
            }
            Endpoint::CommandFifo => self.bridge.fifo_push(Word64(word), self.ready_at).is_ok(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct KernelStats {
    first_issue: Option<u64>,
    steady_idle: u64,
    steady_beats: u64,
    dma_stalled: u64,
    datapath_errors: u64,
}

pub struct Simulator {
    hw: Platform,
    warmup: Warmup,
    stats: KernelStats,
    trace: Option<Vec<u8>>,
}

fn hex64(w: u64) -> String {
    format!("0x{w:016X}")
}

fn effect_fields(mut rec: TraceRecord, effect: &Effect) -> TraceRecord {
    match *effect {
        Effect::Activated { bank, row } => rec = rec.with("bank", bank).with("row", row),
        Effect::Precharged { bank } => rec = rec.with("bank", bank),
        Effect::ReadScheduled { addr, due } | Effect::WriteScheduled { addr, due } => {
            rec = rec.with("bank", addr.bank).with("row", addr.row).with("col", addr.col).with("due", due)
        }
        Effect::ModeRegisterWritten { reg, value } => rec = rec.with("reg", reg).with("value", value),
        Effect::ModeRegisterRead { reg, due } => rec = rec.with("reg", reg).with("due", due),
        Effect::None | Effect::Latched => {}
    }
    rec
}

fn reject_fields(rec: TraceRecord, err: &DeviceError) -> TraceRecord {
    match err {
        DeviceError::TimingViolation { kind, required, actual } => {
            rec.with("reason", "timing").with("rule", kind.name()).with("required", *required).with("actual", *actual)
        }
        DeviceError::IllegalCommand(r) => rec.with("reason", "illegal").with("rule", r.name()),
        DeviceError::UnknownOpcode(op) => rec.with("reason", "unknown_opcode").with("opcode", *op),
        DeviceError::AddressOutOfRange { .. } => rec.with("reason", "address").with("error", err.to_string()),
    }
}

impl Simulator {
    pub fn new(cfg: SimConfig) -> Self {
        let mut phy = Phy::new(cfg.delays, cfg.skew, cfg.corruption, cfg.seed);
        phy.ready = cfg.phy_ready;
        let device = Device::new(cfg.device);
        let reset_asserted = device.in_reset();
        Self {
            hw: Platform {
                map: MemoryMap::new(&cfg.layout),
                bridge: Bridge::new(cfg.bridge),
                phy,
                device,
                dma: DmaEngines::default(),
                dma_shadow: [DmaShadow::default(); ENGINES],
                fifo_lo: None,
                staged_pushes: Vec::new(),
                slot_sel: 0,
                reset_asserted,
                cycle: 0,
            },
            warmup: cfg.warmup,
            stats: KernelStats::default(),
            trace: cfg.trace.then(Vec::new),
        }
    }

    pub fn platform(&self) -> &Platform {
        &self.hw
    }

    pub fn platform_mut(&mut self) -> &mut Platform {
        &mut self.hw
    }

    /// Subsystem cycles completed so far.
    pub fn cycle(&self) -> u64 {
        self.hw.cycle
    }

    /// Enables tracing from this point on.
    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    /// Returns the trace written so far and keeps tracing.
    pub fn take_trace(&mut self) -> Vec<u8> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Arms a DMA engine directly, bypassing the register block.
    pub fn start_dma(&mut self, engine: usize, desc: DmaDescriptor) -> Result<(), DmaError> {
        self.hw.dma.configure(engine, desc, &self.hw.map)
    }

    /// Queues a word as firmware would through the FIFO port.
    pub fn push_word(&mut self, word: Word64) -> Result<(), BusError> {
        self.hw.write32(crate::busmap::FIFO_PORT_LO, word.lo())?;
        self.hw.write32(crate::busmap::FIFO_PORT_HI, word.hi())
    }

    pub fn is_quiescent(&self) -> bool {
        self.hw.staged_pushes.is_empty()
            && !self.hw.dma.busy()
            && self.hw.bridge.quiescent()
            && !self.hw.device.has_pending()
    }

    fn emit(&mut self, rec: TraceRecord) {
        if let Some(buf) = self.trace.as_mut() {
            buf.extend_from_slice(rec.to_json_line().as_bytes());
            buf.push(b'\n');
        }
    }

    fn tracing(&self) -> bool {
        self.trace.is_some()
    }

    fn in_warmup(&self, n: u64) -> bool {
        match self.warmup {
            Warmup::FirstIssue => self.stats.first_issue.is_none(),
            Warmup::Cycles(w) => n < w,
        }
    }

    /// Advances one subsystem cycle.
    pub fn step(&mut self) {
        let n = self.hw.cycle;
        let p0 = 2 * n;

        for w in std::mem::take(&mut self.hw.staged_pushes) {
            // capacity was checked when firmware wrote the port
            let _ = self.hw.bridge.fifo_push(Word64(w), n + 1);
        }

        let progress = {
            let hw = &mut self.hw;
            let mut ports = KernelPorts { map: &mut hw.map, bridge: &mut hw.bridge, ready_at: n + 1 };
            hw.dma.step(&mut ports)
        };
        for (engine, p) in progress.iter().enumerate() {
            if p.stalled {
                self.stats.dma_stalled += 1;
            }
            if !self.tracing() {
                continue;
            }
            let status = self.hw.dma.status(engine);
            if p.started {
                let d = self.hw.dma.descriptor(engine).expect("started engine has a descriptor");
                self.emit(
                    TraceRecord::new(n, p0, "dma", "START")
                        .with("engine", engine)
                        .with("src", format!("0x{:08X}", d.src.address()))
                        .with("dst", format!("0x{:08X}", d.dst.address()))
                        .with("len", d.len_words64)
                        .with("rate", d.rate),
                );
            }
            if p.stalled {
                self.emit(TraceRecord::new(n, p0, "dma", "STALL").with("engine", engine).with("transferred", status.transferred));
            }
            if p.finished {
                self.emit(TraceRecord::new(n, p0, "dma", "DONE").with("engine", engine).with("transferred", status.transferred));
            }
        }

        let in_warmup_before = self.in_warmup(n);
        let StepOutcome { activity, captures } = self.hw.bridge.step(n);
        if self.tracing() {
            for c in &captures {
                self.emit(
                    TraceRecord::new(n, p0, "bridge", "CAPTURE")
                        .with("slot", c.slot)
                        .with("issued", c.issued)
                        .with("missing", c.missing)
                        .with("data", c.data.to_hex()),
                );
            }
        }

        let mut command = None;
        match &activity {
            Activity::Issued(i) => {
                self.stats.first_issue.get_or_insert(n);
                if !self.in_warmup(n) {
                    self.stats.steady_beats += 2;
                }
                if self.tracing() {
                    self.emit(
                        TraceRecord::new(n, p0, "bridge", "ISSUE")
                            .with("word", hex64(i.word.raw()))
                            .with("type", i.cmd.kind.mnemonic())
                            .with("slot", i.cmd.slot)
                            .with("hold", i.cmd.hold),
                    );
                    if let (Some(due), Some(data)) = (i.fetch_due, i.write_data) {
                        let warning = self.hw.bridge.buffer().state(i.cmd.slot.into()).map(|s| s.code() != 2).unwrap_or(true);
                        self.emit(
                            TraceRecord::new(n, p0, "bridge", "FETCH")
                                .with("slot", i.cmd.slot)
                                .with("due", due)
                                .with("warning", warning)
                                .with("data", data.to_hex()),
                        );
                    }
                    for b in &i.beats {
                        self.emit(
                            TraceRecord::new(n, b.phy_cycle, "phy", "BEAT")
                                .with("cs", u8::from(b.beat.cs()))
                                .with("ca", format!("0x{:02X}", b.beat.ca())),
                        );
                    }
                }
                command = Some((i.cmd.beat0, i.cmd.beat1, i.write_data));
            }
            Activity::Held { remaining } => {
                let remaining = *remaining;
                if self.tracing() {
                    self.emit(TraceRecord::new(n, p0, "bridge", "HOLD").with("remaining", remaining));
                }
            }
            Activity::Idle => {
                if !in_warmup_before {
                    self.stats.steady_idle += 1;
                }
                if self.tracing() {
                    self.emit(TraceRecord::new(n, p0, "bridge", "IDLE"));
                }
            }
            Activity::Dropped { word, error } => {
                if !in_warmup_before {
                    self.stats.steady_idle += 1;
                }
                let reason = match error {
                    BridgeError::SlotBusy(_) => "slot_busy",
                    _ => "decode",
                };
                if self.tracing() {
                    let rec = TraceRecord::new(n, p0, "bridge", "DROP")
                        .with("word", hex64(word.raw()))
                        .with("reason", reason)
                        .with("error", error.to_string());
                    self.emit(rec);
                }
            }
        }

        // PHY cycle 2n: data events due now
        self.device_events(n, p0);
        // PHY cycle 2n + 1: both beats are in, the command executes
        if let Some((b0, b1, write_data)) = command {
            let result = self.hw.device.apply_command(b0, b1, p0);
            if self.tracing() {
                let name = DeviceCommand::decode(b0, b1).map(|c| c.mnemonic()).unwrap_or("???");
                match &result {
                    Ok(effect) if name != "DES" => {
                        let rec = TraceRecord::new(n, p0, "device", "CMD").with("cmd", name);
                        self.emit(effect_fields(rec, effect));
                    }
                    Ok(_) => {}
                    Err(e) => {
                        let rec = TraceRecord::new(n, p0, "device", "REJECT").with("cmd", name);
                        self.emit(reject_fields(rec, e));
                    }
                }
            }
            if let (Ok(Effect::WriteScheduled { .. }), Some(data)) = (&result, write_data) {
                match self.hw.phy.transfer(Direction::Write, &data) {
                    Ok(d) => {
                        self.hw.device.supply_write_data(p0, d);
                    }
                    Err(e) => self.datapath_error(n, p0 + 1, Direction::Write, &e),
                }
            }
        }
        self.device_events(n, p0 + 1);

        self.hw.cycle += 1;
    }

    fn datapath_error(&mut self, n: u64, p: u64, dir: Direction, e: &PhyError) {
        self.stats.datapath_errors += 1;
        self.emit(TraceRecord::new(n, p, "phy", "DATAPATH_ERROR").with("dir", dir.to_string()).with("error", e.to_string()));
    }

    fn device_events(&mut self, n: u64, p: u64) {
        for ev in self.hw.device.step(p) {
            match ev {
                DeviceEvent::ReadData { issued, data } => {
                    if self.tracing() {
                        self.emit(TraceRecord::new(n, p, "device", "RDATA").with("issued", issued).with("data", data.to_hex()));
                    }
                    match self.hw.phy.transfer(Direction::Read, &data) {
                        Ok(d) => {
                            self.hw.bridge.deliver_read(issued / 2, d);
                        }
                        Err(e) => self.datapath_error(n, p, Direction::Read, &e),
                    }
                }
                DeviceEvent::WriteLatched { issued, addr, had_data } if self.tracing() => {
                    self.emit(
                        TraceRecord::new(n, p, "device", "WLATCH")
                            .with("issued", issued)
                            .with("bank", addr.bank)
                            .with("row", addr.row)
                            .with("col", addr.col)
                            .with("had_data", had_data),
                    );
                }
                DeviceEvent::WriteLatched { .. } => {}
            }
        }
    }

    /// Runs until quiescent or until `horizon` cycles have elapsed in total.
    /// Returns true if the run ended quiescent.
    pub fn run_until_quiescent(&mut self, horizon: u64) -> bool {
        while !self.is_quiescent() {
            if self.hw.cycle >= horizon {
                return false;
            }
            self.step();
        }
        true
    }

    pub fn report(&self) -> RunReport {
        let b = self.hw.bridge.counters();
        let d = self.hw.device.counters();
        let cycles_run = self.hw.cycle;
        let warmup_cycles = match self.warmup {
            Warmup::FirstIssue => self.stats.first_issue.unwrap_or(cycles_run),
            Warmup::Cycles(w) => w.min(cycles_run),
        };
        RunReport {
            cycles_run,
            phy_cycles: 2 * cycles_run,
            warmup_cycles,
            idle_cycles: b.idle_cycles,
            steady_idle_cycles: self.stats.steady_idle,
            held_cycles: b.held_cycles,
            issued_commands: b.issued_commands,
            issued_beats: b.issued_beats,
            utilization: report::utilization(self.stats.steady_beats, cycles_run, warmup_cycles),
            decode_errors: b.decode_errors,
            slot_conflicts: b.slot_conflicts,
            timing_violations: d.timing_violations,
            illegal_commands: d.illegal_commands + d.unknown_opcodes,
            bytes_read: 64 * b.captures,
            bytes_written: 64 * b.fetches,
            dma_stalled_cycles: self.stats.dma_stalled,
            buffer_warnings: b.warnings,
            missing_read_data: b.missing_read_data,
            datapath_errors: self.stats.datapath_errors,
        }
    }

    /// Fills a data buffer slot directly, without a DMA transfer.
    pub fn preload_slot(&mut self, slot: usize, data: Burst) -> Result<(), BridgeError> {
        self.hw.bridge.slot_write(slot, data)
    }
}

impl RegisterBus for Simulator {
    fn read32(&self, addr: u32) -> Result<u32, BusError> {
        self.hw.read32(addr)
    }

    fn write32(&mut self, addr: u32, value: u32) -> Result<(), BusError> {
        self.hw.write32(addr, value)
    }

    fn tick(&mut self, cycles: u64) {
        for _ in 0..cycles {
            self.step();
        }
    }
}
