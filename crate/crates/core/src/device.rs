//! Behavioral LPDDR4X-like device.
//!
//! A device command is the pair of CA beats of one command word. When beat 0
//! has chip select low the pair is a deselect. Otherwise the top three bits of
//! beat 0 select the opcode:
//!
//! | bits 5..3 | command | payload                                             |
//! |-----------|---------|-----------------------------------------------------|
//! | `000`     | NOP     | ignored                                             |
//! | `001`     | ACT     | part 1 (beat1.cs=0): bank, row[14:9]; part 2 (cs=1): row[8:0] |
//! | `010`     | RD      | bank, col                                           |
//! | `011`     | WR      | bank, col                                           |
//! | `100`     | PRE     | bank                                                |
//! | `101`     | MRW     | part 1 (beat1.cs=0): reg; part 2 (cs=1): value       |
//! | `110`     | MRR     | reg                                                 |
//! | `111`     | reserved, rejected as an unknown opcode             |
//!
//! The nine payload bits are beat0.ca[2:0] (high) followed by beat1.ca[5:0].
//! Bank is always the top three payload bits. A 15-bit row or a register plus
//! an 8-bit value does not fit in nine bits, so ACT and MRW are split in two
//! parts like their JEDEC counterparts, with beat 1's chip select naming the
//! part. The activation takes effect (and is timed) at part 2.
//!
//! Timing is checked in PHY cycles against `tRCD`, `tRP`, `tRAS` and `tCCD`.
//! `tCCD` applies across the whole channel since every column command uses the
//! shared data bus. Rejected commands change nothing.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cmdword::CaBeat;
use crate::phy::Burst;

pub const BANKS: usize = 8;
pub const ROW_BITS: u32 = 15;
pub const COL_BITS: u32 = 6;
pub const MODE_REGISTERS: usize = 32;

/// Read/write latency code register written during initialization.
pub const MR_LATENCY: u8 = 2;
/// Bit 0 set marks initialization complete.
pub const MR_INIT: u8 = 30;
/// Read-only register whose MRR burst is the DQ calibration pattern.
pub const MR_DQ_CAL: u8 = 31;
pub const DQ_CAL_VALUE: u8 = 0xA5;

const OP_NOP: u8 = 0b000;
const OP_ACT: u8 = 0b001;
const OP_RD: u8 = 0b010;
const OP_WR: u8 = 0b011;
const OP_PRE: u8 = 0b100;
const OP_MRW: u8 = 0b101;
const OP_MRR: u8 = 0b110;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingParams {
    pub t_rcd: u32,
    pub t_rp: u32,
    pub t_ras: u32,
    pub t_ccd: u32,
    pub rl: u32,
    pub wl: u32,
}

impl Default for TimingParams {
    fn default() -> Self {
        Self { t_rcd: 8, t_rp: 8, t_ras: 18, t_ccd: 8, rl: 14, wl: 8 }
    }
}

impl TimingParams {
    pub fn validate(&self) -> Result<(), String> {
        let fields = [
            ("t_rcd", self.t_rcd),
            ("t_rp", self.t_rp),
            ("t_ras", self.t_ras),
            ("t_ccd", self.t_ccd),
            ("rl", self.rl),
            ("wl", self.wl),
        ];
        match fields.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(format!("timing.{name} must be at least 1")),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TimingKind {
    #[serde(rename = "tRCD")]
    Rcd,
    #[serde(rename = "tRP")]
    Rp,
    #[serde(rename = "tRAS")]
    Ras,
    #[serde(rename = "tCCD")]
    Ccd,
}

impl TimingKind {
    pub const fn name(self) -> &'static str {
        match self {
            TimingKind::Rcd => "tRCD",
            TimingKind::Rp => "tRP",
            TimingKind::Ras => "tRAS",
            TimingKind::Ccd => "tCCD",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [TimingKind::Rcd, TimingKind::Rp, TimingKind::Ras, TimingKind::Ccd]
            .into_iter()
            .find(|k| k.name() == name)
    }
}

impl fmt::Display for TimingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IllegalReason {
    InReset,
    NotInitialized,
    BankIdle,
    BankActive,
    NoPendingActivate,
    NoPendingModeWrite,
    ReadOnlyModeRegister,
}

impl IllegalReason {
    pub const fn name(self) -> &'static str {
        match self {
            IllegalReason::InReset => "in_reset",
            IllegalReason::NotInitialized => "not_initialized",
            IllegalReason::BankIdle => "bank_idle",
            IllegalReason::BankActive => "bank_active",
            IllegalReason::NoPendingActivate => "no_pending_activate",
            IllegalReason::NoPendingModeWrite => "no_pending_mode_write",
            IllegalReason::ReadOnlyModeRegister => "read_only_mode_register",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeviceError {
    #[error("{kind} violation: required {required} cycles, actual {actual}")]
    TimingViolation { kind: TimingKind, required: u32, actual: u64 },
    #[error("illegal command: {}", .0.name())]
    IllegalCommand(IllegalReason),
    #[error("unknown opcode {0:#05b}")]
    UnknownOpcode(u8),
    #[error("address out of range: bank {bank}, row {row}, col {col}")]
    AddressOutOfRange { bank: u32, row: u32, col: u32 },
}

/// A decoded device command (one command word's worth of CA beats).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DeviceCommand {
    Deselect,
    Nop,
    Act1 { bank: u8, row_hi: u8 },
    Act2 { row_lo: u16 },
    Rd { bank: u8, col: u8 },
    Wr { bank: u8, col: u8 },
    Pre { bank: u8 },
    Mrw1 { reg: u8 },
    Mrw2 { value: u8 },
    Mrr { reg: u8 },
}

fn beats(op: u8, part2: bool, payload: u16) -> (CaBeat, CaBeat) {
    let b0 = CaBeat::masked(true, op << 3 | (payload >> 6) as u8 & 0x7);
    let b1 = CaBeat::masked(part2, payload as u8 & 0x3f);
    (b0, b1)
}

impl DeviceCommand {
    pub fn decode(beat0: CaBeat, beat1: CaBeat) -> Result<Self, DeviceError> {
        if !beat0.cs() {
            return Ok(DeviceCommand::Deselect);
        }
        let op = beat0.ca() >> 3;
        let payload = u16::from(beat0.ca() & 0x7) << 6 | u16::from(beat1.ca());
        let bank = (payload >> 6) as u8;
        let low6 = (payload & 0x3f) as u8;
        let part2 = beat1.cs();
        Ok(match op {
            OP_NOP => DeviceCommand::Nop,
            OP_ACT if part2 => DeviceCommand::Act2 { row_lo: payload },
            OP_ACT => DeviceCommand::Act1 { bank, row_hi: low6 },
            OP_RD => DeviceCommand::Rd { bank, col: low6 },
            OP_WR => DeviceCommand::Wr { bank, col: low6 },
            OP_PRE => DeviceCommand::Pre { bank },
            OP_MRW if part2 => DeviceCommand::Mrw2 { value: payload as u8 },
            OP_MRW => DeviceCommand::Mrw1 { reg: low6 & 0x1f },
            OP_MRR => DeviceCommand::Mrr { reg: low6 & 0x1f },
            other => return Err(DeviceError::UnknownOpcode(other)),
        })
    }

    pub fn encode(self) -> (CaBeat, CaBeat) {
        match self {
            DeviceCommand::Deselect => (CaBeat::IDLE, CaBeat::IDLE),
            DeviceCommand::Nop => beats(OP_NOP, false, 0),
            DeviceCommand::Act1 { bank, row_hi } => {
                beats(OP_ACT, false, u16::from(bank) << 6 | u16::from(row_hi & 0x3f))
            }
            DeviceCommand::Act2 { row_lo } => beats(OP_ACT, true, row_lo & 0x1ff),
            DeviceCommand::Rd { bank, col } => beats(OP_RD, false, u16::from(bank) << 6 | u16::from(col)),
            DeviceCommand::Wr { bank, col } => beats(OP_WR, false, u16::from(bank) << 6 | u16::from(col)),
            DeviceCommand::Pre { bank } => beats(OP_PRE, false, u16::from(bank) << 6),
            DeviceCommand::Mrw1 { reg } => beats(OP_MRW, false, u16::from(reg & 0x1f)),
            DeviceCommand::Mrw2 { value } => beats(OP_MRW, true, u16::from(value)),
            DeviceCommand::Mrr { reg } => beats(OP_MRR, false, u16::from(reg & 0x1f)),
        }
    }

    /// Both parts of a row activation.
    pub fn activate(bank: u8, row: u16) -> [DeviceCommand; 2] {
        [
            DeviceCommand::Act1 { bank, row_hi: (row >> 9) as u8 & 0x3f },
            DeviceCommand::Act2 { row_lo: row & 0x1ff },
        ]
    }

    /// Both parts of a mode register write.
    pub fn mode_write(reg: u8, value: u8) -> [DeviceCommand; 2] {
        [DeviceCommand::Mrw1 { reg }, DeviceCommand::Mrw2 { value }]
    }

    pub const fn mnemonic(self) -> &'static str {
        match self {
            DeviceCommand::Deselect => "DES",
            DeviceCommand::Nop => "NOP",
            DeviceCommand::Act1 { .. } => "ACT1",
            DeviceCommand::Act2 { .. } => "ACT",
            DeviceCommand::Rd { .. } => "RD",
            DeviceCommand::Wr { .. } => "WR",
            DeviceCommand::Pre { .. } => "PRE",
            DeviceCommand::Mrw1 { .. } => "MRW1",
            DeviceCommand::Mrw2 { .. } => "MRW",
            DeviceCommand::Mrr { .. } => "MRR",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BurstAddress {
    pub bank: u8,
    pub row: u16,
    pub col: u8,
}

impl BurstAddress {
    pub fn new(bank: u32, row: u32, col: u32) -> Result<Self, DeviceError> {
        if bank as usize >= BANKS || row >= 1 << ROW_BITS || col >= 1 << COL_BITS {
            return Err(DeviceError::AddressOutOfRange { bank, row, col });
        }
        Ok(Self { bank: bank as u8, row: row as u16, col: col as u8 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RowState {
    #[default]
    Idle,
    Active(u16),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BankState {
    pub state: RowState,
    pub last_act: Option<u64>,
    pub last_pre: Option<u64>,
    pub last_rdwr: Option<u64>,
}

/// What an accepted command did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Effect {
    None,
    /// First half of a two-part command stored.
    Latched,
    Activated { bank: u8, row: u16 },
    Precharged { bank: u8 },
    ReadScheduled { addr: BurstAddress, due: u64 },
    WriteScheduled { addr: BurstAddress, due: u64 },
    ModeRegisterWritten { reg: u8, value: u8 },
    ModeRegisterRead { reg: u8, due: u64 },
}

/// Data-path events emitted by [`Device::step`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeviceEvent {
    /// Read burst on the bus, tagged with the PHY cycle the command was issued.
    ReadData { issued: u64, data: Burst },
    /// Write data stored into the array.
    WriteLatched { issued: u64, addr: BurstAddress, had_data: bool },
}

#[derive(Debug, Clone)]
enum Pending {
    Read { issued: u64, due: u64, source: ReadSource },
    Write { issued: u64, due: u64, addr: BurstAddress, data: Option<Burst> },
}

#[derive(Debug, Clone, Copy)]
enum ReadSource {
    Array(BurstAddress),
    ModeRegister(u8),
}

impl Pending {
    fn due(&self) -> u64 {
        match self {
            Pending::Read { due, .. } | Pending::Write { due, .. } => *due,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceConfig {
    pub timing: TimingParams,
    /// Device comes up with initialization already complete.
    pub initialized: bool,
    /// Device never leaves reset (forced failure for init tests).
    pub stuck_in_reset: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DeviceCounters {
    pub accepted: u64,
    pub timing_violations: u64,
    pub illegal_commands: u64,
    pub unknown_opcodes: u64,
    pub writes_without_data: u64,
}

impl DeviceCounters {
    pub fn rejected(&self) -> u64 {
        self.timing_violations + self.illegal_commands + self.unknown_opcodes
    }
}

/// Default mode register contents after reset.
pub fn mode_register_default(reg: u8) -> u8 {
    match reg {
        5 => 0xFF,
        8 => 0x10,
        MR_DQ_CAL => DQ_CAL_VALUE,
        _ => 0,
    }
}

/// The burst an MRR of a register holding `value` returns: the value in
/// every byte, with odd beats inverted.
pub fn mode_register_burst(value: u8) -> Burst {
    let rep = u32::from_le_bytes([value; 4]);
    Burst::from_beats(std::array::from_fn(|beat| if beat % 2 == 1 { !rep } else { rep }))
}

#[derive(Debug, Clone)]
pub struct Device {
    config: DeviceConfig,
    in_reset: bool,
    mr: [u8; MODE_REGISTERS],
    banks: [BankState; BANKS],
    last_column: Option<u64>,
    act_latch: Option<(u8, u8)>,
    mrw_latch: Option<u8>,
    storage: HashMap<BurstAddress, Burst>,
    pending: Vec<Pending>,
    counters: DeviceCounters,
}

impl Device {
    pub fn new(config: DeviceConfig) -> Self {
        let mut dev = Self {
            config,
            in_reset: config.stuck_in_reset,
            mr: std::array::from_fn(|r| mode_register_default(r as u8)),
            banks: [BankState::default(); BANKS],
            last_column: None,
            act_latch: None,
            mrw_latch: None,
            storage: HashMap::new(),
            pending: Vec::new(),
            counters: DeviceCounters::default(),
        };
        if config.initialized && !config.stuck_in_reset {
            dev.mr[MR_INIT as usize] = 1;
        }
        dev
    }

    pub fn timing(&self) -> &TimingParams {
        &self.config.timing
    }

    pub fn counters(&self) -> &DeviceCounters {
        &self.counters
    }

    pub fn in_reset(&self) -> bool {
        self.in_reset
    }

    pub fn initialized(&self) -> bool {
        !self.in_reset && self.mr[MR_INIT as usize] & 1 == 1
    }

    pub fn mode_register(&self, reg: u8) -> u8 {
        self.mr[reg as usize % MODE_REGISTERS]
    }

    pub fn bank(&self, bank: usize) -> &BankState {
        &self.banks[bank]
    }

    pub fn has_pending(&self) -> bool {
        !self.pending.is_empty()
    }

    /// Asserting reset clears mode registers, bank state and in-flight bursts;
    /// array contents survive.
    pub fn set_reset(&mut self, asserted: bool) {
        if asserted {
            self.in_reset = true;
            self.mr = std::array::from_fn(|r| mode_register_default(r as u8));
            self.banks = [BankState::default(); BANKS];
            self.last_column = None;
            self.act_latch = None;
            self.mrw_latch = None;
            self.pending.clear();
        } else if !self.config.stuck_in_reset {
            self.in_reset = false;
        }
    }

    /// Decodes and applies one two-beat command issued at `phy_cycle`.
    pub fn apply_command(&mut self, beat0: CaBeat, beat1: CaBeat, phy_cycle: u64) -> Result<Effect, DeviceError> {
        let result = DeviceCommand::decode(beat0, beat1).and_then(|cmd| self.apply(cmd, phy_cycle));
        match &result {
            Ok(Effect::None) => {}
            Ok(_) => self.counters.accepted += 1,
            Err(DeviceError::TimingViolation { .. }) => self.counters.timing_violations += 1,
            Err(DeviceError::UnknownOpcode(_)) => self.counters.unknown_opcodes += 1,
            Err(_) => self.counters.illegal_commands += 1,
        }
        result
    }

    fn require_gap(kind: TimingKind, since: Option<u64>, now: u64, required: u32) -> Result<(), DeviceError> {
        match since {
            Some(t) if now - t < u64::from(required) => {
                Err(DeviceError::TimingViolation { kind, required, actual: now - t })
            }
            _ => Ok(()),
        }
    }

    fn apply(&mut self, cmd: DeviceCommand, now: u64) -> Result<Effect, DeviceError> {
        use DeviceCommand::*;
        if matches!(cmd, Deselect | Nop) {
            return Ok(Effect::None);
        }
        if self.in_reset {
            return Err(DeviceError::IllegalCommand(IllegalReason::InReset));
        }
        let t = self.config.timing;
        match cmd {
            Deselect | Nop => unreachable!(),
            Act1 { bank, row_hi } => {
                self.act_latch = Some((bank, row_hi));
                Ok(Effect::Latched)
            }
            Act2 { row_lo } => {
                let (bank, row_hi) =
                    self.act_latch.ok_or(DeviceError::IllegalCommand(IllegalReason::NoPendingActivate))?;
                self.require_initialized()?;
                let b = &self.banks[bank as usize];
                if b.state != RowState::Idle {
                    return Err(DeviceError::IllegalCommand(IllegalReason::BankActive));
                }
                Self::require_gap(TimingKind::Rp, b.last_pre, now, t.t_rp)?;
                let row = u16::from(row_hi) << 9 | row_lo;
                let b = &mut self.banks[bank as usize];
                b.state = RowState::Active(row);
                b.last_act = Some(now);
                self.act_latch = None;
                Ok(Effect::Activated { bank, row })
            }
            Rd { bank, col } | Wr { bank, col } => {
                self.require_initialized()?;
                let b = &self.banks[bank as usize];
                let RowState::Active(row) = b.state else {
                    return Err(DeviceError::IllegalCommand(IllegalReason::BankIdle));
                };
                Self::require_gap(TimingKind::Rcd, b.last_act, now, t.t_rcd)?;
                Self::require_gap(TimingKind::Ccd, self.last_column, now, t.t_ccd)?;
                self.banks[bank as usize].last_rdwr = Some(now);
                self.last_column = Some(now);
                let addr = BurstAddress { bank, row, col };
                if matches!(cmd, Rd { .. }) {
                    let due = now + u64::from(t.rl);
                    self.pending.push(Pending::Read { issued: now, due, source: ReadSource::Array(addr) });
                    Ok(Effect::ReadScheduled { addr, due })
                } else {
                    let due = now + u64::from(t.wl);
                    self.pending.push(Pending::Write { issued: now, due, addr, data: None });
                    Ok(Effect::WriteScheduled { addr, due })
                }
            }
            Pre { bank } => {
                let b = &self.banks[bank as usize];
                if b.state == RowState::Idle {
                    return Ok(Effect::Precharged { bank });
                }
                Self::require_gap(TimingKind::Ras, b.last_act, now, t.t_ras)?;
                let b = &mut self.banks[bank as usize];
                b.state = RowState::Idle;
                b.last_pre = Some(now);
                Ok(Effect::Precharged { bank })
            }
            Mrw1 { reg } => {
                self.mrw_latch = Some(reg);
                Ok(Effect::Latched)
            }
            Mrw2 { value } => {
                let reg = self.mrw_latch.ok_or(DeviceError::IllegalCommand(IllegalReason::NoPendingModeWrite))?;
                if reg == MR_DQ_CAL {
                    return Err(DeviceError::IllegalCommand(IllegalReason::ReadOnlyModeRegister));
                }
                self.mr[reg as usize] = value;
                self.mrw_latch = None;
                Ok(Effect::ModeRegisterWritten { reg, value })
            }
            Mrr { reg } => {
                Self::require_gap(TimingKind::Ccd, self.last_column, now, t.t_ccd)?;
                self.last_column = Some(now);
                let due = now + u64::from(t.rl);
                self.pending.push(Pending::Read { issued: now, due, source: ReadSource::ModeRegister(reg) });
                Ok(Effect::ModeRegisterRead { reg, due })
            }
        }
    }

    fn require_initialized(&self) -> Result<(), DeviceError> {
        if self.mr[MR_INIT as usize] & 1 == 0 {
            return Err(DeviceError::IllegalCommand(IllegalReason::NotInitialized));
        }
        Ok(())
    }

    /// Attaches write data to the WR issued at `issued`. Returns false when no
    /// such write is pending.
    pub fn supply_write_data(&mut self, issued: u64, data: Burst) -> bool {
        for p in self.pending.iter_mut() {
            if let Pending::Write { issued: i, data: slot, .. } = p {
                if *i == issued {
                    *slot = Some(data);
                    return true;
                }
            }
        }
        false
    }

    /// Advances to `phy_cycle`, returning the data events due on it. Writes are
    /// retired before reads so a read due on the same cycle sees the new data.
    pub fn step(&mut self, phy_cycle: u64) -> Vec<DeviceEvent> {
        if self.pending.is_empty() {
            return Vec::new();
        }
        let mut due: Vec<Pending> = Vec::new();
        self.pending.retain(|p| {
            if p.due() <= phy_cycle {
                due.push(p.clone());
                false
            } else {
                true
            }
        });
        due.sort_by_key(|p| (matches!(p, Pending::Read { .. }), p.due()));
        let mut events = Vec::with_capacity(due.len());
        for p in due {
            match p {
                Pending::Write { issued, addr, data, .. } => {
                    let had_data = data.is_some();
                    if !had_data {
                        self.counters.writes_without_data += 1;
                    }
                    self.storage.insert(addr, data.unwrap_or(Burst::ZERO));
                    events.push(DeviceEvent::WriteLatched { issued, addr, had_data });
                }
                Pending::Read { issued, source, .. } => {
                    let data = match source {
                        ReadSource::Array(addr) => self.burst_read(addr),
                        ReadSource::ModeRegister(reg) => mode_register_burst(self.mode_register(reg)),
                    };
                    events.push(DeviceEvent::ReadData { issued, data });
                }
            }
        }
        events
    }

    pub fn burst_write(&mut self, addr: BurstAddress, data: Burst) {
        self.storage.insert(addr, data);
    }

    /// Never-written locations read as all zeros.
    pub fn burst_read(&self, addr: BurstAddress) -> Burst {
        self.storage.get(&addr).copied().unwrap_or(Burst::ZERO)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ready_device() -> Device {
        Device::new(DeviceConfig { initialized: true, ..Default::default() })
    }

    fn run(dev: &mut Device, cmd: DeviceCommand, cycle: u64) -> Result<Effect, DeviceError> {
        let (b0, b1) = cmd.encode();
        dev.apply_command(b0, b1, cycle)
    }

    fn activate(dev: &mut Device, bank: u8, row: u16, cycle: u64) -> Result<Effect, DeviceError> {
        let [a1, a2] = DeviceCommand::activate(bank, row);
        run(dev, a1, cycle)?;
        run(dev, a2, cycle)
    }

    #[test]
    fn rcd_violation_then_boundary() {
        let mut dev = ready_device();
        assert_eq!(activate(&mut dev, 0, 5, 0), Ok(Effect::Activated { bank: 0, row: 5 }));
        assert_eq!(
            run(&mut dev, DeviceCommand::Rd { bank: 0, col: 0 }, 4),
            Err(DeviceError::TimingViolation { kind: TimingKind::Rcd, required: 8, actual: 4 })
        );
        assert!(matches!(run(&mut dev, DeviceCommand::Rd { bank: 0, col: 0 }, 8), Ok(Effect::ReadScheduled { .. })));
    }

    #[test]
    fn read_to_idle_bank_is_illegal() {
        let mut dev = ready_device();
        assert_eq!(
            run(&mut dev, DeviceCommand::Rd { bank: 3, col: 0 }, 0),
            Err(DeviceError::IllegalCommand(IllegalReason::BankIdle))
        );
        assert_eq!(dev.counters().illegal_commands, 1);
    }

    #[test]
    fn act_on_active_bank_and_rp_ras() {
        let mut dev = ready_device();
        activate(&mut dev, 1, 7, 0).unwrap();
        assert_eq!(activate(&mut dev, 1, 8, 2), Err(DeviceError::IllegalCommand(IllegalReason::BankActive)));
        assert_eq!(
            run(&mut dev, DeviceCommand::Pre { bank: 1 }, 10),
            Err(DeviceError::TimingViolation { kind: TimingKind::Ras, required: 18, actual: 10 })
        );
        run(&mut dev, DeviceCommand::Pre { bank: 1 }, 18).unwrap();
        // latch from the failed activation is still pending
        assert_eq!(
            run(&mut dev, DeviceCommand::Act2 { row_lo: 8 }, 20),
            Err(DeviceError::TimingViolation { kind: TimingKind::Rp, required: 8, actual: 2 })
        );
        assert_eq!(activate(&mut dev, 1, 8, 26), Ok(Effect::Activated { bank: 1, row: 8 }));
    }

    #[test]
    fn ccd_is_channel_wide() {
        let mut dev = ready_device();
        activate(&mut dev, 0, 0, 0).unwrap();
        activate(&mut dev, 1, 0, 0).unwrap();
        run(&mut dev, DeviceCommand::Rd { bank: 0, col: 0 }, 8).unwrap();
        assert_eq!(
            run(&mut dev, DeviceCommand::Wr { bank: 1, col: 0 }, 12),
            Err(DeviceError::TimingViolation { kind: TimingKind::Ccd, required: 8, actual: 4 })
        );
    }

    #[test]
    fn rejection_leaves_state_unchanged() {
        let mut dev = ready_device();
        activate(&mut dev, 0, 9, 0).unwrap();
        let before = *dev.bank(0);
        let _ = run(&mut dev, DeviceCommand::Wr { bank: 0, col: 1 }, 2);
        assert_eq!(*dev.bank(0), before);
        assert!(!dev.has_pending());
    }

    #[test]
    fn opcode_decode() {
        let b0 = CaBeat::masked(true, 0b111_000);
        assert_eq!(DeviceCommand::decode(b0, CaBeat::IDLE), Err(DeviceError::UnknownOpcode(0b111)));
        assert_eq!(DeviceCommand::decode(CaBeat::masked(false, 0x3f), CaBeat::IDLE), Ok(DeviceCommand::Deselect));
        for cmd in [
            DeviceCommand::Nop,
            DeviceCommand::Act1 { bank: 7, row_hi: 0x3f },
            DeviceCommand::Act2 { row_lo: 0x1ff },
            DeviceCommand::Rd { bank: 5, col: 63 },
            DeviceCommand::Wr { bank: 2, col: 17 },
            DeviceCommand::Pre { bank: 6 },
            DeviceCommand::Mrw1 { reg: 31 },
            DeviceCommand::Mrw2 { value: 0xA7 },
            DeviceCommand::Mrr { reg: 30 },
        ] {
            let (b0, b1) = cmd.encode();
            assert_eq!(DeviceCommand::decode(b0, b1), Ok(cmd));
        }
    }

    #[test]
    fn full_row_range_round_trips() {
        let mut dev = ready_device();
        assert_eq!(activate(&mut dev, 7, 0x7FFF, 0), Ok(Effect::Activated { bank: 7, row: 0x7FFF }));
    }

    #[test]
    fn storage_background_and_readback() {
        let mut dev = ready_device();
        let a = BurstAddress::new(0, 1, 0).unwrap();
        let b = BurstAddress::new(0, 2, 0).unwrap();
        assert_eq!(dev.burst_read(a), Burst::ZERO);
        let p = Burst::from_beats([0xDEAD_BEEF; 16]);
        dev.burst_write(a, p);
        assert_eq!(dev.burst_read(a), p);
        assert_eq!(dev.burst_read(b), Burst::ZERO);
        assert!(BurstAddress::new(8, 0, 0).is_err());
        assert!(BurstAddress::new(0, 1 << 15, 0).is_err());
        assert!(BurstAddress::new(0, 0, 64).is_err());
    }

    #[test]
    fn read_latency_pipeline() {
        let mut dev = ready_device();
        activate(&mut dev, 0, 0, 92).unwrap();
        run(&mut dev, DeviceCommand::Rd { bank: 0, col: 0 }, 100).unwrap();
        run(&mut dev, DeviceCommand::Rd { bank: 0, col: 1 }, 108).unwrap();
        let mut seen = Vec::new();
        for cycle in 100..140 {
            for ev in dev.step(cycle) {
                if let DeviceEvent::ReadData { issued, .. } = ev {
                    seen.push((issued, cycle));
                }
            }
        }
        assert_eq!(seen, vec![(100, 114), (108, 122)]);
        assert!(dev.step(200).is_empty());
    }

    #[test]
    fn write_then_read_sees_new_data() {
        let mut dev = ready_device();
        activate(&mut dev, 2, 3, 0).unwrap();
        run(&mut dev, DeviceCommand::Wr { bank: 2, col: 4 }, 8).unwrap();
        let p = Burst::from_beats([0x5555_0000; 16]);
        assert!(dev.supply_write_data(8, p));
        run(&mut dev, DeviceCommand::Rd { bank: 2, col: 4 }, 16).unwrap();
        let mut read = None;
        for cycle in 8..40 {
            for ev in dev.step(cycle) {
                if let DeviceEvent::ReadData { data, .. } = ev {
                    read = Some(data);
                }
            }
        }
        assert_eq!(read, Some(p));
    }

    #[test]
    fn write_without_data_stores_zeros() {
        let mut dev = ready_device();
        let addr = BurstAddress::new(0, 0, 0).unwrap();
        dev.burst_write(addr, Burst::from_beats([1; 16]));
        activate(&mut dev, 0, 0, 0).unwrap();
        run(&mut dev, DeviceCommand::Wr { bank: 0, col: 0 }, 8).unwrap();
        let ev = dev.step(16);
        assert_eq!(ev, vec![DeviceEvent::WriteLatched { issued: 8, addr, had_data: false }]);
        assert_eq!(dev.burst_read(addr), Burst::ZERO);
        assert_eq!(dev.counters().writes_without_data, 1);
    }

    #[test]
    fn mode_registers_and_init() {
        let mut dev = Device::new(DeviceConfig::default());
        assert_eq!(dev.mode_register(5), 0xFF);
        assert_eq!(dev.mode_register(MR_DQ_CAL), DQ_CAL_VALUE);
        assert_eq!(activate(&mut dev, 0, 0, 0), Err(DeviceError::IllegalCommand(IllegalReason::NotInitialized)));
        for c in DeviceCommand::mode_write(MR_INIT, 1) {
            run(&mut dev, c, 0).unwrap();
        }
        assert!(dev.initialized());
        let [m1, m2] = DeviceCommand::mode_write(MR_DQ_CAL, 0);
        run(&mut dev, m1, 2).unwrap();
        assert_eq!(run(&mut dev, m2, 2), Err(DeviceError::IllegalCommand(IllegalReason::ReadOnlyModeRegister)));
        assert_eq!(run(&mut dev, DeviceCommand::Mrw2 { value: 1 }, 4).unwrap_err(),
            DeviceError::IllegalCommand(IllegalReason::ReadOnlyModeRegister));
    }

    #[test]
    fn mrw2_without_mrw1() {
        let mut dev = ready_device();
        assert_eq!(
            run(&mut dev, DeviceCommand::Mrw2 { value: 1 }, 0),
            Err(DeviceError::IllegalCommand(IllegalReason::NoPendingModeWrite))
        );
    }

    #[test]
    fn stuck_reset_rejects_everything() {
        let mut dev = Device::new(DeviceConfig { stuck_in_reset: true, initialized: true, ..Default::default() });
        dev.set_reset(false);
        assert!(dev.in_reset());
        assert_eq!(run(&mut dev, DeviceCommand::Mrw1 { reg: 2 }, 0), Err(DeviceError::IllegalCommand(IllegalReason::InReset)));
        assert_eq!(run(&mut dev, DeviceCommand::Nop, 2), Ok(Effect::None));
    }

    #[test]
    fn reset_clears_mode_registers() {
        let mut dev = ready_device();
        dev.set_reset(true);
        assert!(!dev.initialized());
        dev.set_reset(false);
        assert!(!dev.initialized());
        assert_eq!(dev.mode_register(MR_INIT), 0);
    }

    #[test]
    fn dq_cal_burst_pattern() {
        let b = mode_register_burst(DQ_CAL_VALUE);
        assert_eq!(b.beats[0], 0xA5A5_A5A5);
        assert_eq!(b.beats[1], 0x5A5A_5A5A);
    }

    proptest! {
        // Storage coherence against a reference map under random direct writes.
        #[test]
        fn storage_matches_reference(ops in proptest::collection::vec((0u32..8, 0u32..4, 0u32..4, any::<u32>()), 1..200)) {
            let mut dev = ready_device();
            let mut reference = std::collections::BTreeMap::new();
            for (bank, row, col, v) in ops {
                let addr = BurstAddress::new(bank, row, col).unwrap();
                let data = Burst::from_beats([v; 16]);
                dev.burst_write(addr, data);
                reference.insert(addr, data);
            }
            for (addr, data) in reference {
                prop_assert_eq!(dev.burst_read(addr), data);
            }
        }

        #[test]
        fn decode_total(b0 in 0u8..64, cs0: bool, b1 in 0u8..64, cs1: bool) {
            let _ = DeviceCommand::decode(CaBeat::masked(cs0, b0), CaBeat::masked(cs1, b1));
        }
    }
}
