//! The DFI bridge: command FIFO, bridge control unit and data buffer.
//!
//! The control unit pops at most one word per subsystem cycle and drives both
//! of its CA beats in that cycle. A word's `hold` stalls the next pop by that
//! many cycles. Read captures complete exactly `read_latency_sys` cycles after
//! issue, whether or not the device returned data.

use std::collections::VecDeque;

use thiserror::Error;

use crate::cmdword::{decode, CommandKind, DecodeError, DfiCommand, Word64};
use crate::device::TimingParams;
use crate::phy::{serialize_beats, Burst, PhyBeat};

pub const DATA_BUFFER_SLOTS: usize = 256;
pub const SLOT_BITS: usize = 512;
pub const DEFAULT_FIFO_DEPTH: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BridgeError {
    #[error("command FIFO full")]
    FifoFull,
    #[error("data buffer index {0} out of range 0..=255")]
    IndexOutOfRange(usize),
    #[error("data buffer slot {0} has a read pending")]
    SlotPending(u8),
    #[error("read capture targets slot {0} which already has a read pending")]
    SlotBusy(u8),
    #[error("dropped malformed command word: {0}")]
    Decode(#[from] DecodeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BridgeConfig {
    pub fifo_depth: usize,
    pub read_latency_sys: u64,
    pub write_latency_sys: u64,
}

impl BridgeConfig {
    /// Latencies derived from device timing. Read data leaves the device at
    /// PHY cycle `2n + RL` and is visible to the bridge one subsystem cycle
    /// later, so the capture lands at `RL / 2 + 1`.
    pub fn for_timing(timing: &TimingParams) -> Self {
        Self {
            fifo_depth: DEFAULT_FIFO_DEPTH,
            read_latency_sys: min_read_latency_sys(timing),
            write_latency_sys: u64::from(timing.wl.div_ceil(2)),
        }
    }
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self::for_timing(&TimingParams::default())
    }
}

pub fn min_read_latency_sys(timing: &TimingParams) -> u64 {
    u64::from(timing.rl / 2 + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SlotState {
    #[default]
    Idle,
    PendingRead,
    Valid,
}

impl SlotState {
    pub const fn code(self) -> u32 {
        match self {
            SlotState::Idle => 0,
            SlotState::PendingRead => 1,
            SlotState::Valid => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotRead {
    pub payload: Burst,
    /// The slot was never written; the payload is the zero background.
    pub warning: bool,
}

#[derive(Debug, Clone)]
pub struct DataBuffer {
    payload: Vec<Burst>,
    state: Vec<SlotState>,
}

impl Default for DataBuffer {
    fn default() -> Self {
        Self { payload: vec![Burst::ZERO; DATA_BUFFER_SLOTS], state: vec![SlotState::Idle; DATA_BUFFER_SLOTS] }
    }
}

impl DataBuffer {
    fn check(index: usize) -> Result<(), BridgeError> {
        if index >= DATA_BUFFER_SLOTS {
            return Err(BridgeError::IndexOutOfRange(index));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }

    pub fn state(&self, index: usize) -> Result<SlotState, BridgeError> {
        Self::check(index)?;
        Ok(self.state[index])
    }

    pub fn read(&self, index: usize) -> Result<SlotRead, BridgeError> {
        Self::check(index)?;
        match self.state[index] {
            SlotState::PendingRead => Err(BridgeError::SlotPending(index as u8)),
            SlotState::Idle => Ok(SlotRead { payload: Burst::ZERO, warning: true }),
            SlotState::Valid => Ok(SlotRead { payload: self.payload[index], warning: false }),
        }
    }

    pub fn write(&mut self, index: usize, payload: Burst) -> Result<(), BridgeError> {
        Self::check(index)?;
        self.payload[index] = payload;
        self.state[index] = SlotState::Valid;
        Ok(())
    }

    /// Writes one 64-bit word of a slot. Fails with `SlotPending` while a
    /// capture is outstanding.
    pub fn write_word64(&mut self, index: usize, word: usize, value: u64) -> Result<(), BridgeError> {
        Self::check(index)?;
        if self.state[index] == SlotState::PendingRead {
            return Err(BridgeError::SlotPending(index as u8));
        }
        if self.state[index] == SlotState::Idle {
            self.payload[index] = Burst::ZERO;
        }
        self.payload[index].set_word64(word, value);
        self.state[index] = SlotState::Valid;
        Ok(())
    }

    pub fn write_beat(&mut self, index: usize, beat: usize, value: u32) -> Result<(), BridgeError> {
        Self::check(index)?;
        if self.state[index] == SlotState::PendingRead {
            return Err(BridgeError::SlotPending(index as u8));
        }
        if self.state[index] == SlotState::Idle {
            self.payload[index] = Burst::ZERO;
        }
        self.payload[index].beats[beat] = value;
        self.state[index] = SlotState::Valid;
        Ok(())
    }

    fn mark_pending(&mut self, slot: u8) {
        self.state[slot as usize] = SlotState::PendingRead;
    }

    fn complete(&mut self, slot: u8, data: Burst) {
        self.payload[slot as usize] = data;
        self.state[slot as usize] = SlotState::Valid;
    }
}

#[derive(Debug, Clone)]
pub struct CommandFifo {
    entries: VecDeque<(Word64, u64)>,
    depth: usize,
}

impl CommandFifo {
    pub fn new(depth: usize) -> Self {
        Self { entries: VecDeque::with_capacity(depth), depth }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn occupancy(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.depth
    }

    /// Appends `word`, poppable from subsystem cycle `ready_at` on.
    pub fn push(&mut self, word: Word64, ready_at: u64) -> Result<(), BridgeError> {
        if self.is_full() {
            return Err(BridgeError::FifoFull);
        }
        self.entries.push_back((word, ready_at));
        Ok(())
    }

    fn pop_ready(&mut self, now: u64) -> Option<Word64> {
        match self.entries.front() {
            Some(&(_, ready)) if ready <= now => self.entries.pop_front().map(|(w, _)| w),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
struct InFlightRead {
    slot: u8,
    issued: u64,
    due: u64,
    data: Option<Burst>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Issued {
    pub word: Word64,
    pub cmd: DfiCommand,
    pub beats: [PhyBeat; 2],
    /// Payload handed to the PHY for a write fetch.
    pub write_data: Option<Burst>,
    pub fetch_due: Option<u64>,
    pub capture_due: Option<u64>,
}

/// What the control unit did with one cycle. Every cycle is exactly one of
/// these.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Activity {
    Issued(Issued),
    Held { remaining: u64 },
    Idle,
    Dropped { word: Word64, error: BridgeError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capture {
    pub slot: u8,
    pub issued: u64,
    pub data: Burst,
    /// No read data arrived before the capture deadline; zeros were stored.
    pub missing: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepOutcome {
    pub activity: Activity,
    pub captures: Vec<Capture>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BridgeCounters {
    pub idle_cycles: u64,
    pub held_cycles: u64,
    pub issued_commands: u64,
    pub issued_beats: u64,
    pub decode_errors: u64,
    pub slot_conflicts: u64,
    pub warnings: u64,
    pub captures: u64,
    pub fetches: u64,
    pub missing_read_data: u64,
}

#[derive(Debug, Clone)]
pub struct Bridge {
    config: BridgeConfig,
    fifo: CommandFifo,
    buffer: DataBuffer,
    hold_remaining: u64,
    in_flight: VecDeque<InFlightRead>,
    counters: BridgeCounters,
}

impl Bridge {
    pub fn new(config: BridgeConfig) -> Self {
        Self {
            fifo: CommandFifo::new(config.fifo_depth),
            config,
            buffer: DataBuffer::default(),
            hold_remaining: 0,
            in_flight: VecDeque::new(),
            counters: BridgeCounters::default(),
        }
    }

    pub fn config(&self) -> &BridgeConfig {
        &self.config
    }

    pub fn fifo(&self) -> &CommandFifo {
        &self.fifo
    }

    pub fn buffer(&self) -> &DataBuffer {
        &self.buffer
    }

    pub fn buffer_mut(&mut self) -> &mut DataBuffer {
        &mut self.buffer
    }

    pub fn counters(&self) -> &BridgeCounters {
        &self.counters
    }

    pub fn hold_remaining(&self) -> u64 {
        self.hold_remaining
    }

    pub fn reads_pending(&self) -> bool {
        !self.in_flight.is_empty()
    }

    pub fn quiescent(&self) -> bool {
        self.fifo.is_empty() && self.hold_remaining == 0 && self.in_flight.is_empty()
    }

    pub fn fifo_push(&mut self, word: Word64, ready_at: u64) -> Result<(), BridgeError> {
        self.fifo.push(word, ready_at)
    }

    pub fn slot_read(&self, index: usize) -> Result<SlotRead, BridgeError> {
        self.buffer.read(index)
    }

    pub fn slot_write(&mut self, index: usize, payload: Burst) -> Result<(), BridgeError> {
        self.buffer.write(index, payload)
    }

    /// Hands read data returned by the device for the command issued in
    /// subsystem cycle `issued`. Returns false if no capture is waiting for it.
    pub fn deliver_read(&mut self, issued: u64, data: Burst) -> bool {
        match self.in_flight.iter_mut().find(|r| r.issued == issued && r.data.is_none()) {
            Some(r) => {
                r.data = Some(data);
                true
            }
            None => false,
        }
    }

    /// One subsystem cycle of the control unit.
    pub fn step(&mut self, now: u64) -> StepOutcome {
        let captures = self.retire_captures(now);
        let activity = self.issue(now);
        match &activity {
            Activity::Issued(_) => {
                self.counters.issued_commands += 1;
                self.counters.issued_beats += 2;
            }
            Activity::Held { .. } => self.counters.held_cycles += 1,
            Activity::Idle => self.counters.idle_cycles += 1,
            Activity::Dropped { error, .. } => {
                self.counters.idle_cycles += 1;
                match error {
                    BridgeError::SlotBusy(_) => self.counters.slot_conflicts += 1,
                    _ => self.counters.decode_errors += 1,
                }
            }
        }
        StepOutcome { activity, captures }
    }

    fn retire_captures(&mut self, now: u64) -> Vec<Capture> {
        let mut done = Vec::new();
        // captures are issued in order with a fixed latency, so the queue is
        // sorted by due cycle
        while self.in_flight.front().is_some_and(|r| r.due <= now) {
            let r = self.in_flight.pop_front().expect("front checked");
            let missing = r.data.is_none();
            let data = r.data.unwrap_or(Burst::ZERO);
            self.buffer.complete(r.slot, data);
            self.counters.captures += 1;
            if missing {
                self.counters.missing_read_data += 1;
            }
            done.push(Capture { slot: r.slot, issued: r.issued, data, missing });
        }
        done
    }

    fn issue(&mut self, now: u64) -> Activity {
        if self.hold_remaining > 0 {
            self.hold_remaining -= 1;
            return Activity::Held { remaining: self.hold_remaining };
        }
        let Some(word) = self.fifo.pop_ready(now) else {
            return Activity::Idle;
        };
        let cmd = match decode(word) {
            Ok(cmd) => cmd,
            Err(e) => return Activity::Dropped { word, error: e.into() },
        };
        let slot = cmd.slot;
        let mut issued = Issued {
            word,
            cmd,
            beats: serialize_beats(cmd.beat0, cmd.beat1, now),
            write_data: None,
            fetch_due: None,
            capture_due: None,
        };
        match cmd.kind {
            CommandKind::CaOnly => {}
            CommandKind::ReadCapture => {
                if self.buffer.state[slot as usize] == SlotState::PendingRead {
                    return Activity::Dropped { word, error: BridgeError::SlotBusy(slot) };
                }
                let due = now + self.config.read_latency_sys;
                self.buffer.mark_pending(slot);
                self.in_flight.push_back(InFlightRead { slot, issued: now, due, data: None });
                issued.capture_due = Some(due);
            }
            CommandKind::WriteFetch => {
                let data = match self.buffer.state[slot as usize] {
                    SlotState::Valid => self.buffer.payload[slot as usize],
                    SlotState::Idle => {
                        self.counters.warnings += 1;
                        Burst::ZERO
                    }
                    SlotState::PendingRead => {
                        self.counters.warnings += 1;
                        self.buffer.payload[slot as usize]
                    }
                };
                self.counters.fetches += 1;
                issued.write_data = Some(data);
                issued.fetch_due = Some(now + self.config.write_latency_sys);
            }
        }
        self.hold_remaining = u64::from(cmd.hold);
        Activity::Issued(issued)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdword::{encode, CaBeat};

    fn ca_word(hold: u16) -> Word64 {
        encode(&DfiCommand { beat0: CaBeat::masked(true, 0), hold, ..Default::default() })
    }

    fn read_word(slot: u8) -> Word64 {
        encode(&DfiCommand { kind: CommandKind::ReadCapture, slot, ..Default::default() })
    }

    fn bridge(rl_sys: u64) -> Bridge {
        Bridge::new(BridgeConfig { fifo_depth: 64, read_latency_sys: rl_sys, write_latency_sys: 4 })
    }

    #[test]
    fn fifo_capacity_and_order() {
        let mut fifo = CommandFifo::new(64);
        fifo.push(Word64(1), 0).unwrap();
        assert_eq!(fifo.occupancy(), 1);
        for i in 1..64 {
            fifo.push(Word64(i + 1), 0).unwrap();
        }
        assert_eq!(fifo.push(Word64(99), 0), Err(BridgeError::FifoFull));
        assert_eq!(fifo.pop_ready(0), Some(Word64(1)));
        assert_eq!(fifo.pop_ready(0), Some(Word64(2)));
    }

    #[test]
    fn fifo_respects_ready_cycle() {
        let mut fifo = CommandFifo::new(4);
        fifo.push(Word64(7), 3).unwrap();
        assert_eq!(fifo.pop_ready(2), None);
        assert_eq!(fifo.pop_ready(3), Some(Word64(7)));
    }

    #[test]
    fn empty_fifo_is_idle() {
        let mut b = bridge(10);
        let out = b.step(0);
        assert_eq!(out.activity, Activity::Idle);
        assert_eq!(b.counters().idle_cycles, 1);
    }

    #[test]
    fn ten_back_to_back_words() {
        let mut b = bridge(10);
        for _ in 0..10 {
            b.fifo_push(ca_word(0), 0).unwrap();
        }
        for now in 0..10 {
            assert!(matches!(b.step(now).activity, Activity::Issued(_)));
        }
        let c = b.counters();
        assert_eq!((c.issued_commands, c.issued_beats, c.idle_cycles), (10, 20, 0));
    }

    #[test]
    fn hold_stalls_without_idling() {
        let mut b = bridge(10);
        b.fifo_push(ca_word(2), 0).unwrap();
        b.fifo_push(ca_word(0), 0).unwrap();
        let kinds: Vec<_> = (0..4).map(|n| b.step(n).activity).collect();
        assert!(matches!(kinds[0], Activity::Issued(_)));
        assert_eq!(kinds[1], Activity::Held { remaining: 1 });
        assert_eq!(kinds[2], Activity::Held { remaining: 0 });
        assert!(matches!(kinds[3], Activity::Issued(_)));
        assert_eq!(b.counters().idle_cycles, 0);
        assert_eq!(b.counters().held_cycles, 2);
    }

    #[test]
    fn capture_lands_exactly_at_latency() {
        let mut b = bridge(10);
        for now in 0..5 {
            b.step(now);
        }
        b.fifo_push(read_word(9), 5).unwrap();
        let out = b.step(5);
        let Activity::Issued(i) = out.activity else { panic!("expected issue") };
        assert_eq!(i.capture_due, Some(15));
        assert!(b.deliver_read(5, Burst::from_beats([3; 16])));
        for now in 6..15 {
            b.step(now);
            assert_eq!(b.buffer().state(9), Ok(SlotState::PendingRead));
            assert_eq!(b.slot_read(9), Err(BridgeError::SlotPending(9)));
        }
        let out = b.step(15);
        assert_eq!(out.captures.len(), 1);
        assert_eq!(b.slot_read(9).unwrap().payload, Burst::from_beats([3; 16]));
    }

    #[test]
    fn missing_data_lands_as_zeros() {
        let mut b = bridge(2);
        b.slot_write(4, Burst::from_beats([9; 16])).unwrap();
        b.fifo_push(read_word(4), 0).unwrap();
        b.step(0);
        b.step(1);
        let out = b.step(2);
        assert!(out.captures[0].missing);
        assert_eq!(b.slot_read(4).unwrap().payload, Burst::ZERO);
        assert_eq!(b.counters().missing_read_data, 1);
    }

    #[test]
    fn read_capture_to_pending_slot_is_dropped() {
        let mut b = bridge(10);
        b.fifo_push(read_word(3), 0).unwrap();
        b.fifo_push(read_word(3), 0).unwrap();
        b.step(0);
        let out = b.step(1);
        assert!(matches!(out.activity, Activity::Dropped { error: BridgeError::SlotBusy(3), .. }));
        assert_eq!(b.counters().slot_conflicts, 1);
    }

    #[test]
    fn malformed_word_is_dropped_and_counted() {
        let mut b = bridge(10);
        b.fifo_push(Word64(1 << 63), 0).unwrap();
        b.fifo_push(ca_word(0), 0).unwrap();
        assert!(matches!(b.step(0).activity, Activity::Dropped { error: BridgeError::Decode(_), .. }));
        assert!(matches!(b.step(1).activity, Activity::Issued(_)));
        assert_eq!(b.counters().decode_errors, 1);
    }

    #[test]
    fn write_fetch_of_idle_slot_warns() {
        let mut b = bridge(10);
        let w = encode(&DfiCommand { kind: CommandKind::WriteFetch, slot: 12, ..Default::default() });
        b.fifo_push(w, 0).unwrap();
        let Activity::Issued(i) = b.step(0).activity else { panic!() };
        assert_eq!(i.write_data, Some(Burst::ZERO));
        assert_eq!(i.fetch_due, Some(4));
        assert_eq!(b.counters().warnings, 1);
    }

    #[test]
    fn slot_access_bounds() {
        let mut b = bridge(10);
        assert_eq!(b.slot_read(256), Err(BridgeError::IndexOutOfRange(256)));
        assert_eq!(b.slot_write(300, Burst::ZERO), Err(BridgeError::IndexOutOfRange(300)));
        b.slot_write(0, Burst::ZERO).unwrap();
        assert_eq!(b.slot_read(0).unwrap(), SlotRead { payload: Burst::ZERO, warning: false });
        let p = Burst::from_beats(std::array::from_fn(|i| i as u32 * 0x0101_0101));
        b.slot_write(7, p).unwrap();
        assert_eq!(b.slot_read(7).unwrap().payload, p);
        b.slot_write(255, p).unwrap();
        assert!(b.slot_read(1).unwrap().warning);
    }

    #[test]
    fn buffer_shape() {
        let buf = DataBuffer::default();
        assert_eq!(buf.len(), 256);
        assert_eq!(std::mem::size_of::<Burst>() * 8, SLOT_BITS);
    }
}
