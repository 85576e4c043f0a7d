//! Command batches as firmware builds them: device opcodes packed into bridge
//! words, with holds computed so every timing gap is met by construction.

use serde::{Deserialize, Serialize};

use crate::busmap::{
    BusError, RegisterBus, BRIDGE_STATUS, FIFO_PORT_HI, FIFO_PORT_LO, STATUS_FIFO_EMPTY, STATUS_HOLD_ACTIVE,
    STATUS_READ_PENDING,
};

const KIND_CA: u64 = 0b00;
const KIND_READ: u64 = 0b01;
const KIND_WRITE: u64 = 0b10;

const OP_ACT: u8 = 0b001;
const OP_RD: u8 = 0b010;
const OP_WR: u8 = 0b011;
const OP_PRE: u8 = 0b100;
const OP_MRW: u8 = 0b101;
const OP_MRR: u8 = 0b110;

/// Device timing in PHY cycles, as the firmware knows it from the datasheet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceTiming {
    pub t_rcd: u32,
    pub t_rp: u32,
    pub t_ras: u32,
    pub t_ccd: u32,
    pub rl: u32,
    pub wl: u32,
}

impl Default for DeviceTiming {
    fn default() -> Self {
        Self { t_rcd: 8, t_rp: 8, t_ras: 18, t_ccd: 8, rl: 14, wl: 8 }
    }
}

impl DeviceTiming {
    fn longest(&self) -> u32 {
        [self.t_rcd, self.t_rp, self.t_ras, self.t_ccd, self.rl, self.wl].into_iter().max().unwrap_or(0)
    }
}

/// One device command plus what the bridge should do with the data buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Act { bank: u8, row: u16 },
    Pre { bank: u8 },
    /// Write the burst held in `slot` to the open row of `bank`.
    Wr { bank: u8, col: u8, slot: u8 },
    /// Read into `slot`.
    Rd { bank: u8, col: u8, slot: u8 },
    Mrw { reg: u8, value: u8 },
    /// Mode register read captured into `slot`.
    Mrr { reg: u8, slot: u8 },
}

/// Packs two CA beats into a command word.
pub fn pack(kind: u64, slot: u8, hold: u16, beat0: (bool, u8), beat1: (bool, u8)) -> u64 {
    u64::from(beat0.1 & 0x3f)
        | u64::from(beat0.0) << 6
        | u64::from(beat1.1 & 0x3f) << 7
        | u64::from(beat1.0) << 13
        | kind << 14
        | u64::from(slot) << 16
        | u64::from(hold) << 24
}

fn beats(op: u8, part2: bool, payload: u16) -> ((bool, u8), (bool, u8)) {
    ((true, op << 3 | (payload >> 6) as u8 & 0x7), (part2, payload as u8 & 0x3f))
}

/// A word before its hold is known.
#[derive(Debug, Clone, Copy)]
struct Pending {
    kind: u64,
    slot: u8,
    beat0: (bool, u8),
    beat1: (bool, u8),
}

fn words_for(op: Op) -> Vec<Pending> {
    let ca = |(beat0, beat1)| Pending { kind: KIND_CA, slot: 0, beat0, beat1 };
    match op {
        Op::Act { bank, row } => vec![
            ca(beats(OP_ACT, false, u16::from(bank) << 6 | (row >> 9) & 0x3f)),
            ca(beats(OP_ACT, true, row & 0x1ff)),
        ],
        Op::Pre { bank } => vec![ca(beats(OP_PRE, false, u16::from(bank) << 6))],
        Op::Wr { bank, col, slot } => {
            let (beat0, beat1) = beats(OP_WR, false, u16::from(bank) << 6 | u16::from(col));
            vec![Pending { kind: KIND_WRITE, slot, beat0, beat1 }]
        }
        Op::Rd { bank, col, slot } => {
            let (beat0, beat1) = beats(OP_RD, false, u16::from(bank) << 6 | u16::from(col));
            vec![Pending { kind: KIND_READ, slot, beat0, beat1 }]
        }
        Op::Mrw { reg, value } => {
            vec![ca(beats(OP_MRW, false, u16::from(reg & 0x1f))), ca(beats(OP_MRW, true, u16::from(value)))]
        }
        Op::Mrr { reg, slot } => {
            let (beat0, beat1) = beats(OP_MRR, false, u16::from(reg & 0x1f));
            vec![Pending { kind: KIND_READ, slot, beat0, beat1 }]
        }
    }
}

/// Greedy in-order placement: each word goes out at the earliest subsystem
/// cycle that satisfies every gap to the words before it in the batch.
#[derive(Debug, Clone)]
struct Placer {
    timing: DeviceTiming,
    last_act: [Option<u64>; 8],
    last_pre: [Option<u64>; 8],
    last_col: Option<u64>,
    prev: Option<u64>,
}

fn after(t: Option<u64>, phy_gap: u32) -> u64 {
    t.map_or(0, |t| t + u64::from(phy_gap.div_ceil(2)))
}

impl Placer {
    fn new(timing: DeviceTiming) -> Self {
        Self { timing, last_act: [None; 8], last_pre: [None; 8], last_col: None, prev: None }
    }

    fn next(&self) -> u64 {
        self.prev.map_or(0, |p| p + 1)
    }

    /// Returns the cycle of each word of `op`.
    fn place(&mut self, op: Op) -> Vec<u64> {
        let t = self.timing;
        let mut at = self.next();
        let times = match op {
            Op::Act { bank, .. } => {
                let b = usize::from(bank & 7);
                let act1 = at;
                at = (act1 + 1).max(after(self.last_pre[b], t.t_rp));
                self.last_act[b] = Some(at);
                vec![act1, at]
            }
            Op::Pre { bank } => {
                let b = usize::from(bank & 7);
                at = at.max(after(self.last_act[b], t.t_ras));
                self.last_pre[b] = Some(at);
                vec![at]
            }
            Op::Wr { bank, .. } | Op::Rd { bank, .. } => {
                let b = usize::from(bank & 7);
                at = at.max(after(self.last_act[b], t.t_rcd)).max(after(self.last_col, t.t_ccd));
                self.last_col = Some(at);
                vec![at]
            }
            Op::Mrr { .. } => {
                at = at.max(after(self.last_col, t.t_ccd));
                self.last_col = Some(at);
                vec![at]
            }
            Op::Mrw { .. } => vec![at, at + 1],
        };
        self.prev = times.last().copied();
        times
    }
}

/// Turns a list of operations into command words with holds filled in.
pub fn schedule(timing: DeviceTiming, ops: &[Op]) -> Vec<u64> {
    let mut placer = Placer::new(timing);
    let mut placed: Vec<(Pending, u64)> = Vec::new();
    for &op in ops {
        let times = placer.place(op);
        placed.extend(words_for(op).into_iter().zip(times));
    }
    placed
        .iter()
        .enumerate()
        .map(|(i, (w, at))| {
            let hold = placed.get(i + 1).map_or(0, |(_, next)| next - at - 1);
            pack(w.kind, w.slot, hold as u16, w.beat0, w.beat1)
        })
        .collect()
}

/// Pushes a batch, waits for the bridge to drain and lets the longest timing
/// parameter elapse so the next batch starts from a clean slate.
pub fn run_batch<B: RegisterBus>(bus: &mut B, timing: DeviceTiming, ops: &[Op], timeout: u64) -> Result<(), BusError> {
    for word in schedule(timing, ops) {
        bus.write32(FIFO_PORT_LO, word as u32)?;
        bus.write32(FIFO_PORT_HI, (word >> 32) as u32)?;
    }
    drain(bus, timeout)?;
    bus.tick(u64::from(timing.longest().div_ceil(2)));
    Ok(())
}

/// Waits until the FIFO is empty, no hold is counting down and no capture is
/// outstanding.
pub fn drain<B: RegisterBus>(bus: &mut B, timeout: u64) -> Result<u64, BusError> {
    let mask = STATUS_FIFO_EMPTY | STATUS_HOLD_ACTIVE | STATUS_READ_PENDING;
    bus.poll_until(BRIDGE_STATUS, mask, STATUS_FIFO_EMPTY, timeout)
}
