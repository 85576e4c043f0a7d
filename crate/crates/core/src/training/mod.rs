//! Training firmware: device initialization, read training, write leveling and
//! link verification, written against [`RegisterBus`] only.
//!
//! Read training runs first. The device answers a mode register read of
//! MR31 with a fixed calibration burst, so the read path can be trained
//! without any prior write. Write leveling then writes a known pattern to a
//! scratch location and reads it back over the trained read path.
//!
//! Every sweep is exhaustive: all 128 taps, every lane at once. A lane's
//! chosen tap is the center of its longest contiguous passing run, the lower
//! center when the run has even length.

mod sequencer;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::busmap::{
    delay_rd_lane, delay_wr_lane, BusError, RegisterBus, DATABUF_SLOT_SEL, DATABUF_WINDOW, DEVICE_CTRL,
    DEVICE_CTRL_INIT_DONE, DEVICE_CTRL_PHY_READY, DEVICE_CTRL_RESET, DEVICE_REJECTS,
};

pub use sequencer::{pack, schedule, DeviceTiming, Op};

pub const LANES: usize = 32;
pub const TAPS: usize = 128;
const BEATS: usize = 16;

const MR_LATENCY: u8 = 2;
const MR_INIT: u8 = 30;
const MR_DQ_CAL: u8 = 31;
const DQ_CAL_VALUE: u8 = 0xA5;

const BANKS: u32 = 8;
const ROWS: u32 = 1 << 15;
const COLS: u32 = 1 << 6;

const TRAIN_SLOT: u8 = 0;
const CAPTURE_SLOT: u8 = 128;
/// Bursts per verify batch; five words each keeps a batch well inside the FIFO.
const VERIFY_BATCH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(skip)]
    pub timing: DeviceTiming,
    /// Attempts per mode register write before giving up.
    pub retries: u32,
    /// Cycles to wait for the bridge to drain before declaring a hang.
    pub poll_timeout: u64,
    pub reset_cycles: u64,
    pub scratch_bank: u8,
    pub scratch_row: u16,
    pub scratch_col: u8,
    pub verify_bursts: u32,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            timing: DeviceTiming::default(),
            retries: 3,
            poll_timeout: 100_000,
            reset_cycles: 4,
            scratch_bank: 7,
            scratch_row: 0x7FFF,
            scratch_col: 0,
            verify_bursts: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Done,
    AlreadyDone,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitStep {
    pub name: String,
    pub status: StepStatus,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitReport {
    pub steps: Vec<InitStep>,
    pub cycles: u64,
    pub phy_ready: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaneResult {
    pub lane: usize,
    pub pass_window: Option<[u8; 2]>,
    pub chosen_tap: u8,
    pub margin_taps: u8,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub direction: Direction,
    pub lanes: Vec<LaneResult>,
    pub cycles: u64,
}

impl TrainingReport {
    pub fn failed_lanes(&self) -> Vec<usize> {
        self.lanes.iter().filter(|l| !l.converged).map(|l| l.lane).collect()
    }
}

#[derive(Debug, Error)]
pub enum InitError {
    #[error("initialization step {step} did not take after {attempts} attempts")]
    InitTimeout { step: String, attempts: u32 },
    #[error(transparent)]
    Bus(#[from] BusError),
}

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("no passing window on {direction:?} lanes {lanes:?}")]
    NoEyeFound { direction: Direction, lanes: Vec<usize>, report: TrainingReport },
    #[error(transparent)]
    Bus(#[from] BusError),
}

fn cycle<B: RegisterBus>(bus: &B) -> Result<u64, BusError> {
    let lo = bus.read32(crate::busmap::CYCLE_LO)?;
    let hi = bus.read32(crate::busmap::CYCLE_HI)?;
    Ok(u64::from(hi) << 32 | u64::from(lo))
}

/// The burst a mode register read returns: the value in every byte, odd
/// beats inverted.
pub fn dq_cal_pattern() -> [u32; BEATS] {
    let v = u32::from_ne_bytes([DQ_CAL_VALUE; 4]);
    std::array::from_fn(|i| if i % 2 == 1 { !v } else { v })
}

fn write_pattern() -> [u32; BEATS] {
    std::array::from_fn(|i| 0x3C96_5AA5u32.rotate_left(i as u32 * 3))
}

/// Lanes (bit `b` of each beat is lane `b`) whose 16 bits all match.
fn matching_lanes(got: &[u32; BEATS], want: &[u32; BEATS]) -> u32 {
    !got.iter().zip(want).fold(0, |acc, (g, w)| acc | (g ^ w))
}

/// Center of the longest contiguous passing run; ties go to the lower run
/// and the lower center.
pub fn select_window(pass: &[bool]) -> Option<([u8; 2], u8, u8)> {
    let mut best: Option<(usize, usize)> = None;
    let mut start = None;
    for (tap, &ok) in pass.iter().chain(std::iter::once(&false)).enumerate() {
        match (ok, start) {
            (true, None) => start = Some(tap),
            (false, Some(s)) => {
                if best.is_none_or(|(lo, hi)| tap - s > hi - lo + 1) {
                    best = Some((s, tap - 1));
                }
                start = None;
            }
            _ => {}
        }
    }
    best.map(|(lo, hi)| {
        let chosen = lo + (hi - lo) / 2;
        ([lo as u8, hi as u8], chosen as u8, (chosen - lo).min(hi - chosen) as u8)
    })
}

fn read_slot<B: RegisterBus>(bus: &mut B, slot: u8) -> Result<[u32; BEATS], BusError> {
    bus.write32(DATABUF_SLOT_SEL, u32::from(slot))?;
    let mut out = [0u32; BEATS];
    for (i, beat) in out.iter_mut().enumerate() {
        *beat = bus.read32(DATABUF_WINDOW + 4 * i as u32)?;
    }
    Ok(out)
}

fn write_slot<B: RegisterBus>(bus: &mut B, slot: u8, data: &[u32; BEATS]) -> Result<(), BusError> {
    bus.write32(DATABUF_SLOT_SEL, u32::from(slot))?;
    for (i, beat) in data.iter().enumerate() {
        bus.write32(DATABUF_WINDOW + 4 * i as u32, *beat)?;
    }
    Ok(())
}

fn lane_register(dir: Direction, lane: usize) -> u32 {
    match dir {
        Direction::Read => delay_rd_lane(lane as u32),
        Direction::Write => delay_wr_lane(lane as u32),
    }
}

fn set_all_taps<B: RegisterBus>(bus: &mut B, dir: Direction, tap: u32) -> Result<(), BusError> {
    (0..LANES).try_for_each(|lane| bus.write32(lane_register(dir, lane), tap))
}

/// Reset pulse, latency and init-done mode register writes, then the PHY
/// readiness flag. Returns immediately, marking every step already done,
/// when the device is initialized and the PHY ready.
pub fn initialize_device<B: RegisterBus>(bus: &mut B, cfg: &TrainingConfig) -> Result<InitReport, InitError> {
    let start = cycle(bus)?;
    let names = ["reset", "mrw_latency", "mrw_init_done", "phy_ready"];
    let ctrl = bus.read32(DEVICE_CTRL)?;
    let done = DEVICE_CTRL_INIT_DONE | DEVICE_CTRL_PHY_READY;
    if ctrl & done == done {
        let steps = names
            .iter()
            .map(|n| InitStep { name: n.to_string(), status: StepStatus::AlreadyDone, attempts: 0 })
            .collect();
        return Ok(InitReport { steps, cycles: 0, phy_ready: true });
    }

    let mut steps = Vec::new();
    bus.write32(DEVICE_CTRL, DEVICE_CTRL_RESET)?;
    bus.tick(cfg.reset_cycles);
    bus.write32(DEVICE_CTRL, 0)?;
    bus.tick(1);
    steps.push(InitStep { name: names[0].into(), status: StepStatus::Done, attempts: 1 });

    let t = cfg.timing;
    let latency = ((t.wl / 2) << 4 | (t.rl / 2)) as u8;
    for (name, reg, value) in [(names[1], MR_LATENCY, latency), (names[2], MR_INIT, 1)] {
        let mut attempts = 0;
        loop {
            attempts += 1;
            let before = bus.read32(DEVICE_REJECTS)?;
            sequencer::run_batch(bus, t, &[Op::Mrw { reg, value }], cfg.poll_timeout)?;
            if bus.read32(DEVICE_REJECTS)? == before {
                break;
            }
            if attempts >= cfg.retries {
                return Err(InitError::InitTimeout { step: name.into(), attempts });
            }
        }
        steps.push(InitStep { name: name.into(), status: StepStatus::Done, attempts });
    }
    if bus.read32(DEVICE_CTRL)? & DEVICE_CTRL_INIT_DONE == 0 {
        return Err(InitError::InitTimeout { step: names[2].into(), attempts: cfg.retries });
    }

    bus.write32(DEVICE_CTRL, DEVICE_CTRL_PHY_READY)?;
    steps.push(InitStep { name: names[3].into(), status: StepStatus::Done, attempts: 1 });
    Ok(InitReport { steps, cycles: cycle(bus)? - start, phy_ready: true })
}

fn finish<B: RegisterBus>(
    bus: &mut B,
    dir: Direction,
    pass: &[[bool; TAPS]; LANES],
    start: u64,
) -> Result<TrainingReport, TrainingError> {
    let mut lanes = Vec::with_capacity(LANES);
    for (lane, p) in pass.iter().enumerate() {
        let result = match select_window(p) {
            Some((window, chosen, margin)) => {
                LaneResult { lane, pass_window: Some(window), chosen_tap: chosen, margin_taps: margin, converged: true }
            }
            None => LaneResult { lane, pass_window: None, chosen_tap: 0, margin_taps: 0, converged: false },
        };
        bus.write32(lane_register(dir, lane), u32::from(result.chosen_tap))?;
        lanes.push(result);
    }
    let report = TrainingReport { direction: dir, lanes, cycles: cycle(bus)? - start };
    let failed = report.failed_lanes();
    if failed.is_empty() {
        Ok(report)
    } else {
        Err(TrainingError::NoEyeFound { direction: dir, lanes: failed, report })
    }
}

/// Sweeps every read tap against the MR31 calibration burst and programs the
/// chosen taps. Lanes without a passing window are left at tap 0.
pub fn read_training<B: RegisterBus>(bus: &mut B, cfg: &TrainingConfig) -> Result<TrainingReport, TrainingError> {
    let start = cycle(bus)?;
    let want = dq_cal_pattern();
    let mut pass = [[false; TAPS]; LANES];
    for tap in 0..TAPS {
        set_all_taps(bus, Direction::Read, tap as u32)?;
        sequencer::run_batch(bus, cfg.timing, &[Op::Mrr { reg: MR_DQ_CAL, slot: CAPTURE_SLOT }], cfg.poll_timeout)?;
        let ok = matching_lanes(&read_slot(bus, CAPTURE_SLOT)?, &want);
        for (lane, p) in pass.iter_mut().enumerate() {
            p[tap] = ok >> lane & 1 == 1;
        }
    }
    finish(bus, Direction::Read, &pass, start)
}

/// Sweeps every write tap, writing a pattern to the scratch location and
/// reading it back over the (already trained) read path.
pub fn write_leveling<B: RegisterBus>(bus: &mut B, cfg: &TrainingConfig) -> Result<TrainingReport, TrainingError> {
    let start = cycle(bus)?;
    let (bank, row, col) = (cfg.scratch_bank, cfg.scratch_row, cfg.scratch_col);
    let t = cfg.timing;
    sequencer::run_batch(bus, t, &[Op::Pre { bank }, Op::Act { bank, row }], cfg.poll_timeout)?;
    let want = write_pattern();
    write_slot(bus, TRAIN_SLOT, &want)?;
    let mut pass = [[false; TAPS]; LANES];
    for tap in 0..TAPS {
        set_all_taps(bus, Direction::Write, tap as u32)?;
        let ops = [Op::Wr { bank, col, slot: TRAIN_SLOT }, Op::Rd { bank, col, slot: CAPTURE_SLOT }];
        sequencer::run_batch(bus, t, &ops, cfg.poll_timeout)?;
        let ok = matching_lanes(&read_slot(bus, CAPTURE_SLOT)?, &want);
        for (lane, p) in pass.iter_mut().enumerate() {
            p[tap] = ok >> lane & 1 == 1;
        }
    }
    sequencer::run_batch(bus, t, &[Op::Pre { bank }], cfg.poll_timeout)?;
    finish(bus, Direction::Write, &pass, start)
}

/// Writes `n` random bursts to random addresses (never the scratch location),
/// reads each back and returns the fraction that matched exactly.
pub fn verify_link<B: RegisterBus>(bus: &mut B, cfg: &TrainingConfig, n: u32, seed: u64) -> Result<f64, BusError> {
    if n == 0 {
        return Ok(1.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scratch = (u32::from(cfg.scratch_bank), u32::from(cfg.scratch_row), u32::from(cfg.scratch_col));
    let mut matched = 0u32;
    let mut remaining = n as usize;
    while remaining > 0 {
        let k = remaining.min(VERIFY_BATCH);
        remaining -= k;
        let mut ops = Vec::with_capacity(4 * k);
        let mut written = Vec::with_capacity(k);
        for i in 0..k {
            let addr = loop {
                let a = (rng.gen_range(0..BANKS), rng.gen_range(0..ROWS), rng.gen_range(0..COLS));
                if a != scratch {
                    break a;
                }
            };
            let data: [u32; BEATS] = std::array::from_fn(|_| rng.gen());
            let (bank, row, col) = (addr.0 as u8, addr.1 as u16, addr.2 as u8);
            let (wslot, rslot) = (i as u8, CAPTURE_SLOT + i as u8);
            write_slot(bus, wslot, &data)?;
            ops.extend([
                Op::Act { bank, row },
                Op::Wr { bank, col, slot: wslot },
                Op::Rd { bank, col, slot: rslot },
                Op::Pre { bank },
            ]);
            written.push((rslot, data));
        }
        sequencer::run_batch(bus, cfg.timing, &ops, cfg.poll_timeout)?;
        for (slot, data) in written {
            if read_slot(bus, slot)? == data {
                matched += 1;
            }
        }
    }
    Ok(f64::from(matched) / f64::from(n))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oracle_pass(skew: i64, half: i64) -> Vec<bool> {
        (0..TAPS as i64).map(|t| (skew - 10 * t).abs() <= half).collect()
    }

    #[test]
    fn window_selection_matches_examples() {
        assert_eq!(select_window(&oracle_pass(250, 60)), Some(([19, 31], 25, 6)));
        assert_eq!(select_window(&oracle_pass(0, 60)), Some(([0, 6], 3, 3)));
        assert_eq!(select_window(&oracle_pass(600, 60)), Some(([54, 66], 60, 6)));
        assert_eq!(select_window(&oracle_pass(250, 5)), Some(([25, 25], 25, 0)));
        assert_eq!(select_window(&oracle_pass(2000, 60)), None);
    }

    #[test]
    fn even_window_takes_lower_center() {
        let mut p = [false; 10];
        p[2..6].fill(true);
        assert_eq!(select_window(&p), Some(([2, 5], 3, 1)));
    }

    #[test]
    fn longest_run_wins_and_ties_go_low() {
        let p = [true, true, false, true, true, true, false, true, true, true];
        assert_eq!(select_window(&p).unwrap().0, [3, 5]);
    }

    #[test]
    fn lane_matching() {
        let want = dq_cal_pattern();
        let mut got = want;
        got[5] ^= 1 << 7;
        got[0] ^= 1 << 31;
        assert_eq!(matching_lanes(&got, &want), !(1 << 7 | 1 << 31));
    }
}
