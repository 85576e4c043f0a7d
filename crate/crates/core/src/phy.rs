//! Analog-boundary abstraction: per-lane delay lines, the 1:2 serialization of
//! subsystem cycles into PHY beats, and the hard-window eye model.
//!
//! A 512-bit burst is 32 lanes by burst length 16. Bit `32 * beat + lane` of a
//! burst is carried by `lane` during `beat`, so a burst is stored as sixteen
//! 32-bit beat words and a failing lane is a single XOR mask per beat.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cmdword::CaBeat;

pub const LANES: usize = 32;
pub const BEATS_PER_BURST: usize = 16;
pub const MAX_TAP: u8 = 127;
pub const TAP_COUNT: usize = MAX_TAP as usize + 1;
pub const DEFAULT_TAP_PS: u32 = 10;
pub const DEFAULT_EYE_HALF_WIDTH_PS: u32 = 60;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PhyError {
    #[error("lane {0} out of range (x32 PHY has lanes 0..=31)")]
    LaneOutOfRange(usize),
    #[error("tap {0} out of range 0..=127")]
    TapOutOfRange(u32),
    #[error("data path used before the PHY readiness flag was set")]
    NotCalibrated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Read,
    Write,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Read => "read",
            Direction::Write => "write",
        })
    }
}

/// One 512-bit data buffer word / device burst.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Burst {
    pub beats: [u32; BEATS_PER_BURST],
}

impl Burst {
    pub const ZERO: Burst = Burst { beats: [0; BEATS_PER_BURST] };

    pub const fn from_beats(beats: [u32; BEATS_PER_BURST]) -> Self {
        Burst { beats }
    }

    pub fn bit(&self, index: usize) -> bool {
        self.beats[index / 32] >> (index % 32) & 1 == 1
    }

    /// The 16 bits carried by `lane`, beat 0 in bit 0.
    pub fn lane_bits(&self, lane: usize) -> u16 {
        self.beats
            .iter()
            .enumerate()
            .fold(0u16, |acc, (beat, word)| acc | (((word >> lane) & 1) as u16) << beat)
    }

    /// 64-bit word `index` (0..8): beats `2*index` (low half) and `2*index+1`.
    pub fn word64(&self, index: usize) -> u64 {
        u64::from(self.beats[2 * index]) | u64::from(self.beats[2 * index + 1]) << 32
    }

    pub fn set_word64(&mut self, index: usize, word: u64) {
        self.beats[2 * index] = word as u32;
        self.beats[2 * index + 1] = (word >> 32) as u32;
    }

    /// Little-endian byte image, beat 0 first.
    pub fn to_bytes(&self) -> [u8; 64] {
        let mut out = [0u8; 64];
        for (chunk, beat) in out.chunks_exact_mut(4).zip(self.beats) {
            chunk.copy_from_slice(&beat.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8; 64]) -> Self {
        let mut beats = [0u32; BEATS_PER_BURST];
        for (beat, chunk) in beats.iter_mut().zip(bytes.chunks_exact(4)) {
            *beat = u32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        }
        Burst { beats }
    }

    pub fn to_hex(&self) -> String {
        self.to_bytes().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Lanes on which `self` and `other` differ in at least one beat.
    pub fn differing_lanes(&self, other: &Burst) -> u32 {
        self.beats.iter().zip(other.beats).fold(0, |acc, (a, b)| acc | (a ^ b))
    }
}

impl fmt::Debug for Burst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Burst({})", self.to_hex())
    }
}

/// Delay line settings, per lane and direction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelayConfig {
    read: [u8; LANES],
    write: [u8; LANES],
    pub tap_ps: u32,
}

impl Default for DelayConfig {
    fn default() -> Self {
        Self { read: [0; LANES], write: [0; LANES], tap_ps: DEFAULT_TAP_PS }
    }
}

impl DelayConfig {
    pub fn taps(&self, lane: usize, dir: Direction) -> u8 {
        match dir {
            Direction::Read => self.read[lane],
            Direction::Write => self.write[lane],
        }
    }

    pub fn set(&mut self, lane: usize, dir: Direction, taps: u32) -> Result<(), PhyError> {
        if lane >= LANES {
            return Err(PhyError::LaneOutOfRange(lane));
        }
        if taps > u32::from(MAX_TAP) {
            return Err(PhyError::TapOutOfRange(taps));
        }
        match dir {
            Direction::Read => self.read[lane] = taps as u8,
            Direction::Write => self.write[lane] = taps as u8,
        }
        Ok(())
    }

    pub fn delay_ps(&self, lane: usize, dir: Direction) -> u32 {
        u32::from(self.taps(lane, dir)) * self.tap_ps
    }
}

/// Board/package skew per lane. Hidden from firmware.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaneSkew {
    pub skew_ps: [u32; LANES],
    pub eye_half_width_ps: u32,
}

impl Default for LaneSkew {
    fn default() -> Self {
        Self { skew_ps: [0; LANES], eye_half_width_ps: DEFAULT_EYE_HALF_WIDTH_PS }
    }
}

/// `|skew - taps * tap_ps| <= eye_half_width`.
pub fn lane_pass(lane: usize, dir: Direction, cfg: &DelayConfig, skew: &LaneSkew) -> bool {
    let delay = i64::from(cfg.delay_ps(lane, dir));
    (i64::from(skew.skew_ps[lane]) - delay).abs() <= i64::from(skew.eye_half_width_ps)
}

/// One CA beat placed on a PHY cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhyBeat {
    pub phy_cycle: u64,
    pub beat: CaBeat,
}

/// Subsystem cycle `n` spans PHY cycles `2n` and `2n + 1`.
pub fn serialize_beats(beat0: CaBeat, beat1: CaBeat, sys_cycle: u64) -> [PhyBeat; 2] {
    [
        PhyBeat { phy_cycle: 2 * sys_cycle, beat: beat0 },
        PhyBeat { phy_cycle: 2 * sys_cycle + 1, beat: beat1 },
    ]
}

/// How failing lanes corrupt a burst.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Corruption {
    /// Every bit of a failing lane is inverted.
    #[default]
    Invert,
    /// Each bit of a failing lane flips with probability 1/2 (seeded).
    Random,
}

/// Bitmask of lanes failing in `dir` under the given settings.
pub fn failing_lanes(dir: Direction, cfg: &DelayConfig, skew: &LaneSkew) -> u32 {
    (0..LANES).filter(|&l| !lane_pass(l, dir, cfg, skew)).fold(0, |m, l| m | 1 << l)
}

/// Deterministic data-path transfer: failing lanes are inverted.
pub fn transfer_burst(
    dir: Direction,
    data: &Burst,
    cfg: &DelayConfig,
    skew: &LaneSkew,
    ready: bool,
) -> Result<Burst, PhyError> {
    if !ready {
        return Err(PhyError::NotCalibrated);
    }
    let mask = failing_lanes(dir, cfg, skew);
    let mut out = *data;
    for beat in out.beats.iter_mut() {
        *beat ^= mask;
    }
    Ok(out)
}

/// The PHY state owned by the simulation kernel.
#[derive(Debug, Clone)]
pub struct Phy {
    pub delays: DelayConfig,
    pub skew: LaneSkew,
    pub ready: bool,
    pub corruption: Corruption,
    rng: ChaCha8Rng,
}

impl Phy {
    pub fn new(delays: DelayConfig, skew: LaneSkew, corruption: Corruption, seed: u64) -> Self {
        Self { delays, skew, ready: false, corruption, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn set_delay(&mut self, lane: usize, dir: Direction, taps: u32) -> Result<(), PhyError> {
        self.delays.set(lane, dir, taps)
    }

    pub fn transfer(&mut self, dir: Direction, data: &Burst) -> Result<Burst, PhyError> {
        match self.corruption {
            Corruption::Invert => transfer_burst(dir, data, &self.delays, &self.skew, self.ready),
            Corruption::Random => {
                if !self.ready {
                    return Err(PhyError::NotCalibrated);
                }
                let mask = failing_lanes(dir, &self.delays, &self.skew);
                let mut out = *data;
                for beat in out.beats.iter_mut() {
                    *beat ^= self.rng.gen::<u32>() & mask;
                }
                Ok(out)
            }
        }
    }
}

impl Default for Phy {
    fn default() -> Self {
        Phy::new(DelayConfig::default(), LaneSkew::default(), Corruption::Invert, 0)
    }
}
