//! The 32-bit register-mapped control plane and the SRAM models behind it.
//!
//! | address                    | name                 | access |
//! |----------------------------|----------------------|--------|
//! | `0x0000_0000..0x0001_0000` | subsystem SRAM 64 kB | RW     |
//! | `0x0001_0000..0x0001_4000` | bridge SRAM A 16 kB  | RW     |
//! | `0x0001_4000..0x0001_8000` | bridge SRAM B 16 kB  | RW     |
//! | `0x0002_0000`              | `BRIDGE_STATUS`      | RO: bit0 FIFO empty, bit1 FIFO full, bit2 hold active, bit3 read pending, bits 8..24 occupancy |
//! | `0x0002_0004`/`0x0002_0008`| `FIFO_PORT_LO`/`_HI` | WO: LO then HI; HI commits one word |
//! | `0x0002_0010`              | `DATABUF_COUNT`      | RO, 256 |
//! | `0x0002_0018`              | `DATABUF_SLOT_SEL`   | RW, 0..=255 |
//! | `0x0002_001C`              | `DATABUF_SLOT_STATE` | RO: 0 idle, 1 read pending, 2 valid |
//! | `0x0002_0020..0x0002_0030` | bridge counters      | RO: idle cycles, issued commands, decode errors, warnings |
//! | `0x0002_0030`/`0x0002_0034`| `CYCLE_LO`/`_HI`     | RO subsystem cycle counter |
//! | `0x0002_0040..0x0002_0080` | `DATABUF_WINDOW`     | RW: 16 beats of the selected slot |
//! | `0x0003_0000 + 4*lane`     | `DELAY_RD_LANE`      | RW 7-bit tap |
//! | `0x0003_0100 + 4*lane`     | `DELAY_WR_LANE`      | RW 7-bit tap |
//! | `0x0004_0000`/`0x0004_0100`| DMA0/DMA1 blocks     | SRC, DST, LEN, CTRL, STATUS, TRANSFERRED, STALLED |
//! | `0x0005_0000`              | `DEVICE_CTRL`        | bit0 reset (RW), bit1 init done (RO), bit2 PHY ready (RW) |
//! | `0x0005_0004`              | `DEVICE_REJECTS`     | RO |
//! | `0x0005_0008`              | `DEVICE_TIMING_VIOLATIONS` | RO |
//! | `0x0006_0000..0x0006_4000` | data buffer DMA port | DMA endpoint only, 64 bytes per slot |
//!
//! Reads never have side effects. Write-only registers read as zero.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bridge::{BridgeError, DATA_BUFFER_SLOTS};
use crate::dma::{DmaDescriptor, DmaError, Endpoint};
use crate::phy::{Direction, PhyError, LANES};
use crate::sim::Platform;

pub const SRAM_BASE: u32 = 0x0000_0000;
pub const SRAM_SIZE: u32 = 64 * 1024;
pub const SRAM_A_BASE: u32 = 0x0001_0000;
pub const SRAM_B_BASE: u32 = 0x0001_4000;
pub const BRIDGE_SRAM_SIZE: u32 = 16 * 1024;

pub const BRIDGE_STATUS: u32 = 0x0002_0000;
pub const FIFO_PORT_LO: u32 = 0x0002_0004;
pub const FIFO_PORT_HI: u32 = 0x0002_0008;
pub const DATABUF_COUNT: u32 = 0x0002_0010;
pub const DATABUF_SLOT_SEL: u32 = 0x0002_0018;
pub const DATABUF_SLOT_STATE: u32 = 0x0002_001C;
pub const BRIDGE_IDLE_CYCLES: u32 = 0x0002_0020;
pub const BRIDGE_ISSUED: u32 = 0x0002_0024;
pub const BRIDGE_DECODE_ERRORS: u32 = 0x0002_0028;
pub const BRIDGE_WARNINGS: u32 = 0x0002_002C;
pub const CYCLE_LO: u32 = 0x0002_0030;
pub const CYCLE_HI: u32 = 0x0002_0034;
pub const DATABUF_WINDOW: u32 = 0x0002_0040;
pub const DATABUF_WINDOW_WORDS: u32 = 16;

pub const DELAY_RD_BASE: u32 = 0x0003_0000;
pub const DELAY_WR_BASE: u32 = 0x0003_0100;

pub const DMA0_BASE: u32 = 0x0004_0000;
pub const DMA1_BASE: u32 = 0x0004_0100;
pub const DMA_SRC: u32 = 0x00;
pub const DMA_DST: u32 = 0x04;
pub const DMA_LEN: u32 = 0x08;
pub const DMA_CTRL: u32 = 0x0C;
pub const DMA_STATUS: u32 = 0x10;
pub const DMA_TRANSFERRED: u32 = 0x14;
pub const DMA_STALLED: u32 = 0x18;
/// `DMA_CTRL` bit 0 starts the engine; bits 8..16 hold the rate (0 means 1).
pub const DMA_CTRL_START: u32 = 1;

pub const DEVICE_CTRL: u32 = 0x0005_0000;
pub const DEVICE_REJECTS: u32 = 0x0005_0004;
pub const DEVICE_TIMING_VIOLATIONS: u32 = 0x0005_0008;

pub const DATABUF_PORT_BASE: u32 = 0x0006_0000;
pub const DATABUF_PORT_SIZE: u32 = (DATA_BUFFER_SLOTS * 64) as u32;

pub const STATUS_FIFO_EMPTY: u32 = 1 << 0;
pub const STATUS_FIFO_FULL: u32 = 1 << 1;
pub const STATUS_HOLD_ACTIVE: u32 = 1 << 2;
pub const STATUS_READ_PENDING: u32 = 1 << 3;

pub const DEVICE_CTRL_RESET: u32 = 1 << 0;
pub const DEVICE_CTRL_INIT_DONE: u32 = 1 << 1;
pub const DEVICE_CTRL_PHY_READY: u32 = 1 << 2;

pub const fn delay_rd_lane(lane: u32) -> u32 {
    DELAY_RD_BASE + 4 * lane
}

pub const fn delay_wr_lane(lane: u32) -> u32 {
    DELAY_WR_BASE + 4 * lane
}

pub const fn dma_base(engine: usize) -> u32 {
    if engine == 0 {
        DMA0_BASE
    } else {
        DMA1_BASE
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BusError {
    #[error("unmapped address {0:#010x}")]
    UnmappedAddress(u32),
    #[error("unaligned access at {0:#010x}")]
    UnalignedAccess(u32),
    #[error("register {0:#010x} is read-only")]
    ReadOnlyRegister(u32),
    #[error("value {value:#x} out of range for register {addr:#010x}")]
    ValueOutOfRange { addr: u32, value: u32 },
    #[error("FIFO port written out of order: {0}")]
    FifoPortSequence(&'static str),
    #[error("command FIFO full")]
    FifoFull,
    #[error("timed out after {cycles} cycles polling {addr:#010x}")]
    Timeout { addr: u32, cycles: u64 },
    #[error(transparent)]
    Phy(#[from] PhyError),
    #[error(transparent)]
    Dma(#[from] DmaError),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
}

/// What firmware sees: 32-bit register access plus the ability to let the
/// simulation run.
pub trait RegisterBus {
    fn read32(&self, addr: u32) -> Result<u32, BusError>;
    fn write32(&mut self, addr: u32, value: u32) -> Result<(), BusError>;
    /// Lets `cycles` subsystem cycles elapse.
    fn tick(&mut self, cycles: u64);

    /// Steps until `read32(addr) & mask == expected`; returns the cycles waited.
    fn poll_until(&mut self, addr: u32, mask: u32, expected: u32, max_cycles: u64) -> Result<u64, BusError> {
        let mut waited = 0;
        loop {
            if self.read32(addr)? & mask == expected {
                return Ok(waited);
            }
            if waited == max_cycles {
                return Err(BusError::Timeout { addr, cycles: waited });
            }
            self.tick(1);
            waited += 1;
        }
    }
}

#[derive(Debug, Clone)]
pub struct SramModel {
    base: u32,
    contents: Vec<u8>,
}

impl SramModel {
    pub fn new(base: u32, size_bytes: u32) -> Self {
        Self { base, contents: vec![0; size_bytes as usize] }
    }

    pub fn base(&self) -> u32 {
        self.base
    }

    pub fn size_bytes(&self) -> u32 {
        self.contents.len() as u32
    }

    pub fn end(&self) -> u64 {
        u64::from(self.base) + self.contents.len() as u64
    }

    pub fn contains(&self, addr: u32, len: u32) -> bool {
        addr >= self.base && u64::from(addr) + u64::from(len) <= self.end()
    }

    fn offset(&self, addr: u32) -> usize {
        (addr - self.base) as usize
    }

    pub fn read_bytes(&self, addr: u32, out: &mut [u8]) {
        let off = self.offset(addr);
        out.copy_from_slice(&self.contents[off..off + out.len()]);
    }

    pub fn write_bytes(&mut self, addr: u32, data: &[u8]) {
        let off = self.offset(addr);
        self.contents[off..off + data.len()].copy_from_slice(data);
    }
}

/// SRAM placement. Defaults follow the subsystem: one 64 kB SRAM and the two
/// 16 kB bridge SRAMs, back to back from address zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryLayout {
    pub sram_base: u32,
    pub sram_size: u32,
    pub sram_a_base: u32,
    pub sram_b_base: u32,
    pub bridge_sram_size: u32,
}

impl Default for MemoryLayout {
    fn default() -> Self {
        Self {
            sram_base: SRAM_BASE,
            sram_size: SRAM_SIZE,
            sram_a_base: SRAM_A_BASE,
            sram_b_base: SRAM_B_BASE,
            bridge_sram_size: BRIDGE_SRAM_SIZE,
        }
    }
}

const REGISTER_SPACE: (u64, u64) = (0x0002_0000, (DATABUF_PORT_BASE + DATABUF_PORT_SIZE) as u64);

impl MemoryLayout {
    pub fn validate(&self) -> Result<(), String> {
        let regions = [
            ("memory.sram", self.sram_base, self.sram_size),
            ("memory.sram_a", self.sram_a_base, self.bridge_sram_size),
            ("memory.sram_b", self.sram_b_base, self.bridge_sram_size),
        ];
        for (name, base, size) in regions {
            let end = u64::from(base) + u64::from(size);
            if size == 0 || size % 8 != 0 || base % 8 != 0 {
                return Err(format!("{name}: base and size must be non-zero multiples of 8"));
            }
            if end > 1 << 32 {
                return Err(format!("{name}: region exceeds the 32-bit address space"));
            }
            if u64::from(base) < REGISTER_SPACE.1 && end > REGISTER_SPACE.0 {
                return Err(format!("{name}: region overlaps register space"));
            }
        }
        for (i, a) in regions.iter().enumerate() {
            for b in &regions[i + 1..] {
                let (a0, a1) = (u64::from(a.1), u64::from(a.1) + u64::from(a.2));
                let (b0, b1) = (u64::from(b.1), u64::from(b.1) + u64::from(b.2));
                if a0 < b1 && b0 < a1 {
                    return Err(format!("{} overlaps {}", a.0, b.0));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MemoryMap {
    srams: Vec<SramModel>,
}

impl Default for MemoryMap {
    fn default() -> Self {
        Self::new(&MemoryLayout::default())
    }
}

impl MemoryMap {
    pub fn new(layout: &MemoryLayout) -> Self {
        Self {
            srams: vec![
                SramModel::new(layout.sram_base, layout.sram_size),
                SramModel::new(layout.sram_a_base, layout.bridge_sram_size),
                SramModel::new(layout.sram_b_base, layout.bridge_sram_size),
            ],
        }
    }

    pub fn srams(&self) -> &[SramModel] {
        &self.srams
    }

    fn find(&self, addr: u32, len: u32) -> Option<usize> {
        self.srams.iter().position(|s| s.contains(addr, len))
    }

    /// True when every byte of `[addr, addr + len)` is SRAM, possibly
    /// spanning adjacent SRAMs.
    pub fn is_mapped(&self, addr: u32, len: u64) -> bool {
        let mut cursor = u64::from(addr);
        let end = u64::from(addr) + len;
        while cursor < end {
            let Some(s) = self.srams.iter().find(|s| u64::from(s.base()) <= cursor && cursor < s.end()) else {
                return false;
            };
            cursor = s.end();
        }
        true
    }

    pub fn read_u32(&self, addr: u32) -> Option<u32> {
        let i = self.find(addr, 4)?;
        let mut b = [0u8; 4];
        self.srams[i].read_bytes(addr, &mut b);
        Some(u32::from_le_bytes(b))
    }

    pub fn write_u32(&mut self, addr: u32, value: u32) -> bool {
        match self.find(addr, 4) {
            Some(i) => {
                self.srams[i].write_bytes(addr, &value.to_le_bytes());
                true
            }
            None => false,
        }
    }

    pub fn read_u64(&self, addr: u32) -> Option<u64> {
        let i = self.find(addr, 8)?;
        let mut b = [0u8; 8];
        self.srams[i].read_bytes(addr, &mut b);
        Some(u64::from_le_bytes(b))
    }

    pub fn write_u64(&mut self, addr: u32, value: u64) -> bool {
        match self.find(addr, 8) {
            Some(i) => {
                self.srams[i].write_bytes(addr, &value.to_le_bytes());
                true
            }
            None => false,
        }
    }

    /// Loads an image, which may span adjacent SRAMs.
    pub fn load(&mut self, addr: u32, data: &[u8]) -> Result<(), BusError> {
        if !self.is_mapped(addr, data.len() as u64) {
            return Err(BusError::UnmappedAddress(addr));
        }
        let mut cursor = addr;
        let mut rest = data;
        while !rest.is_empty() {
            let s = self
                .srams
                .iter_mut()
                .find(|s| s.base() <= cursor && u64::from(cursor) < s.end())
                .expect("range checked");
            let n = ((s.end() - u64::from(cursor)) as usize).min(rest.len());
            s.write_bytes(cursor, &rest[..n]);
            rest = &rest[n..];
            cursor = cursor.wrapping_add(n as u32);
        }
        Ok(())
    }

    pub fn dump(&self, addr: u32, len: usize) -> Result<Vec<u8>, BusError> {
        if !self.is_mapped(addr, len as u64) {
            return Err(BusError::UnmappedAddress(addr));
        }
        let mut out = Vec::with_capacity(len);
        let mut cursor = addr;
        while out.len() < len {
            let s = self
                .srams
                .iter()
                .find(|s| s.base() <= cursor && u64::from(cursor) < s.end())
                .expect("range checked");
            let n = ((s.end() - u64::from(cursor)) as usize).min(len - out.len());
            let mut buf = vec![0u8; n];
            s.read_bytes(cursor, &mut buf);
            out.extend_from_slice(&buf);
            cursor = cursor.wrapping_add(n as u32);
        }
        Ok(out)
    }
}

/// Per-engine shadow registers, latched into a descriptor on start.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct DmaShadow {
    pub src: u32,
    pub dst: u32,
    pub len: u32,
    pub ctrl: u32,
}

fn lane_of(addr: u32, base: u32) -> Option<usize> {
    let off = addr.checked_sub(base)?;
    let lane = (off / 4) as usize;
    (lane < LANES).then_some(lane)
}

fn dma_register(addr: u32) -> Option<(usize, u32)> {
    [DMA0_BASE, DMA1_BASE]
        .iter()
        .position(|&b| (b..b + 0x1C).contains(&addr))
        .map(|e| (e, addr - dma_base(e)))
}

impl Platform {
    pub fn read32(&self, addr: u32) -> Result<u32, BusError> {
        if addr % 4 != 0 {
            return Err(BusError::UnalignedAccess(addr));
        }
        if let Some(v) = self.map.read_u32(addr) {
            return Ok(v);
        }
        let bridge = &self.bridge;
        let c = bridge.counters();
        let value = match addr {
            BRIDGE_STATUS => {
                // staged firmware pushes already count as queued
                let fifo = bridge.fifo();
                let occupancy = fifo.occupancy() + self.staged_pushes.len();
                let mut v = (occupancy as u32 & 0xFFFF) << 8;
                if occupancy == 0 {
                    v |= STATUS_FIFO_EMPTY;
                }
                if occupancy >= fifo.depth() {
                    v |= STATUS_FIFO_FULL;
                }
                if bridge.hold_remaining() > 0 {
                    v |= STATUS_HOLD_ACTIVE;
                }
                if bridge.reads_pending() {
                    v |= STATUS_READ_PENDING;
                }
                v
            }
            FIFO_PORT_LO | FIFO_PORT_HI => 0,
            DATABUF_COUNT => bridge.buffer().len() as u32,
            DATABUF_SLOT_SEL => u32::from(self.slot_sel),
            DATABUF_SLOT_STATE => bridge.buffer().state(self.slot_sel.into())?.code(),
            BRIDGE_IDLE_CYCLES => c.idle_cycles as u32,
            BRIDGE_ISSUED => c.issued_commands as u32,
            BRIDGE_DECODE_ERRORS => c.decode_errors as u32,
            BRIDGE_WARNINGS => c.warnings as u32,
            CYCLE_LO => self.cycle as u32,
            CYCLE_HI => (self.cycle >> 32) as u32,
            a if (DATABUF_WINDOW..DATABUF_WINDOW + 4 * DATABUF_WINDOW_WORDS).contains(&a) => {
                let beat = ((a - DATABUF_WINDOW) / 4) as usize;
                bridge.slot_read(self.slot_sel.into())?.payload.beats[beat]
            }
            DEVICE_CTRL => {
                let mut v = 0;
                if self.reset_asserted {
                    v |= DEVICE_CTRL_RESET;
                }
                if self.device.initialized() {
                    v |= DEVICE_CTRL_INIT_DONE;
                }
                if self.phy.ready {
                    v |= DEVICE_CTRL_PHY_READY;
                }
                v
            }
            DEVICE_REJECTS => self.device.counters().rejected() as u32,
            DEVICE_TIMING_VIOLATIONS => self.device.counters().timing_violations as u32,
            a => {
                if let Some(lane) = lane_of(a, DELAY_RD_BASE) {
                    u32::from(self.phy.delays.taps(lane, Direction::Read))
                } else if let Some(lane) = lane_of(a, DELAY_WR_BASE) {
                    u32::from(self.phy.delays.taps(lane, Direction::Write))
                } else if let Some((engine, reg)) = dma_register(a) {
                    let shadow = &self.dma_shadow[engine];
                    let status = self.dma.status(engine);
                    match reg {
                        DMA_SRC => shadow.src,
                        DMA_DST => shadow.dst,
                        DMA_LEN => shadow.len,
                        DMA_CTRL => shadow.ctrl & !DMA_CTRL_START,
                        DMA_STATUS => u32::from(status.busy),
                        DMA_TRANSFERRED => status.transferred,
                        DMA_STALLED => status.stalled_cycles as u32,
                        _ => return Err(BusError::UnmappedAddress(a)),
                    }
                } else {
                    return Err(BusError::UnmappedAddress(a));
                }
            }
        };
        Ok(value)
    }

    pub fn write32(&mut self, addr: u32, value: u32) -> Result<(), BusError> {
        if addr % 4 != 0 {
            return Err(BusError::UnalignedAccess(addr));
        }
        if self.map.write_u32(addr, value) {
            return Ok(());
        }
        match addr {
            BRIDGE_STATUS | DATABUF_COUNT | DATABUF_SLOT_STATE | BRIDGE_IDLE_CYCLES | BRIDGE_ISSUED
            | BRIDGE_DECODE_ERRORS | BRIDGE_WARNINGS | CYCLE_LO | CYCLE_HI | DEVICE_REJECTS
            | DEVICE_TIMING_VIOLATIONS => Err(BusError::ReadOnlyRegister(addr)),
            FIFO_PORT_LO => {
                if self.fifo_lo.is_some() {
                    self.fifo_lo = None;
                    return Err(BusError::FifoPortSequence("FIFO_PORT_LO written twice"));
                }
                self.fifo_lo = Some(value);
                Ok(())
            }
            FIFO_PORT_HI => {
                let lo = self
                    .fifo_lo
                    .take()
                    .ok_or(BusError::FifoPortSequence("FIFO_PORT_HI written before FIFO_PORT_LO"))?;
                let fifo = self.bridge.fifo();
                if fifo.occupancy() + self.staged_pushes.len() >= fifo.depth() {
                    return Err(BusError::FifoFull);
                }
                self.staged_pushes.push(u64::from(value) << 32 | u64::from(lo));
                Ok(())
            }
            DATABUF_SLOT_SEL => {
                if value as usize >= DATA_BUFFER_SLOTS {
                    return Err(BusError::ValueOutOfRange { addr, value });
                }
                self.slot_sel = value as u8;
                Ok(())
            }
            a if (DATABUF_WINDOW..DATABUF_WINDOW + 4 * DATABUF_WINDOW_WORDS).contains(&a) => {
                let beat = ((a - DATABUF_WINDOW) / 4) as usize;
                self.bridge.buffer_mut().write_beat(self.slot_sel.into(), beat, value)?;
                Ok(())
            }
            DEVICE_CTRL => {
                let reset = value & DEVICE_CTRL_RESET != 0;
                self.reset_asserted = reset;
                self.device.set_reset(reset);
                self.phy.ready = value & DEVICE_CTRL_PHY_READY != 0;
                Ok(())
            }
            a => {
                if let Some(lane) = lane_of(a, DELAY_RD_BASE) {
                    self.phy.set_delay(lane, Direction::Read, value)?;
                } else if let Some(lane) = lane_of(a, DELAY_WR_BASE) {
                    self.phy.set_delay(lane, Direction::Write, value)?;
                } else if let Some((engine, reg)) = dma_register(a) {
                    let shadow = &mut self.dma_shadow[engine];
                    match reg {
                        DMA_SRC => shadow.src = value,
                        DMA_DST => shadow.dst = value,
                        DMA_LEN => shadow.len = value,
                        DMA_CTRL => {
                            shadow.ctrl = value & !DMA_CTRL_START;
                            if value & DMA_CTRL_START != 0 {
                                let desc = DmaDescriptor {
                                    src: Endpoint::from_address(shadow.src),
                                    dst: Endpoint::from_address(shadow.dst),
                                    len_words64: shadow.len,
                                    rate: ((value >> 8) & 0xFF).max(1),
                                };
                                self.dma.configure(engine, desc, &self.map)?;
                            }
                        }
                        DMA_STATUS | DMA_TRANSFERRED | DMA_STALLED => return Err(BusError::ReadOnlyRegister(a)),
                        _ => return Err(BusError::UnmappedAddress(a)),
                    }
                } else {
                    return Err(BusError::UnmappedAddress(a));
                }
                Ok(())
            }
        }
    }
}
