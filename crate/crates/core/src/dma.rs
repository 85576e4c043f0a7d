//! Two DMA engines moving 64-bit words between SRAM, the command FIFO and the
//! data buffer.
//!
//! An engine moves up to `rate` words per subsystem cycle. If the far side
//! cannot take a word (FIFO full, slot with a read pending) the engine moves
//! nothing more that cycle, counts a stalled cycle and retries on the next.

use thiserror::Error;

use crate::busmap::{MemoryMap, DATABUF_PORT_BASE, DATABUF_PORT_SIZE, FIFO_PORT_LO};
use crate::bridge::DATA_BUFFER_SLOTS;

pub const ENGINES: usize = 2;
/// 64-bit words per data buffer slot.
pub const WORDS_PER_SLOT: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Endpoint {
    Memory(u32),
    CommandFifo,
    /// Consecutive slots starting at `first_slot`, eight words each.
    DataBuffer { first_slot: u8 },
}

impl Endpoint {
    /// Interprets a bus address as an endpoint.
    pub fn from_address(addr: u32) -> Endpoint {
        if addr == FIFO_PORT_LO {
            Endpoint::CommandFifo
        } else if (DATABUF_PORT_BASE..DATABUF_PORT_BASE + DATABUF_PORT_SIZE).contains(&addr) && addr % 64 == 0 {
            Endpoint::DataBuffer { first_slot: ((addr - DATABUF_PORT_BASE) / 64) as u8 }
        } else {
            Endpoint::Memory(addr)
        }
    }

    pub fn address(self) -> u32 {
        match self {
            Endpoint::Memory(a) => a,
            Endpoint::CommandFifo => FIFO_PORT_LO,
            Endpoint::DataBuffer { first_slot } => DATABUF_PORT_BASE + 64 * u32::from(first_slot),
        }
    }

    fn is_port(self) -> bool {
        !matches!(self, Endpoint::Memory(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DmaDescriptor {
    pub src: Endpoint,
    pub dst: Endpoint,
    pub len_words64: u32,
    /// Words per cycle, at least 1.
    pub rate: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DmaError {
    #[error("DMA engine {0} is busy")]
    EngineBusy(usize),
    #[error("no DMA engine {0}")]
    NoSuchEngine(usize),
    #[error("invalid descriptor: {0}")]
    InvalidDescriptor(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DmaStatus {
    pub busy: bool,
    pub len: u32,
    pub transferred: u32,
    pub stalled_cycles: u64,
}

/// The far ends of a transfer. `None`/`false` means "not this cycle".
pub trait DmaPorts {
    fn load(&mut self, ep: Endpoint, index: u32) -> Option<u64>;
    fn store(&mut self, ep: Endpoint, index: u32, word: u64) -> bool;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EngineProgress {
    pub started: bool,
    pub moved: u32,
    pub stalled: bool,
    pub finished: bool,
}

#[derive(Debug, Clone, Default)]
struct Engine {
    desc: Option<DmaDescriptor>,
    status: DmaStatus,
    started: bool,
}

#[derive(Debug, Clone, Default)]
pub struct DmaEngines {
    engines: [Engine; ENGINES],
}

fn validate(desc: &DmaDescriptor, map: &MemoryMap) -> Result<(), DmaError> {
    let bad = |m: &str| Err(DmaError::InvalidDescriptor(m.to_string()));
    if desc.len_words64 == 0 {
        return bad("length must be at least one word");
    }
    if desc.rate == 0 {
        return bad("rate must be at least one word per cycle");
    }
    if desc.src.is_port() && desc.dst.is_port() {
        return bad("at most one side may be a port");
    }
    if desc.src == Endpoint::CommandFifo {
        return bad("the command FIFO cannot be a source");
    }
    for ep in [desc.src, desc.dst] {
        match ep {
            Endpoint::Memory(addr) => {
                if addr % 8 != 0 {
                    return bad("memory addresses must be 8-byte aligned");
                }
                if !map.is_mapped(addr, u64::from(desc.len_words64) * 8) {
                    return bad("memory range is not mapped SRAM");
                }
            }
            Endpoint::DataBuffer { first_slot } => {
                let slots = desc.len_words64.div_ceil(WORDS_PER_SLOT) as usize;
                if usize::from(first_slot) + slots > DATA_BUFFER_SLOTS {
                    return bad("transfer runs past the last data buffer slot");
                }
            }
            Endpoint::CommandFifo => {}
        }
    }
    Ok(())
}

impl DmaEngines {
    pub fn status(&self, engine: usize) -> DmaStatus {
        self.engines.get(engine).map(|e| e.status).unwrap_or_default()
    }

    pub fn descriptor(&self, engine: usize) -> Option<DmaDescriptor> {
        self.engines.get(engine).and_then(|e| e.desc)
    }

    pub fn busy(&self) -> bool {
        self.engines.iter().any(|e| e.status.busy)
    }

    /// Arms an engine. The first word moves on the next step.
    pub fn configure(&mut self, engine: usize, desc: DmaDescriptor, map: &MemoryMap) -> Result<(), DmaError> {
        let e = self.engines.get_mut(engine).ok_or(DmaError::NoSuchEngine(engine))?;
        if e.status.busy {
            return Err(DmaError::EngineBusy(engine));
        }
        validate(&desc, map)?;
        *e = Engine {
            desc: Some(desc),
            status: DmaStatus { busy: true, len: desc.len_words64, transferred: 0, stalled_cycles: 0 },
            started: false,
        };
        Ok(())
    }

    /// One cycle for both engines, engine 0 first.
    pub fn step(&mut self, ports: &mut impl DmaPorts) -> [EngineProgress; ENGINES] {
        let mut out = [EngineProgress::default(); ENGINES];
        for (e, progress) in self.engines.iter_mut().zip(out.iter_mut()) {
            let Some(desc) = e.desc.filter(|_| e.status.busy) else { continue };
            progress.started = !e.started;
            e.started = true;
            for _ in 0..desc.rate {
                let k = e.status.transferred;
                if k == desc.len_words64 {
                    break;
                }
                let Some(word) = ports.load(desc.src, k) else {
                    progress.stalled = true;
                    break;
                };
                if !ports.store(desc.dst, k, word) {
                    progress.stalled = true;
                    break;
                }
                e.status.transferred += 1;
                progress.moved += 1;
            }
            if progress.stalled {
                e.status.stalled_cycles += 1;
            }
            if e.status.transferred == desc.len_words64 {
                e.status.busy = false;
                progress.finished = true;
            }
        }
        out
    }
}
