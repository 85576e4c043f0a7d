//! A cycle-stepped model of an LPDDR4X PHY control path: a DFI bridge fed by
//! DMA from SRAM, a register-mapped control plane, per-lane delay lines, a
//! behavioral DRAM device, and the training firmware that brings it all up.
//!
//! The simulation is deterministic. The same scenario and seed give the same
//! trace and report byte for byte.

pub mod bridge;
pub mod busmap;
pub mod cmdword;
pub mod device;
pub mod dma;
pub mod phy;
pub mod scenario;
pub mod sim;
pub mod training;

pub use cmdword::{decode, encode, CaBeat, CommandKind, DfiCommand, Word64};
pub use scenario::{Scenario, ScenarioError, TrainSummary};
pub use sim::{RunReport, Simulator};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/command-word.md")]
    mod command_word {}
    #[doc = include_str!("../../../book/src/bridge-and-dma.md")]
    mod bridge_and_dma {}
    #[doc = include_str!("../../../book/src/clocking.md")]
    mod clocking {}
    #[doc = include_str!("../../../book/src/device-timing.md")]
    mod device_timing {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/scenarios.md")]
    mod scenarios {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
