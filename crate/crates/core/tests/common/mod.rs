#![allow(dead_code)]

use phybridge::cmdword::{encode, CommandKind, DfiCommand, Word64};
use phybridge::device::DeviceCommand;

/// Bridge word carrying one device command.
pub fn word(cmd: DeviceCommand, kind: CommandKind, slot: u8, hold: u16) -> Word64 {
    let (beat0, beat1) = cmd.encode();
    encode(&DfiCommand { beat0, beat1, kind, slot, hold })
}

pub fn ca(cmd: DeviceCommand, hold: u16) -> Word64 {
    word(cmd, CommandKind::CaOnly, 0, hold)
}

pub fn nop(hold: u16) -> Word64 {
    ca(DeviceCommand::Nop, hold)
}
