use phybridge::busmap::*;
use phybridge::bridge::BridgeError;
use phybridge::cmdword::{encode, CaBeat, DfiCommand};
use phybridge::dma::DmaError;
use phybridge::phy::PhyError;
use phybridge::sim::{SimConfig, Simulator};

fn sim() -> Simulator {
    Simulator::new(SimConfig { phy_ready: true, ..Default::default() })
}

fn nop() -> u64 {
    encode(&DfiCommand { beat0: CaBeat::masked(true, 0), ..Default::default() }).raw()
}

#[test]
fn status_after_reset() {
    let s = sim();
    assert_eq!(s.read32(BRIDGE_STATUS), Ok(0x1));
    assert_eq!(s.read32(DATABUF_COUNT), Ok(256));
    assert_eq!(s.read32(DEVICE_CTRL), Ok(DEVICE_CTRL_PHY_READY));
}

#[test]
fn access_errors() {
    let mut s = sim();
    assert_eq!(s.read32(0x0009_0000), Err(BusError::UnmappedAddress(0x0009_0000)));
    assert_eq!(s.read32(0x0002_0002), Err(BusError::UnalignedAccess(0x0002_0002)));
    assert_eq!(s.write32(BRIDGE_STATUS, 0), Err(BusError::ReadOnlyRegister(BRIDGE_STATUS)));
    assert_eq!(s.write32(delay_rd_lane(32), 1), Err(BusError::UnmappedAddress(delay_rd_lane(32))));
    assert_eq!(s.write32(delay_wr_lane(3), 128), Err(BusError::Phy(PhyError::TapOutOfRange(128))));
    assert_eq!(s.write32(DATABUF_SLOT_SEL, 256), Err(BusError::ValueOutOfRange { addr: DATABUF_SLOT_SEL, value: 256 }));
}

#[test]
fn delay_registers_hold_seven_bits() {
    let mut s = sim();
    s.write32(delay_rd_lane(3), 25).unwrap();
    s.write32(delay_wr_lane(31), 127).unwrap();
    assert_eq!(s.read32(delay_rd_lane(3)), Ok(25));
    assert_eq!(s.read32(delay_wr_lane(31)), Ok(127));
    assert_eq!(s.read32(delay_wr_lane(3)), Ok(0));
}

#[test]
fn sram_is_word_addressable() {
    let mut s = sim();
    for addr in [0u32, 0xFFFC, SRAM_A_BASE, SRAM_B_BASE + 0x3FFC] {
        s.write32(addr, addr ^ 0xDEAD_BEEF).unwrap();
        assert_eq!(s.read32(addr), Ok(addr ^ 0xDEAD_BEEF));
    }
    assert!(matches!(s.read32(0x0001_8000), Err(BusError::UnmappedAddress(_))));
}

#[test]
fn fifo_port_needs_lo_then_hi() {
    let mut s = sim();
    assert!(matches!(s.write32(FIFO_PORT_HI, 0), Err(BusError::FifoPortSequence(_))));
    s.write32(FIFO_PORT_LO, 1).unwrap();
    assert!(matches!(s.write32(FIFO_PORT_LO, 1), Err(BusError::FifoPortSequence(_))));
    // the failed pair left nothing behind
    assert_eq!(s.read32(BRIDGE_STATUS), Ok(0x1));
}

#[test]
fn one_push_shows_occupancy_one() {
    let mut s = sim();
    s.write32(FIFO_PORT_LO, nop() as u32).unwrap();
    s.write32(FIFO_PORT_HI, (nop() >> 32) as u32).unwrap();
    assert_eq!(s.read32(BRIDGE_STATUS).unwrap() >> 8 & 0xFFFF, 1);
    assert_eq!(s.read32(BRIDGE_STATUS).unwrap() & STATUS_FIFO_EMPTY, 0);
    s.tick(2);
    assert_eq!(s.read32(BRIDGE_STATUS), Ok(0x1));
    assert_eq!(s.read32(BRIDGE_ISSUED), Ok(1));
}

#[test]
fn sixty_fifth_push_is_rejected() {
    let mut s = sim();
    for _ in 0..64 {
        s.write32(FIFO_PORT_LO, nop() as u32).unwrap();
        s.write32(FIFO_PORT_HI, 0).unwrap();
    }
    assert_ne!(s.read32(BRIDGE_STATUS).unwrap() & STATUS_FIFO_FULL, 0);
    s.write32(FIFO_PORT_LO, nop() as u32).unwrap();
    assert_eq!(s.write32(FIFO_PORT_HI, 0), Err(BusError::FifoFull));
}

#[test]
fn data_buffer_window() {
    let mut s = sim();
    s.write32(DATABUF_SLOT_SEL, 200).unwrap();
    assert_eq!(s.read32(DATABUF_SLOT_STATE), Ok(0));
    assert_eq!(s.read32(DATABUF_WINDOW + 8), Ok(0));
    for i in 0..16 {
        s.write32(DATABUF_WINDOW + 4 * i, 0x1000 + i).unwrap();
    }
    assert_eq!(s.read32(DATABUF_SLOT_STATE), Ok(2));
    assert_eq!(s.read32(DATABUF_WINDOW + 60), Ok(0x100F));
    s.write32(DATABUF_SLOT_SEL, 201).unwrap();
    assert_eq!(s.read32(DATABUF_WINDOW), Ok(0));
}

#[test]
fn pending_slot_refuses_window_access() {
    let mut s = sim();
    let read = encode(&DfiCommand { kind: phybridge::CommandKind::ReadCapture, slot: 5, ..Default::default() });
    s.push_word(read).unwrap();
    s.tick(2);
    s.write32(DATABUF_SLOT_SEL, 5).unwrap();
    assert_eq!(s.read32(DATABUF_SLOT_STATE), Ok(1));
    assert_eq!(s.read32(DATABUF_WINDOW), Err(BusError::Bridge(BridgeError::SlotPending(5))));
    assert_eq!(s.write32(DATABUF_WINDOW, 1), Err(BusError::Bridge(BridgeError::SlotPending(5))));
    assert_ne!(s.read32(BRIDGE_STATUS).unwrap() & STATUS_READ_PENDING, 0);
    s.poll_until(BRIDGE_STATUS, STATUS_READ_PENDING, 0, 100).unwrap();
    assert_eq!(s.read32(DATABUF_SLOT_STATE), Ok(2));
}

#[test]
fn dma_through_registers() {
    let mut s = sim();
    for i in 0..6u32 {
        s.write32(0x100 + 8 * i, nop() as u32).unwrap();
        s.write32(0x104 + 8 * i, 0).unwrap();
    }
    let base = dma_base(1);
    s.write32(base + DMA_SRC, 0x100).unwrap();
    s.write32(base + DMA_DST, FIFO_PORT_LO).unwrap();
    s.write32(base + DMA_LEN, 6).unwrap();
    s.write32(base + DMA_CTRL, DMA_CTRL_START | 2 << 8).unwrap();
    assert_eq!(s.read32(base + DMA_STATUS), Ok(1));
    assert_eq!(s.read32(base + DMA_CTRL), Ok(2 << 8));
    assert_eq!(
        s.write32(base + DMA_CTRL, DMA_CTRL_START),
        Err(BusError::Dma(DmaError::EngineBusy(1)))
    );
    s.tick(3);
    assert_eq!(s.read32(base + DMA_STATUS), Ok(0));
    assert_eq!(s.read32(base + DMA_TRANSFERRED), Ok(6));
    s.tick(10);
    assert_eq!(s.read32(BRIDGE_ISSUED), Ok(6));
    assert_eq!(s.write32(base + DMA_STATUS, 0), Err(BusError::ReadOnlyRegister(base + DMA_STATUS)));
}

#[test]
fn dma_into_data_buffer_port() {
    let mut s = sim();
    for i in 0..16u32 {
        s.write32(SRAM_A_BASE + 4 * i, 0xA000 + i).unwrap();
    }
    let base = dma_base(0);
    s.write32(base + DMA_SRC, SRAM_A_BASE).unwrap();
    s.write32(base + DMA_DST, DATABUF_PORT_BASE + 64 * 9).unwrap();
    s.write32(base + DMA_LEN, 8).unwrap();
    s.write32(base + DMA_CTRL, DMA_CTRL_START | 8 << 8).unwrap();
    s.tick(1);
    s.write32(DATABUF_SLOT_SEL, 9).unwrap();
    for i in 0..16 {
        assert_eq!(s.read32(DATABUF_WINDOW + 4 * i), Ok(0xA000 + i));
    }
}

#[test]
fn invalid_descriptors_are_refused() {
    let mut s = sim();
    let base = dma_base(0);
    s.write32(base + DMA_SRC, FIFO_PORT_LO).unwrap();
    s.write32(base + DMA_DST, 0).unwrap();
    s.write32(base + DMA_LEN, 1).unwrap();
    assert!(matches!(s.write32(base + DMA_CTRL, DMA_CTRL_START), Err(BusError::Dma(DmaError::InvalidDescriptor(_)))));
    s.write32(base + DMA_SRC, 0).unwrap();
    s.write32(base + DMA_LEN, 0).unwrap();
    assert!(matches!(s.write32(base + DMA_CTRL, DMA_CTRL_START), Err(BusError::Dma(DmaError::InvalidDescriptor(_)))));
    assert_eq!(s.read32(base + DMA_STATUS), Ok(0));
}

#[test]
fn poll_times_out() {
    let mut s = sim();
    assert_eq!(s.poll_until(BRIDGE_STATUS, 1, 0, 5), Err(BusError::Timeout { addr: BRIDGE_STATUS, cycles: 5 }));
    assert_eq!(s.cycle(), 5);
    assert_eq!(s.read32(CYCLE_LO), Ok(5));
}
