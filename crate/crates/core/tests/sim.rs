mod common;

use common::{ca, nop, word};
use phybridge::cmdword::{CommandKind, Word64};
use phybridge::device::{DeviceCommand, DeviceConfig};
use phybridge::dma::{DmaDescriptor, Endpoint};
use phybridge::busmap::RegisterBus;
use phybridge::sim::{parse_trace, RunReport, SimConfig, Simulator, TraceRecord, Warmup};
use proptest::prelude::*;

fn sim(initialized: bool) -> Simulator {
    Simulator::new(SimConfig {
        phy_ready: true,
        trace: true,
        device: DeviceConfig { initialized, ..Default::default() },
        ..Default::default()
    })
}

fn records(s: &mut Simulator) -> Vec<TraceRecord> {
    parse_trace(std::str::from_utf8(&s.take_trace()).unwrap()).unwrap()
}

#[test]
fn hold_one_halves_utilization() {
    let mut s = sim(false);
    for _ in 0..20 {
        s.push_word(nop(1)).unwrap();
    }
    assert!(s.run_until_quiescent(1000));
    let r = s.report();
    assert_eq!(r.utilization, 0.5);
    assert_eq!(r.steady_idle_cycles, 0);
    assert_eq!((r.issued_commands, r.held_cycles), (20, 20));
}

#[test]
fn issue_at_sys_five_is_phy_ten() {
    let mut s = sim(false);
    s.tick(4);
    s.push_word(nop(0)).unwrap();
    s.tick(2);
    let recs = records(&mut s);
    let issue = recs.iter().find(|r| r.kind == "ISSUE").unwrap();
    assert_eq!((issue.sys_cycle, issue.phy_cycle), (5, 10));
    let beats: Vec<u64> = recs.iter().filter(|r| r.kind == "BEAT").map(|r| r.phy_cycle).collect();
    assert_eq!(beats, vec![10, 11]);
}

#[test]
fn records_follow_step_order_and_clock_ratio() {
    let mut s = sim(true);
    let image: Vec<Word64> = vec![
        ca(DeviceCommand::Act1 { bank: 2, row_hi: 0 }, 0),
        ca(DeviceCommand::Act2 { row_lo: 7 }, 4),
        word(DeviceCommand::Wr { bank: 2, col: 1 }, CommandKind::WriteFetch, 3, 4),
        word(DeviceCommand::Rd { bank: 2, col: 1 }, CommandKind::ReadCapture, 4, 0),
    ];
    for (i, w) in image.iter().enumerate() {
        s.platform_mut().map.write_u64(8 * i as u32, w.raw());
    }
    s.preload_slot(3, phybridge::phy::Burst::from_beats([0x55; 16])).unwrap();
    s.start_dma(0, DmaDescriptor { src: Endpoint::Memory(0), dst: Endpoint::CommandFifo, len_words64: 4, rate: 1 }).unwrap();
    assert!(s.run_until_quiescent(1000));
    let recs = records(&mut s);
    let rank = |m: &str| match m {
        "dma" => 0,
        "bridge" => 1,
        _ => 2,
    };
    for pair in recs.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        assert!(a.sys_cycle <= b.sys_cycle);
        if a.sys_cycle == b.sys_cycle {
            assert!(rank(&a.module) <= rank(&b.module), "{a:?} before {b:?}");
        }
    }
    for r in &recs {
        assert!(r.phy_cycle == 2 * r.sys_cycle || r.phy_cycle == 2 * r.sys_cycle + 1, "{r:?}");
    }
    let capture = recs.iter().find(|r| r.kind == "CAPTURE").unwrap();
    assert_eq!(capture.bool_field("missing"), Some(false));
    assert_eq!(s.platform().bridge.slot_read(4).unwrap().payload.beats, [0x55; 16]);
    assert_eq!(s.report().timing_violations, 0);
}

#[test]
fn early_read_is_a_rcd_violation() {
    let mut s = sim(true);
    // ACT2 at phy 2, RD at phy 6: 4 cycles after the activate, tRCD is 8
    for w in [
        ca(DeviceCommand::Act1 { bank: 0, row_hi: 0 }, 0),
        ca(DeviceCommand::Act2 { row_lo: 5 }, 1),
        word(DeviceCommand::Rd { bank: 0, col: 0 }, CommandKind::ReadCapture, 0, 0),
    ] {
        s.push_word(w).unwrap();
    }
    assert!(s.run_until_quiescent(100));
    let recs = records(&mut s);
    let reject = recs.iter().find(|r| r.kind == "REJECT").unwrap();
    assert_eq!(reject.str_field("rule"), Some("tRCD"));
    assert_eq!((reject.u64_field("required"), reject.u64_field("actual")), (Some(8), Some(4)));
    assert_eq!(reject.phy_cycle - recs.iter().find(|r| r.str_field("cmd") == Some("ACT")).unwrap().phy_cycle, 4);
    assert_eq!(s.report().timing_violations, 1);
    // the capture still lands, with zeros
    assert_eq!(s.report().missing_read_data, 1);
}

#[test]
fn empty_run_has_empty_trace() {
    let mut s = sim(false);
    assert!(s.run_until_quiescent(10));
    assert!(s.take_trace().is_empty());
    assert_eq!(s.report().utilization, 0.0);
}

#[test]
fn fixed_warmup_window() {
    let run = |warmup| {
        let mut s = Simulator::new(SimConfig { trace: true, warmup, ..Default::default() });
        s.tick(3);
        for _ in 0..10 {
            s.push_word(nop(0)).unwrap();
        }
        s.run_until_quiescent(100);
        let r = s.report();
        let text = String::from_utf8(s.take_trace()).unwrap();
        assert_eq!(RunReport::from_trace(&parse_trace(&text).unwrap(), warmup), r);
        r
    };
    let first = run(Warmup::FirstIssue);
    assert_eq!((first.warmup_cycles, first.steady_idle_cycles, first.utilization), (4, 0, 1.0));
    let fixed = run(Warmup::Cycles(2));
    assert_eq!((fixed.warmup_cycles, fixed.steady_idle_cycles), (2, 2));
    assert_eq!(fixed.utilization, 20.0 / 24.0);
}

fn arb_word() -> impl Strategy<Value = u64> {
    prop_oneof![
        4 => (0u64..1 << 24, 0u64..8).prop_map(|(low, hold)| low | hold << 24),
        1 => any::<u64>().prop_map(|w| w & !(0xFFFF << 24)),
        2 => (0u16..4).prop_map(|h| nop(h).raw()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn accounting_and_trace_replay(words in proptest::collection::vec(arb_word(), 0..60), init: bool, gap in 0u64..5) {
        let mut s = sim(init);
        s.tick(gap);
        for w in &words {
            s.push_word(Word64(*w)).unwrap();
        }
        prop_assert!(s.run_until_quiescent(1_000_000));
        let r = s.report();
        prop_assert_eq!(r.cycles_run, r.idle_cycles + r.held_cycles + r.issued_commands);
        prop_assert_eq!(r.issued_beats, 2 * r.issued_commands);
        prop_assert!((0.0..=1.0).contains(&r.utilization));
        let recs = records(&mut s);
        for rec in &recs {
            prop_assert!(rec.phy_cycle / 2 == rec.sys_cycle);
        }
        prop_assert_eq!(RunReport::from_trace(&recs, Warmup::FirstIssue), r);
    }

    #[test]
    fn identical_inputs_give_identical_traces(words in proptest::collection::vec(arb_word(), 0..40)) {
        let run = || {
            let mut s = sim(true);
            for w in &words {
                s.push_word(Word64(*w)).unwrap();
            }
            s.run_until_quiescent(1_000_000);
            (s.take_trace(), s.report())
        };
        prop_assert_eq!(run(), run());
    }
}
