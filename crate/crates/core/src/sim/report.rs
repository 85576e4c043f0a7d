use serde::{Deserialize, Serialize};

use super::trace::TraceRecord;

/// How many leading cycles are excluded from the steady-state figures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Warmup {
    /// Everything before the first issued command.
    #[default]
    FirstIssue,
    Cycles(u64),
}

/// Summary statistics of a run. `cycles_run == idle_cycles + held_cycles +
/// issued_commands` always holds; dropped words count as idle.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunReport {
    pub cycles_run: u64,
    pub phy_cycles: u64,
    pub warmup_cycles: u64,
    pub idle_cycles: u64,
    pub steady_idle_cycles: u64,
    pub held_cycles: u64,
    pub issued_commands: u64,
    pub issued_beats: u64,
    pub utilization: f64,
    pub decode_errors: u64,
    pub slot_conflicts: u64,
    pub timing_violations: u64,
    pub illegal_commands: u64,
    pub bytes_read: u64,
    pub bytes_written: u64,
    pub dma_stalled_cycles: u64,
    pub buffer_warnings: u64,
    pub missing_read_data: u64,
    pub datapath_errors: u64,
}

pub(crate) fn utilization(steady_beats: u64, cycles_run: u64, warmup: u64) -> f64 {
    let steady = cycles_run.saturating_sub(warmup);
    if steady == 0 {
        0.0
    } else {
        steady_beats as f64 / (2 * steady) as f64
    }
}

impl RunReport {
    /// Stable machine-readable form: pretty JSON in field order, newline-terminated.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// True when nothing went wrong on the command or data path.
    pub fn is_clean(&self) -> bool {
        self.decode_errors == 0 && self.slot_conflicts == 0 && self.timing_violations == 0 && self.illegal_commands == 0
    }

    /// Recomputes the report from trace records alone.
    pub fn from_trace(records: &[TraceRecord], warmup: Warmup) -> RunReport {
        let mut r = RunReport::default();
        let mut first_issue = None;
        // (sys_cycle, idle?, issued?) per bridge cycle record
        let mut cycles = Vec::new();
        for rec in records {
            match (rec.module.as_str(), rec.kind.as_str()) {
                ("bridge", "ISSUE") => {
                    first_issue.get_or_insert(rec.sys_cycle);
                    r.issued_commands += 1;
                    cycles.push((rec.sys_cycle, false, true));
                }
                ("bridge", "HOLD") => {
                    r.held_cycles += 1;
                    cycles.push((rec.sys_cycle, false, false));
                }
                ("bridge", "IDLE") => {
                    r.idle_cycles += 1;
                    cycles.push((rec.sys_cycle, true, false));
                }
                ("bridge", "DROP") => {
                    r.idle_cycles += 1;
                    match rec.str_field("reason") {
                        Some("slot_busy") => r.slot_conflicts += 1,
                        _ => r.decode_errors += 1,
                    }
                    cycles.push((rec.sys_cycle, true, false));
                }
                ("bridge", "CAPTURE") => {
                    r.bytes_read += 64;
                    if rec.bool_field("missing") == Some(true) {
                        r.missing_read_data += 1;
                    }
                }
                ("bridge", "FETCH") => {
                    r.bytes_written += 64;
                    if rec.bool_field("warning") == Some(true) {
                        r.buffer_warnings += 1;
                    }
                }
                ("device", "REJECT") => match rec.str_field("reason") {
                    Some("timing") => r.timing_violations += 1,
                    _ => r.illegal_commands += 1,
                },
                ("dma", "STALL") => r.dma_stalled_cycles += 1,
                ("phy", "DATAPATH_ERROR") => r.datapath_errors += 1,
                _ => {}
            }
        }
        r.cycles_run = cycles.len() as u64;
        r.phy_cycles = 2 * r.cycles_run;
        r.issued_beats = 2 * r.issued_commands;
        r.warmup_cycles = match warmup {
            Warmup::FirstIssue => first_issue.unwrap_or(r.cycles_run),
            Warmup::Cycles(n) => n.min(r.cycles_run),
        };
        let mut steady_beats = 0;
        for &(cycle, idle, issued) in &cycles {
            if cycle >= r.warmup_cycles {
                r.steady_idle_cycles += u64::from(idle);
                steady_beats += 2 * u64::from(issued);
            }
        }
        r.utilization = utilization(steady_beats, r.cycles_run, r.warmup_cycles);
        r
    }

    /// Plain-text rendering for terminals.
    pub fn to_text(&self) -> String {
        let rows: [(&str, String); 19] = [
            ("cycles run", self.cycles_run.to_string()),
            ("phy cycles", self.phy_cycles.to_string()),
            ("warm-up cycles", self.warmup_cycles.to_string()),
            ("idle cycles", self.idle_cycles.to_string()),
            ("steady idle cycles", self.steady_idle_cycles.to_string()),
            ("held cycles", self.held_cycles.to_string()),
            ("issued commands", self.issued_commands.to_string()),
            ("issued beats", self.issued_beats.to_string()),
            ("utilization", format!("{:.4}", self.utilization)),
            ("decode errors", self.decode_errors.to_string()),
            ("slot conflicts", self.slot_conflicts.to_string()),
            ("timing violations", self.timing_violations.to_string()),
            ("illegal commands", self.illegal_commands.to_string()),
            ("bytes read", self.bytes_read.to_string()),
            ("bytes written", self.bytes_written.to_string()),
            ("dma stalled cycles", self.dma_stalled_cycles.to_string()),
            ("buffer warnings", self.buffer_warnings.to_string()),
            ("missing read data", self.missing_read_data.to_string()),
            ("datapath errors", self.datapath_errors.to_string()),
        ];
        rows.iter().map(|(k, v)| format!("{k:<20} {v}\n")).collect()
    }
}
