//! The 64-bit command word consumed by the bridge's command FIFO.
//!
//! Each word carries two CA-bus beats (one two-cycle LPDDR4 command), a kind
//! telling the bridge what to do with the data buffer, a buffer slot index and
//! a hold count.
//!
//! ```text
//!  63            40 39          24 23    16 15  14 13  12      7  6   5      0
//! +----------------+--------------+--------+------+---+---------+---+--------+
//! | reserved (0)   | hold         | slot   | kind |cs1| ca1     |cs0| ca0    |
//! +----------------+--------------+--------+------+---+---------+---+--------+
//! ```
//!
//! `kind` is `00` CA only, `01` read capture, `10` write fetch; `11` is
//! reserved and rejected by [`decode`].

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use thiserror::Error;

const CA0_SHIFT: u32 = 0;
// Each beat is 7 bits: ca in the low six, cs above.
const CA1_SHIFT: u32 = 7;
const KIND_SHIFT: u32 = 14;
const SLOT_SHIFT: u32 = 16;
const HOLD_SHIFT: u32 = 24;

/// Bits that must be zero in every valid word.
pub const RESERVED_BITS: Range<u32> = 40..64;
/// Bits holding the command kind.
pub const KIND_BITS: Range<u32> = 14..16;

/// Width of a command word in bits.
pub const WORD_BITS: u32 = 64;

const CA_MASK: u64 = 0x3f;
const RESERVED_MASK: u64 = !((1u64 << 40) - 1);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("reserved bits set (bits {}..{} = {value:#x})", bits.start, bits.end)]
    ReservedNonZero { bits: Range<u32>, value: u64 },
    #[error("reserved command kind 0b11 (bits {}..{})", bits.start, bits.end)]
    ReservedKind { bits: Range<u32> },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StreamError {
    #[error("line {line}: expected 16 hex digits, found {found:?}")]
    Syntax { line: usize, found: String },
    #[error("line {line}: {source}")]
    Decode { line: usize, source: DecodeError },
    #[error("binary stream length {len} is not a multiple of 8 bytes")]
    Truncated { len: usize },
    #[error("word {index}: {source}")]
    BinaryDecode { index: usize, source: DecodeError },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FieldError {
    #[error("CA value {0:#x} does not fit in 6 bits")]
    CaOutOfRange(u32),
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
}

/// One CA-bus cycle: chip select plus the 6-bit command/address value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct CaBeat {
    cs: bool,
    ca: u8,
}

impl CaBeat {
    pub const IDLE: CaBeat = CaBeat { cs: false, ca: 0 };

    pub fn new(cs: bool, ca: u8) -> Result<Self, FieldError> {
        if u64::from(ca) > CA_MASK {
            return Err(FieldError::CaOutOfRange(ca.into()));
        }
        Ok(Self { cs, ca })
    }

    /// Builds a beat from the low six bits of `ca`, ignoring the rest.
    pub const fn masked(cs: bool, ca: u8) -> Self {
        Self { cs, ca: ca & 0x3f }
    }

    pub const fn cs(self) -> bool {
        self.cs
    }

    pub const fn ca(self) -> u8 {
        self.ca
    }

    fn bits(self) -> u64 {
        u64::from(self.ca) | (u64::from(self.cs) << 6)
    }

    fn from_bits(bits: u64) -> Self {
        Self { cs: bits & 0x40 != 0, ca: (bits & CA_MASK) as u8 }
    }
}

/// What the bridge does with the data buffer when it issues a word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum CommandKind {
    #[default]
    CaOnly,
    /// Capture the read burst returned for this command into `slot`.
    ReadCapture,
    /// Send the payload of `slot` as the write burst of this command.
    WriteFetch,
}

impl CommandKind {
    const fn code(self) -> u64 {
        match self {
            CommandKind::CaOnly => 0b00,
            CommandKind::ReadCapture => 0b01,
            CommandKind::WriteFetch => 0b10,
        }
    }

    /// Mnemonic used by the textual field syntax.
    pub const fn mnemonic(self) -> &'static str {
        match self {
            CommandKind::CaOnly => "CA",
            CommandKind::ReadCapture => "READ",
            CommandKind::WriteFetch => "WRITE",
        }
    }
}

/// A decoded command word.
///
/// `slot` is carried for every kind; for [`CommandKind::CaOnly`] the bridge
/// ignores it, so tools are free to use it as a tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct DfiCommand {
    pub beat0: CaBeat,
    pub beat1: CaBeat,
    pub kind: CommandKind,
    pub slot: u8,
    /// Subsystem cycles the bridge stalls after issuing this word.
    pub hold: u16,
}

impl DfiCommand {
    pub fn encode(&self) -> Word64 {
        encode(self)
    }
}

/// Raw 64-bit FIFO entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct Word64(pub u64);

impl Word64 {
    pub const fn raw(self) -> u64 {
        self.0
    }

    pub fn decode(self) -> Result<DfiCommand, DecodeError> {
        decode(self)
    }

    pub const fn lo(self) -> u32 {
        self.0 as u32
    }

    pub const fn hi(self) -> u32 {
        (self.0 >> 32) as u32
    }
}

impl From<u64> for Word64 {
    fn from(raw: u64) -> Self {
        Word64(raw)
    }
}

impl fmt::Display for Word64 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016X}", self.0)
    }
}

pub fn encode(cmd: &DfiCommand) -> Word64 {
    let raw = (cmd.beat0.bits() << CA0_SHIFT)
        | (cmd.beat1.bits() << CA1_SHIFT)
        | (cmd.kind.code() << KIND_SHIFT)
        | (u64::from(cmd.slot) << SLOT_SHIFT)
        | (u64::from(cmd.hold) << HOLD_SHIFT);
    Word64(raw)
}

pub fn decode(word: Word64) -> Result<DfiCommand, DecodeError> {
    let raw = word.0;
    if raw & RESERVED_MASK != 0 {
        return Err(DecodeError::ReservedNonZero {
            bits: RESERVED_BITS,
            value: raw >> RESERVED_BITS.start,
        });
    }
    let kind = match (raw >> KIND_SHIFT) & 0b11 {
        0b00 => CommandKind::CaOnly,
        0b01 => CommandKind::ReadCapture,
        0b10 => CommandKind::WriteFetch,
        _ => return Err(DecodeError::ReservedKind { bits: KIND_BITS }),
    };
    Ok(DfiCommand {
        beat0: CaBeat::from_bits(raw >> CA0_SHIFT),
        beat1: CaBeat::from_bits(raw >> CA1_SHIFT),
        kind,
        slot: (raw >> SLOT_SHIFT) as u8,
        hold: (raw >> HOLD_SHIFT) as u16,
    })
}

/// Parses the textual stream format: one 16-digit hex word per line, `#`
/// starts a comment, blank lines are skipped. Every word is validated.
pub fn parse_stream(text: &str) -> Result<Vec<Word64>, StreamError> {
    let words = parse_hex_words(text)?;
    for (line_no, word) in &words {
        decode(*word).map_err(|source| StreamError::Decode { line: *line_no, source })?;
    }
    Ok(words.into_iter().map(|(_, w)| w).collect())
}

/// The same line syntax without command validation (data images), paired
/// with 1-based line numbers.
pub fn parse_hex_words(text: &str) -> Result<Vec<(usize, Word64)>, StreamError> {
    let mut words = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let body = match line.find('#') {
            Some(pos) => &line[..pos],
            None => line,
        }
        .trim();
        if body.is_empty() {
            continue;
        }
        if body.len() != 16 || !body.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(StreamError::Syntax { line: line_no, found: body.to_string() });
        }
        words.push((line_no, Word64(u64::from_str_radix(body, 16).expect("validated hex"))));
    }
    Ok(words)
}

/// Canonical textual rendering accepted by [`parse_stream`].
pub fn render_stream(words: &[Word64]) -> String {
    let mut out = String::with_capacity(words.len() * 17);
    for w in words {
        out.push_str(&w.to_string());
        out.push('\n');
    }
    out
}

/// Parses the binary stream form: little-endian 8-byte words, no header.
pub fn parse_binary(bytes: &[u8]) -> Result<Vec<Word64>, StreamError> {
    if bytes.len() % 8 != 0 {
        return Err(StreamError::Truncated { len: bytes.len() });
    }
    bytes
        .chunks_exact(8)
        .enumerate()
        .map(|(index, chunk)| {
            let word = Word64(u64::from_le_bytes(chunk.try_into().expect("8-byte chunk")));
            decode(word).map_err(|source| StreamError::BinaryDecode { index, source })?;
            Ok(word)
        })
        .collect()
}

pub fn render_binary(words: &[Word64]) -> Vec<u8> {
    words.iter().flat_map(|w| w.0.to_le_bytes()).collect()
}

fn fmt_beat(b: CaBeat) -> String {
    format!("cs{}:{:#04x}", u8::from(b.cs), b.ca)
}

impl fmt::Display for DfiCommand {
    /// Field syntax, e.g. `READ slot=255 hold=3 ca0=cs1:0x16 ca1=cs0:0x00`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} slot={} hold={} ca0={} ca1={}",
            self.kind.mnemonic(),
            self.slot,
            self.hold,
            fmt_beat(self.beat0),
            fmt_beat(self.beat1)
        )
    }
}

fn parse_int(s: &str) -> Option<u64> {
    match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16).ok(),
        None => s.parse().ok(),
    }
}

fn parse_beat(s: &str) -> Result<CaBeat, String> {
    let (cs, ca) = s.split_once(':').ok_or_else(|| format!("beat {s:?} is not csN:VALUE"))?;
    let cs = match cs {
        "cs0" => false,
        "cs1" => true,
        other => return Err(format!("chip select {other:?} is not cs0 or cs1")),
    };
    let ca = parse_int(ca).ok_or_else(|| format!("bad CA value {ca:?}"))?;
    if ca > CA_MASK {
        return Err(format!("CA value {ca:#x} does not fit in 6 bits"));
    }
    Ok(CaBeat { cs, ca: ca as u8 })
}

impl FromStr for DfiCommand {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut tokens = s.split_whitespace();
        let kind = match tokens.next() {
            Some("CA") => CommandKind::CaOnly,
            Some("READ") => CommandKind::ReadCapture,
            Some("WRITE") => CommandKind::WriteFetch,
            Some(other) => return Err(format!("unknown command kind {other:?}")),
            None => return Err("empty command".to_string()),
        };
        let mut cmd = DfiCommand { kind, ..DfiCommand::default() };
        for tok in tokens {
            let (key, value) = tok.split_once('=').ok_or_else(|| format!("expected key=value, found {tok:?}"))?;
            match key {
                "slot" => {
                    cmd.slot = parse_int(value)
                        .and_then(|v| u8::try_from(v).ok())
                        .ok_or_else(|| format!("slot {value:?} out of range 0..=255"))?
                }
                "hold" => {
                    cmd.hold = parse_int(value)
                        .and_then(|v| u16::try_from(v).ok())
                        .ok_or_else(|| format!("hold {value:?} out of range 0..=65535"))?
                }
                "ca0" => cmd.beat0 = parse_beat(value)?,
                "ca1" => cmd.beat1 = parse_beat(value)?,
                other => return Err(format!("unknown field {other:?}")),
            }
        }
        Ok(cmd)
    }
}

/// Parses a field-syntax listing (one command per line, `#` comments).
pub fn parse_fields(text: &str) -> Result<Vec<DfiCommand>, FieldError> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let cmd = body.parse().map_err(|msg| FieldError::Syntax { line: idx + 1, msg })?;
        out.push(cmd);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn beat(cs: bool, ca: u8) -> CaBeat {
        CaBeat::new(cs, ca).unwrap()
    }

    #[test]
    fn zero_command_encodes_to_zero() {
        assert_eq!(encode(&DfiCommand::default()), Word64(0));
        assert_eq!(decode(Word64(0)).unwrap(), DfiCommand::default());
    }

    #[test]
    fn read_capture_example() {
        let cmd = DfiCommand {
            beat0: beat(true, 0x16),
            beat1: beat(false, 0),
            kind: CommandKind::ReadCapture,
            slot: 255,
            hold: 3,
        };
        assert_eq!(encode(&cmd), Word64(0x0000_0000_03FF_4056));
        assert_eq!(decode(Word64(0x0000_0000_03FF_4056)).unwrap(), cmd);
    }

    #[test]
    fn write_fetch_example() {
        let cmd = DfiCommand { kind: CommandKind::WriteFetch, slot: 1, ..Default::default() };
        assert_eq!(encode(&cmd), Word64(0x0000_0000_0001_8000));
    }

    #[test]
    fn reserved_bits_rejected() {
        let err = decode(Word64(0x8000_0000_0000_0000)).unwrap_err();
        assert_eq!(err, DecodeError::ReservedNonZero { bits: 40..64, value: 0x80_0000 });
        assert!(err.to_string().contains("reserved bits set"));
    }

    #[test]
    fn reserved_kind_rejected() {
        assert_eq!(decode(Word64(0b11 << 14)).unwrap_err(), DecodeError::ReservedKind { bits: 14..16 });
    }

    #[test]
    fn ca_out_of_range() {
        assert_eq!(CaBeat::new(true, 64), Err(FieldError::CaOutOfRange(64)));
        assert_eq!(CaBeat::masked(true, 0xff).ca(), 0x3f);
    }

    #[test]
    fn stream_examples() {
        let words = parse_stream("0000000000000000\n# comment\n0000000003FF4056").unwrap();
        assert_eq!(words, vec![Word64(0), Word64(0x3FF4056)]);
        assert_eq!(parse_stream("xyz"), Err(StreamError::Syntax { line: 1, found: "xyz".into() }));
        assert_eq!(parse_stream("").unwrap(), vec![]);
    }

    #[test]
    fn stream_trailing_comment_and_lowercase() {
        let words = parse_stream("  0000000003ff4056   # read\n\n").unwrap();
        assert_eq!(words, vec![Word64(0x3FF4056)]);
    }

    #[test]
    fn stream_decode_error_carries_line() {
        let err = parse_stream("0000000000000000\n8000000000000000\n").unwrap_err();
        assert!(matches!(err, StreamError::Decode { line: 2, .. }));
    }

    #[test]
    fn stream_rejects_short_words() {
        assert!(matches!(parse_stream("3FF4056"), Err(StreamError::Syntax { line: 1, .. })));
    }

    #[test]
    fn binary_form() {
        let words = vec![Word64(0x3FF4056), Word64(0x18000)];
        let bytes = render_binary(&words);
        assert_eq!(&bytes[..8], &[0x56, 0x40, 0xFF, 0x03, 0, 0, 0, 0]);
        assert_eq!(parse_binary(&bytes).unwrap(), words);
        assert_eq!(parse_binary(&bytes[..7]), Err(StreamError::Truncated { len: 7 }));
    }

    #[test]
    fn field_syntax() {
        let cmd = decode(Word64(0x3FF4056)).unwrap();
        let text = cmd.to_string();
        assert_eq!(text, "READ slot=255 hold=3 ca0=cs1:0x16 ca1=cs0:0x00");
        assert_eq!(text.parse::<DfiCommand>().unwrap(), cmd);
        assert!("READ slot=256".parse::<DfiCommand>().is_err());
        assert!("NOPE".parse::<DfiCommand>().is_err());
        assert!("CA ca0=cs1:0x40".parse::<DfiCommand>().is_err());
    }
}
