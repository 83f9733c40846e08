//! The `pad.metadata` text file.
//!
//! One header line, then one fixed-width line per pad:
//!
//! ```text
//! pad   kb/pg pages tx pg rx pg tx off   rx off
//! 00001 00512 00256 00054 00053 00085898 00085114
//! ```
//!
//! Five-digit fields for pad, page size, page count and page cursors;
//! eight-digit fields for byte offsets. The widths set the hard limits below.

use thiserror::Error;

/// Largest page size in KiB; one more would overflow the 8-digit offset.
pub const MAX_KB_PER_PAGE: u32 = 97_656;
/// Pages per pad, bounded by the directory-entry budget of the page directory.
pub const MAX_PAGES: u32 = 31_998;
/// Pads per vault, bounded the same way in the vault root.
pub const MAX_PADS: usize = 31_995;
/// Largest pad id expressible in the 5-digit field.
pub const MAX_PAD_ID: u32 = 99_999;
/// Largest page cursor value; the top two are exhaustion sentinels.
pub const MAX_PAGE_CURSOR: u32 = 99_999;
pub const TX_EXHAUSTED_SENTINEL: u32 = 99_998;
pub const RX_EXHAUSTED_SENTINEL: u32 = 99_999;
/// Largest offset expressible in the 8-digit field.
pub const MAX_OFFSET: u32 = 99_999_999;
/// Largest pad the format can describe, in bytes.
pub const MAX_PAD_BYTES: u64 = MAX_KB_PER_PAGE as u64 * 1024 * MAX_PAGES as u64;

pub const HEADER: &str = "pad   kb/pg pages tx pg rx pg tx off   rx off";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetadataError {
    #[error("line {line}: malformed metadata line")]
    MalformedLine { line: usize },
    #[error("line {line}: {field} value {value} is out of range")]
    FieldOverflow { line: usize, field: &'static str, value: u64 },
    #[error("pad {0:05} appears more than once")]
    DuplicatePadId(u32),
    #[error("line {line}: transmit and receive page are both {page}")]
    CursorCollision { line: usize, page: u32 },
    #[error("refusing to write {0} pads, the limit is {MAX_PADS}")]
    RefusedTooManyPads(usize),
}

/// One row of `pad.metadata`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct PadMetadata {
    pub pad_id: u32,
    pub kb_per_page: u32,
    pub pages: u32,
    pub tx_pg: u32,
    pub rx_pg: u32,
    pub tx_off: u32,
    pub rx_off: u32,
}

impl PadMetadata {
    pub fn page_bytes(&self) -> usize {
        self.kb_per_page as usize * 1024
    }

    pub fn pad_bytes(&self) -> u64 {
        self.page_bytes() as u64 * self.pages as u64
    }

    pub fn tx_exhausted(&self) -> bool {
        self.tx_pg >= self.pages
    }

    pub fn rx_exhausted(&self) -> bool {
        self.rx_pg >= self.pages
    }

    /// The endpoint with the higher transmit page grants page turns.
    pub fn controls_page_turns(&self) -> bool {
        self.tx_pg > self.rx_pg
    }

    pub fn validate(&self, line: usize) -> Result<(), MetadataError> {
        let over = |field: &'static str, value: u32| MetadataError::FieldOverflow {
            line,
            field,
            value: value as u64,
        };
        if self.pad_id > MAX_PAD_ID {
            return Err(over("pad", self.pad_id));
        }
        if self.kb_per_page == 0 || self.kb_per_page > MAX_KB_PER_PAGE {
            return Err(over("kb/pg", self.kb_per_page));
        }
        if self.pages == 0 || self.pages > MAX_PAGES {
            return Err(over("pages", self.pages));
        }
        if self.tx_pg > MAX_PAGE_CURSOR {
            return Err(over("tx pg", self.tx_pg));
        }
        if self.rx_pg > MAX_PAGE_CURSOR {
            return Err(over("rx pg", self.rx_pg));
        }
        let limit = self.page_bytes() as u32;
        if self.tx_off > limit {
            return Err(over("tx off", self.tx_off));
        }
        if self.rx_off > limit {
            return Err(over("rx off", self.rx_off));
        }
        if self.tx_pg == self.rx_pg {
            return Err(MetadataError::CursorCollision { line, page: self.tx_pg });
        }
        Ok(())
    }

    fn write_line(&self, out: &mut String) {
        use std::fmt::Write;
        let _ = writeln!(
            out,
            "{:05} {:05} {:05} {:05} {:05} {:08} {:08}",
            self.pad_id, self.kb_per_page, self.pages, self.tx_pg, self.rx_pg, self.tx_off, self.rx_off
        );
    }
}

/// Parse a metadata file. Rows keep file order.
pub fn parse_metadata(text: &str) -> Result<Vec<PadMetadata>, MetadataError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        None => return Ok(Vec::new()),
        Some((i, header)) => {
            let want: Vec<&str> = HEADER.split_whitespace().collect();
            if header.split_whitespace().collect::<Vec<_>>() != want {
                return Err(MetadataError::MalformedLine { line: i + 1 });
            }
        }
    }
    let mut seen = std::collections::HashSet::new();
    let mut rows = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        const WIDTHS: [usize; 7] = [5, 5, 5, 5, 5, 8, 8];
        if fields.len() != WIDTHS.len() {
            return Err(MetadataError::MalformedLine { line: line_no });
        }
        let mut vals = [0u32; 7];
        for (slot, (field, width)) in vals.iter_mut().zip(fields.iter().zip(WIDTHS)) {
            if field.len() != width || !field.bytes().all(|b| b.is_ascii_digit()) {
                return Err(MetadataError::MalformedLine { line: line_no });
            }
            *slot = field.parse().map_err(|_| MetadataError::MalformedLine { line: line_no })?;
        }
        let row = PadMetadata {
            pad_id: vals[0],
            kb_per_page: vals[1],
            pages: vals[2],
            tx_pg: vals[3],
            rx_pg: vals[4],
            tx_off: vals[5],
            rx_off: vals[6],
        };
        row.validate(line_no)?;
        if !seen.insert(row.pad_id) {
            return Err(MetadataError::DuplicatePadId(row.pad_id));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Render rows in the canonical fixed-width form.
pub fn serialize_metadata(rows: &[PadMetadata]) -> Result<String, MetadataError> {
    if rows.len() > MAX_PADS {
        return Err(MetadataError::RefusedTooManyPads(rows.len()));
    }
    let mut out = String::with_capacity(48 * (rows.len() + 1));
    out.push_str(HEADER);
    out.push('\n');
    for row in rows {
        row.write_line(&mut out);
    }
    Ok(out)
}
