//! Line-oriented manual review of generated questions.
//!
//! For each unreviewed record the reviewer sees the TPQ and its FPQs and
//! answers one of:
//!
//! ```text
//! a            approve
//! e <text>     replace the TPQ with <text> and re-derive the FPQs
//! d            drop the record
//! s            skip (stays unreviewed)
//! q            stop reviewing
//! ```

use std::io::{self, BufRead, Write};

use super::{QgenError, QuestionRecord, ReviewStatus};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReviewTally {
    pub approved: usize,
    pub corrected: usize,
    pub dropped: usize,
    pub skipped: usize,
    pub rejected_edits: usize,
}

/// Replaces the TPQ of `record` and marks it corrected. The record is left
/// as it was when the new text fails the label check or substitution.
pub fn apply_correction(record: &mut QuestionRecord, text: &str) -> Result<(), QgenError> {
    let text = text.trim();
    record.retext(text)?;
    record.review_status = ReviewStatus::Corrected { text: text.to_string() };
    Ok(())
}

fn show(out: &mut dyn Write, r: &QuestionRecord) -> io::Result<()> {
    writeln!(out, "== {} ({})", r.id, r.format)?;
    writeln!(out, "TPQ: {}", r.tpq_text)?;
    for (m, e) in &r.fpqs {
        writeln!(out, "  {m}: {}", e.fpq_text)?;
    }
    write!(out, "[a]pprove / [e]dit <text> / [d]rop / [s]kip / [q]uit > ")?;
    out.flush()
}

/// Walks unreviewed records in order. Returns when input ends or on `q`.
/// Dropped records are removed from `records`.
pub fn review(
    records: &mut Vec<QuestionRecord>,
    input: &mut dyn BufRead,
    out: &mut dyn Write,
) -> io::Result<ReviewTally> {
    let mut tally = ReviewTally::default();
    let mut dropped = vec![false; records.len()];
    'records: for (i, r) in records.iter_mut().enumerate() {
        if r.review_status != ReviewStatus::Unreviewed {
            continue;
        }
        loop {
            show(out, r)?;
            let mut line = String::new();
            if input.read_line(&mut line)? == 0 {
                break 'records;
            }
            let line = line.trim();
            let (cmd, rest) = line.split_once(' ').unwrap_or((line, ""));
            match cmd {
                "a" => {
                    r.review_status = ReviewStatus::Approved;
                    tally.approved += 1;
                    break;
                }
                "e" => match apply_correction(r, rest) {
                    Ok(()) => {
                        tally.corrected += 1;
                        break;
                    }
                    Err(e) => {
                        tally.rejected_edits += 1;
                        writeln!(out, "rejected: {e}")?;
                    }
                },
                "d" => {
                    dropped[i] = true;
                    tally.dropped += 1;
                    break;
                }
                "s" => {
                    tally.skipped += 1;
                    break;
                }
                "q" => break 'records,
                _ => writeln!(out, "unknown command {cmd:?}")?,
            }
        }
    }
    let mut flags = dropped.into_iter();
    records.retain(|_| !flags.next().unwrap());
    Ok(tally)
}
