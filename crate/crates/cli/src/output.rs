//! Timestamping and report formatting helpers.

use acre_core::EngineEvent;
use serde_json::json;

/// Timestamp source for event log lines. The fixed variant makes replay
/// output byte-identical across runs: it starts at the epoch and advances
/// one second per event.
pub enum Clock {
    System,
    Fixed { next: u64 },
}

impl Clock {
    pub fn fixed() -> Self {
        Clock::Fixed { next: 0 }
    }

    pub fn next_timestamp(&mut self) -> String {
        match self {
            Clock::System => {
                let now = std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .unwrap_or_default()
                    .as_secs();
                iso8601_utc(now)
            }
            Clock::Fixed { next } => {
                let stamp = iso8601_utc(*next);
                *next += 1;
                stamp
            }
        }
    }
}

/// Seconds since the Unix epoch as `YYYY-MM-DDTHH:MM:SSZ`.
pub fn iso8601_utc(epoch_secs: u64) -> String {
    let days = (epoch_secs / 86_400) as i64;
    let rest = epoch_secs % 86_400;
    let (year, month, day) = civil_from_days(days);
    format!(
        "{year:04}-{month:02}-{day:02}T{:02}:{:02}:{:02}Z",
        rest / 3600,
        (rest % 3600) / 60,
        rest % 60
    )
}

// Gregorian date from days since 1970-01-01 (Howard Hinnant's civil_from_days).
fn civil_from_days(z: i64) -> (i64, u32, u32) {
    let z = z + 719_468;
    let era = if z >= 0 { z } else { z - 146_096 } / 146_097;
    let doe = (z - era * 146_097) as u64;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let y = yoe as i64 + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let m = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    (if m <= 2 { y + 1 } else { y }, m, d)
}

/// One event as a machine-readable JSON line, mirroring the text log line
/// fields: timestamp, kind, conversation id or `-`, protocol id or `-`,
/// detail.
pub fn event_json_line(event: &EngineEvent, timestamp: &str) -> String {
    json!({
        "timestamp": timestamp,
        "kind": event.kind(),
        "conversation": event.conversation_id().unwrap_or("-"),
        "protocol": event
            .protocol_id()
            .map(|p| p.to_string())
            .unwrap_or_else(|| "-".to_string()),
        "detail": event.detail(),
    })
    .to_string()
}

/// Left-aligned fixed-width table with a two-space column gap. Column widths
/// follow the content, so identical input yields identical bytes.
pub fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    let render_row = |cells: Vec<&str>| -> String {
        let mut line = String::new();
        for (i, cell) in cells.iter().enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            line.push_str(cell);
            if i + 1 < cells.len() {
                for _ in cell.len()..widths[i] {
                    line.push(' ');
                }
            }
        }
        line.push('\n');
        line
    };
    out.push_str(&render_row(headers.to_vec()));
    for row in rows {
        out.push_str(&render_row(row.iter().map(String::as_str).collect()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_formatting() {
        assert_eq!(iso8601_utc(0), "1970-01-01T00:00:00Z");
        assert_eq!(iso8601_utc(86_399), "1970-01-01T23:59:59Z");
        assert_eq!(iso8601_utc(1_000_000_000), "2001-09-09T01:46:40Z");
        assert_eq!(iso8601_utc(1_700_000_000), "2023-11-14T22:13:20Z");
    }

    #[test]
    fn fixed_clock_counts_seconds() {
        let mut clock = Clock::fixed();
        assert_eq!(clock.next_timestamp(), "1970-01-01T00:00:00Z");
        assert_eq!(clock.next_timestamp(), "1970-01-01T00:00:01Z");
    }

    #[test]
    fn table_pads_to_widest_cell() {
        let table = render_table(
            &["ID", "STATE"],
            &[
                vec!["acre-1".to_string(), "Waiting".to_string()],
                vec!["c2".to_string(), "End".to_string()],
            ],
        );
        assert_eq!(table, "ID      STATE\nacre-1  Waiting\nc2      End\n");
    }
}
