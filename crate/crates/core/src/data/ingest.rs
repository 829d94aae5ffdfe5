use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// One interaction row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Event {
    pub user: String,
    pub item: String,
    /// Unix seconds.
    pub ts: i64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EventLog {
    pub events: Vec<Event>,
    pub source: String,
    /// Rows that failed to parse.
    pub rejected: usize,
    /// A few rejected rows as `line N: text`.
    pub reject_samples: Vec<String>,
}

impl EventLog {
    pub fn from_events(events: Vec<Event>, source: impl Into<String>) -> Self {
        EventLog {
            events,
            source: source.into(),
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Column roles and delimiter of a text event file.
#[derive(Clone, Debug, PartialEq)]
pub struct Format {
    pub delimiter: String,
    pub user_col: usize,
    pub item_col: usize,
    pub time_col: usize,
    pub skip_header: bool,
    /// Largest tolerated fraction of malformed rows.
    pub max_malformed: f64,
}

impl Format {
    /// `user::item::rating::timestamp`.
    pub fn movielens() -> Self {
        Format {
            delimiter: "::".into(),
            user_col: 0,
            item_col: 1,
            time_col: 3,
            skip_header: false,
            max_malformed: 0.01,
        }
    }

    /// `user<TAB>item<TAB>timestamp`.
    pub fn tsv() -> Self {
        Format {
            delimiter: "\t".into(),
            user_col: 0,
            item_col: 1,
            time_col: 2,
            skip_header: false,
            max_malformed: 0.01,
        }
    }

    /// `user,item,timestamp` with a header line.
    pub fn csv() -> Self {
        Format {
            delimiter: ",".into(),
            skip_header: true,
            ..Format::tsv()
        }
    }

    pub fn with_columns(mut self, user: usize, item: usize, time: usize) -> Self {
        self.user_col = user;
        self.item_col = item;
        self.time_col = time;
        self
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "movielens" | "ml" => Ok(Format::movielens()),
            "tsv" => Ok(Format::tsv()),
            "csv" => Ok(Format::csv()),
            other => Err(Error::Config(format!(
                "unknown format {other:?} (expected movielens, tsv or csv)"
            ))),
        }
    }
}

const SAMPLE_LIMIT: usize = 5;

/// Parses event rows from text. Blank lines are ignored.
pub fn parse_events(text: &str, format: &Format, source: &str) -> Result<EventLog> {
    if format.delimiter.is_empty() {
        return Err(Error::Config("empty delimiter".into()));
    }
    let need = format.user_col.max(format.item_col).max(format.time_col);
    let mut log = EventLog {
        source: source.to_string(),
        ..Default::default()
    };
    let mut total = 0usize;
    let skip = usize::from(format.skip_header);
    for (n, line) in text.lines().enumerate().skip(skip) {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        let fields: Vec<&str> = line.split(format.delimiter.as_str()).collect();
        let parsed = (fields.len() > need)
            .then(|| {
                let ts = fields[format.time_col].trim().parse::<i64>().ok()?;
                let user = fields[format.user_col].trim();
                let item = fields[format.item_col].trim();
                (ts >= 0 && !user.is_empty() && !item.is_empty()).then(|| Event {
                    user: user.to_string(),
                    item: item.to_string(),
                    ts,
                })
            })
            .flatten();
        match parsed {
            Some(e) => log.events.push(e),
            None => {
                log.rejected += 1;
                if log.reject_samples.len() < SAMPLE_LIMIT {
                    log.reject_samples.push(format!("line {}: {line}", n + 1));
                }
            }
        }
    }
    if total > 0 && log.rejected as f64 > format.max_malformed * total as f64 {
        return Err(Error::Ingest {
            rejected: log.rejected,
            total,
            samples: log.reject_samples,
        });
    }
    if log.rejected > 0 {
        log::warn!("{source}: skipped {} malformed rows of {total}", log.rejected);
    }
    Ok(log)
}

pub fn ingest(path: impl AsRef<Path>, format: &Format) -> Result<EventLog> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    // MovieLens files are Latin-1 in places; ids and timestamps are ASCII
    let text = String::from_utf8_lossy(&bytes);
    parse_events(&text, format, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_rows() {
        let log = parse_events("1\ta\t10\n1\tb\t20\n2\ta\t5\n", &Format::tsv(), "toy").unwrap();
        assert_eq!(log.len(), 3);
        assert_eq!(log.events[2], Event { user: "2".into(), item: "a".into(), ts: 5 });
    }

    #[test]
    fn duplicates_kept() {
        let log = parse_events("1::a::5::10\n1::a::5::10\n", &Format::movielens(), "ml").unwrap();
        assert_eq!(log.len(), 2);
    }

    #[test]
    fn bad_timestamp_counted() {
        let mut text = String::from("u,i,t\n");
        for i in 0..200 {
            text.push_str(&format!("u{i},x,{i}\n"));
        }
        text.push_str("u9,x,yesterday\n");
        let log = parse_events(&text, &Format::csv(), "c").unwrap();
        assert_eq!((log.len(), log.rejected), (200, 1));
        assert!(log.reject_samples[0].contains("yesterday"));
    }

    #[test]
    fn too_many_bad_rows() {
        let r = parse_events("1\ta\t1\n1\tb\n", &Format::tsv(), "t");
        assert!(matches!(r, Err(Error::Ingest { rejected: 1, total: 2, .. })));
    }
}
