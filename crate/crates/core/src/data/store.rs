//! On-disk layout of a processed dataset directory.
//!
//! Every file starts with a `# tim4rec <kind> v1` line; fields are
//! tab-separated, lines end in `\n`.
//!
//! * `item_map.tsv`: `id<TAB>raw key`, ids `1..=items` in order.
//! * `user_map.tsv`: same for users.
//! * `sequences.tsv`: `user id<TAB>item ids<TAB>timestamps`, lists joined by
//!   `,`, chronological.
//! * `stats.txt`: `key = value` lines for `users`, `items`,
//!   `interactions`, `excluded_from_eval`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::sequences::{DatasetStats, SequenceDataset, UserSequence};
use crate::error::{Error, Result};

pub const ITEM_MAP: &str = "item_map.tsv";
pub const USER_MAP: &str = "user_map.tsv";
pub const SEQUENCES: &str = "sequences.tsv";
pub const STATS: &str = "stats.txt";

fn header(kind: &str) -> String {
    format!("# tim4rec {kind} v1\n")
}

fn map_text(kind: &str, keys: &[String]) -> Result<String> {
    let mut s = header(kind);
    for (i, k) in keys.iter().enumerate() {
        if k.contains(['\t', '\n', '\r']) {
            return Err(Error::Data(format!("raw key {k:?} contains a tab or newline")));
        }
        writeln!(s, "{}\t{k}", i + 1).unwrap();
    }
    Ok(s)
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub fn stats_text(stats: &DatasetStats) -> String {
    let mut s = header("stats");
    writeln!(s, "users = {}", stats.users).unwrap();
    writeln!(s, "items = {}", stats.items).unwrap();
    writeln!(s, "interactions = {}", stats.interactions).unwrap();
    writeln!(s, "excluded_from_eval = {}", stats.excluded_from_eval).unwrap();
    s
}

pub fn save(ds: &SequenceDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut seq = header("sequences");
    for u in &ds.users {
        writeln!(seq, "{}\t{}\t{}", u.user, join(&u.items), join(&u.timestamps)).unwrap();
    }
    let files = [
        (ITEM_MAP, map_text("item_map", &ds.item_keys)?),
        (USER_MAP, map_text("user_map", &ds.user_keys)?),
        (SEQUENCES, seq),
        (STATS, stats_text(&ds.stats())),
    ];
    for (name, text) in files {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

fn read_body(dir: &Path, name: &str, kind: &str) -> Result<Vec<String>> {
    let p = dir.join(name);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(header(kind).trim_end()) {
        return Err(Error::Data(format!("{}: missing or unknown version header", p.display())));
    }
    Ok(lines.map(str::to_string).collect())
}

fn read_map(dir: &Path, name: &str, kind: &str) -> Result<Vec<String>> {
    let mut keys = Vec::new();
    for (i, line) in read_body(dir, name, kind)?.iter().enumerate() {
        let (id, key) = line
            .split_once('\t')
            .ok_or_else(|| Error::Data(format!("{name}: bad line {line:?}")))?;
        if id.parse::<usize>().ok() != Some(i + 1) {
            return Err(Error::Data(format!("{name}: ids must run 1, 2, ... (line {line:?})")));
        }
        keys.push(key.to_string());
    }
    Ok(keys)
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|v| v.parse().map_err(|_| Error::Data(format!("bad list entry {v:?}"))))
        .collect()
}

pub fn load(dir: impl AsRef<Path>) -> Result<SequenceDataset> {
    let dir = dir.as_ref();
    let item_keys = read_map(dir, ITEM_MAP, "item_map")?;
    let user_keys = read_map(dir, USER_MAP, "user_map")?;
    let mut users = Vec::new();
    for line in read_body(dir, SEQUENCES, "sequences")? {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(Error::Data(format!("{SEQUENCES}: bad line {line:?}")));
        }
        let u = UserSequence {
            user: f[0].parse().map_err(|_| Error::Data(format!("bad user id {:?}", f[0])))?,
            items: parse_list(f[1])?,
            timestamps: parse_list(f[2])?,
        };
        if u.items.len() != u.timestamps.len()
            || u.items.iter().any(|&i| i == 0 || i > item_keys.len())
            || u.user == 0
            || u.user > user_keys.len()
        {
            return Err(Error::Data(format!("{SEQUENCES}: inconsistent record for user {}", u.user)));
        }
        users.push(u);
    }
    Ok(SequenceDataset {
        item_keys,
        user_keys,
        users,
    })
}
