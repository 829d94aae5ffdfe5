use std::collections::HashMap;

use indexmap::IndexMap;

use super::ingest::{Event, EventLog};
use crate::error::{Error, Result};

/// Drops users, then items, with fewer than `k` events, repeating until
/// nothing changes. Event order is preserved.
pub fn k_core_filter(log: &EventLog, k: usize) -> Result<EventLog> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let mut events: Vec<&Event> = log.events.iter().collect();
    loop {
        let before = events.len();
        let mut users: HashMap<&str, usize> = HashMap::new();
        for e in &events {
            *users.entry(&e.user).or_default() += 1;
        }
        events.retain(|e| users[e.user.as_str()] >= k);
        let mut items: HashMap<&str, usize> = HashMap::new();
        for e in &events {
            *items.entry(&e.item).or_default() += 1;
        }
        events.retain(|e| items[e.item.as_str()] >= k);
        if events.len() == before {
            break;
        }
    }
    if events.is_empty() {
        return Err(Error::Data(format!(
            "dataset too sparse: nothing survives {k}-core filtering"
        )));
    }
    Ok(EventLog {
        events: events.into_iter().cloned().collect(),
        source: log.source.clone(),
        rejected: log.rejected,
        reject_samples: log.reject_samples.clone(),
    })
}

/// One user's chronological history.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSequence {
    /// 1-based user id.
    pub user: usize,
    /// 1-based item ids.
    pub items: Vec<usize>,
    pub timestamps: Vec<i64>,
}

impl UserSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// At least three events: some history plus validation and test targets.
    pub fn splittable(&self) -> bool {
        self.len() >= 3
    }
}

/// One prediction: history (oldest first) and the next item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub items: Vec<usize>,
    pub timestamps: Vec<i64>,
    pub target: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Integer-indexed per-user sequences with leave-one-out splits.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SequenceDataset {
    /// Raw item key of id `i + 1`.
    pub item_keys: Vec<String>,
    /// Raw user key of id `u + 1`.
    pub user_keys: Vec<String>,
    pub users: Vec<UserSequence>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    /// Users too short for a validation and test target.
    pub excluded_from_eval: usize,
}

/// Ids follow first appearance in the log; each user's events are stably
/// sorted by timestamp, so ties keep file order.
pub fn build_sequences(log: &EventLog) -> Result<SequenceDataset> {
    if log.is_empty() {
        return Err(Error::Data("no events".into()));
    }
    let mut items: IndexMap<&str, usize> = IndexMap::new();
    let mut users: IndexMap<&str, Vec<(i64, usize)>> = IndexMap::new();
    for e in &log.events {
        let next = items.len() + 1;
        let id = *items.entry(&e.item).or_insert(next);
        users.entry(&e.user).or_default().push((e.ts, id));
    }
    let mut ds = SequenceDataset {
        item_keys: items.keys().map(|k| k.to_string()).collect(),
        user_keys: users.keys().map(|k| k.to_string()).collect(),
        users: Vec::with_capacity(users.len()),
    };
    for (u, (_, mut evs)) in users.into_iter().enumerate() {
        evs.sort_by_key(|&(ts, _)| ts);
        ds.users.push(UserSequence {
            user: u + 1,
            items: evs.iter().map(|&(_, i)| i).collect(),
            timestamps: evs.iter().map(|&(t, _)| t).collect(),
        });
    }
    let short = ds.users.iter().filter(|u| !u.splittable()).count();
    if short > 0 {
        log::warn!("{short} users have fewer than 3 events and are left out of validation/test");
    }
    Ok(ds)
}

impl SequenceDataset {
    pub fn num_items(&self) -> usize {
        self.item_keys.len()
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    /// Item count plus the pad id.
    pub fn vocab(&self) -> usize {
        self.num_items() + 1
    }

    pub fn num_interactions(&self) -> usize {
        self.users.iter().map(UserSequence::len).sum()
    }

    pub fn stats(&self) -> DatasetStats {
        DatasetStats {
            users: self.num_users(),
            items: self.num_items(),
            interactions: self.num_interactions(),
            excluded_from_eval: self.users.iter().filter(|u| !u.splittable()).count(),
        }
    }

    /// Every prefix of each user's training part predicts its next item.
    /// The training part drops the validation and test targets.
    pub fn train_examples(&self) -> Vec<Example> {
        let mut out = Vec::new();
        for u in &self.users {
            let end = if u.splittable() { u.len() - 2 } else { u.len() };
            for k in 1..end {
                out.push(Example {
                    items: u.items[..k].to_vec(),
                    timestamps: u.timestamps[..k].to_vec(),
                    target: u.items[k],
                });
            }
        }
        out
    }

    /// One example per splittable user: validation predicts the second to
    /// last item from everything before it, test predicts the last item from
    /// the full remaining history.
    pub fn eval_examples(&self, split: Split) -> Vec<Example> {
        self.users
            .iter()
            .filter(|u| u.splittable())
            .map(|u| {
                let k = match split {
                    Split::Valid => u.len() - 2,
                    Split::Test => u.len() - 1,
                };
                Example {
                    items: u.items[..k].to_vec(),
                    timestamps: u.timestamps[..k].to_vec(),
                    target: u.items[k],
                }
            })
            .collect()
    }
}
