//! Consumer-group membership and partition ownership.
//!
//! Ownership changes in two steps. A rebalance computes a *target*
//! assignment; a partition only moves once its previous owner has
//! acknowledged the change (by polling again, which happens after it has
//! finished and committed its last batch) or has left or expired. No
//! partition ever has two owners.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::{Duration, Instant};

use super::TopicPartition;

/// Round-robin assignment over lexicographically sorted partitions and
/// members, topic by topic. Within a topic, partition `i` goes to the
/// `i`-th subscribed member (cyclically), so topics with equal partition
/// counts are co-partitioned: the same partition index of each topic lands
/// at the same member.
pub fn assign_round_robin<'a, I>(members: I, partitions: &[TopicPartition]) -> BTreeMap<TopicPartition, String>
where
    I: IntoIterator<Item = (&'a str, &'a BTreeSet<String>)>,
{
    let mut members: Vec<(&str, &BTreeSet<String>)> = members.into_iter().collect();
    members.sort_by(|a, b| a.0.cmp(b.0));
    let mut sorted = partitions.to_vec();
    sorted.sort();
    sorted.dedup();

    let mut out = BTreeMap::new();
    let mut cursor = 0usize;
    let mut topic: Option<String> = None;
    for tp in sorted {
        if topic.as_deref() != Some(tp.topic.as_str()) {
            topic = Some(tp.topic.clone());
            cursor = 0;
        }
        let eligible: Vec<&str> = members
            .iter()
            .filter(|(_, topics)| topics.contains(&tp.topic))
            .map(|(id, _)| *id)
            .collect();
        if eligible.is_empty() {
            continue;
        }
        out.insert(tp, eligible[cursor % eligible.len()].to_string());
        cursor += 1;
    }
    out
}

#[derive(Debug)]
pub(crate) struct Member {
    pub topics: BTreeSet<String>,
    pub last_seen: Instant,
}

#[derive(Debug, Default)]
pub(crate) struct Group {
    pub members: BTreeMap<String, Member>,
    pub target: BTreeMap<TopicPartition, String>,
    pub owned: BTreeMap<TopicPartition, String>,
    pub committed: HashMap<TopicPartition, u64>,
    pub generation: u64,
    pub next_member_seq: u64,
}

impl Group {
    pub fn rebalance(&mut self, partitions: &[TopicPartition]) {
        self.target = assign_round_robin(
            self.members.iter().map(|(id, m)| (id.as_str(), &m.topics)),
            partitions,
        );
        let members = &self.members;
        self.owned.retain(|_, owner| members.contains_key(owner));
        self.generation += 1;
    }

    /// Removes members whose session timed out. Returns whether any were removed.
    pub fn expire(&mut self, now: Instant, session_timeout: Duration) -> bool {
        let before = self.members.len();
        self.members
            .retain(|_, m| now.saturating_duration_since(m.last_seen) <= session_timeout);
        before != self.members.len()
    }

    /// Heartbeat plus ownership hand-over for `member`. Returns the set of
    /// partitions it owns afterwards, or `None` if it is not a member.
    pub fn sync(&mut self, member: &str, now: Instant) -> Option<BTreeSet<TopicPartition>> {
        self.members.get_mut(member)?.last_seen = now;
        let target = &self.target;
        self.owned
            .retain(|tp, owner| owner != member || target.get(tp).map(String::as_str) == Some(member));
        for (tp, want) in &self.target {
            if want == member && !self.owned.contains_key(tp) {
                self.owned.insert(tp.clone(), member.to_string());
            }
        }
        Some(
            self.owned
                .iter()
                .filter(|(_, owner)| owner.as_str() == member)
                .map(|(tp, _)| tp.clone())
                .collect(),
        )
    }

    pub fn topics(&self) -> BTreeSet<String> {
        self.members.values().flat_map(|m| m.topics.iter().cloned()).collect()
    }
}
