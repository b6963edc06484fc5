//! Cross-document consistency checking.
//!
//! Claims are grouped by exact normalized key. A group whose claims carry two
//! or more distinct values is a conflict; a resolution policy may pick one of
//! them, but ties are always left flagged.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::extract::Claim;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    #[default]
    FlagOnly,
    Majority,
    Recency,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::FlagOnly, Policy::Majority, Policy::Recency];

    pub fn name(self) -> &'static str {
        match self {
            Policy::FlagOnly => "flag_only",
            Policy::Majority => "majority",
            Policy::Recency => "recency",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupStatus {
    Consistent,
    Conflicting,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub chosen_value: String,
    pub policy: Policy,
    /// Sorted ids of the documents asserting `chosen_value`.
    pub winning_doc_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimGroup {
    pub key: String,
    /// Deduplicated claims sorted by (doc_id, span, value, claim_id).
    pub claims: Vec<Claim>,
    /// Distinct values in first-seen order over `claims`.
    pub distinct_values: Vec<String>,
    pub status: GroupStatus,
    /// Distinct documents agreeing on the most widely held value.
    pub support: usize,
    pub resolution: Option<Resolution>,
    /// Why a requested resolution was not applied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl ClaimGroup {
    pub fn max_relevance(&self) -> f64 {
        self.claims
            .iter()
            .map(|c| c.query_relevance)
            .fold(0.0, f64::max)
    }

    /// Sorted distinct document ids asserting `value`.
    pub fn docs_for(&self, value: &str) -> Vec<String> {
        let ids: BTreeSet<&str> = self
            .claims
            .iter()
            .filter(|c| c.value == value)
            .map(|c| c.doc_id.as_str())
            .collect();
        ids.into_iter().map(str::to_string).collect()
    }

    /// Sorted distinct document ids in the group.
    pub fn doc_ids(&self) -> Vec<String> {
        let ids: BTreeSet<&str> = self.claims.iter().map(|c| c.doc_id.as_str()).collect();
        ids.into_iter().map(str::to_string).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub consistent_groups: Vec<ClaimGroup>,
    pub conflict_groups: Vec<ClaimGroup>,
    pub dropped_duplicates: usize,
}

impl ConsistencyReport {
    pub fn groups(&self) -> impl Iterator<Item = &ClaimGroup> {
        self.consistent_groups.iter().chain(&self.conflict_groups)
    }

    pub fn claim_count(&self) -> usize {
        self.groups().map(|g| g.claims.len()).sum()
    }
}

fn canonical_order(a: &Claim, b: &Claim) -> std::cmp::Ordering {
    a.doc_id
        .cmp(&b.doc_id)
        .then_with(|| a.raw_span.cmp(&b.raw_span))
        .then_with(|| a.value.cmp(&b.value))
        .then_with(|| a.claim_id.cmp(&b.claim_id))
        .then_with(|| a.query_relevance.total_cmp(&b.query_relevance))
}

/// Groups claims by key, classifies each group and applies `policy` to
/// conflicts. Output depends only on the multiset of input claims.
pub fn check_resolve(claims: &[Claim], policy: Policy, corpus: &Corpus) -> ConsistencyReport {
    let mut by_key: BTreeMap<&str, Vec<&Claim>> = BTreeMap::new();
    for claim in claims {
        by_key.entry(claim.key.as_str()).or_default().push(claim);
    }
    let mut report = ConsistencyReport::default();
    for (key, mut members) in by_key {
        members.sort_by(|a, b| canonical_order(a, b));
        let before = members.len();
        let mut seen = BTreeSet::new();
        members.retain(|c| seen.insert((c.doc_id.as_str(), c.value.as_str())));
        report.dropped_duplicates += before - members.len();

        let group = build_group(key, members.into_iter().cloned().collect(), policy, corpus);
        match group.status {
            GroupStatus::Consistent => report.consistent_groups.push(group),
            GroupStatus::Conflicting => report.conflict_groups.push(group),
        }
    }
    report
}

fn build_group(key: &str, claims: Vec<Claim>, policy: Policy, corpus: &Corpus) -> ClaimGroup {
    let mut distinct_values: Vec<String> = Vec::new();
    let mut holders: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for c in &claims {
        if !distinct_values.contains(&c.value) {
            distinct_values.push(c.value.clone());
        }
        holders.entry(&c.value).or_default().insert(&c.doc_id);
    }
    let support = holders.values().map(BTreeSet::len).max().unwrap_or(0);
    let status = if distinct_values.len() >= 2 {
        GroupStatus::Conflicting
    } else {
        GroupStatus::Consistent
    };

    let mut note = None;
    let chosen: Option<String> = match (status, policy) {
        (GroupStatus::Consistent, _) | (_, Policy::FlagOnly) => None,
        (_, Policy::Majority) => {
            let leaders: Vec<&str> = holders
                .iter()
                .filter(|(_, docs)| docs.len() == support)
                .map(|(v, _)| *v)
                .collect();
            if leaders.len() == 1 {
                Some(leaders[0].to_string())
            } else {
                note = Some("majority tie".to_string());
                None
            }
        }
        (_, Policy::Recency) => {
            let stamps: Option<Vec<_>> = claims
                .iter()
                .map(|c| corpus.get(&c.doc_id).and_then(|d| d.timestamp).map(|t| (t, c)))
                .collect();
            match stamps {
                None => {
                    note = Some("recency needs timestamps on every document; left flagged".to_string());
                    None
                }
                Some(stamps) => {
                    let newest = stamps.iter().map(|(t, _)| *t).max();
                    let newest_values: BTreeSet<&str> = stamps
                        .iter()
                        .filter(|(t, _)| Some(*t) == newest)
                        .map(|(_, c)| c.value.as_str())
                        .collect();
                    if newest_values.len() == 1 {
                        newest_values.into_iter().next().map(str::to_string)
                    } else {
                        note = Some("recency tie".to_string());
                        None
                    }
                }
            }
        }
    };
    let resolution = chosen.map(|value| Resolution {
        winning_doc_ids: holders[value.as_str()].iter().map(|d| d.to_string()).collect(),
        chosen_value: value,
        policy,
    });
    ClaimGroup {
        key: key.to_string(),
        claims,
        distinct_values,
        status,
        support,
        resolution,
        note,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictSummary {
    pub key: String,
    pub values: Vec<String>,
    pub doc_ids: Vec<String>,
}

/// One entry per conflicting group, resolved or not.
pub fn conflict_summary(report: &ConsistencyReport) -> Vec<ConflictSummary> {
    report
        .conflict_groups
        .iter()
        .map(|g| ConflictSummary {
            key: g.key.clone(),
            values: g.distinct_values.clone(),
            doc_ids: g.doc_ids(),
        })
        .collect()
}
