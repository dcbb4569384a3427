//! Metadata queries and stratified splitting over manifested datasets.
//!
//! Queries are conjunctions of atoms over [`EpisodeSummary`] fields. They can
//! be built fluently or parsed from the JSON form used on the command line:
//!
//! ```
//! use nebula::episode::Family;
//! use nebula::query::QueryExpr;
//!
//! let q = QueryExpr::all()
//!     .family(Family::Control)
//!     .succeeded(true)
//!     .instruction_contains("red");
//! let parsed = QueryExpr::from_json(
//!     r#"{"family":["Control"],"final_success":1,"instruction_contains":"red"}"#,
//! )
//! .unwrap();
//! assert_eq!(q, parsed);
//! ```

use std::collections::{BTreeMap, BTreeSet};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episode::{Family, Tier};
use crate::rng::{bounded, seeded};
use crate::storage::{EpisodeRef, EpisodeSummary, Manifest};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum QueryError {
    #[error("malformed query: {0}")]
    MalformedQuery(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("train ratio {0} outside [0, 1]")]
    BadRatio(String),
}

/// Conjunction of optional atoms; all `None` matches everything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryExpr {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<BTreeSet<Family>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tier: Option<BTreeSet<Tier>>,
    /// 0 or 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_success: Option<u8>,
    /// Inclusive `[lo, hi]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_count: Option<(u32, u32)>,
    /// Case-insensitive substring.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction_contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_id: Option<BTreeSet<u8>>,
}

impl QueryExpr {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn family(mut self, f: Family) -> Self {
        self.family.get_or_insert_with(BTreeSet::new).insert(f);
        self
    }

    pub fn tier(mut self, t: Tier) -> Self {
        self.tier.get_or_insert_with(BTreeSet::new).insert(t);
        self
    }

    pub fn succeeded(mut self, yes: bool) -> Self {
        self.final_success = Some(yes as u8);
        self
    }

    pub fn steps(mut self, lo: u32, hi: u32) -> Self {
        self.step_count = Some((lo, hi));
        self
    }

    pub fn instruction_contains(mut self, needle: impl Into<String>) -> Self {
        self.instruction_contains = Some(needle.into());
        self
    }

    pub fn template(mut self, id: u8) -> Self {
        self.template_id.get_or_insert_with(BTreeSet::new).insert(id);
        self
    }

    /// Conjunction of two queries as a single expression.
    ///
    /// Returns `None` when it has no single-expression form, which only
    /// happens for two unrelated substring atoms.
    pub fn and(self, other: QueryExpr) -> Option<Self> {
        fn meet<T: Ord + Clone>(
            a: Option<BTreeSet<T>>,
            b: Option<BTreeSet<T>>,
        ) -> Option<BTreeSet<T>> {
            match (a, b) {
                (Some(a), Some(b)) => Some(a.intersection(&b).cloned().collect()),
                (a, b) => a.or(b),
            }
        }
        let mut family = meet(self.family, other.family);
        let final_success = match (self.final_success, other.final_success) {
            (Some(a), Some(b)) if a != b => {
                // Contradiction: an empty family set matches nothing.
                family = Some(BTreeSet::new());
                Some(a)
            }
            (a, b) => a.or(b),
        };
        let step_count = match (self.step_count, other.step_count) {
            (Some((a, b)), Some((c, d))) => {
                let (lo, hi) = (a.max(c), b.min(d));
                if lo > hi {
                    family = Some(BTreeSet::new());
                    Some((lo, lo))
                } else {
                    Some((lo, hi))
                }
            }
            (a, b) => a.or(b),
        };
        let instruction_contains = match (self.instruction_contains, other.instruction_contains) {
            (Some(a), Some(b)) => {
                let (la, lb) = (a.to_lowercase(), b.to_lowercase());
                if la.contains(&lb) {
                    Some(a)
                } else if lb.contains(&la) {
                    Some(b)
                } else {
                    return None;
                }
            }
            (a, b) => a.or(b),
        };
        Some(QueryExpr {
            family,
            tier: meet(self.tier, other.tier),
            final_success,
            step_count,
            instruction_contains,
            template_id: meet(self.template_id, other.template_id),
        })
    }

    pub fn from_json(text: &str) -> Result<Self, QueryError> {
        let q: QueryExpr =
            serde_json::from_str(text).map_err(|e| QueryError::MalformedQuery(e.to_string()))?;
        q.check()?;
        Ok(q)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("query serializes")
    }

    /// Rejects out-of-domain atoms.
    pub fn check(&self) -> Result<(), QueryError> {
        if let Some(b) = self.final_success {
            if b > 1 {
                return Err(QueryError::MalformedQuery(format!(
                    "final_success must be 0 or 1, got {b}"
                )));
            }
        }
        if let Some((lo, hi)) = self.step_count {
            if lo > hi {
                return Err(QueryError::MalformedQuery(format!(
                    "step_count range [{lo}, {hi}] is empty"
                )));
            }
        }
        Ok(())
    }

    pub fn matches(&self, s: &EpisodeSummary) -> bool {
        if let Some(fams) = &self.family {
            if !fams.contains(&s.family) {
                return false;
            }
        }
        if let Some(tiers) = &self.tier {
            if !tiers.contains(&s.tier) {
                return false;
            }
        }
        if let Some(flag) = self.final_success {
            if s.final_success != (flag == 1) {
                return false;
            }
        }
        if let Some((lo, hi)) = self.step_count {
            if s.step_count < lo || s.step_count > hi {
                return false;
            }
        }
        if let Some(needle) = &self.instruction_contains {
            if !s
                .instruction
                .to_lowercase()
                .contains(&needle.to_lowercase())
            {
                return false;
            }
        }
        if let Some(ids) = &self.template_id {
            if !ids.contains(&s.template_id) {
                return false;
            }
        }
        true
    }
}

/// Episodes satisfying every atom, in (shard, index) order.
pub fn filter(dataset: &Manifest, q: &QueryExpr) -> Result<Vec<EpisodeRef>, QueryError> {
    q.check()?;
    Ok(dataset
        .entries()
        .filter(|(_, s)| q.matches(s))
        .map(|(r, _)| r)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrataKey {
    Family,
    FamilyXTier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_ratio: f64,
    pub strata_key: StrataKey,
    pub seed: u64,
    /// Send every Robustness episode to the test side.
    #[serde(default)]
    pub holdout_robustness: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<EpisodeRef>,
    pub test: Vec<EpisodeRef>,
}

/// Stratum label of an episode.
fn stratum(s: &EpisodeSummary, key: StrataKey) -> String {
    match key {
        StrataKey::Family => s.family.as_str().to_string(),
        StrataKey::FamilyXTier => format!("{}/{}", s.family, s.tier),
    }
}

/// Train count for a stratum of `n`: `n * ratio` rounded half up.
pub fn train_count(n: usize, ratio: f64) -> usize {
    ((n as f64 * ratio) + 0.5).floor().min(n as f64) as usize
}

/// Seeded, per-stratum shuffle-and-cut.
///
/// Each stratum gets its own generator derived from the seed and the stratum
/// label, so adding episodes of one family never reshuffles another.
/// Both output lists are sorted in (shard, index) order.
pub fn stratified_split(dataset: &Manifest, spec: &SplitSpec) -> Result<Split, QueryError> {
    if !(0.0..=1.0).contains(&spec.train_ratio) {
        return Err(QueryError::BadRatio(spec.train_ratio.to_string()));
    }
    if dataset.episode_count() == 0 {
        return Err(QueryError::EmptyDataset);
    }
    let mut strata: BTreeMap<String, Vec<EpisodeRef>> = BTreeMap::new();
    let mut split = Split::default();
    for (r, s) in dataset.entries() {
        if spec.holdout_robustness && s.family == Family::Robustness {
            split.test.push(r);
            continue;
        }
        strata.entry(stratum(s, spec.strata_key)).or_default().push(r);
    }
    for (label, mut refs) in strata {
        let mut rng = seeded(spec.seed, &label);
        fisher_yates(&mut refs, &mut rng);
        let k = train_count(refs.len(), spec.train_ratio);
        split.test.extend_from_slice(&refs[k..]);
        refs.truncate(k);
        split.train.extend(refs);
    }
    split.train.sort();
    split.test.sort();
    Ok(split)
}

/// In-place Fisher–Yates with a portable bounded draw.
pub fn fisher_yates<T>(items: &mut [T], rng: &mut impl RngCore) {
    for i in (1..items.len()).rev() {
        let j = bounded(rng, i as u64 + 1) as usize;
        items.swap(i, j);
    }
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    fn grid(per_family: usize) -> Manifest {
        let mut eps = Vec::new();
        for (fi, f) in Family::ALL.iter().enumerate().take(5) {
            for i in 0..per_family {
                let n = fi * per_family + i;
                eps.push(summary(n, *f, Tier::ALL[i % 3], i % 4 == 0, "Pick the cube"));
            }
        }
        let half = eps.len() / 2;
        manifest(&[eps[..half].to_vec(), eps[half..].to_vec()])
    }

    #[test]
    fn match_all_returns_everything() {
        let m = grid(10);
        assert_eq!(filter(&m, &QueryExpr::all()).unwrap().len(), 50);
    }

    #[test]
    fn instruction_substring_is_case_insensitive() {
        let m = manifest(&[vec![
            summary(0, Family::Language, Tier::Easy, true, "Pick the red cube"),
            summary(1, Family::Language, Tier::Easy, true, "Push the ball"),
        ]]);
        let hits = filter(&m, &QueryExpr::all().instruction_contains("RED")).unwrap();
        assert_eq!(hits, vec![EpisodeRef { shard: 0, index: 0 }]);
    }

    #[test]
    fn malformed_queries() {
        assert!(QueryExpr::from_json(r#"{"final_success":2}"#).is_err());
        assert!(QueryExpr::from_json(r#"{"step_count":[9,3]}"#).is_err());
        assert!(QueryExpr::from_json(r#"{"colour":"red"}"#).is_err());
        assert!(QueryExpr::from_json(r#"{"family":["Kitchen"]}"#).is_err());
        let q = QueryExpr::all().steps(5, 1);
        assert!(matches!(
            filter(&grid(2), &q),
            Err(QueryError::MalformedQuery(_))
        ));
    }

    #[test]
    fn json_roundtrip() {
        let q = QueryExpr::all()
            .family(Family::Perception)
            .tier(Tier::Hard)
            .steps(3, 40)
            .template(2);
        assert_eq!(QueryExpr::from_json(&q.to_json()).unwrap(), q);
    }

    #[test]
    fn split_counts_per_family() {
        let m = grid(20);
        let spec = SplitSpec {
            train_ratio: 0.8,
            strata_key: StrataKey::Family,
            seed: 3,
            holdout_robustness: false,
        };
        let split = stratified_split(&m, &spec).unwrap();
        for f in Family::ALL.iter().take(5) {
            let train = split
                .train
                .iter()
                .filter(|r| m.summary(**r).unwrap().family == *f)
                .count();
            let test = split
                .test
                .iter()
                .filter(|r| m.summary(**r).unwrap().family == *f)
                .count();
            assert_eq!((train, test), (16, 4), "{f}");
        }
        assert_eq!(split, stratified_split(&m, &spec).unwrap());
        let other = stratified_split(&m, &SplitSpec { seed: 4, ..spec.clone() }).unwrap();
        assert_ne!(split.train, other.train);
    }

    #[test]
    fn ratio_extremes() {
        let m = grid(5);
        let mut spec = SplitSpec {
            train_ratio: 1.0,
            strata_key: StrataKey::FamilyXTier,
            seed: 0,
            holdout_robustness: false,
        };
        let s = stratified_split(&m, &spec).unwrap();
        assert!(s.test.is_empty());
        spec.train_ratio = 0.0;
        assert!(stratified_split(&m, &spec).unwrap().train.is_empty());
        spec.train_ratio = 1.5;
        assert!(stratified_split(&m, &spec).is_err());
        assert_eq!(
            stratified_split(&manifest(&[]), &SplitSpec { train_ratio: 0.5, ..spec }),
            Err(QueryError::EmptyDataset)
        );
    }

    #[test]
    fn round_half_up() {
        assert_eq!(train_count(5, 0.5), 3);
        assert_eq!(train_count(3, 0.5), 2);
        assert_eq!(train_count(20, 0.8), 16);
        assert_eq!(train_count(1, 0.49), 0);
        assert_eq!(train_count(7, 1.0), 7);
    }

    #[test]
    fn holdout_robustness_goes_to_test() {
        let mut eps = Vec::new();
        for i in 0..30 {
            let f = if i % 3 == 0 { Family::Robustness } else { Family::Control };
            eps.push(summary(i, f, Tier::Easy, true, "x"));
        }
        let m = manifest(&[eps]);
        let spec = SplitSpec {
            train_ratio: 0.9,
            strata_key: StrataKey::Family,
            seed: 1,
            holdout_robustness: true,
        };
        let s = stratified_split(&m, &spec).unwrap();
        assert!(s
            .train
            .iter()
            .all(|r| m.summary(*r).unwrap().family != Family::Robustness));
        assert_eq!(s.train.len() + s.test.len(), 30);
    }
}
