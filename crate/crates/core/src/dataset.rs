//! Rating data: loading, degree filtering, and train/test splitting.
//!
//! Raw user and item identifiers are remapped to dense 0-based indices at
//! load time (ascending raw id order). Subsets produced by [`split`] and the
//! `without`/`with_replaced` helpers keep the index space of their parent, so
//! embeddings trained on one partition line up with every other partition.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// One observed rating.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    pub rating: f64,
}

impl Interaction {
    pub fn new(user: u32, item: u32, rating: f64) -> Self {
        Interaction { user, item, rating }
    }

    pub fn key(&self) -> (u32, u32) {
        (self.user, self.item)
    }
}

/// Raw identifiers of the dense indices, kept for report output.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdMap {
    pub users: Vec<u64>,
    pub items: Vec<u64>,
}

/// An indexed collection of interactions with no duplicate (user, item) pair.
#[derive(Debug, Clone)]
pub struct InteractionSet {
    interactions: Vec<Interaction>,
    num_users: usize,
    num_items: usize,
    by_user: Vec<Vec<usize>>,
    by_item: Vec<Vec<usize>>,
    ids: Option<Arc<IdMap>>,
}

impl PartialEq for InteractionSet {
    fn eq(&self, other: &Self) -> bool {
        self.num_users == other.num_users
            && self.num_items == other.num_items
            && self.interactions == other.interactions
    }
}

impl InteractionSet {
    /// Validate and index `interactions`.
    pub fn new(interactions: Vec<Interaction>, num_users: usize, num_items: usize) -> Result<Self> {
        let mut by_user = vec![Vec::new(); num_users];
        let mut by_item = vec![Vec::new(); num_items];
        let mut seen = HashSet::with_capacity(interactions.len());
        for (pos, z) in interactions.iter().enumerate() {
            if z.user as usize >= num_users || z.item as usize >= num_items {
                return Err(Error::InvalidData(format!(
                    "interaction ({}, {}) outside {num_users} users x {num_items} items",
                    z.user, z.item
                )));
            }
            if !z.rating.is_finite() {
                return Err(Error::InvalidData(format!(
                    "non-finite rating for ({}, {})",
                    z.user, z.item
                )));
            }
            if !seen.insert(z.key()) {
                return Err(Error::InvalidData(format!(
                    "duplicate pair ({}, {})",
                    z.user, z.item
                )));
            }
            by_user[z.user as usize].push(pos);
            by_item[z.item as usize].push(pos);
        }
        Ok(InteractionSet {
            interactions,
            num_users,
            num_items,
            by_user,
            by_item,
            ids: None,
        })
    }

    pub fn empty(num_users: usize, num_items: usize) -> Self {
        InteractionSet {
            interactions: Vec::new(),
            num_users,
            num_items,
            by_user: vec![Vec::new(); num_users],
            by_item: vec![Vec::new(); num_items],
            ids: None,
        }
    }

    pub fn with_ids(mut self, ids: Option<Arc<IdMap>>) -> Self {
        self.ids = ids;
        self
    }

    pub fn ids(&self) -> Option<&Arc<IdMap>> {
        self.ids.as_ref()
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn user_positions(&self, user: u32) -> &[usize] {
        &self.by_user[user as usize]
    }

    pub fn item_positions(&self, item: u32) -> &[usize] {
        &self.by_item[item as usize]
    }

    pub fn user_interactions(&self, user: u32) -> impl Iterator<Item = &Interaction> + '_ {
        self.by_user[user as usize]
            .iter()
            .map(move |&p| &self.interactions[p])
    }

    pub fn item_interactions(&self, item: u32) -> impl Iterator<Item = &Interaction> + '_ {
        self.by_item[item as usize]
            .iter()
            .map(move |&p| &self.interactions[p])
    }

    pub fn user_degree(&self, user: u32) -> usize {
        self.by_user[user as usize].len()
    }

    pub fn item_degree(&self, item: u32) -> usize {
        self.by_item[item as usize].len()
    }

    /// Users with at least one interaction, ascending.
    pub fn active_users(&self) -> Vec<u32> {
        (0..self.num_users as u32)
            .filter(|&u| !self.by_user[u as usize].is_empty())
            .collect()
    }

    pub fn contains(&self, user: u32, item: u32) -> bool {
        self.by_user
            .get(user as usize)
            .is_some_and(|ps| ps.iter().any(|&p| self.interactions[p].item == item))
    }

    pub fn mean_rating(&self) -> Option<f64> {
        if self.is_empty() {
            None
        } else {
            Some(self.interactions.iter().map(|z| z.rating).sum::<f64>() / self.len() as f64)
        }
    }

    /// Fraction of the user x item matrix that is unobserved.
    pub fn sparsity(&self) -> f64 {
        let cells = self.num_users as f64 * self.num_items as f64;
        if cells == 0.0 {
            return 1.0;
        }
        1.0 - self.len() as f64 / cells
    }

    /// Same index space, keeping the interactions for which `keep` holds.
    pub fn filtered(&self, mut keep: impl FnMut(&Interaction) -> bool) -> Self {
        let kept: Vec<Interaction> = self.interactions.iter().copied().filter(|z| keep(z)).collect();
        InteractionSet::new(kept, self.num_users, self.num_items)
            .expect("subset of a valid set is valid")
            .with_ids(self.ids.clone())
    }

    /// The set with every (user, item) pair of `removed` taken out.
    pub fn without(&self, removed: &[Interaction]) -> Self {
        let keys: HashSet<(u32, u32)> = removed.iter().map(Interaction::key).collect();
        self.filtered(|z| !keys.contains(&z.key()))
    }

    /// The set with the ratings of matching pairs overwritten and unmatched
    /// replacements appended.
    pub fn with_replaced(&self, replacements: &[Interaction]) -> Result<Self> {
        let mut by_key: HashMap<(u32, u32), f64> =
            replacements.iter().map(|z| (z.key(), z.rating)).collect();
        let mut out: Vec<Interaction> = self
            .interactions
            .iter()
            .map(|z| match by_key.remove(&z.key()) {
                Some(r) => Interaction::new(z.user, z.item, r),
                None => *z,
            })
            .collect();
        out.extend(
            replacements
                .iter()
                .filter(|z| by_key.contains_key(&z.key()))
                .copied(),
        );
        Ok(InteractionSet::new(out, self.num_users, self.num_items)?.with_ids(self.ids.clone()))
    }

    /// Every interaction of `other` is present in `self` (same pair and rating).
    pub fn covers(&self, points: &[Interaction]) -> bool {
        points.iter().all(|z| {
            self.user_interactions(z.user)
                .any(|w| w.item == z.item && w.rating == z.rating)
        })
    }

    /// Write the canonical CSV dump: a comment header with the index space,
    /// then `user,item,rating` rows sorted by (user, item).
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut rows = self.interactions.clone();
        rows.sort_by_key(Interaction::key);
        let mut out = String::with_capacity(rows.len() * 16);
        out.push_str(&format!(
            "# recunlearn-interactions v1 users={} items={}\nuser,item,rating\n",
            self.num_users, self.num_items
        ));
        for z in rows {
            out.push_str(&format!("{},{},{}\n", z.user, z.item, z.rating));
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Read a file produced by [`InteractionSet::write_csv`].
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let malformed = |line: usize, reason: &str| Error::MalformedLine {
            path: path.to_path_buf(),
            line,
            reason: reason.to_string(),
        };
        let mut lines = BufReader::new(file).lines().enumerate();
        let (num_users, num_items) = match lines.next() {
            Some((_, Ok(header))) => parse_csv_header(&header).ok_or_else(|| malformed(1, "missing index-space header"))?,
            Some((_, Err(e))) => return Err(Error::io(path, e)),
            None => return Err(malformed(1, "empty file")),
        };
        let mut interactions = Vec::new();
        for (idx, line) in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            let lineno = idx + 1;
            if line.trim().is_empty() || line.starts_with("user,") {
                continue;
            }
            let mut fields = line.split(',');
            let mut next = |name: &str| {
                fields
                    .next()
                    .map(str::trim)
                    .ok_or_else(|| malformed(lineno, &format!("missing {name}")))
            };
            let user = next("user")?.parse::<u32>().map_err(|_| malformed(lineno, "user is not an index"))?;
            let item = next("item")?.parse::<u32>().map_err(|_| malformed(lineno, "item is not an index"))?;
            let rating = next("rating")?.parse::<f64>().map_err(|_| malformed(lineno, "rating is not a number"))?;
            interactions.push(Interaction::new(user, item, rating));
        }
        InteractionSet::new(interactions, num_users, num_items)
    }
}

fn parse_csv_header(line: &str) -> Option<(usize, usize)> {
    let rest = line.strip_prefix("# recunlearn-interactions v1")?;
    let mut users = None;
    let mut items = None;
    for tok in rest.split_whitespace() {
        if let Some(v) = tok.strip_prefix("users=") {
            users = v.parse().ok();
        } else if let Some(v) = tok.strip_prefix("items=") {
            items = v.parse().ok();
        }
    }
    Some((users?, items?))
}

/// Result of [`load_movielens`].
#[derive(Debug, Clone)]
pub struct Loaded {
    pub data: InteractionSet,
    /// Number of (user, item) pairs that appeared more than once; the last
    /// occurrence wins.
    pub duplicates: usize,
}

/// Load delimiter-separated `user<sep>item<sep>rating[<sep>...]` lines.
///
/// Raw ids must be non-negative integers; they are remapped to dense indices
/// in ascending raw-id order. Extra fields (timestamps) are ignored. A first
/// line whose user field is not numeric is taken as a column header.
pub fn load_movielens(path: impl AsRef<Path>, separator: &str) -> Result<Loaded> {
    let path = path.as_ref();
    if separator.is_empty() {
        return Err(Error::Config("empty separator".into()));
    }
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let malformed = |line: usize, reason: String| Error::MalformedLine {
        path: path.to_path_buf(),
        line,
        reason,
    };

    // (raw user, raw item) -> (rating, order of last occurrence)
    let mut cells: HashMap<(u64, u64), (f64, usize)> = HashMap::new();
    let mut duplicates = 0;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(separator).map(str::trim).collect();
        if idx == 0 && fields[0].parse::<u64>().is_err() {
            continue;
        }
        if fields.len() < 3 {
            return Err(malformed(lineno, format!("expected at least 3 fields, found {}", fields.len())));
        }
        let user = fields[0]
            .parse::<u64>()
            .map_err(|_| malformed(lineno, format!("user id {:?} is not an integer", fields[0])))?;
        let item = fields[1]
            .parse::<u64>()
            .map_err(|_| malformed(lineno, format!("item id {:?} is not an integer", fields[1])))?;
        let rating = fields[2]
            .parse::<f64>()
            .ok()
            .filter(|r| r.is_finite())
            .ok_or_else(|| malformed(lineno, format!("rating {:?} is not a finite number", fields[2])))?;
        if cells.insert((user, item), (rating, idx)).is_some() {
            duplicates += 1;
        }
    }
    if duplicates > 0 {
        log::warn!("{}: {duplicates} duplicate (user, item) pairs, kept the last occurrence", path.display());
    }

    let users: Vec<u64> = cells.keys().map(|k| k.0).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let items: Vec<u64> = cells.keys().map(|k| k.1).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let user_index: HashMap<u64, u32> = users.iter().enumerate().map(|(i, &u)| (u, i as u32)).collect();
    let item_index: HashMap<u64, u32> = items.iter().enumerate().map(|(i, &v)| (v, i as u32)).collect();

    let mut ordered: Vec<((u64, u64), (f64, usize))> = cells.into_iter().collect();
    ordered.sort_by_key(|(_, (_, order))| *order);
    let interactions = ordered
        .into_iter()
        .map(|((u, i), (r, _))| Interaction::new(user_index[&u], item_index[&i], r))
        .collect();
    let data = InteractionSet::new(interactions, users.len(), items.len())?
        .with_ids(Some(Arc::new(IdMap { users, items })));
    Ok(Loaded { data, duplicates })
}

/// Iteratively drop users and items with fewer than `k` interactions until
/// every remaining user and item has at least `k`, then re-compact indices.
pub fn filter_min_interactions(data: &InteractionSet, k: usize) -> Result<InteractionSet> {
    if k == 0 {
        return Err(Error::Config("minimum interaction threshold must be >= 1".into()));
    }
    let mut alive = vec![true; data.len()];
    loop {
        let mut user_deg = vec![0usize; data.num_users()];
        let mut item_deg = vec![0usize; data.num_items()];
        for (z, _) in data.interactions().iter().zip(&alive).filter(|(_, &a)| a) {
            user_deg[z.user as usize] += 1;
            item_deg[z.item as usize] += 1;
        }
        let mut changed = false;
        for (z, a) in data.interactions().iter().zip(alive.iter_mut()) {
            if *a && (user_deg[z.user as usize] < k || item_deg[z.item as usize] < k) {
                *a = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let kept: Vec<Interaction> = data
        .interactions()
        .iter()
        .zip(&alive)
        .filter(|(_, &a)| a)
        .map(|(z, _)| *z)
        .collect();
    if kept.is_empty() {
        return Err(Error::TooSparse { k });
    }

    // BTreeMap keeps the compacted order equal to the old index order.
    let user_map: BTreeMap<u32, u32> = kept.iter().map(|z| (z.user, 0)).collect();
    let item_map: BTreeMap<u32, u32> = kept.iter().map(|z| (z.item, 0)).collect();
    let user_map: HashMap<u32, u32> = user_map.keys().enumerate().map(|(i, &u)| (u, i as u32)).collect();
    let item_map: HashMap<u32, u32> = item_map.keys().enumerate().map(|(i, &v)| (v, i as u32)).collect();

    let ids = data.ids().map(|ids| {
        let mut users: Vec<(u32, u64)> = user_map.iter().map(|(&old, &new)| (new, ids.users[old as usize])).collect();
        let mut items: Vec<(u32, u64)> = item_map.iter().map(|(&old, &new)| (new, ids.items[old as usize])).collect();
        users.sort_unstable();
        items.sort_unstable();
        Arc::new(IdMap {
            users: users.into_iter().map(|(_, raw)| raw).collect(),
            items: items.into_iter().map(|(_, raw)| raw).collect(),
        })
    });
    let remapped = kept
        .into_iter()
        .map(|z| Interaction::new(user_map[&z.user], item_map[&z.item], z.rating))
        .collect();
    Ok(InteractionSet::new(remapped, user_map.len(), item_map.len())?.with_ids(ids))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    GlobalRandom,
    PerUserRandom,
}

/// How to partition interactions into train and test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub mode: SplitMode,
    /// Fraction of users whose interactions all go to the test side. These
    /// users are never trained on and act as the non-member population of
    /// the membership-inference attack. Zero disables the holdout.
    pub holdout_user_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.5,
            seed: 0,
            mode: SplitMode::GlobalRandom,
            holdout_user_fraction: 0.0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must lie in (0, 1], got {}",
                self.train_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.holdout_user_fraction) {
            return Err(Error::Config(format!(
                "holdout_user_fraction must lie in [0, 1), got {}",
                self.holdout_user_fraction
            )));
        }
        Ok(())
    }
}

/// Partition `data` into (train, test); both keep the parent's index space.
pub fn split(data: &InteractionSet, spec: &SplitSpec) -> Result<(InteractionSet, InteractionSet)> {
    spec.validate()?;
    let mut rng = seed::rng(spec.seed);

    let mut holdout = vec![false; data.num_users()];
    if spec.holdout_user_fraction > 0.0 {
        let mut users = data.active_users();
        users.shuffle(&mut rng);
        let n = (spec.holdout_user_fraction * users.len() as f64).round() as usize;
        for &u in &users[..n] {
            holdout[u as usize] = true;
        }
    }

    let mut in_train = vec![false; data.len()];
    match spec.mode {
        SplitMode::GlobalRandom => {
            let mut pool: Vec<usize> = (0..data.len())
                .filter(|&p| !holdout[data.interactions()[p].user as usize])
                .collect();
            pool.shuffle(&mut rng);
            let n_train = (spec.train_fraction * pool.len() as f64).round() as usize;
            for &p in &pool[..n_train] {
                in_train[p] = true;
            }
        }
        SplitMode::PerUserRandom => {
            for u in 0..data.num_users() as u32 {
                if holdout[u as usize] || data.user_degree(u) == 0 {
                    continue;
                }
                let mut bucket = data.user_positions(u).to_vec();
                bucket.shuffle(&mut rng);
                let n_train = (spec.train_fraction * bucket.len() as f64).round() as usize;
                if n_train == 0 {
                    return Err(Error::EmptyUserSplit { user: u });
                }
                for &p in &bucket[..n_train] {
                    in_train[p] = true;
                }
            }
        }
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (z, &t) in data.interactions().iter().zip(&in_train) {
        if t {
            train.push(*z);
        } else {
            test.push(*z);
        }
    }
    let ids = data.ids().cloned();
    Ok((
        InteractionSet::new(train, data.num_users(), data.num_items())?.with_ids(ids.clone()),
        InteractionSet::new(test, data.num_users(), data.num_items())?.with_ids(ids),
    ))
}

/// Table-1 style dataset statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub ratings: usize,
    /// Percentage of unobserved cells, e.g. 95.532.
    pub sparsity_percent: f64,
}

impl DatasetStats {
    pub fn of(data: &InteractionSet) -> Self {
        DatasetStats {
            users: data.num_users(),
            items: data.num_items(),
            ratings: data.len(),
            sparsity_percent: 100.0 * data.sparsity(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn set(triples: &[(u32, u32, f64)], users: usize, items: usize) -> InteractionSet {
        InteractionSet::new(
            triples.iter().map(|&(u, i, r)| Interaction::new(u, i, r)).collect(),
            users,
            items,
        )
        .unwrap()
    }

    #[test]
    fn loads_four_line_file() {
        let f = write_tmp("1::10::5\n1::11::3\n2::10::4\n2::12::2\n");
        let loaded = load_movielens(f.path(), "::").unwrap();
        assert_eq!(loaded.data.num_users(), 2);
        assert_eq!(loaded.data.num_items(), 3);
        assert_eq!(loaded.data.len(), 4);
        let ids = loaded.data.ids().unwrap();
        assert_eq!(ids.users, vec![1, 2]);
        assert_eq!(ids.items, vec![10, 11, 12]);
    }

    #[test]
    fn ignores_timestamps_and_handles_tabs() {
        let f = write_tmp("7\t3\t4.5\t978300760\n\n8\t3\t1\t978300761\n");
        let loaded = load_movielens(f.path(), "\t").unwrap();
        assert_eq!(loaded.data.len(), 2);
        assert_eq!(loaded.data.interactions()[0].rating, 4.5);
    }

    #[test]
    fn header_only_skipped_on_first_line() {
        let f = write_tmp("userId,movieId,rating\n1,10,5\n2,10,3\n");
        assert_eq!(load_movielens(f.path(), ",").unwrap().data.len(), 2);
        let f = write_tmp("1,10,5\nuser,item,rating\n");
        assert!(matches!(load_movielens(f.path(), ","), Err(Error::MalformedLine { line: 2, .. })));
    }

    #[test]
    fn malformed_line_names_its_line() {
        let f = write_tmp("1::10::5\n1::abc::5\n");
        let err = load_movielens(f.path(), "::").unwrap_err();
        match err {
            Error::MalformedLine { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn non_numeric_rating_is_rejected() {
        let f = write_tmp("1::10::five\n");
        assert!(matches!(
            load_movielens(f.path(), "::"),
            Err(Error::MalformedLine { line: 1, .. })
        ));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        assert!(matches!(
            load_movielens("/definitely/not/here.dat", "::"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn duplicates_keep_last_occurrence() {
        let f = write_tmp("1::10::5\n1::10::2\n");
        let loaded = load_movielens(f.path(), "::").unwrap();
        assert_eq!(loaded.duplicates, 1);
        assert_eq!(loaded.data.len(), 1);
        assert_eq!(loaded.data.interactions()[0].rating, 2.0);
    }

    #[test]
    fn buckets_partition_the_interactions() {
        let d = set(&[(0, 0, 1.0), (0, 1, 2.0), (1, 1, 3.0), (2, 0, 4.0)], 3, 2);
        let mut seen = vec![0; d.len()];
        for u in 0..3 {
            for &p in d.user_positions(u) {
                seen[p] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        let mut seen = vec![0; d.len()];
        for i in 0..2 {
            for &p in d.item_positions(i) {
                seen[p] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn rejects_duplicates_and_out_of_range() {
        assert!(InteractionSet::new(vec![Interaction::new(0, 0, 1.0); 2], 1, 1).is_err());
        assert!(InteractionSet::new(vec![Interaction::new(1, 0, 1.0)], 1, 1).is_err());
        assert!(InteractionSet::new(vec![Interaction::new(0, 0, f64::NAN)], 1, 1).is_err());
    }

    #[test]
    fn filter_is_identity_when_degrees_suffice() {
        // 5 users x 5 items, complete: every degree is 5.
        let mut t = Vec::new();
        for u in 0..5 {
            for i in 0..5 {
                t.push((u, i, 3.0));
            }
        }
        let d = set(&t, 5, 5);
        let f = filter_min_interactions(&d, 5).unwrap();
        assert_eq!(f, d);
    }

    #[test]
    fn filter_removes_isolated_user_and_item() {
        // Hand-traced toy: users 0 and 1 rate items 0..=3 (8 interactions) and
        // user 0 additionally rates item 4; user 2 rates only item 7.
        // Degrees: user 2 = 1, item 7 = 1, item 4 = 1 -> removed in round one.
        // Round two: users 0 and 1 keep 4 ratings each, items 0..=3 keep 2.
        let mut t: Vec<(u32, u32, f64)> = Vec::new();
        for u in 0..2 {
            for i in 0..4 {
                t.push((u, i, 4.0));
            }
        }
        t.push((0, 4, 5.0));
        t.push((2, 7, 1.0));
        assert_eq!(t.len(), 10);
        let d = set(&t, 3, 8);
        let f = filter_min_interactions(&d, 2).unwrap();
        assert_eq!(f.num_users(), 2);
        assert_eq!(f.num_items(), 4);
        assert_eq!(f.len(), 8);
        for u in 0..f.num_users() as u32 {
            assert!(f.user_degree(u) >= 2);
        }
        for i in 0..f.num_items() as u32 {
            assert!(f.item_degree(i) >= 2);
        }
    }

    #[test]
    fn filter_k1_keeps_everything() {
        let d = set(&[(0, 0, 1.0), (1, 1, 2.0), (2, 0, 3.0)], 3, 2);
        assert_eq!(filter_min_interactions(&d, 1).unwrap(), d);
    }

    #[test]
    fn filter_signals_empty_result() {
        let d = set(&[(0, 0, 1.0)], 1, 1);
        assert!(matches!(filter_min_interactions(&d, 2), Err(Error::TooSparse { k: 2 })));
    }

    #[test]
    fn filter_compacts_raw_ids() {
        let f = write_tmp("1::10::5\n1::11::3\n2::10::4\n2::11::2\n3::99::1\n");
        let loaded = load_movielens(f.path(), "::").unwrap();
        let out = filter_min_interactions(&loaded.data, 2).unwrap();
        let ids = out.ids().unwrap();
        assert_eq!(ids.users, vec![1, 2]);
        assert_eq!(ids.items, vec![10, 11]);
    }

    fn hundred() -> InteractionSet {
        let t: Vec<(u32, u32, f64)> = (0..100).map(|k| (k / 10, k % 10, (k % 5 + 1) as f64)).collect();
        set(&t, 10, 10)
    }

    #[test]
    fn full_fraction_puts_everything_in_train() {
        let d = hundred();
        let spec = SplitSpec { train_fraction: 1.0, ..Default::default() };
        let (tr, te) = split(&d, &spec).unwrap();
        assert_eq!(tr, d);
        assert!(te.is_empty());
    }

    #[test]
    fn half_split_is_a_partition() {
        let d = hundred();
        let (tr, te) = split(&d, &SplitSpec::default()).unwrap();
        assert_eq!(tr.len(), 50);
        assert_eq!(te.len(), 50);
        let a: HashSet<_> = tr.interactions().iter().map(Interaction::key).collect();
        let b: HashSet<_> = te.interactions().iter().map(Interaction::key).collect();
        assert!(a.is_disjoint(&b));
        assert_eq!(a.len() + b.len(), 100);
    }

    #[test]
    fn per_user_split_keeps_train_for_everyone() {
        let d = hundred();
        let spec = SplitSpec { mode: SplitMode::PerUserRandom, ..Default::default() };
        let (tr, te) = split(&d, &spec).unwrap();
        for u in 0..10 {
            assert_eq!(tr.user_degree(u), 5);
            assert_eq!(te.user_degree(u), 5);
        }
    }

    #[test]
    fn per_user_split_signals_starved_user() {
        let d = set(&[(0, 0, 1.0), (0, 1, 1.0), (0, 2, 1.0)], 1, 3);
        let spec = SplitSpec { train_fraction: 0.1, mode: SplitMode::PerUserRandom, ..Default::default() };
        assert!(matches!(split(&d, &spec), Err(Error::EmptyUserSplit { user: 0 })));
    }

    #[test]
    fn split_is_seeded() {
        let t: Vec<(u32, u32, f64)> = (0..1000).map(|k| (k / 40, k % 40, 3.0)).collect();
        let d = set(&t, 25, 40);
        let s1 = SplitSpec { seed: 1, ..Default::default() };
        let s2 = SplitSpec { seed: 2, ..Default::default() };
        assert_eq!(split(&d, &s1).unwrap(), split(&d, &s1).unwrap());
        assert_ne!(split(&d, &s1).unwrap().0, split(&d, &s2).unwrap().0);
    }

    #[test]
    fn holdout_users_land_in_test_only() {
        let d = hundred();
        let spec = SplitSpec { holdout_user_fraction: 0.2, ..Default::default() };
        let (tr, te) = split(&d, &spec).unwrap();
        let held: Vec<u32> = (0..10).filter(|&u| tr.user_degree(u) == 0).collect();
        assert_eq!(held.len(), 2);
        for u in held {
            assert_eq!(te.user_degree(u), 10);
        }
        assert_eq!(tr.len(), 40);
    }

    #[test]
    fn rejects_bad_fraction() {
        let spec = SplitSpec { train_fraction: 0.0, ..Default::default() };
        assert!(split(&hundred(), &spec).is_err());
    }

    #[test]
    fn sparsity_matches_definition() {
        let d = hundred();
        assert_eq!(d.sparsity(), 0.0);
        let s = DatasetStats::of(&set(&[(0, 0, 1.0)], 2, 2));
        assert_eq!(s.sparsity_percent, 75.0);
    }

    #[test]
    fn with_replaced_overwrites_ratings() {
        let d = set(&[(0, 0, 1.0), (0, 1, 2.0)], 1, 2);
        let r = d.with_replaced(&[Interaction::new(0, 1, 4.5)]).unwrap();
        assert_eq!(r.interactions()[1].rating, 4.5);
        assert_eq!(r.len(), 2);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_set() -> impl Strategy<Value = InteractionSet> {
            proptest::collection::btree_map((0u32..8, 0u32..8), 0.5f64..5.0, 1..40).prop_map(|cells| {
                let z = cells.into_iter().map(|((u, i), r)| Interaction::new(u, i, r)).collect();
                InteractionSet::new(z, 8, 8).unwrap()
            })
        }

        proptest! {
            #[test]
            fn csv_round_trip(d in arb_set()) {
                let f = tempfile::NamedTempFile::new().unwrap();
                d.write_csv(f.path()).unwrap();
                let back = InteractionSet::read_csv(f.path()).unwrap();
                let mut a = d.interactions().to_vec();
                a.sort_by_key(Interaction::key);
                prop_assert_eq!(back.interactions(), &a[..]);
                prop_assert_eq!(back.num_users(), 8);
            }

            #[test]
            fn split_partitions(d in arb_set(), seed in any::<u64>(), frac in 0.05f64..1.0) {
                let spec = SplitSpec { train_fraction: frac, seed, ..Default::default() };
                let (tr, te) = split(&d, &spec).unwrap();
                prop_assert_eq!(tr.len() + te.len(), d.len());
                for z in d.interactions() {
                    prop_assert!(tr.contains(z.user, z.item) ^ te.contains(z.user, z.item));
                }
            }

            #[test]
            fn filter_reaches_fixed_point(d in arb_set(), k in 1usize..4) {
                if let Ok(f) = filter_min_interactions(&d, k) {
                    for u in 0..f.num_users() as u32 {
                        prop_assert!(f.user_degree(u) >= k);
                    }
                    for i in 0..f.num_items() as u32 {
                        prop_assert!(f.item_degree(i) >= k);
                    }
                }
            }
        }
    }
}
