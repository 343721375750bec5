//! Implicit-feedback data: ingestion, the uniform train/validation/test split,
//! per-user binary training vectors, and mainstream scores with quintile
//! subgroups.

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Deduplicated (user, item) feedback with dense 0-based indices.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionSet {
    n_users: usize,
    n_items: usize,
    pairs: Vec<(usize, usize)>,
    user_ids: Vec<String>,
    item_ids: Vec<String>,
}

impl InteractionSet {
    /// Builds a set from raw id pairs, assigning indices in first-seen order
    /// and dropping duplicates.
    pub fn from_raw_pairs<U, I>(raw: impl IntoIterator<Item = (U, I)>) -> Result<Self>
    where
        U: AsRef<str>,
        I: AsRef<str>,
    {
        let mut users = Vocab::default();
        let mut items = Vocab::default();
        let mut seen = std::collections::HashSet::new();
        let mut pairs = Vec::new();
        for (u, i) in raw {
            let u = users.intern(u.as_ref());
            let i = items.intern(i.as_ref());
            if seen.insert((u, i)) {
                pairs.push((u, i));
            }
        }
        if pairs.is_empty() {
            return Err(Error::EmptyDataset("no interactions".into()));
        }
        Ok(Self {
            n_users: users.ids.len(),
            n_items: items.ids.len(),
            pairs,
            user_ids: users.ids,
            item_ids: items.ids,
        })
    }

    /// Builds a set from already-indexed pairs, checking every invariant.
    pub fn from_indexed(
        user_ids: Vec<String>,
        item_ids: Vec<String>,
        pairs: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let (n_users, n_items) = (user_ids.len(), item_ids.len());
        if pairs.is_empty() {
            return Err(Error::EmptyDataset("no interactions".into()));
        }
        let mut seen = std::collections::HashSet::with_capacity(pairs.len());
        let mut user_seen = vec![false; n_users];
        let mut item_seen = vec![false; n_items];
        for &(u, i) in &pairs {
            if u >= n_users || i >= n_items {
                return Err(Error::Dimension(format!(
                    "pair ({u}, {i}) outside {n_users} users x {n_items} items"
                )));
            }
            if !seen.insert((u, i)) {
                return Err(Error::Config(format!("duplicate pair ({u}, {i})")));
            }
            user_seen[u] = true;
            item_seen[i] = true;
        }
        if let Some(u) = user_seen.iter().position(|s| !s) {
            return Err(Error::Config(format!("user index {u} has no interactions")));
        }
        if let Some(i) = item_seen.iter().position(|s| !s) {
            return Err(Error::Config(format!("item index {i} has no interactions")));
        }
        Ok(Self {
            n_users,
            n_items,
            pairs,
            user_ids,
            item_ids,
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn density(&self) -> f64 {
        self.pairs.len() as f64 / (self.n_users as f64 * self.n_items as f64)
    }

    /// Keeps only users with at least `min` interactions, then re-indexes.
    /// Items left without interactions are dropped as well.
    pub fn filter_min_interactions(&self, min: usize) -> Result<Self> {
        let mut counts = vec![0usize; self.n_users];
        for &(u, _) in &self.pairs {
            counts[u] += 1;
        }
        let kept = self
            .pairs
            .iter()
            .filter(|(u, _)| counts[*u] >= min)
            .map(|&(u, i)| (self.user_ids[u].as_str(), self.item_ids[i].as_str()));
        Self::from_raw_pairs(kept)
            .map_err(|_| Error::EmptyDataset(format!("no user has at least {min} interactions")))
    }
}

#[derive(Default)]
struct Vocab {
    index: HashMap<String, usize>,
    ids: Vec<String>,
}

impl Vocab {
    fn intern(&mut self, raw: &str) -> usize {
        if let Some(&i) = self.index.get(raw) {
            return i;
        }
        let i = self.ids.len();
        self.index.insert(raw.to_owned(), i);
        self.ids.push(raw.to_owned());
        i
    }
}

fn split_fields(line: &str) -> Vec<&str> {
    if line.contains('\t') {
        line.split('\t').collect()
    } else if line.contains("::") {
        line.split("::").collect()
    } else {
        line.split(',').collect()
    }
}

/// Reads `user<SEP>item[<SEP>rating[<SEP>timestamp]]` lines, where `SEP` is a
/// tab, a comma, or `::`. Blank lines and lines starting with `#` are skipped.
///
/// When `rating_threshold` is given, rows carrying a rating below it are not
/// positive feedback and are dropped.
pub fn load_interactions(path: &Path, rating_threshold: Option<f64>) -> Result<InteractionSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(&text, rating_threshold, path)
}

pub fn parse_interactions(
    text: &str,
    rating_threshold: Option<f64>,
    origin: &Path,
) -> Result<InteractionSet> {
    let mut raw: Vec<(&str, &str)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let fields = split_fields(line);
        if fields.len() < 2 || fields.len() > 4 {
            return Err(parse_err(format!(
                "expected 2 to 4 fields, found {}",
                fields.len()
            )));
        }
        let (user, item) = (fields[0].trim(), fields[1].trim());
        if user.is_empty() || item.is_empty() {
            return Err(parse_err("empty user or item id".into()));
        }
        if let Some(rating) = fields.get(2) {
            let rating: f64 = rating
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("rating `{}` is not a number", rating.trim())))?;
            if rating_threshold.is_some_and(|t| rating < t) {
                continue;
            }
        }
        raw.push((user, item));
    }
    if raw.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{} yields no positive interactions",
            origin.display()
        )));
    }
    InteractionSet::from_raw_pairs(raw)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Fold {
    Train,
    Val,
    Test,
}

impl Fold {
    pub fn as_str(self) -> &'static str {
        match self {
            Fold::Train => "train",
            Fold::Val => "val",
            Fold::Test => "test",
        }
    }
}

impl FromStr for Fold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Fold::Train),
            "val" => Ok(Fold::Val),
            "test" => Ok(Fold::Test),
            other => Err(Error::Config(format!("unknown fold `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::Config(format!(
                "split ratios must be positive: {all:?}"
            )));
        }
        let sum: f64 = all.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Fold sizes for `n` interactions: cut points at the rounded cumulative
    /// proportions.
    pub fn fold_sizes(&self, n: usize) -> (usize, usize, usize) {
        let train_end = (n as f64 * self.train).round() as usize;
        let val_end = ((n as f64 * (self.train + self.val)).round() as usize).max(train_end);
        let val_end = val_end.min(n);
        (train_end, val_end - train_end, n - val_end)
    }
}

/// Per-user item sets for the three folds. Item lists are sorted ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    n_users: usize,
    n_items: usize,
    train: Vec<Vec<usize>>,
    val: Vec<Vec<usize>>,
    test: Vec<Vec<usize>>,
    seed: u64,
}

/// Assigns every interaction to one fold by cutting a seeded random
/// permutation of all pairs at the proportional boundaries.
pub fn split(data: &InteractionSet, ratios: SplitRatios, seed: u64) -> Result<SplitDataset> {
    ratios.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset("cannot split an empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng::split_stream(seed));
    let (n_train, n_val, _) = ratios.fold_sizes(order.len());
    let assignments = order.iter().enumerate().map(|(pos, &pair)| {
        let fold = if pos < n_train {
            Fold::Train
        } else if pos < n_train + n_val {
            Fold::Val
        } else {
            Fold::Test
        };
        let (u, i) = data.pairs()[pair];
        (u, i, fold)
    });
    SplitDataset::from_assignments(data.n_users(), data.n_items(), seed, assignments)
}

impl SplitDataset {
    pub fn from_assignments(
        n_users: usize,
        n_items: usize,
        seed: u64,
        assignments: impl IntoIterator<Item = (usize, usize, Fold)>,
    ) -> Result<Self> {
        let mut train = vec![Vec::new(); n_users];
        let mut val = vec![Vec::new(); n_users];
        let mut test = vec![Vec::new(); n_users];
        for (u, i, fold) in assignments {
            if u >= n_users || i >= n_items {
                return Err(Error::Dimension(format!(
                    "assignment ({u}, {i}) outside {n_users} users x {n_items} items"
                )));
            }
            match fold {
                Fold::Train => train[u].push(i),
                Fold::Val => val[u].push(i),
                Fold::Test => test[u].push(i),
            }
        }
        for sets in [&mut train, &mut val, &mut test] {
            sets.iter_mut().for_each(|s| s.sort_unstable());
        }
        Ok(Self {
            n_users,
            n_items,
            train,
            val,
            test,
            seed,
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn train_items(&self, u: usize) -> &[usize] {
        &self.train[u]
    }

    pub fn val_items(&self, u: usize) -> &[usize] {
        &self.val[u]
    }

    pub fn test_items(&self, u: usize) -> &[usize] {
        &self.test[u]
    }

    pub fn items(&self, u: usize, fold: Fold) -> &[usize] {
        match fold {
            Fold::Train => &self.train[u],
            Fold::Val => &self.val[u],
            Fold::Test => &self.test[u],
        }
    }

    /// The binary training vector `O_u`.
    pub fn train_vector(&self, u: usize) -> Vec<bool> {
        let mut v = vec![false; self.n_items];
        for &i in &self.train[u] {
            v[i] = true;
        }
        v
    }

    /// Users whose train fold came out empty. They stay in the dataset but
    /// are skipped by gradient batches.
    pub fn empty_train_users(&self) -> Vec<usize> {
        (0..self.n_users)
            .filter(|&u| self.train[u].is_empty())
            .collect()
    }

    pub fn trainable_users(&self) -> Vec<usize> {
        (0..self.n_users)
            .filter(|&u| !self.train[u].is_empty())
            .collect()
    }

    /// Total number of interactions in each fold.
    pub fn fold_counts(&self) -> (usize, usize, usize) {
        let count = |s: &Vec<Vec<usize>>| s.iter().map(Vec::len).sum();
        (count(&self.train), count(&self.val), count(&self.test))
    }

    /// Every (user, item, fold) triple, ordered by user then item.
    pub fn assignments(&self) -> Vec<(usize, usize, Fold)> {
        let mut out = Vec::new();
        for u in 0..self.n_users {
            let mut row: Vec<(usize, Fold)> = self.train[u]
                .iter()
                .map(|&i| (i, Fold::Train))
                .chain(self.val[u].iter().map(|&i| (i, Fold::Val)))
                .chain(self.test[u].iter().map(|&i| (i, Fold::Test)))
                .collect();
            row.sort_unstable_by_key(|&(i, _)| i);
            out.extend(row.into_iter().map(|(i, f)| (u, i, f)));
        }
        out
    }
}

/// `|a ∩ b| / |a ∪ b|` over binary vectors; 0 when both are empty.
pub fn jaccard(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "jaccard over vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subgroup {
    Low,
    MedLow,
    Medium,
    MedHigh,
    High,
}

impl Subgroup {
    pub const ALL: [Subgroup; 5] = [
        Subgroup::Low,
        Subgroup::MedLow,
        Subgroup::Medium,
        Subgroup::MedHigh,
        Subgroup::High,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Subgroup::Low => "low",
            Subgroup::MedLow => "med-low",
            Subgroup::Medium => "medium",
            Subgroup::MedHigh => "med-high",
            Subgroup::High => "high",
        }
    }

    /// Column heading used in report tables.
    pub fn short(self) -> &'static str {
        match self {
            Subgroup::Low => "L",
            Subgroup::MedLow => "ML",
            Subgroup::Medium => "M",
            Subgroup::MedHigh => "MH",
            Subgroup::High => "H",
        }
    }
}

impl fmt::Display for Subgroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Subgroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Subgroup::ALL
            .into_iter()
            .find(|g| g.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown subgroup `{s}`")))
    }
}

/// Per-user mainstream scores and their equal-size quintile labels.
#[derive(Clone, Debug, PartialEq)]
pub struct MainstreamProfile {
    scores: Vec<f64>,
    subgroup: Vec<Subgroup>,
    /// Users sorted by score, ties by ascending index.
    order: Vec<usize>,
    /// Ranges into `order`, one per subgroup.
    boundaries: [Range<usize>; 5],
}

impl MainstreamProfile {
    /// Sorts users by score (stable on index) and cuts the order into five
    /// groups whose sizes differ by at most one; the `N mod 5` extra users go
    /// to the lowest groups.
    pub fn from_scores(scores: Vec<f64>) -> Result<Self> {
        if let Some(u) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!("mainstream score of user {u}")));
        }
        let n = scores.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        let (base, rem) = (n / 5, n % 5);
        let mut start = 0;
        let boundaries: [Range<usize>; 5] = std::array::from_fn(|g| {
            let len = base + usize::from(g < rem);
            let r = start..start + len;
            start += len;
            r
        });
        let mut subgroup = vec![Subgroup::Low; n];
        for (g, range) in boundaries.iter().enumerate() {
            for &u in &order[range.clone()] {
                subgroup[u] = Subgroup::ALL[g];
            }
        }
        Ok(Self {
            scores,
            subgroup,
            order,
            boundaries,
        })
    }

    pub fn n_users(&self) -> usize {
        self.scores.len()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn score(&self, u: usize) -> f64 {
        self.scores[u]
    }

    pub fn subgroup(&self, u: usize) -> Subgroup {
        self.subgroup[u]
    }

    pub fn subgroups(&self) -> &[Subgroup] {
        &self.subgroup
    }

    pub fn sorted_users(&self) -> &[usize] {
        &self.order
    }

    pub fn group_boundaries(&self) -> &[Range<usize>; 5] {
        &self.boundaries
    }

    pub fn members(&self, g: Subgroup) -> &[usize] {
        &self.order[self.boundaries[g.index()].clone()]
    }
}

/// Mean Jaccard similarity of each user's training vector to every other
/// user's, followed by quintile grouping.
pub fn mainstream_scores(split: &SplitDataset) -> Result<MainstreamProfile> {
    let n = split.n_users();
    if n < 2 {
        return Err(Error::UndefinedScore(format!(
            "need at least 2 users, dataset has {n}"
        )));
    }
    let mut item_users: Vec<Vec<usize>> = vec![Vec::new(); split.n_items()];
    for u in 0..n {
        for &i in split.train_items(u) {
            item_users[i].push(u);
        }
    }
    let sizes: Vec<usize> = (0..n).map(|u| split.train_items(u).len()).collect();
    let denom = (n - 1) as f64;
    let scores: Vec<f64> = (0..n)
        .into_par_iter()
        .map_init(
            || vec![0usize; n],
            |inter, u| {
                inter.iter_mut().for_each(|c| *c = 0);
                for &i in split.train_items(u) {
                    for &v in &item_users[i] {
                        inter[v] += 1;
                    }
                }
                let mut total = 0.0;
                for v in (0..n).filter(|&v| v != u) {
                    let union = sizes[u] + sizes[v] - inter[v];
                    if union > 0 {
                        total += inter[v] as f64 / union as f64;
                    }
                }
                total / denom
            },
        )
        .collect();
    MainstreamProfile::from_scores(scores)
}
