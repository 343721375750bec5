//! Top-K ranking metrics and the per-subgroup bias report.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::corpus::{Fold, MainstreamProfile, SplitDataset, Subgroup};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::DenseMatrix;

/// Users scored per block when evaluating a model.
const SCORE_BLOCK: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankedList {
    pub items: Vec<usize>,
    /// Set when fewer than `K` items were available after masking.
    pub truncated: bool,
}

/// Descending score, ties by ascending item index; NaN sorts last.
fn rank_order<T: Scalar>(scores: &[T], a: usize, b: usize) -> Ordering {
    let (x, y) = (scores[a], scores[b]);
    match (x.is_nan(), y.is_nan()) {
        (true, true) => a.cmp(&b),
        (true, false) => Ordering::Greater,
        (false, true) => Ordering::Less,
        _ => y.partial_cmp(&x).unwrap_or(Ordering::Equal).then(a.cmp(&b)),
    }
}

/// Top-`k` items by score, skipping `exclude`.
pub fn rank_items<T: Scalar>(scores: &[T], exclude: &[usize], k: usize) -> Result<RankedList> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let mut masked = vec![false; scores.len()];
    for &i in exclude {
        if i < masked.len() {
            masked[i] = true;
        }
    }
    let mut candidates: Vec<usize> = (0..scores.len()).filter(|&i| !masked[i]).collect();
    let truncated = candidates.len() < k;
    let take = k.min(candidates.len());
    if take > 0 && take < candidates.len() {
        candidates.select_nth_unstable_by(take - 1, |&a, &b| rank_order(scores, a, b));
        candidates.truncate(take);
    }
    candidates.sort_unstable_by(|&a, &b| rank_order(scores, a, b));
    Ok(RankedList {
        items: candidates,
        truncated,
    })
}

fn discount(rank0: usize) -> f64 {
    1.0 / ((rank0 + 2) as f64).log2()
}

/// Binary-relevance NDCG@K; `None` when `relevant` is empty.
pub fn ndcg_at_k(list: &RankedList, relevant: &[usize], k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let dcg: f64 = list
        .items
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(r, _)| discount(r))
        .sum();
    let idcg: f64 = (0..k.min(relevant.len())).map(discount).sum();
    Some(dcg / idcg)
}

/// `|hits| / min(K, |relevant|)`; `None` when `relevant` is empty.
pub fn recall_at_k(list: &RankedList, relevant: &[usize], k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let hits = list
        .items
        .iter()
        .take(k)
        .filter(|i| relevant.contains(i))
        .count();
    Some(hits as f64 / k.min(relevant.len()) as f64)
}

/// Something that produces item scores for a block of users.
pub trait ScoreSource<T: Scalar>: Sync {
    fn n_items(&self) -> usize;
    fn score_users(&self, users: &[usize]) -> Result<DenseMatrix<T>>;
}

impl<T: Scalar> ScoreSource<T> for DenseMatrix<T> {
    fn n_items(&self) -> usize {
        self.cols()
    }

    fn score_users(&self, users: &[usize]) -> Result<DenseMatrix<T>> {
        Ok(self.select_rows(users))
    }
}

/// Per-user NDCG@K on `fold`. Items from earlier folds are masked: train for
/// validation, train and validation for test.
pub fn per_user_ndcg<T: Scalar>(
    source: &impl ScoreSource<T>,
    split: &SplitDataset,
    fold: Fold,
    k: usize,
) -> Result<Vec<Option<f64>>> {
    if source.n_items() != split.n_items() {
        return Err(Error::Dimension(format!(
            "scorer covers {} items, dataset has {}",
            source.n_items(),
            split.n_items()
        )));
    }
    let users: Vec<usize> = (0..split.n_users()).collect();
    let mut out = Vec::with_capacity(users.len());
    for block in users.chunks(SCORE_BLOCK) {
        let scores = source.score_users(block)?;
        let block_out: Result<Vec<Option<f64>>> = block
            .par_iter()
            .enumerate()
            .map(|(row, &u)| {
                let relevant = split.items(u, fold);
                if relevant.is_empty() {
                    return Ok(None);
                }
                let mut exclude = split.train_items(u).to_vec();
                if fold == Fold::Test {
                    exclude.extend_from_slice(split.val_items(u));
                }
                let list = rank_items(scores.row(row), &exclude, k)?;
                Ok(ndcg_at_k(&list, relevant, k))
            })
            .collect();
        out.extend(block_out?);
    }
    Ok(out)
}

/// Overall and per-subgroup mean NDCG@K.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasReport {
    pub name: String,
    pub k: usize,
    pub overall: Option<f64>,
    pub groups: [Option<f64>; 5],
    /// Users per subgroup; sums to N.
    pub group_users: [usize; 5],
    /// Users per subgroup with a non-empty evaluation fold.
    pub group_evaluable: [usize; 5],
}

impl BiasReport {
    pub fn aggregate(
        name: impl Into<String>,
        k: usize,
        per_user: &[Option<f64>],
        profile: &MainstreamProfile,
    ) -> Result<Self> {
        if per_user.len() != profile.n_users() {
            return Err(Error::Dimension(format!(
                "{} per-user values for a profile of {} users",
                per_user.len(),
                profile.n_users()
            )));
        }
        let mut sums = [0.0; 5];
        let mut group_users = [0usize; 5];
        let mut group_evaluable = [0usize; 5];
        for (u, v) in per_user.iter().enumerate() {
            let g = profile.subgroup(u).index();
            group_users[g] += 1;
            if let Some(v) = v {
                sums[g] += v;
                group_evaluable[g] += 1;
            }
        }
        let groups: [Option<f64>; 5] = std::array::from_fn(|g| {
            (group_evaluable[g] > 0).then(|| sums[g] / group_evaluable[g] as f64)
        });
        let evaluable: usize = group_evaluable.iter().sum();
        let overall = (evaluable > 0).then(|| sums.iter().sum::<f64>() / evaluable as f64);
        Ok(Self {
            name: name.into(),
            k,
            overall,
            groups,
            group_users,
            group_evaluable,
        })
    }

    /// Overall followed by the five subgroups, low to high.
    pub fn columns(&self) -> [Option<f64>; 6] {
        let mut out = [self.overall; 6];
        out[1..].copy_from_slice(&self.groups);
        out
    }

    pub fn group(&self, g: Subgroup) -> Option<f64> {
        self.groups[g.index()]
    }

    /// `100·(self − baseline)/baseline` per column.
    pub fn delta_percent(&self, baseline: &BiasReport) -> [Option<f64>; 6] {
        let (a, b) = (self.columns(), baseline.columns());
        std::array::from_fn(|c| match (a[c], b[c]) {
            (Some(x), Some(y)) if y != 0.0 => Some(100.0 * (x - y) / y),
            _ => None,
        })
    }
}

/// NDCG@K on the test fold, with train and validation items masked.
pub fn bias_report<T: Scalar>(
    name: impl Into<String>,
    source: &impl ScoreSource<T>,
    split: &SplitDataset,
    profile: &MainstreamProfile,
    k: usize,
) -> Result<BiasReport> {
    if profile.n_users() != split.n_users() {
        return Err(Error::Incompatible(format!(
            "profile has {} users, split has {}",
            profile.n_users(),
            split.n_users()
        )));
    }
    let per_user = per_user_ndcg(source, split, Fold::Test, k)?;
    BiasReport::aggregate(name, k, &per_user, profile)
}

pub const REPORT_HEADER: &str = "model,overall,L,ML,M,MH,H";

fn push_cells(out: &mut String, cells: &[Option<f64>], precision: usize) {
    for c in cells {
        out.push(',');
        if let Some(v) = c {
            let _ = write!(out, "{v:.precision$}");
        }
    }
    out.push('\n');
}

/// Renders the report table: one row per model, then one Δ% row per
/// non-baseline model when a baseline is given.
pub fn render_report_csv(reports: &[BiasReport], baseline: Option<&BiasReport>) -> String {
    let mut out = String::new();
    out.push_str(REPORT_HEADER);
    out.push('\n');
    let mut rows: Vec<&BiasReport> = Vec::new();
    if let Some(b) = baseline {
        if !reports.iter().any(|r| r.name == b.name) {
            rows.push(b);
        }
    }
    rows.extend(reports);
    for r in &rows {
        out.push_str(&r.name);
        push_cells(&mut out, &r.columns(), 6);
    }
    if let Some(b) = baseline {
        for r in rows.iter().filter(|r| r.name != b.name) {
            let _ = write!(out, "delta_{}_vs_{}_pct", r.name, b.name);
            push_cells(&mut out, &r.delta_percent(b), 2);
        }
    }
    out
}

pub fn write_report_csv(
    path: &Path,
    reports: &[BiasReport],
    baseline: Option<&BiasReport>,
) -> Result<()> {
    std::fs::write(path, render_report_csv(reports, baseline)).map_err(|e| Error::io(path, e))
}

/// Reads the model rows of a report table; Δ rows are skipped. Counts are not
/// stored in the table and come back as zero.
pub fn read_report_csv(path: &Path, k: usize) -> Result<Vec<BiasReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    match lines.next() {
        Some(h) if h.trim() == REPORT_HEADER => {}
        _ => return Err(Error::format(path, "missing report header row")),
    }
    let mut out = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 7 {
            return Err(Error::format(
                path,
                format!("expected 7 columns in `{line}`"),
            ));
        }
        if cells[0].starts_with("delta_") {
            continue;
        }
        let mut vals = [None; 6];
        for (slot, cell) in vals.iter_mut().zip(&cells[1..]) {
            if !cell.is_empty() {
                *slot = Some(
                    cell.parse::<f64>()
                        .map_err(|_| Error::format(path, format!("`{cell}` is not a number")))?,
                );
            }
        }
        let mut groups = [None; 5];
        groups.copy_from_slice(&vals[1..]);
        out.push(BiasReport {
            name: cells[0].to_string(),
            k,
            overall: vals[0],
            groups,
            group_users: [0; 5],
            group_evaluable: [0; 5],
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sorted_scores_rank_in_order() {
        let list = rank_items(&[5.0, 4.0, 3.0, 2.0, 1.0], &[], 3).unwrap();
        assert_eq!(list.items, vec![0, 1, 2]);
        assert!(!list.truncated);
    }

    #[test]
    fn excluded_best_item_is_skipped() {
        let list = rank_items(&[1.0, 9.0, 5.0], &[1], 2).unwrap();
        assert_eq!(list.items, vec![2, 0]);
    }

    #[test]
    fn ties_break_by_ascending_index() {
        let list = rank_items(&[1.0, 2.0, 2.0, 2.0], &[], 3).unwrap();
        assert_eq!(list.items, vec![1, 2, 3]);
    }

    #[test]
    fn short_list_is_flagged() {
        let list = rank_items(&[1.0, 2.0, 3.0], &[0], 5).unwrap();
        assert_eq!(list.items, vec![2, 1]);
        assert!(list.truncated);
        assert!(rank_items(&[1.0], &[], 0).is_err());
    }

    #[test]
    fn random_scores_match_full_sort() {
        let mut r = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let scores: Vec<f64> = (0..8).map(|_| r.random_range(0..4) as f64).collect();
            let mut full: Vec<usize> = (0..8).collect();
            full.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
            let list = rank_items(&scores, &[], 4).unwrap();
            assert_eq!(list.items, full[..4].to_vec());
        }
    }

    #[test]
    fn ndcg_cases() {
        let list = RankedList {
            items: vec![3, 1, 4],
            truncated: false,
        };
        assert_eq!(ndcg_at_k(&list, &[1, 3, 4, 7], 3), Some(1.0));
        let two = RankedList {
            items: vec![10, 20],
            truncated: false,
        };
        let v = ndcg_at_k(&two, &[20], 2).unwrap();
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((v - 0.6309).abs() < 1e-4);
        assert_eq!(ndcg_at_k(&two, &[99], 2), Some(0.0));
        assert_eq!(ndcg_at_k(&two, &[], 2), None);
    }

    #[test]
    fn recall_cases() {
        let list = RankedList {
            items: (0..20).collect(),
            truncated: false,
        };
        assert_eq!(recall_at_k(&list, &[2, 5], 20), Some(1.0));
        assert_eq!(recall_at_k(&list, &[5, 40, 41, 42], 20), Some(0.25));
        assert_eq!(recall_at_k(&list, &[], 20), None);
    }

    fn profile(n: usize) -> MainstreamProfile {
        MainstreamProfile::from_scores((0..n).map(|u| u as f64).collect()).unwrap()
    }

    #[test]
    fn overall_is_weighted_mean_of_groups() {
        let per_user: Vec<Option<f64>> = (0..23)
            .map(|u| {
                if u % 4 == 0 {
                    None
                } else {
                    Some((u as f64 * 0.37).fract())
                }
            })
            .collect();
        let r = BiasReport::aggregate("m", 20, &per_user, &profile(23)).unwrap();
        assert_eq!(r.group_users.iter().sum::<usize>(), 23);
        let total: usize = r.group_evaluable.iter().sum();
        let weighted: f64 = (0..5)
            .map(|g| r.groups[g].unwrap() * r.group_evaluable[g] as f64)
            .sum::<f64>()
            / total as f64;
        assert!((weighted - r.overall.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn empty_group_is_absent_not_nan() {
        let per_user: Vec<Option<f64>> = (0..10).map(|u| (u >= 2).then_some(0.5)).collect();
        let r = BiasReport::aggregate("m", 20, &per_user, &profile(10)).unwrap();
        assert_eq!(r.groups[0], None);
        assert_eq!(r.groups[1], Some(0.5));
    }

    #[test]
    fn deltas_follow_percent_formula() {
        let mk = |name: &str, v: f64| BiasReport {
            name: name.into(),
            k: 20,
            overall: Some(v),
            groups: [Some(v); 5],
            group_users: [1; 5],
            group_evaluable: [1; 5],
        };
        let d = mk("tall", 0.3456).delta_percent(&mk("multvae", 0.3260));
        assert!((d[0].unwrap() - 100.0 * (0.3456 - 0.3260) / 0.3260).abs() < 1e-12);
        assert!((d[0].unwrap() - 6.01).abs() < 0.01);
    }

    #[test]
    fn report_csv_round_trip_and_delta_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        let base = BiasReport {
            name: "multvae".into(),
            k: 20,
            overall: Some(0.25),
            groups: [Some(0.1), Some(0.2), None, Some(0.3), Some(0.4)],
            group_users: [2; 5],
            group_evaluable: [2, 2, 0, 2, 2],
        };
        let tall = BiasReport {
            name: "tall".into(),
            groups: [Some(0.2); 5],
            ..base.clone()
        };
        write_report_csv(&path, &[tall.clone()], Some(&base)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], REPORT_HEADER);
        assert!(lines[1].starts_with("multvae,0.250000,0.100000,0.200000,,"));
        assert!(lines[3].starts_with("delta_tall_vs_multvae_pct,0.00,100.00,0.00,,"));
        let back = read_report_csv(&path, 20).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].groups, base.groups);
        assert_eq!(back[1].overall, Some(0.25));
    }

    proptest! {
        #[test]
        fn metrics_bounded(scores in proptest::collection::vec(-5.0f64..5.0, 12),
                           rel in proptest::collection::btree_set(0usize..12, 1..6),
                           k in 1usize..12) {
            let rel: Vec<usize> = rel.into_iter().collect();
            let list = rank_items(&scores, &[], k).unwrap();
            let n = ndcg_at_k(&list, &rel, k).unwrap();
            let r = recall_at_k(&list, &rel, k).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&n));
            prop_assert!((0.0..=1.0).contains(&r));
        }

        #[test]
        fn exclusions_never_ranked(scores in proptest::collection::vec(-5.0f64..5.0, 8),
                                   mask in 0u32..256, k in 1usize..9) {
            let exclude: Vec<usize> = (0..8).filter(|i| mask & (1 << i) != 0).collect();
            let list = rank_items(&scores, &exclude, k).unwrap();
            prop_assert!(list.items.iter().all(|i| !exclude.contains(i)));
            prop_assert_eq!(list.items.len(), k.min(8 - exclude.len()));
            let mut dedup = list.items.clone();
            dedup.sort_unstable();
            dedup.dedup();
            prop_assert_eq!(dedup.len(), list.items.len());
        }

        #[test]
        fn tail_permutation_keeps_ndcg(seed in any::<u64>(), k in 1usize..6) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mut scores: Vec<f64> = (0..10).map(|i| 10.0 - i as f64).collect();
            let rel: Vec<usize> = (0..10).filter(|_| r.random_bool(0.4)).collect();
            prop_assume!(!rel.is_empty());
            let before = ndcg_at_k(&rank_items(&scores, &[], k).unwrap(), &rel, k);
            // Permute scores among items already outside the top k.
            let tail = &mut scores[k..];
            use rand::seq::SliceRandom;
            tail.shuffle(&mut r);
            let after = ndcg_at_k(&rank_items(&scores, &[], k).unwrap(), &rel, k);
            prop_assert_eq!(before, after);
        }
    }
}
