//! The four pipeline stages behind the command-line tool.
//!
//! Layout under the output directory:
//!
//! ```text
//! manifest/   vocab.tsv folds.tsv mainstream.tsv manifest.json
//! <preset>/   checkpoint/ history.csv weights.csv report.csv
//! ```
//!
//! Text artifacts start with a `# key=value` provenance line carrying the
//! data hash (manifest files) or config and data hashes (run files); it is
//! checked whenever an artifact is read back.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Provenance};
use crate::config::{digest, RunConfig};
use crate::corpus::{
    load_interactions, mainstream_scores, split, Fold, MainstreamProfile, SplitDataset, Subgroup,
};
use crate::error::{Error, Result};
use crate::metrics::{bias_report, read_report_csv, render_report_csv, BiasReport};
use crate::mixture::{self, EnsembleModel, EnsembleScorer};
use crate::training::EpochRecord;

pub const MANIFEST_DIR: &str = "manifest";
const MANIFEST_FORMAT: &str = "tall-manifest/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestInfo {
    pub format: String,
    pub data_hash: String,
    pub dataset: PathBuf,
    pub dataset_sha256: String,
    pub seed: u64,
    pub n_users: usize,
    pub n_items: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

/// A prepared split read back from disk.
pub struct Manifest {
    pub info: ManifestInfo,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    pub split: SplitDataset,
    pub profile: MainstreamProfile,
}

pub fn manifest_dir(out: &Path) -> PathBuf {
    out.join(MANIFEST_DIR)
}

pub fn run_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join(cfg.preset.as_str())
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Splits `text` into its provenance value for `key`, the header row, and
/// the numbered data lines.
fn body<'a>(
    path: &Path,
    text: &'a str,
    key: &str,
    header: &str,
) -> Result<(String, Vec<(usize, &'a str)>)> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let stamp = lines
        .next()
        .and_then(|(_, l)| l.strip_prefix("# "))
        .and_then(|l| {
            l.split(' ')
                .find_map(|kv| kv.strip_prefix(key)?.strip_prefix('='))
        })
        .ok_or_else(|| parse_err(path, 1, format!("missing `# {key}=` line")))?
        .to_string();
    match lines.next() {
        Some((_, h)) if h == header => {}
        _ => return Err(parse_err(path, 2, format!("expected header `{header}`"))),
    }
    Ok((stamp, lines.filter(|(_, l)| !l.is_empty()).collect()))
}

fn check_stamp(path: &Path, found: &str, expected: &str, what: &str) -> Result<()> {
    if found != expected {
        return Err(Error::Incompatible(format!(
            "{} carries {what} {found}, expected {expected}",
            path.display()
        )));
    }
    Ok(())
}

/// Loads, filters and splits the dataset, scores mainstreamness and writes
/// the manifest directory. Deterministic for a fixed config.
pub fn prepare(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let raw_bytes = fs::read(&cfg.dataset).map_err(|e| Error::io(&cfg.dataset, e))?;
    let mut data = load_interactions(&cfg.dataset, cfg.rating_threshold)?;
    if cfg.min_interactions > 0 {
        data = data.filter_min_interactions(cfg.min_interactions)?;
    }
    let sp = split(&data, cfg.split_ratios(), cfg.seed)?;
    let profile = mainstream_scores(&sp)?;
    let hash = cfg.data_hash();
    let stamp = format!("# data_hash={hash}\n");

    let mut vocab = stamp.clone();
    vocab.push_str("kind\tindex\traw_id\n");
    for (kind, ids) in [("user", data.user_ids()), ("item", data.item_ids())] {
        for (i, id) in ids.iter().enumerate() {
            let _ = writeln!(vocab, "{kind}\t{i}\t{id}");
        }
    }
    let mut folds = stamp.clone();
    folds.push_str("user\titem\tfold\n");
    for (u, i, f) in sp.assignments() {
        let _ = writeln!(folds, "{u}\t{i}\t{}", f.as_str());
    }
    let mut ms = stamp;
    ms.push_str("user\tscore\tsubgroup\n");
    for u in 0..profile.n_users() {
        let _ = writeln!(
            ms,
            "{u}\t{}\t{}",
            profile.score(u),
            profile.subgroup(u).label()
        );
    }
    let (n_train, n_val, n_test) = sp.fold_counts();
    let info = ManifestInfo {
        format: MANIFEST_FORMAT.to_string(),
        data_hash: hash,
        dataset: cfg.dataset.clone(),
        dataset_sha256: digest(&raw_bytes),
        seed: cfg.seed,
        n_users: sp.n_users(),
        n_items: sp.n_items(),
        n_train,
        n_val,
        n_test,
    };
    let dir = manifest_dir(&cfg.output_dir);
    checkpoint::write_dir_atomically(&dir, |tmp| {
        write(&tmp.join("vocab.tsv"), &vocab)?;
        write(&tmp.join("folds.tsv"), &folds)?;
        write(&tmp.join("mainstream.tsv"), &ms)?;
        let json = serde_json::to_string_pretty(&info).expect("manifest serializes");
        write(&tmp.join("manifest.json"), &(json + "\n"))
    })?;
    Ok(dir)
}

/// Reads the manifest prepared for `cfg`, rejecting one prepared from
/// different data keys.
pub fn load_manifest(cfg: &RunConfig) -> Result<Manifest> {
    let dir = manifest_dir(&cfg.output_dir);
    let info_path = dir.join("manifest.json");
    let info: ManifestInfo = serde_json::from_str(&read(&info_path)?)
        .map_err(|e| Error::format(&info_path, e.to_string()))?;
    if info.format != MANIFEST_FORMAT {
        return Err(Error::format(
            &info_path,
            format!("unsupported format {}", info.format),
        ));
    }
    let expected = cfg.data_hash();
    if info.data_hash != expected {
        return Err(Error::Incompatible(format!(
            "{} was prepared with data hash {}, the config gives {expected}; rerun prepare",
            dir.display(),
            info.data_hash
        )));
    }
    let (n, m) = (info.n_users, info.n_items);
    let field = |path: &Path, line: usize, cells: &[&str], idx: usize| -> Result<usize> {
        cells[idx]
            .parse::<usize>()
            .map_err(|_| parse_err(path, line, format!("`{}` is not an index", cells[idx])))
    };

    let path = dir.join("vocab.tsv");
    let text = read(&path)?;
    let (stamp, rows) = body(&path, &text, "data_hash", "kind\tindex\traw_id")?;
    check_stamp(&path, &stamp, &expected, "data hash")?;
    let mut user_ids = Vec::with_capacity(n);
    let mut item_ids = Vec::with_capacity(m);
    for (line, row) in rows {
        let cells: Vec<&str> = row.splitn(3, '\t').collect();
        if cells.len() != 3 {
            return Err(parse_err(&path, line, "expected kind, index, raw id"));
        }
        let idx = field(&path, line, &cells, 1)?;
        let target = match cells[0] {
            "user" => &mut user_ids,
            "item" => &mut item_ids,
            other => return Err(parse_err(&path, line, format!("unknown kind `{other}`"))),
        };
        if idx != target.len() {
            return Err(parse_err(&path, line, format!("index {idx} out of order")));
        }
        target.push(cells[2].to_string());
    }
    if (user_ids.len(), item_ids.len()) != (n, m) {
        return Err(Error::format(
            &path,
            format!("vocabulary is not {n} users x {m} items"),
        ));
    }

    let path = dir.join("folds.tsv");
    let text = read(&path)?;
    let (stamp, rows) = body(&path, &text, "data_hash", "user\titem\tfold")?;
    check_stamp(&path, &stamp, &expected, "data hash")?;
    let mut assignments = Vec::with_capacity(rows.len());
    for (line, row) in rows {
        let cells: Vec<&str> = row.split('\t').collect();
        if cells.len() != 3 {
            return Err(parse_err(&path, line, "expected user, item, fold"));
        }
        let fold: Fold = cells[2]
            .parse()
            .map_err(|_| parse_err(&path, line, format!("bad fold `{}`", cells[2])))?;
        assignments.push((
            field(&path, line, &cells, 0)?,
            field(&path, line, &cells, 1)?,
            fold,
        ));
    }
    let sp = SplitDataset::from_assignments(n, m, info.seed, assignments)?;

    let path = dir.join("mainstream.tsv");
    let text = read(&path)?;
    let (stamp, rows) = body(&path, &text, "data_hash", "user\tscore\tsubgroup")?;
    check_stamp(&path, &stamp, &expected, "data hash")?;
    let mut scores = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    for (line, row) in rows {
        let cells: Vec<&str> = row.split('\t').collect();
        if cells.len() != 3 || field(&path, line, &cells, 0)? != scores.len() {
            return Err(parse_err(
                &path,
                line,
                "expected user (in order), score, subgroup",
            ));
        }
        scores.push(
            cells[1]
                .parse::<f64>()
                .map_err(|_| parse_err(&path, line, "bad score"))?,
        );
        groups.push(
            cells[2]
                .parse::<Subgroup>()
                .map_err(|_| parse_err(&path, line, "bad subgroup"))?,
        );
    }
    if scores.len() != n {
        return Err(Error::format(
            &path,
            format!("{} rows for {n} users", scores.len()),
        ));
    }
    let profile = MainstreamProfile::from_scores(scores)?;
    if profile.subgroups() != groups.as_slice() {
        return Err(Error::format(&path, "subgroups disagree with the scores"));
    }
    Ok(Manifest {
        info,
        user_ids,
        item_ids,
        split: sp,
        profile,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

fn run_stamp(cfg: &RunConfig) -> String {
    format!(
        "# config_hash={} data_hash={}\n",
        cfg.config_hash(),
        cfg.data_hash()
    )
}

/// `epoch,train_loss,val_ndcg,val_L..val_H,w_L..w_H`.
pub fn render_history_csv(history: &[EpochRecord]) -> String {
    let short: Vec<&str> = Subgroup::ALL.iter().map(|g| g.short()).collect();
    let mut out = String::from("epoch,train_loss,val_ndcg");
    for s in &short {
        let _ = write!(out, ",val_{s}");
    }
    for s in &short {
        let _ = write!(out, ",w_{s}");
    }
    out.push('\n');
    for r in history {
        let _ = write!(out, "{},{:.6},{}", r.epoch, r.train_loss, opt(r.val_ndcg));
        for v in r.val_groups.iter().chain(&r.mean_weights) {
            let _ = write!(out, ",{}", opt(*v));
        }
        out.push('\n');
    }
    out
}

/// `epoch,w_L..w_H`.
pub fn render_weights_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch");
    for g in Subgroup::ALL {
        let _ = write!(out, ",w_{}", g.short());
    }
    out.push('\n');
    for r in history {
        let _ = write!(out, "{}", r.epoch);
        for v in &r.mean_weights {
            let _ = write!(out, ",{}", opt(*v));
        }
        out.push('\n');
    }
    out
}

pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub best_epoch: usize,
    pub best_val_ndcg: Option<f64>,
    pub final_val_ndcg: Option<f64>,
    pub history: Vec<EpochRecord>,
}

/// Trains the configured preset on the prepared manifest and writes the
/// best-validation checkpoint plus the history files.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let man = load_manifest(cfg)?;
    let dims = cfg.dims(man.split.n_items())?;
    let model = EnsembleModel::<f64>::new(dims, man.split.n_users(), cfg.ensemble_config())?;
    let out = mixture::train(model, &man.split, &man.profile)?;
    let dir = run_dir(cfg);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    checkpoint::save(
        &dir.join("checkpoint"),
        &out.best,
        &Provenance {
            epoch: out.best_epoch,
            config_hash: cfg.config_hash(),
            data_hash: cfg.data_hash(),
        },
    )?;
    let stamp = run_stamp(cfg);
    write(
        &dir.join("history.csv"),
        &(stamp.clone() + &render_history_csv(&out.history)),
    )?;
    write(
        &dir.join("weights.csv"),
        &(stamp + &render_weights_csv(&out.history)),
    )?;
    Ok(TrainSummary {
        run_dir: dir,
        best_epoch: out.best_epoch,
        best_val_ndcg: out.history[out.best_epoch - 1].val_ndcg,
        final_val_ndcg: out.history.last().and_then(|r| r.val_ndcg),
        history: out.history,
    })
}

/// Reads the model rows of a report file after checking its data hash.
pub fn read_report(path: &Path, data_hash: &str, k: usize) -> Result<Vec<BiasReport>> {
    let text = read(path)?;
    let first = text.lines().next().unwrap_or_default();
    let found = first
        .strip_prefix("# ")
        .and_then(|l| l.split(' ').find_map(|kv| kv.strip_prefix("data_hash=")))
        .ok_or_else(|| parse_err(path, 1, "missing `# data_hash=` provenance"))?;
    check_stamp(path, found, data_hash, "data hash")?;
    read_report_csv(path, k)
}

/// Scores the trained preset on the test fold and writes `report.csv`,
/// adding Δ% rows against the named baseline preset's report when given.
pub fn evaluate(cfg: &RunConfig, baseline: Option<&str>) -> Result<(BiasReport, PathBuf)> {
    cfg.validate()?;
    let man = load_manifest(cfg)?;
    let dir = run_dir(cfg);
    let ckpt = dir.join("checkpoint");
    let meta = checkpoint::read_meta(&ckpt)?;
    let trained = RunConfig {
        k: meta.ensemble.train.k,
        ..cfg.clone()
    };
    if meta.config_hash != trained.config_hash() {
        return Err(Error::Incompatible(format!(
            "{} was trained with config hash {}, the config gives {}",
            ckpt.display(),
            meta.config_hash,
            trained.config_hash()
        )));
    }
    if meta.data_hash != man.info.data_hash {
        return Err(Error::Incompatible(format!(
            "{} was trained on data hash {}, the manifest has {}",
            ckpt.display(),
            meta.data_hash,
            man.info.data_hash
        )));
    }
    if (meta.items, meta.n_users) != (man.split.n_items(), man.split.n_users()) {
        return Err(Error::Incompatible(format!(
            "checkpoint covers {} users x {} items, manifest has {} x {}",
            meta.n_users,
            meta.items,
            man.split.n_users(),
            man.split.n_items()
        )));
    }
    let (model, _) = checkpoint::load::<f64>(&ckpt)?;
    let scorer = EnsembleScorer {
        model: &model,
        split: &man.split,
    };
    let report = bias_report(
        cfg.preset.as_str(),
        &scorer,
        &man.split,
        &man.profile,
        cfg.k,
    )?;
    let base = match baseline {
        Some(name) => {
            let path = cfg.output_dir.join(name).join("report.csv");
            let rows = read_report(&path, &man.info.data_hash, cfg.k)?;
            let row = rows
                .into_iter()
                .find(|r| r.name == name)
                .ok_or_else(|| Error::format(&path, format!("no `{name}` row")))?;
            Some(row)
        }
        None => None,
    };
    let path = dir.join("report.csv");
    let text = run_stamp(cfg) + &render_report_csv(std::slice::from_ref(&report), base.as_ref());
    write(&path, &text)?;
    Ok((report, path))
}

/// Merges model rows from several report files sharing one data hash into
/// a single table at `output`.
pub fn report(
    inputs: &[PathBuf],
    baseline: Option<&str>,
    output: &Path,
    k: usize,
) -> Result<Vec<BiasReport>> {
    if inputs.is_empty() {
        return Err(Error::Config("report needs at least one input".into()));
    }
    let mut hash: Option<String> = None;
    let mut rows: Vec<BiasReport> = Vec::new();
    for path in inputs {
        let text = read(path)?;
        let found = text
            .lines()
            .next()
            .and_then(|l| l.strip_prefix("# "))
            .and_then(|l| l.split(' ').find_map(|kv| kv.strip_prefix("data_hash=")))
            .ok_or_else(|| parse_err(path, 1, "missing `# data_hash=` provenance"))?
            .to_string();
        let expected = hash.get_or_insert_with(|| found.clone()).clone();
        for r in read_report(path, &expected, k)? {
            if !rows.iter().any(|x| x.name == r.name) {
                rows.push(r);
            }
        }
    }
    let base = match baseline {
        Some(name) => Some(
            rows.iter()
                .find(|r| r.name == name)
                .cloned()
                .ok_or_else(|| Error::Config(format!("baseline `{name}` not among the inputs")))?,
        ),
        None => None,
    };
    let text = format!("# data_hash={}\n", hash.expect("non-empty"))
        + &render_report_csv(&rows, base.as_ref());
    write(output, &text)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{planted_clusters, render_tsv, PlantedConfig};

    fn setup(dir: &Path) -> RunConfig {
        let data = planted_clusters(&PlantedConfig::default(), 5).unwrap();
        let path = dir.join("data.tsv");
        fs::write(&path, render_tsv(&data.interactions)).unwrap();
        RunConfig {
            dataset: path,
            seed: 5,
            epochs: 3,
            n_experts: 2,
            hidden: 8,
            latent: 4,
            sync_gap: 1,
            sync_window: 1,
            output_dir: dir.join("out"),
            ..RunConfig::default()
        }
    }

    #[test]
    fn manifest_round_trips() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = setup(tmp.path());
        prepare(&cfg).unwrap();
        let man = load_manifest(&cfg).unwrap();
        let data = load_interactions(&cfg.dataset, None).unwrap();
        let sp = split(&data, cfg.split_ratios(), cfg.seed).unwrap();
        assert_eq!(man.split.assignments(), sp.assignments());
        assert_eq!(
            man.profile.subgroups(),
            mainstream_scores(&sp).unwrap().subgroups()
        );
        assert_eq!(man.user_ids, data.user_ids());
        assert_eq!(
            man.info.n_train + man.info.n_val + man.info.n_test,
            data.len()
        );
    }

    #[test]
    fn corrupt_rows_report_their_line() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = setup(tmp.path());
        let dir = prepare(&cfg).unwrap();
        let path = dir.join("folds.tsv");
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[4] = "0\t1\tholdout";
        fs::write(&path, lines.join("\n")).unwrap();
        match load_manifest(&cfg) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected a parse error, got {:?}", other.err()),
        }
    }

    #[test]
    fn evaluate_is_repeatable_and_report_rejects_foreign_data() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = setup(tmp.path());
        prepare(&cfg).unwrap();
        train(&cfg).unwrap();
        let (first, path) = evaluate(&cfg, None).unwrap();
        let bytes = fs::read(&path).unwrap();
        let (second, _) = evaluate(&cfg, None).unwrap();
        assert_eq!(first, second);
        assert_eq!(fs::read(&path).unwrap(), bytes);

        let foreign = tmp.path().join("foreign.csv");
        let text = String::from_utf8(bytes).unwrap();
        let body = text.split_once('\n').unwrap().1;
        fs::write(&foreign, format!("# data_hash=feed\n{body}")).unwrap();
        let merged = tmp.path().join("merged.csv");
        let err = report(&[path, foreign], None, &merged, cfg.k).unwrap_err();
        assert!(matches!(err, Error::Incompatible(_)), "{err}");
    }
}
