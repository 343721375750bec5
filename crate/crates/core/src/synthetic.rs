//! Seeded planted-cluster interaction data.
//!
//! Mainstream users draw most of their items from one shared pool with a
//! popularity skew; niche users belong to one of several small disjoint
//! pools. Every user also draws some items uniformly from a long tail. Each
//! mainstream user has their own affinity to the shared pool, so how
//! mainstream a user is varies continuously within the majority.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::InteractionSet;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedConfig {
    pub n_mainstream: usize,
    pub mainstream_pool: usize,
    pub niche_groups: usize,
    pub niche_per_group: usize,
    pub niche_pool: usize,
    pub n_items: usize,
    pub per_user: usize,
    /// Range of a mainstream user's share of items from the shared pool.
    pub mainstream_share: (f64, f64),
    /// Share of a niche user's items from their own pool.
    pub niche_share: f64,
    /// Share of a niche user's items from the shared pool.
    pub niche_crossover: f64,
    /// Exponent of the popularity skew inside the shared pool.
    pub popularity_skew: f64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            n_mainstream: 240,
            mainstream_pool: 40,
            niche_groups: 4,
            niche_per_group: 15,
            niche_pool: 15,
            n_items: 200,
            per_user: 30,
            mainstream_share: (0.3, 1.0),
            niche_share: 0.35,
            niche_crossover: 0.15,
            popularity_skew: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UserKind {
    Mainstream,
    Niche(usize),
}

pub struct PlantedData {
    pub interactions: InteractionSet,
    /// Indexed like the users of `interactions`.
    pub kinds: Vec<UserKind>,
}

impl PlantedConfig {
    pub fn n_users(&self) -> usize {
        self.n_mainstream + self.niche_groups * self.niche_per_group
    }

    fn tail_start(&self) -> usize {
        self.mainstream_pool + self.niche_groups * self.niche_pool
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.mainstream_share;
        let shares_ok = (0.0..=1.0).contains(&lo)
            && (lo..=1.0).contains(&hi)
            && self.niche_share >= 0.0
            && self.niche_crossover >= 0.0
            && self.niche_share + self.niche_crossover <= 1.0;
        if !shares_ok {
            return Err(Error::Config("planted shares must lie in [0, 1]".into()));
        }
        if self.tail_start() >= self.n_items {
            return Err(Error::Config("pools leave no tail items".into()));
        }
        if self.per_user == 0 || self.n_users() < 2 {
            return Err(Error::Config("need at least two users with items".into()));
        }
        Ok(())
    }
}

/// Draws `k` distinct items from `pool`, weighting by `weights` when given.
fn draw(
    rng: &mut impl Rng,
    pool: &[usize],
    weights: Option<&[f64]>,
    k: usize,
    out: &mut Vec<usize>,
) {
    let k = k.min(pool.len());
    match weights {
        Some(w) => out.extend(
            pool.choose_multiple_weighted(rng, k, |&i| w[i - pool[0]])
                .expect("positive weights")
                .copied(),
        ),
        None => out.extend(pool.choose_multiple(rng, k).copied()),
    }
}

/// Generates the planted dataset. Item ids are `i{index}` and user ids
/// `u{index}`; every item of the catalog is guaranteed to occur.
pub fn planted_clusters(cfg: &PlantedConfig, seed: u64) -> Result<PlantedData> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, "synthetic");
    let shared: Vec<usize> = (0..cfg.mainstream_pool).collect();
    let popularity: Vec<f64> = (0..cfg.mainstream_pool)
        .map(|r| 1.0 / ((r + 1) as f64).powf(cfg.popularity_skew))
        .collect();
    let niche: Vec<Vec<usize>> = (0..cfg.niche_groups)
        .map(|g| {
            let start = cfg.mainstream_pool + g * cfg.niche_pool;
            (start..start + cfg.niche_pool).collect()
        })
        .collect();
    let tail: Vec<usize> = (cfg.tail_start()..cfg.n_items).collect();

    let mut kinds = Vec::with_capacity(cfg.n_users());
    kinds.extend(std::iter::repeat_n(UserKind::Mainstream, cfg.n_mainstream));
    for g in 0..cfg.niche_groups {
        kinds.extend(std::iter::repeat_n(UserKind::Niche(g), cfg.niche_per_group));
    }

    let n = cfg.per_user as f64;
    let mut rows: Vec<Vec<usize>> = Vec::with_capacity(kinds.len());
    for kind in &kinds {
        let mut items = Vec::with_capacity(cfg.per_user);
        let n_shared = match kind {
            UserKind::Mainstream => {
                let (lo, hi) = cfg.mainstream_share;
                (rng.random_range(lo..=hi) * n).round() as usize
            }
            UserKind::Niche(g) => {
                draw(
                    &mut rng,
                    &niche[*g],
                    None,
                    (cfg.niche_share * n).round() as usize,
                    &mut items,
                );
                (cfg.niche_crossover * n).round() as usize
            }
        };
        draw(&mut rng, &shared, Some(&popularity), n_shared, &mut items);
        let rest = cfg.per_user.saturating_sub(items.len());
        draw(&mut rng, &tail, None, rest, &mut items);
        items.sort_unstable();
        rows.push(items);
    }

    let mut seen = vec![false; cfg.n_items];
    rows.iter().flatten().for_each(|&i| seen[i] = true);
    for i in (0..cfg.n_items).filter(|&i| !seen[i]) {
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.shuffle(&mut rng);
        let u = order
            .into_iter()
            .find(|&u| !rows[u].contains(&i))
            .expect("some user lacks item");
        rows[u].push(i);
    }

    let pairs: Vec<(usize, usize)> = rows
        .iter()
        .enumerate()
        .flat_map(|(u, items)| items.iter().map(move |&i| (u, i)))
        .collect();
    let interactions = InteractionSet::from_indexed(
        (0..rows.len()).map(|u| format!("u{u}")).collect(),
        (0..cfg.n_items).map(|i| format!("i{i}")).collect(),
        pairs,
    )?;
    Ok(PlantedData {
        interactions,
        kinds,
    })
}

/// Tab-separated `user\titem` lines, loadable by the corpus reader.
pub fn render_tsv(set: &InteractionSet) -> String {
    let mut out = String::with_capacity(set.len() * 10);
    for &(u, i) in set.pairs() {
        out.push_str(&set.user_ids()[u]);
        out.push('\t');
        out.push_str(&set.item_ids()[i]);
        out.push('\n');
    }
    out
}
