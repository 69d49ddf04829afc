//! Challenge-style seed/held-out splits and the background / LTR-train /
//! LTR-eval partition of a corpus.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, MpdPlaylist, MpdSlice, PlaylistRecord, TrackId};

/// The ten input categories of the challenge set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    TitleOnly,
    TitleFirst1,
    TitleFirst5,
    First5,
    TitleFirst10,
    First10,
    TitleFirst25,
    TitleRandom25,
    TitleFirst100,
    TitleRandom100,
}

impl Category {
    pub const ALL: [Category; 10] = [
        Category::TitleOnly,
        Category::TitleFirst1,
        Category::TitleFirst5,
        Category::First5,
        Category::TitleFirst10,
        Category::First10,
        Category::TitleFirst25,
        Category::TitleRandom25,
        Category::TitleFirst100,
        Category::TitleRandom100,
    ];

    pub fn seed_size(self) -> usize {
        use Category::*;
        match self {
            TitleOnly => 0,
            TitleFirst1 => 1,
            TitleFirst5 | First5 => 5,
            TitleFirst10 | First10 => 10,
            TitleFirst25 | TitleRandom25 => 25,
            TitleFirst100 | TitleRandom100 => 100,
        }
    }

    pub fn has_title(self) -> bool {
        !matches!(self, Category::First5 | Category::First10)
    }

    pub fn is_random(self) -> bool {
        matches!(self, Category::TitleRandom25 | Category::TitleRandom100)
    }

    pub fn name(self) -> &'static str {
        use Category::*;
        match self {
            TitleOnly => "title_only",
            TitleFirst1 => "title_first1",
            TitleFirst5 => "title_first5",
            First5 => "first5",
            TitleFirst10 => "title_first10",
            First10 => "first10",
            TitleFirst25 => "title_first25",
            TitleRandom25 => "title_random25",
            TitleFirst100 => "title_first100",
            TitleRandom100 => "title_random100",
        }
    }

    /// Best guess for challenge files that carry no category field.
    pub fn infer(has_title: bool, seeds: usize) -> Category {
        use Category::*;
        match (has_title, seeds) {
            (false, n) if n <= 5 => First5,
            (false, _) => First10,
            (true, 0) => TitleOnly,
            (true, 1) => TitleFirst1,
            (true, 2..=5) => TitleFirst5,
            (true, 6..=10) => TitleFirst10,
            (true, 11..=25) => TitleFirst25,
            (true, _) => TitleFirst100,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = SplitError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| SplitError::Config(format!("unknown category `{s}`")))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SplitError {
    #[error("playlist pid={pid} has {unique} unique tracks; category {category} needs more than {needed}")]
    CategoryInfeasible {
        pid: u64,
        category: Category,
        unique: usize,
        needed: usize,
    },
    #[error("split configuration: {0}")]
    Config(String),
}

/// A playlist as the recommender sees it: seeds (and maybe a title) visible,
/// the rest held out.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlaylist {
    pub pid: u64,
    pub title: Option<String>,
    /// Distinct, in position order.
    pub seed_tracks: Vec<TrackId>,
    pub held_tracks: BTreeSet<TrackId>,
    /// Known to the predictor even when `held_tracks` is not.
    pub n_held: usize,
    pub category: Category,
}

impl SplitPlaylist {
    pub fn seed_set(&self) -> HashSet<TrackId> {
        self.seed_tracks.iter().copied().collect()
    }
}

fn dedup_in_order(tracks: impl IntoIterator<Item = TrackId>) -> Vec<TrackId> {
    let mut seen = HashSet::new();
    tracks.into_iter().filter(|t| seen.insert(*t)).collect()
}

/// Cut `playlist` into seeds and held-out tracks following `category`.
///
/// Prefix categories take the first k positions and ignore `rng_seed`; random
/// categories sample k positions without replacement. A held track equal to a
/// seed track is dropped from the held set.
pub fn make_challenge_category(
    playlist: &PlaylistRecord,
    category: Category,
    rng_seed: u64,
) -> Result<SplitPlaylist, SplitError> {
    let k = category.seed_size();
    let unique = playlist.unique_tracks();
    let n_unique = unique.len();
    let infeasible = || SplitError::CategoryInfeasible {
        pid: playlist.pid,
        category,
        unique: n_unique,
        needed: k,
    };
    if unique.len() <= k || playlist.tracks.len() < k {
        return Err(infeasible());
    }
    let seeds = if category.is_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut positions = rand::seq::index::sample(&mut rng, playlist.tracks.len(), k).into_vec();
        positions.sort_unstable();
        dedup_in_order(positions.into_iter().map(|p| playlist.tracks[p]))
    } else {
        dedup_in_order(playlist.tracks[..k].iter().copied())
    };
    let seed_set: HashSet<TrackId> = seeds.iter().copied().collect();
    let held: BTreeSet<TrackId> = unique.into_iter().filter(|t| !seed_set.contains(t)).collect();
    if held.is_empty() {
        return Err(infeasible());
    }
    Ok(SplitPlaylist {
        pid: playlist.pid,
        title: category.has_title().then(|| playlist.title.clone()),
        seed_tracks: seeds,
        n_held: held.len(),
        held_tracks: held,
        category,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub background_fraction: f64,
    pub n_train: usize,
    pub n_eval: usize,
    /// Relative category weights in [`Category::ALL`] order; uniform when absent.
    /// Weights are renormalised over the categories feasible for each playlist.
    pub category_weights: Option<[f64; 10]>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            background_fraction: 0.75,
            n_train: 50_000,
            n_eval: 5_000,
            category_weights: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusSplit {
    /// Indices into `corpus.playlists`, ascending.
    pub background: Vec<usize>,
    pub ltr_train: Vec<SplitPlaylist>,
    pub ltr_eval: Vec<SplitPlaylist>,
}

impl CorpusSplit {
    pub fn background_pids(&self, corpus: &Corpus) -> Vec<u64> {
        self.background.iter().map(|&i| corpus.playlists[i].pid).collect()
    }
}

/// Per-playlist seed for random categories.
pub fn playlist_seed(rng_seed: u64, pid: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = rng_seed ^ pid.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn make_ltr_splits(corpus: &Corpus, config: &SplitConfig, rng_seed: u64) -> Result<CorpusSplit, SplitError> {
    let n = corpus.playlists.len();
    if n == 0 {
        return Err(SplitError::Config("empty corpus".into()));
    }
    if !(0.0..=1.0).contains(&config.background_fraction) {
        return Err(SplitError::Config(format!(
            "background fraction {} outside [0, 1]",
            config.background_fraction
        )));
    }
    let n_background = (n as f64 * config.background_fraction).floor() as usize;
    let remainder = n - n_background;
    if config.n_train + config.n_eval > remainder {
        return Err(SplitError::Config(format!(
            "{} train + {} eval playlists requested but only {remainder} remain after the background",
            config.n_train, config.n_eval
        )));
    }
    let weights = config.category_weights.unwrap_or([1.0; 10]);
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || weights.iter().all(|&w| w == 0.0) {
        return Err(SplitError::Config("category weights must be finite, non-negative, not all zero".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut background = order[..n_background].to_vec();
    background.sort_unstable();

    let mut drawn = Vec::with_capacity(config.n_train + config.n_eval);
    for &idx in &order[n_background..] {
        if drawn.len() == config.n_train + config.n_eval {
            break;
        }
        let playlist = &corpus.playlists[idx];
        let unique = playlist.unique_tracks().len();
        let feasible: Vec<Category> = Category::ALL
            .into_iter()
            .filter(|c| weights[*c as usize] > 0.0 && unique > c.seed_size() && playlist.tracks.len() >= c.seed_size())
            .collect();
        if feasible.is_empty() {
            continue;
        }
        let dist = WeightedIndex::new(feasible.iter().map(|c| weights[*c as usize])).expect("positive weights");
        let category = feasible[dist.sample(&mut rng)];
        match make_challenge_category(playlist, category, playlist_seed(rng_seed, playlist.pid)) {
            Ok(split) => drawn.push(split),
            Err(e) => warn!("skipping: {e}"),
        }
    }
    if drawn.len() < config.n_train + config.n_eval {
        return Err(SplitError::Config(format!(
            "only {} playlists could be split; {} requested",
            drawn.len(),
            config.n_train + config.n_eval
        )));
    }
    let ltr_eval = drawn.split_off(config.n_train);
    Ok(CorpusSplit {
        background,
        ltr_train: drawn,
        ltr_eval,
    })
}

/// A held-out track with its artist, enough to score artist partial credit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeldTrack {
    pub track_uri: String,
    pub artist_uri: String,
}

/// Ground-truth sidecar: pid -> held-out tracks.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub playlists: BTreeMap<u64, Vec<HeldTrack>>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackgroundManifest {
    pub background_pids: Vec<u64>,
}

impl BackgroundManifest {
    pub fn indices(&self, corpus: &Corpus) -> Result<Vec<usize>, SplitError> {
        let by_pid = corpus.pid_index();
        let mut out = self
            .background_pids
            .iter()
            .map(|pid| {
                by_pid
                    .get(pid)
                    .copied()
                    .ok_or_else(|| SplitError::Config(format!("background pid {pid} not in corpus")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        out.sort_unstable();
        Ok(out)
    }
}

/// Challenge file (tracks truncated to seeds) and ground truth for `splits`.
pub fn to_challenge(corpus: &Corpus, splits: &[SplitPlaylist]) -> (MpdSlice, GroundTruth) {
    let mut slice = MpdSlice::default();
    let mut truth = GroundTruth::default();
    for s in splits {
        slice.playlists.push(MpdPlaylist {
            pid: s.pid,
            name: s.title.clone(),
            num_holdouts: Some(s.n_held as u32),
            category: Some(s.category.name().to_string()),
            tracks: s
                .seed_tracks
                .iter()
                .enumerate()
                .map(|(i, &t)| corpus.mpd_track(t, i as u32))
                .collect(),
        });
        let held = s
            .held_tracks
            .iter()
            .map(|&t| HeldTrack {
                track_uri: corpus.track_uri(t).to_string(),
                artist_uri: corpus.artists.uri(corpus.artist_of(t).0).to_string(),
            })
            .collect();
        truth.playlists.insert(s.pid, held);
    }
    (slice, truth)
}

/// Read a challenge file back against `corpus`. Seed and held URIs unknown
/// to the corpus are dropped; `n_held` comes from `num_holdouts` when given.
pub fn from_challenge(corpus: &Corpus, slice: &MpdSlice, truth: Option<&GroundTruth>) -> Vec<SplitPlaylist> {
    slice
        .playlists
        .iter()
        .map(|p| {
            let known: Vec<TrackId> = p
                .tracks
                .iter()
                .filter_map(|t| {
                    let id = corpus.track_id(&t.track_uri);
                    if id.is_none() {
                        warn!("pid={}: seed {} unknown to the corpus", p.pid, t.track_uri);
                    }
                    id
                })
                .collect();
            let seeds = dedup_in_order(known);
            let seed_set: HashSet<TrackId> = seeds.iter().copied().collect();
            let held: BTreeSet<TrackId> = truth
                .and_then(|g| g.playlists.get(&p.pid))
                .map(|h| {
                    h.iter()
                        .filter_map(|t| corpus.track_id(&t.track_uri))
                        .filter(|t| !seed_set.contains(t))
                        .collect()
                })
                .unwrap_or_default();
            let n_held = p.num_holdouts.map(|n| n as usize).unwrap_or(held.len());
            let title = p.name.clone().filter(|t| !t.is_empty());
            let category = p
                .category
                .as_deref()
                .and_then(|c| c.parse().ok())
                .unwrap_or_else(|| Category::infer(title.is_some(), p.tracks.len()));
            SplitPlaylist {
                pid: p.pid,
                title,
                seed_tracks: seeds,
                held_tracks: held,
                n_held,
                category,
            }
        })
        .collect()
}
