//! Challenge metrics (R-precision with artist credit, NDCG, clicks), Recall@k,
//! Borda aggregation, the submission file format and run-level reports.
//!
//! Metric functions are generic over the track key so they work on dense ids
//! and on URIs alike.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::hash::Hash;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::splits::GroundTruth;

/// Rank cutoffs of the report columns.
pub const REPORT_CUTOFFS: [usize; 4] = [10, 250, 500, 1000];
/// Clicks are measured on the first 500 predictions.
pub const CLICKS_DEPTH: usize = 500;
pub const MAX_CLICKS: u32 = 51;
pub const DEFAULT_ARTIST_WEIGHT: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("cutoff must be at least 1")]
    BadCutoff,
    #[error("held-out set is empty")]
    EmptyHeld,
    #[error("predictions missing for {} playlist(s): {}", .0.len(), preview(.0))]
    MissingPids(Vec<u64>),
    #[error("team sets differ between metrics: {0}")]
    InconsistentTeams(String),
    #[error("submission line {line}: {message}")]
    Submission { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn preview(pids: &[u64]) -> String {
    let mut s = pids.iter().take(20).map(u64::to_string).collect::<Vec<_>>().join(", ");
    if pids.len() > 20 {
        s.push_str(", ...");
    }
    s
}

/// R-precision over the first `n = |held|` predictions. An exact hit scores
/// one. A miss whose artist matches a held track that is not itself hit in
/// the top n scores `artist_weight`; every held track backs at most one
/// credit, handed out in rank order. Repeated predictions count once. `held`
/// lists distinct tracks with their artists.
pub fn r_precision<T, K, A>(pred: &[K], held: &[(K, A)], artist_of: impl Fn(K) -> Option<A>, artist_weight: T) -> Result<T, EvalError>
where
    T: Scalar,
    K: Eq + Hash + Copy,
    A: Eq + Hash + Copy,
{
    let n = held.len();
    if n == 0 {
        return Err(EvalError::EmptyHeld);
    }
    let top = &pred[..n.min(pred.len())];
    let held_tracks: HashSet<K> = held.iter().map(|h| h.0).collect();
    let hit: HashSet<K> = top.iter().copied().filter(|p| held_tracks.contains(p)).collect();
    let mut artist_credits: HashMap<A, usize> = HashMap::new();
    for (t, a) in held {
        if !hit.contains(t) {
            *artist_credits.entry(*a).or_default() += 1;
        }
    }
    let mut seen = HashSet::new();
    let mut total = T::zero();
    for &p in top {
        if !seen.insert(p) {
            continue;
        }
        if hit.contains(&p) {
            total += T::one();
        } else if let Some(c) = artist_of(p).and_then(|a| artist_credits.get_mut(&a)).filter(|c| **c > 0) {
            *c -= 1;
            total += artist_weight;
        }
    }
    Ok(total / T::of_usize(n))
}

/// Binary-gain NDCG at `cutoff` with a 1/log2(i+1) discount.
pub fn ndcg<T: Scalar, K: Eq + Hash + Copy>(pred: &[K], held: &HashSet<K>, cutoff: usize) -> Result<T, EvalError> {
    if cutoff == 0 {
        return Err(EvalError::BadCutoff);
    }
    if held.is_empty() {
        return Err(EvalError::EmptyHeld);
    }
    let disc = |i: usize| T::one() / T::of_usize(i + 1).log2();
    let mut seen = HashSet::new();
    let dcg: T = pred
        .iter()
        .take(cutoff)
        .enumerate()
        .filter(|(_, p)| held.contains(*p) && seen.insert(**p))
        .map(|(i, _)| disc(i + 1))
        .sum();
    let idcg: T = (1..=held.len().min(cutoff)).map(disc).sum();
    Ok(dcg / idcg)
}

/// Pages of ten a user would click through before the first relevant track,
/// capped at 51 (also the value when nothing is relevant).
pub fn clicks<K: Eq + Hash>(pred: &[K], held: &HashSet<K>) -> u32 {
    pred.iter()
        .position(|p| held.contains(p))
        .map_or(MAX_CLICKS, |i| ((i / 10) as u32).min(MAX_CLICKS))
}

/// Fraction of held tracks among the first `k` predictions.
pub fn recall_at<T: Scalar, K: Eq + Hash + Copy>(pred: &[K], held: &HashSet<K>, k: usize) -> Result<T, EvalError> {
    if k == 0 {
        return Err(EvalError::BadCutoff);
    }
    if held.is_empty() {
        return Err(EvalError::EmptyHeld);
    }
    let hits: HashSet<K> = pred.iter().take(k).copied().filter(|p| held.contains(p)).collect();
    Ok(T::of_usize(hits.len()) / T::of_usize(held.len()))
}

/// Default Borda points: `teams - rank` for a 1-based rank.
pub fn default_points<T: Scalar>(rank: usize, teams: usize) -> T {
    T::of_usize(teams) - T::of_usize(rank)
}

/// Sums `points(rank, teams)` over metrics. Each map gives every team's
/// 1-based rank under one metric; all maps must cover the same teams.
pub fn borda_aggregate<T: Scalar>(
    metric_ranks: &[BTreeMap<String, usize>],
    points: impl Fn(usize, usize) -> T,
) -> Result<BTreeMap<String, T>, EvalError> {
    let Some(first) = metric_ranks.first() else {
        return Ok(BTreeMap::new());
    };
    let teams: Vec<&String> = first.keys().collect();
    let mut scores: BTreeMap<String, T> = teams.iter().map(|t| ((*t).clone(), T::zero())).collect();
    for (m, ranks) in metric_ranks.iter().enumerate() {
        if ranks.len() != teams.len() || !teams.iter().all(|t| ranks.contains_key(*t)) {
            return Err(EvalError::InconsistentTeams(format!("metric {m} ranks a different team set")));
        }
        for (team, &rank) in ranks {
            *scores.get_mut(team).expect("same team set") += points(rank, teams.len());
        }
    }
    Ok(scores)
}

/// Submission file: `team_info,<team>,<email>` then `pid,uri_1,...`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Submission {
    pub team: String,
    pub email: String,
    pub rows: Vec<(u64, Vec<String>)>,
}

impl Submission {
    pub fn parse(text: &str) -> Result<Self, EvalError> {
        let err = |line: usize, message: String| EvalError::Submission { line, message };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (i, head) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
        let fields: Vec<&str> = head.split(',').map(str::trim).collect();
        if fields.first() != Some(&"team_info") || fields.len() < 3 {
            return Err(err(i + 1, "expected `team_info,<team>,<email>`".into()));
        }
        let mut sub = Submission {
            team: fields[1].to_string(),
            email: fields[2..].join(","),
            rows: Vec::new(),
        };
        let mut seen = HashSet::new();
        for (i, line) in lines {
            let mut fields = line.split(',').map(str::trim);
            let pid: u64 = fields
                .next()
                .and_then(|p| p.parse().ok())
                .ok_or_else(|| err(i + 1, "first field is not a pid".into()))?;
            if !seen.insert(pid) {
                return Err(err(i + 1, format!("duplicate pid {pid}")));
            }
            sub.rows.push((pid, fields.filter(|f| !f.is_empty()).map(str::to_string).collect()));
        }
        Ok(sub)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "team_info,{},{}", self.team, self.email)?;
        for (pid, uris) in &self.rows {
            write!(w, "{pid}")?;
            for u in uris {
                write!(w, ",{u}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        let io = |source| EvalError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        self.write_to(&mut f).map_err(io)?;
        f.flush().map_err(io)
    }
}

/// Mean metrics over playlists; vectors follow `cutoffs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub playlists: usize,
    pub cutoffs: Vec<usize>,
    pub recall: Vec<f64>,
    pub r_precision: Vec<f64>,
    pub ndcg: Vec<f64>,
    /// Clicks on the first 500 predictions.
    pub clicks: f64,
    /// Whether predicted tracks' artists were known, enabling partial credit.
    pub artist_credit: bool,
}

impl MetricReport {
    /// Aligned table with one row per model.
    pub fn table(rows: &[(&str, &MetricReport)]) -> String {
        let Some((_, first)) = rows.first() else {
            return String::new();
        };
        let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
        let mut out = String::new();
        let _ = write!(out, "{:<name_w$}", "model");
        for metric in ["Recall", "RPrec", "NDCG"] {
            for k in &first.cutoffs {
                let _ = write!(out, " {:>11}", format!("{metric}@{k}"));
            }
        }
        let _ = writeln!(out, " {:>10}", format!("Clicks@{CLICKS_DEPTH}"));
        for (name, r) in rows {
            let _ = write!(out, "{name:<name_w$}");
            for v in r.recall.iter().chain(&r.r_precision).chain(&r.ndcg) {
                let _ = write!(out, " {v:>11.4}");
            }
            let _ = writeln!(out, " {:>10.3}", r.clicks);
        }
        out
    }
}

struct PlaylistMetrics {
    recall: Vec<f64>,
    r_precision: Vec<f64>,
    ndcg: Vec<f64>,
    clicks: u32,
}

/// Scores every ground-truth playlist. `artists` maps predicted track URIs
/// to artist URIs; without it no artist credit is given.
pub fn evaluate_run(
    predictions: &Submission,
    truth: &GroundTruth,
    artists: Option<&HashMap<String, String>>,
    cutoffs: &[usize],
    artist_weight: f64,
) -> Result<MetricReport, EvalError> {
    if cutoffs.contains(&0) {
        return Err(EvalError::BadCutoff);
    }
    let preds: HashMap<u64, &Vec<String>> = predictions.rows.iter().map(|(p, u)| (*p, u)).collect();
    let missing: Vec<u64> = truth.playlists.keys().copied().filter(|p| !preds.contains_key(p)).collect();
    if !missing.is_empty() {
        return Err(EvalError::MissingPids(missing));
    }
    let per: Vec<PlaylistMetrics> = truth
        .playlists
        .par_iter()
        .map(|(pid, held)| {
            let pred: Vec<&str> = preds[pid].iter().map(String::as_str).collect();
            let held_pairs: Vec<(&str, &str)> = {
                let mut seen = HashSet::new();
                held.iter()
                    .filter(|h| seen.insert(h.track_uri.as_str()))
                    .map(|h| (h.track_uri.as_str(), h.artist_uri.as_str()))
                    .collect()
            };
            let held_set: HashSet<&str> = held_pairs.iter().map(|h| h.0).collect();
            if held_set.is_empty() {
                return Err(EvalError::EmptyHeld);
            }
            let artist_of = |t: &str| artists.and_then(|m| m.get(t)).map(String::as_str);
            let mut m = PlaylistMetrics {
                recall: Vec::new(),
                r_precision: Vec::new(),
                ndcg: Vec::new(),
                clicks: clicks(&pred[..pred.len().min(CLICKS_DEPTH)], &held_set),
            };
            for &k in cutoffs {
                let top = &pred[..pred.len().min(k)];
                m.recall.push(recall_at(top, &held_set, k)?);
                m.r_precision.push(r_precision(top, &held_pairs, artist_of, artist_weight)?);
                m.ndcg.push(ndcg(top, &held_set, k)?);
            }
            Ok(m)
        })
        .collect::<Result<_, _>>()?;
    let n = per.len().max(1) as f64;
    let mean = |f: &dyn Fn(&PlaylistMetrics) -> &Vec<f64>| -> Vec<f64> {
        (0..cutoffs.len())
            .map(|c| per.iter().map(|m| f(m)[c]).sum::<f64>() / n)
            .collect()
    };
    Ok(MetricReport {
        playlists: per.len(),
        cutoffs: cutoffs.to_vec(),
        recall: mean(&|m| &m.recall),
        r_precision: mean(&|m| &m.r_precision),
        ndcg: mean(&|m| &m.ndcg),
        clicks: per.iter().map(|m| m.clicks as f64).sum::<f64>() / n,
        artist_credit: artists.is_some(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splits::HeldTrack;

    fn set(xs: &[u32]) -> HashSet<u32> {
        xs.iter().copied().collect()
    }

    #[test]
    fn r_precision_examples() {
        let held = [(1u32, 10u32), (2, 20)];
        let artist = |t: u32| Some(t * 10);
        assert_eq!(r_precision(&[1, 2, 9], &held, artist, 0.5).unwrap(), 1.0);
        assert_eq!(r_precision(&[7, 8, 1], &held, |_| Some(99u32), 0.5).unwrap(), 0.0);
        // exact hit on 1, track 5 shares track 2's artist
        let artist = |t: u32| Some(if t == 5 { 20 } else { t * 10 });
        assert_eq!(r_precision(&[1, 5], &held, artist, 0.5).unwrap(), 0.75);
        assert_eq!(r_precision(&[1, 5], &held, artist, 0.0).unwrap(), 0.5);
        assert_eq!(r_precision::<f64, u32, u32>(&[], &held, artist, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn artist_credit_spent_once() {
        // two misses by artist 20, only one held track of that artist
        let held = [(1u32, 10u32), (2, 20), (3, 30)];
        let artist = |t: u32| Some(if t >= 5 { 20 } else { t * 10 });
        assert!((r_precision(&[5, 6, 7], &held, artist, 0.5f64).unwrap() - 0.5 / 3.0).abs() < 1e-15);
        // a held track hit later in the top n keeps its credit for itself
        assert!((r_precision(&[5, 2, 9], &held, artist, 0.5f64).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg::<f64, u32>(&[1, 2], &set(&[1]), 10).unwrap(), 1.0);
        let v: f64 = ndcg(&[2, 1], &set(&[1]), 10).unwrap();
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert!((v - 0.6309).abs() < 1e-4);
        assert_eq!(ndcg::<f64, u32>(&[5, 6], &set(&[1]), 10).unwrap(), 0.0);
        assert!(matches!(ndcg::<f64, u32>(&[1], &set(&[1]), 0), Err(EvalError::BadCutoff)));
    }

    #[test]
    fn clicks_examples() {
        let held = set(&[100]);
        let mut pred: Vec<u32> = (1000..1500).collect();
        pred[0] = 100;
        assert_eq!(clicks(&pred, &held), 0);
        pred[0] = 1000;
        pred[24] = 100;
        assert_eq!(clicks(&pred, &held), 2);
        pred[24] = 1024;
        assert_eq!(clicks(&pred, &held), 51);
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at::<f64, u32>(&[1, 2], &set(&[1, 2]), 2).unwrap(), 1.0);
        assert_eq!(recall_at::<f64, u32>(&[], &set(&[1]), 5).unwrap(), 0.0);
        assert_eq!(recall_at::<f64, u32>(&[1, 9, 3], &set(&[1, 2, 3, 4]), 3).unwrap(), 0.5);
        assert!(matches!(recall_at::<f64, u32>(&[1], &set(&[]), 3), Err(EvalError::EmptyHeld)));
    }

    #[test]
    fn borda_examples() {
        let m = |r: &[(&str, usize)]| r.iter().map(|(t, k)| (t.to_string(), *k)).collect::<BTreeMap<_, _>>();
        let ranks = vec![m(&[("a", 1), ("b", 2), ("c", 3)]); 3];
        let s = borda_aggregate::<f64>(&ranks, default_points).unwrap();
        assert_eq!(s["a"], 6.0);
        let s = borda_aggregate::<f64>(&ranks[..1], default_points).unwrap();
        assert!(s["a"] > s["b"] && s["b"] > s["c"]);
        let bad = vec![m(&[("a", 1)]), m(&[("b", 1)])];
        assert!(matches!(borda_aggregate::<f64>(&bad, default_points), Err(EvalError::InconsistentTeams(_))));
    }

    fn truth(rows: &[(u64, &[&str])]) -> GroundTruth {
        GroundTruth {
            playlists: rows
                .iter()
                .map(|(p, ts)| {
                    let held = ts
                        .iter()
                        .map(|t| HeldTrack {
                            track_uri: t.to_string(),
                            artist_uri: format!("artist:{t}"),
                        })
                        .collect();
                    (*p, held)
                })
                .collect(),
        }
    }

    #[test]
    fn identity_run_scores_perfectly() {
        let t = truth(&[(1, &["a", "b"]), (2, &["c"])]);
        let sub = Submission {
            team: "x".into(),
            email: "x@y".into(),
            rows: vec![(1, vec!["a".into(), "b".into()]), (2, vec!["c".into()])],
        };
        let r = evaluate_run(&sub, &t, None, &REPORT_CUTOFFS, 0.5).unwrap();
        assert!(r.recall.iter().chain(&r.r_precision).chain(&r.ndcg).all(|&v| v == 1.0));
        assert_eq!(r.clicks, 0.0);
        assert!(MetricReport::table(&[("identity", &r)]).contains("Clicks@500"));
    }

    #[test]
    fn mean_clicks_and_missing_pids() {
        let t = truth(&[(1, &["a"]), (2, &["z"])]);
        let far: Vec<String> = (0..100).map(|i| if i == 100 - 1 { "z".into() } else { format!("n{i}") }).collect();
        let sub = Submission {
            rows: vec![(1, vec!["a".into()]), (2, far)],
            ..Submission::default()
        };
        let r = evaluate_run(&sub, &t, None, &[10], 0.5).unwrap();
        assert_eq!(r.clicks, (0.0 + 9.0) / 2.0);
        let sub = Submission {
            rows: vec![(1, vec!["a".into()])],
            ..Submission::default()
        };
        assert!(matches!(evaluate_run(&sub, &t, None, &[10], 0.5), Err(EvalError::MissingPids(p)) if p == vec![2]));
    }

    #[test]
    fn submission_round_trip() {
        let sub = Submission {
            team: "team".into(),
            email: "a@b.c".into(),
            rows: vec![(5, vec!["u1".into(), "u2".into()]), (3, vec!["u3".into()])],
        };
        let mut buf = Vec::new();
        sub.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("team_info,team,a@b.c\n5,u1,u2\n"));
        assert_eq!(Submission::parse(&text).unwrap(), sub);
        assert!(Submission::parse("pid,x\n").is_err());
        assert!(Submission::parse("team_info,t,e\n1,a\n1,b\n").is_err());
    }
}
