//! Two-stage matching and Re-ID metrics.
//!
//! Gallery entries are first ranked by cosine distance on the global
//! embedding; the top `N` are then re-scored with confidence-weighted
//! distances between pose-group embeddings.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use pirt_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{PirtError, Result};
use crate::pose::NUM_GROUPS;

/// Keeps the local distance finite when every group weight vanishes.
pub const WEIGHT_EPS: f64 = 1e-8;

/// Pose-group part of an embedding record.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalEmbedding {
    pub groups: [Vec<f64>; NUM_GROUPS],
    pub confidences: [f64; NUM_GROUPS],
    pub visible: [bool; NUM_GROUPS],
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub identity: usize,
    pub camera: usize,
    pub global: Vec<f64>,
    /// Absent for models without the pose branch.
    pub local: Option<LocalEmbedding>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScoreMode {
    #[serde(rename = "QG")]
    QueryGallery,
    #[serde(rename = "Q")]
    Query,
    #[serde(rename = "G")]
    Gallery,
    #[serde(rename = "none")]
    Uniform,
}

impl ScoreMode {
    pub const ALL: [ScoreMode; 4] = [ScoreMode::QueryGallery, ScoreMode::Query, ScoreMode::Gallery, ScoreMode::Uniform];

    fn weight(self, q: f64, g: f64) -> f64 {
        match self {
            ScoreMode::QueryGallery => q * g,
            ScoreMode::Query => q,
            ScoreMode::Gallery => g,
            ScoreMode::Uniform => 1.0,
        }
    }
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreMode::QueryGallery => "QG",
            ScoreMode::Query => "Q",
            ScoreMode::Gallery => "G",
            ScoreMode::Uniform => "none",
        })
    }
}

impl FromStr for ScoreMode {
    type Err = PirtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "QG" | "qg" => Ok(ScoreMode::QueryGallery),
            "Q" | "q" => Ok(ScoreMode::Query),
            "G" | "g" => Ok(ScoreMode::Gallery),
            "none" => Ok(ScoreMode::Uniform),
            other => Err(PirtError::Config(format!("unknown score mode {other:?}; expected QG, Q, G or none"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub top_n: usize,
    pub lambda: f64,
    pub score_mode: ScoreMode,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            top_n: 100,
            lambda: 0.5,
            score_mode: ScoreMode::QueryGallery,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_n == 0 {
            return Err(PirtError::Config("re-ranking depth must be at least 1".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(PirtError::Config(format!("lambda must be a finite non-negative value, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Gallery indices with distances, ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct RankList {
    pub query: usize,
    pub entries: Vec<(usize, f64)>,
}

impl RankList {
    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.0).collect()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `1 - cos(a, b)`; a zero vector is at distance 1 from everything.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let n = norm(a) * norm(b);
    if n == 0.0 {
        1.0
    } else {
        1.0 - dot(a, b) / n
    }
}

/// Gallery ordered by global cosine distance, excluding entries that share
/// both identity and camera with the query.
pub fn coarse_rank(query_index: usize, query: &EmbeddingRecord, gallery: &[EmbeddingRecord]) -> Result<RankList> {
    if gallery.is_empty() {
        return Err(PirtError::Contract("gallery is empty".into()));
    }
    let qn = norm(&query.global);
    if !(qn > 0.0 && qn.is_finite()) {
        return Err(PirtError::Numeric(format!("query {query_index} has a degenerate global embedding (norm {qn})")));
    }
    let mut entries = Vec::with_capacity(gallery.len());
    for (i, g) in gallery.iter().enumerate() {
        if g.identity == query.identity && g.camera == query.camera {
            continue;
        }
        let gn = norm(&g.global);
        if !(gn > 0.0 && gn.is_finite()) {
            return Err(PirtError::Numeric(format!("gallery record {i} has a degenerate global embedding (norm {gn})")));
        }
        if g.global.len() != query.global.len() {
            return Err(PirtError::Contract(format!(
                "gallery record {i} has width {}, query has {}",
                g.global.len(),
                query.global.len()
            )));
        }
        entries.push((i, 1.0 - dot(&query.global, &g.global) / (qn * gn)));
    }
    entries.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(RankList { query: query_index, entries })
}

/// Confidence-weighted mean of per-group cosine distances; zero when no
/// group is visible on both sides.
pub fn local_distance(q: &LocalEmbedding, g: &LocalEmbedding, mode: ScoreMode) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..NUM_GROUPS {
        if !(q.visible[k] && g.visible[k]) {
            continue;
        }
        let w = mode.weight(q.confidences[k], g.confidences[k]);
        num += w * cosine_distance(&q.groups[k], &g.groups[k]);
        den += w;
    }
    num / (den + WEIGHT_EPS)
}

/// Re-scores the first `N` entries as `d_global + lambda * d_local` and
/// re-sorts only that block; later entries keep their order behind it.
pub fn local_rerank(query: &EmbeddingRecord, ranks: &RankList, gallery: &[EmbeddingRecord], config: &MatchConfig) -> RankList {
    let n = config.top_n.min(ranks.entries.len());
    let Some(ql) = &query.local else {
        return ranks.clone();
    };
    let locals: Vec<f64> = ranks.entries[..n]
        .iter()
        .map(|&(g, _)| gallery[g].local.as_ref().map_or(0.0, |gl| local_distance(ql, gl, config.score_mode)))
        .collect();
    let max_local = locals.iter().copied().fold(0.0, f64::max);
    // (original position, gallery index, re-scored distance)
    let mut scored: Vec<(usize, usize, f64)> = ranks.entries[..n]
        .iter()
        .zip(&locals)
        .enumerate()
        .map(|(pos, (&(g, dg), dl))| (pos, g, dg + config.lambda * dl))
        .collect();
    scored.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)));
    let mut entries: Vec<(usize, f64)> = scored.into_iter().map(|(_, g, d)| (g, d)).collect();
    entries.extend(ranks.entries[n..].iter().map(|&(g, dg)| (g, dg + config.lambda * max_local)));
    RankList { query: ranks.query, entries }
}

/// Coarse ranking then local re-ranking for every query.
pub fn rank_all(queries: &[EmbeddingRecord], gallery: &[EmbeddingRecord], config: &MatchConfig) -> Result<Vec<RankList>> {
    config.validate()?;
    queries
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let coarse = coarse_rank(i, q, gallery)?;
            Ok(local_rerank(q, &coarse, gallery, config))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    /// Match rate at ranks `1..=k_max`.
    pub cmc: Vec<f64>,
    #[serde(rename = "mAP")]
    pub map: f64,
    /// Average precision of each evaluated query, in query order.
    #[serde(skip)]
    pub aps: Vec<f64>,
    pub n_queries: usize,
    /// Queries without any valid gallery match.
    #[serde(skip)]
    pub skipped: Vec<usize>,
}

impl EvalReport {
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc[(k.min(self.cmc.len())).max(1) - 1]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("rank,cmc\n");
        for (i, v) in self.cmc.iter().enumerate() {
            s.push_str(&format!("{},{v}\n", i + 1));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// CMC and mAP over rank lists. Same-identity same-camera gallery entries
/// never count, even if present in a list.
pub fn evaluate(
    ranks: &[RankList],
    query_ids: &[(usize, usize)],
    gallery_ids: &[(usize, usize)],
    k_max: usize,
) -> Result<EvalReport> {
    if k_max == 0 {
        return Err(PirtError::Contract("k_max must be at least 1".into()));
    }
    let mut cmc = vec![0.0; k_max];
    let mut aps = Vec::new();
    let mut skipped = Vec::new();
    for list in ranks {
        let (qid, qcam) = query_ids[list.query];
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        let mut first = None;
        let mut rank = 0usize;
        for &(g, _) in &list.entries {
            let (gid, gcam) = gallery_ids[g];
            if gid == qid && gcam == qcam {
                continue;
            }
            rank += 1;
            if gid == qid {
                hits += 1;
                precision_sum += hits as f64 / rank as f64;
                first.get_or_insert(rank);
            }
        }
        let Some(first) = first else {
            skipped.push(list.query);
            continue;
        };
        for c in cmc.iter_mut().skip(first - 1) {
            *c += 1.0;
        }
        aps.push(precision_sum / hits as f64);
    }
    if aps.is_empty() {
        return Err(PirtError::Contract("no query has a valid gallery match".into()));
    }
    let n = aps.len() as f64;
    cmc.iter_mut().for_each(|c| *c /= n);
    Ok(EvalReport {
        cmc,
        map: aps.iter().sum::<f64>() / n,
        aps,
        n_queries: ranks.len() - skipped.len(),
        skipped,
    })
}

/// Full pipeline over embedding records.
pub fn evaluate_records(
    queries: &[EmbeddingRecord],
    gallery: &[EmbeddingRecord],
    config: &MatchConfig,
    k_max: usize,
) -> Result<EvalReport> {
    let ranks = rank_all(queries, gallery, config)?;
    let q: Vec<_> = queries.iter().map(|r| (r.identity, r.camera)).collect();
    let g: Vec<_> = gallery.iter().map(|r| (r.identity, r.camera)).collect();
    evaluate(&ranks, &q, &g, k_max)
}

const EMBED_MAGIC: &[u8; 4] = b"PEMB";
const EMBED_VERSION: u32 = 1;
pub const RECORDS_FILE: &str = "records.jsonl";
pub const PAYLOAD_FILE: &str = "embeddings.bin";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    identity: usize,
    camera: usize,
    confidences: Option<[f64; NUM_GROUPS]>,
    visible: Option<[bool; NUM_GROUPS]>,
    offset: u64,
}

/// Writes `records.jsonl` and `embeddings.bin` (double-precision tensors:
/// the global embedding, then the `[3, C]` group embeddings when present).
pub fn save_embeddings(dir: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| PirtError::io(format!("creating {}", dir.display()), e))?;
    let mut payload = Vec::new();
    payload.extend_from_slice(EMBED_MAGIC);
    payload.extend_from_slice(&EMBED_VERSION.to_le_bytes());
    let mut lines = String::new();
    for r in records {
        let line = RecordLine {
            identity: r.identity,
            camera: r.camera,
            confidences: r.local.as_ref().map(|l| l.confidences),
            visible: r.local.as_ref().map(|l| l.visible),
            offset: payload.len() as u64,
        };
        Tensor::new(&[r.global.len()], r.global.clone())?.write_to(&mut payload).expect("vec write");
        if let Some(l) = &r.local {
            let c = l.groups[0].len();
            let flat: Vec<f64> = l.groups.iter().flatten().copied().collect();
            Tensor::new(&[NUM_GROUPS, c], flat)?.write_to(&mut payload).expect("vec write");
        }
        lines.push_str(&serde_json::to_string(&line).expect("record serializes"));
        lines.push('\n');
    }
    let write = |name: &str, bytes: &[u8]| -> Result<()> {
        let path = dir.join(name);
        let f = fs::File::create(&path).map_err(|e| PirtError::io(format!("creating {}", path.display()), e))?;
        let mut w = BufWriter::new(f);
        w.write_all(bytes)
            .and_then(|_| w.flush())
            .map_err(|e| PirtError::io(format!("writing {}", path.display()), e))
    };
    write(PAYLOAD_FILE, &payload)?;
    write(RECORDS_FILE, lines.as_bytes())
}

pub fn load_embeddings(dir: &Path) -> Result<Vec<EmbeddingRecord>> {
    let read = |name: &str| -> Result<Vec<u8>> {
        let path = dir.join(name);
        let mut bytes = Vec::new();
        fs::File::open(&path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| PirtError::io(format!("reading {}", path.display()), e))?;
        Ok(bytes)
    };
    let payload = read(PAYLOAD_FILE)?;
    let text = String::from_utf8(read(RECORDS_FILE)?).map_err(|e| PirtError::Format {
        offset: e.utf8_error().valid_up_to() as u64,
        msg: "records file is not UTF-8".into(),
    })?;
    if payload.len() < 8 || &payload[..4] != EMBED_MAGIC {
        return Err(PirtError::Format { offset: 0, msg: "bad embedding payload magic".into() });
    }
    let version = u32::from_le_bytes(payload[4..8].try_into().unwrap());
    if version != EMBED_VERSION {
        return Err(PirtError::Format {
            offset: 4,
            msg: format!("unsupported embedding payload version {version}"),
        });
    }
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let rec: RecordLine = serde_json::from_str(line)
            .map_err(|e| PirtError::Config(format!("{}, line {}: {e}", RECORDS_FILE, n + 1)))?;
        if rec.offset as usize > payload.len() {
            return Err(PirtError::Format {
                offset: rec.offset,
                msg: format!("record {n} points past the end of the payload"),
            });
        }
        let mut cursor = &payload[rec.offset as usize..];
        let global: Tensor<f64> = Tensor::read_from(&mut cursor, rec.offset)?;
        let local = match (rec.confidences, rec.visible) {
            (Some(confidences), Some(visible)) => {
                let at = rec.offset + global.encoded_len() as u64;
                let groups: Tensor<f64> = Tensor::read_from(&mut cursor, at)?;
                if groups.shape() != [NUM_GROUPS, global.numel()] {
                    return Err(PirtError::Format {
                        offset: at,
                        msg: format!("group embeddings have shape {:?}", groups.shape()),
                    });
                }
                let c = global.numel();
                let row = |k: usize| groups.data()[k * c..(k + 1) * c].to_vec();
                Some(LocalEmbedding {
                    groups: [row(0), row(1), row(2)],
                    confidences,
                    visible,
                })
            }
            (None, None) => None,
            _ => return Err(PirtError::Config(format!("{RECORDS_FILE}, line {}: partial group data", n + 1))),
        };
        out.push(EmbeddingRecord {
            identity: rec.identity,
            camera: rec.camera,
            global: global.into_data(),
            local,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(identity: usize, camera: usize, global: Vec<f64>) -> EmbeddingRecord {
        EmbeddingRecord { identity, camera, global, local: None }
    }

    #[test]
    fn exact_copy_ranks_first() {
        let q = rec(0, 0, vec![1.0, 2.0, 3.0]);
        let g = vec![rec(1, 1, vec![3.0, 2.0, 1.0]), rec(0, 1, vec![1.0, 2.0, 3.0])];
        let r = coarse_rank(0, &q, &g).unwrap();
        assert_eq!(r.entries[0].0, 1);
        assert!(r.entries[0].1.abs() < 1e-15);
    }

    #[test]
    fn orthogonal_is_distance_one() {
        let q = rec(0, 0, vec![1.0, 0.0]);
        let r = coarse_rank(0, &q, &[rec(1, 0, vec![0.0, 2.0])]).unwrap();
        assert_eq!(r.entries[0].1, 1.0);
    }

    #[test]
    fn same_identity_same_camera_is_excluded() {
        let q = rec(0, 0, vec![1.0, 0.0]);
        let g = vec![rec(0, 0, vec![1.0, 0.0]), rec(0, 1, vec![1.0, 1.0]), rec(2, 0, vec![0.0, 1.0])];
        assert_eq!(coarse_rank(0, &q, &g).unwrap().indices(), vec![1, 2]);
    }

    #[test]
    fn zero_norm_names_the_record() {
        let q = rec(0, 0, vec![1.0, 0.0]);
        let err = coarse_rank(0, &q, &[rec(1, 1, vec![1.0, 0.0]), rec(1, 1, vec![0.0, 0.0])]).unwrap_err();
        assert!(matches!(&err, PirtError::Numeric(m) if m.contains("gallery record 1")), "{err}");
    }

    #[test]
    fn ties_break_by_gallery_index() {
        let q = rec(0, 0, vec![1.0, 0.0]);
        let g = vec![rec(3, 1, vec![0.0, 1.0]), rec(1, 1, vec![2.0, 0.0]), rec(2, 1, vec![0.0, 1.0])];
        assert_eq!(coarse_rank(0, &q, &g).unwrap().indices(), vec![1, 0, 2]);
    }

    #[test]
    fn metric_definitions() {
        let r = RankList { query: 0, entries: vec![(0, 0.1)] };
        let rep = evaluate(&[r], &[(1, 0)], &[(1, 1)], 3).unwrap();
        assert_eq!(rep.cmc, vec![1.0; 3]);
        assert_eq!(rep.map, 1.0);

        let r = RankList { query: 0, entries: vec![(0, 0.1), (1, 0.2)] };
        let rep = evaluate(&[r], &[(1, 0)], &[(2, 1), (1, 1)], 2).unwrap();
        assert_eq!(rep.cmc, vec![0.0, 1.0]);
        assert_eq!(rep.map, 0.5);
    }

    #[test]
    fn queries_without_matches_are_skipped() {
        let lists = vec![
            RankList { query: 0, entries: vec![(0, 0.1)] },
            RankList { query: 1, entries: vec![(0, 0.1)] },
        ];
        let rep = evaluate(&lists, &[(1, 0), (7, 0)], &[(1, 1)], 1).unwrap();
        assert_eq!(rep.skipped, vec![1]);
        assert_eq!(rep.n_queries, 1);
        let only_bad = vec![RankList { query: 0, entries: vec![(0, 0.1)] }];
        assert!(matches!(evaluate(&only_bad, &[(7, 0)], &[(1, 1)], 1), Err(PirtError::Contract(_))));
    }

    #[test]
    fn invisible_groups_fall_back_to_global() {
        let a = LocalEmbedding {
            groups: [vec![1.0], vec![1.0], vec![1.0]],
            confidences: [0.3; 3],
            visible: [false, true, false],
        };
        let b = LocalEmbedding {
            groups: [vec![-1.0], vec![1.0], vec![-1.0]],
            confidences: [0.3; 3],
            visible: [true, false, true],
        };
        assert_eq!(local_distance(&a, &b, ScoreMode::QueryGallery), 0.0);
    }

    #[test]
    fn score_mode_round_trips_through_text() {
        for m in ScoreMode::ALL {
            assert_eq!(m.to_string().parse::<ScoreMode>().unwrap(), m);
        }
        assert!("QQ".parse::<ScoreMode>().is_err());
    }
}
