//! Retrieval evaluation: flat mAP, hierarchical precision, and nDCG.
//!
//! Flat relevance is leaf-class identity. Hierarchical metrics grade each
//! returned item by a similarity score between its label path and the
//! query's; the default score is the number of shared levels, and any
//! alternative can be injected as a closure. HP@N divides the achieved
//! top-N similarity mass by the best mass any N database items could
//! provide; AHP@n averages HP@m over the cut-offs m = 1..n, and mAHP
//! averages that over queries (mirroring how AP averages precision over
//! cut-offs). nDCG uses exponential gain 2^sim - 1 with a log2(rank+1)
//! discount by default; linear gain is available.
//!
//! Zero-denominator conventions: a query with no relevant database item has
//! AP 0; HP@N and nDCG are 1 when the ideal score is 0 (vacuously perfect).
//! Both cases are counted in the report.

use std::collections::{HashMap, HashSet};
use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::hierarchy::LabelPath;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("ranking has {have} items, need {need}")]
    RankTooShort { need: usize, have: usize },
    #[error("invalid retrieval run: {0}")]
    InvalidRun(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Similarity between two label paths; higher means more related.
pub trait SimFn: Fn(&LabelPath, &LabelPath) -> f64 {}
impl<F: Fn(&LabelPath, &LabelPath) -> f64> SimFn for F {}

/// Default similarity: the count of levels at which the paths agree.
pub fn shared_level_sim(a: &LabelPath, b: &LabelPath) -> f64 {
    a.shared_with(b) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainForm {
    /// 2^sim - 1.
    Exponential,
    /// sim itself.
    Linear,
}

impl GainForm {
    fn eval(self, sim: f64) -> f64 {
        match self {
            GainForm::Exponential => 2f64.powf(sim) - 1.0,
            GainForm::Linear => sim,
        }
    }
}

/// Per-query ranked retrieval results against one database.
#[derive(Debug, Clone)]
pub struct RetrievalRun {
    rankings: Vec<Vec<u64>>,
    query_paths: Vec<LabelPath>,
    db_ids: Vec<u64>,
    db_paths: Vec<LabelPath>,
    id_to_pos: HashMap<u64, usize>,
    /// Per-query database id to ignore entirely (the query itself).
    excluded: Vec<Option<u64>>,
}

impl RetrievalRun {
    pub fn new(
        rankings: Vec<Vec<u64>>,
        query_paths: Vec<LabelPath>,
        db_ids: Vec<u64>,
        db_paths: Vec<LabelPath>,
    ) -> Result<Self, MetricError> {
        if rankings.len() != query_paths.len() {
            return Err(MetricError::InvalidRun(format!(
                "{} rankings for {} queries",
                rankings.len(),
                query_paths.len()
            )));
        }
        if db_ids.len() != db_paths.len() {
            return Err(MetricError::InvalidRun(format!(
                "{} db ids for {} db paths",
                db_ids.len(),
                db_paths.len()
            )));
        }
        let mut id_to_pos = HashMap::with_capacity(db_ids.len());
        for (pos, &id) in db_ids.iter().enumerate() {
            if id_to_pos.insert(id, pos).is_some() {
                return Err(MetricError::InvalidRun(format!("duplicate db id {id}")));
            }
        }
        for (q, ranking) in rankings.iter().enumerate() {
            let mut uniq = HashSet::with_capacity(ranking.len());
            for &id in ranking {
                if !id_to_pos.contains_key(&id) {
                    return Err(MetricError::InvalidRun(format!(
                        "query {q} ranks unknown id {id}"
                    )));
                }
                if !uniq.insert(id) {
                    return Err(MetricError::InvalidRun(format!(
                        "query {q} ranks id {id} twice"
                    )));
                }
            }
        }
        let excluded = vec![None; query_paths.len()];
        Ok(RetrievalRun {
            rankings,
            query_paths,
            db_ids,
            db_paths,
            id_to_pos,
            excluded,
        })
    }

    /// Excludes each query's own database entry (matched by id) from its
    /// ranking and from the ideal orderings. Use when queries are drawn
    /// from the database itself.
    pub fn with_self_exclusion(mut self, query_ids: &[u64]) -> Result<Self, MetricError> {
        if query_ids.len() != self.query_paths.len() {
            return Err(MetricError::InvalidRun(format!(
                "{} query ids for {} queries",
                query_ids.len(),
                self.query_paths.len()
            )));
        }
        for (q, &id) in query_ids.iter().enumerate() {
            if self.id_to_pos.contains_key(&id) {
                self.excluded[q] = Some(id);
                self.rankings[q].retain(|&r| r != id);
            }
        }
        Ok(self)
    }

    pub fn query_count(&self) -> usize {
        self.query_paths.len()
    }

    pub fn db_len(&self) -> usize {
        self.db_ids.len()
    }

    /// Database size as seen by query `q` (minus a self-match, if any).
    pub fn effective_db_len(&self, q: usize) -> usize {
        self.db_len() - usize::from(self.excluded[q].is_some())
    }

    pub fn ranking(&self, q: usize) -> &[u64] {
        &self.rankings[q]
    }

    fn path_of(&self, id: u64) -> &LabelPath {
        &self.db_paths[self.id_to_pos[&id]]
    }

    /// Similarity of every (non-excluded) database item to query `q`, in
    /// database order.
    fn db_sims<S: SimFn>(&self, q: usize, sim: &S) -> Vec<f64> {
        let query = &self.query_paths[q];
        self.db_ids
            .iter()
            .zip(&self.db_paths)
            .filter(|(id, _)| Some(**id) != self.excluded[q])
            .map(|(_, path)| sim(query, path))
            .collect()
    }

    /// Average precision over query `q`'s full ranking with leaf-class
    /// relevance; 0 when the database holds no relevant item.
    pub fn average_precision(&self, q: usize) -> f64 {
        let query = &self.query_paths[q];
        let rels = self.rankings[q]
            .iter()
            .map(|&id| self.path_of(id).leaf() == query.leaf());
        average_precision_from_relevance(rels)
    }

    /// HP@n for query `q`: achieved top-n similarity mass over the best
    /// possible top-n mass; 1 when the best mass is 0.
    pub fn hierarchical_precision_at<S: SimFn>(
        &self,
        q: usize,
        n: usize,
        sim: &S,
    ) -> Result<f64, MetricError> {
        let ranking = &self.rankings[q];
        if n > ranking.len() || n > self.effective_db_len(q) {
            return Err(MetricError::RankTooShort {
                need: n,
                have: ranking.len().min(self.effective_db_len(q)),
            });
        }
        let query = &self.query_paths[q];
        let achieved: f64 = ranking[..n]
            .iter()
            .map(|&id| sim(query, self.path_of(id)))
            .sum();
        let mut sims = self.db_sims(q, sim);
        sims.sort_unstable_by(|a, b| b.partial_cmp(a).unwrap());
        let ideal: f64 = sims[..n].iter().sum();
        Ok(if ideal > 0.0 { achieved / ideal } else { 1.0 })
    }

    /// AHP@n: mean of HP@m for m = 1..n.
    pub fn average_hierarchical_precision_at<S: SimFn>(
        &self,
        q: usize,
        n: usize,
        sim: &S,
    ) -> Result<f64, MetricError> {
        let ranking = &self.rankings[q];
        if n == 0 || n > ranking.len() || n > self.effective_db_len(q) {
            return Err(MetricError::RankTooShort {
                need: n.max(1),
                have: ranking.len().min(self.effective_db_len(q)),
            });
        }
        let query = &self.query_paths[q];
        let mut sims = self.db_sims(q, sim);
        sims.sort_unstable_by(|a, b| b.partial_cmp(a).unwrap());
        let mut achieved = 0.0;
        let mut ideal = 0.0;
        let mut acc = 0.0;
        for m in 0..n {
            achieved += sim(query, self.path_of(ranking[m]));
            ideal += sims[m];
            acc += if ideal > 0.0 { achieved / ideal } else { 1.0 };
        }
        Ok(acc / n as f64)
    }

    /// nDCG@n with graded similarity relevance; 1 when the ideal DCG is 0.
    pub fn ndcg_at<S: SimFn>(
        &self,
        q: usize,
        n: usize,
        sim: &S,
        gain: GainForm,
    ) -> Result<f64, MetricError> {
        let ranking = &self.rankings[q];
        if n > ranking.len() || n > self.effective_db_len(q) {
            return Err(MetricError::RankTooShort {
                need: n,
                have: ranking.len().min(self.effective_db_len(q)),
            });
        }
        let query = &self.query_paths[q];
        let dcg: f64 = ranking[..n]
            .iter()
            .enumerate()
            .map(|(i, &id)| gain.eval(sim(query, self.path_of(id))) / ((i + 2) as f64).log2())
            .sum();
        let mut sims = self.db_sims(q, sim);
        sims.sort_unstable_by(|a, b| b.partial_cmp(a).unwrap());
        let idcg: f64 = sims[..n]
            .iter()
            .enumerate()
            .map(|(i, &s)| gain.eval(s) / ((i + 2) as f64).log2())
            .sum();
        Ok(if idcg > 0.0 { dcg / idcg } else { 1.0 })
    }
}

/// AP from a relevance sequence over a full ranking. The number of relevant
/// items in the sequence is the normalizer, so pass the complete database
/// ranking.
pub fn average_precision_from_relevance(rels: impl Iterator<Item = bool>) -> f64 {
    let mut hits = 0usize;
    let mut acc = 0.0;
    let mut seen = 0usize;
    for rel in rels {
        seen += 1;
        if rel {
            hits += 1;
            acc += hits as f64 / seen as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        acc / hits as f64
    }
}

/// Standalone AP over ranked label paths (full ranking), leaf relevance.
pub fn average_precision(ranked: &[LabelPath], query: &LabelPath) -> f64 {
    average_precision_from_relevance(ranked.iter().map(|p| p.leaf() == query.leaf()))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PerQueryMetrics {
    pub ap: f64,
    pub ahp: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub map: f64,
    pub mahp: f64,
    pub ndcg: f64,
    pub mahp_k: usize,
    pub ndcg_k: usize,
    pub query_count: usize,
    pub db_count: usize,
    /// Queries with no relevant database item (AP pinned to 0).
    pub queries_without_relevant: usize,
    /// Queries whose ideal hierarchical mass was 0 (HP/nDCG pinned to 1).
    pub queries_with_zero_ideal: usize,
    pub per_query: Vec<PerQueryMetrics>,
}

#[derive(Debug, Clone, Copy)]
pub struct MetricParams {
    pub mahp_k: usize,
    pub ndcg_k: usize,
    pub gain: GainForm,
}

impl Default for MetricParams {
    fn default() -> Self {
        MetricParams {
            mahp_k: 100,
            ndcg_k: 100,
            gain: GainForm::Exponential,
        }
    }
}

/// Evaluates mAP@all, mAHP@K, and nDCG@K over every query.
pub fn compute_metrics<S: SimFn>(
    run: &RetrievalRun,
    params: &MetricParams,
    sim: &S,
) -> Result<MetricReport, MetricError> {
    let q_count = run.query_count();
    if q_count == 0 {
        return Err(MetricError::InvalidRun("no queries".into()));
    }
    let mut per_query = Vec::with_capacity(q_count);
    let mut queries_without_relevant = 0;
    let mut queries_with_zero_ideal = 0;
    for q in 0..q_count {
        let ap = run.average_precision(q);
        let query = &run.query_paths[q];
        let any_relevant = run
            .rankings[q]
            .iter()
            .any(|&id| run.path_of(id).leaf() == query.leaf());
        if !any_relevant {
            queries_without_relevant += 1;
        }
        let max_sim = run
            .db_sims(q, sim)
            .into_iter()
            .fold(0.0f64, f64::max);
        if max_sim == 0.0 {
            queries_with_zero_ideal += 1;
        }
        let ahp = run.average_hierarchical_precision_at(q, params.mahp_k, sim)?;
        let ndcg = run.ndcg_at(q, params.ndcg_k, sim, params.gain)?;
        per_query.push(PerQueryMetrics { ap, ahp, ndcg });
    }
    let mean = |f: fn(&PerQueryMetrics) -> f64| -> f64 {
        per_query.iter().map(f).sum::<f64>() / q_count as f64
    };
    Ok(MetricReport {
        map: mean(|m| m.ap),
        mahp: mean(|m| m.ahp),
        ndcg: mean(|m| m.ndcg),
        mahp_k: params.mahp_k,
        ndcg_k: params.ndcg_k,
        query_count: q_count,
        db_count: run.db_len(),
        queries_without_relevant,
        queries_with_zero_ideal,
        per_query,
    })
}

impl MetricReport {
    /// Per-query values as CSV for inspection.
    pub fn write_per_query_csv<W: Write>(&self, w: W) -> Result<(), MetricError> {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["query", "ap", "ahp", "ndcg"])
            .map_err(|e| MetricError::InvalidRun(e.to_string()))?;
        for (q, m) in self.per_query.iter().enumerate() {
            csv.write_record([
                q.to_string(),
                m.ap.to_string(),
                m.ahp.to_string(),
                m.ndcg.to_string(),
            ])
            .map_err(|e| MetricError::InvalidRun(e.to_string()))?;
        }
        csv.flush()?;
        Ok(())
    }
}
