//! Ranking retrieval: a tanh similarity over the fused pooled state, circle
//! loss on positive/negative scores, and per-epoch hard-negative mining.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    circle_loss_var, encode_pooled, run_stage, EvalReport, FinetuneConfig, RetrievalConfig, StageTask, StepLog, Task,
    HEAD_STREAM, NEGATIVE_STREAM, POOL_STREAM,
};
use crate::encoder::{Dropout, Mode, ObjectInput, SharedParams, TextInput};
use crate::error::{Error, Result};
use crate::heads::LinearHead;
use crate::seed;
use crate::synthworld::{Level, Record};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// A caption queries a pool of images.
    TextToImage,
    /// An image queries a pool of captions.
    ImageToText,
}

impl Direction {
    /// The (text, image) pair scored for `query` against `candidate`.
    pub fn pair(self, records: &[Record], level: Level, query: usize, candidate: usize) -> (&TextInput, &ObjectInput) {
        match self {
            Direction::TextToImage => (records[query].caption(level), &records[candidate].objects),
            Direction::ImageToText => (records[candidate].caption(level), &records[query].objects),
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            Direction::TextToImage => "image_retrieval",
            Direction::ImageToText => "text_retrieval",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimilarityHead {
    pub linear: LinearHead,
}

impl SimilarityHead {
    pub fn ensure(params: &mut SharedParams, rng: &mut impl Rng) -> Result<Self> {
        let d = params.config.hidden_dim;
        Ok(SimilarityHead {
            linear: LinearHead::ensure(params, "similarity", d, 1, rng)?,
        })
    }

    /// One tanh score per pooled row, as an `n×1` column.
    pub fn scores<'g>(&self, g: &'g Graph, params: &SharedParams, pooled: Var<'g>) -> Result<Var<'g>> {
        self.linear.forward(g, params, pooled)?.tanh()
    }
}

pub fn similarity_score(
    params: &SharedParams,
    head: &SimilarityHead,
    mode: Mode,
    text: &TextInput,
    objects: &ObjectInput,
) -> Result<f64> {
    let g = Graph::new();
    let pooled = encode_pooled(&g, params, mode, &[(text, objects)], &mut Dropout::off())?;
    Ok(head.scores(&g, params, pooled)?.item())
}

/// Scores every candidate and returns the `k` highest as `(index, score)`,
/// best first; ties keep candidate order.
pub fn mine_hard_negatives<T>(candidates: &[T], k: usize, mut score: impl FnMut(&T) -> Result<f64>) -> Result<Vec<(usize, f64)>> {
    if k > candidates.len() {
        return Err(Error::invalid(
            "mine_hard_negatives",
            format!("k = {k} exceeds {} candidates", candidates.len()),
        ));
    }
    let mut scored = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| Ok((i, score(c)?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    scored.truncate(k);
    Ok(scored)
}

/// A query against candidates holding exactly one positive. Indices refer
/// to the record list the pools were built over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalPool {
    pub query: usize,
    pub candidates: Vec<usize>,
    /// Position of the query's own record in `candidates`.
    pub positive: usize,
    pub scores: Vec<f64>,
}

impl RetrievalPool {
    /// 1-based rank of the positive; tied negatives rank ahead of it.
    pub fn rank(&self) -> usize {
        let p = self.scores[self.positive];
        1 + self
            .scores
            .iter()
            .enumerate()
            .filter(|&(i, &s)| i != self.positive && s >= p)
            .count()
    }
}

/// One pool per record: the record itself plus `pool_size - 1` others.
pub fn build_pools(n: usize, pool_size: usize, rng_seed: u64) -> Result<Vec<RetrievalPool>> {
    if pool_size < 2 || pool_size > n {
        return Err(Error::invalid(
            "build_pools",
            format!("pool size {pool_size} needs 2..={n} records"),
        ));
    }
    let mut rng = seed::rng(rng_seed);
    (0..n)
        .map(|q| {
            let mut candidates: Vec<usize> = index::sample(&mut rng, n - 1, pool_size - 1)
                .into_iter()
                .map(|i| if i >= q { i + 1 } else { i })
                .collect();
            candidates.push(q);
            candidates.shuffle(&mut rng);
            let positive = candidates.iter().position(|&c| c == q).expect("query was inserted");
            Ok(RetrievalPool {
                query: q,
                candidates,
                positive,
                scores: Vec::new(),
            })
        })
        .collect()
}

/// Fills every pool's scores with `score(query, candidate)`.
pub fn rank_pools(pools: &mut [RetrievalPool], mut score: impl FnMut(usize, usize) -> Result<f64>) -> Result<()> {
    for pool in pools {
        pool.scores = pool.candidates.iter().map(|&c| score(pool.query, c)).collect::<Result<_>>()?;
    }
    Ok(())
}

/// Fraction of pools whose positive ranks within the top `k`.
pub fn recall_at(pools: &[RetrievalPool], k: usize) -> f64 {
    if pools.is_empty() {
        return 0.0;
    }
    pools.iter().filter(|p| p.rank() <= k).count() as f64 / pools.len() as f64
}

/// `n×1` column to `1×n` row, via a product with a 1×1 one.
fn column_to_row<'g>(g: &'g Graph, col: Var<'g>) -> Result<Var<'g>> {
    g.constant(Tensor::new(vec![1, 1], vec![1.0])?).matmul_bt(&col)
}

struct RetrievalStage<'a> {
    records: &'a [Record],
    head: SimilarityHead,
    mode: Mode,
    cfg: RetrievalConfig,
    m: f64,
    gamma: f64,
    run_seed: u64,
    queries: Vec<usize>,
    negatives: Vec<Vec<usize>>,
}

impl RetrievalStage<'_> {
    fn others(&self, rng: &mut impl Rng, q: usize, k: usize) -> Vec<usize> {
        let n = self.records.len();
        index::sample(rng, n - 1, k)
            .into_iter()
            .map(|i| if i >= q { i + 1 } else { i })
            .collect()
    }
}

impl StageTask for RetrievalStage<'_> {
    fn num_examples(&self) -> usize {
        self.cfg
            .queries_per_epoch
            .unwrap_or(self.records.len())
            .min(self.records.len())
    }

    /// Draws the epoch's queries; the first epoch uses random negatives and
    /// later ones the current model's hardest.
    fn before_epoch(&mut self, params: &SharedParams, epoch: usize) -> Result<()> {
        let mut rng = seed::derived_rng(self.run_seed, NEGATIVE_STREAM, epoch as u64);
        let n = self.records.len();
        self.queries = index::sample(&mut rng, n, self.num_examples()).into_vec();
        let mut negatives = Vec::with_capacity(self.queries.len());
        for &q in &self.queries {
            if epoch == 0 {
                negatives.push(self.others(&mut rng, q, self.cfg.negatives));
                continue;
            }
            let pool = self.others(&mut rng, q, self.cfg.mining_pool);
            let hard = mine_hard_negatives(&pool, self.cfg.negatives, |&c| {
                let (t, o) = self.cfg.direction.pair(self.records, self.cfg.level, q, c);
                similarity_score(params, &self.head, self.mode, t, o)
            })?;
            negatives.push(hard.into_iter().map(|(i, _)| pool[i]).collect());
        }
        self.negatives = negatives;
        Ok(())
    }

    fn loss<'g>(&mut self, g: &'g Graph, params: &SharedParams, batch: &[usize], dropout: &mut Dropout) -> Result<Var<'g>> {
        let mut total: Option<Var<'g>> = None;
        for &i in batch {
            let q = self.queries[i];
            let mut pairs = vec![self.cfg.direction.pair(self.records, self.cfg.level, q, q)];
            pairs.extend(
                self.negatives[i]
                    .iter()
                    .map(|&c| self.cfg.direction.pair(self.records, self.cfg.level, q, c)),
            );
            let pooled = encode_pooled(g, params, self.mode, &pairs, dropout)?;
            let scores = column_to_row(g, self.head.scores(g, params, pooled)?)?;
            let pos = scores.slice_cols(0, 1)?;
            let neg = scores.slice_cols(1, pairs.len())?;
            let l = circle_loss_var(g, pos, neg, self.m, self.gamma)?;
            total = Some(match total {
                None => l,
                Some(t) => t.add(&l)?,
            });
        }
        total.ok_or(Error::Empty("retrieval batch"))?.scale(1.0 / batch.len() as f64)
    }
}

/// Fine-tunes the similarity head with circle loss; negatives are random in
/// the first epoch and mined from the current model at every later epoch.
/// The head `finetune_retrieval` starts from under `run_seed`; scoring with
/// it first gives the pre-fine-tuning baseline.
pub fn init_similarity_head(params: &mut SharedParams, run_seed: u64) -> Result<SimilarityHead> {
    SimilarityHead::ensure(params, &mut seed::derived_rng(run_seed, HEAD_STREAM, 0))
}

pub fn finetune_retrieval(
    params: &mut SharedParams,
    config: &FinetuneConfig,
    train: &[Record],
    run_seed: u64,
    on_step: &mut dyn FnMut(&StepLog) -> Result<()>,
) -> Result<SimilarityHead> {
    config.validate()?;
    if train.len() <= config.retrieval.mining_pool {
        return Err(Error::invalid(
            "finetune_retrieval",
            format!(
                "{} records cannot supply {} mining candidates",
                train.len(),
                config.retrieval.mining_pool
            ),
        ));
    }
    let head = init_similarity_head(params, run_seed)?;
    let mut stage = RetrievalStage {
        records: train,
        head,
        mode: config.mode,
        cfg: config.retrieval.clone(),
        m: config.circle_m,
        gamma: config.circle_gamma,
        run_seed,
        queries: Vec::new(),
        negatives: Vec::new(),
    };
    run_stage(params, config.stage(0), 0, run_seed, &mut stage, on_step)?;
    Ok(head)
}

/// Scores fresh pools over `records` and reports R@1, R@5 and R@10.
pub fn eval_retrieval(
    params: &SharedParams,
    head: &SimilarityHead,
    mode: Mode,
    records: &[Record],
    cfg: &RetrievalConfig,
    eval_seed: u64,
) -> Result<(Vec<EvalReport>, Vec<RetrievalPool>)> {
    let mut pools = build_pools(records.len(), cfg.pool_size, seed::derive(eval_seed, POOL_STREAM, 0))?;
    rank_pools(&mut pools, |q, c| {
        let (t, o) = cfg.direction.pair(records, cfg.level, q, c);
        similarity_score(params, head, mode, t, o)
    })?;
    let reports = [1, 5, 10]
        .into_iter()
        .map(|k| EvalReport {
            task: Task::Retrieval,
            mode,
            metric_name: format!("{}_r@{k}", cfg.direction.prefix()),
            value: recall_at(&pools, k),
            n_examples: pools.len(),
            seed: eval_seed,
        })
        .collect();
    Ok((reports, pools))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pools_hold_one_positive() {
        let pools = build_pools(30, 20, 4).unwrap();
        assert_eq!(pools.len(), 30);
        for p in &pools {
            assert_eq!(p.candidates.len(), 20);
            assert_eq!(p.candidates[p.positive], p.query);
            let mut c = p.candidates.clone();
            c.sort_unstable();
            c.dedup();
            assert_eq!(c.len(), 20);
        }
        assert!(build_pools(10, 20, 0).is_err());
    }

    #[test]
    fn ties_rank_pessimistically() {
        let p = RetrievalPool {
            query: 0,
            candidates: vec![0, 1, 2],
            positive: 0,
            scores: vec![0.5, 0.5, 0.1],
        };
        assert_eq!(p.rank(), 2);
    }

    #[test]
    fn mining_sorts_and_bounds() {
        let xs = [0.3, 0.9, -0.2, 0.5];
        let top = mine_hard_negatives(&xs, 4, |&x| Ok(x)).unwrap();
        assert_eq!(top.iter().map(|t| t.0).collect::<Vec<_>>(), vec![1, 3, 0, 2]);
        assert!(mine_hard_negatives(&xs, 5, |&x| Ok(x)).is_err());
    }
}
