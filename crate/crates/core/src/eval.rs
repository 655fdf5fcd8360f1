//! Leave-one-out top-N evaluation over the full item catalogue.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::SplitDataset;
use crate::error::{Error, Result};
use crate::model::{dot, FinalEmbeddings};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankResult {
    pub user: usize,
    /// 1-based position of the held-out item among the candidates.
    pub rank: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EvalMode {
    Validation,
    Test,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Validation => "validation",
            EvalMode::Test => "test",
        })
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "validation" | "val" => Ok(EvalMode::Validation),
            "test" => Ok(EvalMode::Test),
            _ => Err(Error::InvalidConfig(format!("unknown eval mode `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    /// In test mode, drop the user's validation item from the candidates.
    pub exclude_validation_in_test: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            exclude_validation_in_test: true,
        }
    }
}

/// Rank of `target` under the order (score desc, item id asc), counting only
/// items for which `excluded` is false.
pub fn rank_in_scores(scores: &[f64], target: usize, excluded: impl Fn(usize) -> bool) -> usize {
    let t = scores[target];
    let mut rank = 1;
    for (i, &s) in scores.iter().enumerate() {
        if i == target || excluded(i) {
            continue;
        }
        if s > t || (s == t && i < target) {
            rank += 1;
        }
    }
    rank
}

/// Ranks `target` for `user` against every item not in `exclusions`.
pub fn rank_heldout(
    fe: &FinalEmbeddings,
    user: usize,
    target: usize,
    exclusions: &[u32],
) -> Result<RankResult> {
    if user >= fe.n_users {
        return Err(Error::OutOfRange(format!("user {user}")));
    }
    let m = fe.n_items();
    if target >= m {
        return Err(Error::OutOfRange(format!("item {target}")));
    }
    if exclusions.contains(&(target as u32)) {
        return Err(Error::TargetExcluded { user, target });
    }
    let mut excluded = vec![false; m];
    for &i in exclusions {
        if let Some(slot) = excluded.get_mut(i as usize) {
            *slot = true;
        }
    }
    let u = fe.user(user);
    let t = dot(u, fe.item(target));
    let mut rank = 1;
    for (i, &skip) in excluded.iter().enumerate() {
        if i == target || skip {
            continue;
        }
        let s = dot(u, fe.item(i));
        if s > t || (s == t && i < target) {
            rank += 1;
        }
    }
    Ok(RankResult { user, rank })
}

/// Leave-one-out Recall@N, i.e. the hit rate.
pub fn recall_at_n(results: &[RankResult], n: usize) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::EmptyResults);
    }
    if n == 0 {
        return Err(Error::InvalidConfig("N must be >= 1".into()));
    }
    let hits = results.iter().filter(|r| r.rank <= n).count();
    Ok(hits as f64 / results.len() as f64)
}

/// Leave-one-out NDCG@N; with one relevant item the ideal DCG is 1.
pub fn ndcg_at_n(results: &[RankResult], n: usize) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::EmptyResults);
    }
    if n == 0 {
        return Err(Error::InvalidConfig("N must be >= 1".into()));
    }
    let gain: f64 = results
        .iter()
        .filter(|r| r.rank <= n)
        .map(|r| 1.0 / ((r.rank + 1) as f64).log2())
        .sum();
    Ok(gain / results.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub mode: EvalMode,
    pub n_values: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub users_evaluated: usize,
}

impl MetricsReport {
    /// `(recall, ndcg)` at cutoff `n`, if it was computed.
    pub fn at(&self, n: usize) -> Option<(f64, f64)> {
        let k = self.n_values.iter().position(|&x| x == n)?;
        Some((self.recall[k], self.ndcg[k]))
    }

    pub fn write_csv_header<W: Write>(mut w: W) -> Result<()> {
        writeln!(w, "mode,N,recall,ndcg,users")?;
        Ok(())
    }

    /// One `mode,N,recall,ndcg,users` row per cutoff.
    pub fn write_csv_rows<W: Write>(&self, mut w: W) -> Result<()> {
        for (k, n) in self.n_values.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{}",
                self.mode, n, self.recall[k], self.ndcg[k], self.users_evaluated
            )?;
        }
        Ok(())
    }
}

/// Per-user ranks of the held-out item for `mode`.
pub fn rank_all(
    fe: &FinalEmbeddings,
    ds: &SplitDataset,
    mode: EvalMode,
    opts: EvalOptions,
) -> Result<Vec<RankResult>> {
    if fe.n_users != ds.n_users() || fe.n_items() != ds.n_items() {
        return Err(Error::DimensionMismatch(format!(
            "embeddings cover {} users/{} items, dataset has {}/{}",
            fe.n_users,
            fe.n_items(),
            ds.n_users(),
            ds.n_items()
        )));
    }
    let ranks = (0..ds.n_users())
        .into_par_iter()
        .map(|u| {
            let (target, also_skip) = match mode {
                EvalMode::Validation => (ds.validation(u), None),
                EvalMode::Test => (
                    ds.test(u),
                    opts.exclude_validation_in_test.then(|| ds.validation(u)),
                ),
            };
            let scores = fe.score_all(u);
            let train = ds.train_sorted(u);
            let rank = rank_in_scores(&scores, target as usize, |i| {
                Some(i as u32) == also_skip || train.binary_search(&(i as u32)).is_ok()
            });
            RankResult { user: u, rank }
        })
        .collect();
    Ok(ranks)
}

pub fn evaluate(
    fe: &FinalEmbeddings,
    ds: &SplitDataset,
    mode: EvalMode,
    n_values: &[usize],
) -> Result<MetricsReport> {
    evaluate_with(fe, ds, mode, n_values, EvalOptions::default())
}

pub fn evaluate_with(
    fe: &FinalEmbeddings,
    ds: &SplitDataset,
    mode: EvalMode,
    n_values: &[usize],
    opts: EvalOptions,
) -> Result<MetricsReport> {
    let ranks = rank_all(fe, ds, mode, opts)?;
    let mut recall = Vec::with_capacity(n_values.len());
    let mut ndcg = Vec::with_capacity(n_values.len());
    for &n in n_values {
        recall.push(recall_at_n(&ranks, n)?);
        ndcg.push(ndcg_at_n(&ranks, n)?);
    }
    Ok(MetricsReport {
        mode,
        n_values: n_values.to_vec(),
        recall,
        ndcg,
        users_evaluated: ranks.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{init_embeddings, EmbeddingMatrix};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn rr(ranks: &[usize]) -> Vec<RankResult> {
        ranks
            .iter()
            .enumerate()
            .map(|(user, &rank)| RankResult { user, rank })
            .collect()
    }

    /// One user, item embeddings are 1-d scores.
    fn fe_from_scores(scores: &[f64]) -> FinalEmbeddings {
        let mut rows = vec![vec![1.0]];
        rows.extend(scores.iter().map(|&s| vec![s]));
        FinalEmbeddings {
            e_final: EmbeddingMatrix::from_rows(&rows).unwrap(),
            n_users: 1,
        }
    }

    #[test]
    fn unique_max_ranks_first() {
        let fe = fe_from_scores(&[0.1, 0.9, 0.3]);
        assert_eq!(rank_heldout(&fe, 0, 1, &[]).unwrap().rank, 1);
        assert_eq!(rank_heldout(&fe, 0, 0, &[]).unwrap().rank, 3);
        assert_eq!(rank_heldout(&fe, 0, 0, &[1]).unwrap().rank, 2);
    }

    #[test]
    fn ties_break_by_item_id() {
        let fe = fe_from_scores(&[0.5; 5]);
        assert_eq!(rank_heldout(&fe, 0, 0, &[]).unwrap().rank, 1);
        assert_eq!(rank_heldout(&fe, 0, 3, &[]).unwrap().rank, 4);
        assert_eq!(rank_heldout(&fe, 0, 3, &[0, 1]).unwrap().rank, 2);
        assert_eq!(rank_heldout(&fe, 0, 2, &[0, 1]).unwrap().rank, 1);
    }

    #[test]
    fn excluded_target_is_an_error() {
        let fe = fe_from_scores(&[0.5; 3]);
        assert!(matches!(
            rank_heldout(&fe, 0, 1, &[1]),
            Err(Error::TargetExcluded { .. })
        ));
    }

    #[test]
    fn full_sort_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            // coarse scores so that ties are common
            let scores: Vec<f64> = (0..50).map(|_| rng.random_range(0..20) as f64 / 4.0).collect();
            let excl: Vec<u32> = (0..50u32).filter(|_| rng.random_bool(0.2)).collect();
            let cands: Vec<usize> = (0..50).filter(|i| !excl.contains(&(*i as u32))).collect();
            if cands.is_empty() {
                continue;
            }
            let target = cands[rng.random_range(0..cands.len())];
            let mut order = cands.clone();
            order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
            let expect = order.iter().position(|&i| i == target).unwrap() + 1;
            let fe = fe_from_scores(&scores);
            assert_eq!(rank_heldout(&fe, 0, target, &excl).unwrap().rank, expect);
        }
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_n(&rr(&[3, 25]), 20).unwrap(), 0.5);
        assert_eq!(recall_at_n(&rr(&[1, 1, 1]), 20).unwrap(), 1.0);
        assert!(matches!(recall_at_n(&[], 20), Err(Error::EmptyResults)));
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_n(&rr(&[1]), 20).unwrap(), 1.0);
        assert_eq!(ndcg_at_n(&rr(&[3]), 20).unwrap(), 0.5);
        assert_eq!(ndcg_at_n(&rr(&[1, 3]), 20).unwrap(), 0.75);
        assert_eq!(ndcg_at_n(&rr(&[21]), 20).unwrap(), 0.0);
        assert!(matches!(ndcg_at_n(&[], 20), Err(Error::EmptyResults)));
    }

    #[test]
    fn uniform_scores_recall_expectation() {
        // held-out rank is uniform on 1..=M, so recall@N has mean N/M and
        // variance p(1-p)/U
        let (m, n, users) = (200usize, 20usize, 20_000usize);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let results: Vec<RankResult> = (0..users)
            .map(|user| {
                let scores: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
                RankResult {
                    user,
                    rank: rank_in_scores(&scores, 0, |_| false),
                }
            })
            .collect();
        let p = n as f64 / m as f64;
        let sigma = (p * (1.0 - p) / users as f64).sqrt();
        let got = recall_at_n(&results, n).unwrap();
        assert!((got - p).abs() < 5.0 * sigma, "recall {got} vs {p}");
    }

    fn small_dataset() -> SplitDataset {
        SplitDataset::from_parts(
            6,
            vec![vec![0, 1], vec![2, 3], vec![4, 0]],
            vec![2, 4, 1],
            vec![3, 5, 5],
            None,
            None,
        )
        .unwrap()
    }

    #[test]
    fn one_hot_embeddings_score_perfectly() {
        let ds = small_dataset();
        let dims = 6;
        let mut e = EmbeddingMatrix::zeros(ds.n_users() + ds.n_items(), dims);
        for u in 0..ds.n_users() {
            e.row_mut(u)[ds.test(u) as usize] = 1.0;
        }
        for i in 0..ds.n_items() {
            e.row_mut(ds.n_users() + i)[i] = 1.0;
        }
        let fe = FinalEmbeddings { e_final: e, n_users: 3 };
        let rep = evaluate(&fe, &ds, EvalMode::Test, &[20]).unwrap();
        assert_eq!(rep.at(20), Some((1.0, 1.0)));
        assert_eq!(rep.users_evaluated, 3);
    }

    #[test]
    fn validation_item_exclusion_is_switchable() {
        let ds = small_dataset();
        // user 0: validation item 2 scores highest, test item 3 second
        let mut scores = vec![0.0; 6];
        scores[2] = 2.0;
        scores[3] = 1.0;
        let mut rows = vec![vec![1.0], vec![0.0], vec![0.0]];
        rows.extend(scores.iter().map(|&s| vec![s]));
        let fe = FinalEmbeddings {
            e_final: EmbeddingMatrix::from_rows(&rows).unwrap(),
            n_users: 3,
        };
        let on = rank_all(&fe, &ds, EvalMode::Test, EvalOptions::default()).unwrap();
        let off = rank_all(
            &fe,
            &ds,
            EvalMode::Test,
            EvalOptions {
                exclude_validation_in_test: false,
            },
        )
        .unwrap();
        assert_eq!(on[0].rank, 1);
        assert_eq!(off[0].rank, 2);
    }

    #[test]
    fn dimension_mismatch() {
        let ds = small_dataset();
        let fe = FinalEmbeddings {
            e_final: init_embeddings(8, 2, 1.0, 0).unwrap(),
            n_users: 3,
        };
        assert!(evaluate(&fe, &ds, EvalMode::Test, &[20]).is_err());
    }

    #[test]
    fn csv_rows() {
        let rep = MetricsReport {
            mode: EvalMode::Test,
            n_values: vec![10, 20],
            recall: vec![0.25, 0.5],
            ndcg: vec![0.125, 0.2],
            users_evaluated: 4,
        };
        let mut buf = Vec::new();
        MetricsReport::write_csv_header(&mut buf).unwrap();
        rep.write_csv_rows(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "mode,N,recall,ndcg,users\ntest,10,0.25,0.125,4\ntest,20,0.5,0.2,4\n"
        );
    }

    proptest! {
        #[test]
        fn metric_invariants(ranks in proptest::collection::vec(1usize..60, 1..40)) {
            let results = rr(&ranks);
            let mut prev = 0.0;
            for n in 1..=60 {
                let r = recall_at_n(&results, n).unwrap();
                let g = ndcg_at_n(&results, n).unwrap();
                prop_assert!((0.0..=1.0).contains(&r) && (0.0..=1.0).contains(&g));
                prop_assert!(g <= r + 1e-15);
                prop_assert!(r >= prev);
                prev = r;
            }
            prop_assert_eq!(recall_at_n(&results, 60).unwrap(), 1.0);
        }

        #[test]
        fn ranks_scale_invariant(seed in any::<u64>(), alpha in 0.01f64..100.0) {
            let ds = small_dataset();
            let e = init_embeddings(9, 3, 1.0, seed).unwrap();
            let fe = FinalEmbeddings { e_final: e.clone(), n_users: 3 };
            let mut scaled = e;
            scaled.scale(alpha);
            let fe2 = FinalEmbeddings { e_final: scaled, n_users: 3 };
            for mode in [EvalMode::Validation, EvalMode::Test] {
                let a = rank_all(&fe, &ds, mode, EvalOptions::default()).unwrap();
                let b = rank_all(&fe2, &ds, mode, EvalOptions::default()).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }
}
