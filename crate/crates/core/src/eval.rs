//! Composed-query retrieval over a cached gallery and the ranking metrics.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterStack, BindingTable, BranchId, BranchView};
use crate::encoder::{compose_prompt, pseudo_forward, text_forward, visual_forward};
use crate::error::{Error, Result};
use crate::synth::{BenchmarkQuery, RetrievalBenchmark, Vocab};
use crate::tensor::{dot, Vector};

pub const RECALL_KS: [usize; 3] = [1, 5, 10];
pub const SUBSET_KS: [usize; 3] = [1, 2, 3];
pub const MAP_KS: [usize; 4] = [5, 10, 25, 50];

/// Unit-norm gallery embeddings from the endpoint visual pathway.
#[derive(Debug, Clone, PartialEq)]
pub struct GalleryIndex {
    pub ids: Vec<usize>,
    pub embeddings: Vec<Vector>,
}

impl GalleryIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn build_gallery_index(benchmark: &RetrievalBenchmark, stack: &AdapterStack) -> Result<GalleryIndex> {
    let view = stack.view(BranchId::End);
    let mut ids = Vec::with_capacity(benchmark.gallery.len());
    let mut embeddings = Vec::with_capacity(benchmark.gallery.len());
    for e in &benchmark.gallery {
        ids.push(e.entry_id);
        embeddings.push(visual_forward(stack, &view, &e.feature)?.out);
    }
    Ok(GalleryIndex { ids, embeddings })
}

/// `a photo of * and <instruction>` with the reference pseudo token, through
/// the endpoint text pathway.
pub fn compose_query(query: &BenchmarkQuery, stack: &AdapterStack, vocab: &Vocab) -> Result<Vector> {
    compose_query_in(query, stack, &stack.view(BranchId::End), vocab)
}

/// [`compose_query`] with a prebuilt endpoint view.
pub fn compose_query_in(query: &BenchmarkQuery, stack: &AdapterStack, view: &BranchView, vocab: &Vocab) -> Result<Vector> {
    let ids = vocab.encode(&compose_prompt(&query.instruction))?;
    let p = pseudo_forward(stack, view, &query.ref_feature)?;
    Ok(text_forward(stack, view, &ids, Some(p.pseudo()))?.out)
}

/// Gallery ids by descending cosine; equal scores rank the lower id first.
pub fn rank(query: &[f64], index: &GalleryIndex) -> Result<Vec<usize>> {
    if let Some(e) = index.embeddings.first() {
        if e.len() != query.len() {
            return Err(Error::DimMismatch { expected: e.len(), got: query.len() });
        }
    }
    let mut scored: Vec<(f64, usize)> = index.embeddings.iter().zip(&index.ids).map(|(e, &id)| (dot(query, e), id)).collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().map(|(_, id)| id).collect())
}

/// Fraction of queries with at least one relevant id in the top `k`.
pub fn recall_at_k(rankings: &[Vec<usize>], relevant: &[Vec<usize>], k: usize) -> f64 {
    if rankings.is_empty() {
        return 0.0;
    }
    let hits = rankings
        .iter()
        .zip(relevant)
        .filter(|(r, rel)| r.iter().take(k).any(|id| rel.contains(id)))
        .count();
    hits as f64 / rankings.len() as f64
}

/// Rankings restricted to each query's candidate set, order preserved.
pub fn restrict_to_candidates(rankings: &[Vec<usize>], candidates: &[Vec<usize>], relevant: &[Vec<usize>]) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(rankings.len());
    for (q, ((r, c), rel)) in rankings.iter().zip(candidates).zip(relevant).enumerate() {
        if !rel.iter().any(|id| c.contains(id)) {
            return Err(Error::CandidateSetInvalid { query: q, reason: "no relevant id among the candidates".into() });
        }
        let set: HashSet<usize> = c.iter().copied().collect();
        out.push(r.iter().copied().filter(|id| set.contains(id)).collect());
    }
    Ok(out)
}

/// Recall@k after filtering each ranking to its candidate set.
pub fn subset_recall(rankings: &[Vec<usize>], candidates: &[Vec<usize>], relevant: &[Vec<usize>], k: usize) -> Result<f64> {
    let restricted = restrict_to_candidates(rankings, candidates, relevant)?;
    Ok(recall_at_k(&restricted, relevant, k))
}

/// AP@k with denominator `min(|relevant|, k)`, averaged over queries.
pub fn map_at_k(rankings: &[Vec<usize>], relevant: &[Vec<usize>], k: usize) -> f64 {
    if rankings.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for (r, rel) in rankings.iter().zip(relevant) {
        let mut hits = 0usize;
        let mut sum = 0.0;
        for (i, id) in r.iter().take(k).enumerate() {
            if rel.contains(id) {
                hits += 1;
                sum += hits as f64 / (i + 1) as f64;
            }
        }
        total += sum / rel.len().min(k).max(1) as f64;
    }
    total / rankings.len() as f64
}

/// Fraction of queries whose best-ranked shortcut distractor precedes every
/// relevant item.
pub fn shortcut_gap(rankings: &[Vec<usize>], benchmark: &RetrievalBenchmark) -> f64 {
    if rankings.is_empty() {
        return 0.0;
    }
    let hits = rankings
        .iter()
        .zip(&benchmark.queries)
        .filter(|(r, q)| match r.iter().find(|id| q.relevant.contains(id) || q.shortcut.contains(id)) {
            Some(id) => q.shortcut.contains(id),
            None => false,
        })
        .count();
    hits as f64 / rankings.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub rs_at_1: f64,
    pub rs_at_2: f64,
    pub rs_at_3: f64,
    pub map_at_5: f64,
    pub map_at_10: f64,
    pub map_at_25: f64,
    pub map_at_50: f64,
    pub shortcut_gap: f64,
    pub queries: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str =
        "r_at_1,r_at_5,r_at_10,rs_at_1,rs_at_2,rs_at_3,map_at_5,map_at_10,map_at_25,map_at_50,shortcut_gap,queries";

    pub fn from_rankings(rankings: &[Vec<usize>], benchmark: &RetrievalBenchmark) -> Result<Self> {
        let relevant: Vec<Vec<usize>> = benchmark.queries.iter().map(|q| q.relevant.clone()).collect();
        let candidates: Vec<Vec<usize>> = benchmark.queries.iter().map(|q| q.candidates.clone()).collect();
        let restricted = restrict_to_candidates(rankings, &candidates, &relevant)?;
        let r = |k| recall_at_k(rankings, &relevant, k);
        let rs = |k| recall_at_k(&restricted, &relevant, k);
        let m = |k| map_at_k(rankings, &relevant, k);
        Ok(Self {
            r_at_1: r(1),
            r_at_5: r(5),
            r_at_10: r(10),
            rs_at_1: rs(1),
            rs_at_2: rs(2),
            rs_at_3: rs(3),
            map_at_5: m(5),
            map_at_10: m(10),
            map_at_25: m(25),
            map_at_50: m(50),
            shortcut_gap: shortcut_gap(rankings, benchmark),
            queries: rankings.len(),
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.r_at_1,
            self.r_at_5,
            self.r_at_10,
            self.rs_at_1,
            self.rs_at_2,
            self.rs_at_3,
            self.map_at_5,
            self.map_at_10,
            self.map_at_25,
            self.map_at_50,
            self.shortcut_gap,
            self.queries
        )
    }

    pub fn to_csv(&self, config_hash: &str) -> String {
        format!("# config_hash={config_hash}\n{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }
}

/// Rankings of every benchmark query against a prebuilt index.
pub fn rank_queries(stack: &AdapterStack, benchmark: &RetrievalBenchmark, vocab: &Vocab, index: &GalleryIndex) -> Result<Vec<Vec<usize>>> {
    let view = stack.view(BranchId::End).with_bindings(Arc::new(BindingTable::new(&stack.embed)));
    benchmark.queries.iter().map(|q| rank(&compose_query_in(q, stack, &view, vocab)?, index)).collect()
}

pub fn evaluate(stack: &AdapterStack, benchmark: &RetrievalBenchmark, vocab: &Vocab) -> Result<(MetricsReport, Vec<Vec<usize>>)> {
    let index = build_gallery_index(benchmark, stack)?;
    evaluate_with_index(stack, benchmark, vocab, &index)
}

pub fn evaluate_with_index(
    stack: &AdapterStack,
    benchmark: &RetrievalBenchmark,
    vocab: &Vocab,
    index: &GalleryIndex,
) -> Result<(MetricsReport, Vec<Vec<usize>>)> {
    let rankings = rank_queries(stack, benchmark, vocab, index)?;
    Ok((MetricsReport::from_rankings(&rankings, benchmark)?, rankings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::{l2_normalize, norm};
    use proptest::prelude::*;

    /// Direct summation of precision at each relevant hit.
    fn ap_oracle(ranking: &[usize], rel: &[usize], k: usize) -> f64 {
        let top = &ranking[..k.min(ranking.len())];
        let mut s = 0.0;
        for i in 0..top.len() {
            if rel.contains(&top[i]) {
                let prec = top[..=i].iter().filter(|x| rel.contains(x)).count() as f64 / (i + 1) as f64;
                s += prec;
            }
        }
        s / rel.len().min(k) as f64
    }

    fn index_from(vs: Vec<Vector>) -> GalleryIndex {
        GalleryIndex { ids: (0..vs.len()).collect(), embeddings: vs }
    }

    #[test]
    fn recall_examples() {
        let r = vec![vec![7, 8, 3, 1, 2]];
        let rel = vec![vec![3]];
        assert_eq!(recall_at_k(&r, &rel, 1), 0.0);
        assert_eq!(recall_at_k(&r, &rel, 5), 1.0);
        assert_eq!(recall_at_k(&r, &rel, 100), 1.0);
        let top = vec![vec![3, 1], vec![5, 2]];
        assert_eq!(recall_at_k(&top, &[vec![3], vec![5]], 1), 1.0);
    }

    #[test]
    fn map_examples() {
        let r = vec![vec![10, 11, 12, 13, 14]];
        let ap = map_at_k(&r, &[vec![10, 12]], 5);
        assert!((ap - 0.5 * (1.0 + 2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(map_at_k(&r, &[vec![11, 10]], 5), 1.0);
        assert_eq!(map_at_k(&r, &[vec![99]], 5), 0.0);
        // Single target: AP = 1/rank within k.
        assert_eq!(map_at_k(&r, &[vec![13]], 5), 0.25);
    }

    #[test]
    fn map_matches_oracle_on_random_rankings() {
        let mut rng = Rng::new(17);
        for _ in 0..200 {
            let n = 5 + rng.below(40);
            let mut ranking: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut ranking);
            let n_rel = 1 + rng.below(5);
            let mut rel: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut rel);
            rel.truncate(n_rel);
            let k = 1 + rng.below(n);
            let got = map_at_k(&[ranking.clone()], &[rel.clone()], k);
            assert_eq!(got, ap_oracle(&ranking, &rel, k));
        }
    }

    #[test]
    fn subset_examples() {
        let r = vec![vec![4, 9, 2, 0]];
        assert_eq!(subset_recall(&r, &[vec![2]], &[vec![2]], 1).unwrap(), 1.0);
        assert!(matches!(subset_recall(&r, &[vec![4]], &[vec![2]], 1), Err(Error::CandidateSetInvalid { .. })));
    }

    #[test]
    fn subset_random_expectation() {
        // With 6 candidates in random order the target lands in the top 3 half the time.
        let mut rng = Rng::new(5);
        let trials = 20000;
        let mut rankings = Vec::with_capacity(trials);
        for _ in 0..trials {
            let mut r: Vec<usize> = (0..6).collect();
            rng.shuffle(&mut r);
            rankings.push(r);
        }
        let cands = vec![(0..6).collect::<Vec<_>>(); trials];
        let rel = vec![vec![0]; trials];
        let v = subset_recall(&rankings, &cands, &rel, 3).unwrap();
        assert!((v - 0.5).abs() < 0.015, "{v}");
    }

    #[test]
    fn rank_examples() {
        let mut rng = Rng::new(2);
        let vs: Vec<Vector> = (0..20).map(|_| l2_normalize(&[rng.normal(), rng.normal(), rng.normal()]).unwrap()).collect();
        let index = index_from(vs.clone());
        let r = rank(&vs[7], &index).unwrap();
        assert_eq!(r[0], 7);
        let scaled: Vector = vs[7].iter().map(|v| v * 3.5).collect();
        assert_eq!(rank(&scaled, &index).unwrap(), r);
        let neg: Vector = vs[7].iter().map(|v| -v).collect();
        let mut rev = rank(&neg, &index).unwrap();
        rev.reverse();
        assert_eq!(rev, r);
        assert!(matches!(rank(&[1.0], &index), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn rank_ties_break_by_id() {
        let index = GalleryIndex { ids: vec![5, 2, 9], embeddings: vec![vec![1.0, 0.0]; 3] };
        assert_eq!(rank(&[1.0, 0.0], &index).unwrap(), vec![2, 5, 9]);
    }

    #[test]
    fn rank_invariant_to_common_gallery_scaling() {
        let mut rng = Rng::new(8);
        let vs: Vec<Vector> = (0..30).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
        let q: Vector = (0..4).map(|_| rng.normal()).collect();
        let a = rank(&q, &index_from(vs.clone())).unwrap();
        let b = rank(&q, &index_from(vs.iter().map(|v| v.iter().map(|x| x * 0.25).collect()).collect())).unwrap();
        assert_eq!(a, b);
    }

    fn toy_benchmark(relevant: Vec<usize>, shortcut: Vec<usize>) -> RetrievalBenchmark {
        use crate::synth::{Attribute, Item};
        RetrievalBenchmark {
            benchmark_version: 1,
            multi_target: false,
            queries: vec![BenchmarkQuery {
                reference: Item { id: 0, values: [0; 5] },
                instruction: vec![],
                reverse_instruction: vec![],
                edited_attribute: Attribute::Color,
                new_value: 1,
                ref_feature: vec![],
                relevant: relevant.clone(),
                shortcut: shortcut.clone(),
                candidates: relevant.into_iter().chain(shortcut).collect(),
            }],
            gallery: vec![],
            config_hash: None,
        }
    }

    #[test]
    fn shortcut_gap_examples() {
        let b = toy_benchmark(vec![1], vec![2]);
        assert_eq!(shortcut_gap(&[vec![1, 2, 3]], &b), 0.0);
        assert_eq!(shortcut_gap(&[vec![2, 1, 3]], &b), 1.0);
        assert_eq!(shortcut_gap(&[vec![3, 2, 1]], &b), 1.0);
    }

    #[test]
    fn report_on_generated_world() {
        use crate::adapters::EncoderConfig;
        use crate::synth::{World, WorldConfig};
        let wc = WorldConfig { train_tuples: 50, val_queries: 30, test_queries: 30, gallery_size: 200, ..Default::default() };
        let world = World::generate(&wc, &Rng::new(1)).unwrap();
        let cfg = EncoderConfig { d_model: 16, n_blocks: 2, vocab_size: world.vocab.len(), ..Default::default() };
        let stack = AdapterStack::init(&cfg, &Rng::new(2)).unwrap();
        let index = build_gallery_index(&world.test, &stack).unwrap();
        assert_eq!(index.len(), world.test.gallery.len());
        assert_eq!(index, build_gallery_index(&world.test, &stack).unwrap());
        assert!(index.embeddings.iter().all(|e| (norm(e) - 1.0).abs() < 1e-12));
        let q = compose_query(&world.test.queries[0], &stack, &world.vocab).unwrap();
        assert!((norm(&q) - 1.0).abs() < 1e-12);
        let (m, rankings) = evaluate(&stack, &world.test, &world.vocab).unwrap();
        assert_eq!(m.queries, 30);
        assert!(m.r_at_1 <= m.r_at_5 && m.r_at_5 <= m.r_at_10);
        assert!(m.rs_at_1 >= m.r_at_1 && m.rs_at_2 >= m.r_at_1);
        for v in [m.r_at_1, m.map_at_5, m.map_at_50, m.shortcut_gap, m.rs_at_3] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert_eq!(evaluate(&stack, &world.test, &world.vocab).unwrap().1, rankings);
        let csv = m.to_csv("h");
        assert_eq!(csv.lines().nth(2).unwrap().split(',').count(), MetricsReport::CSV_HEADER.split(',').count());
    }

    proptest! {
        #[test]
        fn recall_monotone_in_k(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let rankings: Vec<Vec<usize>> = (0..10).map(|_| { let mut r: Vec<usize> = (0..30).collect(); rng.shuffle(&mut r); r }).collect();
            let rel: Vec<Vec<usize>> = (0..10).map(|_| vec![rng.below(30)]).collect();
            let mut prev = 0.0;
            for k in 1..=30 {
                let v = recall_at_k(&rankings, &rel, k);
                prop_assert!(v >= prev);
                prev = v;
            }
            prop_assert_eq!(prev, 1.0);
        }

        #[test]
        fn subset_recall_dominates_global(seed in any::<u64>(), k in 1usize..6) {
            let mut rng = Rng::new(seed);
            let mut rankings = Vec::new();
            let mut cands = Vec::new();
            let mut rel = Vec::new();
            for _ in 0..10 {
                let mut r: Vec<usize> = (0..40).collect();
                rng.shuffle(&mut r);
                let mut c: Vec<usize> = (0..40).collect();
                rng.shuffle(&mut c);
                c.truncate(6);
                rel.push(vec![c[0]]);
                cands.push(c);
                rankings.push(r);
            }
            prop_assert!(subset_recall(&rankings, &cands, &rel, k).unwrap() >= recall_at_k(&rankings, &rel, k));
        }
    }
}
