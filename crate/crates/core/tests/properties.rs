mod common;

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;
use taskforest::affinity::{session_affinity, term_affinity, url_affinity};
use taskforest::pruning::{prune, CooccurrenceStats};
use taskforest::query_log::{parse_log, sessionize, LogFormat, ParseOptions};
use taskforest::{
    pairwise_prf, AffinityModel, AffinityStats, ArtifactHeader, CoherenceNormalization, PruneOptions, QueryId,
    TaskLabeling,
};

fn corpus_from(seed: u64, n: usize) -> taskforest::LogCorpus {
    random_corpus(&mut ChaCha8Rng::seed_from_u64(seed), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sessionize_is_idempotent(seed in any::<u64>(), n in 1usize..40, timeout in 60i64..7200) {
        let once = sessionize(corpus_from(seed, n), timeout);
        let twice = sessionize(once.clone(), timeout);
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn sessions_split_exactly_at_long_gaps(seed in any::<u64>(), n in 1usize..40, timeout in 60i64..7200) {
        let c = sessionize(corpus_from(seed, n), timeout);
        let mut by_user: BTreeMap<&str, Vec<&taskforest::Query>> = BTreeMap::new();
        for q in c.queries() {
            by_user.entry(q.user_id.as_str()).or_default().push(q);
        }
        let mut seen_sessions = BTreeSet::new();
        for qs in by_user.values_mut() {
            qs.sort_by_key(|q| (q.timestamp, q.query_id));
            for w in qs.windows(2) {
                let gap = w[1].timestamp - w[0].timestamp;
                prop_assert_eq!(w[0].session_id == w[1].session_id, gap <= timeout);
            }
            let user_sessions: BTreeSet<_> = qs.iter().map(|q| q.session_id).collect();
            for s in user_sessions {
                prop_assert!(seen_sessions.insert(s), "session {} shared between users", s);
            }
        }
    }

    #[test]
    fn corpus_file_round_trips(seed in any::<u64>(), n in 1usize..40) {
        let c = corpus_from(seed, n);
        let mut buf = Vec::new();
        c.write_to(&mut buf, &ArtifactHeader::new("test")).unwrap();
        let (back, report) = parse_log(&buf[..], LogFormat::Normalized, &ParseOptions::default()).unwrap();
        prop_assert_eq!(report.queries, n);
        prop_assert_eq!(back, c);
    }

    #[test]
    fn pair_affinities_are_symmetric_and_bounded(seed in any::<u64>(), n in 2usize..20) {
        let c = corpus_from(seed, n);
        let m = AffinityModel::new(&c, None);
        let upper = [4.0, 4.0, 2.0, 1.0];
        for a in 0..n as QueryId {
            for b in 0..n as QueryId {
                let ab = m.pair(a, b).as_array();
                prop_assert_eq!(ab, m.pair(b, a).as_array());
                for k in 0..4 {
                    prop_assert!((0.0..=upper[k]).contains(&ab[k]), "class {} affinity {} out of range", k, ab[k]);
                }
                let (qa, qb) = (c.query(a), c.query(b));
                prop_assert_eq!(ab[0], term_affinity(qa, qb));
                prop_assert_eq!(ab[1], url_affinity(qa, qb));
                prop_assert_eq!(ab[2], session_affinity(qa, qb));
            }
        }
    }

    #[test]
    fn group_stats_are_additive_and_order_free(seed in any::<u64>(), n in 2usize..20, split in 1usize..19) {
        let c = corpus_from(seed, n);
        let m = AffinityModel::new(&c, None);
        let mut ids: Vec<QueryId> = (0..n as QueryId).collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let split = split.min(n - 1);
        let (a, b) = ids.split_at(split);
        let whole = m.group_stats(&ids);
        prop_assert_eq!(m.group_stats(a).merged(&m.group_stats(b), &m.cross_stats(a, b)), whole);
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        prop_assert_eq!(m.group_stats(&sorted), whole);
        prop_assert_eq!(whole.n_pairs(), (n * (n - 1) / 2) as u64);
        let pairs: AffinityStats = (0..n as QueryId)
            .flat_map(|i| (i + 1..n as QueryId).map(move |j| (i, j)))
            .map(|(i, j)| AffinityStats::from_pair(&m.pair(i, j)))
            .sum();
        prop_assert_eq!(pairs, whole);
    }

    #[test]
    fn pairwise_scores_match_enumeration(
        pred in prop::collection::vec(0u8..5, 1..60),
        gold in prop::collection::vec(0u8..5, 1..60),
    ) {
        let n = pred.len().min(gold.len());
        let p = TaskLabeling::from_pairs((0..n).map(|i| (i as QueryId, format!("p{}", pred[i]))));
        let g = TaskLabeling::from_pairs((0..n).map(|i| (i as QueryId, format!("g{}", gold[i]))));
        let s = pairwise_prf(&p, &g).unwrap();
        let (bp, br, bf) = brute_force_prf(&p.assignment, &g.assignment);
        prop_assert_eq!((s.precision, s.recall, s.f1), (bp, br, bf));
        for x in [s.precision, s.recall, s.f1] {
            prop_assert!((0.0..=1.0).contains(&x));
        }
        let swapped = pairwise_prf(&g, &p).unwrap();
        prop_assert_eq!((swapped.precision, swapped.recall), (s.recall, s.precision));
        let renamed = TaskLabeling::from_pairs(p.assignment.iter().map(|(q, l)| (*q, format!("x{l}"))));
        prop_assert_eq!(pairwise_prf(&renamed, &g).unwrap(), s);
    }

    #[test]
    fn pruning_keeps_queries_and_removes_coherent_internal_nodes(
        seed in any::<u64>(),
        n in 1usize..30,
        threshold in -1.0f64..3.0,
        literal in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let corpus = random_corpus(&mut rng, n);
        let h = random_hierarchy(&mut rng, n);
        let reference = random_corpus(&mut rng, 60);
        let stats = CooccurrenceStats::from_sessions(
            reference.sessions().iter().map(|s| s.iter().flat_map(|&q| reference.query(q).terms.iter().map(String::as_str)).collect::<Vec<_>>()),
        );
        let normalization = if literal { CoherenceNormalization::Literal } else { CoherenceNormalization::PairMean };
        let pruned = prune(&h, &corpus, &stats, &PruneOptions { threshold, normalization }).unwrap();
        prop_assert_eq!(pruned.roots(), h.roots());
        prop_assert_eq!(pruned.query_ids(), h.query_ids());
        for node in pruned.nodes() {
            let original = h.node(node.id).unwrap();
            prop_assert_eq!(&node.leaf_queries, &original.leaf_queries);
            prop_assert!(node.pmi_score.is_some());
            if !node.is_leaf() {
                prop_assert!(node.pmi_score.unwrap() < threshold);
                prop_assert_eq!(&node.children, &original.children);
            }
        }
    }
}
