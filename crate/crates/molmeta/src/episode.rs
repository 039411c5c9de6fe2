//! Episode sampling: few-shot tasks reformulated as relation-graph
//! subgraphs.
//!
//! An [`EpisodeSubgraph`] holds one target property, 2K support molecules
//! (K active, K inactive), M query molecules of a uniformly drawn class,
//! and N_a auxiliary properties — 2K + M + N_a + 1 nodes. Edges cover every
//! (molecule, property) pair inside the subgraph with the relation-graph
//! edge type, except that query–target edges are always typed `unk`: the
//! query label is the prediction target and never enters the input.
//!
//! RNG call order inside [`sample_episode`] is fixed (active support,
//! inactive support, query class, query molecules, auxiliaries), so every
//! sample is reproducible from the RNG state alone.

use crate::mpg::{EdgeType, Mpg, PropertySplit};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EpisodeError {
    #[error("property {target}: needs {needed} {class} molecules, found {available}")]
    InsufficientMolecules {
        target: usize,
        class: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("property {target} is in neither half of the split")]
    TargetNotInSplit { target: usize },
    #[error("no train property has enough labeled molecules for an episode")]
    NoEligibleProperty,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSubgraph {
    pub target: usize,
    /// Molecule ids with labels; the first K are active, the last K inactive.
    pub support: Vec<(usize, bool)>,
    /// Query molecule ids with their held-back labels.
    pub query: Vec<(usize, bool)>,
    /// Auxiliary property ids; never contains `target`.
    pub aux: Vec<usize>,
    /// `(molecule id, property id, type)` for every molecule–property pair
    /// in the subgraph; query–target entries are `unk` by construction.
    pub edges: Vec<(usize, usize, EdgeType)>,
}

impl EpisodeSubgraph {
    /// All molecule ids in subgraph order: support first, then query.
    pub fn molecules(&self) -> impl Iterator<Item = usize> + '_ {
        self.support
            .iter()
            .chain(self.query.iter())
            .map(|&(id, _)| id)
    }

    pub fn n_nodes(&self) -> usize {
        self.support.len() + self.query.len() + 1 + self.aux.len()
    }

    pub fn k_shot(&self) -> usize {
        self.support.len() / 2
    }
}

/// Samples one episode for `target`. `k` support molecules per class, `m`
/// query molecules of one uniformly drawn class, `n_a` auxiliary properties
/// uniformly without replacement from the train properties minus the target.
/// Both label classes must hold at least `k + m` molecules so the episode is
/// sampleable regardless of the drawn query class.
pub fn sample_episode<R: Rng>(
    mpg: &Mpg,
    split: &PropertySplit,
    target: usize,
    k: usize,
    m: usize,
    n_a: usize,
    rng: &mut R,
) -> Result<EpisodeSubgraph, EpisodeError> {
    assert!(k > 0 && m > 0, "episodes need support and query molecules");
    if !split.is_train(target) && !split.is_test(target) {
        return Err(EpisodeError::TargetNotInSplit { target });
    }
    let allowed_aux: Vec<usize> = split.train.iter().copied().filter(|&t| t != target).collect();
    assert!(
        n_a <= allowed_aux.len(),
        "{} auxiliary properties requested but only {} are allowed",
        n_a,
        allowed_aux.len()
    );

    let actives = mpg.molecules_with(target, EdgeType::Active);
    let inactives = mpg.molecules_with(target, EdgeType::Inactive);
    for (class, list) in [("active", &actives), ("inactive", &inactives)] {
        if list.len() < k + m {
            return Err(EpisodeError::InsufficientMolecules {
                target,
                class,
                needed: k + m,
                available: list.len(),
            });
        }
    }

    let pick = |pool: &[usize], n: usize, rng: &mut R| -> Vec<usize> {
        rand::seq::index::sample(rng, pool.len(), n)
            .iter()
            .map(|i| pool[i])
            .collect()
    };

    let support_active = pick(&actives, k, rng);
    let support_inactive = pick(&inactives, k, rng);

    let query_label = rng.gen_bool(0.5);
    let (class_pool, taken) = if query_label {
        (&actives, &support_active)
    } else {
        (&inactives, &support_inactive)
    };
    let remaining: Vec<usize> = class_pool
        .iter()
        .copied()
        .filter(|id| !taken.contains(id))
        .collect();
    let query_ids = pick(&remaining, m, rng);

    let aux = pick(&allowed_aux, n_a, rng);

    let support: Vec<(usize, bool)> = support_active
        .iter()
        .map(|&id| (id, true))
        .chain(support_inactive.iter().map(|&id| (id, false)))
        .collect();
    let query: Vec<(usize, bool)> = query_ids.iter().map(|&id| (id, query_label)).collect();

    Ok(assemble_subgraph(mpg, target, &support, &query, &aux))
}

/// Builds the subgraph for explicitly chosen parts, applying the standard
/// edge rule: support–target and every molecule–auxiliary edge carry the
/// relation-graph type; query–target edges are `unk`. Used by the sampler
/// and by meta-test evaluation, where support and auxiliaries stay fixed
/// while the query molecule varies.
pub fn assemble_subgraph(
    mpg: &Mpg,
    target: usize,
    support: &[(usize, bool)],
    query: &[(usize, bool)],
    aux: &[usize],
) -> EpisodeSubgraph {
    let mut edges = Vec::with_capacity((support.len() + query.len()) * (1 + aux.len()));
    for &(id, _) in support {
        edges.push((id, target, mpg.edge_type(id, target)));
    }
    for &(id, _) in query {
        edges.push((id, target, EdgeType::Unk));
    }
    for &p in aux {
        for &(id, _) in support.iter().chain(query) {
            edges.push((id, p, mpg.edge_type(id, p)));
        }
    }
    EpisodeSubgraph {
        target,
        support: support.to_vec(),
        query: query.to_vec(),
        aux: aux.to_vec(),
        edges,
    }
}

/// Train properties with enough labeled molecules in both classes to build
/// a (k, m) episode, in split order.
pub fn eligible_targets(mpg: &Mpg, split: &PropertySplit, k: usize, m: usize) -> Vec<usize> {
    split
        .train
        .iter()
        .copied()
        .filter(|&t| {
            mpg.molecules_with(t, EdgeType::Active).len() >= k + m
                && mpg.molecules_with(t, EdgeType::Inactive).len() >= k + m
        })
        .collect()
}

/// Samples `n_pool` candidate pairs. Both members of a pair share one
/// uniformly drawn target property (targets repeat across pairs); the two
/// subgraphs are sampled independently and may overlap in molecules.
#[allow(clippy::too_many_arguments)]
pub fn sample_candidate_pool<R: Rng>(
    mpg: &Mpg,
    split: &PropertySplit,
    n_pool: usize,
    k: usize,
    m: usize,
    n_a: usize,
    rng: &mut R,
) -> Result<Vec<(EpisodeSubgraph, EpisodeSubgraph)>, EpisodeError> {
    let eligible = eligible_targets(mpg, split, k, m);
    if eligible.is_empty() {
        return Err(EpisodeError::NoEligibleProperty);
    }
    let mut pool = Vec::with_capacity(n_pool);
    for _ in 0..n_pool {
        let target = eligible[rng.gen_range(0..eligible.len())];
        let first = sample_episode(mpg, split, target, k, m, n_a, rng)
            .expect("eligible target must sample");
        let second = sample_episode(mpg, split, target, k, m, n_a, rng)
            .expect("eligible target must sample");
        pool.push((first, second));
    }
    Ok(pool)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpg::{build_mpg, split_properties, Dataset};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// `n_mols` molecules, `n_props` properties; label(i, t) alternates by
    /// `(i + t) % 2` with every third entry of property `gap` missing.
    fn fixture(n_mols: usize, n_props: usize, gap: Option<usize>) -> crate::mpg::Mpg {
        let smiles = vec!["CCO".to_string(); n_mols];
        let labels = (0..n_mols)
            .flat_map(|i| {
                (0..n_props).map(move |t| {
                    if gap == Some(t) && i % 3 == 0 {
                        None
                    } else {
                        Some((i + t) % 2 == 0)
                    }
                })
            })
            .collect();
        let ds = Dataset::new(smiles, (0..n_props).map(|t| format!("p{t}")).collect(), labels)
            .unwrap();
        build_mpg(&ds, 4, &mut ChaCha12Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn node_count_formula() {
        let mpg = fixture(30, 8, None);
        let split = split_properties(&mpg, 2).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(1);

        let ep = sample_episode(&mpg, &split, 0, 1, 1, 0, &mut rng).unwrap();
        assert_eq!(ep.n_nodes(), 4); // 2K + M + N_a + 1 at K=1, N_a=0

        let ep = sample_episode(&mpg, &split, 0, 10, 1, 5, &mut rng).unwrap();
        assert_eq!(ep.n_nodes(), 27);
        assert_eq!(ep.k_shot(), 10);
    }

    #[test]
    fn support_is_k_per_class_and_disjoint_from_query() {
        let mpg = fixture(40, 5, None);
        let split = split_properties(&mpg, 1).unwrap();
        for seed in 0..20 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let ep = sample_episode(&mpg, &split, 2, 5, 1, 3, &mut rng).unwrap();
            let active = ep.support.iter().filter(|&&(_, l)| l).count();
            let inactive = ep.support.len() - active;
            assert_eq!((active, inactive), (5, 5));
            // recount against the relation graph itself
            for &(id, l) in &ep.support {
                assert_eq!(mpg.label(id, 2), Some(l));
            }
            for &(id, l) in &ep.query {
                assert_eq!(mpg.label(id, 2), Some(l));
            }
            let support_ids: Vec<usize> = ep.support.iter().map(|&(id, _)| id).collect();
            assert!(ep.query.iter().all(|&(id, _)| !support_ids.contains(&id)));
        }
    }

    #[test]
    fn aux_excludes_target_and_test_properties() {
        let mpg = fixture(30, 6, None);
        let split = split_properties(&mpg, 2).unwrap();
        for seed in 0..20 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let ep = sample_episode(&mpg, &split, 1, 2, 1, 3, &mut rng).unwrap();
            assert!(!ep.aux.contains(&1));
            assert!(ep.aux.iter().all(|&p| split.is_train(p)));
            let mut dedup = ep.aux.clone();
            dedup.sort_unstable();
            dedup.dedup();
            assert_eq!(dedup.len(), ep.aux.len());
        }
    }

    #[test]
    fn test_property_episode_draws_aux_from_train() {
        let mpg = fixture(30, 6, None);
        let split = split_properties(&mpg, 2).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        // target 5 is a test property; all four train properties may serve
        let ep = sample_episode(&mpg, &split, 5, 2, 1, 4, &mut rng).unwrap();
        assert_eq!(ep.target, 5);
        let mut aux = ep.aux.clone();
        aux.sort_unstable();
        assert_eq!(aux, vec![0, 1, 2, 3]);
    }

    #[test]
    fn edges_cover_all_pairs_and_match_the_graph() {
        let mpg = fixture(36, 7, Some(3));
        let split = split_properties(&mpg, 1).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let ep = sample_episode(&mpg, &split, 0, 3, 1, 4, &mut rng).unwrap();

        assert_eq!(ep.edges.len(), (2 * 3 + 1) * (1 + 4));
        let query_id = ep.query[0].0;
        for &(mol, prop, ty) in &ep.edges {
            if prop == ep.target && mol == query_id {
                assert_eq!(ty, EdgeType::Unk, "query-target edge must hide the label");
            } else {
                assert_eq!(ty, mpg.edge_type(mol, prop), "edge ({mol},{prop})");
            }
        }
        // every (molecule, target|aux) pair appears exactly once
        let mols: Vec<usize> = ep.molecules().collect();
        for &mol in &mols {
            for prop in std::iter::once(ep.target).chain(ep.aux.iter().copied()) {
                let hits = ep
                    .edges
                    .iter()
                    .filter(|&&(m2, p2, _)| m2 == mol && p2 == prop)
                    .count();
                assert_eq!(hits, 1, "pair ({mol},{prop})");
            }
        }
    }

    #[test]
    fn insufficient_molecules_names_the_class() {
        // property 0: only 2 actives among 5 molecules
        let ds = Dataset::new(
            vec!["C".into(); 5],
            vec!["p0".into(), "p1".into()],
            vec![
                Some(true), Some(true),
                Some(true), Some(false),
                Some(false), Some(true),
                Some(false), Some(false),
                Some(false), Some(true),
            ],
        )
        .unwrap();
        let mpg = build_mpg(&ds, 4, &mut ChaCha12Rng::seed_from_u64(0)).unwrap();
        let split = split_properties(&mpg, 1).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        match sample_episode(&mpg, &split, 0, 2, 1, 0, &mut rng).unwrap_err() {
            EpisodeError::InsufficientMolecules {
                target: 0,
                class: "active",
                needed: 3,
                available: 2,
            } => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn target_outside_split_is_rejected() {
        let mpg = fixture(20, 4, None);
        let split = PropertySplit::explicit(vec![0, 1], vec![2], 4).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        assert_eq!(
            sample_episode(&mpg, &split, 3, 1, 1, 0, &mut rng).unwrap_err(),
            EpisodeError::TargetNotInSplit { target: 3 }
        );
    }

    #[test]
    fn pool_pairs_share_targets() {
        let mpg = fixture(30, 6, None);
        let split = split_properties(&mpg, 2).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let pool = sample_candidate_pool(&mpg, &split, 10, 2, 1, 2, &mut rng).unwrap();
        assert_eq!(pool.len(), 10);
        for (a, b) in &pool {
            assert_eq!(a.target, b.target);
            assert!(split.is_train(a.target));
        }
    }

    #[test]
    fn pool_without_eligible_property_errors() {
        let mpg = fixture(4, 3, None); // 2 per class at most
        let split = split_properties(&mpg, 1).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        assert_eq!(
            sample_candidate_pool(&mpg, &split, 5, 3, 1, 0, &mut rng).unwrap_err(),
            EpisodeError::NoEligibleProperty
        );
    }

    #[test]
    fn pool_targets_are_uniform_over_eligible() {
        let mpg = fixture(24, 4, None);
        let split = split_properties(&mpg, 1).unwrap(); // 3 train properties
        let mut rng = ChaCha12Rng::seed_from_u64(12345);
        let mut counts = [0usize; 3];
        let n = 10_000;
        for _ in 0..n {
            let pool = sample_candidate_pool(&mpg, &split, 1, 2, 1, 1, &mut rng).unwrap();
            counts[pool[0].0.target] += 1;
        }
        let p = 1.0 / 3.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for (t, &c) in counts.iter().enumerate() {
            let dev = (c as f64 - n as f64 * p).abs();
            assert!(dev <= 3.0 * sigma, "property {t}: count {c}, dev {dev:.1}");
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let mpg = fixture(30, 5, Some(2));
        let split = split_properties(&mpg, 1).unwrap();
        let a = sample_episode(&mpg, &split, 1, 3, 1, 2, &mut ChaCha12Rng::seed_from_u64(77))
            .unwrap();
        let b = sample_episode(&mpg, &split, 1, 3, 1, 2, &mut ChaCha12Rng::seed_from_u64(77))
            .unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn episode_invariants_hold(seed in any::<u64>(), k in 1usize..5, n_a in 0usize..4) {
            let mpg = fixture(32, 6, Some(1));
            let split = split_properties(&mpg, 1).unwrap();
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let ep = sample_episode(&mpg, &split, 0, k, 1, n_a, &mut rng).unwrap();

            prop_assert_eq!(ep.n_nodes(), 2 * k + 1 + n_a + 1);
            prop_assert_eq!(ep.support.iter().filter(|&&(_, l)| l).count(), k);
            prop_assert!(!ep.aux.contains(&ep.target));

            // support ids unique
            let mut ids: Vec<usize> = ep.molecules().collect();
            ids.sort_unstable();
            let before = ids.len();
            ids.dedup();
            prop_assert_eq!(ids.len(), before);

            // every non-query-target edge mirrors the relation graph
            let qids: Vec<usize> = ep.query.iter().map(|&(id, _)| id).collect();
            for &(mol, prop, ty) in &ep.edges {
                if prop == ep.target && qids.contains(&mol) {
                    prop_assert_eq!(ty, EdgeType::Unk);
                } else {
                    prop_assert_eq!(ty, mpg.edge_type(mol, prop));
                }
            }
        }
    }
}
