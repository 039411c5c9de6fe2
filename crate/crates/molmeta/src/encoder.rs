//! GIN molecular encoder: featurized molecule → fixed-width embedding.
//!
//! Each layer updates every atom state to `MLP(state + Σ_neighbors (state +
//! bond embedding))` — a GIN update with ε = 0, so the center atom enters
//! the sum with unit weight. The readout is mean pooling over final-layer
//! atom states, keeping the scale independent of molecule size.

use crate::autodiff::params::{uniform_fan_in, Mlp, ParamId, ParamSet};
use crate::autodiff::{AutodiffError, Tape, Var};
use crate::chem::{FeaturizedMolecule, BOND_CLASSES, DEGREE_CLASSES, ELEMENT_CLASSES};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub bond_table: ParamId,
    pub mlp: Mlp,
}

/// Parameter layout of the molecular encoder; tensors live in a [`ParamSet`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderParams {
    pub dim: usize,
    pub element_table: ParamId,
    pub degree_table: ParamId,
    pub layers: Vec<EncoderLayer>,
}

impl EncoderParams {
    /// Registers all encoder tensors on `set`. `n_layers ≥ 1`; every width
    /// is `dim`, including the MLP hidden layers.
    pub fn init<R: Rng>(set: &mut ParamSet, dim: usize, n_layers: usize, rng: &mut R) -> Self {
        assert!(n_layers >= 1, "encoder needs at least one layer");
        let element_table = set.add(uniform_fan_in(&[ELEMENT_CLASSES, dim], dim, rng));
        let degree_table = set.add(uniform_fan_in(&[DEGREE_CLASSES, dim], dim, rng));
        let layers = (0..n_layers)
            .map(|_| EncoderLayer {
                bond_table: set.add(uniform_fan_in(&[BOND_CLASSES, dim], dim, rng)),
                mlp: Mlp::init(set, dim, dim, dim, rng),
            })
            .collect();
        EncoderParams {
            dim,
            element_table,
            degree_table,
            layers,
        }
    }
}

/// Runs the encoder on one molecule, returning its length-`d` embedding.
/// `leaves` must come from `ParamSet::leaves` on `tape`.
pub fn encode_molecule<'t>(
    m: &FeaturizedMolecule,
    enc: &EncoderParams,
    leaves: &[Var<'t>],
    tape: &'t Tape,
) -> Result<Var<'t>, AutodiffError> {
    assert!(m.atom_count() > 0, "cannot encode an empty molecule");
    let n = m.atom_count();

    // neighbor lists with bond classes, one entry per edge direction
    let mut neighbors: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (&(a, b), &class) in m.edges.iter().zip(&m.bond_classes) {
        neighbors[a].push((b, class));
        neighbors[b].push((a, class));
    }

    let mut states: Vec<Var<'t>> = (0..n)
        .map(|i| {
            let e = tape.row(leaves[enc.element_table.0], m.element_ids[i]);
            let d = tape.row(leaves[enc.degree_table.0], m.degrees[i]);
            e + d
        })
        .collect();

    for layer in &enc.layers {
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            let mut terms = Vec::with_capacity(1 + neighbors[i].len());
            terms.push(states[i]);
            for &(j, class) in &neighbors[i] {
                let bond = tape.row(leaves[layer.bond_table.0], class);
                terms.push(states[j] + bond);
            }
            let agg = tape.add_n(&terms)?;
            next.push(layer.mlp.apply(leaves, agg)?);
        }
        states = next;
    }

    Ok(tape.add_n(&states)?.scale(1.0 / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chem::{featurize, parse_smiles, Bond, MolecularGraph};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn setup(dim: usize, layers: usize, seed: u64) -> (ParamSet, EncoderParams) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        let enc = EncoderParams::init(&mut set, dim, layers, &mut rng);
        (set, enc)
    }

    fn embed(set: &ParamSet, enc: &EncoderParams, smiles: &str) -> Vec<f64> {
        let m = featurize(&parse_smiles(smiles).unwrap());
        let tape = Tape::new();
        let leaves = set.leaves(&tape);
        encode_molecule(&m, enc, &leaves, &tape)
            .unwrap()
            .value()
            .data()
            .to_vec()
    }

    #[test]
    fn output_has_configured_width() {
        let (set, enc) = setup(16, 2, 1);
        assert_eq!(embed(&set, &enc, "CC(=O)N").len(), 16);
        let (set, enc) = setup(7, 1, 1);
        assert_eq!(embed(&set, &enc, "C").len(), 7);
    }

    #[test]
    fn isomorphic_orderings_agree() {
        let (set, enc) = setup(12, 3, 2);
        let a = embed(&set, &enc, "CCO");
        let b = embed(&set, &enc, "OCC");
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn single_atom_matches_hand_unrolled_mlp_stack() {
        let (set, enc) = setup(6, 2, 3);
        let got = embed(&set, &enc, "C");

        // by hand: initial state = element row + degree row, then each
        // layer applies only its MLP (no neighbor terms, mean over 1 atom)
        let m = featurize(&parse_smiles("C").unwrap());
        let tape = Tape::new();
        let leaves = set.leaves(&tape);
        let e = tape.row(leaves[enc.element_table.0], m.element_ids[0]);
        let d = tape.row(leaves[enc.degree_table.0], m.degrees[0]);
        let mut h = e + d;
        for layer in &enc.layers {
            h = layer.mlp.apply(&leaves, h).unwrap();
        }
        assert_eq!(got, h.value().data());
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let (set, enc) = setup(5, 2, 4);
        let m = featurize(&parse_smiles("CCO").unwrap());

        let loss_of = |probe: &ParamSet| {
            let tape = Tape::new();
            let leaves = probe.leaves(&tape);
            let emb = encode_molecule(&m, &enc, &leaves, &tape).unwrap();
            emb.sigmoid().sum().item()
        };

        let tape = Tape::new();
        let leaves = set.leaves(&tape);
        let emb = encode_molecule(&m, &enc, &leaves, &tape).unwrap();
        let loss = emb.sigmoid().sum();
        tape.backward(loss).unwrap();
        let grads = set.read_grads(&leaves);

        let eps = 1e-5;
        for pi in 0..set.len() {
            let base = set.get(ParamId(pi)).data().to_vec();
            for k in 0..base.len() {
                let mut probe = set.clone();
                probe.get_mut(ParamId(pi)).data_mut()[k] = base[k] + eps;
                let hi = loss_of(&probe);
                probe.get_mut(ParamId(pi)).data_mut()[k] = base[k] - eps;
                let lo = loss_of(&probe);
                let fd = (hi - lo) / (2.0 * eps);
                let ad = grads[pi].data()[k];
                assert!(
                    (ad - fd).abs() <= 1e-6 * 1.0_f64.max(fd.abs()),
                    "param {pi}[{k}]: autodiff {ad} vs fd {fd}"
                );
            }
        }
    }

    /// Applies an atom relabeling to a graph.
    fn permute(g: &MolecularGraph, perm: &[usize]) -> MolecularGraph {
        // perm[old] = new
        let mut atoms = vec![g.atoms[0].clone(); g.atoms.len()];
        for (old, &new) in perm.iter().enumerate() {
            atoms[new] = g.atoms[old].clone();
        }
        let bonds = g
            .bonds
            .iter()
            .map(|b| Bond {
                a: perm[b.a],
                b: perm[b.b],
                order: b.order,
            })
            .collect();
        MolecularGraph { atoms, bonds }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn permutation_invariance(seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let (set, enc) = setup(8, 2, 99);
            let g = parse_smiles("CC(=O)Oc1ccccc1C(=O)O").unwrap();
            let mut perm: Vec<usize> = (0..g.atoms.len()).collect();
            perm.shuffle(&mut rng);
            let pg = permute(&g, &perm);

            let tape = Tape::new();
            let leaves = set.leaves(&tape);
            let a = encode_molecule(&featurize(&g), &enc, &leaves, &tape).unwrap();
            let b = encode_molecule(&featurize(&pg), &enc, &leaves, &tape).unwrap();
            for (x, y) in a.value().data().iter().zip(b.value().data()) {
                prop_assert!((x - y).abs() < 1e-11, "{} vs {}", x, y);
            }
        }

        #[test]
        fn constant_under_repeat(seed in 0u64..50) {
            let (set, enc) = setup(6, 2, seed);
            let a = embed(&set, &enc, "c1ccncc1");
            let b = embed(&set, &enc, "c1ccncc1");
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn empty_molecule_panics() {
        let (set, enc) = setup(4, 1, 5);
        let m = FeaturizedMolecule {
            element_ids: vec![],
            degrees: vec![],
            edges: vec![],
            bond_classes: vec![],
        };
        let tape = Tape::new();
        let leaves = set.leaves(&tape);
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            encode_molecule(&m, &enc, &leaves, &tape)
        }));
        assert!(result.is_err());
    }

    #[test]
    fn unused_table_rows_get_zero_grads() {
        let (set, enc) = setup(4, 1, 6);
        let m = featurize(&parse_smiles("CC").unwrap());
        let tape = Tape::new();
        let leaves = set.leaves(&tape);
        let emb = encode_molecule(&m, &enc, &leaves, &tape).unwrap();
        let loss = emb.sum();
        tape.backward(loss).unwrap();
        let g = leaves[enc.element_table.0].grad();
        let dim = enc.dim;
        // carbon row (class 1) touched, oxygen row (class 3) untouched
        assert!(g.data()[dim..2 * dim].iter().any(|&v| v != 0.0));
        assert!(g.data()[3 * dim..4 * dim].iter().all(|&v| v == 0.0));
    }
}
