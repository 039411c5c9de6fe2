//! The molecule–property relation graph and its dataset plumbing.
//!
//! A [`Dataset`] is a molecule × property label matrix over SMILES strings;
//! [`build_mpg`] completes it into a bipartite graph with exactly one typed
//! edge per (molecule, property) pair — `active` for label 1, `inactive`
//! for label 0 and `unk` where the label is missing — plus randomly
//! initialized property-node embeddings. Molecule embeddings are *not*
//! cached here: they are recomputed through the encoder on every forward
//! pass so its gradients flow; the graph stores only the parsed
//! featurizations.

use crate::autodiff::Tensor;
use crate::chem::{self, ChemError, FeaturizedMolecule};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MpgError {
    #[error("dataset has no molecules or no properties")]
    EmptyDataset,
    #[error("label matrix with {got} entries does not match {molecules} molecules x {properties} properties")]
    LabelShape {
        got: usize,
        molecules: usize,
        properties: usize,
    },
    #[error("cannot reserve {n_test} of {n_properties} properties for testing")]
    BadSplitSize { n_test: usize, n_properties: usize },
    #[error("molecule {index} is not parseable: {source}")]
    InvalidSmiles { index: usize, source: ChemError },
}

/// Binary-label matrix over molecules and named properties; `None` marks a
/// missing measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    smiles: Vec<String>,
    property_names: Vec<String>,
    /// Row-major: `labels[mol * n_properties + prop]`.
    labels: Vec<Option<bool>>,
}

impl Dataset {
    pub fn new(
        smiles: Vec<String>,
        property_names: Vec<String>,
        labels: Vec<Option<bool>>,
    ) -> Result<Self, MpgError> {
        if labels.len() != smiles.len() * property_names.len() {
            return Err(MpgError::LabelShape {
                got: labels.len(),
                molecules: smiles.len(),
                properties: property_names.len(),
            });
        }
        Ok(Dataset {
            smiles,
            property_names,
            labels,
        })
    }

    pub fn n_molecules(&self) -> usize {
        self.smiles.len()
    }

    pub fn n_properties(&self) -> usize {
        self.property_names.len()
    }

    pub fn smiles(&self) -> &[String] {
        &self.smiles
    }

    pub fn property_names(&self) -> &[String] {
        &self.property_names
    }

    pub fn label(&self, mol: usize, prop: usize) -> Option<bool> {
        self.labels[mol * self.n_properties() + prop]
    }

    fn set_label(&mut self, mol: usize, prop: usize, value: Option<bool>) {
        let n = self.n_properties();
        self.labels[mol * n + prop] = value;
    }

    /// Count of present labels restricted to the given properties.
    pub fn present_count(&self, props: &[usize]) -> usize {
        props
            .iter()
            .map(|&t| (0..self.n_molecules()).filter(|&i| self.label(i, t).is_some()).count())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeType {
    Active,
    Inactive,
    Unk,
}

impl EdgeType {
    fn from_label(l: Option<bool>) -> Self {
        match l {
            Some(true) => EdgeType::Active,
            Some(false) => EdgeType::Inactive,
            None => EdgeType::Unk,
        }
    }
}

/// Molecule–property relation graph: molecule nodes, property nodes, one
/// typed edge per pair, and the initial property-node embeddings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mpg {
    dim: usize,
    smiles: Vec<String>,
    property_names: Vec<String>,
    molecules: Vec<FeaturizedMolecule>,
    /// Row-major, `edge_types[mol * n_properties + prop]`.
    edge_types: Vec<EdgeType>,
    /// `[n_properties, dim]` initial embeddings, N(0, 1/dim) entries.
    property_embeddings: Tensor,
}

impl Mpg {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_molecules(&self) -> usize {
        self.molecules.len()
    }

    pub fn n_properties(&self) -> usize {
        self.property_names.len()
    }

    /// Total node count: one node per molecule plus one per property.
    pub fn n_nodes(&self) -> usize {
        self.n_molecules() + self.n_properties()
    }

    pub fn n_edges(&self) -> usize {
        self.edge_types.len()
    }

    pub fn molecule(&self, i: usize) -> &FeaturizedMolecule {
        &self.molecules[i]
    }

    pub fn smiles(&self) -> &[String] {
        &self.smiles
    }

    pub fn property_names(&self) -> &[String] {
        &self.property_names
    }

    pub fn edge_type(&self, mol: usize, prop: usize) -> EdgeType {
        self.edge_types[mol * self.n_properties() + prop]
    }

    /// Label view of an edge: `Unk` reads back as missing.
    pub fn label(&self, mol: usize, prop: usize) -> Option<bool> {
        match self.edge_type(mol, prop) {
            EdgeType::Active => Some(true),
            EdgeType::Inactive => Some(false),
            EdgeType::Unk => None,
        }
    }

    /// Molecules whose edge to `prop` has the given type, ascending.
    pub fn molecules_with(&self, prop: usize, ty: EdgeType) -> Vec<usize> {
        (0..self.n_molecules())
            .filter(|&i| self.edge_type(i, prop) == ty)
            .collect()
    }

    /// The stored initial property embeddings, one row per property.
    pub fn property_embeddings(&self) -> &Tensor {
        &self.property_embeddings
    }

    pub fn unk_edge_count(&self) -> usize {
        self.edge_types
            .iter()
            .filter(|&&e| e == EdgeType::Unk)
            .count()
    }
}

/// Builds the relation graph: parses and featurizes every molecule,
/// completes missing labels with `unk` edges, and draws the initial
/// property embeddings from `rng` (i.i.d. normal, σ = 0.01/√dim). The scale
/// is kept near zero so a property that never receives gradient updates —
/// e.g. a held-out one — starts as a neutral node whose state is dominated
/// by the labels that message into it, not by its own random direction.
/// Deterministic given the RNG state.
pub fn build_mpg<R: Rng>(ds: &Dataset, dim: usize, rng: &mut R) -> Result<Mpg, MpgError> {
    if ds.n_molecules() == 0 || ds.n_properties() == 0 {
        return Err(MpgError::EmptyDataset);
    }
    let molecules = ds
        .smiles
        .iter()
        .enumerate()
        .map(|(index, s)| {
            chem::parse_smiles(s)
                .map(|g| chem::featurize(&g))
                .map_err(|source| MpgError::InvalidSmiles { index, source })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let edge_types = ds.labels.iter().map(|&l| EdgeType::from_label(l)).collect();
    let normal = Normal::new(0.0, 0.01 / (dim as f64).sqrt()).expect("valid std");
    let emb: Vec<f64> = (0..ds.n_properties() * dim)
        .map(|_| normal.sample(rng))
        .collect();
    Ok(Mpg {
        dim,
        smiles: ds.smiles.clone(),
        property_names: ds.property_names.clone(),
        molecules,
        edge_types,
        property_embeddings: Tensor::new(vec![ds.n_properties(), dim], emb),
    })
}

/// Disjoint train/test property ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropertySplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl PropertySplit {
    /// Explicit id lists, validated: non-empty, in range, disjoint.
    pub fn explicit(
        train: Vec<usize>,
        test: Vec<usize>,
        n_properties: usize,
    ) -> Result<Self, MpgError> {
        let bad = || MpgError::BadSplitSize {
            n_test: test.len(),
            n_properties,
        };
        if train.is_empty() || test.is_empty() {
            return Err(bad());
        }
        if train.iter().chain(&test).any(|&t| t >= n_properties) {
            return Err(bad());
        }
        if train.iter().any(|t| test.contains(t)) {
            return Err(bad());
        }
        Ok(PropertySplit { train, test })
    }

    pub fn is_train(&self, prop: usize) -> bool {
        self.train.contains(&prop)
    }

    pub fn is_test(&self, prop: usize) -> bool {
        self.test.contains(&prop)
    }
}

/// Default split: the last `n_test` properties in dataset order are held
/// out for testing, the rest train.
pub fn split_properties(mpg: &Mpg, n_test: usize) -> Result<PropertySplit, MpgError> {
    let n = mpg.n_properties();
    if n_test == 0 || n_test >= n {
        return Err(MpgError::BadSplitSize {
            n_test,
            n_properties: n,
        });
    }
    Ok(PropertySplit {
        train: (0..n - n_test).collect(),
        test: (n - n_test..n).collect(),
    })
}

/// Randomly hides a `ratio` fraction of the *present* labels under the
/// given train properties; the mask count is `floor(ratio × present)`.
/// Labels of other (test) properties are untouched.
pub fn mask_labels<R: Rng>(
    ds: &Dataset,
    ratio: f64,
    train_props: &[usize],
    rng: &mut R,
) -> Dataset {
    assert!((0.0..1.0).contains(&ratio), "mask ratio must be in [0, 1)");
    let mut candidates = Vec::new();
    for mol in 0..ds.n_molecules() {
        for &prop in train_props {
            if ds.label(mol, prop).is_some() {
                candidates.push((mol, prop));
            }
        }
    }
    let n_mask = (ratio * candidates.len() as f64).floor() as usize;
    let mut out = ds.clone();
    for idx in rand::seq::index::sample(rng, candidates.len(), n_mask) {
        let (mol, prop) = candidates[idx];
        out.set_label(mol, prop, None);
    }
    out
}
