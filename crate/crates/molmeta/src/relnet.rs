//! Relation learning over one episode subgraph: iterative molecule–molecule
//! edge prediction, typed message passing, and pair classification.
//!
//! Each of the L layers first predicts weighted mol2mol edges from the
//! current molecule states (`α = sigmoid(MLP(exp(−|h_i − h_j|)))`, keeping
//! per node the k strongest partners as a hard mask while the kept α stay
//! differentiable edge weights), then updates every node with one message
//! pass: the neighborhood term is the mean over neighbors of
//! `(h_j + h_edge) × w` — `w = α` on mol2mol edges, 1 on typed
//! molecule–property edges — and the new state is
//! `LeakyReLU(W_msg · neighborhood + W_root · h_prev)`.
//! Classification concatenates a molecule state with the target-property
//! state and applies a two-layer MLP ending in a sigmoid.

use crate::autodiff::params::{uniform_fan_in, Mlp, ParamId, ParamSet};
use crate::autodiff::{AutodiffError, Tape, Var};
use crate::encoder::{encode_molecule, EncoderParams};
use crate::episode::EpisodeSubgraph;
use crate::mpg::{EdgeType, Mpg};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Hidden width of the edge-predictor and classifier MLPs.
pub const MLP_HIDDEN: usize = 128;

/// Edge-type vocabulary for message passing: the three relation-graph
/// types plus the predicted mol2mol type.
pub const EDGE_TYPE_CLASSES: usize = 4;
pub const M2M_EDGE_TYPE: usize = 3;

pub fn edge_type_index(ty: EdgeType) -> usize {
    match ty {
        EdgeType::Active => 0,
        EdgeType::Inactive => 1,
        EdgeType::Unk => 2,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelNetLayer {
    /// Eq.-8 style edge predictor: d → 128 → 1.
    pub edge_predictor: Mlp,
    /// `[EDGE_TYPE_CLASSES, d]` learnable edge-type embeddings.
    pub edge_table: ParamId,
    /// `[d, d]`, no bias.
    pub w_msg: ParamId,
    /// `[d, d]`, no bias.
    pub w_root: ParamId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelNetParams {
    pub dim: usize,
    pub layers: Vec<RelNetLayer>,
    /// Pair classifier: 2d → 128 → 1.
    pub classifier: Mlp,
}

impl RelNetParams {
    pub fn init<R: Rng>(set: &mut ParamSet, dim: usize, n_layers: usize, rng: &mut R) -> Self {
        assert!(n_layers >= 1, "relation net needs at least one layer");
        let layers = (0..n_layers)
            .map(|_| RelNetLayer {
                edge_predictor: Mlp::init(set, dim, MLP_HIDDEN, 1, rng),
                edge_table: set.add(uniform_fan_in(&[EDGE_TYPE_CLASSES, dim], dim, rng)),
                w_msg: set.add(uniform_fan_in(&[dim, dim], dim, rng)),
                w_root: set.add(uniform_fan_in(&[dim, dim], dim, rng)),
            })
            .collect();
        let classifier = Mlp::init(set, 2 * dim, MLP_HIDDEN, 1, rng);
        RelNetParams {
            dim,
            layers,
            classifier,
        }
    }
}

/// Everything trainable in the prediction model θ: molecular encoder,
/// relation layers, classifier, and the property-node embedding table
/// (seeded from the relation graph's random initialization).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelParams {
    pub set: ParamSet,
    pub encoder: EncoderParams,
    pub relnet: RelNetParams,
    /// `[n_properties, d]` property-node embeddings.
    pub properties: ParamId,
}

impl ModelParams {
    pub fn init<R: Rng>(mpg: &Mpg, enc_layers: usize, rel_layers: usize, rng: &mut R) -> Self {
        let dim = mpg.dim();
        let mut set = ParamSet::new();
        let encoder = EncoderParams::init(&mut set, dim, enc_layers, rng);
        let relnet = RelNetParams::init(&mut set, dim, rel_layers, rng);
        let properties = set.add(mpg.property_embeddings().clone());
        ModelParams {
            set,
            encoder,
            relnet,
            properties,
        }
    }

    pub fn dim(&self) -> usize {
        self.relnet.dim
    }
}

/// Forward-pass switches; the defaults run the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForwardOptions {
    /// Per-node partner budget for mol2mol edges.
    pub top_k: usize,
    /// `false` disables mol2mol prediction entirely (ablation "w/o m2m").
    pub mol2mol: bool,
    /// `false` drops the edge-type embedding from every message (ablation
    /// "w/o edge types").
    pub edge_embeddings: bool,
    /// Whether query molecules participate in mol2mol edge prediction;
    /// the full subgraph is encoded jointly by default.
    pub query_in_m2m: bool,
}

impl ForwardOptions {
    /// Defaults for a K-shot episode: top-k of 1 in 1-shot and K−1 beyond.
    pub fn for_k_shot(k: usize) -> Self {
        ForwardOptions {
            top_k: k.saturating_sub(1).max(1),
            mol2mol: true,
            edge_embeddings: true,
            query_in_m2m: true,
        }
    }
}

/// Predicted mol2mol edges at one layer.
#[derive(Debug, Clone)]
pub struct Mol2Mol<'t> {
    /// α for every scored unordered slot pair, `(i, j)` with `i < j`.
    pub alphas: Vec<((usize, usize), Var<'t>)>,
    /// Pairs kept by the per-node top-k rule, ascending, deduplicated.
    pub kept: Vec<(usize, usize)>,
}

impl<'t> Mol2Mol<'t> {
    fn alpha_of(&self, i: usize, j: usize) -> Var<'t> {
        let key = (i.min(j), i.max(j));
        self.alphas
            .iter()
            .find(|&&(k, _)| k == key)
            .map(|&(_, v)| v)
            .expect("kept edge must have been scored")
    }
}

/// Relation score for one molecule pair: `sigmoid(MLP(exp(−|h_a − h_b|)))`.
/// Symmetric in its arguments by construction.
pub fn edge_alpha<'t>(
    a: Var<'t>,
    b: Var<'t>,
    predictor: &Mlp,
    leaves: &[Var<'t>],
    tape: &'t Tape,
) -> Result<Var<'t>, AutodiffError> {
    let sim = tape.affine((a - b).abs(), -1.0, 0.0).exp();
    Ok(predictor.apply(leaves, sim)?.sigmoid())
}

/// Scores every unordered pair of `mol_slots` and keeps, for each slot, the
/// `k` partners with the largest α (clamped to the available partner
/// count). The kept set is the union over slots, so it is symmetric; ties
/// break toward the lower partner slot.
pub fn predict_mol_edges<'t>(
    states: &[Var<'t>],
    mol_slots: &[usize],
    k: usize,
    predictor: &Mlp,
    leaves: &[Var<'t>],
    tape: &'t Tape,
) -> Result<Mol2Mol<'t>, AutodiffError> {
    assert!(mol_slots.len() >= 2, "mol2mol prediction needs two molecules");
    let mut alphas = Vec::with_capacity(mol_slots.len() * (mol_slots.len() - 1) / 2);
    for (ai, &i) in mol_slots.iter().enumerate() {
        for &j in &mol_slots[ai + 1..] {
            let alpha = edge_alpha(states[i], states[j], predictor, leaves, tape)?;
            alphas.push(((i.min(j), i.max(j)), alpha));
        }
    }
    let k = k.min(mol_slots.len() - 1);
    let mut kept = std::collections::BTreeSet::new();
    for &i in mol_slots {
        let mut partners: Vec<(usize, f64)> = alphas
            .iter()
            .filter(|&&((a, b), _)| a == i || b == i)
            .map(|&((a, b), v)| (if a == i { b } else { a }, v.item()))
            .collect();
        partners.sort_by(|x, y| {
            y.1.partial_cmp(&x.1)
                .expect("alpha is never NaN")
                .then(x.0.cmp(&y.0))
        });
        for &(j, _) in partners.iter().take(k) {
            kept.insert((i.min(j), i.max(j)));
        }
    }
    Ok(Mol2Mol {
        alphas,
        kept: kept.into_iter().collect(),
    })
}

/// One incoming message: source slot, edge-type class, and an optional
/// multiplicative weight (mol2mol edges carry their α; typed edges weigh 1).
#[derive(Debug, Clone, Copy)]
pub struct Incoming<'t> {
    pub from: usize,
    pub edge_type: usize,
    pub weight: Option<Var<'t>>,
}

/// One typed message-passing update over all nodes. A node with no
/// neighbors keeps a zero neighborhood term: its update reduces to
/// `LeakyReLU(W_root · h_prev)`.
pub fn message_passing_layer<'t>(
    states: &[Var<'t>],
    neighbors: &[Vec<Incoming<'t>>],
    layer: &RelNetLayer,
    edge_embeddings: bool,
    leaves: &[Var<'t>],
    tape: &'t Tape,
) -> Result<Vec<Var<'t>>, AutodiffError> {
    assert_eq!(states.len(), neighbors.len(), "one neighbor list per node");
    let mut next = Vec::with_capacity(states.len());
    for (i, incoming) in neighbors.iter().enumerate() {
        let root = tape.matvec(leaves[layer.w_root.0], states[i])?;
        let pre = if incoming.is_empty() {
            root
        } else {
            let mut terms = Vec::with_capacity(incoming.len());
            for msg in incoming {
                let mut term = if edge_embeddings {
                    let emb = tape.row(leaves[layer.edge_table.0], msg.edge_type);
                    states[msg.from] + emb
                } else {
                    states[msg.from]
                };
                if let Some(w) = msg.weight {
                    term = tape.mul(term, w)?;
                }
                terms.push(term);
            }
            let mean = tape.add_n(&terms)?.scale(1.0 / terms.len() as f64);
            tape.matvec(leaves[layer.w_msg.0], mean)? + root
        };
        next.push(pre.leaky_relu());
    }
    Ok(next)
}

/// `sigmoid(f_cls(h_mol ⊕ h_prop))`, a strict (0,1) score.
pub fn classify<'t>(
    h_mol: Var<'t>,
    h_prop: Var<'t>,
    classifier: &Mlp,
    leaves: &[Var<'t>],
    tape: &'t Tape,
) -> Result<Var<'t>, AutodiffError> {
    let joint = tape.concat(h_mol, h_prop)?;
    Ok(classifier.apply(leaves, joint)?.sigmoid())
}

/// Summed binary cross-entropy `Σ −(y log ŷ + (1−y) log(1−ŷ))`; predictions
/// are clamped to `[1e-7, 1−1e-7]` before the logs.
pub fn bce_loss<'t>(
    pairs: &[(bool, Var<'t>)],
    tape: &'t Tape,
) -> Result<Var<'t>, AutodiffError> {
    assert!(!pairs.is_empty(), "loss over an empty set");
    let mut terms = Vec::with_capacity(pairs.len());
    for &(y, pred) in pairs {
        let clamped = tape.clamp(pred, 1e-7, 1.0 - 1e-7);
        let ll = if y {
            clamped.log()
        } else {
            tape.affine(clamped, -1.0, 1.0).log()
        };
        terms.push(ll);
    }
    Ok(tape.add_n(&terms)?.sum().scale(-1.0))
}

/// Result of one episode forward pass. Node slots are ordered support,
/// query, target property, then auxiliary properties.
pub struct EpisodeForward<'t> {
    /// Final states h^L, one per subgraph node slot.
    pub node_states: Vec<Var<'t>>,
    /// `(label, ŷ)` for the 2K support molecules, slot order.
    pub support_preds: Vec<(bool, Var<'t>)>,
    /// `(label, ŷ)` for the M query molecules, slot order.
    pub query_preds: Vec<(bool, Var<'t>)>,
    /// Kept mol2mol edges per layer (empty when disabled).
    pub m2m: Vec<Mol2Mol<'t>>,
    pub target_slot: usize,
}

impl<'t> EpisodeForward<'t> {
    pub fn target_state(&self) -> Var<'t> {
        self.node_states[self.target_slot]
    }

    /// Summed BCE over the 2K support predictions.
    pub fn support_loss(&self, tape: &'t Tape) -> Result<Var<'t>, AutodiffError> {
        bce_loss(&self.support_preds, tape)
    }

    /// Summed BCE over the M query predictions.
    pub fn query_loss(&self, tape: &'t Tape) -> Result<Var<'t>, AutodiffError> {
        bce_loss(&self.query_preds, tape)
    }
}

/// Runs the full relation model on one episode: encoder states for
/// molecules and table rows for properties (layer 0), then L rounds of
/// mol2mol prediction + message passing, then pair classification.
/// `leaves` may mount `model.set` itself or any adapted copy with the same
/// layout.
pub fn forward_episode<'t>(
    ep: &EpisodeSubgraph,
    mpg: &Mpg,
    model: &ModelParams,
    opts: ForwardOptions,
    leaves: &[Var<'t>],
    tape: &'t Tape,
) -> Result<EpisodeForward<'t>, AutodiffError> {
    let n_support = ep.support.len();
    let n_query = ep.query.len();
    let n_mol = n_support + n_query;
    let target_slot = n_mol;
    let n_nodes = ep.n_nodes();

    // slot layout: [support | query | target | aux...]
    let mol_ids: Vec<usize> = ep.molecules().collect();
    let prop_ids: Vec<usize> = std::iter::once(ep.target).chain(ep.aux.iter().copied()).collect();
    let prop_slot = |prop: usize| -> usize {
        target_slot
            + prop_ids
                .iter()
                .position(|&p| p == prop)
                .expect("edge property is in the subgraph")
    };
    let mol_slot = |mol: usize| -> usize {
        mol_ids
            .iter()
            .position(|&m| m == mol)
            .expect("edge molecule is in the subgraph")
    };

    let mut states: Vec<Var<'t>> = Vec::with_capacity(n_nodes);
    for &id in &mol_ids {
        states.push(encode_molecule(mpg.molecule(id), &model.encoder, leaves, tape)?);
    }
    for &p in &prop_ids {
        states.push(tape.row(leaves[model.properties.0], p));
    }

    // typed molecule–property messages are fixed across layers
    let mut typed: Vec<Vec<Incoming<'t>>> = vec![Vec::new(); n_nodes];
    for &(mol, prop, ty) in &ep.edges {
        let (ms, ps, ti) = (mol_slot(mol), prop_slot(prop), edge_type_index(ty));
        typed[ms].push(Incoming {
            from: ps,
            edge_type: ti,
            weight: None,
        });
        typed[ps].push(Incoming {
            from: ms,
            edge_type: ti,
            weight: None,
        });
    }

    let m2m_slots: Vec<usize> = if opts.query_in_m2m {
        (0..n_mol).collect()
    } else {
        (0..n_support).collect()
    };

    let mut m2m_record = Vec::with_capacity(model.relnet.layers.len());
    for layer in &model.relnet.layers {
        let mut neighbors = typed.clone();
        if opts.mol2mol && m2m_slots.len() >= 2 {
            let m2m = predict_mol_edges(
                &states,
                &m2m_slots,
                opts.top_k,
                &layer.edge_predictor,
                leaves,
                tape,
            )?;
            for &(i, j) in &m2m.kept {
                let alpha = m2m.alpha_of(i, j);
                neighbors[i].push(Incoming {
                    from: j,
                    edge_type: M2M_EDGE_TYPE,
                    weight: Some(alpha),
                });
                neighbors[j].push(Incoming {
                    from: i,
                    edge_type: M2M_EDGE_TYPE,
                    weight: Some(alpha),
                });
            }
            m2m_record.push(m2m);
        } else {
            m2m_record.push(Mol2Mol {
                alphas: Vec::new(),
                kept: Vec::new(),
            });
        }
        states = message_passing_layer(
            &states,
            &neighbors,
            layer,
            opts.edge_embeddings,
            leaves,
            tape,
        )?;
    }

    let h_target = states[target_slot];
    let mut support_preds = Vec::with_capacity(n_support);
    for (slot, &(_, label)) in ep.support.iter().enumerate() {
        let pred = classify(states[slot], h_target, &model.relnet.classifier, leaves, tape)?;
        support_preds.push((label, pred));
    }
    let mut query_preds = Vec::with_capacity(n_query);
    for (qi, &(_, label)) in ep.query.iter().enumerate() {
        let pred = classify(
            states[n_support + qi],
            h_target,
            &model.relnet.classifier,
            leaves,
            tape,
        )?;
        query_preds.push((label, pred));
    }

    Ok(EpisodeForward {
        node_states: states,
        support_preds,
        query_preds,
        m2m: m2m_record,
        target_slot,
    })
}
