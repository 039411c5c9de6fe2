//! Bi-level episodic training: first-order meta-gradients over scheduled
//! episode batches, meta-test finetuning, and ROC-AUC evaluation.
//!
//! Each outer step samples a candidate pool of episode pairs, lets the
//! scheduler pick a mini-batch of B pairs, adapts a copy of the model to
//! every member's support set (inner loop), and descends the meta-loss
//!
//! ```text
//! (1/2B) Σ_t [ L_query(G_t^(1); θ'_t1) + L_query(G_t^(2); θ'_t2) ] + λ·L_ctr(θ)
//! ```
//!
//! first-order style: query-loss gradients are taken at the adapted
//! parameters and applied to the shared ones, skipping differentiation
//! through the inner update. The contrastive term is computed under the
//! shared parameters and doubles as the scheduler's REINFORCE reward.
//!
//! All randomness flows from one seed through named, independent streams
//! ([`stream_rng`]), so two runs with equal configuration produce
//! bit-identical logs, and an ablation perturbs only its own stream.

use crate::autodiff::params::{accumulate, ParamSet};
use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::episode::{assemble_subgraph, sample_candidate_pool, EpisodeError, EpisodeSubgraph};
use crate::exec;
use crate::mpg::{EdgeType, Mpg, PropertySplit};
use crate::relnet::{forward_episode, ForwardOptions, ModelParams};
use crate::scheduler::{
    contrastive_loss, scheduler_update, select_batch, select_batch_grouped,
    selection_probabilities, subgraph_embedding, SchedulerError, SchedulerParams,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetaError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("non-finite {0}")]
    NumericalDivergence(String),
    #[error("ROC-AUC needs both classes, got {positives} positives of {total}")]
    SingleClass { positives: usize, total: usize },
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Every knob of one training run. Defaults follow the reference setting:
/// 300-dimensional embeddings, 5 encoder and 2 relation layers, inner rate
/// 0.05, outer rate 0.001, scheduler rate 0.0005, τ = 0.08, λ = 0.05, pools
/// of 10 pairs with batches of 5, 2000 steps with evaluation every 100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Support molecules per class (K).
    pub k_shot: usize,
    /// Query molecules per episode (M).
    pub m_query: usize,
    /// Auxiliary properties per episode, clamped to what the split allows.
    pub n_aux: usize,
    /// Candidate pairs sampled per step.
    pub n_pool: usize,
    /// Pairs selected per step (B).
    pub batch: usize,
    /// Molecular-encoder layers.
    pub enc_layers: usize,
    /// Relation-module layers (L).
    pub rel_layers: usize,
    /// Node embedding width (d); must match the relation graph.
    pub dim: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    /// Scheduler policy learning rate (γ).
    pub sched_lr: f64,
    pub tau: f64,
    /// Weight of the contrastive term in the meta-loss (λ).
    pub lambda: f64,
    pub max_steps: usize,
    /// Evaluate every this many steps; 0 disables in-training evaluation.
    pub eval_interval: usize,
    /// Inner-loop gradient steps during training.
    pub inner_steps: usize,
    /// Inner-loop gradient steps at meta-test time.
    pub finetune_steps: usize,
    /// Meta-test adaptation rate; `None` reuses `inner_lr`.
    pub finetune_lr: Option<f64>,
    pub seed: u64,
    /// Ablation: drop predicted molecule–molecule edges.
    pub no_m2m: bool,
    /// Ablation: drop edge-type embeddings from messages.
    pub no_edge_types: bool,
    /// Ablation: uniform batch selection instead of the learned scheduler.
    pub no_scheduler: bool,
    /// Ablation: drop λ·L_ctr from the meta-loss and zero the reward.
    pub no_contrastive: bool,
    /// Use the conventional NT-Xent denominator (positive pair included).
    pub ntxent_standard: bool,
    /// Forbid two selected pairs from sharing a target property.
    pub distinct_targets: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k_shot: 10,
            m_query: 1,
            n_aux: 20,
            n_pool: 10,
            batch: 5,
            enc_layers: 5,
            rel_layers: 2,
            dim: 300,
            inner_lr: 0.05,
            outer_lr: 0.001,
            sched_lr: 0.0005,
            tau: 0.08,
            lambda: 0.05,
            max_steps: 2000,
            eval_interval: 100,
            inner_steps: 1,
            finetune_steps: 1,
            finetune_lr: None,
            seed: 0,
            no_m2m: false,
            no_edge_types: false,
            no_scheduler: false,
            no_contrastive: false,
            ntxent_standard: false,
            distinct_targets: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), MetaError> {
        let bad = |msg: &str| Err(MetaError::InvalidConfig(msg.to_string()));
        if self.k_shot == 0 || self.m_query == 0 {
            return bad("k_shot and m_query must be at least 1");
        }
        if self.batch == 0 || self.batch > self.n_pool {
            return bad("batch must satisfy 1 <= batch <= n_pool");
        }
        if self.dim == 0 || self.enc_layers == 0 || self.rel_layers == 0 {
            return bad("dim, enc_layers, and rel_layers must be at least 1");
        }
        if !(self.inner_lr > 0.0 && self.outer_lr > 0.0 && self.sched_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if let Some(lr) = self.finetune_lr {
            if !(lr > 0.0) {
                return bad("finetune_lr must be positive when set");
            }
        }
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if self.max_steps == 0 || self.inner_steps == 0 || self.finetune_steps == 0 {
            return bad("max_steps, inner_steps, and finetune_steps must be at least 1");
        }
        Ok(())
    }

    /// Forward-pass switches implied by the ablation flags; top-k follows
    /// the K−1 rule (1 in 1-shot).
    pub fn forward_options(&self) -> ForwardOptions {
        ForwardOptions {
            top_k: self.k_shot.saturating_sub(1).max(1),
            mol2mol: !self.no_m2m,
            edge_embeddings: !self.no_edge_types,
            query_in_m2m: true,
        }
    }
}

fn hash64(s: &str) -> u64 {
    // FNV-1a
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Named random stream: same seed and name always yield the same sequence,
/// and distinct names never share one, so consumers can't perturb each
/// other.
pub fn stream_rng(seed: u64, name: &str) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(hash64(name));
    rng
}

/// One inner loop: `steps` gradient-descent updates of a fresh parameter
/// copy on the episode's support loss. `params` may be the model's own set
/// or any adapted copy; it is never mutated.
pub fn inner_adapt(
    model: &ModelParams,
    params: &ParamSet,
    ep: &EpisodeSubgraph,
    mpg: &Mpg,
    opts: ForwardOptions,
    lr: f64,
    steps: usize,
) -> Result<ParamSet, MetaError> {
    assert!(steps >= 1, "adaptation needs at least one step");
    let mut adapted = params.clone();
    for _ in 0..steps {
        let tape = Tape::new();
        let leaves = adapted.leaves(&tape);
        let fwd = forward_episode(ep, mpg, model, opts, &leaves, &tape)?;
        let loss = fwd.support_loss(&tape)?;
        if !loss.item().is_finite() {
            return Err(MetaError::NumericalDivergence(format!(
                "support loss {} during adaptation",
                loss.item()
            )));
        }
        tape.backward(loss)?;
        let grads = adapted.read_grads(&leaves);
        adapted.apply_scaled(&grads, -lr);
    }
    Ok(adapted)
}

/// The batch contrastive term under one shared parameter set: both members
/// of every pair are forwarded on `tape`, condensed to subgraph embeddings,
/// and contrasted.
#[allow(clippy::too_many_arguments)]
pub fn batch_contrastive<'t>(
    batch: &[(EpisodeSubgraph, EpisodeSubgraph)],
    mpg: &Mpg,
    model: &ModelParams,
    opts: ForwardOptions,
    tau: f64,
    include_positive: bool,
    leaves: &[Var<'t>],
    tape: &'t Tape,
) -> Result<Var<'t>, MetaError> {
    let mut firsts = Vec::with_capacity(batch.len());
    let mut seconds = Vec::with_capacity(batch.len());
    for (a, b) in batch {
        let fa = forward_episode(a, mpg, model, opts, leaves, tape)?;
        firsts.push(subgraph_embedding(&fa, tape)?);
        let fb = forward_episode(b, mpg, model, opts, leaves, tape)?;
        seconds.push(subgraph_embedding(&fb, tape)?);
    }
    Ok(contrastive_loss(&firsts, &seconds, tau, include_positive, tape)?)
}

/// What one outer step observed, before applying the parameter update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuterOutcome {
    /// `(1/2B) Σ query losses + λ·L_ctr`.
    pub meta_loss: f64,
    /// The query-loss part alone.
    pub query_loss: f64,
    /// L_ctr value (0 when contrastive is disabled or B = 1).
    pub contrastive: f64,
}

/// One first-order meta-update on a selected batch: adapt per member, take
/// query-loss gradients at the adapted parameters, average, add λ times the
/// contrastive gradient under the shared parameters, and descend.
pub fn outer_step(
    model: &mut ModelParams,
    mpg: &Mpg,
    batch: &[(EpisodeSubgraph, EpisodeSubgraph)],
    cfg: &TrainConfig,
) -> Result<OuterOutcome, MetaError> {
    assert!(!batch.is_empty(), "outer step needs a batch");
    let opts = cfg.forward_options();
    let denom = (2 * batch.len()) as f64;
    let members: Vec<&EpisodeSubgraph> = batch.iter().flat_map(|(a, b)| [a, b]).collect();

    let shared = &*model;
    let per_member: Vec<Result<(Vec<Tensor>, f64), MetaError>> =
        exec::map_collect(&members, |ep| {
            let adapted =
                inner_adapt(shared, &shared.set, ep, mpg, opts, cfg.inner_lr, cfg.inner_steps)?;
            let tape = Tape::new();
            let leaves = adapted.leaves(&tape);
            let fwd = forward_episode(ep, mpg, shared, opts, &leaves, &tape)?;
            let loss = fwd.query_loss(&tape)?;
            let value = loss.item();
            tape.backward(loss)?;
            Ok((adapted.read_grads(&leaves), value))
        });

    let mut acc = shared.set.zero_grads();
    let mut query_sum = 0.0;
    for r in per_member {
        let (grads, value) = r?;
        accumulate(&mut acc, &grads, 1.0 / denom);
        query_sum += value;
    }
    let query_loss = query_sum / denom;

    let mut ctr_value = 0.0;
    if !cfg.no_contrastive && batch.len() >= 2 {
        let tape = Tape::new();
        let leaves = shared.set.leaves(&tape);
        let ctr = batch_contrastive(
            batch,
            mpg,
            shared,
            opts,
            cfg.tau,
            cfg.ntxent_standard,
            &leaves,
            &tape,
        )?;
        ctr_value = ctr.item();
        tape.backward(ctr)?;
        accumulate(&mut acc, &shared.set.read_grads(&leaves), cfg.lambda);
    }

    let meta_loss = query_loss + cfg.lambda * ctr_value;
    if !meta_loss.is_finite() || !ctr_value.is_finite() {
        return Err(MetaError::NumericalDivergence(format!(
            "meta-loss {meta_loss} (contrastive {ctr_value})"
        )));
    }
    model.set.apply_scaled(&acc, -cfg.outer_lr);
    Ok(OuterOutcome {
        meta_loss,
        query_loss,
        contrastive: ctr_value,
    })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub meta_loss: f64,
    pub query_loss: f64,
    pub contrastive: f64,
    pub reward: f64,
    pub baseline: f64,
    /// Target property of each selected pair, in draw order.
    pub targets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    /// `(test property, ROC-AUC)`.
    pub aucs: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

pub struct TrainOutcome {
    pub model: ModelParams,
    pub scheduler: SchedulerParams,
    pub log: TrainLog,
}

/// Runs the full training loop on the relation graph's train split.
///
/// Per step: sample a candidate pool → score it and select B pairs (or
/// select uniformly under `no_scheduler`) → one [`outer_step`] → reward the
/// scheduler with the contrastive value (0 under `no_contrastive`). Aborts
/// on any non-finite loss. With both scheduler and contrastive ablated the
/// loop degenerates to uniform-sampled episodic first-order meta-learning.
pub fn train(mpg: &Mpg, split: &PropertySplit, cfg: &TrainConfig) -> Result<TrainOutcome, MetaError> {
    cfg.validate()?;
    if mpg.dim() != cfg.dim {
        return Err(MetaError::InvalidConfig(format!(
            "config dim {} does not match relation-graph dim {}",
            cfg.dim,
            mpg.dim()
        )));
    }
    let n_aux = cfg.n_aux.min(split.train.len().saturating_sub(1));
    let opts = cfg.forward_options();

    let mut model = ModelParams::init(
        mpg,
        cfg.enc_layers,
        cfg.rel_layers,
        &mut stream_rng(cfg.seed, "model_init"),
    );
    let mut sched = SchedulerParams::init(cfg.dim, &mut stream_rng(cfg.seed, "sched_init"));
    let mut sampling = stream_rng(cfg.seed, "sampling");
    let mut selection = stream_rng(cfg.seed, "selection");
    let mut log = TrainLog::default();

    for step in 0..cfg.max_steps {
        let pool = sample_candidate_pool(
            mpg,
            split,
            cfg.n_pool,
            cfg.k_shot,
            cfg.m_query,
            n_aux,
            &mut sampling,
        )?;

        let sched_tape = Tape::new();
        let mut sched_leaves = Vec::new();
        let mut selection_log_prob = None;
        let chosen: Vec<usize> = if cfg.no_scheduler {
            rand::seq::index::sample(&mut selection, cfg.n_pool, cfg.batch).into_vec()
        } else {
            let flat: Vec<&EpisodeSubgraph> = pool.iter().flat_map(|(a, b)| [a, b]).collect();
            let model_ref = &model;
            let g: Vec<Result<Tensor, MetaError>> = exec::map_collect(&flat, |ep| {
                let tape = Tape::new();
                let leaves = model_ref.set.leaves(&tape);
                let fwd = forward_episode(ep, mpg, model_ref, opts, &leaves, &tape)?;
                // value only: selection must not backpropagate into the model
                Ok(subgraph_embedding(&fwd, &tape)?.value())
            });
            sched_leaves = sched.set.leaves(&sched_tape);
            let mut embeddings = Vec::with_capacity(flat.len());
            for t in g {
                embeddings.push(sched_tape.constant(t?));
            }
            let scores =
                selection_probabilities(&embeddings, &sched, &sched_leaves, &sched_tape)?;
            let sel = if cfg.distinct_targets {
                let groups: Vec<usize> = pool.iter().map(|(a, _)| a.target).collect();
                select_batch_grouped(&scores, cfg.batch, &groups, &sched_tape, &mut selection)?
            } else {
                select_batch(&scores, cfg.batch, &sched_tape, &mut selection)?
            };
            selection_log_prob = Some(sel.log_prob);
            sel.chosen
        };

        let batch: Vec<(EpisodeSubgraph, EpisodeSubgraph)> =
            chosen.iter().map(|&j| pool[j].clone()).collect();
        let outcome = outer_step(&mut model, mpg, &batch, cfg)?;
        let reward = if cfg.no_contrastive { 0.0 } else { outcome.contrastive };
        if let Some(log_prob) = selection_log_prob {
            scheduler_update(
                &mut sched,
                &sched_tape,
                &sched_leaves,
                log_prob,
                reward,
                cfg.sched_lr,
            )?;
        }

        log.steps.push(StepRecord {
            step,
            meta_loss: outcome.meta_loss,
            query_loss: outcome.query_loss,
            contrastive: outcome.contrastive,
            reward,
            baseline: sched.baseline,
            targets: batch.iter().map(|(a, _)| a.target).collect(),
        });

        if cfg.eval_interval > 0 && (step + 1) % cfg.eval_interval == 0 {
            let mut eval_rng = stream_rng(cfg.seed, &format!("eval:{step}"));
            let aucs = evaluate_split(&model, mpg, split, cfg, &mut eval_rng)?;
            log.evals.push(EvalRecord { step, aucs });
        }
    }

    Ok(TrainOutcome {
        model,
        scheduler: sched,
        log,
    })
}

/// Draws the fixed evaluation context for one property: a K-per-class
/// support set and auxiliary properties from the train split (never the
/// property under evaluation).
pub fn evaluation_support<R: Rng>(
    mpg: &Mpg,
    split: &PropertySplit,
    prop: usize,
    k: usize,
    n_aux: usize,
    rng: &mut R,
) -> Result<(Vec<(usize, bool)>, Vec<usize>), MetaError> {
    let actives = mpg.molecules_with(prop, EdgeType::Active);
    let inactives = mpg.molecules_with(prop, EdgeType::Inactive);
    for (class, list) in [("active", &actives), ("inactive", &inactives)] {
        if list.len() < k {
            return Err(EpisodeError::InsufficientMolecules {
                target: prop,
                class,
                needed: k,
                available: list.len(),
            }
            .into());
        }
    }
    let pick = |pool: &[usize], n: usize, rng: &mut R| -> Vec<usize> {
        rand::seq::index::sample(rng, pool.len(), n)
            .iter()
            .map(|i| pool[i])
            .collect()
    };
    let support: Vec<(usize, bool)> = pick(&actives, k, rng)
        .into_iter()
        .map(|id| (id, true))
        .chain(pick(&inactives, k, rng).into_iter().map(|id| (id, false)))
        .collect();

    let allowed: Vec<usize> = split.train.iter().copied().filter(|&t| t != prop).collect();
    let aux = pick(&allowed, n_aux.min(allowed.len()), rng);
    Ok((support, aux))
}

/// Finetunes a copy of the model on one sampled support set of `prop` and
/// scores every remaining labeled molecule, each in its own subgraph with
/// that same support and auxiliary set. Returns the ROC-AUC of the scores
/// against the held-out labels. The model itself is untouched.
pub fn finetune_and_evaluate<R: Rng>(
    model: &ModelParams,
    mpg: &Mpg,
    split: &PropertySplit,
    prop: usize,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<f64, MetaError> {
    let (support, aux) = evaluation_support(mpg, split, prop, cfg.k_shot, cfg.n_aux, rng)?;
    let opts = cfg.forward_options();

    let finetune_ep = assemble_subgraph(mpg, prop, &support, &[], &aux);
    let adapted = inner_adapt(
        model,
        &model.set,
        &finetune_ep,
        mpg,
        opts,
        cfg.finetune_lr.unwrap_or(cfg.inner_lr),
        cfg.finetune_steps,
    )?;

    let in_support = |id: usize| support.iter().any(|&(s, _)| s == id);
    let mut candidates: Vec<(usize, bool)> = mpg
        .molecules_with(prop, EdgeType::Active)
        .into_iter()
        .map(|id| (id, true))
        .chain(
            mpg.molecules_with(prop, EdgeType::Inactive)
                .into_iter()
                .map(|id| (id, false)),
        )
        .filter(|&(id, _)| !in_support(id))
        .collect();
    candidates.sort_unstable_by_key(|&(id, _)| id);

    let scored: Vec<Result<f64, MetaError>> = exec::map_collect(&candidates, |&(id, label)| {
        let ep = assemble_subgraph(mpg, prop, &support, &[(id, label)], &aux);
        let tape = Tape::new();
        let leaves = adapted.leaves(&tape);
        let fwd = forward_episode(&ep, mpg, model, opts, &leaves, &tape)?;
        Ok(fwd.query_preds[0].1.item())
    });

    let mut scores = Vec::with_capacity(candidates.len());
    for s in scored {
        scores.push(s?);
    }
    let labels: Vec<bool> = candidates.iter().map(|&(_, l)| l).collect();
    roc_auc(&scores, &labels)
}

/// [`finetune_and_evaluate`] over every test property of the split.
pub fn evaluate_split<R: Rng>(
    model: &ModelParams,
    mpg: &Mpg,
    split: &PropertySplit,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<(usize, f64)>, MetaError> {
    split
        .test
        .iter()
        .map(|&p| finetune_and_evaluate(model, mpg, split, p, cfg, rng).map(|auc| (p, auc)))
        .collect()
}

/// Rank-based ROC-AUC with average ranks for ties:
/// `(U statistic) / (positives × negatives)`.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetaError> {
    assert_eq!(scores.len(), labels.len(), "one label per score");
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetaError::SingleClass {
            positives: n_pos,
            total: labels.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("scores must not be NaN"));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let pos_rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|&(_, &l)| l)
        .map(|(r, _)| r)
        .sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}
