//! Episode-pair scheduler: scores candidate subgraph pairs, draws a training
//! mini-batch, and improves its own policy by REINFORCE.
//!
//! Each candidate subgraph is condensed to an embedding
//! `g = h_target + sigmoid(Σ other node states)`. Two small MLPs turn the
//! pool into per-subgraph scores — `score(g_t + context(Σ_{i≠t} g_i))` —
//! which a softmax normalizes to probabilities η; a pair's probability is
//! the mean of its members' η, renormalized over the pool. Batches are drawn
//! without replacement, and the stored log-likelihood of the draw sequence
//! carries the policy gradient: the scheduler is rewarded with the training
//! loop's contrastive loss, against a moving-average baseline.

use crate::autodiff::params::{Mlp, ParamSet};
use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::relnet::{EpisodeForward, MLP_HIDDEN};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Temperature of the contrastive objective.
pub const DEFAULT_TAU: f64 = 0.08;
/// Reward moving-average smoothing: `b ← 0.9·b + 0.1·R`.
pub const BASELINE_DECAY: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SchedulerError {
    #[error("cannot select {requested} pairs from a pool of {available}")]
    BatchTooLarge { requested: usize, available: usize },
    #[error("contrastive batch needs at least 2 pairs, got {0}")]
    DegenerateBatch(usize),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Everything trainable in the scheduler policy φ, plus its reward baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchedulerParams {
    pub set: ParamSet,
    /// d → scalar scoring head.
    pub score: Mlp,
    /// d → d transform of the pooled context (the other subgraphs' sum).
    pub context: Mlp,
    /// Moving average of the reward, initialized to 0.
    pub baseline: f64,
}

impl SchedulerParams {
    pub fn init<R: Rng>(dim: usize, rng: &mut R) -> Self {
        let mut set = ParamSet::new();
        let score = Mlp::init(&mut set, dim, MLP_HIDDEN, 1, rng);
        let context = Mlp::init(&mut set, dim, MLP_HIDDEN, dim, rng);
        SchedulerParams {
            set,
            score,
            context,
            baseline: 0.0,
        }
    }
}

/// Condenses one episode forward pass: `g = h_target + sigmoid(Σ h_other)`,
/// invariant to the order of the non-target nodes.
pub fn subgraph_embedding<'t>(
    fwd: &EpisodeForward<'t>,
    tape: &'t Tape,
) -> Result<Var<'t>, AutodiffError> {
    let others: Vec<Var<'t>> = fwd
        .node_states
        .iter()
        .enumerate()
        .filter(|&(slot, _)| slot != fwd.target_slot)
        .map(|(_, &v)| v)
        .collect();
    Ok(fwd.target_state() + tape.add_n(&others)?.sigmoid())
}

/// Scored candidate pool. Entry `2j` is the first member of pair `j` and
/// `2j + 1` the second.
#[derive(Debug, Clone)]
pub struct PoolScores<'t> {
    /// Subgraph embeddings, length `2 · n_pairs`.
    pub embeddings: Vec<Var<'t>>,
    /// Raw policy scores, one `[1]` tensor per subgraph.
    pub raw: Vec<Var<'t>>,
    /// Softmax of the raw scores over all subgraphs; positive, sums to 1.
    pub eta: Vec<Var<'t>>,
    /// Per-pair probabilities `(η_first + η_second) / 2`, renormalized to
    /// sum to 1 over the pool.
    pub pair_probs: Vec<Var<'t>>,
}

/// Scores every subgraph in the pool: `raw_t = score(g_t + context(Σ_{i≠t}
/// g_i))`, softmax-normalized over all `2 · n_pairs` subgraphs, then folded
/// to renormalized pair probabilities.
pub fn selection_probabilities<'t>(
    embeddings: &[Var<'t>],
    sched: &SchedulerParams,
    leaves: &[Var<'t>],
    tape: &'t Tape,
) -> Result<PoolScores<'t>, SchedulerError> {
    let n = embeddings.len();
    assert!(n >= 2 && n % 2 == 0, "pool holds pairs of subgraphs, got {n}");

    let mut raw = Vec::with_capacity(n);
    for (t, &g) in embeddings.iter().enumerate() {
        let others: Vec<Var<'t>> = embeddings
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != t)
            .map(|(_, &v)| v)
            .collect();
        let ctx = sched.context.apply(leaves, tape.add_n(&others)?)?;
        raw.push(sched.score.apply(leaves, tape.add(g, ctx)?)?);
    }

    let eta_vec = tape.softmax(tape.stack(&raw)?, 0)?;
    let pick = |weights: Vec<f64>| -> Result<Var<'t>, AutodiffError> {
        let mask = tape.constant(Tensor::vector(&weights));
        Ok(tape.mul(eta_vec, mask)?.sum())
    };

    let mut eta = Vec::with_capacity(n);
    for t in 0..n {
        let mut w = vec![0.0; n];
        w[t] = 1.0;
        eta.push(pick(w)?);
    }

    let mut halved = Vec::with_capacity(n / 2);
    for j in 0..n / 2 {
        let mut w = vec![0.0; n];
        w[2 * j] = 0.5;
        w[2 * j + 1] = 0.5;
        halved.push(pick(w)?);
    }
    let log_total = tape.add_n(&halved)?.log();
    let pair_probs = halved.iter().map(|&p| (p.log() - log_total).exp()).collect();

    Ok(PoolScores {
        embeddings: embeddings.to_vec(),
        raw,
        eta,
        pair_probs,
    })
}

/// A drawn mini-batch: pair indices in draw order and the differentiable
/// log-likelihood of having drawn exactly that sequence.
#[derive(Debug, Clone)]
pub struct Selection<'t> {
    pub chosen: Vec<usize>,
    pub log_prob: Var<'t>,
}

/// Log-likelihood of drawing `chosen` in order, without replacement, from
/// the pool's pair distribution: each draw contributes
/// `log p_j − log Σ_remaining p_i`. After a draw, every pair sharing the
/// drawn pair's group is struck from the remainder (identity groups
/// reproduce plain without-replacement sampling).
pub fn sequence_log_prob_grouped<'t>(
    scores: &PoolScores<'t>,
    chosen: &[usize],
    groups: &[usize],
    tape: &'t Tape,
) -> Result<Var<'t>, SchedulerError> {
    assert_eq!(groups.len(), scores.pair_probs.len(), "one group per pair");
    let mut remaining: Vec<usize> = (0..scores.pair_probs.len()).collect();
    let mut terms = Vec::with_capacity(chosen.len());
    for &j in chosen {
        assert!(
            remaining.contains(&j),
            "chosen pair {j} was already struck from the pool"
        );
        let pool: Vec<Var<'t>> = remaining.iter().map(|&r| scores.pair_probs[r]).collect();
        let denom = tape.add_n(&pool)?.log();
        terms.push(scores.pair_probs[j].log() - denom);
        remaining.retain(|&r| groups[r] != groups[j]);
    }
    Ok(tape.add_n(&terms)?)
}

/// [`sequence_log_prob_grouped`] with every pair in its own group.
pub fn sequence_log_prob<'t>(
    scores: &PoolScores<'t>,
    chosen: &[usize],
    tape: &'t Tape,
) -> Result<Var<'t>, SchedulerError> {
    let groups: Vec<usize> = (0..scores.pair_probs.len()).collect();
    sequence_log_prob_grouped(scores, chosen, &groups, tape)
}

/// Draws `b` pairs without replacement according to the pool's pair
/// probabilities, renormalizing after every draw. A draw removes its whole
/// group from contention, so with a shared `groups` labeling (say, target
/// properties) no two selected pairs share a label.
pub fn select_batch_grouped<'t, R: Rng>(
    scores: &PoolScores<'t>,
    b: usize,
    groups: &[usize],
    tape: &'t Tape,
    rng: &mut R,
) -> Result<Selection<'t>, SchedulerError> {
    let n = scores.pair_probs.len();
    assert_eq!(groups.len(), n, "one group per pair");
    let mut distinct = groups.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if b > distinct.len() {
        return Err(SchedulerError::BatchTooLarge {
            requested: b,
            available: distinct.len(),
        });
    }
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut chosen = Vec::with_capacity(b);
    for _ in 0..b {
        let weights: Vec<f64> = remaining
            .iter()
            .map(|&j| scores.pair_probs[j].item())
            .collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        let mut pick = remaining.len() - 1;
        for (i, &w) in weights.iter().enumerate() {
            if u < w {
                pick = i;
                break;
            }
            u -= w;
        }
        let j = remaining[pick];
        chosen.push(j);
        remaining.retain(|&r| groups[r] != groups[j]);
    }
    let log_prob = sequence_log_prob_grouped(scores, &chosen, groups, tape)?;
    Ok(Selection { chosen, log_prob })
}

/// [`select_batch_grouped`] with every pair in its own group: plain
/// sampling without replacement.
pub fn select_batch<'t, R: Rng>(
    scores: &PoolScores<'t>,
    b: usize,
    tape: &'t Tape,
    rng: &mut R,
) -> Result<Selection<'t>, SchedulerError> {
    let groups: Vec<usize> = (0..scores.pair_probs.len()).collect();
    select_batch_grouped(scores, b, &groups, tape, rng)
}

/// Batch contrastive loss over B pairs of subgraph embeddings:
/// `(1/B) Σ_t −log[ exp(sim(f_t, s_t)/τ) / Σ exp(sim(f_t, s_t')/τ) ]` with
/// cosine similarity. The denominator runs over `t' ≠ t` — the positive pair
/// is excluded — unless `include_positive` asks for the conventional
/// NT-Xent denominator. First views index the terms; the roles of the two
/// views are not symmetrized.
pub fn contrastive_loss<'t>(
    firsts: &[Var<'t>],
    seconds: &[Var<'t>],
    tau: f64,
    include_positive: bool,
    tape: &'t Tape,
) -> Result<Var<'t>, SchedulerError> {
    assert_eq!(firsts.len(), seconds.len(), "one embedding per view");
    let b = firsts.len();
    if b < 2 {
        return Err(SchedulerError::DegenerateBatch(b));
    }
    let mut terms = Vec::with_capacity(b);
    for t in 0..b {
        let pos = tape.affine(tape.cosine_sim(firsts[t], seconds[t])?, 1.0 / tau, 0.0);
        let mut denom = Vec::with_capacity(b);
        for tp in 0..b {
            if tp == t && !include_positive {
                continue;
            }
            let sim = tape.affine(tape.cosine_sim(firsts[t], seconds[tp])?, 1.0 / tau, 0.0);
            denom.push(sim.exp());
        }
        terms.push(tape.add_n(&denom)?.log() - pos);
    }
    Ok(tape.add_n(&terms)?.scale(1.0 / b as f64))
}

/// One REINFORCE step: `φ ← φ + γ · ∇_φ log P · (R − b)`, then the baseline
/// absorbs the reward, `b ← 0.9·b + 0.1·R`. The reward is a plain number —
/// no gradient flows through it.
pub fn scheduler_update<'t>(
    sched: &mut SchedulerParams,
    tape: &'t Tape,
    leaves: &[Var<'t>],
    log_prob: Var<'t>,
    reward: f64,
    gamma: f64,
) -> Result<(), AutodiffError> {
    tape.backward(log_prob)?;
    let grads = sched.set.read_grads(leaves);
    sched.set.apply_scaled(&grads, gamma * (reward - sched.baseline));
    sched.baseline = BASELINE_DECAY * sched.baseline + (1.0 - BASELINE_DECAY) * reward;
    Ok(())
}
