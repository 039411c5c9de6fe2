//! Few-shot molecular property prediction on a molecule-property relation graph.
//!
//! The pipeline: SMILES strings are parsed into molecular graphs ([`chem`]),
//! encoded by a graph isomorphism network ([`encoder`]), and connected to
//! property nodes in a bipartite relation graph ([`mpg`]). Meta-learning
//! episodes are sampled as subgraphs of that relation graph ([`episode`]),
//! encoded and classified by a typed message-passing network ([`relnet`]),
//! and scheduled by a policy-gradient-trained sampler that scores candidate
//! episodes with a contrastive objective ([`scheduler`]). The bi-level
//! training loop, evaluation, and metrics live in [`meta`]; dataset ingestion
//! and experiment orchestration in [`cli`].
//!
//! All numeric work runs on the reverse-mode autodiff core in [`autodiff`].
//! With the `parallel` feature (on by default) the data-parallel inner loops
//! fan out over rayon; results are bit-identical to the sequential fallback.

pub mod autodiff;
pub mod chem;
pub mod cli;
pub mod encoder;
pub mod episode;
pub mod exec;
pub mod meta;
pub mod mpg;
pub mod relnet;
pub mod scheduler;
pub mod synth;
