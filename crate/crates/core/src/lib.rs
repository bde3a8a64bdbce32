//! Joint instance and verbalizer selection for cold-start prompt-based
//! classification.
//!
//! Vocabulary token embeddings and instance `[MASK]` embeddings are projected
//! into one reduced, unit-normalized space, clustered, and then a budgeted
//! loop picks which instances to annotate and which tokens become verbalizers.

pub mod baselines;
pub mod clustering;
pub mod embed_io;
pub mod geometry;
pub mod seeding;
pub mod selection;
pub mod simulation;
pub mod synthetic;
pub mod verbalizer_eval;
