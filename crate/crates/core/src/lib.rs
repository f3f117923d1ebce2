//! Cross-age contrastive representation learning for face identity.
//!
//! Stage one pretrains an MLP encoder and projection head with a
//! three-view NT-Xent loss, where the third view is the same face
//! re-rendered at another age group. Stage two fits a linear classifier on
//! the frozen encoder output. A synthetic face generator with known
//! identity and age latents stands in for real datasets.

pub mod augment;
pub mod cli;
pub mod io;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod seed;
pub mod synthdata;
