//! Multi-task model fusion over an adversarial MIMO multiple-access channel.
//!
//! Users fine-tune a shared base model, send their task vectors over a
//! multiple-access channel whose noise covariance may be chosen by a
//! worst-case adversary, and the receiver fuses the decoded vectors into a
//! multi-task model. The defense restores embedding groups from the base
//! model and realigns the fused model with a few-shot fine-tuning pass.

pub mod adversary;
pub mod analysis;
pub mod channel;
pub mod defense;
pub mod checkpoint;
pub mod fusion;
pub mod harness;
pub mod linalg;
pub mod params;
pub mod seeds;
pub mod taskbench;
pub mod tinyvit;
