//! Training and formal verification of neural-network controllers for
//! neural dynamical systems over multi-step horizons.
//!
//! The crate is organised bottom-up: dense matrices and a reverse-mode tape,
//! ReLU networks and their closed-loop composition, interval and linear
//! bound propagation, reachability verification with branch-and-bound, the
//! benchmark environments, curriculum training, and the initial-state
//! dependent controller dictionary.

pub mod autodiff;
pub mod bounds;
pub mod boxes;
pub mod config;
pub mod dictionary;
pub mod env;
pub mod experiments;
pub mod metrics;
pub mod netfile;
pub mod nn;
pub mod optim;
pub mod reach;
pub mod safety;
pub mod tensor;
pub mod train;
