//! Differentially private cross-silo federated learning.
//!
//! The noisy minibatch gradient sum of DP-SGD splits into two independent
//! problems, distributed Gaussian noise ([`dpnoise`]) and secure summation
//! ([`securesum`]). Around them sit oblivious batch selection ([`mixnet`],
//! [`sampling`]), DP random projection ([`projection`]), the learner and the
//! multi-party experiment harness.

pub mod dpnoise;
pub mod fixedpoint;
pub mod harness;
pub mod keystream;
pub mod learner;
pub mod mixnet;
pub mod projection;
pub mod sampling;
pub mod securesum;
pub mod stats;
pub mod timing;
