//! Distances between Markov decision processes and stability checks for
//! shutdown-seeking behavior.
//!
//! * [`transport`]: exact 1-Wasserstein distances with dual certificates.
//! * [`bisim`]: bisimulation metrics, Hausdorff MDP distance, quotients.
//! * [`safety`]: hitting times, epsilon-optimal policies, safety certificates.
//! * [`onpolicy`]: embedded MDPs, differentiable policies, shutdown probability.
//! * [`scenarios`]: generators for adversarial and random instances.

pub mod bisim;
pub mod error;
pub mod linalg;
pub mod mdp;
pub mod onpolicy;
pub mod safety;
pub mod scenarios;
pub mod serde_inf;
pub mod transport;

pub use bisim::{
    align_reward_scale, bisim_metric, bisim_quotient, cross_bisim_metric, hausdorff_distance, isolation_check,
    AlignmentResult, BisimConfig, CrossMetric, IsolationResult, QuotientResult,
};
pub use error::{Error, Result};
pub use mdp::{
    induce_chain, policy_evaluation, validate, value_iteration, InducedChain, MdpDocument, MdpSpec, Policy,
    ValidationReport, ValueFunction,
};
pub use onpolicy::{EmbeddedMdp, OnPolicyAnalysis, Perturbation, SoftmaxPolicy};
pub use safety::{certify_safety, hitting_time, SafetyCertificate, SafetyQuery, StartDistribution};
pub use transport::{kr_lower_bound, solve_transport, TransportProblem, TransportSolution};
