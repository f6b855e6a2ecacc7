//! Information-theoretic and representational diagnostics.

pub mod attention;
pub mod empirical;
pub mod info;
pub mod probe;
pub mod quality;

pub use attention::{attention_maps, AttentionReport};
pub use empirical::{info_empirical, EmpiricalInfo};
pub use info::{ce_decomposition, collapse_oracle, info_exact, CeDecomposition, CollapseReport, DiscreteJoint, InfoReport};
pub use probe::{linear_probe, token_features, ProbeBudget, ProbeResult, ProbeSource};
pub use quality::{sample_quality, SampleQuality};
