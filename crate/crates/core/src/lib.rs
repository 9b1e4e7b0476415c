pub mod copula_flow;
pub mod cm_flow;
pub mod coupling;
pub mod ddsf;
pub mod marginal;
pub mod metrics;
pub(crate) mod nullable;
pub mod ref_copulas;
pub mod grad;
pub mod rng;
pub mod stats;
pub mod tailbound;
