pub mod backbone;
pub mod behavior;
pub mod dataset;
pub mod fixture;
pub mod head;
pub mod pipeline;
pub mod provenance;
pub mod psychometrics;
pub mod repspace;
pub mod stats;
