pub mod ablation;
pub mod corpus;
pub mod gp;
pub mod report;
pub mod stats;
pub mod training;
