pub mod corpus;
pub mod embedding;
pub mod evaluate;
pub mod generate;
pub mod kgenhance;
pub mod qqgraph;
pub mod pipeline;
