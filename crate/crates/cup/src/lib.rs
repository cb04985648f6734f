//! Evaluation harness for the sanitizer: ground-truth oracle, corpus
//! runner, random case generator and reporting.

pub mod bench;
pub mod corpus;
pub mod generate;
pub mod harness;
pub mod oracle;
pub mod report;
