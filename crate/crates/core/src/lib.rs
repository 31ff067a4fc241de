pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod experiment;
pub mod model;
pub mod record;
pub mod summarize;
pub mod tensor;
pub mod train;
pub mod tokenizer;
