//! Small decoder-only language model with a domain pre-train / task
//! fine-tune pipeline: character tokenizer, tape-based autodiff, Adam
//! training, greedy and beam decoding with end-token length control, and
//! ROUGE evaluation.

pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod experiment;
pub mod model;
pub mod rouge;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;
