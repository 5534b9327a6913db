pub mod candidate_gen;
pub mod container;
pub mod dataset;
pub mod embed_table;
pub mod encoder;
pub mod exec;
pub mod format;
pub mod hash;
pub mod lexicon;
pub mod optim;
pub mod personalization;
pub mod synthetic;
pub mod trainer;
