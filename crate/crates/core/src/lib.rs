pub mod baselines;
pub mod chem;
pub mod cli;
pub mod datagen;
pub mod dataset;
pub mod encoder;
pub mod evaluate;
pub mod featurize;
pub mod interpret;
pub mod numerics;
pub mod tokenize;
