pub mod corpus;
pub mod detectors;
pub mod dsp;
pub mod eval;
pub mod nnet;
pub mod pipeline;
