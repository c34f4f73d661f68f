pub mod beam;
pub mod corpus;
pub mod eval;
pub mod generator;
pub mod latentspace;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod predictor;
pub mod rl;
pub mod seq2seq;
pub mod toy;
