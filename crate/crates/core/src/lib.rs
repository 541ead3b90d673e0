pub mod attribution;
pub mod classifier;
pub mod corpus;
pub mod corruption;
pub mod eval;
pub mod generation;
pub mod lexicon;
pub mod pipeline;
pub mod relabel;
pub mod seeding;
