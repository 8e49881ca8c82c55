pub mod corpus;
pub mod mediation;
pub mod model;
pub mod parallel;
pub mod pipeline;
pub mod tensor;
