pub mod amortization;
pub mod bayes;
pub mod data;
pub mod error;
pub mod estimators;
pub mod kernel;
pub mod linalg;
pub mod matrix;
pub mod metrics;
pub mod objective;
pub mod optim;
pub mod real;
pub mod trainer;
