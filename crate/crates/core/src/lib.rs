pub mod autodiff;
pub mod checks;
pub mod config;
pub mod constraints;
pub mod eval;
pub mod heap;
pub mod models;
pub mod scenes;
pub mod trainer;
