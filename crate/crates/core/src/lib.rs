pub mod adapters;
pub mod decoder;
pub mod datagen;
pub mod diffcore;
pub mod disentangler;
pub mod emotion;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod seeding;
pub mod trainer;

pub use emotion::Emotion;
