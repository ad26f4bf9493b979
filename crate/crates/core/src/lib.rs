pub mod abstraction;
pub mod bundle;
pub mod config;
pub mod geometry;
pub mod linalg;
pub mod models;
pub mod mor;
pub mod pipeline;
pub mod pwa;
pub mod runtime;
pub mod similarity;
pub mod speclang;
pub mod synthesis;
