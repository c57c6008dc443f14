pub mod bea;
pub mod bench;
pub mod clock;
mod codec;
pub mod commands;
pub mod config;
pub mod error;
pub mod features;
pub mod math;
pub mod model;
pub mod user_async;
pub mod lsh;
pub mod nearline;
pub mod pipeline;
pub mod precache;
