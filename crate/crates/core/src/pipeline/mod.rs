pub mod config;
pub mod data;
pub mod run;
pub mod sweep;
