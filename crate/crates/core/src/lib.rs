pub mod agent;
pub mod backends;
pub mod config;
pub mod formal;
pub mod harness;
pub mod lean;
pub mod memory;
pub mod prompts;
pub mod prover;
pub mod scheduler;
pub mod trace;
pub mod translator;
