//! RowHammer simulation and bit-flip attack harness for quantized networks.
//!
//! The crate is organized bottom-up:
//!
//! - [`dram`]: rows, commands, disturbance and flip injection.
//! - [`qnn`]: desk-scale 8-bit quantized network with exact gradients.
//! - [`bfa`]: progressive bit search and multi-round vulnerable-bit profiling.
//! - [`defense`]: defense strategies behind the [`defense::Defense`] trait,
//!   registered by name (victim-row swap, aggressor swap baseline, none).
//! - [`analysis`]: closed-form timing and security formulas.
//! - [`attack`]: address mapping, model installation and the executable
//!   threat models.
//! - [`harness`]: scenario config, orchestration and report emission.

pub mod analysis;
pub mod attack;
pub mod bfa;
pub mod defense;
pub mod dram;
pub mod harness;
pub mod qnn;
pub mod sim;
