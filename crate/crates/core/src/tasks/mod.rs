//! Task adapters built on the matcher: entity matching, error correction
//! and column matching, plus planted-truth data generators.

pub mod cleaning;
pub mod columns;
pub mod em;
pub mod synthetic;
