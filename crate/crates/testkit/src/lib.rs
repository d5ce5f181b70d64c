//! Test support: synthetic MediaWiki dumps, an independent DOM-based
//! reference parser for them, and an instrumented HTTP server that mimics a
//! dump mirror.

pub mod dumpgen;
pub mod mockhttp;
pub mod reference;
