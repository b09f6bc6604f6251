//! # fragscope
//!
//! Static detection of device-specific behaviors in Android apps.
//!
//! The pipeline works on a smali disassembly tree:
//!
//! 1. [`frontend`] optionally triages the APK for packers, then parses smali
//!    into a typed register IR.
//! 2. [`graphs`] builds per-method CFGs, postdominators and the call graph.
//! 3. [`taint`] finds reads of `android.os.Build` fields and system properties
//!    and propagates them interprocedurally.
//! 4. [`behavior`] confirms branches that compare device information against
//!    known brand/OS/model identifiers ([`device_db`]) and extracts the code
//!    they control.
//! 5. [`rules`] classifies the extracted snippets with `[Category:Keyword]`
//!    rules, and [`report`] assembles per-app and corpus reports.
//!
//! [`fixtures`] ships an annotated smali corpus and a brute-force reference
//! interpreter used to cross-check the taint engine.

pub mod behavior;
pub mod budget;
pub mod device_db;
pub mod fixtures;
pub mod frontend;
pub mod graphs;
pub mod report;
pub mod rules;
pub mod taint;

pub use budget::{Budget, Deadline};
