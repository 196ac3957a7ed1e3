//! Independent oracles for the test suites.
//!
//! Everything here deliberately re-derives results from first principles
//! (definitions, finite differences, exhaustive scans) without calling the
//! implementation paths it is used to check.

pub mod adam;
pub mod flows;
pub mod grad;
