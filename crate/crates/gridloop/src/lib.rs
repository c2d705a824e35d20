//! Scenario runner, app supervision and the benchmark harness.

pub mod appsim;
pub mod bench;
pub mod control;
pub mod instrument;
pub mod output;
pub mod runner;
pub mod scenario;
pub mod signals;
pub mod supervisor;
pub mod testapp;
