//! Std companion of `pagemig-core`: threaded runs, sweeps, CSV, topology
//! files, the reference interpreter and the `pagemig` command line.

pub mod checks;
pub mod harness;
pub mod reference;
pub mod runner;
pub mod topo_file;
pub mod verify;
