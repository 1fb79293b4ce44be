//! Desk-scale simulator of the Linux page-migration path.
//!
//! The crate is `no_std` (with `alloc`) and holds the algorithmic parts:
//!
//! * [`topology`] and [`memory`]: the simulated machine (nodes, frames, page
//!   table, per-core TLBs, page locks and LRU lists).
//! * [`engine`]: the native abort-on-failure `move_pages` pipeline and the
//!   partial-migration `move_pages2` pipeline with its `mode` and batch-cap knobs.
//! * [`btree`]: an optimistic-lock-coupling B+-tree whose nodes live in
//!   simulated 4 KB pages.
//! * [`workload`]: YCSB-style operation mixes with interleaved migration queries.
//!
//! Threads, files and the CLI live in the `pagemig-sim` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod btree;
pub mod engine;
pub mod ids;
pub mod memory;
pub mod topology;
pub mod workload;

pub use ids::{CoreId, FrameId, NodeId, OwnerId, PageId};
