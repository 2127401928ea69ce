//! Adaptive spatial-focus video recognition at desk scale.
//!
//! A cheap glance network scans every frame, a reinforcement-learned
//! recurrent policy picks one informative patch per frame for an expensive
//! focus network, an optional skip gate drops low-value frames, and a
//! multiply-add cost model accounts for everything. Trained with a
//! three-stage algorithm on synthetic moving-glyph videos.

pub mod costmodel;
pub mod error;
pub mod evalbench;
pub mod focuspolicy;
pub mod nets;
pub mod nn;
pub mod pipeline;
pub mod rltrain;
pub mod rng;
pub mod synthdata;
pub mod verify;

pub use error::{AdaFocusError, Result};
