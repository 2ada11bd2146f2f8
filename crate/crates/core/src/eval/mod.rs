// SPDX-License-Identifier: MIT OR Apache-2.0

//! Evaluation harnesses and toy models.

pub mod toy;
pub mod experiments;
pub mod probe;
pub mod metrics;
pub mod attack;
pub mod font;
pub mod report;
