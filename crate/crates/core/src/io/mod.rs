// SPDX-License-Identifier: MIT OR Apache-2.0

//! On-disk formats and image handling.

pub mod bundle;
pub mod image;
pub mod vocab;
