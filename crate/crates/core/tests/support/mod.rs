//! Checks shared by the unit test targets and the acceptance run.
#![allow(dead_code)]

pub mod gradcheck;
pub mod oracles;
pub mod separability;
