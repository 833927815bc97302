#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod brw;
pub mod dist;
pub mod experiment;
pub mod io;
pub mod model;
pub mod oracle;
pub mod replica;
pub mod spine;
pub mod stats;
pub mod walk;
