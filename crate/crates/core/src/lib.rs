//! Position error bounds for satellite downlink localization with
//! reconfigurable intelligent surfaces.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod constellation;
pub mod fim;
pub mod geometry;
pub mod linkbudget;
pub mod scenario;
