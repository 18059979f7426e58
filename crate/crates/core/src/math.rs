//! Float intrinsics routed through `libm` so results are bit-identical on every
//! target, with or without `std`.

pub(crate) use libm::{cos, exp, log as ln, pow, sin, sqrt, tanh};

pub(crate) const PI: f64 = core::f64::consts::PI;
