//! Rolling post-disaster restoration planning for power distribution networks.
//!
//! The library plans crew routing, switch reconfiguration, and DG/load
//! dispatch after a disaster. Integer decisions (routes, switch states) are
//! searched by a genetic algorithm; each candidate is priced by solving the
//! remaining continuous dispatch problem, either centrally or by an
//! augmented-Lagrangian coordination of per-subsystem convex QPs with
//! optional Aitken acceleration of the multiplier iteration. A receding
//! horizon simulator replans every time step while travel, repair-duration,
//! and new-damage events arrive.

pub mod dmpc;
pub mod mat;
pub mod netmodel;
pub mod par;
pub mod partition;
pub mod qpsolve;
pub mod routing;
