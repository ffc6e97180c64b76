//! Path following for small fixed-wing aircraft with nonlinear model
//! predictive control.

pub mod dual;
pub mod model;
pub mod path;
pub mod ocp;
pub mod qp;
pub mod solver;
pub mod guidance;
pub mod table;
pub mod sim;
pub mod sysid;
