//! Synthesis and certification of neural multiple Lyapunov functions for
//! switched systems.

pub mod dual;
pub mod expr;
pub mod interval;
pub mod loss;
pub mod model;
pub mod net;
pub mod verify;
pub mod sim;
pub mod train;
