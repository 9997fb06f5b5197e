//! Dual-stage multi-agent PPO for downlink precoding in a cooperating LEO
//! satellite cluster under delayed CSI, together with the constellation and
//! channel simulator it trains against, an independent-PPO baseline, an exact
//! tabular-MDP checker for the policy-improvement bounds, and a FLOPS model.

pub mod channel;
pub mod config;
pub mod constellation;
pub mod dsppo;
pub mod env;
pub mod error;
pub mod flops;
pub mod io;
pub mod oracle;
pub mod ppo;
pub mod precoding;
pub mod report;

pub use error::{Error, Result};
