//! Deblurring of RAW Bayer sensor data.
//!
//! The crate covers the whole desk-scale pipeline: synthesizing blurred/sharp
//! pairs by averaging successive RAW frames ([`blur`]), a minimal camera ISP
//! for sRGB evaluation ([`isp`]), a reverse-mode differentiation engine
//! ([`autodiff`]), the two-branch deblurring network with bidirectional
//! cross-modal attention ([`model`]), losses and quality metrics
//! ([`metrics`]) and a deterministic trainer ([`trainer`]).

pub mod autodiff;
pub mod blur;
pub mod isp;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod raw;
pub mod trainer;
