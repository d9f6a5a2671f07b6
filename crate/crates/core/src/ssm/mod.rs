//! State-space engine: discretization, scans, convolution-kernel view and the
//! selective parameterization.

pub mod lti;
pub mod scan;
pub mod selective;
pub mod zoh;

pub use lti::{lti_apply, lti_kernel, LtiSystem};
pub use scan::{scan_parallel, scan_sequential, scan_with, ScanElement, ScanMode};
pub use selective::{
    selective_forward, selective_forward_with, selective_scan, selective_ssm, SelectiveSSMParams, SelectiveVars,
};
pub use zoh::{discretize_zoh, zoh_coefficients};
