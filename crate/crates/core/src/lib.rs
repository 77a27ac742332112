//! Capacity planning for inference services on MIG-partitioned GPUs.
//!
//! Profiles describe how each model performs on every instance size, batch
//! size and process count. The configurator turns a service's latency target
//! and request rate into segments, the allocator packs those segments onto
//! GPUs, and the evaluation module measures the result both statically and
//! with a discrete-event simulation.

// `!(x > 0.0)` style checks reject NaN on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocator;
pub mod configurator;
pub mod driver;
pub mod evaluation;
pub mod mig;
pub mod profiles;
