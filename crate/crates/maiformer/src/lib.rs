//! Multi-agent flight trajectory prediction.
//!
//! An encoder-only transformer over inverted variate tokens: each aircraft's
//! per-variate past series becomes one token, masked multivariate attention
//! mixes variates within an aircraft, agent attention mixes information
//! across aircraft, and a shared MLP head emits all future steps in one
//! non-autoregressive pass. The crate also ships the full data pipeline
//! (PCHIP resampling, sliding-window scene construction, min-max
//! normalization, chronological splits, a synthetic arrival-traffic
//! generator), the training harness, evaluation metrics, and attention
//! score export.

pub mod numerics;
