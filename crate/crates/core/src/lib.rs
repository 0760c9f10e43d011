//! Deterministic simulator of an HPC workload manager deployed as an
//! elastic, Kubernetes-style MiniCluster.

pub mod autoscaler;
pub mod burst;
pub mod cluster;
pub mod engine;
pub mod harness;
pub mod model;
pub mod overlay;
pub mod queue;
pub mod reconciler;
pub mod tenancy;
