//! One-representative-shot training of graph neural networks on brain
//! connectivity data.
//!
//! A single population-driven template (or one template per class) stands in
//! for the whole training set of a graph GAN cascade that forecasts
//! longitudinal brain graphs and of a graph-attention classifier.

pub mod autodiff;
pub mod classification;
pub mod evolution;
pub mod graph;
pub mod harness;
pub mod io;
pub mod nn;
pub mod report;
pub mod seed;
pub mod templates;

pub use graph::{ConnectivityMatrix, GraphError, Population, Template, Trajectory};
