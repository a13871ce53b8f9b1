//! Weakly-supervised precursor mining for multivariate flight-approach data.
//!
//! The pipeline ingests per-flight time series recorded against the distance
//! to the 1,000-ft-above-touchdown reference point, resamples every flight
//! onto a shared 81-point quarter-mile grid, prunes highly correlated
//! features, and trains multi-head convolutional + recurrent classifiers
//! under the multiple-instance-learning assumption: a flight (bag) is
//! positive when at least one time step (instance) is positive. Each feature
//! owns a convolutional head whose final sigmoid output is that feature's
//! precursor score over time; a GRU plus a time-distributed dense layer turns
//! the concatenated scores into a per-time-step event probability whose
//! maximum classifies the flight.
//!
//! Modules follow the pipeline order:
//!
//! - [`flight`]: CSV ingest, label/severity filtering, distance resampling.
//! - [`features`]: Pearson-correlation dimensionality reduction.
//! - [`dataset`]: tensorized corpora and split views.
//! - [`nn`]: dense tensors, reverse-mode differentiation, layers, Adam.
//! - [`model`]: the multi-head CNN + GRU classifier (binary, multi-output,
//!   and the one-vs-nominal combiner) with score-extraction entry points.
//! - [`training`]: stratified splits and mini-batches, the training loop,
//!   and the hyperparameter grid search.
//! - [`eval`]: confusion matrices, precision/recall/F1, and the mean squared
//!   distance between precursor rankings and a reference score file.
//! - [`precursor`]: precursor windows, adjusted scores, fleet aggregation,
//!   and nominal envelopes for reporting.
//! - [`synth`]: synthetic corpora with planted precursor signatures.
//! - [`report`]: static SVG line charts for report emission.

pub mod dataset;
pub mod eval;
pub mod features;
pub mod flight;
pub mod model;
pub mod nn;
pub mod precursor;
pub mod report;
pub mod synth;
pub mod training;
