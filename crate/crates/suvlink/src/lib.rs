//! Weak-labeling pipeline for PET/CT visual grounding data.
//!
//! Links positive-finding sentences in PET/CT reports to 3D lesion masks by
//! searching the PET volume for a connected component whose maximum SUV matches
//! the reported SUVmax and which intersects the reported axial slice, then
//! refining the match with iterative thresholding. Also provides the
//! lesion-level detection metrics (F1 per criterion, Dice, bootstrap CIs,
//! subgroup breakdowns) used to evaluate grounding models, and a synthetic
//! phantom generator that serves as an end-to-end ground-truth oracle.

pub mod dataset;
pub mod error;
pub mod extract;
pub mod matcher;
pub mod metrics;
pub mod par;
pub mod phantom;
pub mod pipeline;
pub mod refine;
pub mod report;
pub mod volume;

pub use error::SuvlinkError;
