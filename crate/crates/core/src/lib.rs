//! Ponzi contract detection on a heterogeneous account interaction graph
//! with CVAE feature augmentation and a multi-view attention classifier.

pub mod augment;
pub mod checkpoint;
pub mod cvae;
pub mod error;
pub mod features;
pub mod heig;
pub mod ingest;
pub mod io;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod synthgen;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
pub use features::{FeatureVector, FEATURE_DIM};
pub use heig::{build_heig, Account, AccountType, Heig, InteractionEdge, InteractionType, TripletRelation};
