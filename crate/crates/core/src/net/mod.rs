//! Network construction and the collaborative multi-teacher forward pass.

mod ensemble;
mod network;
mod spec;

pub use ensemble::{CollaborativeOutput, TeacherEnsemble};
pub use network::{Backbone, Classifier, ForwardOutput, Network};
pub use spec::{LayerSpec, NetworkSpec};
