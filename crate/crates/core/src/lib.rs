//! Contrastive embedding geometries.
//!
//! Four similarity geometries for dual-encoder contrastive training (cosine,
//! elliptic, Euclidean and Lorentz-hyperbolic), entailment-cone losses, hand
//! derived gradients with a finite-difference oracle, a synthetic
//! hierarchical dataset, a small deterministic trainer, and the analysis
//! tools that go with it (root distances, modality gap, image traversal).

pub mod analysis;
pub mod error;
pub mod geometry;
pub mod gradients;
pub mod losses;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::{
    cosine_sim, elliptic_sim, euclidean_distance, euclidean_sim, exp_map_origin, lift,
    lorentz_distance, lorentz_inner, lorentz_sim, similarity, Embedding, GeometryConfig,
    GeometryKind, LogitVariant, LorentzPoint, Modality,
};
pub use gradients::{
    central_difference, clear_of_singularities, fd_check, fd_check_with, fd_gradient, grad_total_loss, relative_error,
    similarity_grad, FdEntry, FdOptions, FdReport, GradRecord, Param,
};
pub use losses::{
    contrastive_loss, entail_loss_euclid, entail_loss_hyper, exterior_angle_euclid,
    exterior_angle_hyper, half_aperture_euclid, half_aperture_hyper, logit_matrix, total_loss,
    LogitMatrix, LossBreakdown,
};
pub use synthdata::{gen_tree, sample_batch, AncestorDepth, PairBatch, Tree, TreeSpec};
pub use trainer::{
    encoder_forward, lr_at, recall_at_1, train, train_on, AdamW, Dense, EncoderParams, EncoderSpec,
    ForwardTrace, MetricsRow, ScheduleSpec, StepReport, TrainSpec, TrainState,
};
pub use analysis::{
    compute_root, distance_histogram, modality_gap, root_distance, step_t, traversal_path,
    traverse_image, Histogram, Hit, ModalityGap, RootPoint, TraversalOptions, TraversalResult,
    TRAVERSAL_STEPS,
};
