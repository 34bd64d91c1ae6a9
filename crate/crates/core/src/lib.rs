//! Dense feature matching with neighbourhood consensus.
//!
//! A pair of feature grids is compared exhaustively into a 4D correlation
//! volume, filtered by soft mutual nearest-neighbour gating and a small
//! learned 4D convolutional network applied symmetrically, then turned into
//! one match per source cell. Training needs only pair-level labels.

pub mod assignment;
pub mod bench;
pub mod correlation;
pub mod error;
pub mod features;
pub mod matchfilter;
pub mod ncnet;
pub mod pipeline;
pub mod tensor4;
pub mod training;

pub use assignment::{
    extract_matches, hard_assign, pck, pck_partial, pck_with_reference, scores, transfer_keypoints,
    Direction, KeypointFile, Match, MatchRecord, MatchSet, PckReference,
};
pub use correlation::{
    apply_relocalization, correlate, maxpool_downsample, CorrTensor, RelocShifts, Stage,
};
pub use error::{NcError, Result};
pub use features::{
    patch_descriptor, read_features, synth_negative, synth_pair, write_features, FeatureMap,
    GrayImage, Label, SynthConfig, TrainSample,
};
pub use matchfilter::{hard_mutual_nn, soft_mutual_nn};
pub use ncnet::{
    conv4d_aggregated, conv4d_direct, init_params, init_params_with, load_params, ncnet_forward,
    ncnet_symmetric, save_params, Conv4dLayer, InitScheme, NcNetParams, NetConfig,
};
pub use pipeline::{match_pair, PipelineConfig, Preset, SynthBenchmark};
pub use tensor4::{Pair, Tensor4};
pub use training::{train, TrainConfig};
