//! Differentiable model family: segmenter (student/teacher), refinement
//! decoder, reverse-mode gradients and the AdamW optimizer.

pub mod layers;
pub mod model;
pub mod optim;

pub use model::{
    decode, encode, prn_backward, prn_decode, prn_forward, seg_backward, seg_forward, segment, Arch, ModelState,
    ParamBlock, ParamGroup, PrnOutput, PrnTape, SegOutput, SegTape,
};
pub use optim::{adamw_step, AdamW, GroupRates, LrSchedule, OptimState};
