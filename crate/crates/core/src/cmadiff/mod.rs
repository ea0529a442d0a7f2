//! Diffusion denoiser with compositional masked attention: object tokens,
//! attention masks, noise schedule, network and samplers.

pub mod denoiser;
pub mod mask;
pub mod sampler;
pub mod schedule;
pub mod tokens;

pub use denoiser::{patchify, unpatchify, AttentionTrace, BlockContext, Denoiser};
pub use mask::{build_cma_mask, token_membership, ObjSet};
pub use sampler::{guide, sample, NoisePredictor, Query, SampleOptions, SamplerKind, Step};
pub use schedule::{NoiseSchedule, ScheduleConfig};
pub use tokens::{fourier, BatchCond, ObjectCond, Tokenizer};
