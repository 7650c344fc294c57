//! Sequence mixers and their building blocks.

pub mod conv;
pub mod flops;
pub mod layer;
pub mod recurrence;

pub use conv::{conv1d_causal, conv1d_causal_backward};
pub use flops::{flops_per_step, layer_mixer_flops, StepFlops};
pub use layer::{
    layer_forward, mixer_core, HeadCapture, HeadDims, HeadParams, LayerOutput, LayerParams,
};
pub use recurrence::{
    delta_step, gated_delta_step, general_update, linear_attention_parallel,
    linear_attention_recurrent, MixerState, Variant,
};

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

/// `d silu / dz = σ(z) (1 + z (1 − σ(z)))`.
#[inline]
pub fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}
