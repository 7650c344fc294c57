//! Floating-point operation counts for one recurrence step (state update
//! plus readout `S q`), counting each multiply and each add once.

use serde::Serialize;

use super::recurrence::Variant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StepFlops {
    /// Terms proportional to `d_v · d_k`.
    pub bilinear: u64,
    /// Terms proportional to `d_v` alone.
    pub linear: u64,
}

impl StepFlops {
    pub fn total(&self) -> u64 {
        self.bilinear + self.linear
    }
}

/// Per-step cost of one head.
///
/// * linear: `4 d_v d_k`
/// * delta:  `6 d_v d_k + 3 d_v`
/// * gated:  `7 d_v d_k + 3 d_v`
pub fn flops_per_step(variant: Variant, d_k: usize, d_v: usize) -> StepFlops {
    let vk = (d_v * d_k) as u64;
    let v = d_v as u64;
    match variant {
        Variant::Linear => StepFlops {
            bilinear: 4 * vk,
            linear: 0,
        },
        Variant::Delta => StepFlops {
            bilinear: 6 * vk,
            linear: 3 * v,
        },
        Variant::Gated => StepFlops {
            bilinear: 7 * vk,
            linear: 3 * v,
        },
    }
}

/// Mixer cost of a whole layer over `t_len` tokens.
pub fn layer_mixer_flops(
    variant: Variant,
    d_k: usize,
    d_v: usize,
    num_heads: usize,
    t_len: usize,
) -> u64 {
    flops_per_step(variant, d_k, d_v).total() * (num_heads * t_len) as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Walks the same loop structure as the state update and readout,
    /// tallying operations instead of performing them.
    fn counted(variant: Variant, d_k: usize, d_v: usize) -> u64 {
        let mut n = 0u64;
        for _row in 0..d_v {
            match variant {
                Variant::Linear => {
                    for _ in 0..d_k {
                        n += 2;
                    }
                }
                Variant::Delta | Variant::Gated => {
                    for _ in 0..d_k {
                        n += 2; // S k
                    }
                    n += 3; // γ v_i − β (S k)_i
                    for _ in 0..d_k {
                        n += if variant == Variant::Gated { 3 } else { 2 };
                    }
                }
            }
            for _ in 0..d_k {
                n += 2; // readout
            }
        }
        n
    }

    #[test]
    fn closed_form_matches_tally() {
        for variant in Variant::ALL {
            for (d_k, d_v) in [(1, 1), (8, 16), (16, 16), (7, 3)] {
                assert_eq!(
                    flops_per_step(variant, d_k, d_v).total(),
                    counted(variant, d_k, d_v)
                );
            }
        }
    }

    #[test]
    fn bilinear_part_halves_with_key_width() {
        for variant in Variant::ALL {
            let full = flops_per_step(variant, 16, 16);
            let half = flops_per_step(variant, 8, 16);
            assert_eq!(full.bilinear, 2 * half.bilinear);
            assert_eq!(full.linear, half.linear);
        }
    }
}
