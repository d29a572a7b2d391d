//! Scan-level assembly: synthetic case batches, base cropping and per-scale
//! patch extraction.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::geometry::{crop_base_to, normalize_orientation};
use crate::data::resample::scale_scan;
use crate::data::sampling::{sample_negative_patches, sample_positive_patches};
use crate::data::synth::{generate_synthetic_case, SynthParams};
use crate::data::{Laterality, Magnification, Patch, Scan, View};
use crate::error::Result;

/// Knobs for a batch of synthetic cases.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseMix {
    pub side: usize,
    /// Probability that a scan receives lesions.
    pub lesion_fraction: f64,
    pub max_lesions: usize,
    pub contrast: f32,
    pub lesion_radius: (f64, f64),
    pub spiculated_prob: f64,
    pub noise: f32,
}

/// Left and right CC scans for one synthetic case, drawn from `seed`.
pub fn synth_case(case_id: &str, mix: &CaseMix, seed: u64) -> Result<Vec<Scan>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [Laterality::Left, Laterality::Right]
        .into_iter()
        .map(|laterality| {
            let lesions = if mix.max_lesions > 0 && rng.gen_bool(mix.lesion_fraction) {
                rng.gen_range(1..=mix.max_lesions)
            } else {
                0
            };
            let params = SynthParams {
                case_id: case_id.to_string(),
                side: mix.side,
                laterality,
                view: View::Cc,
                lesion_count: lesions,
                contrast: mix.contrast,
                lesion_radius: mix.lesion_radius,
                spiculated_prob: mix.spiculated_prob,
                noise_amplitude: mix.noise,
                ..SynthParams::default()
            };
            generate_synthetic_case(&mut rng, &params)
        })
        .collect()
}

/// Orientation normalization followed by the nipple-aligned square crop.
pub fn prepare_base(scan: &Scan, side: usize) -> Result<Scan> {
    crop_base_to(&normalize_orientation(scan), side)
}

/// Positive and negative patches of one base crop at one magnification.
/// With `max_negatives > 0`, that many negatives are kept, chosen uniformly
/// without replacement and returned in lattice order.
pub fn sample_scan<R: Rng + ?Sized>(
    base: &Scan,
    scale: Magnification,
    patch_size: usize,
    stride: usize,
    max_negatives: usize,
    rng: &mut R,
) -> (Vec<Patch>, Vec<Patch>) {
    let scaled = scale_scan(base, scale);
    let positives = sample_positive_patches(&scaled, patch_size);
    let mut negatives = sample_negative_patches(&scaled, patch_size, stride);
    if max_negatives > 0 && negatives.len() > max_negatives {
        let mut keep = sample(rng, negatives.len(), max_negatives).into_vec();
        keep.sort_unstable();
        negatives = keep.into_iter().map(|i| negatives[i].clone()).collect();
    }
    (positives, negatives)
}
