//! Synthetic hyperspectral scenes and patch sets for tests, demos and
//! benchmarks. Each class has a Gaussian spectral signature whose peak is
//! displaced along the band axis by a per-class offset.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{HsiCube, LabelMap, Patch, PatchSet};
use crate::error::{Error, Result};
use crate::palette::PaletteSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub classes: usize,
    /// Side of the square blocks that share one class.
    pub block: usize,
    /// Band offset between consecutive class peaks.
    pub shift: f64,
    /// Standard deviation of each peak, in bands.
    pub peak_width: f64,
    /// Per-value Gaussian noise.
    pub noise: f64,
    /// Probability that a pixel is left unlabeled.
    pub unlabeled: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            width: 24,
            height: 24,
            bands: 16,
            classes: 4,
            block: 4,
            shift: 2.0,
            peak_width: 2.0,
            noise: 0.05,
            unlabeled: 0.0,
            seed: 7,
        }
    }
}

/// Gaussian bump of unit height centred at band `center`.
pub fn gaussian_signature(bands: usize, center: f64, width: f64) -> Vec<f64> {
    (0..bands)
        .map(|i| {
            let d = (i as f64 - center) / width;
            (-0.5 * d * d).exp()
        })
        .collect()
}

/// Signature of zero-based `class`: peaks are laid out symmetrically
/// around the middle band, `shift` bands apart.
pub fn class_signature(spec: &SynthSpec, class: usize) -> Vec<f64> {
    let mid = (spec.bands as f64 - 1.0) / 2.0;
    let offset = (class as f64 - (spec.classes as f64 - 1.0) / 2.0) * spec.shift;
    gaussian_signature(spec.bands, mid + offset, spec.peak_width)
}

fn validate(spec: &SynthSpec) -> Result<()> {
    if spec.width == 0 || spec.height == 0 || spec.bands == 0 || spec.block == 0 {
        return Err(Error::Config(
            "synthetic scene extents must be positive".into(),
        ));
    }
    if spec.classes == 0 || spec.classes > u16::MAX as usize {
        return Err(Error::Config(format!("bad class count {}", spec.classes)));
    }
    if !(spec.noise >= 0.0) || !(spec.peak_width > 0.0) || !(0.0..1.0).contains(&spec.unlabeled) {
        return Err(Error::Config(
            "noise must be >= 0, peak width > 0 and the unlabeled share in [0, 1)".into(),
        ));
    }
    Ok(())
}

/// Blocky scene: every `block x block` tile gets one class, with classes
/// dealt round-robin over the tiles and then shuffled so each class is
/// present whenever there are at least as many tiles as classes.
pub fn synthetic_scene(spec: &SynthSpec) -> Result<(HsiCube, LabelMap)> {
    validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (bx, by) = (
        spec.width.div_ceil(spec.block),
        spec.height.div_ceil(spec.block),
    );
    let mut tiles: Vec<usize> = (0..bx * by).map(|i| i % spec.classes).collect();
    tiles.shuffle(&mut rng);
    let signatures: Vec<Vec<f64>> = (0..spec.classes)
        .map(|c| class_signature(spec, c))
        .collect();
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let pixels = spec.width * spec.height;
    let mut values = vec![0f32; pixels * spec.bands];
    let mut labels = vec![0u16; pixels];
    for row in 0..spec.height {
        for col in 0..spec.width {
            let class = tiles[(row / spec.block) * bx + col / spec.block];
            let p = row * spec.width + col;
            if !rng.random_bool(spec.unlabeled) {
                labels[p] = class as u16 + 1;
            }
            let gain = 1.0 + 0.1 * (rng.random::<f64>() - 0.5);
            for (band, &sig) in signatures[class].iter().enumerate() {
                values[band * pixels + p] = (gain * sig + noise.sample(&mut rng)) as f32;
            }
        }
    }
    let cube = HsiCube::new(spec.width, spec.height, spec.bands, values)?;
    let mut map = LabelMap::new(spec.width, spec.height, labels, spec.classes)?;
    map.class_names = (1..=spec.classes).map(|c| format!("class-{c}")).collect();
    map.legend = PaletteSpec::generated(spec.classes).colors()[1..].to_vec();
    Ok((cube, map))
}

/// `per_class` patches per class drawn directly in the reduced band space:
/// every pixel of a patch carries its class signature plus noise. Patches
/// are interleaved by class.
pub fn signature_patches(
    spec: &SynthSpec,
    patch_size: usize,
    per_class: usize,
) -> Result<PatchSet> {
    validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let signatures: Vec<Vec<f64>> = (0..spec.classes)
        .map(|c| class_signature(spec, c))
        .collect();
    let area = patch_size * patch_size;
    let mut patches = Vec::with_capacity(per_class * spec.classes);
    for i in 0..per_class {
        for (class, sig) in signatures.iter().enumerate() {
            let mut values = Vec::with_capacity(spec.bands * area);
            for &s in sig {
                values.extend((0..area).map(|_| (s + noise.sample(&mut rng)) as f32));
            }
            patches.push(Patch {
                values,
                label: class as u16 + 1,
                center: (i, class),
            });
        }
    }
    Ok(PatchSet {
        patches,
        patch_size,
        bands: spec.bands,
        num_classes: spec.classes,
    })
}
