//! HSI rasters, the on-disk container format, patch extraction and
//! stratified splitting.
//!
//! A dataset is a JSON header next to two raw files: the cube as
//! little-endian `f32` in band-sequential order and the ground truth as
//! little-endian `u16`, row-major, with 0 meaning unlabeled. See
//! `docs/hsi-format.md` for a byte-level example.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spectral raster stored band-sequentially: all of band 0 row by row, then
/// band 1, and so on.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    width: usize,
    height: usize,
    bands: usize,
    values: Vec<f32>,
}

impl HsiCube {
    pub fn new(width: usize, height: usize, bands: usize, values: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || bands == 0 {
            return Err(Error::Data(format!(
                "cube extents must be positive, got {width}x{height}x{bands}"
            )));
        }
        if values.len() != width * height * bands {
            return Err(Error::Data(format!(
                "cube {width}x{height}x{bands} needs {} values, got {}",
                width * height * bands,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("cube value {i} is not finite")));
        }
        Ok(Self {
            width,
            height,
            bands,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Contiguous raster of one band.
    pub fn band(&self, b: usize) -> &[f32] {
        let n = self.pixels();
        &self.values[b * n..(b + 1) * n]
    }

    pub fn get(&self, row: usize, col: usize, band: usize) -> f32 {
        self.values[band * self.pixels() + row * self.width + col]
    }

    pub fn spectrum(&self, row: usize, col: usize) -> Vec<f32> {
        (0..self.bands).map(|b| self.get(row, col, b)).collect()
    }
}

/// Ground-truth raster; 0 marks unlabeled pixels, classes are `1..=num_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    labels: Vec<u16>,
    num_classes: usize,
    pub class_names: Vec<String>,
    pub legend: Vec<[u8; 3]>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u16>, num_classes: usize) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::Data(format!(
                "label map {width}x{height} needs {} entries, got {}",
                width * height,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize > num_classes) {
            return Err(Error::Data(format!(
                "label {bad} exceeds the declared class count {num_classes}"
            )));
        }
        Ok(Self {
            width,
            height,
            labels,
            num_classes,
            class_names: Vec::new(),
            legend: Vec::new(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }

    pub fn class_name(&self, class: usize) -> String {
        self.class_names
            .get(class - 1)
            .cloned()
            .unwrap_or_else(|| format!("C{class}"))
    }

    /// Pixel count per class `1..=C` (index 0 of the result is class 1).
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            if l > 0 {
                counts[l as usize - 1] += 1;
            }
        }
        counts
    }
}

/// JSON sidecar describing a dataset on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub dtype: String,
    pub byte_order: String,
    pub interleave: String,
    pub data_file: String,
    pub labels_file: String,
    pub num_classes: usize,
    #[serde(default)]
    pub class_names: Vec<String>,
    #[serde(default)]
    pub legend_rgb: Vec<String>,
}

impl DatasetHeader {
    fn validate(&self) -> Result<()> {
        if self.dtype != "f32" {
            return Err(Error::Format(format!(
                "unsupported dtype {:?} (expected \"f32\")",
                self.dtype
            )));
        }
        if self.byte_order != "little" {
            return Err(Error::Format(format!(
                "unsupported byte_order {:?} (expected \"little\")",
                self.byte_order
            )));
        }
        if self.interleave != "bsq" {
            return Err(Error::Format(format!(
                "unsupported interleave {:?} (expected \"bsq\")",
                self.interleave
            )));
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.num_classes {
            return Err(Error::Format(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.num_classes
            )));
        }
        if !self.legend_rgb.is_empty() && self.legend_rgb.len() != self.num_classes {
            return Err(Error::Format(format!(
                "{} legend colors for {} classes",
                self.legend_rgb.len(),
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Parses a six-digit hex color such as `"ff0000"`.
pub fn parse_hex_rgb(hex: &str) -> Result<[u8; 3]> {
    let h = hex.trim_start_matches('#');
    if h.len() != 6 || !h.is_ascii() {
        return Err(Error::Format(format!("bad color {hex:?}")));
    }
    let mut out = [0u8; 3];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&h[2 * i..2 * i + 2], 16)
            .map_err(|_| Error::Format(format!("bad color {hex:?}")))?;
    }
    Ok(out)
}

fn read_exact_len(path: &Path, expected: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{}: expected {expected} bytes from the header, found {}",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes)
}

pub fn read_header(header_path: impl AsRef<Path>) -> Result<DatasetHeader> {
    let path = header_path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: DatasetHeader = serde_json::from_str(&text)?;
    header.validate()?;
    Ok(header)
}

pub(crate) fn sibling(header_path: &Path, file: &str) -> PathBuf {
    let p = Path::new(file);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        header_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Loads the label raster only, skipping the (possibly large) cube.
pub fn load_labels(header_path: impl AsRef<Path>) -> Result<(DatasetHeader, LabelMap)> {
    let path = header_path.as_ref();
    let header = read_header(path)?;
    let n = header.width * header.height;
    let bytes = read_exact_len(&sibling(path, &header.labels_file), n * 2)?;
    let labels = bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    let mut map = LabelMap::new(header.width, header.height, labels, header.num_classes)?;
    map.class_names = header.class_names.clone();
    map.legend = header
        .legend_rgb
        .iter()
        .map(|h| parse_hex_rgb(h))
        .collect::<Result<_>>()?;
    Ok((header, map))
}

/// Reads a dataset described by a JSON header. Relative file names are
/// resolved against the header's directory.
pub fn load_cube(header_path: impl AsRef<Path>) -> Result<(HsiCube, LabelMap)> {
    let path = header_path.as_ref();
    let (header, labels) = load_labels(path)?;
    let n = header.width * header.height * header.bands;
    let bytes = read_exact_len(&sibling(path, &header.data_file), n * 4)?;
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let cube = HsiCube::new(header.width, header.height, header.bands, values)?;
    Ok((cube, labels))
}

/// Writes `cube` and `labels` as `<stem>.json`, `<stem>.bsq` and
/// `<stem>.labels` inside `dir`; returns the header path.
pub fn save_cube(
    dir: impl AsRef<Path>,
    stem: &str,
    cube: &HsiCube,
    labels: &LabelMap,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    if cube.width != labels.width || cube.height != labels.height {
        return Err(Error::Data(format!(
            "cube is {}x{} but labels are {}x{}",
            cube.width, cube.height, labels.width, labels.height
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = DatasetHeader {
        width: cube.width,
        height: cube.height,
        bands: cube.bands,
        dtype: "f32".into(),
        byte_order: "little".into(),
        interleave: "bsq".into(),
        data_file: format!("{stem}.bsq"),
        labels_file: format!("{stem}.labels"),
        num_classes: labels.num_classes,
        class_names: labels.class_names.clone(),
        legend_rgb: labels
            .legend
            .iter()
            .map(|c| format!("{:02x}{:02x}{:02x}", c[0], c[1], c[2]))
            .collect(),
    };
    let data: Vec<u8> = cube.values.iter().flat_map(|v| v.to_le_bytes()).collect();
    let lab: Vec<u8> = labels.labels.iter().flat_map(|v| v.to_le_bytes()).collect();
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(p, e))
    };
    write(&header.data_file, &data)?;
    write(&header.labels_file, &lab)?;
    let header_path = dir.join(format!("{stem}.json"));
    write(
        &format!("{stem}.json"),
        serde_json::to_string_pretty(&header)?.as_bytes(),
    )?;
    Ok(header_path)
}

/// A labeled spatial-spectral patch. Values are stored band-major as
/// `[bands, size, size]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub values: Vec<f32>,
    /// Class label in `1..=C`.
    pub label: u16,
    /// Centre pixel as (row, col).
    pub center: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub patches: Vec<Patch>,
    pub patch_size: usize,
    pub bands: usize,
    pub num_classes: usize,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    fn empty_like(&self) -> Self {
        Self {
            patches: Vec::new(),
            patch_size: self.patch_size,
            bands: self.bands,
            num_classes: self.num_classes,
        }
    }
}

fn check_patch_size(cube: &HsiCube, s: usize) -> Result<()> {
    if s < 3 || s.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "patch size must be odd and >= 3, got {s}"
        )));
    }
    if s > 2 * cube.width.min(cube.height) {
        return Err(Error::Config(format!(
            "patch size {s} exceeds twice the smaller image extent ({}x{})",
            cube.width, cube.height
        )));
    }
    Ok(())
}

/// The `s x s` window centred on (row, col) with zero padding outside the
/// image, band-major.
pub fn extract_patch(cube: &HsiCube, row: usize, col: usize, s: usize) -> Vec<f32> {
    let r = (s / 2) as isize;
    let mut out = vec![0.0f32; cube.bands * s * s];
    for b in 0..cube.bands {
        let band = cube.band(b);
        for dy in 0..s {
            let y = row as isize + dy as isize - r;
            if y < 0 || y >= cube.height as isize {
                continue;
            }
            for dx in 0..s {
                let x = col as isize + dx as isize - r;
                if x < 0 || x >= cube.width as isize {
                    continue;
                }
                out[(b * s + dy) * s + dx] = band[y as usize * cube.width + x as usize];
            }
        }
    }
    out
}

/// One patch per labeled pixel, in row-major pixel order. The cube is
/// zero-padded by `(s - 1) / 2` on each side so border pixels get full
/// windows; pixels labeled 0 are skipped.
pub fn extract_patches(cube: &HsiCube, labels: &LabelMap, s: usize) -> Result<PatchSet> {
    check_patch_size(cube, s)?;
    if cube.width != labels.width || cube.height != labels.height {
        return Err(Error::Data(format!(
            "cube is {}x{} but labels are {}x{}",
            cube.width, cube.height, labels.width, labels.height
        )));
    }
    let mut patches = Vec::new();
    for row in 0..cube.height {
        for col in 0..cube.width {
            let label = labels.get(row, col);
            if label == 0 {
                continue;
            }
            patches.push(Patch {
                values: extract_patch(cube, row, col, s),
                label,
                center: (row, col),
            });
        }
    }
    Ok(PatchSet {
        patches,
        patch_size: s,
        bands: cube.bands,
        num_classes: labels.num_classes,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", content = "value", rename_all = "snake_case")]
pub enum SplitStrategy {
    /// Fraction of each class used for training, in (0, 1).
    Fraction(f64),
    /// Fixed number of training samples per class.
    Count(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    #[serde(flatten)]
    pub strategy: SplitStrategy,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            strategy: SplitStrategy::Fraction(0.1),
            seed: 42,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        match self.strategy {
            SplitStrategy::Fraction(f) if !(f > 0.0 && f < 1.0) => Err(Error::Config(format!(
                "train fraction must lie in (0, 1), got {f}"
            ))),
            SplitStrategy::Count(0) => Err(Error::Config("train count must be >= 1".into())),
            _ => Ok(()),
        }
    }

    /// Training samples drawn from a class of `n`. Fractions round down
    /// with a floor of one sample.
    pub fn train_size(&self, n: usize) -> usize {
        match self.strategy {
            SplitStrategy::Fraction(f) => ((f * n as f64).floor() as usize).max(1),
            SplitStrategy::Count(c) => c,
        }
    }

    pub fn describe(&self) -> String {
        match self.strategy {
            SplitStrategy::Fraction(f) => format!("fraction {f} per class, seed {}", self.seed),
            SplitStrategy::Count(c) => format!("{c} per class, seed {}", self.seed),
        }
    }
}

/// Per-class seeded shuffle, then the first `train_size` samples of each
/// class go to training and the rest to test. Classes are visited in
/// ascending order with a single RNG stream.
pub fn stratified_split(set: &PatchSet, spec: &SplitSpec) -> Result<(PatchSet, PatchSet)> {
    spec.validate()?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); set.num_classes];
    for (i, p) in set.patches.iter().enumerate() {
        if p.label == 0 || p.label as usize > set.num_classes {
            return Err(Error::Data(format!(
                "patch {i} has invalid label {}",
                p.label
            )));
        }
        by_class[p.label as usize - 1].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (mut train, mut test) = (set.empty_like(), set.empty_like());
    for (c, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        let n = members.len();
        let k = spec.train_size(n);
        let min_needed = match spec.strategy {
            SplitStrategy::Fraction(_) => 2,
            SplitStrategy::Count(c) => c + 1,
        };
        if n < min_needed || k >= n {
            return Err(Error::Data(format!(
                "class {} has {n} samples, too few for split ({})",
                c + 1,
                spec.describe()
            )));
        }
        members.shuffle(&mut rng);
        let (tr, te) = members.split_at(k);
        train
            .patches
            .extend(tr.iter().map(|&i| set.patches[i].clone()));
        let mut te = te.to_vec();
        te.sort_unstable();
        test.patches
            .extend(te.iter().map(|&i| set.patches[i].clone()));
    }
    Ok((train, test))
}

/// Histogram of labels over classes `1..=C` (index 0 is class 1).
pub fn class_stats(set: &PatchSet) -> Vec<usize> {
    let mut counts = vec![0; set.num_classes];
    for p in &set.patches {
        if p.label >= 1 && p.label as usize <= set.num_classes {
            counts[p.label as usize - 1] += 1;
        }
    }
    counts
}
