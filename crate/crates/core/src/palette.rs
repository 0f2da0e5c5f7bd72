//! Class color palettes, known dataset presets and binary PPM output.

use std::fs;
use std::path::Path;

use crate::data::{parse_hex_rgb, LabelMap};
use crate::error::{Error, Result};

/// Published ground-truth description of a benchmark scene.
#[derive(Clone, Copy, Debug)]
pub struct DatasetPreset {
    pub name: &'static str,
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    /// `(class name, labeled pixel count, legend hex color)` for classes
    /// 1..C in order.
    pub classes: &'static [(&'static str, usize, &'static str)],
}

pub const LONGKOU: DatasetPreset = DatasetPreset {
    name: "WHU-Hi-LongKou",
    width: 550,
    height: 400,
    bands: 270,
    classes: &[
        ("Corn", 34511, "ff0000"),
        ("Cotton", 8374, "ef9b00"),
        ("Sesame", 3031, "ffff00"),
        ("Broad-leaf soybean", 63212, "00ff00"),
        ("Narrow-leaf soybean", 4151, "00ffff"),
        ("Rice", 11854, "008c8c"),
        ("Water", 67056, "0000ff"),
        ("Roads and houses", 7124, "ffffff"),
        ("Mixed weed", 5229, "a020f0"),
    ],
};

pub const HANCHUAN: DatasetPreset = DatasetPreset {
    name: "WHU-Hi-HanChuan",
    width: 1217,
    height: 303,
    bands: 274,
    classes: &[
        ("Strawberry", 44735, "b03060"),
        ("Cowpea", 22753, "00ffff"),
        ("Soybean", 10287, "ff00ff"),
        ("Sorghum", 5353, "a020f0"),
        ("Water spinach", 1200, "7fffd4"),
        ("Watermelon", 4533, "7fff00"),
        ("Greens", 5903, "00cd00"),
        ("Trees", 17978, "00ff00"),
        ("Grass", 9469, "008b00"),
        ("Red roof", 10516, "ff0000"),
        ("Gray roof", 16911, "d8bfd8"),
        ("Plastic", 3679, "ff7f50"),
        ("Bare soil", 9116, "a0522d"),
        ("Road", 18560, "ffffff"),
        ("Bright object", 1136, "da70d6"),
        ("Water", 75401, "0000ff"),
    ],
};

pub const PRESETS: [DatasetPreset; 2] = [LONGKOU, HANCHUAN];

impl DatasetPreset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.0.to_string()).collect()
    }

    pub fn legend_hex(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.2.to_string()).collect()
    }

    pub fn palette(&self) -> PaletteSpec {
        PaletteSpec::from_hex(&self.legend_hex()).expect("preset colors are valid")
    }

    pub fn find(name: &str) -> Option<DatasetPreset> {
        let key = name.to_ascii_lowercase().replace(['-', '_', ' '], "");
        PRESETS.into_iter().find(|p| {
            let full = p.name.to_ascii_lowercase().replace('-', "");
            full == key || full.trim_start_matches("whuhi") == key
        })
    }
}

/// Colors for classes 0..=C; class 0 (unlabeled) is always black.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaletteSpec {
    colors: Vec<[u8; 3]>,
}

impl PaletteSpec {
    /// Builds a palette from one hex color per class 1..C.
    pub fn from_hex<S: AsRef<str>>(hex: &[S]) -> Result<Self> {
        let rgb = hex
            .iter()
            .map(|h| parse_hex_rgb(h.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_rgb(&rgb))
    }

    pub fn from_rgb(rgb: &[[u8; 3]]) -> Self {
        let mut colors = vec![[0, 0, 0]];
        colors.extend_from_slice(rgb);
        Self { colors }
    }

    /// Evenly spaced, fully saturated hues; never black.
    pub fn generated(classes: usize) -> Self {
        let rgb: Vec<[u8; 3]> = (0..classes)
            .map(|k| hsv_to_rgb(k as f64 / classes.max(1) as f64, 1.0, 1.0))
            .collect();
        Self::from_rgb(&rgb)
    }

    /// The label map's legend if it has one, generated colors otherwise.
    pub fn for_labels(labels: &LabelMap) -> Self {
        if labels.legend.len() == labels.num_classes() {
            Self::from_rgb(&labels.legend)
        } else {
            Self::generated(labels.num_classes())
        }
    }

    pub fn num_classes(&self) -> usize {
        self.colors.len() - 1
    }

    pub fn color(&self, class: usize) -> Result<[u8; 3]> {
        self.colors.get(class).copied().ok_or_else(|| {
            Error::Data(format!(
                "class {class} has no color (palette covers 1..={})",
                self.num_classes()
            ))
        })
    }

    pub fn colors(&self) -> &[[u8; 3]] {
        &self.colors
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    let (r, g, b) = match i as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    let c = |x: f64| (x * 255.0).round() as u8;
    [c(r), c(g), c(b)]
}

/// Encodes a row-major class raster as a binary PPM (P6, maxval 255).
pub fn render_ppm(
    width: usize,
    height: usize,
    classes: &[u16],
    palette: &PaletteSpec,
) -> Result<Vec<u8>> {
    if classes.len() != width * height {
        return Err(Error::Data(format!(
            "{} classes for a {width}x{height} image",
            classes.len()
        )));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(classes.len() * 3);
    for &c in classes {
        out.extend_from_slice(&palette.color(c as usize)?);
    }
    Ok(out)
}

pub fn write_ppm(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    classes: &[u16],
    palette: &PaletteSpec,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = render_ppm(width, height, classes, palette)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses a P6 image back into `(width, height, rgb bytes)`.
pub fn read_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = || Error::Format("not a binary PPM (P6, maxval 255)".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?);
    }
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let body = &bytes[pos + 1..];
    if body.len() != w * h * 3 {
        return Err(bad());
    }
    Ok((w, h, body.to_vec()))
}
