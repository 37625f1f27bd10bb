//! Class names and display colours for the 19 evaluation classes.
//!
//! Palette files are plain text, one `r,g,b` line per class id in order;
//! blank lines and `#` comments are skipped.

use std::path::Path;

use crate::error::{Error, Result};

pub const CLASS_NAMES: [&str; 19] = [
    "road",
    "sidewalk",
    "building",
    "wall",
    "fence",
    "pole",
    "traffic light",
    "traffic sign",
    "vegetation",
    "terrain",
    "sky",
    "person",
    "rider",
    "car",
    "truck",
    "bus",
    "train",
    "motorcycle",
    "bicycle",
];

const CITYSCAPES: [[u8; 3]; 19] = [
    [128, 64, 128],
    [244, 35, 232],
    [70, 70, 70],
    [102, 102, 156],
    [190, 153, 153],
    [153, 153, 153],
    [250, 170, 30],
    [220, 220, 0],
    [107, 142, 35],
    [152, 251, 152],
    [70, 130, 180],
    [220, 20, 60],
    [255, 0, 0],
    [0, 0, 142],
    [0, 0, 70],
    [0, 60, 100],
    [0, 80, 100],
    [0, 0, 230],
    [119, 11, 32],
];

pub fn class_name(id: usize) -> String {
    CLASS_NAMES
        .get(id)
        .map_or_else(|| format!("class_{id}"), |s| s.to_string())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Palette {
    colors: Vec<[u8; 3]>,
}

impl Palette {
    pub fn cityscapes() -> Self {
        Self { colors: CITYSCAPES.to_vec() }
    }

    pub fn new(colors: Vec<[u8; 3]>) -> Result<Self> {
        if colors.is_empty() {
            return Err(Error::Config("palette has no colours".into()));
        }
        Ok(Self { colors })
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    /// Colour of `id`; ids past the end (including ignore) map to black.
    pub fn color(&self, id: u8) -> [u8; 3] {
        self.colors.get(id as usize).copied().unwrap_or([0, 0, 0])
    }

    pub fn to_text(&self) -> String {
        self.colors
            .iter()
            .map(|[r, g, b]| format!("{r},{g},{b}\n"))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut colors = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<_> = line.split(',').map(str::trim).collect();
            let parsed: Option<Vec<u8>> = parts.iter().map(|p| p.parse().ok()).collect();
            match parsed.as_deref() {
                Some(&[r, g, b]) => colors.push([r, g, b]),
                _ => {
                    return Err(Error::Config(format!(
                        "palette line {}: expected r,g,b with values 0..=255, got {line:?}",
                        n + 1
                    )))
                }
            }
        }
        Self::new(colors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}
