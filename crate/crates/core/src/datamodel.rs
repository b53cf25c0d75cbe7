//! Image records, split bookkeeping and the tab-separated dataset manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An RGB image stored height-major as interleaved `f32` values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Self::with_channels(height, width, 3, data)
    }

    pub fn with_channels(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::BadShape(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Image {
            height,
            width,
            channels: 3,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Left-right mirror. Applying it twice restores the image bit-for-bit.
    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set(y, x, c, self.get(y, self.width - 1 - x, c));
                }
            }
        }
        out
    }

    /// Channel-major `f64` copy (`C x H x W`), the layout the network consumes.
    pub fn to_chw(&self) -> Vec<f64> {
        let (h, w, ch) = (self.height, self.width, self.channels);
        let mut out = vec![0.0; ch * h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    out[(c * h + y) * w + x] = f64::from(self.get(y, x, c));
                }
            }
        }
        out
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect();
        Image::new(h as usize, w as usize, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = quantize_u8(&self.data);
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::BadShape("png buffer size".into()))?;
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Rounds every value to the nearest multiple of 1/255, i.e. what a PNG round trip keeps.
    pub fn quantized(&self) -> Image {
        let data = quantize_u8(&self.data)
            .into_iter()
            .map(|v| f32::from(v) / 255.0)
            .collect();
        Image { data, ..*self }
    }
}

fn quantize_u8(data: &[f32]) -> Vec<u8> {
    data.iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Gallery,
    Query,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Gallery => "gallery",
            Split::Query => "query",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "gallery" => Ok(Split::Gallery),
            "query" => Ok(Split::Query),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub pixels: Image,
    pub identity: Option<usize>,
    pub camera_id: usize,
    pub split: Split,
    /// Camera the image was really taken with, set only on style-transferred copies.
    pub style_source_camera: Option<usize>,
    pub is_flipped: bool,
}

impl ImageRecord {
    pub fn new(
        image_id: impl Into<String>,
        pixels: Image,
        identity: Option<usize>,
        camera_id: usize,
        split: Split,
    ) -> Self {
        ImageRecord {
            image_id: image_id.into(),
            pixels,
            identity,
            camera_id,
            split,
            style_source_camera: None,
            is_flipped: false,
        }
    }

    pub fn is_synthetic(&self) -> bool {
        self.style_source_camera.is_some()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub num_cameras: usize,
    pub ids_train: usize,
    pub images_train: usize,
    pub ids_gallery: usize,
    pub images_gallery: usize,
    pub ids_query: usize,
    pub images_query: usize,
}

impl DatasetSummary {
    pub fn market1501() -> Self {
        DatasetSummary {
            num_cameras: 6,
            ids_train: 751,
            images_train: 12_936,
            ids_gallery: 750,
            images_gallery: 19_732,
            ids_query: 750,
            images_query: 3_368,
        }
    }

    pub fn cuhk03() -> Self {
        DatasetSummary {
            num_cameras: 2,
            ids_train: 767,
            images_train: 7_365,
            ids_gallery: 700,
            images_gallery: 5_332,
            ids_query: 700,
            images_query: 1_400,
        }
    }

    pub fn msmt17() -> Self {
        DatasetSummary {
            num_cameras: 15,
            ids_train: 1_041,
            images_train: 32_621,
            ids_gallery: 3_060,
            images_gallery: 82_161,
            ids_query: 3_060,
            images_query: 11_659,
        }
    }

    fn fields(&self) -> [(&'static str, usize); 7] {
        [
            ("num_cameras", self.num_cameras),
            ("ids_train", self.ids_train),
            ("images_train", self.images_train),
            ("ids_gallery", self.ids_gallery),
            ("images_gallery", self.images_gallery),
            ("ids_query", self.ids_query),
            ("images_query", self.images_query),
        ]
    }
}

/// Counts cameras, identities and images per split, and checks them against `expected`.
pub fn summarize_and_validate(
    records: &[ImageRecord],
    expected: Option<&DatasetSummary>,
) -> Result<DatasetSummary> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut cameras = BTreeSet::new();
    let mut ids: BTreeMap<Split, BTreeSet<usize>> = BTreeMap::new();
    let mut images: BTreeMap<Split, usize> = BTreeMap::new();
    for r in records {
        if r.split == Split::Train && r.identity.is_none() {
            return Err(Error::MissingIdentity(r.image_id.clone()));
        }
        cameras.insert(r.camera_id);
        *images.entry(r.split).or_default() += 1;
        if let Some(id) = r.identity {
            ids.entry(r.split).or_default().insert(id);
        }
    }
    let n_ids = |s| ids.get(&s).map_or(0, BTreeSet::len);
    let n_images = |s| images.get(&s).copied().unwrap_or(0);
    let got = DatasetSummary {
        num_cameras: cameras.len(),
        ids_train: n_ids(Split::Train),
        images_train: n_images(Split::Train),
        ids_gallery: n_ids(Split::Gallery),
        images_gallery: n_images(Split::Gallery),
        ids_query: n_ids(Split::Query),
        images_query: n_images(Split::Query),
    };
    if let Some(want) = expected {
        for ((field, g), (_, w)) in got.fields().into_iter().zip(want.fields()) {
            if g != w {
                return Err(Error::SummaryMismatch {
                    field,
                    got: g,
                    want: w,
                });
            }
        }
    }
    Ok(got)
}

/// Remaps identities to dense `0..M` in order of first appearance by sorted raw id.
/// Returns the raw-to-dense mapping.
pub fn remap_identities_dense(records: &mut [ImageRecord]) -> BTreeMap<usize, usize> {
    let raw: BTreeSet<usize> = records.iter().filter_map(|r| r.identity).collect();
    let map: BTreeMap<usize, usize> = raw.into_iter().enumerate().map(|(i, r)| (r, i)).collect();
    for r in records.iter_mut() {
        if let Some(id) = r.identity {
            r.identity = Some(map[&id]);
        }
    }
    map
}

pub fn records_in_split(records: &[ImageRecord], split: Split) -> Vec<ImageRecord> {
    records.iter().filter(|r| r.split == split).cloned().collect()
}

/// One manifest line: everything about a record except its pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image_id: String,
    pub relative_path: String,
    pub identity: Option<usize>,
    pub camera_id: usize,
    pub split: Split,
    pub style_source_camera: Option<usize>,
}

impl ManifestEntry {
    pub fn to_line(&self) -> String {
        let opt = |v: Option<usize>| v.map_or_else(|| "-".to_string(), |x| x.to_string());
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.image_id,
            self.relative_path,
            opt(self.identity),
            self.camera_id,
            self.split,
            opt(self.style_source_camera)
        )
    }

    pub fn parse_line(line: &str, lineno: usize) -> Result<Self> {
        let err = |msg: String| Error::Manifest { line: lineno, msg };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 {
            return Err(err(format!("expected 6 tab-separated columns, found {}", cols.len())));
        }
        let opt = |s: &str, what: &str| -> Result<Option<usize>> {
            if s == "-" {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| err(format!("bad {what} `{s}`")))
            }
        };
        Ok(ManifestEntry {
            image_id: cols[0].to_string(),
            relative_path: cols[1].to_string(),
            identity: opt(cols[2], "identity")?,
            camera_id: cols[3]
                .parse()
                .map_err(|_| err(format!("bad camera id `{}`", cols[3])))?,
            split: cols[4].parse().map_err(err)?,
            style_source_camera: opt(cols[5], "style source camera")?,
        })
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(i, l)| ManifestEntry::parse_line(l, i + 1))
        .collect()
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&e.to_line());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `records` as `<dir>/manifest.tsv` plus one PNG per record under `<dir>/images/`.
pub fn save_dataset(dir: &Path, records: &[ImageRecord]) -> Result<PathBuf> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut entries = Vec::with_capacity(records.len());
    for r in records {
        let rel = format!("images/{}.png", r.image_id);
        r.pixels.save_png(&dir.join(&rel))?;
        entries.push(ManifestEntry {
            image_id: r.image_id.clone(),
            relative_path: rel,
            identity: r.identity,
            camera_id: r.camera_id,
            split: r.split,
            style_source_camera: r.style_source_camera,
        });
    }
    let manifest = dir.join("manifest.tsv");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

/// Loads a manifest and decodes every referenced image relative to the manifest's directory.
pub fn load_dataset(manifest: &Path) -> Result<Vec<ImageRecord>> {
    let root = manifest.parent().unwrap_or_else(|| Path::new("."));
    read_manifest(manifest)?
        .into_iter()
        .map(|e| {
            let pixels = Image::load_png(&root.join(&e.relative_path))?;
            Ok(ImageRecord {
                image_id: e.image_id,
                pixels,
                identity: e.identity,
                camera_id: e.camera_id,
                split: e.split,
                style_source_camera: e.style_source_camera,
                is_flipped: false,
            })
        })
        .collect()
}
