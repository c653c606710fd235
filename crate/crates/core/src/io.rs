//! PNG and NPY files, and the on-disk dataset layout:
//!
//! ```text
//! frames/NNNN.png      RGB input frames
//! masks/NNNN.png       visible-body mask (0 or 255)
//! gt_human/NNNN.png    the frame rendered without the occluder
//! silhouette/NNNN.png  full-body silhouette (0 or 255)
//! cameras.json         one camera per frame
//! poses.json           one list of bone transforms per frame
//! spec.json            the generating scene description
//! ```

use std::path::{Path, PathBuf};

use crate::deform::Pose;
use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::raster::Image;
use crate::synth::SceneSpec;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an RGB or single-channel image as 8-bit PNG.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
    let (w, h) = (img.width as u32, img.height as u32);
    match img.channels {
        3 => image::RgbImage::from_raw(w, h, bytes)
            .ok_or_else(|| Error::Contract("rgb buffer size".into()))?
            .save_with_format(path, image::ImageFormat::Png)?,
        1 => image::GrayImage::from_raw(w, h, bytes)
            .ok_or_else(|| Error::Contract("gray buffer size".into()))?
            .save_with_format(path, image::ImageFormat::Png)?,
        c => return Err(Error::Contract(format!("cannot write {c}-channel PNG"))),
    }
    Ok(())
}

/// Reads a PNG as RGB (`channels = 3`) or grayscale (`channels = 1`).
pub fn read_png(path: &Path, channels: usize) -> Result<Image> {
    if !path.exists() {
        return Err(Error::MissingData(path.display().to_string()));
    }
    let dynimg = image::open(path)?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    let raw: Vec<u8> = match channels {
        3 => dynimg.to_rgb8().into_raw(),
        1 => dynimg.to_luma8().into_raw(),
        c => return Err(Error::Contract(format!("cannot read {c}-channel PNG"))),
    };
    Ok(Image {
        width: w,
        height: h,
        channels,
        data: raw.into_iter().map(|b| b as f64 / 255.0).collect(),
    })
}

/// Writes `img` as a little-endian `f32` array of shape `(channels, height, width)`.
pub fn write_npy(path: &Path, img: &Image) -> Result<()> {
    let mut header = format!(
        "{{'descr': '<f4', 'fortran_order': False, 'shape': ({}, {}, {}), }}",
        img.channels, img.height, img.width
    );
    let unpadded = 10 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');
    let mut out = Vec::with_capacity(10 + header.len() + img.data.len() * 4);
    out.extend_from_slice(b"\x93NUMPY\x01\x00");
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for c in 0..img.channels {
        for i in 0..img.pixels() {
            out.extend_from_slice(&(img.data[i * img.channels + c] as f32).to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads an array written by [`write_npy`].
pub fn read_npy(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|_| Error::MissingData(path.display().to_string()))?;
    let bad = |m: &str| Error::Contract(format!("{}: {m}", path.display()));
    if bytes.len() < 10 || &bytes[..8] != b"\x93NUMPY\x01\x00" {
        return Err(bad("not an NPY v1 file"));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header = std::str::from_utf8(
        bytes
            .get(10..10 + hlen)
            .ok_or_else(|| bad("short header"))?,
    )
    .map_err(|_| bad("header not utf-8"))?;
    if !header.contains("'<f4'") || header.contains("'fortran_order': True") {
        return Err(bad("expected C-ordered <f4"));
    }
    let shape = header
        .split("'shape': (")
        .nth(1)
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| bad("no shape"))?;
    let dims: Vec<usize> = shape
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse().map_err(|_| bad("bad shape")))
        .collect::<Result<_>>()?;
    let [c, h, w] = dims[..] else {
        return Err(bad("expected three dimensions"));
    };
    let body = &bytes[10 + hlen..];
    if body.len() != c * h * w * 4 {
        return Err(bad("data length does not match shape"));
    }
    let mut img = Image::new(w, h, c);
    for ch in 0..c {
        for i in 0..w * h {
            let o = (ch * w * h + i) * 4;
            img.data[i * c + ch] =
                f32::from_le_bytes(body[o..o + 4].try_into().expect("4 bytes")) as f64;
        }
    }
    Ok(img)
}

pub fn frame_name(i: usize) -> String {
    format!("{i:04}.png")
}

/// One frame of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub index: usize,
    pub rgb: Image,
    /// Body visible and nearest.
    pub mask: Vec<bool>,
    /// The frame without the occluder.
    pub gt_human: Image,
    /// Full body occupancy, occluded or not.
    pub silhouette: Vec<bool>,
}

impl FrameRecord {
    /// Silhouette pixels hidden by something in front of the body.
    pub fn occluded(&self) -> Vec<bool> {
        self.silhouette
            .iter()
            .zip(&self.mask)
            .map(|(&s, &m)| s && !m)
            .collect()
    }

    pub fn occluded_fraction(&self) -> f64 {
        let sil = self.silhouette.iter().filter(|&&s| s).count();
        if sil == 0 {
            return 0.0;
        }
        self.occluded().iter().filter(|&&o| o).count() as f64 / sil as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub cameras: Vec<Camera>,
    pub poses: Vec<Pose>,
    pub frames: Vec<FrameRecord>,
}

fn mask_image(mask: &[bool], width: usize, height: usize) -> Image {
    Image {
        width,
        height,
        channels: 1,
        data: mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| Error::MissingData(path.display().to_string()))?;
    Ok(serde_json::from_str(&text)?)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for sub in ["frames", "masks", "gt_human", "silhouette"] {
            std::fs::create_dir_all(dir.join(sub))?;
        }
        for f in &self.frames {
            let name = frame_name(f.index);
            let (w, h) = (f.rgb.width, f.rgb.height);
            write_png(&dir.join("frames").join(&name), &f.rgb)?;
            write_png(&dir.join("masks").join(&name), &mask_image(&f.mask, w, h))?;
            write_png(&dir.join("gt_human").join(&name), &f.gt_human)?;
            write_png(
                &dir.join("silhouette").join(&name),
                &mask_image(&f.silhouette, w, h),
            )?;
        }
        write_json(&dir.join("cameras.json"), &self.cameras)?;
        write_json(&dir.join("poses.json"), &self.poses)?;
        write_json(&dir.join("spec.json"), &self.spec)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::MissingData(format!(
                "dataset directory {}",
                dir.display()
            )));
        }
        let spec: SceneSpec = read_json(&dir.join("spec.json"))?;
        let cameras: Vec<Camera> = read_json(&dir.join("cameras.json"))?;
        let poses: Vec<Pose> = read_json(&dir.join("poses.json"))?;
        if poses.len() != cameras.len() {
            return Err(Error::FrameCountMismatch {
                expected: cameras.len(),
                found: poses.len(),
                what: "poses".into(),
            });
        }
        for c in &cameras {
            c.validate()?;
        }
        let mut frames = Vec::with_capacity(cameras.len());
        for (i, cam) in cameras.iter().enumerate() {
            let name = frame_name(i);
            let rgb = read_png(&dir.join("frames").join(&name), 3)?;
            let mask = read_png(&dir.join("masks").join(&name), 1)?;
            let gt_human = read_png(&dir.join("gt_human").join(&name), 3)?;
            let silhouette = read_png(&dir.join("silhouette").join(&name), 1)?;
            for img in [&rgb, &mask, &gt_human, &silhouette] {
                if (img.width, img.height) != (cam.width, cam.height) {
                    return Err(Error::Contract(format!(
                        "frame {i}: image size differs from camera"
                    )));
                }
            }
            frames.push(FrameRecord {
                index: i,
                rgb,
                mask: mask.threshold(0.5),
                gt_human,
                silhouette: silhouette.threshold(0.5),
            });
        }
        let extra = dir.join("frames").join(frame_name(cameras.len()));
        if extra.exists() {
            return Err(Error::FrameCountMismatch {
                expected: cameras.len(),
                found: cameras.len() + 1,
                what: "frames".into(),
            });
        }
        Ok(Self {
            spec,
            cameras,
            poses,
            frames,
        })
    }
}

/// Per-run render output layout.
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn composed(&self, i: usize) -> PathBuf {
        self.root.join("composed").join(frame_name(i))
    }

    pub fn raw(&self, what: &str, i: usize) -> PathBuf {
        self.root.join("raw").join(format!("{what}_{i:04}.npy"))
    }

    pub fn layer(&self, layer: &str, i: usize) -> PathBuf {
        self.root.join(layer).join(frame_name(i))
    }
}
