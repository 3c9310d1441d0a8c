//! PNG renders: prototype source crops over their frame span and PRP heat overlays.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::datagen::{BBox, SampleSequence};
use crate::error::{Error, Result};
use crate::explain::RelevanceMap;
use crate::protonet::Prototype;

/// Integer upscale applied to crops.
pub const CROP_SCALE: u32 = 4;
const GAP: u32 = 2;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Flow vector as a color: hue from direction, brightness from magnitude.
fn flow_color(dx: f32, dy: f32, max_mag: f32) -> Rgb<u8> {
    let mag = (dx * dx + dy * dy).sqrt();
    if max_mag <= 0.0 || mag == 0.0 {
        return Rgb([0, 0, 0]);
    }
    let v = (mag / max_mag).min(1.0) as f64;
    let hue = ((dy as f64).atan2(dx as f64) / std::f64::consts::TAU).rem_euclid(1.0) * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    Rgb([to_u8(r * v), to_u8(g * v), to_u8(b * v)])
}

fn check_bbox(sample: &SampleSequence, b: &BBox) -> Result<()> {
    if b.x0 >= b.x1 || b.y0 >= b.y1 || b.x1 > sample.width || b.y1 > sample.height {
        return Err(Error::InvalidArgument(format!(
            "crop {b:?} outside {}x{} sample {}",
            sample.width, sample.height, sample.id
        )));
    }
    Ok(())
}

/// Frame `t` of a sample cropped to `b`: the RGB frame for `t = 0`, flow field `t − 1` otherwise.
pub fn frame_crop(sample: &SampleSequence, b: &BBox, t: usize) -> Result<RgbImage> {
    check_bbox(sample, b)?;
    if t >= sample.k() {
        return Err(Error::InvalidArgument(format!(
            "frame {t} outside a {}-frame sample",
            sample.k()
        )));
    }
    let max_mag = if t == 0 {
        0.0
    } else {
        (b.y0..b.y1)
            .flat_map(|y| (b.x0..b.x1).map(move |x| (x, y)))
            .map(|(x, y)| {
                let (dx, dy) = sample.flow_at(t - 1, x, y);
                (dx * dx + dy * dy).sqrt()
            })
            .fold(0.0f32, f32::max)
    };
    let (w, h) = (b.width() * CROP_SCALE, b.height() * CROP_SCALE);
    Ok(RgbImage::from_fn(w, h, |px, py| {
        let (x, y) = (b.x0 + px / CROP_SCALE, b.y0 + py / CROP_SCALE);
        if t == 0 {
            Rgb([0, 1, 2].map(|c| to_u8(sample.rgb_at(x, y, c) as f64)))
        } else {
            let (dx, dy) = sample.flow_at(t - 1, x, y);
            flow_color(dx, dy, max_mag)
        }
    }))
}

/// Every frame of the prototype's source crop, side by side.
pub fn prototype_strip(proto: &Prototype, source: &SampleSequence) -> Result<RgbImage> {
    let src = proto.source.as_ref().ok_or_else(|| {
        Error::InvalidArgument(format!("prototype {} has no source patch", proto.id))
    })?;
    if src.sample_id != source.id {
        return Err(Error::InvalidArgument(format!(
            "prototype {} cites {}, got {}",
            proto.id, src.sample_id, source.id
        )));
    }
    let frames = (0..source.k())
        .map(|t| frame_crop(source, &src.bbox, t))
        .collect::<Result<Vec<_>>>()?;
    let (fw, fh) = (frames[0].width(), frames[0].height());
    let mut strip = RgbImage::from_pixel(
        frames.len() as u32 * (fw + GAP) - GAP,
        fh,
        Rgb([255, 255, 255]),
    );
    for (i, f) in frames.iter().enumerate() {
        image::imageops::replace(&mut strip, f, (i as u32 * (fw + GAP)) as i64, 0);
    }
    Ok(strip)
}

fn heat(v: f64) -> [f64; 3] {
    [v.min(0.5) * 2.0, (v - 0.5).max(0.0) * 2.0, 0.0].map(|c| c.clamp(0.0, 1.0))
}

/// Two panels: RGB relevance over the frame, and flow relevance (summed over
/// fields) over the first flow field. Pixels with zero relevance keep their
/// base color; the receptive field is outlined.
pub fn prp_overlay(sample: &SampleSequence, map: &RelevanceMap) -> Result<RgbImage> {
    if (map.height, map.width) != (sample.height, sample.width) || map.sample_id != sample.id {
        return Err(Error::Shape(format!(
            "relevance map for {} does not fit sample {}",
            map.sample_id, sample.id
        )));
    }
    let n = (sample.width * sample.height) as usize;
    let flow: Vec<f64> = (0..n)
        .map(|i| map.flows.iter().map(|f| f[i]).sum())
        .collect();
    let full = BBox {
        x0: 0,
        y0: 0,
        x1: sample.width,
        y1: sample.height,
    };
    let panels = [
        (frame_crop(sample, &full, 0)?, &map.rgb[..]),
        (frame_crop(sample, &full, 1.min(sample.k() - 1))?, &flow[..]),
    ];
    let (pw, ph) = (panels[0].0.width(), panels[0].0.height());
    let mut out = RgbImage::from_pixel(2 * pw + GAP, ph, Rgb([255, 255, 255]));
    for (k, (base, rel)) in panels.iter().enumerate() {
        let peak = rel.iter().cloned().fold(0.0f64, f64::max);
        let mut panel = base.clone();
        for (px, py, p) in panel.enumerate_pixels_mut() {
            let (x, y) = (px / CROP_SCALE, py / CROP_SCALE);
            let r = rel[(y * sample.width + x) as usize];
            if r > 0.0 && peak > 0.0 {
                let a = 0.35 + 0.5 * (r / peak);
                let h = heat(r / peak);
                for c in 0..3 {
                    p.0[c] = to_u8((1.0 - a) * p.0[c] as f64 / 255.0 + a * h[c]);
                }
            }
            let b = &map.bbox;
            let on_edge = (x == b.x0 || x + 1 == b.x1) && (b.y0..b.y1).contains(&y)
                || (y == b.y0 || y + 1 == b.y1) && (b.x0..b.x1).contains(&x);
            let inner = px % CROP_SCALE == 0
                || px % CROP_SCALE == CROP_SCALE - 1
                || py % CROP_SCALE == 0
                || py % CROP_SCALE == CROP_SCALE - 1;
            if on_edge && inner {
                *p = Rgb([0, 255, 255]);
            }
        }
        image::imageops::replace(&mut out, &panel, (k as u32 * (pw + GAP)) as i64, 0);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedFile {
    pub kind: String,
    pub prototype_id: String,
    pub path: PathBuf,
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
