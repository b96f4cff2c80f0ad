//! COCO-style annotation JSON plus one PNG per image.

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{rle, Category, Dataset, DatasetConfig, InstanceAnnotation, Record, RgbImage, Split};
use crate::error::{Error, Result};
use crate::mask::BBox;

pub const ANNOTATION_FILE: &str = "annotations.json";

#[derive(Serialize, Deserialize)]
struct CocoFile {
    info: Info,
    categories: Vec<CocoCategory>,
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
}

#[derive(Serialize, Deserialize)]
struct Info {
    description: String,
    config: DatasetConfig,
}

#[derive(Serialize, Deserialize)]
struct CocoCategory {
    id: u32,
    name: String,
    seen: bool,
}

#[derive(Serialize, Deserialize)]
struct CocoImage {
    id: usize,
    file_name: String,
    height: usize,
    width: usize,
    split: Split,
}

#[derive(Serialize, Deserialize)]
struct CocoAnnotation {
    id: usize,
    image_id: usize,
    category_id: u32,
    /// `[x, y, width, height]` in pixels.
    bbox: [f64; 4],
    area: usize,
    has_mask: bool,
    segmentation: Option<CocoRle>,
}

#[derive(Serialize, Deserialize)]
struct CocoRle {
    size: [usize; 2],
    counts: Vec<u32>,
}

pub fn write_png(image: &RgbImage, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut bytes, image.width as u32, image.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        writer
            .write_image_data(&image.data)
            .map_err(|e| Error::Png(e.to_string()))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_png(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let png_err = |e: png::DecodingError| Error::Png(format!("{}: {e}", path.display()));
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(png_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png(format!(
            "{}: expected 8-bit RGB, got {:?} {:?}",
            path.display(),
            info.color_type,
            info.bit_depth
        )));
    }
    buf.truncate(info.buffer_size());
    Ok(RgbImage {
        height: info.height as usize,
        width: info.width as usize,
        data: buf,
    })
}

fn file_name(r: &Record) -> String {
    format!("images/{}_{:06}.png", r.split.name(), r.id)
}

/// Writes `annotations.json` and `images/*.png` under `dir`.
pub fn save_annotations(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    for r in dataset.records() {
        let name = file_name(r);
        write_png(&r.image, &dir.join(&name))?;
        let (h, w) = (r.image.height as f64, r.image.width as f64);
        images.push(CocoImage {
            id: r.id,
            file_name: name,
            height: r.image.height,
            width: r.image.width,
            split: r.split,
        });
        for a in &r.annotations {
            let b = &a.bbox;
            annotations.push(CocoAnnotation {
                id: annotations.len(),
                image_id: r.id,
                category_id: a.category.id(),
                bbox: [b.xmin * w, b.ymin * h, b.width() * w, b.height() * h],
                area: a.mask.as_ref().map_or(0, |m| m.count()),
                has_mask: a.has_mask(),
                segmentation: a.mask.as_ref().map(|m| CocoRle {
                    size: [m.height(), m.width()],
                    counts: rle::encode(m),
                }),
            });
        }
    }
    let file = CocoFile {
        info: Info {
            description: "synthetic shapes, partially supervised".into(),
            config: dataset.config.clone(),
        },
        categories: dataset
            .config
            .categories
            .iter()
            .map(|&c| CocoCategory {
                id: c.id(),
                name: c.name().into(),
                seen: dataset.config.is_seen(c),
            })
            .collect(),
        images,
        annotations,
    };
    let path = dir.join(ANNOTATION_FILE);
    let text = serde_json::to_string_pretty(&file)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_annotations(dir: &Path) -> Result<Dataset> {
    let path = dir.join(ANNOTATION_FILE);
    let origin = path.display().to_string();
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let file: CocoFile =
        serde_json::from_str(&text).map_err(|e| Error::parse(&origin, e.line(), e.to_string()))?;
    let field = |what: String| Error::parse(&origin, 0, what);
    let mut by_image: BTreeMap<usize, Vec<InstanceAnnotation>> = BTreeMap::new();
    let sizes: BTreeMap<usize, (usize, usize)> = file
        .images
        .iter()
        .map(|i| (i.id, (i.height, i.width)))
        .collect();
    for a in &file.annotations {
        let &(h, w) = sizes.get(&a.image_id).ok_or_else(|| {
            field(format!(
                "annotation {}: image_id {} not listed",
                a.id, a.image_id
            ))
        })?;
        let category = Category::from_id(a.category_id).ok_or_else(|| {
            field(format!(
                "annotation {}: unknown category_id {}",
                a.id, a.category_id
            ))
        })?;
        let [x, y, bw, bh] = a.bbox;
        let (hf, wf) = (h as f64, w as f64);
        let bbox = BBox::new(y / hf, x / wf, (y + bh) / hf, (x + bw) / wf)
            .map_err(|e| field(format!("annotation {}: bbox: {e}", a.id)))?;
        let mask = match (&a.segmentation, a.has_mask) {
            (Some(seg), true) => {
                if seg.size != [h, w] {
                    return Err(field(format!(
                        "annotation {}: segmentation size {:?} differs from image {h}x{w}",
                        a.id, seg.size
                    )));
                }
                Some(
                    rle::decode(&seg.counts, h, w)
                        .map_err(|e| field(format!("annotation {}: segmentation: {e}", a.id)))?,
                )
            }
            (None, false) => None,
            _ => {
                return Err(field(format!(
                    "annotation {}: has_mask={} disagrees with the segmentation field",
                    a.id, a.has_mask
                )))
            }
        };
        by_image
            .entry(a.image_id)
            .or_default()
            .push(InstanceAnnotation {
                bbox,
                category,
                mask,
            });
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for img in &file.images {
        let image = read_png(&dir.join(&img.file_name))?;
        if image.height != img.height || image.width != img.width {
            return Err(field(format!(
                "image {}: png is {}x{}",
                img.id, image.height, image.width
            )));
        }
        let record = Record {
            id: img.id,
            split: img.split,
            image,
            annotations: by_image.remove(&img.id).unwrap_or_default(),
        };
        match img.split {
            Split::Train => train.push(record),
            Split::Val => val.push(record),
        }
    }
    Ok(Dataset {
        config: file.info.config,
        train,
        val,
    })
}
