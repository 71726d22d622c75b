//! Procedural desk-scale dataset generator.
//!
//! Class determines a geometric motif and a base hue; the case id determines
//! nuisance style (background hue shift, texture phase, motif placement);
//! per-image pixel noise makes every file unique. Classes are separable by
//! mean color plus motif statistics, which is what makes the generated sets
//! usable as a training/evaluation substrate.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder};
use rand::Rng;

use super::{write_manifest, DatasetError, DatasetIndex, ImageEntry};
use crate::seeds;

/// Generated image side length; leaves room for random 128-crops.
pub const SYNTH_SIDE: u32 = 160;

#[derive(Debug, Clone, Copy)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub cases_per_class: usize,
    pub images_per_case: usize,
    pub seed: u64,
}

/// Generate the dataset under `out_dir` and write `out_dir/manifest.csv`.
/// Identical specs produce byte-identical files.
pub fn generate_synthetic(
    spec: SyntheticSpec,
    out_dir: &Path,
) -> Result<DatasetIndex, DatasetError> {
    if spec.n_classes == 0 || spec.cases_per_class == 0 || spec.images_per_case == 0 {
        return Err(DatasetError::Malformed {
            line: 0,
            message: "synthetic generation requires all counts >= 1".into(),
        });
    }
    fs::create_dir_all(out_dir).map_err(|e| DatasetError::Unwritable {
        path: out_dir.to_path_buf(),
        source: e,
    })?;

    let mut entries = Vec::new();
    let mut classes = Vec::new();
    for class in 0..spec.n_classes {
        let class_name = format!("class{class:02}");
        classes.push(class_name.clone());
        for case in 0..spec.cases_per_class {
            let case_id = format!("{class_name}_case{case:02}");
            let dir = out_dir.join("images").join(&class_name).join(&case_id);
            fs::create_dir_all(&dir).map_err(|e| DatasetError::Unwritable {
                path: dir.clone(),
                source: e,
            })?;
            let style = CaseStyle::derive(spec.seed, class, case);
            for img in 0..spec.images_per_case {
                let image_id = format!("c{class:02}_k{case:02}_i{img:03}");
                let rel = PathBuf::from("images")
                    .join(&class_name)
                    .join(&case_id)
                    .join(format!("{image_id}.png"));
                let pixels = render(spec.seed, class, case, img, spec.n_classes, &style);
                write_png(&out_dir.join(&rel), &pixels)?;
                entries.push(ImageEntry {
                    image_id,
                    class_index: class,
                    case_id: case_id.clone(),
                    path: rel,
                });
            }
        }
    }

    let index = DatasetIndex::new(entries, classes, out_dir.to_path_buf())?;
    write_manifest(&index, &out_dir.join("manifest.csv"))?;
    Ok(index)
}

/// Case-level nuisance parameters, derived deterministically from the seed.
struct CaseStyle {
    hue_shift: f64,
    phase: f64,
    center_dx: f64,
    center_dy: f64,
}

impl CaseStyle {
    fn derive(seed: u64, class: usize, case: usize) -> Self {
        let mut rng = seeds::stream(
            seed,
            &[seeds::domain::SYNTHETIC, 1, class as u64, case as u64],
        );
        CaseStyle {
            hue_shift: rng.gen_range(-14.0..=14.0),
            phase: rng.gen_range(0.0..1.0),
            center_dx: rng.gen_range(-10.0..=10.0),
            center_dy: rng.gen_range(-10.0..=10.0),
        }
    }
}

fn render(
    seed: u64,
    class: usize,
    case: usize,
    img: usize,
    n_classes: usize,
    style: &CaseStyle,
) -> Vec<u8> {
    let side = SYNTH_SIDE as usize;
    let mut rng = seeds::stream(
        seed,
        &[
            seeds::domain::SYNTHETIC,
            2,
            class as u64,
            case as u64,
            img as u64,
        ],
    );

    let base_hue = 360.0 * class as f64 / n_classes as f64 + style.hue_shift;
    let background = hsv_to_rgb(base_hue, 0.55, 0.78);
    let foreground = hsv_to_rgb(base_hue + 180.0, 0.80, 0.42);

    let cx = side as f64 / 2.0 + style.center_dx;
    let cy = side as f64 / 2.0 + style.center_dy;
    let motif = class % 10;

    let mut data = vec![0u8; side * side * 3];
    for y in 0..side {
        for x in 0..side {
            let on = motif_mask(motif, x as f64, y as f64, cx, cy, style.phase);
            let color = if on { foreground } else { background };
            let i = (y * side + x) * 3;
            for c in 0..3 {
                let noise: i16 = rng.gen_range(-10..=10);
                data[i + c] = (color[c] as i16 + noise).clamp(0, 255) as u8;
            }
        }
    }
    data
}

/// Whether pixel (x, y) belongs to the class motif.
fn motif_mask(motif: usize, x: f64, y: f64, cx: f64, cy: f64, phase: f64) -> bool {
    let dx = x - cx;
    let dy = y - cy;
    let r = (dx * dx + dy * dy).sqrt();
    let period = 24.0;
    let wave = |v: f64| ((v / period + phase).rem_euclid(1.0)) < 0.5;
    match motif {
        0 => r < 42.0,                                    // filled disc
        1 => dx.abs().max(dy.abs()) < 48.0 && dx.abs().max(dy.abs()) > 32.0, // square frame
        2 => wave(y),                                     // horizontal stripes
        3 => wave(x),                                     // vertical stripes
        4 => wave(x + y),                                 // diagonal stripes
        5 => (28.0..44.0).contains(&r),                   // ring
        6 => dx.abs() < 12.0 || dy.abs() < 12.0,          // cross
        7 => wave(x) && wave(y),                          // dot grid
        8 => wave(x) ^ wave(y),                           // checkerboard
        _ => dy > -40.0 && dy < 40.0 && dx.abs() < (dy + 40.0) * 0.55, // triangle
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [
        (r * 255.0).round() as u8,
        (g * 255.0).round() as u8,
        (b * 255.0).round() as u8,
    ]
}

fn write_png(path: &Path, rgb: &[u8]) -> Result<(), DatasetError> {
    let file = fs::File::create(path).map_err(|e| DatasetError::Unwritable {
        path: path.to_path_buf(),
        source: e,
    })?;
    let encoder = PngEncoder::new(BufWriter::new(file));
    encoder
        .write_image(rgb, SYNTH_SIDE, SYNTH_SIDE, ExtendedColorType::Rgb8)
        .map_err(|e| DatasetError::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}
