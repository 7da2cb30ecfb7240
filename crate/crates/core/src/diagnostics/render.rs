use std::path::Path;

use image::{Rgb, RgbImage};

use super::CamVolume;
use crate::data::Volume;
use crate::{Error, Result};

const PALETTE: [[u8; 3]; 9] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
];

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Scatter plot of 2D points coloured by class.
pub fn render_tsne_png(points: &[[f64; 2]], classes: &[usize], path: &Path) -> Result<()> {
    const SIZE: u32 = 512;
    const MARGIN: f64 = 16.0;
    let mut img = RgbImage::from_pixel(SIZE, SIZE, Rgb([255, 255, 255]));
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let span = (0..2).map(|a| (hi[a] - lo[a]).max(1e-12)).fold(0.0, f64::max);
    let scale = (SIZE as f64 - 2.0 * MARGIN) / span;
    for (p, &c) in points.iter().zip(classes) {
        let cx = MARGIN + (p[0] - lo[0]) * scale;
        let cy = MARGIN + (p[1] - lo[1]) * scale;
        let colour = Rgb(PALETTE[c % PALETTE.len()]);
        for dy in -2i64..=2 {
            for dx in -2i64..=2 {
                let (x, y) = (cx as i64 + dx, cy as i64 + dy);
                if (0..SIZE as i64).contains(&x) && (0..SIZE as i64).contains(&y) && dx * dx + dy * dy <= 5 {
                    img.put_pixel(x as u32, y as u32, colour);
                }
            }
        }
    }
    save(&img, path)
}

/// Axial slice with the most CAM mass: the volume in grey, the map
/// blended in red.
pub fn render_cam_png(volume: &Volume, cam: &CamVolume, path: &Path) -> Result<()> {
    let [d, h, w] = volume.dims();
    if cam.volume.dims() != [d, h, w] {
        return Err(Error::Shape("CAM and volume dims differ".into()));
    }
    let slice = (0..d)
        .max_by(|&a, &b| {
            let mass = |z: usize| (0..h * w).map(|k| cam.volume.get(z, k / w, k % w) as f64).sum::<f64>();
            mass(a).total_cmp(&mass(b)).then(b.cmp(&a))
        })
        .unwrap_or(0);
    const ZOOM: u32 = 8;
    let mut img = RgbImage::new(w as u32 * ZOOM, h as u32 * ZOOM);
    for y in 0..h {
        for x in 0..w {
            let v = volume.get(slice, y, x).clamp(0.0, 1.0);
            let c = cam.volume.get(slice, y, x).clamp(0.0, 1.0);
            let grey = v * (1.0 - 0.6 * c);
            let px = Rgb([((grey + 0.6 * c) * 255.0) as u8, (grey * 255.0) as u8, (grey * 255.0) as u8]);
            for dy in 0..ZOOM {
                for dx in 0..ZOOM {
                    img.put_pixel(x as u32 * ZOOM + dx, y as u32 * ZOOM + dy, px);
                }
            }
        }
    }
    save(&img, path)
}
