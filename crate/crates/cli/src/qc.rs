//! PNG overlays of labels on axial slices of the structural image.

use std::path::Path;

use image::{Rgb, RgbImage};
use jointseg::volume::Volume;
use jointseg::{Error, Result};

/// At most this many slices are written.
const MAX_SLICES: usize = 16;
const ALPHA: f64 = 0.45;

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

fn window(values: &[f64]) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    let at = |q: f64| v[((v.len() - 1) as f64 * q).round() as usize];
    let (lo, hi) = (at(0.01), at(0.99));
    if hi > lo {
        (lo, hi)
    } else {
        (lo, lo + 1.0)
    }
}

pub fn write_overlays(structural: &Volume, labels: &Volume, background: &[bool], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| crate::io_error(dir, e))?;
    let s = structural.channel(0)?;
    let [nx, ny, nz] = s.grid().dims();
    let (lo, hi) = window(s.data());
    let step = nz.div_ceil(MAX_SLICES).max(1);
    for z in (0..nz).step_by(step) {
        let mut img = RgbImage::new(nx as u32, ny as u32);
        for y in 0..ny {
            for x in 0..nx {
                let g = ((s.get([x, y, z], 0) - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0;
                let mut px = [g; 3];
                let l = labels.get([x, y, z], 0) as usize;
                if l > 0 && !background.get(l - 1).copied().unwrap_or(false) {
                    let c = PALETTE[(l - 1) % PALETTE.len()];
                    for k in 0..3 {
                        px[k] = (1.0 - ALPHA) * px[k] + ALPHA * c[k] as f64;
                    }
                }
                // image rows run top-down, world y runs up
                img.put_pixel(x as u32, (ny - 1 - y) as u32, Rgb(px.map(|v| v.round() as u8)));
            }
        }
        let path = dir.join(format!("axial_{z:03}.png"));
        img.save(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}
