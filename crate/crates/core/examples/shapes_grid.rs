//! Writes a PNG grid of synthetic shape samples, one row per class.
//!
//! Usage: `cargo run --example shapes_grid -- <out.png> [resolution] [per_row]`

use scion_core::fewshot::{synthetic_shapes, ShapesConfig, SHAPE_CLASSES};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let out = args.get(1).map(String::as_str).unwrap_or("shapes.png");
    let res: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(16);
    let per_row: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(12);
    let data = synthetic_shapes(&ShapesConfig {
        train_per_class: per_row,
        test_per_class: 1,
        resolution: res,
        seed: 0,
    })
    .train;
    let cell = res + 2;
    let (w, h) = (per_row * cell, SHAPE_CLASSES.len() * cell);
    let mut grid = image::RgbImage::new(w as u32, h as u32);
    for (img, &label) in data.images.iter().zip(&data.labels) {
        let col = data.images.iter().zip(&data.labels).take_while(|(i, _)| !std::ptr::eq(*i, img)).filter(|(_, &l)| l == label).count();
        for y in 0..res {
            for x in 0..res {
                let px = [img.at(0, y, x), img.at(1, y, x), img.at(2, y, x)];
                grid.put_pixel((col * cell + x) as u32, (label * cell + y) as u32, image::Rgb(px));
            }
        }
    }
    let big = image::imageops::resize(&grid, w as u32 * 4, h as u32 * 4, image::imageops::FilterType::Nearest);
    big.save(out).expect("write png");
}
