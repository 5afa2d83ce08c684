//! Box overlays for the `visualize` command.

use image::{Rgb, RgbImage};
use ovd_core::geometry::BBox;

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

pub fn class_colour(class: usize) -> Rgb<u8> {
    Rgb(PALETTE[class % PALETTE.len()])
}

/// Rectangle outline `thickness` pixels wide, clipped to the image.
pub fn draw_box(img: &mut RgbImage, bbox: &BBox, colour: Rgb<u8>, thickness: u32) {
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return;
    }
    let clamp = |v: f64, hi: u32| (v.round().max(0.0) as u32).min(hi - 1);
    let (x0, y0) = (clamp(bbox.x_min, w), clamp(bbox.y_min, h));
    let (x1, y1) = (clamp(bbox.x_max, w), clamp(bbox.y_max, h));
    for t in 0..thickness {
        for x in x0..=x1 {
            for y in [y0.saturating_add(t).min(y1), y1.saturating_sub(t).max(y0)] {
                img.put_pixel(x, y, colour);
            }
        }
        for y in y0..=y1 {
            for x in [x0.saturating_add(t).min(x1), x1.saturating_sub(t).max(x0)] {
                img.put_pixel(x, y, colour);
            }
        }
    }
}

/// Bar along the top edge whose length shows the confidence.
pub fn draw_confidence(img: &mut RgbImage, bbox: &BBox, confidence: f64, colour: Rgb<u8>) {
    let (w, h) = img.dimensions();
    let y = (bbox.y_min.round() as i64 - 3).clamp(0, h as i64 - 1) as u32;
    let x0 = bbox.x_min.round().max(0.0) as u32;
    let len = ((bbox.x_max - bbox.x_min) * confidence.clamp(0.0, 1.0)).round() as u32;
    for x in x0..(x0 + len).min(w) {
        img.put_pixel(x, y, colour);
        if y + 1 < h {
            img.put_pixel(x, y + 1, colour);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outline_only() {
        let mut img = RgbImage::new(10, 10);
        draw_box(&mut img, &BBox::new(2.0, 2.0, 7.0, 6.0).unwrap(), Rgb([255, 0, 0]), 1);
        assert_eq!(img.get_pixel(2, 2), &Rgb([255, 0, 0]));
        assert_eq!(img.get_pixel(7, 6), &Rgb([255, 0, 0]));
        assert_eq!(img.get_pixel(4, 4), &Rgb([0, 0, 0]));
        assert_eq!(img.get_pixel(8, 8), &Rgb([0, 0, 0]));
        let painted = img.pixels().filter(|p| p.0[0] == 255).count();
        assert_eq!(painted, 2 * 6 + 2 * 3);
    }

    #[test]
    fn boxes_outside_are_clipped() {
        let mut img = RgbImage::new(5, 5);
        draw_box(&mut img, &BBox::new(-3.0, -3.0, 40.0, 40.0).unwrap(), Rgb([1, 2, 3]), 2);
        assert_eq!(img.get_pixel(0, 0), &Rgb([1, 2, 3]));
        assert_eq!(img.get_pixel(2, 2), &Rgb([0, 0, 0]));
    }
}
