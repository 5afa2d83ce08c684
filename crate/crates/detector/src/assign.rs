//! Region-to-box assignment.

use ovd_core::geometry::BBox;

/// For every cell, the index of the box it is a positive for.
///
/// A cell is a candidate for a box when its centre lies inside the box and
/// within `radius` strides of the box centre; the cell holding the box
/// centre is always a candidate. Competing boxes go to the smallest one.
pub fn assign(anchors: &[[f64; 2]], stride: f64, boxes: &[BBox], radius: f64) -> Vec<Option<usize>> {
    let reach = radius * stride;
    let mut out: Vec<Option<usize>> = vec![None; anchors.len()];
    let mut cost = vec![f64::INFINITY; anchors.len()];
    let mut offer = |cell: usize, g: usize, out: &mut Vec<Option<usize>>| {
        let area = boxes[g].area();
        if area < cost[cell] {
            cost[cell] = area;
            out[cell] = Some(g);
        }
    };
    for (g, b) in boxes.iter().enumerate() {
        let (cx, cy) = b.center();
        let mut centre_cell = 0;
        let mut best = f64::INFINITY;
        for (k, a) in anchors.iter().enumerate() {
            let d = (a[0] - cx).powi(2) + (a[1] - cy).powi(2);
            if d < best {
                best = d;
                centre_cell = k;
            }
            if b.contains_point(a[0], a[1]) && (a[0] - cx).abs() <= reach && (a[1] - cy).abs() <= reach {
                offer(k, g, &mut out);
            }
        }
        if !anchors.is_empty() {
            offer(centre_cell, g, &mut out);
        }
    }
    out
}
