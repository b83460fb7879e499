//! Text and image renderings of a mask.
//!
//! Text: `#` marks a masked token, `.` a visible one and `_` padding. Images
//! are binary PPM with masked tokens black, visible white and padding grey.

use sma_core::masker::MaskSpec;

/// Row width for a 2-D view: the explicit width if it divides `n`, else the
/// side of a square `n`, else `None`.
pub fn grid_width(n: usize, explicit: Option<usize>) -> Option<usize> {
    if let Some(w) = explicit {
        return (w > 0 && n.is_multiple_of(w)).then_some(w);
    }
    let side = (n as f64).sqrt().round() as usize;
    (side > 1 && side * side == n).then_some(side)
}

fn cell(mask: &MaskSpec, pads: &[bool], i: usize) -> u8 {
    if pads[i] {
        b'_'
    } else if mask.additive[i] == f64::NEG_INFINITY {
        b'#'
    } else {
        b'.'
    }
}

/// One line per grid row, or a single line without a grid.
pub fn render_text(mask: &MaskSpec, pads: &[bool], width: Option<usize>) -> String {
    let n = mask.len();
    let w = width.unwrap_or(n.max(1));
    let mut s = String::with_capacity(n + n / w + 1);
    for row in (0..n).collect::<Vec<_>>().chunks(w) {
        s.extend(row.iter().map(|&i| cell(mask, pads, i) as char));
        s.push('\n');
    }
    s
}

pub fn render_ppm(mask: &MaskSpec, pads: &[bool], width: usize) -> Vec<u8> {
    let n = mask.len();
    let mut img = format!("P6\n{width} {}\n255\n", n / width).into_bytes();
    for i in 0..n {
        let v = match cell(mask, pads, i) {
            b'#' => 0,
            b'.' => 255,
            _ => 128,
        };
        img.extend_from_slice(&[v, v, v]);
    }
    img
}
