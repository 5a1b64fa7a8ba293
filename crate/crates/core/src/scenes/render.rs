use super::{Scene, GRID};
use crate::perturb::{Image, CHANNELS};

pub const CELL: usize = 8;
pub const CANVAS: usize = GRID * CELL;
pub const BACKGROUND: [f32; 3] = [0.0, 0.0, 0.0];

pub const COLOR_RGB: [[f32; 3]; 6] = [
    [0.9, 0.1, 0.1],
    [0.1, 0.8, 0.2],
    [0.15, 0.25, 0.95],
    [0.95, 0.9, 0.1],
    [0.9, 0.15, 0.85],
    [0.1, 0.85, 0.9],
];

// 8x8 masks in vocabulary shape order.
const BITMAPS: [[&str; 8]; 12] = [
    // square
    ["########", "########", "########", "########", "########", "########", "########", "########"],
    // circle
    ["........", "..####..", ".######.", ".######.", ".######.", ".######.", "..####..", "........"],
    // triangle
    ["........", "...##...", "...##...", "..####..", "..####..", ".######.", ".######.", "........"],
    // diamond
    ["...##...", "..####..", ".######.", "########", "########", ".######.", "..####..", "...##..."],
    // cross
    ["...##...", "...##...", "...##...", "########", "########", "...##...", "...##...", "...##..."],
    // ring
    ["..####..", ".##..##.", "##....##", "#......#", "#......#", "##....##", ".##..##.", "..####.."],
    // hbar
    ["........", "........", "........", "########", "########", "........", "........", "........"],
    // vbar
    ["...##...", "...##...", "...##...", "...##...", "...##...", "...##...", "...##...", "...##..."],
    // corner
    [".##.....", ".##.....", ".##.....", ".##.....", ".##.....", ".######.", ".######.", "........"],
    // dot
    ["........", "........", "........", "...##...", "...##...", "........", "........", "........"],
    // frame
    ["########", "#......#", "#......#", "#......#", "#......#", "#......#", "#......#", "########"],
    // checker
    ["##..##..", "##..##..", "..##..##", "..##..##", "##..##..", "##..##..", "..##..##", "..##..##"],
];

/// Whether pixel `(y, x)` of a cell belongs to `shape`.
pub fn shape_bitmap(shape: usize, y: usize, x: usize) -> bool {
    BITMAPS[shape][y].as_bytes()[x] == b'#'
}

/// Draws every object as its filled mask, in its color, inside its cell.
pub fn render_scene(scene: &Scene) -> Image {
    let mut data: Vec<f32> = (0..CANVAS * CANVAS).flat_map(|_| BACKGROUND).collect();
    for o in scene.objects() {
        let (cy, cx) = (o.cell / GRID * CELL, o.cell % GRID * CELL);
        let rgb = COLOR_RGB[o.color];
        for y in 0..CELL {
            for x in 0..CELL {
                if shape_bitmap(o.shape, y, x) {
                    let i = ((cy + y) * CANVAS + cx + x) * CHANNELS;
                    data[i..i + CHANNELS].copy_from_slice(&rgb);
                }
            }
        }
    }
    Image::new(CANVAS, CANVAS, data).expect("rendered pixels are in range")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::SceneObject;

    #[test]
    fn bitmaps_are_well_formed_and_distinct() {
        for (i, b) in BITMAPS.iter().enumerate() {
            assert!(b.iter().all(|r| r.len() == 8 && r.bytes().all(|c| c == b'#' || c == b'.')));
            for other in &BITMAPS[..i] {
                assert_ne!(b, other);
            }
        }
    }

    #[test]
    fn empty_scene_is_background() {
        let img = render_scene(&Scene::empty(0));
        assert!(img.data().chunks(3).all(|p| p == BACKGROUND));
    }

    #[test]
    fn red_square_in_the_first_cell() {
        let s = Scene::new(0, vec![SceneObject { shape: 0, color: 0, cell: 0 }]).unwrap();
        let img = render_scene(&s);
        for y in 0..CANVAS {
            for x in 0..CANVAS {
                let want = if y < CELL && x < CELL {
                    COLOR_RGB[0]
                } else {
                    BACKGROUND
                };
                assert_eq!(img.pixel(y, x), want, "({y}, {x})");
            }
        }
        assert_eq!(render_scene(&s), img);
    }
}
