use super::{Object, Scene, Shape, TaskConfig, CELL_PIXELS, DEPTH_MAX, DEPTH_MIN, IMAGE_SIZE};
use crate::error::{GladError, Result};

/// Table color.
pub const BACKGROUND: [f64; 3] = [0.45, 0.4, 0.35];

/// Row-major `height × width × 3` image with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Flattened `patch × patch × 3` blocks in raster order of patches.
    pub fn patches(&self, patch: usize) -> Result<Vec<f32>> {
        if patch == 0 || self.height % patch != 0 || self.width % patch != 0 {
            return Err(GladError::Config(format!(
                "{}x{} image does not tile into {patch}-pixel patches",
                self.height, self.width
            )));
        }
        let (ph, pw) = (self.height / patch, self.width / patch);
        let mut out = Vec::with_capacity(self.data.len());
        for py in 0..ph {
            for px in 0..pw {
                for y in py * patch..(py + 1) * patch {
                    let start = (y * self.width + px * patch) * 3;
                    out.extend_from_slice(&self.data[start..start + patch * 3]);
                }
            }
        }
        Ok(out)
    }

    /// Mean of the three channels per pixel.
    pub fn gray(&self) -> Vec<f32> {
        self.data.chunks_exact(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect()
    }
}

/// Glyph test at continuous pixel coordinates.
pub(crate) fn covers(o: &Object, px: f64, py: f64) -> bool {
    let c = CELL_PIXELS as f64;
    let cx = o.cell.0 as f64 * c + c / 2.0;
    let cy = o.cell.1 as f64 * c + c / 2.0;
    let (dx, dy) = (px - cx, py - cy);
    let r = o.size.radius();
    match o.shape {
        Shape::Cube => dx.abs() <= r && dy.abs() <= r,
        Shape::Sphere => dx * dx + dy * dy <= r * r,
        Shape::Tray => dx.abs() <= r + 1.0 && dy.abs() <= r / 2.0,
    }
}

pub(crate) fn shade(depth: f64, strength: f64) -> f64 {
    1.0 - strength * (depth - DEPTH_MIN) / (DEPTH_MAX - DEPTH_MIN)
}

pub fn render(scene: &Scene) -> Image {
    render_with(scene, &TaskConfig::default())
}

/// Flat-shaded rasterization: each object is a glyph centred in its cell,
/// scaled by size and darkened with depth.
pub fn render_with(scene: &Scene, cfg: &TaskConfig) -> Image {
    let n = IMAGE_SIZE;
    let mut data = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        for x in 0..n {
            let cell = (x / CELL_PIXELS, y / CELL_PIXELS);
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let rgb = match scene.object_at(cell) {
                Some(o) if covers(o, px, py) => {
                    let s = shade(o.depth, cfg.shade_strength);
                    o.color.rgb().map(|c| c * s)
                }
                _ => BACKGROUND,
            };
            data.extend(rgb.iter().map(|&c| c as f32));
        }
    }
    Image {
        height: n,
        width: n,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{generate_scene, Color};

    #[test]
    fn empty_table_is_background() {
        let img = render(&Scene {
            seed: 0,
            objects: vec![],
        });
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                assert_eq!(img.pixel(y, x), BACKGROUND.map(|c| c as f32));
            }
        }
    }

    #[test]
    fn color_swap_is_local() {
        for seed in 0..200 {
            let (scene, _) = generate_scene(seed).unwrap();
            let mut swapped = scene.clone();
            let (c0, c1) = (scene.objects[0].color, scene.objects[1].color);
            swapped.objects[0].color = c1;
            swapped.objects[1].color = c0;
            let (a, b) = (render(&scene), render(&swapped));
            for y in 0..IMAGE_SIZE {
                for x in 0..IMAGE_SIZE {
                    if a.pixel(y, x) == b.pixel(y, x) {
                        continue;
                    }
                    let cell = (x / CELL_PIXELS, y / CELL_PIXELS);
                    let on_glyph = scene.objects[..2]
                        .iter()
                        .any(|o| o.cell == cell && covers(o, x as f64 + 0.5, y as f64 + 0.5));
                    assert!(on_glyph, "seed {seed}: pixel ({x},{y}) changed");
                }
            }
        }
    }

    #[test]
    fn injective_over_geometry() {
        let mut compared = 0;
        for seed in 0..1_000u64 {
            let (a, _) = generate_scene(seed).unwrap();
            let (mut b, _) = generate_scene(seed + 10_000).unwrap();
            // fixed appearance: copy colors and sizes index by index
            b.objects.truncate(a.objects.len());
            for (ob, oa) in b.objects.iter_mut().zip(&a.objects) {
                ob.color = oa.color;
                ob.size = oa.size;
            }
            if a.objects.len() != b.objects.len() || a.same_geometry(&b) {
                continue;
            }
            compared += 1;
            assert_ne!(render(&a), render(&b), "seeds {seed}");
        }
        assert!(compared > 500);
    }

    #[test]
    fn depth_darkens() {
        let mut scene = Scene {
            seed: 0,
            objects: vec![crate::task::Object {
                shape: Shape::Cube,
                color: Color::Green,
                size: crate::task::Size::Large,
                cell: (1, 1),
                depth: 0.2,
            }],
        };
        let near = render(&scene).pixel(12, 12);
        scene.objects[0].depth = 0.9;
        let far = render(&scene).pixel(12, 12);
        assert!(far[1] < near[1]);
        assert_eq!(near[1], 1.0);
    }

    #[test]
    fn patches_are_cell_blocks() {
        let (scene, _) = generate_scene(4).unwrap();
        let img = render(&scene);
        let p = img.patches(8).unwrap();
        assert_eq!(p.len(), 16 * 192);
        // patch 5 is cell (1, 1); its first pixel is image pixel (8, 8)
        assert_eq!(&p[5 * 192..5 * 192 + 3], &img.pixel(8, 8));
        assert!(img.patches(5).is_err());
    }
}
