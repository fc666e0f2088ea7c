use super::{Image, Scene, ShapeKind};

/// Rasterizes each object as a solid shape centred in its grid cell on a
/// black background. Pixels are tested at their centres, so values are
/// exactly 0 or the color's channel value.
pub fn render(scene: &Scene, size: usize) -> Image {
    let mut img = Image::zeros(size, size);
    let cell = size as f64 / scene.grid as f64;
    for obj in &scene.objects {
        let cx = (obj.col as f64 + 0.5) * cell;
        let cy = (obj.row as f64 + 0.5) * cell;
        let rgb = obj.color.rgb();
        let y0 = (obj.row as f64 * cell) as usize;
        let x0 = (obj.col as f64 * cell) as usize;
        let y1 = (((obj.row + 1) as f64 * cell) as usize).min(size);
        let x1 = (((obj.col + 1) as f64 * cell) as usize).min(size);
        for y in y0..y1 {
            for x in x0..x1 {
                // offsets normalised by cell size, in [-0.5, 0.5]
                let u = (x as f64 + 0.5 - cx) / cell;
                let v = (y as f64 + 0.5 - cy) / cell;
                if inside(obj.shape, u, v) {
                    for (c, &val) in rgb.iter().enumerate() {
                        img.set(c, y, x, val);
                    }
                }
            }
        }
    }
    img
}

fn inside(shape: ShapeKind, u: f64, v: f64) -> bool {
    match shape {
        ShapeKind::Circle => u * u + v * v <= 0.36 * 0.36,
        ShapeKind::Square => u.abs() <= 0.3 && v.abs() <= 0.3,
        // apex up, base at v = 0.32
        ShapeKind::Triangle => v <= 0.32 && v >= -0.36 && u.abs() <= (v + 0.36) * 0.55,
        ShapeKind::Cross => (u.abs() <= 0.1 && v.abs() <= 0.38) || (v.abs() <= 0.1 && u.abs() <= 0.38),
    }
}
