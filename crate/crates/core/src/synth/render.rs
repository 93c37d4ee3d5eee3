//! Deterministic rasterizer. Two camera views: view 0 is the identity
//! overhead camera, view 1 an oblique analog (rotation + zoom about the
//! frame center). Pixels are sampled 2x2 per cell for soft edges; all
//! arithmetic is f64, so identical scenes render to identical bytes.

use super::{Scene, SceneObject, Shape, BACKGROUND, COLOR_RGB};
use crate::latent::ImageFrame;
use ndarray::Array3;

/// End-effector marker drawn over the scene.
#[derive(Debug, Clone, Copy)]
pub struct EePose {
    pub pos: (f64, f64),
    /// Gripper command in `[-1, 1]`; closed (< 0) renders darker.
    pub gripper: f64,
}

const EE_RADIUS: f64 = 0.035;
const VIEW1_ANGLE: f64 = 0.35; // radians
const VIEW1_SCALE: f64 = 0.88;

fn view_to_scene(view: usize, p: (f64, f64)) -> (f64, f64) {
    match view {
        0 => p,
        1 => {
            let (cx, cy) = (0.5, 0.5);
            let (dx, dy) = (p.0 - cx, p.1 - cy);
            let (dx, dy) = (dx / VIEW1_SCALE, dy / VIEW1_SCALE);
            let (s, c) = VIEW1_ANGLE.sin_cos();
            (cx + c * dx - s * dy, cy + s * dx + c * dy)
        }
        _ => p,
    }
}

pub(crate) fn object_contains(o: &SceneObject, p: (f64, f64)) -> bool {
    inside_object(o, p)
}

fn inside_object(o: &SceneObject, p: (f64, f64)) -> bool {
    let (mut dx, mut dy) = (p.0 - o.pos.0, p.1 - o.pos.1);
    if o.orientation != 0.0 {
        let (s, c) = (-o.orientation).sin_cos();
        let (rx, ry) = (c * dx - s * dy, s * dx + c * dy);
        dx = rx;
        dy = ry;
    }
    match o.shape {
        Shape::Square => dx.abs() <= o.size && dy.abs() <= o.size,
        Shape::Circle => dx * dx + dy * dy <= o.size * o.size,
        Shape::Triangle => {
            // upward triangle with vertices on the bounding circle
            let v0 = (0.0, -o.size);
            let v1 = (-0.866 * o.size, 0.5 * o.size);
            let v2 = (0.866 * o.size, 0.5 * o.size);
            let sign = |a: (f64, f64), b: (f64, f64)| -> f64 {
                (dx - b.0) * (a.1 - b.1) - (a.0 - b.0) * (dy - b.1)
            };
            let d0 = sign(v0, v1);
            let d1 = sign(v1, v2);
            let d2 = sign(v2, v0);
            let has_neg = d0 < 0.0 || d1 < 0.0 || d2 < 0.0;
            let has_pos = d0 > 0.0 || d1 > 0.0 || d2 > 0.0;
            !(has_neg && has_pos)
        }
    }
}

fn sample_color(scene: &Scene, ee: Option<&EePose>, p: (f64, f64)) -> [f64; 3] {
    // end-effector on top
    if let Some(e) = ee {
        let d = (p.0 - e.pos.0).abs() + (p.1 - e.pos.1).abs();
        if d <= EE_RADIUS {
            let v = if e.gripper < 0.0 { 0.55 } else { 1.0 };
            return [v, v, v];
        }
    }
    for o in &scene.objects {
        if inside_object(o, p) {
            return COLOR_RGB[o.color];
        }
    }
    if scene.target_zone.contains(p) {
        let z = COLOR_RGB[scene.target_zone.color];
        return [
            0.55 * z[0] + 0.45 * BACKGROUND[0],
            0.55 * z[1] + 0.45 * BACKGROUND[1],
            0.55 * z[2] + 0.45 * BACKGROUND[2],
        ];
    }
    BACKGROUND
}

/// Rasterize one view at `res x res`, optionally drawing the end-effector.
pub fn render_with_ee(scene: &Scene, view: usize, res: usize, ee: Option<&EePose>) -> ImageFrame {
    let mut pixels = Array3::<f64>::zeros((res, res, 3));
    let sub = [0.25, 0.75];
    for i in 0..res {
        for j in 0..res {
            let mut acc = [0.0; 3];
            for si in sub {
                for sj in sub {
                    let p_pix = ((j as f64 + sj) / res as f64, (i as f64 + si) / res as f64);
                    let p = view_to_scene(view, p_pix);
                    let c = sample_color(scene, ee, p);
                    acc[0] += c[0];
                    acc[1] += c[1];
                    acc[2] += c[2];
                }
            }
            for ch in 0..3 {
                pixels[[i, j, ch]] = acc[ch] / 4.0;
            }
        }
    }
    ImageFrame {
        pixels,
        camera_id: view,
    }
}

/// Rasterize a bare scene (no end-effector).
pub fn render(scene: &Scene, view: usize, res: usize) -> ImageFrame {
    render_with_ee(scene, view, res, None)
}

/// Pixel-mass centroid of everything brighter than the background; the test
/// oracle for object placement.
pub fn brightness_centroid(frame: &ImageFrame) -> (f64, f64) {
    let (h, w, _) = frame.pixels.dim();
    let mut mass = 0.0;
    let mut cy = 0.0;
    let mut cx = 0.0;
    for i in 0..h {
        for j in 0..w {
            let b = frame.pixels[[i, j, 0]] + frame.pixels[[i, j, 1]] + frame.pixels[[i, j, 2]];
            let bg = BACKGROUND.iter().sum::<f64>();
            let m = (b - bg).max(0.0);
            mass += m;
            cy += m * i as f64;
            cx += m * j as f64;
        }
    }
    if mass == 0.0 {
        return (0.0, 0.0);
    }
    (cx / mass, cy / mass)
}

#[cfg(test)]
mod tests {
    use super::super::{generate_scene, Scene, SceneConfig, SceneObject, Shape, Zone};
    use super::*;

    #[test]
    fn rendering_is_deterministic() {
        let scene = generate_scene(3, &SceneConfig::default());
        let a = render(&scene, 0, 32);
        let b = render(&scene, 0, 32);
        assert_eq!(a.pixels, b.pixels);
        let c = render(&scene, 1, 32);
        assert_ne!(a.pixels, c.pixels, "views must differ");
    }

    #[test]
    fn empty_scene_is_background_only() {
        let scene = Scene {
            objects: vec![],
            target_zone: Zone {
                pos: (2.0, 2.0), // off-frame
                half: 0.1,
                color: 3,
            },
            seed: 0,
        };
        let f = render(&scene, 0, 16);
        for v in f.pixels.iter() {
            assert!((v - BACKGROUND[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn centered_object_centroid_within_one_pixel() {
        let scene = Scene {
            objects: vec![SceneObject {
                shape: Shape::Circle,
                color: 0,
                pos: (0.5, 0.5),
                size: 0.12,
                orientation: 0.0,
            }],
            target_zone: Zone {
                pos: (2.0, 2.0),
                half: 0.1,
                color: 3,
            },
            seed: 0,
        };
        let res = 64;
        let f = render(&scene, 0, res);
        let (cx, cy) = brightness_centroid(&f);
        let center = (res as f64 - 1.0) / 2.0 + 0.5 - 0.5; // pixel-center of 0.5
        assert!((cx - 31.5).abs() <= 1.0, "cx = {cx}");
        assert!((cy - 31.5).abs() <= 1.0, "cy = {cy}");
        let _ = center;
    }

    #[test]
    fn gripper_state_changes_marker() {
        let scene = generate_scene(4, &SceneConfig::default());
        let open = render_with_ee(
            &scene,
            0,
            32,
            Some(&EePose {
                pos: (0.5, 0.5),
                gripper: 1.0,
            }),
        );
        let closed = render_with_ee(
            &scene,
            0,
            32,
            Some(&EePose {
                pos: (0.5, 0.5),
                gripper: -1.0,
            }),
        );
        assert_ne!(open.pixels, closed.pixels);
    }
}
