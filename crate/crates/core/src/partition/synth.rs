use super::LabeledExample;
use crate::imaging::Image;
use rand::Rng;
use std::f64::consts::PI;

const SIDE: usize = 28;

type Stroke = Vec<(f64, f64)>;

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64, from: f64, to: f64) -> Stroke {
    let steps = 16;
    (0..=steps)
        .map(|i| {
            let a = from + (to - from) * i as f64 / steps as f64;
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect()
}

/// Glyph skeletons in a unit box, x to the right and y downwards.
fn template(digit: usize) -> Vec<Stroke> {
    match digit {
        0 => vec![ellipse(0.5, 0.5, 0.45, 0.5, 0.0, 2.0 * PI)],
        1 => vec![vec![(0.3, 0.2), (0.55, 0.0), (0.55, 1.0)]],
        2 => vec![vec![(0.0, 0.15), (0.45, 0.0), (0.95, 0.15), (1.0, 0.4), (0.0, 1.0), (1.0, 1.0)]],
        3 => vec![vec![(0.0, 0.0), (1.0, 0.0), (0.45, 0.45), (1.0, 0.7), (0.55, 1.0), (0.0, 0.9)]],
        4 => vec![vec![(0.75, 1.0), (0.75, 0.0), (0.0, 0.65), (1.0, 0.65)]],
        5 => vec![vec![(1.0, 0.0), (0.05, 0.0), (0.0, 0.45), (0.75, 0.42), (1.0, 0.7), (0.75, 1.0), (0.0, 0.95)]],
        6 => vec![
            vec![(0.85, 0.0), (0.25, 0.35), (0.05, 0.75)],
            ellipse(0.5, 0.72, 0.45, 0.28, PI, 3.0 * PI),
        ],
        7 => vec![vec![(0.0, 0.0), (1.0, 0.0), (0.4, 1.0)]],
        8 => vec![
            ellipse(0.5, 0.24, 0.35, 0.24, 0.0, 2.0 * PI),
            ellipse(0.5, 0.72, 0.45, 0.28, 0.0, 2.0 * PI),
        ],
        _ => vec![
            ellipse(0.5, 0.3, 0.42, 0.3, 0.0, 2.0 * PI),
            vec![(0.92, 0.3), (0.7, 1.0)],
        ],
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Renders one jittered glyph of `digit`.
pub fn render_digit<R: Rng + ?Sized>(digit: usize, rng: &mut R) -> Image {
    let scale = rng.random_range(0.8..1.05);
    let (w, h) = (13.0 * scale, 19.0 * scale);
    let cx = 14.0 + rng.random_range(-2.0..2.0);
    let cy = 14.0 + rng.random_range(-2.0..2.0);
    let shear = rng.random_range(-0.25..0.25);
    let thickness = rng.random_range(1.0..2.0);
    let ink = rng.random_range(0.8..1.0);
    let wobble = 0.06;
    let strokes: Vec<Stroke> = template(digit)
        .into_iter()
        .map(|s| {
            s.into_iter()
                .map(|(u, v)| {
                    let u = u + rng.random_range(-wobble..wobble);
                    let v = v + rng.random_range(-wobble..wobble);
                    (cx + (u - 0.5) * w + shear * (0.5 - v) * h, cy + (v - 0.5) * h)
                })
                .collect()
        })
        .collect();
    let mut pixels = vec![0.0; SIDE * SIDE];
    for (idx, px) in pixels.iter_mut().enumerate() {
        let p = ((idx % SIDE) as f64 + 0.5, (idx / SIDE) as f64 + 0.5);
        let d = strokes
            .iter()
            .flat_map(|s| s.windows(2).map(move |seg| segment_distance(p, seg[0], seg[1])))
            .fold(f64::INFINITY, f64::min);
        *px = ink * (1.0 - (d - thickness * 0.5).max(0.0)).clamp(0.0, 1.0);
    }
    Image::new(SIDE, SIDE, pixels).expect("28x28 glyph")
}

/// `n` synthetic 28x28 digit images; example `i` has label `i % 10`.
pub fn synth_digits<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<LabeledExample> {
    (0..n)
        .map(|i| {
            let label = i % 10;
            LabeledExample { image: render_digit(label, rng), label }
        })
        .collect()
}
