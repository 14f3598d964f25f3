//! Procedural "faces": flat-shaded ellipses and boxes with exact label maps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssae_tensor::Tensor;

use super::{ClassTable, ImageSample, LabelMap};

/// A generated sample plus every painted region, in paint order.
///
/// Later regions overwrite earlier ones; the visible area of a class is its
/// painted set minus the sets painted after it.
#[derive(Clone, Debug)]
pub struct SyntheticFace {
    pub sample: ImageSample,
    pub regions: Vec<(u16, Vec<usize>)>,
}

struct Canvas {
    size: usize,
    rgb: Vec<[f32; 3]>,
    labels: Vec<u16>,
    regions: Vec<(u16, Vec<usize>)>,
}

impl Canvas {
    fn paint(&mut self, class: u16, color: [f32; 3], texture: impl Fn(usize, usize) -> f32, inside: impl Fn(f32, f32) -> bool) {
        let mut pixels = Vec::new();
        for y in 0..self.size {
            for x in 0..self.size {
                if inside(x as f32 + 0.5, y as f32 + 0.5) {
                    let i = y * self.size + x;
                    let t = texture(x, y);
                    self.rgb[i] = color.map(|c| (c + t).clamp(-1.0, 1.0));
                    self.labels[i] = class;
                    pixels.push(i);
                }
            }
        }
        self.regions.push((class, pixels));
    }
}

fn color<R: Rng>(rng: &mut R, base: [f32; 3], spread: f32) -> [f32; 3] {
    base.map(|c| (c + rng.random_range(-spread..spread)).clamp(-0.95, 0.95))
}

/// Pixel-centred ellipse with radii of at least one pixel.
fn ellipse(cx: f32, cy: f32, rx: f32, ry: f32) -> impl Fn(f32, f32) -> bool {
    let (cx, cy) = (cx.floor() + 0.5, cy.floor() + 0.5);
    let (rx, ry) = (rx.max(1.0), ry.max(1.0));
    move |x, y| ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0
}

fn draw_face(size: usize, table: &ClassTable, rng: &mut ChaCha8Rng) -> (Vec<[f32; 3]>, Vec<u16>, Vec<(u16, Vec<usize>)>) {
    let id = |n: &str| table.class_id(n).expect("default class table");
    let s = size as f32;
    let jitter = |rng: &mut ChaCha8Rng, v: f32| v + rng.random_range(-0.02..0.02);

    let bg = color(rng, [0.2, 0.3, 0.4], 0.5);
    let grad = rng.random_range(-0.3..0.3f32);
    let mut canvas = Canvas {
        size,
        rgb: (0..size * size).map(|i| bg.map(|c| c + grad * ((i / size) as f32 / s - 0.5))).collect(),
        labels: vec![id("background"); size * size],
        regions: Vec::new(),
    };

    let face_cx = jitter(rng, 0.5) * s;
    let face_cy = jitter(rng, 0.56) * s;

    // Hair: a large cap behind the face, striped.
    let hair_color = color(rng, [-0.5, -0.6, -0.7], 0.35);
    let stripe = rng.random_range(0.5..2.0f32);
    let phase = rng.random_range(0.0..6.28f32);
    let (hrx, hry) = (rng.random_range(0.36..0.42) * s, rng.random_range(0.34..0.40) * s);
    canvas.paint(
        id("hair"),
        hair_color,
        |x, _| 0.12 * ((x as f32) * stripe + phase).sin(),
        ellipse(face_cx, face_cy - 0.1 * s, hrx, hry),
    );

    // Skin.
    let skin = color(rng, [0.6, 0.25, 0.05], 0.2);
    let (frx, fry) = (rng.random_range(0.25..0.30) * s, rng.random_range(0.30..0.35) * s);
    canvas.paint(id("skin"), skin, |_, y| 0.05 * (y as f32 / s - 0.5), ellipse(face_cx, face_cy, frx, fry));

    let eye_dx = rng.random_range(0.10..0.12) * s;
    let eye_y = face_cy - rng.random_range(0.06..0.09) * s;

    // Brows sit above the eyes and belong to no ROI.
    let brow = color(rng, [-0.6, -0.6, -0.6], 0.2);
    for (name, sign) in [("l_brow", -1.0f32), ("r_brow", 1.0)] {
        let bx = face_cx + sign * eye_dx;
        let by = eye_y - 0.07 * s;
        canvas.paint(id(name), brow, |_, _| 0.0, ellipse(bx, by, 0.06 * s, 0.012 * s));
    }

    // Eyes.
    let iris = color(rng, [-0.3, 0.0, 0.3], 0.5);
    let (erx, ery) = (rng.random_range(0.045..0.06) * s, rng.random_range(0.025..0.035) * s);
    for (name, sign) in [("l_eye", -1.0f32), ("r_eye", 1.0)] {
        canvas.paint(id(name), iris, |_, _| 0.0, ellipse(face_cx + sign * eye_dx, eye_y, erx, ery));
    }

    // Nose: vertical box.
    let nose = skin.map(|c| c - 0.25);
    let (nw, nh) = ((rng.random_range(0.03..0.045) * s).max(1.0), rng.random_range(0.10..0.14) * s);
    let (ncx, ncy) = (face_cx.floor() + 0.5, face_cy + 0.02 * s);
    canvas.paint(id("nose"), nose, |_, _| 0.0, move |x, y| (x - ncx).abs() <= nw && (y - ncy).abs() <= nh / 2.0);

    // Mouth: upper lip, lower lip, then the inner mouth line between them.
    let lip = color(rng, [0.7, -0.3, -0.2], 0.2);
    let (mcx, mcy) = (face_cx, face_cy + rng.random_range(0.17..0.20) * s);
    let (mrx, mry) = (rng.random_range(0.09..0.12) * s, rng.random_range(0.035..0.05) * s);
    let lips = ellipse(mcx, mcy, mrx, mry);
    let my = mcy.floor() + 0.5;
    canvas.paint(id("u_lip"), lip, |_, _| 0.0, |x, y| lips(x, y) && y < my);
    canvas.paint(id("l_lip"), lip.map(|c| c - 0.1), |_, _| 0.0, |x, y| lips(x, y) && y > my);
    let inner = [-0.8, -0.9, -0.9];
    canvas.paint(id("mouth"), inner, |_, _| 0.0, |x, y| lips(x, y) && y == my);

    // Low-amplitude grain over everything.
    for px in canvas.rgb.iter_mut() {
        for c in px.iter_mut() {
            *c = (*c + rng.random_range(-0.02..0.02f32)).clamp(-1.0, 1.0);
        }
    }
    (canvas.rgb, canvas.labels, canvas.regions)
}

/// Deterministic synthetic faces with their painted-region records.
pub fn make_synthetic_faces(n: usize, image_size: usize, seed: u64) -> Vec<SyntheticFace> {
    assert!(n >= 1, "synthetic dataset needs n >= 1");
    let table = ClassTable::celebamask();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let (rgb, labels, regions) = draw_face(image_size, &table, &mut rng);
            let hw = image_size * image_size;
            let image = Tensor::from_fn(&[3, image_size, image_size], |k| rgb[k % hw][k / hw]);
            let sample = ImageSample {
                id: format!("synth_{seed}_{i:05}"),
                image,
                labelmap: LabelMap::new(image_size, image_size, labels),
            };
            SyntheticFace { sample, regions }
        })
        .collect()
}

/// Deterministic synthetic faces, labelled with the default class table.
pub fn make_synthetic_dataset(n: usize, image_size: usize, seed: u64) -> Vec<ImageSample> {
    make_synthetic_faces(n, image_size, seed).into_iter().map(|f| f.sample).collect()
}
