//! Deterministic synthetic corpora: coin-like discs carrying simple glyphs
//! ("concepts") plus templated descriptions. Everything the desk-scale tests
//! and the bundled fixture command need runs offline from these.

use std::io;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

/// Glyphs available as synthetic concepts, in canonical order.
pub const GLYPHS: [&str; 4] = ["ring", "cross", "dot", "bars"];

fn dist2(x: i32, y: i32, cx: i32, cy: i32) -> i64 {
    let (dx, dy) = ((x - cx) as i64, (y - cy) as i64);
    dx * dx + dy * dy
}

struct Draw<'a> {
    img: &'a mut GrayImage,
}

impl Draw<'_> {
    fn put(&mut self, x: i32, y: i32, v: u8) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, Luma([v]));
        }
    }

    fn disc(&mut self, cx: i32, cy: i32, r: i32, v: u8) {
        for y in cy - r..=cy + r {
            for x in cx - r..=cx + r {
                if dist2(x, y, cx, cy) <= (r as i64) * (r as i64) {
                    self.put(x, y, v);
                }
            }
        }
    }

    fn ring(&mut self, cx: i32, cy: i32, r_out: i32, r_in: i32, v: u8) {
        for y in cy - r_out..=cy + r_out {
            for x in cx - r_out..=cx + r_out {
                let d = dist2(x, y, cx, cy);
                if d <= (r_out as i64) * (r_out as i64) && d >= (r_in as i64) * (r_in as i64) {
                    self.put(x, y, v);
                }
            }
        }
    }

    fn rect(&mut self, x0: i32, y0: i32, x1: i32, y1: i32, v: u8) {
        for y in y0..=y1 {
            for x in x0..=x1 {
                self.put(x, y, v);
            }
        }
    }
}

/// Draw one glyph centered near (cx, cy) with scale `r`.
fn draw_glyph(img: &mut GrayImage, glyph: &str, cx: i32, cy: i32, r: i32, v: u8) {
    let mut d = Draw { img };
    match glyph {
        "ring" => d.ring(cx, cy, (r * 7) / 10, (r * 4) / 10, v),
        "cross" => {
            let w = (r * 3 / 10).max(1);
            let l = (r * 7) / 10;
            d.rect(cx - l, cy - w, cx + l, cy + w, v);
            d.rect(cx - w, cy - l, cx + w, cy + l, v);
        }
        "dot" => d.disc(cx, cy, (r * 5) / 10, v),
        "bars" => {
            let w = (r / 6).max(1);
            let l = (r * 6) / 10;
            d.rect(cx - l, cy - l, cx + l, cy - l + w, v);
            d.rect(cx - l, cy - w / 2, cx + l, cy + w / 2, v);
            d.rect(cx - l, cy + l - w, cx + l, cy + l, v);
        }
        other => panic!("unknown glyph {}", other),
    }
}

/// One coin face filling most of the frame, glyphs for every present concept.
///
/// Glyph positions are quadrant-anchored with small jitter so that tiny
/// models can learn them while images stay visually varied.
pub fn draw_face(size: u32, present: &[bool], concepts: &[String], rng: &mut ChaCha8Rng) -> GrayImage {
    let mut img = GrayImage::from_pixel(size, size, Luma([18]));
    let c = (size / 2) as i32;
    let r = (size as i32 * 45) / 100;
    {
        let mut d = Draw { img: &mut img };
        d.disc(c, c, r, 105);
    }
    // base texture
    for _ in 0..(size * size / 16) {
        let x = rng.gen_range(0..size as i32);
        let y = rng.gen_range(0..size as i32);
        if dist2(x, y, c, c) <= (r as i64) * (r as i64) {
            let v = 95 + rng.gen_range(0..20) as u8;
            img.put_pixel(x as u32, y as u32, Luma([v]));
        }
    }
    let anchors = [(-1, -1), (1, -1), (-1, 1), (1, 1)];
    for (i, name) in concepts.iter().enumerate() {
        if !present.get(i).copied().unwrap_or(false) {
            continue;
        }
        let (ax, ay) = anchors[i % anchors.len()];
        let off = (r * 2) / 5;
        let jx = rng.gen_range(-(r / 10)..=r / 10);
        let jy = rng.gen_range(-(r / 10)..=r / 10);
        draw_glyph(&mut img, name, c + ax * off + jx, c + ay * off + jy, (r * 3) / 5, 240);
    }
    img
}

/// A labeled single-face set; labels are i.i.d. with the given positive rate.
pub fn labeled_set(
    n: usize,
    size: u32,
    concepts: &[String],
    positive_rate: f64,
    seed: u64,
) -> Vec<(String, GrayImage, Vec<f32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let present: Vec<bool> = (0..concepts.len())
                .map(|_| rng.gen_bool(positive_rate))
                .collect();
            let img = draw_face(size, &present, concepts, &mut rng);
            let labels = present.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            (format!("syn-{:04}", i), img, labels)
        })
        .collect()
}

fn description_for(present: &[bool], concepts: &[String], rng: &mut ChaCha8Rng) -> String {
    let obverse = ["Laureate bust right", "Diademed head left", "Helmeted bust right"];
    let mut text = format!("{}. Rev: figure", obverse[rng.gen_range(0..obverse.len())]);
    let held: Vec<&str> = concepts
        .iter()
        .zip(present)
        .filter(|(_, &p)| p)
        .map(|(c, _)| c.as_str())
        .collect();
    if held.is_empty() {
        text.push_str(" with empty field");
    } else {
        text.push_str(" holding ");
        text.push_str(&held.join(" and "));
    }
    text.push_str(". Near Extremely Fine.");
    text
}

/// Writes a two-sided raw corpus: for each sample an RGB image showing the
/// obverse disc on the left and the reverse disc on the right over a light
/// background, plus a sibling `.txt` description naming the present glyphs.
///
/// Returns the per-sample ground-truth labels (by generation, before any
/// description-based labeling).
pub fn write_two_sided_corpus(
    dir: &Path,
    n: usize,
    concepts: &[String],
    seed: u64,
) -> io::Result<Vec<(String, Vec<u8>)>> {
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut truth = Vec::with_capacity(n);
    for i in 0..n {
        let present: Vec<bool> = (0..concepts.len()).map(|_| rng.gen_bool(0.5)).collect();
        let reverse = draw_face(64, &present, concepts, &mut rng);
        let obverse = draw_face(64, &[], concepts, &mut rng);
        let (w, h) = (152u32, 80u32);
        let mut canvas = RgbImage::from_pixel(w, h, Rgb([247, 247, 245]));
        let paste = |canvas: &mut RgbImage, face: &GrayImage, x0: u32, y0: u32| {
            for (x, y, p) in face.enumerate_pixels() {
                // transplant only the disc, keeping the light backdrop
                if p[0] > 40 {
                    canvas.put_pixel(x0 + x, y0 + y, Rgb([p[0], p[0], p[0]]));
                }
            }
        };
        paste(&mut canvas, &obverse, 8, 8);
        paste(&mut canvas, &reverse, 80, 8);
        let stem = format!("coin-{:04}", i);
        canvas
            .save(dir.join(format!("{}.png", stem)))
            .map_err(|e| io::Error::other(e.to_string()))?;
        std::fs::write(
            dir.join(format!("{}.txt", stem)),
            description_for(&present, concepts, &mut rng),
        )?;
        truth.push((stem, present.iter().map(|&b| u8::from(b)).collect()));
    }
    Ok(truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        GLYPHS.iter().take(n).map(|s| s.to_string()).collect()
    }

    #[test]
    fn faces_are_deterministic_per_seed() {
        let c = names(2);
        let a = labeled_set(3, 32, &c, 0.5, 9);
        let b = labeled_set(3, 32, &c, 0.5, 9);
        for ((_, ia, la), (_, ib, lb)) in a.iter().zip(&b) {
            assert_eq!(ia.as_raw(), ib.as_raw());
            assert_eq!(la, lb);
        }
    }

    #[test]
    fn glyph_presence_changes_pixels() {
        let c = names(1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let with = draw_face(32, &[true], &c, &mut rng);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let without = draw_face(32, &[false], &c, &mut rng);
        assert_ne!(with.as_raw(), without.as_raw());
        // glyphs are drawn bright
        assert!(with.pixels().any(|p| p[0] > 200));
        assert!(!without.pixels().any(|p| p[0] > 200));
    }

    #[test]
    fn corpus_files_and_descriptions() {
        let dir = tempfile::tempdir().unwrap();
        let c = names(2);
        let truth = write_two_sided_corpus(dir.path(), 4, &c, 3).unwrap();
        assert_eq!(truth.len(), 4);
        for (stem, labels) in &truth {
            let txt = std::fs::read_to_string(dir.path().join(format!("{}.txt", stem))).unwrap();
            for (i, name) in c.iter().enumerate() {
                assert_eq!(txt.contains(name.as_str()), labels[i] == 1, "{}: {}", stem, txt);
            }
            assert!(dir.path().join(format!("{}.png", stem)).exists());
        }
    }
}
