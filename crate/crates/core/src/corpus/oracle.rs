//! Pixel-level ground truth: recover scenes from renders and classify an
//! image pair against the whole finite edit space.

use iclip_numerics::Tensor;

use super::scene::{enumerate_edits, render, SceneSpec, Shape, ShapeKind, CELL, GRID, IMG, PALETTE};
use super::tokenizer::Tokens;

fn palette_index(px: &[f32]) -> Option<usize> {
    PALETTE.iter().position(|c| c[..] == px[..])
}

fn pixel(img: &Tensor, y: usize, x: usize) -> &[f32] {
    let i = (y * IMG + x) * 3;
    &img.data()[i..i + 3]
}

/// Inverts [`render`] exactly; `None` if the image is not a clean render.
pub fn parse_scene(img: &Tensor) -> Option<SceneSpec> {
    if img.shape() != [IMG, IMG, 3] {
        return None;
    }
    let background = palette_index(pixel(img, 0, 0))?;
    let mut shapes = Vec::new();
    for cell in 0..GRID * GRID {
        let (cy, cx) = ((cell / GRID) * CELL, (cell % GRID) * CELL);
        let mut color = None;
        let mut mask = [false; CELL * CELL];
        for y in 0..CELL {
            for x in 0..CELL {
                let c = palette_index(pixel(img, cy + y, cx + x))?;
                if c != background {
                    if color.is_some_and(|k| k != c) {
                        return None;
                    }
                    color = Some(c);
                    mask[y * CELL + x] = true;
                }
            }
        }
        if let Some(color) = color {
            let kind = ShapeKind::ALL
                .into_iter()
                .find(|k| (0..CELL * CELL).all(|i| k.covers(i / CELL, i % CELL) == mask[i]))?;
            shapes.push(Shape { kind, color, cell });
        }
    }
    let scene = SceneSpec { background, shapes }.canonical();
    scene.is_valid().then_some(scene)
}

/// Instructions of every edit that turns `original` into exactly `edited`
/// (sorted, deduplicated). Empty when either image is not a clean render
/// or no single edit explains the pair.
pub fn consistent_instructions(original: &Tensor, edited: &Tensor) -> Vec<Tokens> {
    let (Some(before), Some(after)) = (parse_scene(original), parse_scene(edited)) else {
        return Vec::new();
    };
    let mut out: Vec<Tokens> = enumerate_edits(&before)
        .into_iter()
        .filter(|e| e.apply(&before).as_ref() == Some(&after))
        .map(|e| e.instruction())
        .collect();
    debug_assert!(out.is_empty() || render(&after).data() == edited.data());
    out.sort();
    out.dedup();
    out
}

/// Whether the pixels justify `instruction` for this pair.
pub fn accepts(original: &Tensor, edited: &Tensor, instruction: &Tokens) -> bool {
    consistent_instructions(original, edited).contains(instruction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::scene::sample_edit;
    use iclip_numerics::RngStream;

    #[test]
    fn parse_inverts_render() {
        let mut rng = RngStream::new(11, "oracle-test");
        for _ in 0..300 {
            let s = SceneSpec::sample(&mut rng);
            assert_eq!(parse_scene(&render(&s)), Some(s));
        }
    }

    #[test]
    fn true_edit_is_always_consistent() {
        let mut rng = RngStream::new(12, "oracle-test");
        for _ in 0..300 {
            let s = SceneSpec::sample(&mut rng);
            let e = sample_edit(&s, &mut rng);
            let after = e.apply(&s).unwrap();
            let set = consistent_instructions(&render(&s), &render(&after));
            assert!(set.contains(&e.instruction()), "{e:?}");
        }
    }

    #[test]
    fn noise_is_not_a_scene() {
        let t = Tensor::full(&[IMG, IMG, 3], 0.3f32);
        assert_eq!(parse_scene(&t), None);
    }
}
