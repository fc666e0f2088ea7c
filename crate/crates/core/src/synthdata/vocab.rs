//! The fixed template vocabulary and caption grammar.

use crate::error::{contract_err, Result};

use super::{Color, Scene, SceneObject, ShapeKind};

pub type TokenId = u16;

pub const PAD: TokenId = 0;
pub const CLS: TokenId = 1;
pub const MASK: TokenId = 2;
/// First id that is an ordinary word (everything below is special).
pub const FIRST_WORD: TokenId = 3;
/// Caption length including `[CLS]`.
pub const MAX_LEN: usize = 16;

pub const WORDS: &[&str] = &[
    "[PAD]", "[CLS]", "[MASK]", //
    "a", "and", //
    "circle", "square", "triangle", "cross", //
    "red", "green", "blue", "yellow", "magenta", "cyan", //
    "top", "middle", "bottom", "high", "low", //
    "left", "center", "right", "midleft", "midright", //
    "upper", "lower", "disc", "box",
];

pub const VOCAB_SIZE: usize = 29;

pub fn id(word: &str) -> TokenId {
    WORDS.iter().position(|w| *w == word).expect("word is in the template vocabulary") as TokenId
}

pub fn word(id: TokenId) -> &'static str {
    WORDS.get(id as usize).copied().unwrap_or("[UNK]")
}

pub fn is_special(id: TokenId) -> bool {
    id < FIRST_WORD
}

fn shape_word(s: ShapeKind) -> &'static str {
    match s {
        ShapeKind::Circle => "circle",
        ShapeKind::Square => "square",
        ShapeKind::Triangle => "triangle",
        ShapeKind::Cross => "cross",
    }
}

fn color_word(c: Color) -> &'static str {
    match c {
        Color::Red => "red",
        Color::Green => "green",
        Color::Blue => "blue",
        Color::Yellow => "yellow",
        Color::Magenta => "magenta",
        Color::Cyan => "cyan",
    }
}

fn row_words(grid: usize) -> &'static [&'static str] {
    match grid {
        2 => &["top", "bottom"],
        3 => &["top", "middle", "bottom"],
        _ => &["top", "high", "low", "bottom"],
    }
}

fn col_words(grid: usize) -> &'static [&'static str] {
    match grid {
        2 => &["left", "right"],
        3 => &["left", "center", "right"],
        _ => &["left", "midleft", "midright", "right"],
    }
}

fn synonym(w: &'static str) -> Option<&'static str> {
    match w {
        "top" => Some("upper"),
        "bottom" => Some("lower"),
        "circle" => Some("disc"),
        "square" => Some("box"),
        _ => None,
    }
}

fn canonical(w: &str) -> &str {
    match w {
        "upper" => "top",
        "lower" => "bottom",
        "disc" => "circle",
        "box" => "square",
        other => other,
    }
}

/// Renders `scene` as `[CLS] a <color> <shape> <row> <col> (and a ...)`,
/// padded to [`MAX_LEN`]. `use_synonym(k)` decides whether the k-th
/// synonym-eligible word is swapped for its synonym.
pub fn encode_caption(scene: &Scene, mut use_synonym: impl FnMut(usize) -> bool) -> Vec<TokenId> {
    let mut ids = vec![CLS];
    let mut eligible = 0;
    let mut push = |w: &'static str, ids: &mut Vec<TokenId>| {
        let w = match synonym(w) {
            Some(s) => {
                let k = eligible;
                eligible += 1;
                if use_synonym(k) {
                    s
                } else {
                    w
                }
            }
            None => w,
        };
        ids.push(id(w));
    };
    for (i, obj) in scene.objects.iter().enumerate() {
        if i > 0 {
            push("and", &mut ids);
        }
        push("a", &mut ids);
        push(color_word(obj.color), &mut ids);
        push(shape_word(obj.shape), &mut ids);
        push(row_words(scene.grid)[obj.row], &mut ids);
        push(col_words(scene.grid)[obj.col], &mut ids);
    }
    debug_assert!(ids.len() <= MAX_LEN);
    ids.resize(MAX_LEN, PAD);
    ids
}

/// Parses a caption produced by [`encode_caption`] back into its scene.
pub fn decode_caption(ids: &[TokenId], grid: usize) -> Result<Scene> {
    if ids.first() != Some(&CLS) {
        return contract_err("caption must start with [CLS]");
    }
    let words: Vec<&str> = ids[1..].iter().take_while(|&&t| t != PAD).map(|&t| canonical(word(t))).collect();
    let mut objects = Vec::new();
    let mut i = 0;
    while i < words.len() {
        if !objects.is_empty() {
            if words[i] != "and" {
                return contract_err(format!("expected 'and' at word {i}"));
            }
            i += 1;
        }
        if i + 5 > words.len() || words[i] != "a" {
            return contract_err("truncated object phrase");
        }
        let color = Color::ALL
            .into_iter()
            .find(|c| color_word(*c) == words[i + 1])
            .ok_or_else(|| crate::TclError::Contract(format!("unknown color '{}'", words[i + 1])))?;
        let shape = ShapeKind::ALL
            .into_iter()
            .find(|s| shape_word(*s) == words[i + 2])
            .ok_or_else(|| crate::TclError::Contract(format!("unknown shape '{}'", words[i + 2])))?;
        let row = row_words(grid).iter().position(|w| *w == words[i + 3]);
        let col = col_words(grid).iter().position(|w| *w == words[i + 4]);
        let (Some(row), Some(col)) = (row, col) else {
            return contract_err("unknown position words");
        };
        objects.push(SceneObject { shape, color, row, col });
        i += 5;
    }
    Ok(Scene { grid, objects })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_is_consistent() {
        assert_eq!(WORDS.len(), VOCAB_SIZE);
        assert_eq!(id("[PAD]"), PAD);
        assert_eq!(id("[CLS]"), CLS);
        assert_eq!(id("[MASK]"), MASK);
        for (i, w) in WORDS.iter().enumerate() {
            assert_eq!(id(w) as usize, i, "duplicate word {w}");
        }
    }

    #[test]
    fn longest_caption_fits() {
        let scene = Scene {
            grid: 4,
            objects: vec![
                SceneObject { shape: ShapeKind::Triangle, color: Color::Magenta, row: 0, col: 1 },
                SceneObject { shape: ShapeKind::Cross, color: Color::Yellow, row: 3, col: 2 },
            ],
        };
        let ids = encode_caption(&scene, |_| false);
        let used = ids.iter().filter(|&&t| t != PAD).count();
        assert_eq!(used, 12);
        assert_eq!(decode_caption(&ids, 4).unwrap(), scene);
    }

    #[test]
    fn synonyms_decode_to_the_same_scene() {
        let scene = Scene {
            grid: 2,
            objects: vec![SceneObject { shape: ShapeKind::Circle, color: Color::Red, row: 0, col: 0 }],
        };
        let plain = encode_caption(&scene, |_| false);
        let syn = encode_caption(&scene, |_| true);
        assert_ne!(plain, syn);
        assert_eq!(decode_caption(&syn, 2).unwrap(), scene);
    }
}
