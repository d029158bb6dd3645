//! Appearance palettes: identities, clothing, backgrounds, actions and the
//! caption vocabulary.

/// Identities `0..TRAIN_IDENTITIES` are used for training; the rest are held out.
pub const NUM_IDENTITIES: u32 = 24;
pub const TRAIN_IDENTITIES: u32 = 16;
pub const NUM_CLOTHING: u32 = 12;
pub const NUM_BACKGROUNDS: u32 = 8;
pub const NUM_ACTIONS: u32 = 4;
pub const NUM_TEMPLATES: u32 = 4;

pub type Rgb = [f32; 3];

pub fn hsv(h: f32, s: f32, v: f32) -> Rgb {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor() as i32;
    let f = h - i as f32;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i.rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn frac(x: f32) -> f32 {
    x - x.floor()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HairStyle {
    Cap,
    Tall,
    Side,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityStyle {
    pub face: Rgb,
    pub hair: Rgb,
    pub hair_style: HairStyle,
    /// Horizontal distance of each eye from the head centre.
    pub eye_offset: i32,
    pub eye_size: i32,
}

pub fn identity_style(id: u32) -> IdentityStyle {
    let i = id as f32;
    IdentityStyle {
        face: hsv(frac(i * 0.618_034 + 0.05), 0.55, 0.95),
        hair: hsv(frac(i * 0.381_966 + 0.3), 0.75, 0.3 + 0.15 * (id % 3) as f32),
        hair_style: match id % 3 {
            0 => HairStyle::Cap,
            1 => HairStyle::Tall,
            _ => HairStyle::Side,
        },
        eye_offset: 2 + ((id / 3) % 2) as i32,
        eye_size: 1 + ((id / 6) % 2) as i32,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pattern {
    Solid,
    HStripes,
    VStripes,
    Checker,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClothingStyle {
    pub shirt: Rgb,
    pub accent: Rgb,
    pub pants: Rgb,
    pub pattern: Pattern,
}

pub fn clothing_style(id: u32) -> ClothingStyle {
    let i = id as f32;
    let h = frac(i * 0.271_8 + 0.6);
    ClothingStyle {
        shirt: hsv(h, 0.8, 0.85),
        accent: hsv(h + 0.5, 0.6, 0.45),
        pants: hsv(frac(i * 0.45 + 0.1), 0.5, 0.35),
        pattern: match id % 4 {
            0 => Pattern::Solid,
            1 => Pattern::HStripes,
            2 => Pattern::VStripes,
            _ => Pattern::Checker,
        },
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BackgroundStyle {
    pub name: &'static str,
    pub sky: Rgb,
    pub ground: Rgb,
}

pub const BACKGROUNDS: [BackgroundStyle; NUM_BACKGROUNDS as usize] = [
    BackgroundStyle { name: "meadow", sky: [0.55, 0.78, 0.95], ground: [0.30, 0.62, 0.25] },
    BackgroundStyle { name: "beach", sky: [0.40, 0.65, 0.90], ground: [0.90, 0.82, 0.55] },
    BackgroundStyle { name: "night", sky: [0.06, 0.08, 0.22], ground: [0.18, 0.18, 0.22] },
    BackgroundStyle { name: "desert", sky: [0.95, 0.70, 0.40], ground: [0.80, 0.60, 0.35] },
    BackgroundStyle { name: "snow", sky: [0.80, 0.84, 0.90], ground: [0.97, 0.97, 0.98] },
    BackgroundStyle { name: "city", sky: [0.55, 0.55, 0.60], ground: [0.28, 0.28, 0.30] },
    BackgroundStyle { name: "forest", sky: [0.35, 0.60, 0.55], ground: [0.12, 0.35, 0.15] },
    BackgroundStyle { name: "sunset", sky: [0.95, 0.55, 0.60], ground: [0.40, 0.26, 0.18] },
];

pub const ACTIONS: [&str; NUM_ACTIONS as usize] = ["standing", "waving", "cheering", "walking"];

/// Closed caption vocabulary. Id 0 is padding.
pub const VOCAB: &[&str] = &[
    "<pad>", "a", "one", "two", "person", "people", "standing", "waving", "cheering", "walking", "in",
    "the", ",", "scene", "with", "meadow", "beach", "night", "desert", "snow", "city", "forest",
    "sunset",
];

/// Vocabulary size seen by the text encoder (unused ids are valid but never
/// produced by the caption templates).
pub const VOCAB_SIZE: usize = 64;
pub const PAD_TOKEN: u32 = 0;
pub const MAX_CAPTION_LEN: usize = 8;

pub fn token_id(word: &str) -> u32 {
    VOCAB
        .iter()
        .position(|w| *w == word)
        .unwrap_or_else(|| panic!("word {word:?} missing from caption vocabulary")) as u32
}

/// Fills a caption template. Never longer than [`MAX_CAPTION_LEN`].
pub fn caption_tokens(template: u32, num_characters: usize, action: u32, background: u32) -> Vec<u32> {
    let count = if num_characters == 1 { "one" } else { "two" };
    let noun = if num_characters == 1 { "person" } else { "people" };
    let act = ACTIONS[action as usize];
    let bg = BACKGROUNDS[background as usize].name;
    let words: Vec<&str> = match template % NUM_TEMPLATES {
        0 => vec!["a", count, noun, act, "in", "the", bg],
        1 => vec![count, noun, act, ",", bg],
        2 => vec![bg, "scene", "with", count, noun, act],
        _ => vec![count, noun, act],
    };
    words.into_iter().map(token_id).collect()
}

/// Parses a caption written in the closed vocabulary. Commas may be
/// attached to words.
pub fn tokenize(text: &str) -> crate::Result<Vec<u32>> {
    let spaced = text.replace(',', " , ");
    let tokens = spaced
        .split_whitespace()
        .map(|w| {
            let w = w.to_lowercase();
            VOCAB
                .iter()
                .position(|v| *v == w && w != "<pad>")
                .map(|i| i as u32)
                .ok_or_else(|| crate::Error::invalid(format!("word {w:?} is not in the caption vocabulary")))
        })
        .collect::<crate::Result<Vec<_>>>()?;
    if tokens.len() > MAX_CAPTION_LEN {
        return Err(crate::Error::invalid(format!("captions are limited to {MAX_CAPTION_LEN} words")));
    }
    Ok(tokens)
}

pub fn detokenize(tokens: &[u32]) -> String {
    tokens
        .iter()
        .map(|&t| VOCAB.get(t as usize).copied().unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}
