//! Deterministic stand-ins for the captioner, the text-to-image model and the
//! image encoder, plus the PNG metadata convention they share.
//!
//! Mock images carry the detected style in a `tEXt` chunk keyed
//! [`STYLE_KEY`] and the prompt in an `iTXt` chunk keyed [`PROMPT_KEY`]. The
//! mock captioner and embedder read the style back, which makes an end-to-end
//! mock run class-separable.

use std::io::Cursor;
use std::path::Path;

use crate::corpus::StyleLabel;
use crate::rng::{derive_seed, SplitRng};

pub const STYLE_KEY: &str = "maskprompt:style";
pub const PROMPT_KEY: &str = "maskprompt:prompt";

/// Words the mock backends associate with each style. Repeats weight the draw.
pub fn style_vocab(style: StyleLabel) -> &'static [&'static str] {
    use StyleLabel::*;
    match style {
        Conservative => &["navy", "beige", "tailored", "blazer", "modest", "classic", "cardigan", "polished"],
        Dressy => &["elegant", "satin", "silk", "heels", "clutch", "glamorous", "sophisticated", "velvet"],
        Ethnic => &["bohemian", "floral", "brimmed", "embroidered", "kaftan", "tunic", "earthy", "shawl"],
        Fairy => &["pastel", "pastel", "pastel", "cute", "cute", "tutu", "lavender", "frilly", "dreamy", "ribbon"],
        Feminine => &["romantic", "chiffon", "pink", "delicate", "blouse", "ruffled", "flowy", "midi"],
        Gal => &["sexy", "flashy", "mini", "neon", "platform", "glossy", "cropped", "tight"],
        Girlish => &["sweet", "girly", "bows", "beret", "dainty", "peach", "checks", "camisole"],
        KireimeCasual => &["chic", "fitted", "trousers", "loafers", "slim", "refined", "cream", "structured"],
        Lolita => &["lolita", "bonnet", "petticoat", "ruffles", "doll-like", "frills", "lace", "puffy"],
        Mode => &["monochrome", "black", "minimalist", "sleek", "asymmetric", "matte", "charcoal", "avant-garde"],
        Natural => &["linen", "cotton", "relaxed", "olive", "khaki", "comfy", "loose", "rustic"],
        Retro => &["vintage", "retro", "plaid", "mustard", "corduroy", "high-waisted", "houndstooth", "checked"],
        Rock => &["leather", "studs", "rivets", "ripped", "punk", "chains", "boots", "edgy"],
        Street => &["hoodie", "sneakers", "baggy", "urban", "streetwear", "cap", "distressed", "sporty"],
    }
}

/// Generic fill words used when no style can be inferred.
pub const GENERIC_VOCAB: &[&str] = &["simple", "casual", "white", "gray", "top", "skirt", "jacket", "soft"];

const GARMENTS: &[&str] = &["dress", "top", "skirt", "jacket", "vest", "coat", "sweater", "pants"];
const ACCESSORIES: &[&str] = &["shoes", "sandals", "bag", "hat", "scarf", "belt"];

fn normalise(word: &str) -> String {
    word.trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
}

/// Infers a style by counting style names and style vocabulary in `text`.
/// Ties go to the earlier style; no evidence gives `None`.
pub fn detect_style(text: &str) -> Option<StyleLabel> {
    let words: Vec<String> = text.split_whitespace().map(normalise).collect();
    let mut best: Option<(usize, StyleLabel)> = None;
    for style in StyleLabel::ALL {
        let vocab = style_vocab(style);
        let score = words
            .iter()
            .filter(|w| w.as_str() == style.as_str() || vocab.contains(&w.as_str()))
            .count();
        if score > 0 && best.map(|(s, _)| score > s).unwrap_or(true) {
            best = Some((score, style));
        }
    }
    best.map(|(_, s)| s)
}

/// Deterministic caption (with the required prefix) for an image of `style`.
pub fn caption_for(style: Option<StyleLabel>, content_seed: u64) -> String {
    let mut rng = SplitRng::new(content_seed);
    let vocab = style.map(style_vocab).unwrap_or(GENERIC_VOCAB);
    let mut pick = |list: &[&'static str]| list[rng.below(list.len() as u64) as usize];
    let (v1, g1, v2, g2, v3, g3, v4, a) = (
        pick(vocab),
        pick(GARMENTS),
        pick(vocab),
        pick(GARMENTS),
        pick(vocab),
        pick(GARMENTS),
        pick(vocab),
        pick(ACCESSORIES),
    );
    let style_word = style.map(|s| s.as_str()).unwrap_or("casual");
    format!(
        "A photo of a woman wearing a {v1} {g1} with a {v2} {g2}, {v3} {g3}, and {v4} {a}, embodying a {style_word} fashion style."
    )
}

/// Deterministic fill word for the `ordinal`-th mask.
pub fn fill_word(style: Option<StyleLabel>, seed: u64, ordinal: usize) -> &'static str {
    let label = style.map(|s| s.as_str()).unwrap_or("generic");
    let vocab = style.map(style_vocab).unwrap_or(GENERIC_VOCAB);
    let h = derive_seed(seed, &["fill", label, &ordinal.to_string()]);
    vocab[(h % vocab.len() as u64) as usize]
}

/// Renders a blocky RGB image seeded by `seed` and encodes it as PNG with the
/// style and prompt metadata chunks.
pub fn render_png(width: u32, height: u32, seed: u64, style: Option<StyleLabel>, prompt: &str) -> Vec<u8> {
    const CELLS: u32 = 8;
    let mut rng = SplitRng::new(seed);
    let palette: Vec<[u8; 3]> = (0..CELLS * CELLS)
        .map(|_| {
            let v = rng.next_u64();
            [v as u8, (v >> 8) as u8, (v >> 16) as u8]
        })
        .collect();
    let mut pixels = Vec::with_capacity((width * height * 3) as usize);
    for y in 0..height {
        let cy = (y * CELLS / height.max(1)).min(CELLS - 1);
        for x in 0..width {
            let cx = (x * CELLS / width.max(1)).min(CELLS - 1);
            pixels.extend_from_slice(&palette[(cy * CELLS + cx) as usize]);
        }
    }
    encode_png(width, height, &pixels, style, prompt)
}

pub fn encode_png(width: u32, height: u32, rgb: &[u8], style: Option<StyleLabel>, prompt: &str) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width, height);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        if let Some(s) = style {
            enc.add_text_chunk(STYLE_KEY.to_string(), s.as_str().to_string())
                .expect("latin-1 keyword");
        }
        if !prompt.is_empty() {
            enc.add_itxt_chunk(PROMPT_KEY.to_string(), prompt.to_string())
                .expect("valid keyword");
        }
        let mut writer = enc.write_header().expect("in-memory png header");
        writer.write_image_data(rgb).expect("in-memory png data");
    }
    out
}

/// Reads the mock style chunk from PNG bytes, if any.
pub fn read_style(bytes: &[u8]) -> Option<StyleLabel> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let reader = decoder.read_info().ok()?;
    reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .find(|c| c.keyword == STYLE_KEY)
        .and_then(|c| c.text.parse().ok())
}

/// Images per split for [`write_mock_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MockCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Writes a `train|val|test/<style>/<n>.png` tree of style-tagged mock images
/// and returns the number of files written.
pub fn write_mock_dataset(
    root: &Path,
    styles: &[StyleLabel],
    counts: MockCounts,
    size: u32,
    seed: u64,
) -> std::io::Result<usize> {
    let mut written = 0;
    for (split, n) in [("train", counts.train), ("val", counts.val), ("test", counts.test)] {
        for &style in styles {
            let dir = root.join(split).join(style.as_str());
            std::fs::create_dir_all(&dir)?;
            for i in 0..n {
                let s = derive_seed(seed, &[split, style.as_str(), &i.to_string()]);
                std::fs::write(dir.join(format!("{i:04}.png")), render_png(size, size, s, Some(style), ""))?;
                written += 1;
            }
        }
    }
    Ok(written)
}
