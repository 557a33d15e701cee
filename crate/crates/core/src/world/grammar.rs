use super::{count_word, plural, AttributeSchema, Scene};

/// Literal words used by the default templates.
pub const FUNCTION_WORDS: [&str; 12] = [
    "a", "the", "standing", "in", "there", "is", "are", "that", "photo", "of", "near", "on",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Piece {
    Word(&'static str),
    /// "a" / "two" / "three"
    Det,
    /// Singular or plural category noun, agreeing with the count.
    Noun,
    /// "is" / "are", agreeing with the count.
    Be,
    Color,
    Size,
    Setting,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Template {
    pub pieces: Vec<Piece>,
}

impl Template {
    pub fn render(&self, scene: &Scene) -> Vec<String> {
        let a = &scene.attributes;
        let many = a.count > 1;
        self.pieces
            .iter()
            .map(|p| match p {
                Piece::Word(w) => w.to_string(),
                Piece::Det => count_word(a.count).to_string(),
                Piece::Noun if many => plural(&scene.category),
                Piece::Noun => scene.category.clone(),
                Piece::Be => if many { "are" } else { "is" }.to_string(),
                Piece::Color => a.color.clone(),
                Piece::Size => a.size.clone(),
                Piece::Setting => a.setting.clone(),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grammar {
    pub templates: Vec<Template>,
}

impl Default for Grammar {
    fn default() -> Self {
        use Piece::*;
        let t = |pieces: &[Piece]| Template {
            pieces: pieces.to_vec(),
        };
        Self {
            templates: vec![
                t(&[Det, Color, Noun, Word("standing"), Word("in"), Word("a"), Setting]),
                t(&[Det, Size, Color, Noun, Word("in"), Word("the"), Setting]),
                t(&[Word("there"), Be, Det, Size, Noun, Word("in"), Word("a"), Setting]),
                t(&[Det, Noun, Word("that"), Be, Color]),
                t(&[Word("a"), Word("photo"), Word("of"), Det, Color, Noun]),
                t(&[Det, Size, Noun, Word("near"), Word("the"), Setting]),
                t(&[Det, Color, Noun, Word("on"), Word("a"), Setting]),
            ],
        }
    }
}

/// Attributes recovered from a caption. Axes the template does not mention are `None`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedCaption {
    pub template: usize,
    pub category: String,
    pub count: u8,
    pub color: Option<String>,
    pub size: Option<String>,
    pub setting: Option<String>,
}

/// Invert the templates: match `tokens` against each template in order.
pub fn parse_caption(tokens: &[String], schema: &AttributeSchema, grammar: &Grammar) -> Option<ParsedCaption> {
    let categories = schema.categories();
    'templates: for (ti, tpl) in grammar.templates.iter().enumerate() {
        if tpl.pieces.len() != tokens.len() {
            continue;
        }
        let mut out = ParsedCaption {
            template: ti,
            category: String::new(),
            count: 0,
            color: None,
            size: None,
            setting: None,
        };
        let mut noun_plural = None;
        let mut be_plural = None;
        for (piece, tok) in tpl.pieces.iter().zip(tokens) {
            let tok = tok.as_str();
            match piece {
                Piece::Word(w) => {
                    if *w != tok {
                        continue 'templates;
                    }
                }
                Piece::Det => match schema.counts.iter().find(|&&c| count_word(c) == tok) {
                    Some(&c) => out.count = c,
                    None => continue 'templates,
                },
                Piece::Noun => {
                    if let Some(c) = categories.iter().find(|c| c.as_str() == tok) {
                        out.category = c.clone();
                        noun_plural = Some(false);
                    } else if let Some(c) = categories.iter().find(|c| plural(c) == tok) {
                        out.category = c.clone();
                        noun_plural = Some(true);
                    } else {
                        continue 'templates;
                    }
                }
                Piece::Be => match tok {
                    "is" => be_plural = Some(false),
                    "are" => be_plural = Some(true),
                    _ => continue 'templates,
                },
                Piece::Color if schema.colors.iter().any(|v| v == tok) => out.color = Some(tok.to_string()),
                Piece::Size if schema.sizes.iter().any(|v| v == tok) => out.size = Some(tok.to_string()),
                Piece::Setting if schema.settings.iter().any(|v| v == tok) => {
                    out.setting = Some(tok.to_string())
                }
                _ => continue 'templates,
            }
        }
        let many = out.count > 1;
        if noun_plural.is_some_and(|p| p != many) || be_plural.is_some_and(|p| p != many) {
            continue;
        }
        return Some(out);
    }
    None
}
