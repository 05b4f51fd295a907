use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! attribute {
    ($name:ident, $field:literal, [$($variant:ident => $word:literal),+ $(,)?]) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn index(self) -> usize {
                self as usize
            }

            pub fn from_index(i: usize) -> Result<Self> {
                Self::ALL
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::config($field, format!("index {i} out of range")))
            }

            pub fn word(self) -> &'static str {
                match self {
                    $($name::$variant => $word),+
                }
            }

            pub fn parse(word: &str) -> Result<Self> {
                match word {
                    $($word => Ok($name::$variant),)+
                    other => Err(Error::config($field, format!("unknown value `{other}`"))),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.word())
            }
        }
    };
}

attribute!(Shape, "shape", [Circle => "circle", Square => "square", Triangle => "triangle", Cross => "cross"]);
attribute!(Color, "color", [Red => "red", Green => "green", Blue => "blue", Yellow => "yellow"]);
attribute!(Quadrant, "quadrant", [TopLeft => "tl", TopRight => "tr", BottomLeft => "bl", BottomRight => "br"]);
attribute!(Size, "size", [Small => "small", Large => "large"]);

pub const NUM_CLASSES: usize = 128;

/// Logit group widths of the understanding head: shape, color, quadrant, size.
pub const ATTRIBUTE_GROUPS: [usize; 4] = [4, 4, 4, 2];

/// One prompt class plus the style variant that picks its ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptSpec {
    pub shape: Shape,
    pub color: Color,
    pub quadrant: Quadrant,
    pub size: Size,
    pub style_seed: usize,
}

impl PromptSpec {
    pub fn new(shape: Shape, color: Color, quadrant: Quadrant, size: Size, style_seed: usize) -> Self {
        Self {
            shape,
            color,
            quadrant,
            size,
            style_seed,
        }
    }

    /// Class index in `0..128`, ignoring the style.
    pub fn class_index(&self) -> usize {
        ((self.shape.index() * 4 + self.color.index()) * 4 + self.quadrant.index()) * 2 + self.size.index()
    }

    pub fn from_class(class: usize, style_seed: usize) -> Result<Self> {
        if class >= NUM_CLASSES {
            return Err(Error::contract(format!("class {class} out of range")));
        }
        Ok(Self {
            shape: Shape::from_index(class / 32)?,
            color: Color::from_index(class / 8 % 4)?,
            quadrant: Quadrant::from_index(class / 2 % 4)?,
            size: Size::from_index(class % 2)?,
            style_seed,
        })
    }

    /// Attribute labels in head order.
    pub fn labels(&self) -> [usize; 4] {
        [
            self.shape.index(),
            self.color.index(),
            self.quadrant.index(),
            self.size.index(),
        ]
    }

    /// Parses `"<shape> <color> <quadrant> <size>"`.
    pub fn parse(text: &str) -> Result<Self> {
        let words: Vec<&str> = text.split_whitespace().collect();
        if words.len() != 4 {
            return Err(Error::config(
                "prompt",
                format!("expected `<shape> <color> <quadrant> <size>`, got `{text}`"),
            ));
        }
        Ok(Self::new(
            Shape::parse(words[0])?,
            Color::parse(words[1])?,
            Quadrant::parse(words[2])?,
            Size::parse(words[3])?,
            0,
        ))
    }

    pub fn text(&self) -> String {
        format!("{} {} {} {}", self.shape, self.color, self.quadrant, self.size)
    }
}

pub const VOCAB: [&str; 20] = [
    "<pad>", "<bos>", "a", "in", "the", "corner", "circle", "square", "triangle", "cross", "red", "green", "blue",
    "yellow", "tl", "tr", "bl", "br", "small", "large",
];
pub const VOCAB_SIZE: usize = VOCAB.len();
pub const MAX_PROMPT_LEN: usize = 12;
pub const PAD: usize = 0;
pub const BOS: usize = 1;

/// Token ids padded to [`MAX_PROMPT_LEN`]; `len` counts the real tokens.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub len: usize,
}

impl TokenSeq {
    pub fn new(mut ids: Vec<usize>) -> Result<Self> {
        if ids.len() > MAX_PROMPT_LEN {
            return Err(Error::contract(format!(
                "prompt of {} tokens exceeds the maximum of {MAX_PROMPT_LEN}",
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= VOCAB_SIZE) {
            return Err(Error::contract(format!("token id {bad} outside vocabulary")));
        }
        let len = ids.len();
        ids.resize(MAX_PROMPT_LEN, PAD);
        Ok(Self { ids, len })
    }

    pub fn words(&self) -> Vec<&'static str> {
        self.ids[..self.len].iter().map(|&i| VOCAB[i]).collect()
    }
}

fn word_id(w: &str) -> usize {
    VOCAB.iter().position(|v| *v == w).expect("template word in vocabulary")
}

/// `<bos> a {size} {color} {shape} in the {quadrant} corner`.
pub fn tokenize(spec: &PromptSpec) -> TokenSeq {
    let words = [
        "<bos>",
        "a",
        spec.size.word(),
        spec.color.word(),
        spec.shape.word(),
        "in",
        "the",
        spec.quadrant.word(),
        "corner",
    ];
    TokenSeq::new(words.iter().map(|w| word_id(w)).collect()).expect("template fits")
}
