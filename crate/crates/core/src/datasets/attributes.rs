//! Ground-truth attributes of synthetic furniture, templated captions and
//! the parser that reads attribute mentions back out of a caption.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::text::words;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Chair,
    Table,
}

impl ShapeClass {
    pub fn label(self) -> &'static str {
        match self {
            ShapeClass::Chair => "chair",
            ShapeClass::Table => "table",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Black,
    White,
    Brown,
    Gray,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Black,
        Color::White,
        Color::Brown,
        Color::Gray,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Black => "black",
            Color::White => "white",
            Color::Brown => "brown",
            Color::Gray => "gray",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.85, 0.1, 0.1],
            Color::Green => [0.1, 0.7, 0.2],
            Color::Blue => [0.1, 0.25, 0.85],
            Color::Yellow => [0.95, 0.85, 0.1],
            Color::Black => [0.05, 0.05, 0.05],
            Color::White => [0.95, 0.95, 0.95],
            Color::Brown => [0.5, 0.3, 0.12],
            Color::Gray => [0.5, 0.5, 0.5],
        }
    }

    fn parse(word: &str) -> Option<Color> {
        Color::ALL.into_iter().find(|c| c.name() == word)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Material {
    Wooden,
    Metal,
}

impl Material {
    pub fn name(self) -> &'static str {
        match self {
            Material::Wooden => "wooden",
            Material::Metal => "metal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopShape {
    Round,
    Square,
}

impl TopShape {
    pub fn name(self) -> &'static str {
        match self {
            TopShape::Round => "round",
            TopShape::Square => "square",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backrest {
    Solid,
    Slatted,
}

impl Backrest {
    pub fn name(self) -> &'static str {
        match self {
            Backrest::Solid => "solid",
            Backrest::Slatted => "slatted",
        }
    }
}

/// Ground truth of one synthetic shape. Chairs carry a backrest style and
/// optional armrests; tables carry a top shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShapeAttributes {
    pub class: ShapeClass,
    pub leg_count: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_shape: Option<TopShape>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backrest: Option<Backrest>,
    pub armrests: bool,
    pub primary_color: Color,
    pub secondary_color: Color,
    pub material: Material,
}

pub const CHAIR_LEGS: [u32; 2] = [3, 4];
pub const TABLE_LEGS: [u32; 3] = [3, 4, 6];

impl ShapeAttributes {
    pub fn validate(&self) -> Result<()> {
        let legs_ok = match self.class {
            ShapeClass::Chair => CHAIR_LEGS.contains(&self.leg_count),
            ShapeClass::Table => TABLE_LEGS.contains(&self.leg_count),
        };
        if !legs_ok {
            return Err(invalid!(
                "a {} cannot have {} legs",
                self.class.label(),
                self.leg_count
            ));
        }
        match self.class {
            ShapeClass::Chair if self.backrest.is_none() || self.top_shape.is_some() => {
                Err(invalid!("chairs need a backrest style and no top shape"))
            }
            ShapeClass::Table
                if self.top_shape.is_none() || self.backrest.is_some() || self.armrests =>
            {
                Err(invalid!(
                    "tables need a top shape, no backrest and no armrests"
                ))
            }
            _ if self.primary_color == self.secondary_color => {
                Err(invalid!("primary and secondary colors must differ"))
            }
            _ => Ok(()),
        }
    }

    pub fn sample(class: ShapeClass, rng: &mut impl Rng) -> Self {
        let primary = Color::ALL[rng.random_range(0..Color::ALL.len())];
        let others: Vec<Color> = Color::ALL.into_iter().filter(|&c| c != primary).collect();
        let secondary = others[rng.random_range(0..others.len())];
        let material = if rng.random_bool(0.5) {
            Material::Wooden
        } else {
            Material::Metal
        };
        match class {
            ShapeClass::Chair => Self {
                class,
                leg_count: CHAIR_LEGS[rng.random_range(0..CHAIR_LEGS.len())],
                top_shape: None,
                backrest: Some(if rng.random_bool(0.5) {
                    Backrest::Solid
                } else {
                    Backrest::Slatted
                }),
                armrests: rng.random_bool(0.5),
                primary_color: primary,
                secondary_color: secondary,
                material,
            },
            ShapeClass::Table => Self {
                class,
                leg_count: TABLE_LEGS[rng.random_range(0..TABLE_LEGS.len())],
                top_shape: Some(if rng.random_bool(0.5) {
                    TopShape::Round
                } else {
                    TopShape::Square
                }),
                backrest: None,
                armrests: false,
                primary_color: primary,
                secondary_color: secondary,
                material,
            },
        }
    }
}

pub fn number_word(n: u32) -> &'static str {
    match n {
        3 => "three",
        4 => "four",
        6 => "six",
        _ => "several",
    }
}

fn parse_number(word: &str) -> Option<u32> {
    match word {
        "three" => Some(3),
        "four" => Some(4),
        "six" => Some(6),
        _ => None,
    }
}

pub const CHAIR_TEMPLATES: usize = 5;
pub const TABLE_TEMPLATES: usize = 5;

/// Caption from template `index` (modulo the template count).
pub fn caption_with_template(attrs: &ShapeAttributes, index: usize) -> String {
    let n = number_word(attrs.leg_count);
    let p = attrs.primary_color.name();
    let s = attrs.secondary_color.name();
    let m = attrs.material.name();
    match attrs.class {
        ShapeClass::Chair => {
            let arms = if attrs.armrests {
                "armrests"
            } else {
                "no armrests"
            };
            let back = attrs.backrest.expect("chair has a backrest").name();
            match index % CHAIR_TEMPLATES {
                0 => format!("a {m} chair with a {p} seat, {n} legs and {arms}"),
                1 if attrs.armrests => {
                    format!("a chair with armrests, {n} legs, a {p} seat and a {s} frame")
                }
                1 => format!("an armless chair with {n} legs, a {p} seat and a {s} frame"),
                2 => format!("this chair has a {p} seat on {n} legs and {arms}"),
                3 => format!("a chair with a {back} backrest, a {p} seat, {n} legs and {arms}"),
                _ => format!("a {s} {m} chair frame with {arms}, a {p} seat and {n} legs"),
            }
        }
        ShapeClass::Table => {
            let top = attrs.top_shape.expect("table has a top").name();
            match index % TABLE_TEMPLATES {
                0 => format!("a {top} table with a {p} top and {n} legs"),
                1 => format!("a {m} table standing on {n} legs with a {p} {top} top"),
                2 => format!("this table has a {top} {p} top, a {s} frame and {n} legs"),
                3 => format!("a table with {n} legs, a {s} frame and a {p} {top} top"),
                _ => format!("a {p} {top} top resting on a {m} table base with {n} legs"),
            }
        }
    }
}

/// Caption from a random template.
pub fn caption_from_attributes(attrs: &ShapeAttributes, rng: &mut impl Rng) -> String {
    let count = match attrs.class {
        ShapeClass::Chair => CHAIR_TEMPLATES,
        ShapeClass::Table => TABLE_TEMPLATES,
    };
    caption_with_template(attrs, rng.random_range(0..count))
}

/// Caption naming every attribute of the shape.
pub fn full_caption(attrs: &ShapeAttributes) -> String {
    let n = number_word(attrs.leg_count);
    let p = attrs.primary_color.name();
    let s = attrs.secondary_color.name();
    let m = attrs.material.name();
    match attrs.class {
        ShapeClass::Chair => {
            let arms = if attrs.armrests {
                "armrests"
            } else {
                "no armrests"
            };
            let back = attrs.backrest.expect("chair has a backrest").name();
            format!(
                "a {m} chair with a {p} seat, a {s} frame, a {back} backrest, {n} legs and {arms}"
            )
        }
        ShapeClass::Table => {
            let top = attrs.top_shape.expect("table has a top").name();
            format!("a {m} table with a {p} {top} top, a {s} frame and {n} legs")
        }
    }
}

/// Attributes a caption asserts. `None` means not mentioned.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Mentions {
    pub class: Option<ShapeClass>,
    pub leg_count: Option<u32>,
    pub top_shape: Option<TopShape>,
    pub backrest: Option<Backrest>,
    pub armrests: Option<bool>,
    pub primary_color: Option<Color>,
    pub secondary_color: Option<Color>,
    pub material: Option<Material>,
    /// Words from the closed attribute vocabularies that the parser could
    /// not attach to any attribute.
    pub unattached: Vec<String>,
}

const PRIMARY_PARTS: [&str; 2] = ["seat", "top"];
const SECONDARY_PARTS: [&str; 1] = ["frame"];

impl Mentions {
    pub fn parse(caption: &str) -> Self {
        let w = words(caption);
        let mut m = Mentions::default();
        for (i, word) in w.iter().enumerate() {
            let next = w.get(i + 1).map(String::as_str);
            match word.as_str() {
                "chair" => m.class = Some(ShapeClass::Chair),
                "table" => m.class = Some(ShapeClass::Table),
                "wooden" => m.material = Some(Material::Wooden),
                "metal" => m.material = Some(Material::Metal),
                "round" => m.top_shape = Some(TopShape::Round),
                "square" => m.top_shape = Some(TopShape::Square),
                "solid" => m.backrest = Some(Backrest::Solid),
                "slatted" => m.backrest = Some(Backrest::Slatted),
                "armless" => m.armrests = Some(false),
                "armrests" => {
                    let negated = i > 0 && matches!(w[i - 1].as_str(), "no" | "without");
                    m.armrests = Some(!negated);
                }
                other => {
                    if let Some(n) = parse_number(other) {
                        if next == Some("legs") {
                            m.leg_count = Some(n);
                        } else {
                            m.unattached.push(other.to_string());
                        }
                    } else if let Some(color) = Color::parse(other) {
                        let part = w[i + 1..].iter().find(|x| {
                            PRIMARY_PARTS.contains(&x.as_str())
                                || SECONDARY_PARTS.contains(&x.as_str())
                        });
                        match part.map(String::as_str) {
                            Some(p) if PRIMARY_PARTS.contains(&p) => m.primary_color = Some(color),
                            Some(_) => m.secondary_color = Some(color),
                            None => m.unattached.push(other.to_string()),
                        }
                    }
                }
            }
        }
        m
    }

    /// Number of asserted attributes.
    pub fn count(&self) -> usize {
        [
            self.class.is_some(),
            self.leg_count.is_some(),
            self.top_shape.is_some(),
            self.backrest.is_some(),
            self.armrests.is_some(),
            self.primary_color.is_some(),
            self.secondary_color.is_some(),
            self.material.is_some(),
        ]
        .iter()
        .filter(|&&b| b)
        .count()
    }

    /// Asserted attributes that are false of the shape.
    pub fn mismatches(&self, attrs: &ShapeAttributes) -> usize {
        fn differs<T: PartialEq>(said: Option<T>, truth: T) -> usize {
            usize::from(said.is_some_and(|s| s != truth))
        }
        fn differs_opt<T: PartialEq>(said: Option<T>, truth: Option<T>) -> usize {
            usize::from(said.is_some() && said != truth)
        }
        differs(self.class, attrs.class)
            + differs(self.leg_count, attrs.leg_count)
            + differs_opt(self.top_shape, attrs.top_shape)
            + differs_opt(self.backrest, attrs.backrest)
            + differs(self.armrests, attrs.armrests)
            + differs(self.primary_color, attrs.primary_color)
            + differs(self.secondary_color, attrs.secondary_color)
            + differs(self.material, attrs.material)
            + self.unattached.len()
    }
}
