use rand::Rng;

use super::{Color, ObjectSpec, Relation, Shape, Size, Texture};
use crate::error::{DtcError, Result};

/// `{size} {color} [{texture}] {shape}`, without the article.
pub fn describe_object(obj: &ObjectSpec, mention_texture: bool) -> String {
    if mention_texture {
        format!("{} {} {} {}", obj.size, obj.color, obj.texture, obj.shape)
    } else {
        format!("{} {} {}", obj.size, obj.color, obj.shape)
    }
}

/// Caption for a singleton (`relation` must be `None`) or an ordered pair.
///
/// For pairs a supplied relation must agree with the geometry; `None` picks
/// the relation along the dominant axis. Each object's texture is mentioned
/// independently with probability `texture_probability`.
pub fn describe_region<R: Rng + ?Sized>(
    objects: &[&ObjectSpec],
    relation: Option<Relation>,
    texture_probability: f64,
    rng: &mut R,
) -> Result<String> {
    let mut desc = |o: &ObjectSpec| describe_object(o, rng.gen_bool(texture_probability));
    match objects {
        [a] => {
            if relation.is_some() {
                return Err(DtcError::Caption("a singleton takes no relation".into()));
            }
            Ok(format!("a {}", desc(a)))
        }
        [a, b] => {
            let rel = match relation {
                Some(r) if !r.holds(a, b) => {
                    return Err(DtcError::Caption(format!(
                        "relation '{}' contradicts the object positions",
                        r.phrase()
                    )))
                }
                Some(r) => r,
                None => Relation::between(a, b),
            };
            let (da, db) = (desc(a), desc(b));
            Ok(format!("a {da} {} a {db}", rel.phrase()))
        }
        _ => Err(DtcError::Caption(format!(
            "regions hold one or two objects, got {}",
            objects.len()
        ))),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedObject {
    pub size: Size,
    pub color: Color,
    pub texture: Option<Texture>,
    pub shape: Shape,
}

impl ParsedObject {
    pub fn matches(&self, obj: &ObjectSpec) -> bool {
        self.size == obj.size
            && self.color == obj.color
            && self.shape == obj.shape
            && self.texture.is_none_or(|t| t == obj.texture)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedCaption {
    pub first: ParsedObject,
    pub second: Option<(Relation, ParsedObject)>,
}

fn parse_object<'a>(words: &mut std::iter::Peekable<impl Iterator<Item = &'a str>>) -> Result<ParsedObject> {
    let mut next = |what: &str| {
        words
            .next()
            .ok_or_else(|| DtcError::Caption(format!("caption ends before {what}")))
    };
    let bad = |what: &str, w: &str| DtcError::Caption(format!("expected {what}, found '{w}'"));
    let w = next("article")?;
    if w != "a" {
        return Err(bad("'a'", w));
    }
    let w = next("size")?;
    let size = Size::from_word(w).ok_or_else(|| bad("size", w))?;
    let w = next("color")?;
    let color = Color::from_word(w).ok_or_else(|| bad("color", w))?;
    let w = next("shape")?;
    let (texture, w) = match Texture::from_word(w) {
        Some(t) => (Some(t), next("shape")?),
        None => (None, w),
    };
    let shape = Shape::from_word(w).ok_or_else(|| bad("shape", w))?;
    Ok(ParsedObject {
        size,
        color,
        texture,
        shape,
    })
}

/// Inverse of the caption grammar.
pub fn parse_caption(text: &str) -> Result<ParsedCaption> {
    let mut words = text.split_whitespace().peekable();
    let first = parse_object(&mut words)?;
    let Some(w) = words.next() else {
        return Ok(ParsedCaption {
            first,
            second: None,
        });
    };
    let rel = match w {
        "above" => Relation::Above,
        "below" => Relation::Below,
        "left" | "right" => {
            if words.next() != Some("of") {
                return Err(DtcError::Caption(format!("expected 'of' after '{w}'")));
            }
            if w == "left" {
                Relation::LeftOf
            } else {
                Relation::RightOf
            }
        }
        other => return Err(DtcError::Caption(format!("expected relation, found '{other}'"))),
    };
    let second = parse_object(&mut words)?;
    if let Some(extra) = words.next() {
        return Err(DtcError::Caption(format!("trailing word '{extra}'")));
    }
    Ok(ParsedCaption {
        first,
        second: Some((rel, second)),
    })
}
