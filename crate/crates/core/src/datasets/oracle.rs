//! Scoring and filtering from ground-truth attributes.

use std::collections::BTreeMap;

use super::attributes::{Mentions, ShapeAttributes};
use crate::distractors::Triplet;
use crate::encoders::text::TextItem;
use crate::error::{Error, Result};
use crate::protocols::Scorer;

/// Scores a caption by minus the number of its attribute mentions that are
/// false of the shape.
#[derive(Debug, Clone, Default)]
pub struct AttributeOracle {
    pub attributes: BTreeMap<String, ShapeAttributes>,
}

impl AttributeOracle {
    pub fn new(attributes: BTreeMap<String, ShapeAttributes>) -> Self {
        Self { attributes }
    }

    fn attrs(&self, shape_id: &str) -> Result<&ShapeAttributes> {
        self.attributes
            .get(shape_id)
            .ok_or_else(|| Error::NotFound(format!("attributes of shape `{shape_id}`")))
    }
}

impl Scorer for AttributeOracle {
    fn score(&self, shape_id: &str, text: &TextItem) -> Result<f64> {
        Ok(-(Mentions::parse(&text.text).mismatches(self.attrs(shape_id)?) as f64))
    }
}

/// Keeps the triplets whose caption rules out every distractor, i.e. each
/// distractor contradicts at least one mentioned attribute. Returns the
/// kept triplets and the number dropped.
pub fn filter_unambiguous(
    triplets: Vec<Triplet>,
    attributes: &BTreeMap<String, ShapeAttributes>,
) -> Result<(Vec<Triplet>, usize)> {
    let mut kept = Vec::with_capacity(triplets.len());
    let mut dropped = 0;
    for t in triplets {
        let mentions = Mentions::parse(&t.text);
        let mut clear = true;
        for (i, id) in t.shape_ids.iter().enumerate() {
            if i == t.target {
                continue;
            }
            let attrs = attributes.get(id).ok_or_else(|| {
                Error::NotFound(format!("attributes of shape `{id}` (triplet `{}`)", t.id))
            })?;
            clear &= mentions.mismatches(attrs) > 0;
        }
        if clear {
            kept.push(t);
        } else {
            dropped += 1;
        }
    }
    Ok((kept, dropped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::attributes::{caption_with_template, full_caption, ShapeClass};
    use crate::datasets::synthetic::{generate_shapes, SyntheticConfig};
    use crate::distractors::Role;

    #[test]
    fn oracle_margin_is_positive_against_contradicting_shapes() {
        let cfg = SyntheticConfig {
            chairs: 30,
            tables: 30,
            points: 32,
            ..Default::default()
        };
        let shapes = generate_shapes(&cfg).unwrap();
        let attrs: BTreeMap<_, _> = shapes
            .iter()
            .map(|(s, _)| (s.shape_id.clone(), s.attributes))
            .collect();
        let oracle = AttributeOracle::new(attrs.clone());
        for (s, _) in &shapes {
            for t in 0..5 {
                let caption = caption_with_template(&s.attributes, t);
                let text = TextItem::new("c", caption.clone());
                let own = oracle.score(&s.shape_id, &text).unwrap();
                assert_eq!(own, 0.0);
                let mentions = Mentions::parse(&caption);
                for (other, a) in &attrs {
                    if mentions.mismatches(a) > 0 {
                        assert!(own > oracle.score(other, &text).unwrap());
                    }
                }
            }
        }
    }

    #[test]
    fn filter_drops_indistinguishable_distractors() {
        let cfg = SyntheticConfig {
            chairs: 4,
            tables: 0,
            points: 32,
            ..Default::default()
        };
        let shapes = generate_shapes(&cfg).unwrap();
        let mut attrs: BTreeMap<_, _> = shapes
            .iter()
            .map(|(s, _)| (s.shape_id.clone(), s.attributes))
            .collect();
        let reference = attrs["chair_0000"];
        assert_eq!(reference.class, ShapeClass::Chair);
        attrs.insert("twin".into(), reference);
        let make = |other: &str| Triplet {
            id: other.into(),
            shape_ids: vec!["chair_0000".into(), other.into()],
            roles: vec![Role::Reference, Role::Hard],
            text_id: "c".into(),
            text: full_caption(&reference),
            target: 0,
        };
        let (kept, dropped) =
            filter_unambiguous(vec![make("twin"), make("chair_0001")], &attrs).unwrap();
        assert_eq!(dropped, 1);
        assert!(kept.iter().all(|t| t.id != "twin"));
    }
}
