use std::collections::BTreeMap;

use rand::Rng;
use serde_json::{Map, Number, Value};

/// Scalar type carried by a generated field. Fixed per field so that every
/// value of a shape has the same schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    String,
    Integer,
    Decimal,
    Boolean,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
}

/// Structure of one family of generated state values: scalar top-level
/// fields plus at most one nested object of scalars.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeSpec {
    pub name: String,
    pub top: Vec<FieldSpec>,
    pub nested: Option<(String, Vec<FieldSpec>)>,
}

const KINDS: [FieldKind; 4] = [FieldKind::String, FieldKind::Integer, FieldKind::Boolean, FieldKind::Decimal];

fn fields(prefix: &str, count: usize) -> Vec<FieldSpec> {
    (0..count)
        .map(|i| FieldSpec {
            name: format!("{prefix}{:02}", i + 1),
            kind: KINDS[i % KINDS.len()],
        })
        .collect()
}

impl ShapeSpec {
    /// Flat shape with `count` top-level fields.
    pub fn flat(name: &str, prefix: &str, count: usize) -> Self {
        ShapeSpec {
            name: name.into(),
            top: fields(prefix, count),
            nested: None,
        }
    }

    /// Two-level shape: `first_level` top-level properties, one of which is an
    /// object holding `second_level` properties.
    pub fn two_level(name: &str, prefix: &str, first_level: usize, second_level: usize) -> Self {
        assert!(first_level >= 1, "the nested object is itself a first-level property");
        ShapeSpec {
            name: name.into(),
            top: fields(prefix, first_level - 1),
            nested: Some((format!("{prefix}_detail"), fields(&format!("{prefix}_d"), second_level))),
        }
    }

    pub fn level_count(&self) -> usize {
        if self.nested.is_some() {
            2
        } else {
            1
        }
    }

    pub fn props_per_level(&self) -> Vec<usize> {
        match &self.nested {
            Some((_, inner)) => vec![self.top.len() + 1, inner.len()],
            None => vec![self.top.len()],
        }
    }

    /// A value of this shape with random scalar content.
    pub fn instantiate(&self, rng: &mut impl Rng) -> Value {
        let mut obj = fill(&self.top, rng);
        if let Some((name, inner)) = &self.nested {
            obj.insert(name.clone(), Value::Object(fill(inner, rng)));
        }
        Value::Object(obj)
    }
}

fn fill(fields: &[FieldSpec], rng: &mut impl Rng) -> Map<String, Value> {
    fields
        .iter()
        .map(|f| {
            let v = match f.kind {
                FieldKind::String => {
                    let n: u32 = rng.random_range(0..1_000_000);
                    Value::String(format!("v{n:06}"))
                }
                FieldKind::Integer => Value::Number(rng.random_range(0..100_000i64).into()),
                FieldKind::Decimal => {
                    let cents: i64 = rng.random_range(0..10_000_000);
                    Number::from_f64(cents as f64 / 100.0).map(Value::Number).unwrap_or(Value::Null)
                }
                FieldKind::Boolean => Value::Bool(rng.random_bool(0.5)),
            };
            (f.name.clone(), v)
        })
        .collect()
}

/// Shapes available to the generator, keyed by name.
#[derive(Debug, Clone)]
pub struct ShapeCatalog {
    shapes: BTreeMap<String, ShapeSpec>,
}

impl Default for ShapeCatalog {
    fn default() -> Self {
        ShapeCatalog::builtin()
    }
}

impl ShapeCatalog {
    /// The four report shapes of the reference workload.
    pub fn builtin() -> Self {
        let mut c = ShapeCatalog {
            shapes: BTreeMap::new(),
        };
        c.register(ShapeSpec::flat("A", "a", 14));
        c.register(ShapeSpec::two_level("B", "b", 11, 4));
        c.register(ShapeSpec::flat("C", "c", 24));
        c.register(ShapeSpec::two_level("D", "d", 12, 15));
        c
    }

    pub fn register(&mut self, shape: ShapeSpec) {
        self.shapes.insert(shape.name.clone(), shape);
    }

    pub fn get(&self, name: &str) -> Option<&ShapeSpec> {
        self.shapes.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.shapes.keys().map(String::as_str)
    }
}
