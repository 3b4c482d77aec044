//! Built-in model families and JSON-defined custom families.

use serde::{Deserialize, Serialize};

use crate::error::{GeoError, Result};
use crate::fields::{Family, VectorField};

pub const BUILTIN_NAMES: [&str; 5] = ["euclid2in3", "heisenberg", "grushin", "martinet", "shear"];

fn fields(rows: &[&[&str]]) -> Result<Vec<VectorField>> {
    rows.iter()
        .enumerate()
        .map(|(j, r)| VectorField::parse(r, vec![j]))
        .collect()
}

pub fn builtin(name: &str) -> Result<Family> {
    match name {
        "euclid2in3" => Family::new(
            name,
            fields(&[&["1", "0", "0"], &["0", "1", "0"]])?,
            1,
            vec![(-10.0, 10.0); 3],
        ),
        "heisenberg" => Family::new(
            name,
            fields(&[&["1", "0", "-0.5*x2"], &["0", "1", "0.5*x1"]])?,
            2,
            vec![(-2.0, 2.0); 3],
        ),
        "grushin" => Family::new(
            name,
            fields(&[&["1", "0"], &["0", "x1"]])?,
            2,
            vec![(-2.0, 2.0); 2],
        ),
        "martinet" => Family::new(
            name,
            fields(&[&["1", "0", "0"], &["0", "1", "x1^2"]])?,
            3,
            vec![(-2.0, 2.0); 3],
        ),
        "shear" => Family::new(
            name,
            fields(&[&["1", "0", "0"], &["0", "x3", "0"]])?,
            2,
            vec![(-2.0, 2.0); 3],
        ),
        other => Err(GeoError::invalid(format!(
            "unknown family '{other}' (known: {})",
            BUILTIN_NAMES.join(", ")
        ))),
    }
}

/// Default experiment center for a built-in family.
pub fn default_center(name: &str) -> Vec<f64> {
    match name {
        "grushin" => vec![0.0, 0.0],
        "martinet" => vec![0.3, 0.2, 0.1],
        "shear" => vec![0.0, 0.0, 1.0],
        _ => vec![0.0, 0.0, 0.0],
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub coeffs: Vec<String>,
}

/// JSON form of a custom family.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    #[serde(default)]
    pub name: Option<String>,
    pub dim: usize,
    pub step: usize,
    pub fields: Vec<FieldSpec>,
    pub domain_box: Vec<[f64; 2]>,
}

impl FamilySpec {
    pub fn build(&self) -> Result<Family> {
        let mut hor = Vec::with_capacity(self.fields.len());
        for (j, f) in self.fields.iter().enumerate() {
            if f.coeffs.len() != self.dim {
                return Err(GeoError::DimensionMismatch {
                    expected: self.dim,
                    got: f.coeffs.len(),
                });
            }
            let refs: Vec<&str> = f.coeffs.iter().map(|s| s.as_str()).collect();
            hor.push(VectorField::parse(&refs, vec![j])?);
        }
        Family::new(
            self.name.clone().unwrap_or_else(|| "custom".into()),
            hor,
            self.step,
            self.domain_box.iter().map(|b| (b[0], b[1])).collect(),
        )
    }
}

pub fn family_from_json(src: &str) -> Result<Family> {
    let spec: FamilySpec =
        serde_json::from_str(src).map_err(|e| GeoError::Parse(format!("family JSON: {e}")))?;
    spec.build()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_builtins_load() {
        for name in BUILTIN_NAMES {
            let f = builtin(name).unwrap();
            assert_eq!(f.m(), 2);
            assert!(f.contains(&default_center(name)));
        }
        assert!(builtin("nope").is_err());
    }

    #[test]
    fn heisenberg_coefficients() {
        let f = builtin("heisenberg").unwrap();
        assert_eq!(f.horizontal[0].eval(&[1.0, 2.0, 3.0]), vec![1.0, 0.0, -1.0]);
        assert_eq!(f.horizontal[1].eval(&[1.0, 2.0, 3.0]), vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn json_family_round_trip() {
        let src = r#"{"dim": 2, "step": 2, "fields": [{"coeffs": ["1", "0"]}, {"coeffs": ["0", "x1"]}],
                      "domain_box": [[-1, 1], [-1, 1]]}"#;
        let f = family_from_json(src).unwrap();
        assert_eq!(f.horizontal[1].eval(&[0.5, 0.0]), vec![0.0, 0.5]);
        let bad = r#"{"dim": 2, "step": 2, "fields": [], "domain_box": [], "extra": 1}"#;
        assert!(family_from_json(bad).is_err());
        let short =
            r#"{"dim": 2, "step": 1, "fields": [{"coeffs": ["1"]}], "domain_box": [[0,1],[0,1]]}"#;
        assert!(matches!(
            family_from_json(short),
            Err(GeoError::DimensionMismatch { .. })
        ));
    }
}
