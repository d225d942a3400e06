//! Attribute prompts and their fixed-dimension embeddings.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::attr::Attribute;
use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const EMBED_DIM: usize = 16;
const MAX_COSINE: f64 = 0.5;
const MAX_ATTEMPTS: usize = 1000;

/// A set of attributes; the empty set is the neutral prompt.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttributeSpec(pub BTreeSet<Attribute>);

impl AttributeSpec {
    pub fn neutral() -> Self {
        Self::default()
    }

    pub fn of(attrs: &[Attribute]) -> Self {
        Self(attrs.iter().copied().collect())
    }

    pub fn is_neutral(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = Attribute> + '_ {
        self.0.iter().copied()
    }

    /// All 16 subsets of the attribute set.
    pub fn all() -> Vec<AttributeSpec> {
        (0..16u32)
            .map(|bits| {
                Self(
                    Attribute::ALL
                        .into_iter()
                        .filter(|a| bits & (1 << a.index()) != 0)
                        .collect(),
                )
            })
            .collect()
    }
}

impl std::fmt::Display for AttributeSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&format_prompt(self))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Embedding(pub [f64; EMBED_DIM]);

impl Embedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn distance(&self, other: &Embedding) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub base_vector: [f64; EMBED_DIM],
    pub token_vectors: BTreeMap<Attribute, [f64; EMBED_DIM]>,
    pub seed: u64,
}

fn cosine(a: &[f64; EMBED_DIM], b: &[f64; EMBED_DIM]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub fn make_table(seed: u64) -> Result<EmbeddingTable> {
    let mut rng = RngStream::new(seed, 0x454d_4245_4400_0000);
    let mut base_vector = [0.0; EMBED_DIM];
    rng.fill_normal(&mut base_vector);
    let mut accepted: Vec<(Attribute, [f64; EMBED_DIM])> = Vec::new();
    for a in Attribute::ALL {
        let mut found = None;
        for _ in 0..MAX_ATTEMPTS {
            let mut v = [0.0; EMBED_DIM];
            rng.fill_normal(&mut v);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            if accepted.iter().all(|(_, u)| cosine(u, &v).abs() <= MAX_COSINE) {
                found = Some(v);
                break;
            }
        }
        let v = found.ok_or_else(|| {
            Error::invalid("seed", format!("no token vector for {a} within {MAX_ATTEMPTS} attempts"))
        })?;
        accepted.push((a, v));
    }
    Ok(EmbeddingTable {
        base_vector,
        token_vectors: accepted.into_iter().collect(),
        seed,
    })
}

/// `base + sum of the spec's token vectors`.
pub fn embed(spec: &AttributeSpec, table: &EmbeddingTable) -> Result<Embedding> {
    let mut v = table.base_vector;
    for a in spec.iter() {
        let t = table
            .token_vectors
            .get(&a)
            .ok_or_else(|| Error::UnknownAttribute(a.name().to_string()))?;
        for (x, y) in v.iter_mut().zip(t) {
            *x += y;
        }
    }
    Ok(Embedding(v))
}

pub fn format_prompt(spec: &AttributeSpec) -> String {
    if spec.is_neutral() {
        "neutral phantom".to_string()
    } else {
        let names: Vec<&str> = spec.iter().map(Attribute::name).collect();
        format!("phantom with {}", names.join(" and "))
    }
}

fn words(text: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in text.char_indices() {
        match (ch.is_whitespace(), start) {
            (true, Some(s)) => {
                out.push((s, &text[s..i]));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, &text[s..]));
    }
    out
}

/// Parses `neutral phantom` or `phantom with <attr>[ and <attr>]*`.
pub fn parse_prompt(text: &str) -> Result<AttributeSpec> {
    let toks = words(text);
    let err = |pos: usize, tok: &str, reason: &str| Error::Parse {
        position: pos,
        token: tok.to_string(),
        reason: reason.to_string(),
    };
    let lower = |s: &str| s.to_ascii_lowercase();
    let Some(&(p0, w0)) = toks.first() else {
        return Err(err(0, "", "empty prompt"));
    };
    match lower(w0).as_str() {
        "neutral" => {
            match toks.get(1) {
                Some(&(_, w)) if lower(w) == "phantom" => {}
                Some(&(p, w)) => return Err(err(p, w, "expected `phantom`")),
                None => return Err(err(text.len(), "", "expected `phantom`")),
            }
            if let Some(&(p, w)) = toks.get(2) {
                return Err(err(p, w, "unexpected trailing text"));
            }
            Ok(AttributeSpec::neutral())
        }
        "phantom" => {
            match toks.get(1) {
                Some(&(_, w)) if lower(w) == "with" => {}
                Some(&(p, w)) => return Err(err(p, w, "expected `with`")),
                None => return Err(err(text.len(), "", "expected `with`")),
            }
            let mut set = BTreeSet::new();
            let mut i = 2;
            loop {
                let Some(&(p, w)) = toks.get(i) else {
                    return Err(err(text.len(), "", "expected an attribute"));
                };
                let a: Attribute = w
                    .parse()
                    .map_err(|_| err(p, w, "unknown attribute"))?;
                if !set.insert(a) {
                    return Err(err(p, w, "duplicate attribute"));
                }
                match toks.get(i + 1) {
                    None => break,
                    Some(&(_, w)) if lower(w) == "and" => i += 2,
                    Some(&(p, w)) => return Err(err(p, w, "expected `and`")),
                }
            }
            Ok(AttributeSpec(set))
        }
        _ => Err(err(p0, w0, "expected `neutral` or `phantom`")),
    }
}
