//! The four style attributes shared by rendering, prompting and the classifier.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Effusion,
    Device,
    Marker,
    Grid,
}

impl Attribute {
    pub const ALL: [Attribute; 4] = [
        Attribute::Effusion,
        Attribute::Device,
        Attribute::Marker,
        Attribute::Grid,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Effusion => "effusion",
            Attribute::Device => "device",
            Attribute::Marker => "marker",
            Attribute::Grid => "grid",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        Attribute::ALL
            .into_iter()
            .find(|a| a.name() == lower)
            .ok_or_else(|| Error::UnknownAttribute(s.to_string()))
    }
}
