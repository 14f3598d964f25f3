use std::fmt;
use std::str::FromStr;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

/// The five editable facial regions. Serialized as the stable codes 0..=4;
/// deserialization also accepts the lowercase names.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RoiLabel {
    Hair = 0,
    Skin = 1,
    Nose = 2,
    Eyes = 3,
    LipsMouth = 4,
}

impl RoiLabel {
    pub const ALL: [RoiLabel; 5] = [RoiLabel::Hair, RoiLabel::Skin, RoiLabel::Nose, RoiLabel::Eyes, RoiLabel::LipsMouth];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            RoiLabel::Hair => "hair",
            RoiLabel::Skin => "skin",
            RoiLabel::Nose => "nose",
            RoiLabel::Eyes => "eyes",
            RoiLabel::LipsMouth => "lips_mouth",
        }
    }
}

impl fmt::Display for RoiLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RoiLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().to_ascii_lowercase();
        if let Ok(code) = t.parse::<u8>() {
            return Self::from_code(code).ok_or_else(|| Error::Invalid(format!("ROI code {code} out of range 0..=4")));
        }
        match t.as_str() {
            "hair" => Ok(RoiLabel::Hair),
            "skin" => Ok(RoiLabel::Skin),
            "nose" => Ok(RoiLabel::Nose),
            "eyes" => Ok(RoiLabel::Eyes),
            "lips_mouth" | "lips+mouth" | "mouth" => Ok(RoiLabel::LipsMouth),
            _ => Err(Error::Invalid(format!("unknown ROI {s:?}; expected one of hair, skin, nose, eyes, lips_mouth"))),
        }
    }
}

impl Serialize for RoiLabel {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.code())
    }
}

impl<'de> Deserialize<'de> for RoiLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct RoiVisitor;
        impl Visitor<'_> for RoiVisitor {
            type Value = RoiLabel;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("an ROI code 0..=4 or name")
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<RoiLabel, E> {
                u8::try_from(v)
                    .ok()
                    .and_then(RoiLabel::from_code)
                    .ok_or_else(|| E::custom(format!("ROI code {v} out of range")))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<RoiLabel, E> {
                u64::try_from(v).map_err(|_| E::custom("negative ROI code")).and_then(|v| self.visit_u64(v))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<RoiLabel, E> {
                v.parse().map_err(E::custom)
            }
        }
        d.deserialize_any(RoiVisitor)
    }
}
