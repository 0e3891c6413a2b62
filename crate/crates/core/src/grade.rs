//! Gleason and ISUP grade arithmetic plus the cumulative ordinal label code.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of ordinal bits used to encode an ISUP grade.
pub const ORDINAL_BITS: usize = 5;
/// Number of ISUP classes (0 = benign, 1..=5 cancer).
pub const ISUP_CLASSES: usize = 6;

/// Gleason grade of a growth pattern. `Benign` stands for "no cancer" (0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum GleasonGrade {
    Benign,
    G3,
    G4,
    G5,
}

impl GleasonGrade {
    pub const ALL: [GleasonGrade; 4] = [
        GleasonGrade::Benign,
        GleasonGrade::G3,
        GleasonGrade::G4,
        GleasonGrade::G5,
    ];

    /// Clinical value: 0, 3, 4 or 5.
    pub fn value(self) -> u8 {
        match self {
            GleasonGrade::Benign => 0,
            GleasonGrade::G3 => 3,
            GleasonGrade::G4 => 4,
            GleasonGrade::G5 => 5,
        }
    }

    /// Position in the 4-way instance classifier output (benign, GG3, GG4, GG5).
    pub fn class_index(self) -> usize {
        match self {
            GleasonGrade::Benign => 0,
            GleasonGrade::G3 => 1,
            GleasonGrade::G4 => 2,
            GleasonGrade::G5 => 3,
        }
    }

    pub fn from_class_index(index: usize) -> Result<Self> {
        Self::ALL
            .get(index)
            .copied()
            .ok_or_else(|| Error::InvalidLabel(format!("class index {index} out of range")))
    }

    pub fn is_cancer(self) -> bool {
        self != GleasonGrade::Benign
    }
}

impl TryFrom<u8> for GleasonGrade {
    type Error = Error;

    fn try_from(value: u8) -> Result<Self> {
        match value {
            0 => Ok(GleasonGrade::Benign),
            3 => Ok(GleasonGrade::G3),
            4 => Ok(GleasonGrade::G4),
            5 => Ok(GleasonGrade::G5),
            other => Err(Error::InvalidLabel(format!(
                "Gleason grade must be one of 0, 3, 4, 5 (got {other})"
            ))),
        }
    }
}

impl From<GleasonGrade> for u8 {
    fn from(g: GleasonGrade) -> u8 {
        g.value()
    }
}

impl fmt::Display for GleasonGrade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.value())
    }
}

/// Slide-level ISUP grade in `0..=5`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct IsupGrade(u8);

impl IsupGrade {
    pub const BENIGN: IsupGrade = IsupGrade(0);

    pub fn new(value: u8) -> Result<Self> {
        if value as usize >= ISUP_CLASSES {
            return Err(Error::InvalidLabel(format!(
                "ISUP grade must be in 0..=5 (got {value})"
            )));
        }
        Ok(IsupGrade(value))
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_cancer(self) -> bool {
        self.0 > 0
    }

    pub fn all() -> impl Iterator<Item = IsupGrade> {
        (0..ISUP_CLASSES as u8).map(IsupGrade)
    }
}

impl TryFrom<u8> for IsupGrade {
    type Error = Error;

    fn try_from(value: u8) -> Result<Self> {
        IsupGrade::new(value)
    }
}

impl From<IsupGrade> for u8 {
    fn from(g: IsupGrade) -> u8 {
        g.0
    }
}

impl fmt::Display for IsupGrade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Cumulative ordinal code of an ISUP grade: the first `grade` bits are set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OrdinalTarget {
    bits: [u8; ORDINAL_BITS],
}

impl OrdinalTarget {
    pub fn bits(&self) -> &[u8; ORDINAL_BITS] {
        &self.bits
    }

    pub fn sum(&self) -> u8 {
        self.bits.iter().sum()
    }

    /// Bits as reals, ready for a binary cross-entropy target.
    pub fn as_f64(&self) -> [f64; ORDINAL_BITS] {
        self.bits.map(f64::from)
    }
}

/// Maps a (primary, secondary) Gleason pair onto the ISUP grade group.
///
/// Benign is only valid as the pair (0, 0); mixing benign with a cancer pattern
/// is rejected.
pub fn isup_from_gleason(primary: GleasonGrade, secondary: GleasonGrade) -> Result<IsupGrade> {
    use GleasonGrade::*;
    let grade = match (primary, secondary) {
        (Benign, Benign) => 0,
        (G3, G3) => 1,
        (G3, G4) => 2,
        (G4, G3) => 3,
        (G4, G4) | (G3, G5) | (G5, G3) => 4,
        (G4, G5) | (G5, G4) | (G5, G5) => 5,
        (p, s) => {
            return Err(Error::InvalidLabel(format!(
                "mixed benign/cancer Gleason pair ({p}, {s})"
            )))
        }
    };
    Ok(IsupGrade(grade))
}

/// All ten valid Gleason pairs with their ISUP grade.
pub fn valid_gleason_pairs() -> Vec<(GleasonGrade, GleasonGrade, IsupGrade)> {
    let mut out = Vec::with_capacity(10);
    for p in GleasonGrade::ALL {
        for s in GleasonGrade::ALL {
            if let Ok(g) = isup_from_gleason(p, s) {
                out.push((p, s, g));
            }
        }
    }
    out
}

pub fn encode_ordinal(grade: IsupGrade) -> OrdinalTarget {
    let mut bits = [0u8; ORDINAL_BITS];
    for b in bits.iter_mut().take(grade.index()) {
        *b = 1;
    }
    OrdinalTarget { bits }
}

/// Decodes sigmoid outputs by counting the positions strictly above `threshold`.
///
/// The count rule is position independent, so an isolated non-monotone output
/// still yields a grade.
pub fn decode_ordinal(sigmoid_outputs: &[f64; ORDINAL_BITS], threshold: f64) -> Result<IsupGrade> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Parameter(format!(
            "decoding threshold must lie in (0, 1), got {threshold}"
        )));
    }
    for (index, &value) in sigmoid_outputs.iter().enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::InvalidProbability { index, value });
        }
    }
    let count = sigmoid_outputs.iter().filter(|&&p| p > threshold).count();
    Ok(IsupGrade(count as u8))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gg(v: u8) -> GleasonGrade {
        GleasonGrade::try_from(v).unwrap()
    }

    #[test]
    fn isup_mapping_examples() {
        assert_eq!(isup_from_gleason(gg(3), gg(3)).unwrap().value(), 1);
        assert_eq!(isup_from_gleason(gg(0), gg(0)).unwrap().value(), 0);
        assert_eq!(isup_from_gleason(gg(4), gg(3)).unwrap().value(), 3);
        assert_eq!(isup_from_gleason(gg(5), gg(5)).unwrap().value(), 5);
    }

    #[test]
    fn mixed_pairs_rejected() {
        let mut rejected = 0;
        for p in GleasonGrade::ALL {
            for s in GleasonGrade::ALL {
                let mixed = p.is_cancer() != s.is_cancer();
                match isup_from_gleason(p, s) {
                    Ok(_) => assert!(!mixed),
                    Err(Error::InvalidLabel(_)) => {
                        assert!(mixed);
                        rejected += 1;
                    }
                    Err(e) => panic!("unexpected error {e}"),
                }
            }
        }
        assert_eq!(rejected, 6);
        assert_eq!(valid_gleason_pairs().len(), 10);
    }

    #[test]
    fn gleason_rejects_one_and_two() {
        assert!(GleasonGrade::try_from(1).is_err());
        assert!(GleasonGrade::try_from(2).is_err());
        let parsed: std::result::Result<GleasonGrade, _> = serde_json::from_str("2");
        assert!(parsed.is_err());
    }

    #[test]
    fn encode_examples() {
        assert_eq!(encode_ordinal(IsupGrade::new(2).unwrap()).bits(), &[1, 1, 0, 0, 0]);
        assert_eq!(encode_ordinal(IsupGrade::new(0).unwrap()).bits(), &[0, 0, 0, 0, 0]);
        assert_eq!(encode_ordinal(IsupGrade::new(5).unwrap()).bits(), &[1, 1, 1, 1, 1]);
    }

    #[test]
    fn decode_examples() {
        let d = |v: [f64; 5]| decode_ordinal(&v, 0.5).unwrap().value();
        assert_eq!(d([0.9, 0.8, 0.7, 0.2, 0.1]), 3);
        assert_eq!(d([0.1, 0.2, 0.1, 0.05, 0.0]), 0);
        assert_eq!(d([0.9, 0.2, 0.8, 0.1, 0.05]), 2);
        // strict inequality at the threshold
        assert_eq!(d([0.5, 0.5, 0.5, 0.5, 0.5]), 0);
    }

    #[test]
    fn decode_rejects_out_of_range() {
        let err = decode_ordinal(&[0.1, 1.2, 0.0, 0.0, 0.0], 0.5).unwrap_err();
        assert!(matches!(err, Error::InvalidProbability { index: 1, .. }));
        assert!(decode_ordinal(&[0.1, f64::NAN, 0.0, 0.0, 0.0], 0.5).is_err());
        assert!(decode_ordinal(&[0.0; 5], 1.0).is_err());
    }

    proptest! {
        #[test]
        fn ordinal_round_trip(g in 0u8..6) {
            let grade = IsupGrade::new(g).unwrap();
            let t = encode_ordinal(grade);
            prop_assert_eq!(t.sum(), g);
            prop_assert!(t.bits().windows(2).all(|w| w[0] >= w[1]));
            prop_assert_eq!(decode_ordinal(&t.as_f64(), 0.5).unwrap(), grade);
        }

        #[test]
        fn decode_is_count(p in proptest::array::uniform5(0.0f64..=1.0)) {
            let expected = p.iter().filter(|&&x| x > 0.5).count() as u8;
            prop_assert_eq!(decode_ordinal(&p, 0.5).unwrap().value(), expected);
        }
    }
}
