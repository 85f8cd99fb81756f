use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Signed axis permutation relative to RAS, written as three anatomical
/// letters giving the direction of increasing index along x (fastest), y
/// and z (slowest) storage axes. `"RAS"` is the identity; 48 codes exist.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Orientation {
    /// Per letter position (x, y, z): world axis (0 = R/L, 1 = A/P, 2 = S/I)
    /// and whether it points to the positive (R, A, S) end.
    axes: [(u8, bool); 3],
}

const LETTERS: [(char, u8, bool); 6] =
    [('R', 0, true), ('L', 0, false), ('A', 1, true), ('P', 1, false), ('S', 2, true), ('I', 2, false)];

impl Orientation {
    pub const RAS: Orientation = Orientation { axes: [(0, true), (1, true), (2, true)] };

    /// All 48 signed permutations.
    pub fn all() -> Vec<Orientation> {
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let mut out = Vec::with_capacity(48);
        for p in perms {
            for flips in 0..8u8 {
                out.push(Orientation {
                    axes: [(p[0], flips & 1 == 0), (p[1], flips & 2 == 0), (p[2], flips & 4 == 0)],
                });
            }
        }
        out
    }

    /// For storage axis `a` (0 = z, 1 = y, 2 = x): the world axis it spans
    /// and whether indices increase toward the positive end.
    pub fn storage_axis(&self, a: usize) -> (usize, bool) {
        let (w, pos) = self.axes[2 - a];
        (w as usize, pos)
    }

    pub fn code(&self) -> String {
        self.axes
            .iter()
            .map(|&(w, pos)| LETTERS.iter().find(|l| l.1 == w && l.2 == pos).unwrap().0)
            .collect()
    }
}

impl FromStr for Orientation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let chars: Vec<char> = s.trim().chars().map(|c| c.to_ascii_uppercase()).collect();
        if chars.len() != 3 {
            return Err(Error::Format(format!("orientation code `{s}` must have 3 letters")));
        }
        let mut axes = [(0u8, true); 3];
        let mut seen = [false; 3];
        for (i, c) in chars.iter().enumerate() {
            let &(_, w, pos) = LETTERS
                .iter()
                .find(|l| l.0 == *c)
                .ok_or_else(|| Error::Format(format!("unknown orientation letter `{c}` in `{s}`")))?;
            if seen[w as usize] {
                return Err(Error::Format(format!("orientation code `{s}` repeats an axis")));
            }
            seen[w as usize] = true;
            axes[i] = (w, pos);
        }
        Ok(Orientation { axes })
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.code())
    }
}

impl Serialize for Orientation {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.code())
    }
}

impl<'de> Deserialize<'de> for Orientation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forty_eight_distinct_codes_roundtrip() {
        let all = Orientation::all();
        let mut codes: Vec<String> = all.iter().map(|o| o.code()).collect();
        codes.sort();
        codes.dedup();
        assert_eq!(codes.len(), 48);
        for o in all {
            assert_eq!(o.code().parse::<Orientation>().unwrap(), o);
        }
    }

    #[test]
    fn rejects_unknown_codes() {
        for bad in ["RAX", "RRS", "RA", "RASS", "LRA"] {
            assert!(matches!(bad.parse::<Orientation>(), Err(Error::Format(_))), "{bad}");
        }
    }
}
