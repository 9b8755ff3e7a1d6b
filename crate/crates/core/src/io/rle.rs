//! Column-major run-length encoding of binary masks.
//!
//! Runs alternate starting with zeros, so a mask whose first pixel is set
//! starts with a zero-length run.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`.
    pub size: [usize; 2],
    pub counts: Vec<u32>,
}

pub fn rle_encode(mask: &BinaryMask) -> Rle {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for x in 0..mask.width {
        for y in 0..mask.height {
            let v = mask.get(x, y);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    Rle {
        size: [mask.height, mask.width],
        counts,
    }
}

pub fn rle_decode(rle: &Rle) -> Result<BinaryMask> {
    let [height, width] = rle.size;
    let total: u64 = rle.counts.iter().map(|&c| c as u64).sum();
    if total != (height * width) as u64 {
        return Err(Error::MalformedRle(format!(
            "runs cover {total} pixels, mask has {}",
            height * width
        )));
    }
    let mut mask = BinaryMask::new(width, height);
    let mut pos = 0usize;
    for (i, &c) in rle.counts.iter().enumerate() {
        let on = i % 2 == 1;
        for p in pos..pos + c as usize {
            if on {
                mask.set(p / height, p % height, true);
            }
        }
        pos += c as usize;
    }
    Ok(mask)
}

impl fmt::Display for Rle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.counts.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

impl Rle {
    /// Parses the space-separated form produced by `Display`.
    pub fn parse(size: [usize; 2], text: &str) -> Result<Self> {
        let counts = text
            .split_whitespace()
            .map(|t| {
                t.parse::<u32>()
                    .map_err(|_| Error::MalformedRle(format!("bad run length {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if counts.is_empty() {
            return Err(Error::MalformedRle("no runs".into()));
        }
        let rle = Self { size, counts };
        rle_decode(&rle)?;
        Ok(rle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(rows: &[&[u8]]) -> BinaryMask {
        let h = rows.len();
        let w = rows[0].len();
        let data = rows
            .iter()
            .flat_map(|r| r.iter().map(|&b| b == 1))
            .collect();
        BinaryMask::from_data(w, h, data).unwrap()
    }

    #[test]
    fn examples() {
        assert_eq!(rle_encode(&mask(&[&[0, 0], &[0, 0]])).counts, vec![4]);
        assert_eq!(rle_encode(&mask(&[&[1, 1], &[1, 1]])).counts, vec![0, 4]);
        // column-major scan of rows [0,0],[1,1] is 0,1,0,1
        assert_eq!(
            rle_encode(&mask(&[&[0, 0], &[1, 1]])).counts,
            vec![1, 1, 1, 1]
        );
        // a 2x2 checkerboard scans as 0,1,1,0
        assert_eq!(rle_encode(&mask(&[&[0, 1], &[1, 0]])).counts, vec![1, 2, 1]);
    }

    #[test]
    fn decode_inverts_encode() {
        let m = mask(&[&[1, 0, 1], &[0, 0, 1]]);
        let r = rle_encode(&m);
        assert_eq!(r.size, [2, 3]);
        assert_eq!(rle_decode(&r).unwrap(), m);
    }

    #[test]
    fn malformed() {
        let bad = Rle {
            size: [2, 2],
            counts: vec![1, 1],
        };
        assert!(matches!(rle_decode(&bad), Err(Error::MalformedRle(_))));
        assert!(Rle::parse([2, 2], "1 x 3").is_err());
        assert!(Rle::parse([2, 2], "").is_err());
        let r = Rle::parse([2, 2], "1 2 1").unwrap();
        assert_eq!(r.to_string(), "1 2 1");
    }
}
