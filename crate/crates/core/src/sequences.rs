//! Treatment sequence sets and per-patient design matrices.
//!
//! Every sequence set is a complete block (each remaining treatment appears
//! once per sequence) and period balanced (each treatment occupies each
//! period equally often across the set). Sets are always written on the
//! canonical labels `0..r`, with `0` the control.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Square family used to build the sequence sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SequenceFamily {
    /// Cyclic Latin square, `r` sequences.
    Latin,
    /// Williams square, `r` sequences for even `r` and `2r` for odd `r`.
    Williams,
}

impl std::fmt::Display for SequenceFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SequenceFamily::Latin => write!(f, "latin"),
            SequenceFamily::Williams => write!(f, "williams"),
        }
    }
}

impl std::str::FromStr for SequenceFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "latin" => Ok(SequenceFamily::Latin),
            "williams" => Ok(SequenceFamily::Williams),
            other => {
                Err(Error::InvalidInput(format!("unknown sequence family '{other}' (expected latin or williams)")))
            }
        }
    }
}

impl SequenceFamily {
    /// Number of sequences `|S_r|` the family produces for `r` treatments.
    pub fn set_size(self, r: usize) -> usize {
        match self {
            SequenceFamily::Latin => r,
            SequenceFamily::Williams if r.is_multiple_of(2) => r,
            SequenceFamily::Williams => 2 * r,
        }
    }
}

/// The sequences `S_r` used when `r` treatments remain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceSet {
    r: usize,
    sequences: Vec<Vec<usize>>,
}

impl SequenceSet {
    pub fn r(&self) -> usize {
        self.r
    }

    pub fn size(&self) -> usize {
        self.sequences.len()
    }

    pub fn sequences(&self) -> &[Vec<usize>] {
        &self.sequences
    }

    /// Number of sequences that place `treatment` in `period` (both zero based).
    pub fn period_count(&self, period: usize, treatment: usize) -> usize {
        self.sequences.iter().filter(|s| s[period] == treatment).count()
    }
}

/// Build the sequence set for `r >= 2` remaining treatments.
pub fn generate_sequence_set(r: usize, family: SequenceFamily) -> Result<SequenceSet> {
    if r < 2 {
        return Err(Error::InvalidInput(format!("a sequence set needs at least 2 treatments, got {r}")));
    }
    let sequences = match family {
        SequenceFamily::Latin => (0..r).map(|row| (0..r).map(|col| (row + col) % r).collect()).collect(),
        SequenceFamily::Williams => williams(r),
    };
    Ok(SequenceSet { r, sequences })
}

fn williams(r: usize) -> Vec<Vec<usize>> {
    // First row 0, 1, r-1, 2, r-2, ...; subsequent rows add the row index mod r.
    let mut first = Vec::with_capacity(r);
    let (mut lo, mut hi) = (1usize, r - 1);
    first.push(0);
    for k in 1..r {
        if k % 2 == 1 {
            first.push(lo);
            lo += 1;
        } else {
            first.push(hi);
            hi -= 1;
        }
    }
    let mut rows: Vec<Vec<usize>> = (0..r).map(|shift| first.iter().map(|&t| (t + shift) % r).collect()).collect();
    if r % 2 == 1 {
        let mirrored: Vec<Vec<usize>> = rows.iter().map(|row| row.iter().rev().copied().collect()).collect();
        rows.extend(mirrored);
    }
    rows
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Least common multiple of `|S_2|, ..., |S_D|`: the group size must be a
/// multiple of this so every sequence is used equally often at every stage.
pub fn lcm_group_size(d: usize, family: SequenceFamily) -> usize {
    (2..=d.max(2)).map(|r| family.set_size(r)).fold(1, |acc, s| acc / gcd(acc, s) * s)
}

/// Design matrix for one patient on `sequence`, in a trial that started with
/// `d` treatments.
///
/// Columns are ordered `(mu0, pi_2..pi_D, tau_1..tau_{D-1})`. Row `j` is the
/// `j`-th period of the stage; periods restart at 1 in every stage.
pub fn design_matrix(sequence: &[usize], d: usize) -> Result<DMatrix<f64>> {
    let r = sequence.len();
    if r == 0 || r > d {
        return Err(Error::InvalidInput(format!(
            "sequence of length {r} is not valid for a trial with {d} treatments"
        )));
    }
    let mut seen = vec![false; d];
    for &t in sequence {
        if t >= d {
            return Err(Error::InvalidInput(format!("treatment label {t} out of range for {d} treatments")));
        }
        if std::mem::replace(&mut seen[t], true) {
            return Err(Error::InvalidInput(format!("treatment {t} repeated in sequence {sequence:?}")));
        }
    }
    let mut x = DMatrix::zeros(r, 2 * d - 1);
    for (period, &t) in sequence.iter().enumerate() {
        x[(period, 0)] = 1.0;
        if period >= 1 {
            x[(period, period)] = 1.0;
        }
        if t >= 1 {
            x[(period, d - 1 + t)] = 1.0;
        }
    }
    Ok(x)
}
