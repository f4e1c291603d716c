use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const GENOME_LAYOUT: &str = "(causal,context,rec) per layer";

/// Placement of one adapter relative to the block it wraps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Placement {
    Serial,
    Parallel,
}

impl From<bool> for Placement {
    fn from(bit: bool) -> Self {
        if bit {
            Placement::Parallel
        } else {
            Placement::Serial
        }
    }
}

/// Three bits per mixture-of-experts layer: causal expert, context expert,
/// recommendation adapter. `false` = serial, `true` = parallel.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ArchitectureGenome {
    bits: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerGenes {
    pub causal: Placement,
    pub context: Placement,
    pub rec: Placement,
}

impl ArchitectureGenome {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if !bits.len().is_multiple_of(3) {
            return Err(Error::Invalid(format!(
                "genome length {} is not a multiple of 3",
                bits.len()
            )));
        }
        Ok(Self { bits })
    }

    pub fn all_serial(moe_layers: usize) -> Self {
        Self {
            bits: vec![false; 3 * moe_layers],
        }
    }

    /// Genome whose bits are the low `3·moe_layers` bits of `code`, bit 0 first.
    pub fn from_index(code: u64, moe_layers: usize) -> Self {
        Self {
            bits: (0..3 * moe_layers).map(|i| (code >> i) & 1 == 1).collect(),
        }
    }

    pub fn to_index(&self) -> u64 {
        self.bits
            .iter()
            .enumerate()
            .fold(0, |acc, (i, &b)| acc | ((b as u64) << i))
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn moe_layers(&self) -> usize {
        self.bits.len() / 3
    }

    pub fn layer(&self, k: usize) -> LayerGenes {
        LayerGenes {
            causal: self.bits[3 * k].into(),
            context: self.bits[3 * k + 1].into(),
            rec: self.bits[3 * k + 2].into(),
        }
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn to_string_bits(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }
}

/// `genome.json` contents.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenomeFile {
    pub bits: Vec<u8>,
    pub layout: String,
    pub r: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

impl GenomeFile {
    pub fn new(genome: &ArchitectureGenome, r: usize) -> Self {
        Self {
            bits: genome.bits.iter().map(|&b| b as u8).collect(),
            layout: GENOME_LAYOUT.to_string(),
            r,
            provenance: None,
        }
    }

    pub fn genome(&self) -> Result<ArchitectureGenome> {
        if let Some(bad) = self.bits.iter().find(|&&b| b > 1) {
            return Err(Error::Invalid(format!("genome bit {bad} is not 0/1")));
        }
        ArchitectureGenome::new(self.bits.iter().map(|&b| b == 1).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_round_trip_and_layout() {
        let g = ArchitectureGenome::from_index(0b101_110, 2);
        assert_eq!(g.to_index(), 0b101_110);
        assert_eq!(g.to_string_bits(), "011101");
        let l0 = g.layer(0);
        assert_eq!((l0.causal, l0.context, l0.rec), (Placement::Serial, Placement::Parallel, Placement::Parallel));
    }

    #[test]
    fn file_round_trip() {
        let g = ArchitectureGenome::from_index(5, 1);
        let f = GenomeFile::new(&g, 2);
        let back: GenomeFile = serde_json::from_str(&serde_json::to_string(&f).unwrap()).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.genome().unwrap(), g);
        assert!(ArchitectureGenome::new(vec![true; 4]).is_err());
    }
}
