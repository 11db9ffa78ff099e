//! Dataset container.
//!
//! Layout (all integers little-endian, floats IEEE-754 binary64 little-endian):
//!
//! ```text
//! magic          8 bytes   "MILDADS1"
//! meta_len       u64
//! metadata       meta_len bytes of UTF-8 JSON (see `ContainerMetadata`)
//! n_rows         u64       one row per instance, bags contiguous and in order
//! n_cols         u64       feature dimension D
//! features       n_rows * n_cols f64, row-major
//! bag_id         n_rows i64
//! index_in_bag   n_rows i64
//! oracle_label   n_rows i64   (-1 when absent)
//! bag_label      n_rows i64
//! domain         n_rows i64   (0 source, 1 target)
//! ```
//!
//! The metadata record repeats the derived counts so a reader can sanity-check
//! the columns; they are recomputed on write and verified on read.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::{Bag, Domain, DomainDataset, Split};

const MAGIC: &[u8; 8] = b"MILDADS1";
pub const FORMAT_VERSION: u32 = 1;
const COLUMNS: [&str; 5] = ["bag_id", "index_in_bag", "oracle_label", "bag_label", "domain"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainerMetadata {
    pub format: String,
    pub version: u32,
    pub byte_order: String,
    pub float_width: u32,
    pub dim: usize,
    pub split: Split,
    pub domains: Vec<Domain>,
    pub n_bags: usize,
    pub n_instances: usize,
    pub instance_counts: Vec<usize>,
    pub columns: Vec<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub generator: Option<serde_json::Value>,
}

/// Provenance stored next to the data.
#[derive(Clone, Debug, Default)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub generator: Option<serde_json::Value>,
}

pub fn encode(dataset: &DomainDataset, provenance: &Provenance) -> Result<Vec<u8>> {
    let dim = dataset.dim().unwrap_or(0);
    let mut domains: Vec<Domain> = Vec::new();
    for bag in dataset.bags() {
        if !domains.contains(&bag.domain()) {
            domains.push(bag.domain());
        }
    }
    let meta = ContainerMetadata {
        format: "milda-dataset".into(),
        version: FORMAT_VERSION,
        byte_order: "little".into(),
        float_width: 64,
        dim,
        split: dataset.split(),
        domains,
        n_bags: dataset.n_bags(),
        n_instances: dataset.n_instances(),
        instance_counts: dataset.instance_counts(),
        columns: COLUMNS.iter().map(|s| s.to_string()).collect(),
        seed: provenance.seed,
        generator: provenance.generator.clone(),
    };
    let meta_bytes = serde_json::to_vec(&meta)?;
    let n = dataset.n_instances();

    let mut out = Vec::with_capacity(32 + meta_bytes.len() + n * (dim + COLUMNS.len()) * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_bytes);
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(dim as u64).to_le_bytes());
    for inst in dataset.instances() {
        for &v in inst.features() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut push_col = |f: &dyn Fn(&Bag, &crate::types::Instance) -> i64| {
        for bag in dataset.bags() {
            for inst in bag.instances() {
                out.extend_from_slice(&f(bag, inst).to_le_bytes());
            }
        }
    };
    push_col(&|_, i| i.bag_id() as i64);
    push_col(&|_, i| i.index_in_bag() as i64);
    push_col(&|b, i| raw_label(b, i));
    push_col(&|b, _| b.label() as i64);
    push_col(&|b, _| b.domain().code());
    Ok(out)
}

fn raw_label(_bag: &Bag, inst: &crate::types::Instance) -> i64 {
    // Serialization is not a training path; it copies labels verbatim.
    inst.raw_oracle_label().map_or(-1, i64::from)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(DomainDataset, ContainerMetadata)> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let meta_len = cur.u64()? as usize;
    let meta: ContainerMetadata = serde_json::from_slice(cur.take(meta_len)?)?;
    if meta.version != FORMAT_VERSION || meta.format != "milda-dataset" {
        return Err(Error::Format(format!(
            "unsupported container {} v{}",
            meta.format, meta.version
        )));
    }
    let n = cur.u64()? as usize;
    let dim = cur.u64()? as usize;
    if n != meta.n_instances || (n > 0 && dim != meta.dim) {
        return Err(Error::Format("header disagrees with metadata".into()));
    }
    let mut feats = Vec::with_capacity(n);
    for _ in 0..n {
        let mut row = Vec::with_capacity(dim);
        for _ in 0..dim {
            row.push(cur.f64()?);
        }
        feats.push(row);
    }
    let mut cols: Vec<Vec<i64>> = Vec::with_capacity(COLUMNS.len());
    for _ in COLUMNS {
        let mut col = Vec::with_capacity(n);
        for _ in 0..n {
            col.push(cur.i64()?);
        }
        cols.push(col);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format("trailing bytes".into()));
    }

    let mut bags = Vec::new();
    let mut feats = feats.into_iter();
    let mut row = 0;
    while row < n {
        let bag_id = cols[0][row];
        let mut end = row;
        while end < n && cols[0][end] == bag_id {
            end += 1;
        }
        let bag_label = cols[3][row];
        let domain = Domain::from_code(cols[4][row])
            .ok_or_else(|| Error::Format(format!("bad domain code {}", cols[4][row])))?;
        let mut members = Vec::with_capacity(end - row);
        for r in row..end {
            if cols[1][r] != (r - row) as i64 {
                return Err(Error::Format(format!("bag {bag_id}: index_in_bag out of order")));
            }
            if cols[3][r] != bag_label || cols[4][r] != cols[4][row] {
                return Err(Error::Format(format!("bag {bag_id}: inconsistent bag columns")));
            }
            let label = match cols[2][r] {
                -1 => None,
                y @ (0 | 1) => Some(y as u8),
                y => return Err(Error::Format(format!("bad oracle label {y}"))),
            };
            members.push((feats.next().expect("row count checked"), label));
        }
        if !(0..=1).contains(&bag_label) || bag_id < 0 {
            return Err(Error::Format(format!("bag {bag_id}: bad label or id")));
        }
        bags.push(Bag::new(bag_id as u64, domain, bag_label as u8, members)?);
        row = end;
    }
    let dataset = DomainDataset::new(bags, meta.split)?;
    if dataset.instance_counts() != meta.instance_counts {
        return Err(Error::Format("instance counts disagree with metadata".into()));
    }
    Ok((dataset, meta))
}

pub fn save(path: &Path, dataset: &DomainDataset, provenance: &Provenance) -> Result<()> {
    let bytes = encode(dataset, provenance)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(DomainDataset, ContainerMetadata)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// Hex SHA-256 of the encoded container, provenance excluded.
pub fn content_hash(dataset: &DomainDataset) -> Result<String> {
    let bytes = encode(dataset, &Provenance::default())?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{label_audit, training_view};

    fn sample() -> DomainDataset {
        let b0 = Bag::new(
            4,
            Domain::Target,
            1,
            vec![
                (vec![0.1, -2.5e-300], Some(0)),
                (vec![f64::MIN_POSITIVE, 3.0], Some(1)),
            ],
        )
        .unwrap();
        let b1 = Bag::new(2, Domain::Source, 0, vec![(vec![1.0 / 3.0, -0.0], Some(0))]).unwrap();
        DomainDataset::new(vec![b0, b1], Split::Validation).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ds = sample();
        let prov = Provenance {
            seed: Some(9),
            generator: Some(serde_json::json!({"dim": 2})),
        };
        let bytes = encode(&ds, &prov).unwrap();
        let (back, meta) = decode(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(meta.seed, Some(9));
        assert_eq!(meta.instance_counts, vec![2, 1]);
        let neg_zero = back.bags()[1].instances()[0].features()[1];
        assert!(neg_zero == 0.0 && neg_zero.is_sign_negative());
        assert_eq!(encode(&back, &prov).unwrap(), bytes);
    }

    #[test]
    fn stripped_labels_survive_as_absent() {
        let view = training_view(&sample());
        let (back, _) = decode(&encode(&view, &Provenance::default()).unwrap()).unwrap();
        assert_eq!(back, view);
    }

    #[test]
    fn encoding_does_not_count_as_label_access() {
        label_audit::reset();
        let _ = encode(&sample(), &Provenance::default()).unwrap();
        assert_eq!(label_audit::target_reads(), 0);
    }

    #[test]
    fn truncated_or_corrupt_input_is_rejected() {
        let bytes = encode(&sample(), &Provenance::default()).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.milda");
        save(&path, &sample(), &Provenance::default()).unwrap();
        let (back, _) = load(&path).unwrap();
        assert_eq!(back, sample());
        assert_eq!(content_hash(&back).unwrap(), content_hash(&sample()).unwrap());
    }
}
