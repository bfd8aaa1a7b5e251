//! Binary checkpoints: one line of JSON header followed by the five parameter
//! matrices as row-major little-endian `f32`, in the order W_l, W_u, W_r, V, E_a.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{HyperParams, ModelParams};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    pub n: usize,
    pub p: usize,
    pub d: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub alpha: f64,
    pub seed: u64,
    pub vocab_hash: String,
}

impl CheckpointHeader {
    pub fn new(params: &ModelParams, hp: &HyperParams, vocab: &Vocabulary) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            n: params.n_users(),
            p: vocab.len(),
            d: params.d(),
            k: params.k(),
            alpha: hp.alpha,
            seed: hp.seed,
            vocab_hash: vocab.content_hash(),
        }
    }

    fn shapes(&self) -> [(usize, usize); 5] {
        let (n, k, d) = (self.n, self.k, self.d);
        [(d, 2 * d), (k, d), (k, k), (k, d), (n, d)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(params: ModelParams, hp: &HyperParams, vocab: &Vocabulary) -> Self {
        Self { header: CheckpointHeader::new(&params, hp, vocab), params }
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<()> {
        let mut out = BufWriter::new(out);
        self.params
            .check_shapes(self.header.n, self.header.k, self.header.d)?;
        serde_json::to_writer(&mut out, &self.header)?;
        out.write_all(b"\n")?;
        for t in self.params.tensors() {
            for v in t.iter() {
                out.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut input: R) -> Result<Self> {
        let mut line = Vec::new();
        input.read_until(b'\n', &mut line)?;
        if line.last() != Some(&b'\n') {
            return Err(Error::Checkpoint("missing header line".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&line[..line.len() - 1])
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                header.version
            )));
        }
        let mut tensors = Vec::with_capacity(5);
        for shape in header.shapes() {
            let mut bytes = vec![0u8; shape.0 * shape.1 * 4];
            input
                .read_exact(&mut bytes)
                .map_err(|_| Error::Checkpoint("payload shorter than header shapes".into()))?;
            let values = bytes
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                .collect();
            tensors.push(Array2::from_shape_vec(shape, values).expect("length matches shape"));
        }
        let mut rest = [0u8; 1];
        if input.read(&mut rest)? != 0 {
            return Err(Error::Checkpoint("payload longer than header shapes".into()));
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("five tensors");
        let params = ModelParams { w_l: next(), w_u: next(), w_r: next(), v: next(), e_a: next() };
        Ok(Self { header, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    /// Rejects a vocabulary other than the one the checkpoint was trained on.
    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        if vocab.len() != self.header.p || vocab.content_hash() != self.header.vocab_hash {
            return Err(Error::Checkpoint("vocabulary does not match checkpoint".into()));
        }
        Ok(())
    }

    /// Hyperparameters recoverable from the header; training-only fields
    /// take their defaults.
    pub fn hyper_params(&self) -> HyperParams {
        HyperParams {
            alpha: self.header.alpha,
            seed: self.header.seed,
            ..HyperParams::new(self.header.k, self.header.d)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use std::collections::BTreeSet;

    fn fixture() -> (Checkpoint, Vocabulary) {
        let vocab =
            Vocabulary::from_tokens(vec!["a".into(), "b".into(), "c".into()], BTreeSet::new())
                .unwrap();
        let hp = HyperParams { seed: 5, ..HyperParams::new(2, 3) };
        let params = init_params(4, &hp);
        (Checkpoint::new(params, &hp, &vocab), vocab)
    }

    #[test]
    fn roundtrip_at_f32_precision() {
        let (ck, vocab) = fixture();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&buf[..]).unwrap();
        assert_eq!(back.header, ck.header);
        back.check_vocab(&vocab).unwrap();
        for (a, b) in back.params.tensors().iter().zip(ck.params.tensors()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*x, f64::from(*y as f32));
            }
        }
        // Re-serialising the f32-rounded parameters is byte-stable.
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn header_is_a_json_line() {
        let (ck, _) = fixture();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let end = buf.iter().position(|&b| b == b'\n').unwrap();
        let v: serde_json::Value = serde_json::from_slice(&buf[..end]).unwrap();
        assert_eq!(v["version"], 1);
        assert_eq!(v["K"], 2);
        assert_eq!(v["n"], 4);
        assert_eq!(buf.len() - end - 1, 4 * (3 * 6 + 2 * 3 + 2 * 2 + 2 * 3 + 4 * 3));
    }

    #[test]
    fn rejects_version_and_shape_mismatch() {
        let (ck, vocab) = fixture();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();

        let text = String::from_utf8_lossy(&buf).replacen("\"version\":1", "\"version\":2", 1);
        let mut bad = text.as_bytes()[..text.find('\n').unwrap() + 1].to_vec();
        bad.extend_from_slice(&buf[buf.iter().position(|&b| b == b'\n').unwrap() + 1..]);
        assert!(Checkpoint::read_from(&bad[..]).is_err());

        assert!(Checkpoint::read_from(&buf[..buf.len() - 4]).is_err());
        let mut long = buf.clone();
        long.extend_from_slice(&[0, 0, 0, 0]);
        assert!(Checkpoint::read_from(&long[..]).is_err());

        let other =
            Vocabulary::from_tokens(vec!["a".into(), "b".into(), "z".into()], BTreeSet::new())
                .unwrap();
        assert!(ck.check_vocab(&other).is_err());
        ck.check_vocab(&vocab).unwrap();
    }
}
