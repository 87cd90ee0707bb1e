//! Tokenizer, corpus packing and the checkpoint format.
//!
//! A checkpoint file is
//!
//! ```text
//! "A3CK" | version: u32 | header_len: u32 | header (UTF-8 key=value lines)
//! | n_arrays: u32 | { name_len: u32 | name | ndim: u32 | dims: u64* | f32 LE data }*
//! ```
//!
//! All integers are little-endian. Arrays appear in the order of
//! [`ModelParams::tensors`].

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::net::{ModelConfig, ModelParams, NetError};

pub const MAGIC: &[u8; 4] = b"A3CK";
pub const FORMAT_VERSION: u32 = 1;
/// Id of the BOS sentinel in every tokenizer.
pub const BOS: u32 = 0;
const RESERVED: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("character {0:?} is not in the tokenizer charset")]
    UnknownChar(char),
    #[error("token id {0} cannot be decoded")]
    InvalidToken(u32),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("sequence length {0} must be positive")]
    InvalidSeqLen(usize),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("not a checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] NetError),
    #[error(transparent)]
    Fs(#[from] std::io::Error),
}

/// Maps text to token ids. Id 0 is the BOS sentinel and is never produced by
/// [`Tokenizer::encode`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Tokenizer {
    /// One token per byte, id = byte + 1.
    Byte,
    /// One token per character of a fixed charset, id = index + 1.
    Char { charset: Vec<char> },
}

impl Tokenizer {
    /// Char tokenizer over the distinct characters of `text`, sorted.
    pub fn char_from_text(text: &str) -> Self {
        let mut charset: Vec<char> = text.chars().collect();
        charset.sort_unstable();
        charset.dedup();
        Tokenizer::Char { charset }
    }

    pub fn vocab_size(&self) -> usize {
        RESERVED as usize
            + match self {
                Tokenizer::Byte => 256,
                Tokenizer::Char { charset } => charset.len(),
            }
    }

    pub fn bos(&self) -> u32 {
        BOS
    }

    /// Lowest id `encode` can produce.
    pub fn first_content_id(&self) -> u32 {
        RESERVED
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Result<Vec<u32>, IoError> {
        match self {
            Tokenizer::Byte => Ok(bytes.iter().map(|&b| b as u32 + RESERVED).collect()),
            Tokenizer::Char { .. } => {
                let text = String::from_utf8_lossy(bytes);
                self.encode(&text)
            }
        }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>, IoError> {
        match self {
            Tokenizer::Byte => self.encode_bytes(text.as_bytes()),
            Tokenizer::Char { charset } => text
                .chars()
                .map(|c| {
                    charset
                        .binary_search(&c)
                        .map(|i| i as u32 + RESERVED)
                        .map_err(|_| IoError::UnknownChar(c))
                })
                .collect(),
        }
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>, IoError> {
        match self {
            Tokenizer::Byte => ids
                .iter()
                .map(|&id| {
                    id.checked_sub(RESERVED)
                        .filter(|&b| b < 256)
                        .map(|b| b as u8)
                        .ok_or(IoError::InvalidToken(id))
                })
                .collect(),
            Tokenizer::Char { .. } => Ok(self.decode(ids)?.into_bytes()),
        }
    }

    /// Decodes to text; invalid UTF-8 from the byte tokenizer is replaced.
    pub fn decode(&self, ids: &[u32]) -> Result<String, IoError> {
        match self {
            Tokenizer::Byte => Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned()),
            Tokenizer::Char { charset } => ids
                .iter()
                .map(|&id| {
                    id.checked_sub(RESERVED)
                        .and_then(|i| charset.get(i as usize).copied())
                        .ok_or(IoError::InvalidToken(id))
                })
                .collect(),
        }
    }

    fn to_header(&self, out: &mut BTreeMap<String, String>) {
        match self {
            Tokenizer::Byte => {
                out.insert("tokenizer.mode".into(), "byte".into());
            }
            Tokenizer::Char { charset } => {
                out.insert("tokenizer.mode".into(), "char".into());
                let codes: Vec<String> = charset.iter().map(|&c| (c as u32).to_string()).collect();
                out.insert("tokenizer.charset".into(), codes.join(","));
            }
        }
    }

    fn from_header(h: &BTreeMap<String, String>) -> Result<Self, IoError> {
        match get(h, "tokenizer.mode")? {
            "byte" => Ok(Tokenizer::Byte),
            "char" => {
                let raw = get(h, "tokenizer.charset")?;
                let charset = raw
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse::<u32>()
                            .ok()
                            .and_then(char::from_u32)
                            .ok_or_else(|| IoError::Malformed(format!("bad charset entry {s:?}")))
                    })
                    .collect::<Result<Vec<char>, _>>()?;
                Ok(Tokenizer::Char { charset })
            }
            other => Err(IoError::Malformed(format!("unknown tokenizer mode {other:?}"))),
        }
    }
}

/// Concatenates and chunks `tokens` into sequences of `seq_len`; the final
/// partial chunk is dropped.
pub fn pack_corpus(tokens: &[u32], seq_len: usize) -> Result<Vec<Vec<u32>>, IoError> {
    if tokens.is_empty() {
        return Err(IoError::EmptyCorpus);
    }
    if seq_len == 0 {
        return Err(IoError::InvalidSeqLen(seq_len));
    }
    Ok(tokens.chunks_exact(seq_len).map(<[u32]>::to_vec).collect())
}

/// Everything needed to resume sampling or evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub tokenizer: Tokenizer,
    pub seed: u64,
    pub step: u64,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = &self.params.config;
        let mut h = BTreeMap::new();
        h.insert("model.vocab_size".to_string(), cfg.vocab_size.to_string());
        h.insert("model.d_model".into(), cfg.d_model.to_string());
        h.insert("model.n_layers".into(), cfg.n_layers.to_string());
        h.insert("model.n_heads".into(), cfg.n_heads.to_string());
        h.insert("model.d_ff".into(), cfg.d_ff.to_string());
        h.insert("model.max_len".into(), cfg.max_len.to_string());
        h.insert("model.bos".into(), cfg.bos.to_string());
        if let Some(pad) = cfg.pad {
            h.insert("model.pad".into(), pad.to_string());
        }
        self.tokenizer.to_header(&mut h);
        h.insert("seed".into(), self.seed.to_string());
        h.insert("step".into(), self.step.to_string());
        let header: String = h.iter().map(|(k, v)| format!("{k}={v}\n")).collect();

        let tensors = self.params.tensors();
        let mut out = Vec::with_capacity(64 + header.len() + 4 * self.params.num_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &dim in &t.shape {
                out.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            for v in t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IoError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(IoError::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(IoError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header_len = r.u32("header length")? as usize;
        let header = std::str::from_utf8(r.take(header_len, "header")?)
            .map_err(|e| IoError::Malformed(format!("header is not UTF-8: {e}")))?;
        let mut h = BTreeMap::new();
        for line in header.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| IoError::Malformed(format!("header line {line:?}")))?;
            h.insert(k.to_string(), v.to_string());
        }
        let config = ModelConfig {
            vocab_size: parse(&h, "model.vocab_size")?,
            d_model: parse(&h, "model.d_model")?,
            n_layers: parse(&h, "model.n_layers")?,
            n_heads: parse(&h, "model.n_heads")?,
            d_ff: parse(&h, "model.d_ff")?,
            max_len: parse(&h, "model.max_len")?,
            bos: parse(&h, "model.bos")?,
            pad: h.get("model.pad").map(|_| parse(&h, "model.pad")).transpose()?,
        };
        config.validate()?;
        let tokenizer = Tokenizer::from_header(&h)?;
        if tokenizer.vocab_size() != config.vocab_size {
            return Err(IoError::Malformed(format!(
                "tokenizer vocabulary {} does not match model vocabulary {}",
                tokenizer.vocab_size(),
                config.vocab_size
            )));
        }
        let seed = parse(&h, "seed")?;
        let step = parse(&h, "step")?;

        let mut params = ModelParams::<f32>::zeros(&config);
        let expected: Vec<(String, Vec<usize>)> =
            params.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
        let count = r.u32("array count")? as usize;
        if count != expected.len() {
            return Err(IoError::Malformed(format!(
                "{count} arrays, expected {}",
                expected.len()
            )));
        }
        for ((name, shape), dst) in expected.iter().zip(params.tensors_mut()) {
            let name_len = r.u32("array name length")? as usize;
            let found = r.take(name_len, "array name")?;
            if found != name.as_bytes() {
                return Err(IoError::Malformed(format!(
                    "expected array {name}, found {}",
                    String::from_utf8_lossy(found)
                )));
            }
            let ndim = r.u32("array rank")? as usize;
            let mut dims = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                dims.push(r.u64("array shape")? as usize);
            }
            if &dims != shape {
                return Err(IoError::Malformed(format!(
                    "array {name} has shape {dims:?}, expected {shape:?}"
                )));
            }
            let raw = r.take(4 * dst.len(), "array data")?;
            for (v, chunk) in dst.iter_mut().zip(raw.chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        if r.pos != bytes.len() {
            return Err(IoError::Malformed(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            params,
            tokenizer,
            seed,
            step,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), IoError> {
    // Write to a sibling file first so a crash never leaves a torn checkpoint.
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&ckpt.to_bytes())?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, IoError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], IoError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(IoError::Truncated(what))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn get<'a>(h: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str, IoError> {
    h.get(key)
        .map(String::as_str)
        .ok_or_else(|| IoError::Malformed(format!("missing header key {key}")))
}

fn parse<T: std::str::FromStr>(h: &BTreeMap<String, String>, key: &str) -> Result<T, IoError> {
    let raw = get(h, key)?;
    raw.parse()
        .map_err(|_| IoError::Malformed(format!("bad value {raw:?} for {key}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grouping::make_permuted;
    use crate::net::{forward, init_params};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_checkpoint(tokenizer: Tokenizer) -> Checkpoint {
        let cfg = ModelConfig {
            vocab_size: tokenizer.vocab_size(),
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_len: 12,
            bos: BOS,
            pad: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params: ModelParams<f32> = init_params(&cfg, &mut rng).unwrap();
        params.randomize_output(&mut rng);
        Checkpoint {
            params,
            tokenizer,
            seed: 5,
            step: 42,
        }
    }

    #[test]
    fn empty_text_round_trips() {
        let t = Tokenizer::Byte;
        assert!(t.encode("").unwrap().is_empty());
        assert_eq!(t.decode(&[]).unwrap(), "");
    }

    #[test]
    fn byte_ids_are_offset_by_the_sentinel() {
        let t = Tokenizer::Byte;
        assert_eq!(t.encode("ab").unwrap(), vec![98, 99]);
        assert_eq!(t.decode(&[98, 99]).unwrap(), "ab");
        assert_eq!(t.vocab_size(), 257);
        assert!(matches!(t.decode(&[0]), Err(IoError::InvalidToken(0))));
    }

    #[test]
    fn char_mode_rejects_unknown_characters() {
        let t = Tokenizer::char_from_text("cab");
        assert_eq!(t.vocab_size(), 4);
        assert_eq!(t.encode("abc").unwrap(), vec![1, 2, 3]);
        assert!(matches!(t.encode("abd"), Err(IoError::UnknownChar('d'))));
    }

    proptest! {
        #[test]
        fn byte_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let t = Tokenizer::Byte;
            let ids = t.encode_bytes(&bytes).unwrap();
            prop_assert!(ids.iter().all(|&id| id != BOS && (id as usize) < t.vocab_size()));
            prop_assert_eq!(t.decode_bytes(&ids).unwrap(), bytes);
        }

        #[test]
        fn char_round_trip(s in "[a-z .é]{0,40}") {
            let t = Tokenizer::char_from_text("abcdefghijklmnopqrstuvwxyz .é");
            let ids = t.encode(&s).unwrap();
            prop_assert!(ids.iter().all(|&id| id != BOS));
            prop_assert_eq!(t.decode(&ids).unwrap(), s);
        }
    }

    #[test]
    fn packing_drops_the_partial_tail() {
        let tokens: Vec<u32> = (1..=1000).collect();
        let packed = pack_corpus(&tokens, 256).unwrap();
        assert_eq!(packed.len(), 3);
        assert_eq!(packed.iter().map(Vec::len).sum::<usize>(), 768);
        assert_eq!(packed[1][0], 257);
        assert_eq!(pack_corpus(&tokens[..256], 256).unwrap().len(), 1);
        assert_eq!(packed, pack_corpus(&tokens, 256).unwrap());
        assert!(matches!(pack_corpus(&[], 4), Err(IoError::EmptyCorpus)));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        for tokenizer in [Tokenizer::Byte, Tokenizer::char_from_text("xyz,\n=")] {
            let ckpt = small_checkpoint(tokenizer);
            let bytes = ckpt.to_bytes();
            let loaded = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(loaded, ckpt);
            assert_eq!(loaded.to_bytes(), bytes);

            let g = make_permuted(6, 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let x = [1, 2, 3, 1, 2, 3];
            assert_eq!(
                forward(&loaded.params, &x, &g).unwrap(),
                forward(&ckpt.params, &x, &g).unwrap()
            );
        }
    }

    #[test]
    fn checkpoint_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.a3ck");
        let ckpt = small_checkpoint(Tokenizer::Byte);
        save_checkpoint(&path, &ckpt).unwrap();
        let first = fs::read(&path).unwrap();
        save_checkpoint(&path, &load_checkpoint(&path).unwrap()).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
    }

    #[test]
    fn truncation_is_detected_at_every_cut() {
        let bytes = small_checkpoint(Tokenizer::Byte).to_bytes();
        for cut in (0..bytes.len()).step_by(97).chain([bytes.len() - 1]) {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, IoError::Truncated(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn bad_magic_and_version_are_reported() {
        let mut bytes = small_checkpoint(Tokenizer::Byte).to_bytes();
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&wrong),
            Err(IoError::BadMagic(_))
        ));
        bytes[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(IoError::VersionMismatch {
                found: 2,
                expected: 1
            })
        ));
    }
}
