//! On-disk formats.
//!
//! | artifact     | layout |
//! |--------------|--------|
//! | vocabulary   | UTF-8, one token per line in id order; specials carry a tab and their role (`blank`, `sos`, `eos`) |
//! | features     | `"AMDF"`, u32 rows, u32 cols, rows·cols f32, all little-endian, row-major |
//! | references   | UTF-8, one `id<TAB>tok tok ...` line per utterance |
//! | N-best lists | JSON lines, one [`NBestRecord`] per utterance |
//! | checkpoints  | `"AMDP"`, u16 version, 8 × u32 hyperparameters, u32 tensor count, then every tensor as row-major f64 in layout order, all little-endian |
//!
//! Non-finite scores in N-best records are written as the strings
//! `"-inf"`, `"inf"` and `"nan"`. Every loader validates the whole input
//! before returning anything.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::params::{Hyper, ToyDecoderParams};
use crate::search::DecodeStats;
use crate::types::{NBestList, TokenId, Vocab};

pub const FEATURE_MAGIC: &[u8; 4] = b"AMDF";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AMDP";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(res?)
}

// ---------------------------------------------------------------- vocab

pub fn vocab_to_string(v: &Vocab) -> String {
    let mut s = String::new();
    for (id, tok) in v.tokens().iter().enumerate() {
        s.push_str(tok);
        if id == v.blank_id() {
            s.push_str("\tblank");
        } else if id == v.sos_id() {
            s.push_str("\tsos");
        } else if id == v.eos_id() {
            s.push_str("\teos");
        }
        s.push('\n');
    }
    s
}

pub fn vocab_from_str(text: &str) -> Result<Vocab> {
    const WHAT: &str = "vocabulary";
    let (mut blank, mut sos, mut eos) = (None, None, None);
    let mut tokens = Vec::new();
    for (id, line) in text.lines().enumerate() {
        let mut parts = line.split('\t');
        let tok = parts.next().unwrap_or_default();
        if let Some(role) = parts.next() {
            let slot = match role {
                "blank" => &mut blank,
                "sos" => &mut sos,
                "eos" => &mut eos,
                other => {
                    return Err(Error::format(
                        WHAT,
                        format!("line {}: unknown role {other:?}", id + 1),
                    ))
                }
            };
            if slot.replace(id).is_some() {
                return Err(Error::format(WHAT, format!("role {role} assigned twice")));
            }
        }
        if parts.next().is_some() {
            return Err(Error::format(
                WHAT,
                format!("line {}: too many fields", id + 1),
            ));
        }
        tokens.push(tok.to_string());
    }
    let need = |r: Option<usize>, name: &str| {
        r.ok_or_else(|| Error::format(WHAT, format!("missing {name} token")))
    };
    let (b, s, e) = (need(blank, "blank")?, need(sos, "sos")?, need(eos, "eos")?);
    Vocab::new(tokens, b, s, e).map_err(|e| Error::format(WHAT, e.to_string()))
}

pub fn save_vocab(path: &Path, v: &Vocab) -> Result<()> {
    write_atomic(path, vocab_to_string(v).as_bytes())
}

pub fn load_vocab(path: &Path) -> Result<Vocab> {
    vocab_from_str(&fs::read_to_string(path)?)
}

// ------------------------------------------------------------- features

struct Reader<'a> {
    what: &'static str,
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::format(self.what, "truncated file"));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn magic(&mut self, m: &[u8; 4]) -> Result<()> {
        if self.take(4)? != m {
            return Err(Error::format(self.what, "bad magic"));
        }
        Ok(())
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    /// Byte count for `count` items of `width` bytes, checked against
    /// overflow and the remaining input.
    fn payload(&mut self, count: usize, width: usize) -> Result<&'a [u8]> {
        let n = count
            .checked_mul(width)
            .ok_or_else(|| Error::format(self.what, "dimension overflow"))?;
        self.take(n)
    }

    fn finish(&self) -> Result<()> {
        if !self.buf.is_empty() {
            return Err(Error::format(self.what, "trailing bytes"));
        }
        Ok(())
    }
}

/// Values are stored as f32; anything not exactly representable is rounded.
pub fn features_to_bytes(m: &Mat) -> Result<Vec<u8>> {
    let rows =
        u32::try_from(m.rows()).map_err(|_| Error::format("features", "dimension overflow"))?;
    let cols =
        u32::try_from(m.cols()).map_err(|_| Error::format("features", "dimension overflow"))?;
    let mut out = Vec::with_capacity(12 + 4 * m.data().len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for &x in m.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn features_from_bytes(bytes: &[u8]) -> Result<Mat> {
    let mut r = Reader {
        what: "features",
        buf: bytes,
    };
    r.magic(FEATURE_MAGIC)?;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::format("features", "dimension overflow"))?;
    let payload = r.payload(count, 4)?;
    r.finish()?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Mat::from_vec(rows, cols, data))
}

pub fn save_features(path: &Path, m: &Mat) -> Result<()> {
    write_atomic(path, &features_to_bytes(m)?)
}

pub fn load_features(path: &Path) -> Result<Mat> {
    features_from_bytes(&fs::read(path)?)
}

// ----------------------------------------------------------- references

pub fn refs_to_string(refs: &[(u32, Vec<TokenId>)], vocab: &Vocab) -> String {
    let mut s = String::new();
    for (id, toks) in refs {
        s.push_str(&id.to_string());
        s.push('\t');
        let words: Vec<&str> = toks.iter().map(|&t| vocab.token(t)).collect();
        s.push_str(&words.join(" "));
        s.push('\n');
    }
    s
}

pub fn refs_from_str(text: &str, vocab: &Vocab) -> Result<Vec<(u32, Vec<TokenId>)>> {
    const WHAT: &str = "references";
    text.lines()
        .enumerate()
        .map(|(n, line)| {
            let (id, rest) = line
                .split_once('\t')
                .ok_or_else(|| Error::format(WHAT, format!("line {}: missing tab", n + 1)))?;
            let id: u32 = id
                .parse()
                .map_err(|_| Error::format(WHAT, format!("line {}: bad id {id:?}", n + 1)))?;
            let words: Vec<&str> = rest.split_whitespace().collect();
            let toks = vocab
                .encode(&words)
                .map_err(|e| Error::format(WHAT, format!("line {}: {e}", n + 1)))?;
            Ok((id, toks))
        })
        .collect()
}

pub fn save_refs(path: &Path, refs: &[(u32, Vec<TokenId>)], vocab: &Vocab) -> Result<()> {
    write_atomic(path, refs_to_string(refs, vocab).as_bytes())
}

pub fn load_refs(path: &Path, vocab: &Vocab) -> Result<Vec<(u32, Vec<TokenId>)>> {
    refs_from_str(&fs::read_to_string(path)?, vocab)
}

// --------------------------------------------------------------- N-best

mod score_serde {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else if x.is_nan() {
            s.serialize_str("nan")
        } else if *x > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Str(s) => match s.as_str() {
                "-inf" => Ok(f64::NEG_INFINITY),
                "inf" => Ok(f64::INFINITY),
                "nan" => Ok(f64::NAN),
                _ => Err(de::Error::custom(format!("bad score {s:?}"))),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NBestEntry {
    pub tokens: Vec<String>,
    #[serde(with = "score_serde")]
    pub alpha_ctc: f64,
    #[serde(with = "score_serde")]
    pub alpha_ar: f64,
    #[serde(with = "score_serde")]
    pub alpha_amd: f64,
    #[serde(with = "score_serde")]
    pub score: f64,
    pub finished: bool,
}

/// One decoded utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NBestRecord {
    pub id: u32,
    pub hyps: Vec<NBestEntry>,
    pub stats: DecodeStats,
}

impl NBestRecord {
    pub fn from_list(id: u32, list: &NBestList, stats: DecodeStats, vocab: &Vocab) -> Self {
        let hyps = list
            .entries()
            .iter()
            .map(|e| NBestEntry {
                tokens: vocab.render(e.hyp.labels()),
                alpha_ctc: e.hyp.alpha_ctc,
                alpha_ar: e.hyp.alpha_ar,
                alpha_amd: e.hyp.alpha_amd,
                score: e.score,
                finished: e.hyp.finished,
            })
            .collect();
        Self { id, hyps, stats }
    }

    /// Token ids of every hypothesis, best first.
    pub fn token_ids(&self, vocab: &Vocab) -> Result<Vec<Vec<TokenId>>> {
        self.hyps
            .iter()
            .map(|h| {
                let words: Vec<&str> = h.tokens.iter().map(String::as_str).collect();
                vocab.encode(&words)
            })
            .collect()
    }
}

pub fn nbest_to_string(records: &[NBestRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).map_err(|e| Error::format("n-best", e.to_string()))?);
        s.push('\n');
    }
    Ok(s)
}

pub fn nbest_from_str(text: &str) -> Result<Vec<NBestRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::format("n-best", format!("line {}: {e}", n + 1)))
        })
        .collect()
}

pub fn save_nbest(path: &Path, records: &[NBestRecord]) -> Result<()> {
    write_atomic(path, nbest_to_string(records)?.as_bytes())
}

pub fn load_nbest(path: &Path) -> Result<Vec<NBestRecord>> {
    nbest_from_str(&fs::read_to_string(path)?)
}

// ---------------------------------------------------------- checkpoints

fn hyper_fields(h: &Hyper) -> [usize; 8] {
    [
        h.vocab, h.feat_dim, h.d_model, h.layers, h.heads, h.ffn, h.rank, h.max_len,
    ]
}

pub fn checkpoint_to_bytes(p: &ToyDecoderParams) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(64 + 8 * p.num_scalars());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for f in hyper_fields(p.hyper()) {
        let f = u32::try_from(f).map_err(|_| Error::format("checkpoint", "dimension overflow"))?;
        out.extend_from_slice(&f.to_le_bytes());
    }
    out.extend_from_slice(&(p.tensors().len() as u32).to_le_bytes());
    for t in p.tensors() {
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ToyDecoderParams> {
    const WHAT: &str = "checkpoint";
    let mut r = Reader {
        what: WHAT,
        buf: bytes,
    };
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            WHAT,
            format!("unsupported version {version}"),
        ));
    }
    let mut f = [0usize; 8];
    for x in &mut f {
        *x = r.u32()? as usize;
    }
    let hyper = Hyper {
        vocab: f[0],
        feat_dim: f[1],
        d_model: f[2],
        layers: f[3],
        heads: f[4],
        ffn: f[5],
        rank: f[6],
        max_len: f[7],
    };
    hyper
        .validate()
        .map_err(|e| Error::format(WHAT, e.to_string()))?;
    let layout = crate::model::params::Layout::new(&hyper);
    let count = r.u32()? as usize;
    if count != layout.len() {
        return Err(Error::format(
            WHAT,
            format!("expected {} tensors, found {count}", layout.len()),
        ));
    }
    let mut tensors = Vec::with_capacity(count);
    for slot in 0..count {
        let (rows, cols) = layout.shape(slot);
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::format(WHAT, "dimension overflow"))?;
        let data = r
            .payload(n, 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Mat::from_vec(rows, cols, data));
    }
    r.finish()?;
    ToyDecoderParams::from_tensors(hyper, tensors).map_err(|e| Error::format(WHAT, e.to_string()))
}

pub fn save_checkpoint(path: &Path, p: &ToyDecoderParams) -> Result<()> {
    write_atomic(path, &checkpoint_to_bytes(p)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ToyDecoderParams> {
    checkpoint_from_bytes(&fs::read(path)?)
}
