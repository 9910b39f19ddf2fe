//! Corpus directory layout:
//!
//! ```text
//! corpus.json          frame period and feature dimension
//! vocab.txt
//! <split>.refs         one per split
//! <split>/<id>.feat    six-digit zero-padded ids
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use amd_core::data::io::{
    load_features, load_refs, load_vocab, save_features, save_refs, save_vocab, write_atomic,
};
use amd_core::data::{Corpus, Split, Utterance};
use amd_core::{EncoderOutput, Vocab};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub frame_period_s: f64,
    pub feat_dim: usize,
}

fn feat_path(dir: &Path, split: Split, id: u32) -> PathBuf {
    dir.join(split.name()).join(format!("{id:06}.feat"))
}

fn refs_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.refs", split.name()))
}

pub fn write_corpus(dir: &Path, corpus: &Corpus, feat_dim: usize) -> Result<()> {
    let meta = CorpusMeta {
        frame_period_s: corpus.frame_period_s,
        feat_dim,
    };
    write_json(&dir.join("corpus.json"), &meta)?;
    save_vocab(&dir.join("vocab.txt"), &corpus.vocab)?;
    for split in Split::ALL {
        let utts = corpus.split(split);
        fs::create_dir_all(dir.join(split.name())).map_err(amd_core::Error::from)?;
        for u in utts {
            save_features(&feat_path(dir, split, u.id), u.enc.frames())?;
        }
        let refs: Vec<(u32, Vec<_>)> = utts.iter().map(|u| (u.id, u.reference.clone())).collect();
        save_refs(&refs_path(dir, split), &refs, &corpus.vocab)?;
    }
    Ok(())
}

pub fn read_meta(dir: &Path) -> Result<CorpusMeta> {
    read_json(&dir.join("corpus.json"))
}

pub fn read_vocab(dir: &Path) -> Result<Vocab> {
    Ok(load_vocab(&dir.join("vocab.txt"))?)
}

pub fn read_refs(
    dir: &Path,
    split: Split,
    vocab: &Vocab,
) -> Result<Vec<(u32, Vec<amd_core::TokenId>)>> {
    Ok(load_refs(&refs_path(dir, split), vocab)?)
}

pub fn read_split(dir: &Path, split: Split, vocab: &Vocab) -> Result<Vec<Utterance>> {
    let meta = read_meta(dir)?;
    read_refs(dir, split, vocab)?
        .into_iter()
        .map(|(id, reference)| {
            let frames = load_features(&feat_path(dir, split, id))?;
            if frames.cols() != meta.feat_dim {
                return Err(CliError::Format(format!(
                    "utterance {id} has {} feature columns, corpus declares {}",
                    frames.cols(),
                    meta.feat_dim
                )));
            }
            Ok(Utterance {
                id,
                reference,
                enc: EncoderOutput::new(frames, meta.frame_period_s)?,
            })
        })
        .collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::Format(e.to_string()))?;
    text.push('\n');
    Ok(write_atomic(path, text.as_bytes())?)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::read(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))
}

pub fn parse_split(s: &str) -> Result<Split> {
    Split::ALL
        .into_iter()
        .find(|sp| sp.name() == s)
        .ok_or_else(|| {
            CliError::Config(format!("unknown split {s:?}, expected train, dev or test"))
        })
}
