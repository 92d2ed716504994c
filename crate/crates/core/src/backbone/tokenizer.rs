//! Caption tokenizers: the byte-pair encoder of the pretrained model, and a
//! seeded hashing tokenizer used with randomly initialized test backbones.

use std::collections::HashMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const WORD_PATTERN: &str =
    r"(?i)<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|\p{L}+|\p{N}|[^\s\p{L}\p{N}]+";

/// Token ids for one caption, bracketed by start/end markers and padded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenIds {
    pub ids: Vec<usize>,
    /// Number of meaningful positions, including both markers.
    pub valid_length: usize,
    /// Set when the caption did not fit and was cut.
    pub truncated: bool,
}

impl TokenIds {
    /// Position of the end marker, whose output summarizes the caption.
    pub fn end_position(&self) -> usize {
        self.valid_length - 1
    }
}

pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> TokenIds;
    fn vocab_size(&self) -> usize;
    fn context_length(&self) -> usize;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenizerSpec {
    /// Seeded word hashing; any vocabulary size.
    Hash { seed: u64 },
    /// Byte-pair merges file, resolved relative to the weights file when relative.
    Bpe { vocab_path: String },
}

fn clean(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn frame(body: Vec<usize>, start: usize, end: usize, pad: usize, context_length: usize) -> TokenIds {
    let room = context_length.saturating_sub(2);
    let truncated = body.len() > room;
    let mut ids = Vec::with_capacity(context_length);
    ids.push(start);
    ids.extend(body.into_iter().take(room));
    ids.push(end);
    let valid_length = ids.len();
    ids.resize(context_length, pad);
    TokenIds { ids, valid_length, truncated }
}

/// Maps each word to a pseudo-random id; pad is 0, start and end take the
/// two highest ids.
pub struct HashTokenizer {
    seed: u64,
    vocab_size: usize,
    context_length: usize,
    words: Regex,
}

impl HashTokenizer {
    pub fn new(seed: u64, vocab_size: usize, context_length: usize) -> Result<Self> {
        if vocab_size < 4 || context_length < 2 {
            return Err(Error::Config(format!(
                "hash tokenizer needs vocab >= 4 and context >= 2 (got {vocab_size}, {context_length})"
            )));
        }
        Ok(Self { seed, vocab_size, context_length, words: Regex::new(WORD_PATTERN).unwrap() })
    }

    fn word_id(&self, word: &str) -> usize {
        // FNV-1a over the seed bytes then the word bytes.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.seed.to_le_bytes().iter().chain(word.as_bytes()) {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        1 + (h % (self.vocab_size as u64 - 3)) as usize
    }
}

impl Tokenizer for HashTokenizer {
    fn encode(&self, text: &str) -> TokenIds {
        let text = clean(text);
        let body = self.words.find_iter(&text).map(|m| self.word_id(m.as_str())).collect();
        frame(body, self.vocab_size - 2, self.vocab_size - 1, 0, self.context_length)
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn context_length(&self) -> usize {
        self.context_length
    }
}

/// Byte values with the printable ones first, the order the vocabulary lists them in.
fn byte_order() -> Vec<u32> {
    let mut bs: Vec<u32> = ('!' as u32..='~' as u32)
        .chain('¡' as u32..='¬' as u32)
        .chain('®' as u32..='ÿ' as u32)
        .collect();
    for b in 0..256u32 {
        if !bs.contains(&b) {
            bs.push(b);
        }
    }
    bs
}

/// Printable stand-ins for raw bytes, so merges can be stored as text.
/// Printable bytes map to themselves; the rest map to code points from 256 on.
fn bytes_to_unicode() -> Vec<char> {
    const PRINTABLE: usize = 94 + 12 + 82;
    let mut table = vec!['\0'; 256];
    let mut shifted = 0;
    for (i, b) in byte_order().into_iter().enumerate() {
        let printable = i < PRINTABLE;
        let c = if printable { b } else { 256 + shifted };
        if !printable {
            shifted += 1;
        }
        table[b as usize] = char::from_u32(c).unwrap();
    }
    table
}

/// The pretrained model's byte-level BPE.
pub struct BpeTokenizer {
    byte_chars: Vec<char>,
    encoder: HashMap<String, usize>,
    ranks: HashMap<(String, String), usize>,
    words: Regex,
    context_length: usize,
    start: usize,
    end: usize,
}

impl BpeTokenizer {
    /// Loads a merges file (optionally gzip-compressed). The first line is a
    /// version header; `max_merges` caps how many merges are used.
    pub fn from_file(path: &Path, max_merges: Option<usize>, context_length: usize) -> Result<Self> {
        let mut raw = Vec::new();
        File::open(path)
            .map_err(|_| Error::WeightsNotFound(path.to_path_buf()))?
            .read_to_end(&mut raw)?;
        let text = if path.extension().is_some_and(|e| e == "gz") {
            let mut s = String::new();
            GzDecoder::new(raw.as_slice()).read_to_string(&mut s)?;
            s
        } else {
            String::from_utf8(raw).map_err(|e| Error::TensorFile {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?
        };
        Self::from_merges_text(&text, max_merges, context_length)
    }

    pub fn from_merges_text(text: &str, max_merges: Option<usize>, context_length: usize) -> Result<Self> {
        let merges: Vec<(String, String)> = text
            .lines()
            .skip(1)
            .filter(|l| !l.trim().is_empty())
            .take(max_merges.unwrap_or(usize::MAX))
            .map(|l| {
                let mut it = l.split_whitespace();
                match (it.next(), it.next()) {
                    (Some(a), Some(b)) => Ok((a.to_string(), b.to_string())),
                    _ => Err(Error::Config(format!("malformed merge line `{l}`"))),
                }
            })
            .collect::<Result<_>>()?;
        let byte_chars = bytes_to_unicode();
        let order: Vec<String> = byte_order().iter().map(|&b| byte_chars[b as usize].to_string()).collect();
        let mut vocab: Vec<String> = order.clone();
        vocab.extend(order.iter().map(|s| format!("{s}</w>")));
        vocab.extend(merges.iter().map(|(a, b)| format!("{a}{b}")));
        vocab.push("<|startoftext|>".into());
        vocab.push("<|endoftext|>".into());
        let encoder: HashMap<String, usize> = vocab.into_iter().enumerate().map(|(i, s)| (s, i)).collect();
        let ranks = merges.into_iter().enumerate().map(|(i, m)| (m, i)).collect();
        let start = encoder["<|startoftext|>"];
        let end = encoder["<|endoftext|>"];
        Ok(Self {
            byte_chars,
            encoder,
            ranks,
            words: Regex::new(WORD_PATTERN).unwrap(),
            context_length,
            start,
            end,
        })
    }

    fn bpe(&self, token: &str) -> Vec<String> {
        let chars: Vec<char> = token.chars().collect();
        let mut word: Vec<String> = chars.iter().map(|c| c.to_string()).collect();
        if let Some(last) = word.last_mut() {
            last.push_str("</w>");
        }
        loop {
            let best = word
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0].clone(), p[1].clone())).map(|&r| (r, p[0].clone(), p[1].clone())))
                .min_by_key(|(r, _, _)| *r);
            let Some((_, first, second)) = best else { break };
            let mut merged = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && word[i] == first && word[i + 1] == second {
                    merged.push(format!("{first}{second}"));
                    i += 2;
                } else {
                    merged.push(word[i].clone());
                    i += 1;
                }
            }
            word = merged;
            if word.len() == 1 {
                break;
            }
        }
        word
    }
}

impl Tokenizer for BpeTokenizer {
    fn encode(&self, text: &str) -> TokenIds {
        let text = clean(text);
        let mut body = Vec::new();
        for m in self.words.find_iter(&text) {
            let mapped: String = m.as_str().bytes().map(|b| self.byte_chars[b as usize]).collect();
            for piece in self.bpe(&mapped) {
                // Every merge product and every single byte is in the vocabulary.
                body.push(self.encoder[&piece]);
            }
        }
        frame(body, self.start, self.end, 0, self.context_length)
    }

    fn vocab_size(&self) -> usize {
        self.encoder.len()
    }

    fn context_length(&self) -> usize {
        self.context_length
    }
}
