//! Character vocabulary and token-sequence plumbing.
//!
//! Output classes are the characters plus one end token (id `n_chars`).
//! Start and pad ids live above the class range: they are embedded but never
//! predicted, so the decoder's output layer stays `n_chars + 1` wide.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
}

impl Vocab {
    pub fn new(charset: &str) -> Result<Self> {
        let chars: Vec<char> = charset.chars().collect();
        if chars.is_empty() {
            return Err(Error::Config("empty charset".into()));
        }
        for (i, c) in chars.iter().enumerate() {
            if chars[..i].contains(c) {
                return Err(Error::Config(format!("duplicate character {c:?} in charset")));
            }
        }
        Ok(Vocab { chars })
    }

    pub fn digits() -> Self {
        Vocab::new("0123456789").unwrap()
    }

    /// 10 digits, 52 letters and 31 ASCII specials; with the end token this
    /// yields 94 output classes.
    pub fn full93() -> Self {
        let mut s = String::from("0123456789");
        s.extend('A'..='Z');
        s.extend('a'..='z');
        s.push_str("!\"#$%&'()*+,-./:;<=>?@[\\]^_{|}~");
        Vocab::new(&s).unwrap()
    }

    pub fn charset(&self) -> String {
        self.chars.iter().collect()
    }

    pub fn n_chars(&self) -> usize {
        self.chars.len()
    }

    /// Output classes: characters + end token.
    pub fn n_classes(&self) -> usize {
        self.chars.len() + 1
    }

    /// Total id space including start and pad (embedding rows).
    pub fn total_ids(&self) -> usize {
        self.chars.len() + 3
    }

    pub fn end_id(&self) -> u32 {
        self.chars.len() as u32
    }

    pub fn start_id(&self) -> u32 {
        self.chars.len() as u32 + 1
    }

    pub fn pad_id(&self) -> u32 {
        self.chars.len() as u32 + 2
    }

    pub fn char_id(&self, c: char) -> Option<u32> {
        self.chars.iter().position(|&x| x == c).map(|i| i as u32)
    }

    pub fn id_char(&self, id: u32) -> Option<char> {
        self.chars.get(id as usize).copied()
    }

    /// Character ids of a label (no end token appended).
    pub fn encode(&self, label: &str) -> Result<Vec<u32>> {
        label
            .chars()
            .map(|c| {
                self.char_id(c)
                    .ok_or_else(|| Error::Data(format!("character {c:?} not in vocabulary")))
            })
            .collect()
    }

    /// String of the character ids, stopping at the first end token.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut s = String::new();
        for &id in ids {
            if id == self.end_id() {
                break;
            }
            if let Some(c) = self.id_char(id) {
                s.push(c);
            }
        }
        s
    }
}

/// Teacher-forcing batch: decoder inputs `[start, c1..ck, pad..]`, targets
/// `[c1..ck, end, pad..]`, and a mask selecting the k+1 supervised positions.
/// All rows are padded to the longest label in the batch plus one.
pub struct TokenBatch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

pub fn teacher_forcing_batch(vocab: &Vocab, labels: &[Vec<u32>], max_len: usize) -> Result<TokenBatch> {
    if labels.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let longest = labels.iter().map(|l| l.len()).max().unwrap();
    if longest == 0 {
        return Err(Error::Data("empty label in batch".into()));
    }
    if longest > max_len {
        return Err(Error::Data(format!(
            "label length {longest} exceeds max_len {max_len}"
        )));
    }
    let t = longest + 1;
    let b = labels.len();
    let mut inputs = vec![vocab.pad_id(); b * t];
    let mut targets = vec![vocab.pad_id(); b * t];
    let mut mask = vec![false; b * t];
    for (i, label) in labels.iter().enumerate() {
        inputs[i * t] = vocab.start_id();
        for (j, &c) in label.iter().enumerate() {
            if c >= vocab.end_id() {
                return Err(Error::Data(format!("label id {c} is not a character id")));
            }
            inputs[i * t + j + 1] = c;
            targets[i * t + j] = c;
            mask[i * t + j] = true;
        }
        targets[i * t + label.len()] = vocab.end_id();
        mask[i * t + label.len()] = true;
    }
    Ok(TokenBatch { inputs, targets, mask, batch: b, len: t })
}
