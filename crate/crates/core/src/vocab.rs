//! Fixed word-level vocabulary of 64 tokens.

use crate::error::{Result, VtiError};

pub type Token = u32;

pub const VOCAB_SIZE: usize = 64;

pub const PAD: Token = 0;
pub const BOS: Token = 1;
pub const EOS: Token = 2;
pub const DESCRIBE: Token = 3;
pub const IS: Token = 4;
pub const THERE: Token = 5;
pub const A: Token = 6;
pub const AND: Token = 7;
pub const PERIOD: Token = 8;
pub const QUESTION: Token = 9;
pub const YES: Token = 10;
pub const NO: Token = 11;
pub const NOTHING: Token = 12;

pub const COLOR_BASE: Token = 13;
pub const NUM_COLORS: usize = 6;
pub const SHAPE_BASE: Token = COLOR_BASE + NUM_COLORS as Token;
pub const NUM_SHAPES: usize = 12;
pub const COUNT_BASE: Token = SHAPE_BASE + NUM_SHAPES as Token;
pub const NUM_COUNTS: usize = 4;

pub const COLOR_NAMES: [&str; NUM_COLORS] = ["red", "green", "blue", "yellow", "magenta", "cyan"];
pub const SHAPE_NAMES: [&str; NUM_SHAPES] = [
    "square", "circle", "triangle", "diamond", "cross", "ring", "hbar", "vbar", "corner", "dot",
    "frame", "checker",
];
const COUNT_NAMES: [&str; NUM_COUNTS] = ["one", "two", "three", "four"];
const FIXED: [&str; 13] = [
    "<pad>", "<bos>", "<eos>", "describe", "is", "there", "a", "and", ".", "?", "yes", "no",
    "nothing",
];

pub fn color_token(color: usize) -> Token {
    COLOR_BASE + color as Token
}

pub fn shape_token(shape: usize) -> Token {
    SHAPE_BASE + shape as Token
}

/// Color index of a token, if it is a color word.
pub fn as_color(t: Token) -> Option<usize> {
    (COLOR_BASE..SHAPE_BASE).contains(&t).then(|| (t - COLOR_BASE) as usize)
}

/// Shape index of a token, if it is a shape word.
pub fn as_shape(t: Token) -> Option<usize> {
    (SHAPE_BASE..COUNT_BASE).contains(&t).then(|| (t - SHAPE_BASE) as usize)
}

pub fn word(t: Token) -> String {
    let i = t as usize;
    if i < FIXED.len() {
        FIXED[i].to_string()
    } else if let Some(c) = as_color(t) {
        COLOR_NAMES[c].to_string()
    } else if let Some(s) = as_shape(t) {
        SHAPE_NAMES[s].to_string()
    } else if (COUNT_BASE..COUNT_BASE + NUM_COUNTS as Token).contains(&t) {
        COUNT_NAMES[(t - COUNT_BASE) as usize].to_string()
    } else {
        format!("<unused{i}>")
    }
}

pub fn token(w: &str) -> Option<Token> {
    (0..VOCAB_SIZE as Token).find(|&t| word(t) == w)
}

/// Whitespace-separated words to tokens.
pub fn encode(text: &str) -> Result<Vec<Token>> {
    text.split_whitespace()
        .map(|w| token(w).ok_or_else(|| VtiError::Generation(format!("unknown word `{w}`"))))
        .collect()
}

pub fn decode(tokens: &[Token]) -> String {
    tokens.iter().map(|&t| word(t)).collect::<Vec<_>>().join(" ")
}
