//! Byte-level tokenizer with single-token code fences.
//!
//! Ids `0..256` are raw bytes, followed by the four fence tokens and the
//! BOS/EOS control tokens. Vocabulary ids past [`RESERVED_TOKENS`] are valid
//! model outputs but carry no text.

use std::fmt;

use serde::{Deserialize, Serialize};

pub type Token = u32;

pub const BYTE_TOKENS: u32 = 256;
pub const BOS: Token = 260;
pub const EOS: Token = 261;
/// Bytes + fences + control tokens.
pub const RESERVED_TOKENS: usize = 262;

/// A markdown code fence that opens a code block in one of the tracked languages.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fence {
    Cpp,
    Python,
    Java,
    Julia,
}

impl Fence {
    pub const ALL: [Fence; 4] = [Fence::Cpp, Fence::Python, Fence::Java, Fence::Julia];

    pub fn token(self) -> Token {
        BYTE_TOKENS + self as u32
    }

    pub fn text(self) -> &'static str {
        match self {
            Fence::Cpp => "```cpp",
            Fence::Python => "```python",
            Fence::Java => "```java",
            Fence::Julia => "```julia",
        }
    }

    pub fn name(self) -> &'static str {
        &self.text()[3..]
    }

    pub fn from_token(token: Token) -> Option<Fence> {
        Fence::ALL.into_iter().find(|f| f.token() == token)
    }
}

impl fmt::Display for Fence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Encode text; fence strings become their single reserved token.
pub fn encode(text: &str) -> Vec<Token> {
    let bytes = text.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    'outer: while i < bytes.len() {
        if bytes[i] == b'`' {
            for fence in Fence::ALL {
                if bytes[i..].starts_with(fence.text().as_bytes()) {
                    out.push(fence.token());
                    i += fence.text().len();
                    continue 'outer;
                }
            }
        }
        out.push(bytes[i] as Token);
        i += 1;
    }
    out
}

/// `[BOS] ++ encode(text)`.
pub fn encode_prompt(text: &str) -> Vec<Token> {
    let mut out = vec![BOS];
    out.extend(encode(text));
    out
}

/// Decode tokens to text. Control tokens vanish; unassigned ids render as `<|id|>`.
pub fn decode(tokens: &[Token]) -> String {
    let mut bytes = Vec::with_capacity(tokens.len());
    for &t in tokens {
        if t < BYTE_TOKENS {
            bytes.push(t as u8);
        } else if let Some(fence) = Fence::from_token(t) {
            bytes.extend_from_slice(fence.text().as_bytes());
        } else if t == BOS || t == EOS {
        } else {
            bytes.extend_from_slice(format!("<|{t}|>").as_bytes());
        }
    }
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Resolve a user-facing token name: `cpp`/`python`/`java`/`julia` (or the
/// full fence text), `bos`, `eos`, a single character, or a numeric id.
pub fn token_by_name(name: &str) -> Option<Token> {
    let lower = name.to_ascii_lowercase();
    if let Some(f) = Fence::ALL
        .into_iter()
        .find(|f| f.name() == lower || f.text() == lower || (lower == "c++" && *f == Fence::Cpp))
    {
        return Some(f.token());
    }
    match lower.as_str() {
        "bos" => return Some(BOS),
        "eos" => return Some(EOS),
        _ => {}
    }
    if name.len() == 1 {
        return Some(name.as_bytes()[0] as Token);
    }
    name.parse().ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fences_are_single_tokens() {
        let toks = encode("```cpp\nint");
        assert_eq!(toks[0], Fence::Cpp.token());
        assert_eq!(toks.len(), 5);
        assert_eq!(encode("```python")[..], [Fence::Python.token()]);
        assert_eq!(encode("```julia")[..], [Fence::Julia.token()]);
        assert_eq!(encode("```java")[..], [Fence::Java.token()]);
    }

    #[test]
    fn round_trip_text() {
        let text = "sort ```cpp\nvoid f(){} ``` done";
        assert_eq!(decode(&encode(text)), text);
    }

    #[test]
    fn bare_backticks_stay_bytes() {
        assert_eq!(encode("```"), vec![96, 96, 96]);
    }

    #[test]
    fn names_resolve() {
        assert_eq!(token_by_name("cpp"), Some(Fence::Cpp.token()));
        assert_eq!(token_by_name("```python"), Some(Fence::Python.token()));
        assert_eq!(token_by_name("eos"), Some(EOS));
        assert_eq!(token_by_name("a"), Some(97));
        assert_eq!(token_by_name("300"), Some(300));
    }

    #[test]
    fn control_tokens_decode_to_nothing() {
        assert_eq!(decode(&[BOS, 104, 105, EOS]), "hi");
        assert_eq!(decode(&[400]), "<|400|>");
    }
}
