//! Canonical document encoding.
//!
//! Signatures and audit hashes are computed over bytes, so every object that
//! gets signed or hashed must have exactly one byte representation. A
//! document is a tree of text keys mapping to integers, text, byte strings,
//! lists or subtrees, encoded as:
//!
//! - integers: minimal decimal, optional leading `-` (`0`, `-17`);
//! - text: `"..."` with `\"`, `\\`, `\n`, `\r`, `\t` and `\u00XX` for the
//!   remaining C0 control characters, normalized to NFC;
//! - byte strings: `b"<base64url, no padding>"`;
//! - lists: `[v1,v2]`;
//! - maps: `{"k1":v1,"k2":v2}` with keys sorted bytewise;
//!
//! with no whitespace anywhere. Decoding is strict: any input that is not
//! the canonical encoding of some document is rejected, so
//! `encode(decode(bytes)) == bytes` and `decode(encode(doc)) == doc`.

use std::collections::BTreeMap;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use sha2::{Digest, Sha256};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

/// One node of a canonical document.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Value {
    Int(i64),
    Text(String),
    Bytes(Vec<u8>),
    List(Vec<Value>),
    Map(BTreeMap<String, Value>),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CanonicalError {
    #[error("malformed document: {0}")]
    MalformedDocument(String),
}

fn malformed(msg: impl Into<String>) -> CanonicalError {
    CanonicalError::MalformedDocument(msg.into())
}

impl Value {
    pub fn text(s: impl Into<String>) -> Value {
        Value::Text(s.into())
    }

    pub fn bytes(b: impl Into<Vec<u8>>) -> Value {
        Value::Bytes(b.into())
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_bytes(&self) -> Option<&[u8]> {
        match self {
            Value::Bytes(b) => Some(b),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[Value]> {
        match self {
            Value::List(l) => Some(l),
            _ => None,
        }
    }

    pub fn as_map(&self) -> Option<&BTreeMap<String, Value>> {
        match self {
            Value::Map(m) => Some(m),
            _ => None,
        }
    }

    /// Fetch a required map field, with the path in the error message.
    pub fn field(&self, key: &str) -> Result<&Value, CanonicalError> {
        self.as_map()
            .ok_or_else(|| malformed(format!("expected map while reading field {key:?}")))?
            .get(key)
            .ok_or_else(|| malformed(format!("missing field {key:?}")))
    }
}

/// Builder for map-rooted documents.
#[derive(Default)]
pub struct DocBuilder {
    map: BTreeMap<String, Value>,
}

impl DocBuilder {
    pub fn new() -> Self {
        DocBuilder::default()
    }

    pub fn int(mut self, key: &str, v: i64) -> Self {
        self.map.insert(key.to_owned(), Value::Int(v));
        self
    }

    pub fn text(mut self, key: &str, v: impl Into<String>) -> Self {
        self.map.insert(key.to_owned(), Value::Text(v.into()));
        self
    }

    pub fn bytes(mut self, key: &str, v: impl Into<Vec<u8>>) -> Self {
        self.map.insert(key.to_owned(), Value::Bytes(v.into()));
        self
    }

    pub fn list(mut self, key: &str, v: Vec<Value>) -> Self {
        self.map.insert(key.to_owned(), Value::List(v));
        self
    }

    pub fn value(mut self, key: &str, v: Value) -> Self {
        self.map.insert(key.to_owned(), v);
        self
    }

    pub fn build(self) -> Value {
        Value::Map(self.map)
    }
}

/// Encode a document to its unique byte representation.
pub fn encode(value: &Value) -> Vec<u8> {
    let mut out = Vec::new();
    encode_into(value, &mut out);
    out
}

fn encode_into(value: &Value, out: &mut Vec<u8>) {
    match value {
        Value::Int(i) => out.extend_from_slice(i.to_string().as_bytes()),
        Value::Text(s) => encode_text(s, out),
        Value::Bytes(b) => {
            out.push(b'b');
            out.push(b'"');
            out.extend_from_slice(URL_SAFE_NO_PAD.encode(b).as_bytes());
            out.push(b'"');
        }
        Value::List(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                encode_into(item, out);
            }
            out.push(b']');
        }
        Value::Map(map) => {
            out.push(b'{');
            for (i, (k, v)) in map.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                encode_text(k, out);
                out.push(b':');
                encode_into(v, out);
            }
            out.push(b'}');
        }
    }
}

fn encode_text(s: &str, out: &mut Vec<u8>) {
    out.push(b'"');
    for c in s.nfc() {
        match c {
            '"' => out.extend_from_slice(b"\\\""),
            '\\' => out.extend_from_slice(b"\\\\"),
            '\n' => out.extend_from_slice(b"\\n"),
            '\r' => out.extend_from_slice(b"\\r"),
            '\t' => out.extend_from_slice(b"\\t"),
            c if (c as u32) < 0x20 => {
                out.extend_from_slice(format!("\\u{:04x}", c as u32).as_bytes())
            }
            c => {
                let mut buf = [0u8; 4];
                out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
            }
        }
    }
    out.push(b'"');
}

/// Decode a canonical document. Rejects any non-canonical input, including
/// trailing bytes, unsorted or duplicate map keys, non-minimal integers,
/// over-long escapes and text that is not NFC.
pub fn decode(bytes: &[u8]) -> Result<Value, CanonicalError> {
    let mut parser = Parser { bytes, pos: 0 };
    let value = parser.parse_value()?;
    if parser.pos != bytes.len() {
        return Err(malformed(format!("trailing bytes at offset {}", parser.pos)));
    }
    // Re-encoding catches anything the parser is too liberal about
    // (NFC form in particular).
    if encode(&value) != bytes {
        return Err(malformed("input is not in canonical form"));
    }
    Ok(value)
}

/// SHA-256 over the canonical encoding; the digest used to bind approval
/// tokens and audit records to operation parameters.
pub fn digest(value: &Value) -> [u8; 32] {
    let hash = Sha256::digest(encode(value));
    hash.into()
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn next(&mut self) -> Result<u8, CanonicalError> {
        let b = self.peek().ok_or_else(|| malformed("unexpected end of input"))?;
        self.pos += 1;
        Ok(b)
    }

    fn expect(&mut self, b: u8) -> Result<(), CanonicalError> {
        let got = self.next()?;
        if got != b {
            return Err(malformed(format!(
                "expected {:?} at offset {}, got {:?}",
                b as char,
                self.pos - 1,
                got as char
            )));
        }
        Ok(())
    }

    fn parse_value(&mut self) -> Result<Value, CanonicalError> {
        match self.peek() {
            Some(b'"') => Ok(Value::Text(self.parse_text()?)),
            Some(b'b') => self.parse_bytes(),
            Some(b'[') => self.parse_list(),
            Some(b'{') => self.parse_map(),
            Some(b'-') | Some(b'0'..=b'9') => self.parse_int(),
            Some(other) => Err(malformed(format!(
                "unexpected byte {:?} at offset {}",
                other as char, self.pos
            ))),
            None => Err(malformed("unexpected end of input")),
        }
    }

    fn parse_int(&mut self) -> Result<Value, CanonicalError> {
        let start = self.pos;
        if self.peek() == Some(b'-') {
            self.pos += 1;
        }
        let digits_start = self.pos;
        while matches!(self.peek(), Some(b'0'..=b'9')) {
            self.pos += 1;
        }
        let digits = &self.bytes[digits_start..self.pos];
        if digits.is_empty() {
            return Err(malformed("integer with no digits"));
        }
        if digits.len() > 1 && digits[0] == b'0' {
            return Err(malformed("integer with leading zero"));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii");
        if text == "-0" {
            return Err(malformed("negative zero"));
        }
        let value: i64 = text
            .parse()
            .map_err(|_| malformed(format!("integer out of range: {text}")))?;
        Ok(Value::Int(value))
    }

    fn parse_text(&mut self) -> Result<String, CanonicalError> {
        self.expect(b'"')?;
        let mut s = String::new();
        loop {
            let b = self.next()?;
            match b {
                b'"' => return Ok(s),
                b'\\' => match self.next()? {
                    b'"' => s.push('"'),
                    b'\\' => s.push('\\'),
                    b'n' => s.push('\n'),
                    b'r' => s.push('\r'),
                    b't' => s.push('\t'),
                    b'u' => {
                        let mut code = 0u32;
                        for _ in 0..4 {
                            let h = self.next()?;
                            let digit = match h {
                                b'0'..=b'9' => h - b'0',
                                b'a'..=b'f' => h - b'a' + 10,
                                _ => return Err(malformed("bad \\u escape digit")),
                            };
                            code = code * 16 + digit as u32;
                        }
                        // Only the control characters without a short escape
                        // may use \u; everything else has exactly one form.
                        if code >= 0x20 || matches!(code, 0x0a | 0x0d | 0x09) {
                            return Err(malformed("non-canonical \\u escape"));
                        }
                        s.push(char::from_u32(code).expect("C0 control"));
                    }
                    other => {
                        return Err(malformed(format!("unknown escape {:?}", other as char)))
                    }
                },
                0x00..=0x1f => return Err(malformed("raw control character in text")),
                _ => {
                    // Back up one byte and take a full UTF-8 scalar.
                    self.pos -= 1;
                    let rest = &self.bytes[self.pos..];
                    let chunk = std::str::from_utf8(&rest[..rest.len().min(4)])
                        .map_or_else(
                            |e| {
                                if e.valid_up_to() == 0 {
                                    None
                                } else {
                                    std::str::from_utf8(&rest[..e.valid_up_to()]).ok()
                                }
                            },
                            Some,
                        )
                        .ok_or_else(|| malformed("invalid UTF-8 in text"))?;
                    let c = chunk.chars().next().ok_or_else(|| malformed("empty text chunk"))?;
                    s.push(c);
                    self.pos += c.len_utf8();
                }
            }
        }
    }

    fn parse_bytes(&mut self) -> Result<Value, CanonicalError> {
        self.expect(b'b')?;
        self.expect(b'"')?;
        let start = self.pos;
        while !matches!(self.peek(), Some(b'"') | None) {
            self.pos += 1;
        }
        let b64 = &self.bytes[start..self.pos];
        self.expect(b'"')?;
        let text = std::str::from_utf8(b64).map_err(|_| malformed("non-ascii base64"))?;
        let data = URL_SAFE_NO_PAD
            .decode(text)
            .map_err(|e| malformed(format!("bad base64url: {e}")))?;
        Ok(Value::Bytes(data))
    }

    fn parse_list(&mut self) -> Result<Value, CanonicalError> {
        self.expect(b'[')?;
        let mut items = Vec::new();
        if self.peek() == Some(b']') {
            self.pos += 1;
            return Ok(Value::List(items));
        }
        loop {
            items.push(self.parse_value()?);
            match self.next()? {
                b',' => continue,
                b']' => return Ok(Value::List(items)),
                other => {
                    return Err(malformed(format!(
                        "expected ',' or ']' in list, got {:?}",
                        other as char
                    )))
                }
            }
        }
    }

    fn parse_map(&mut self) -> Result<Value, CanonicalError> {
        self.expect(b'{')?;
        let mut map = BTreeMap::new();
        if self.peek() == Some(b'}') {
            self.pos += 1;
            return Ok(Value::Map(map));
        }
        let mut last_key: Option<String> = None;
        loop {
            let key = self.parse_text()?;
            if let Some(prev) = &last_key {
                if *prev >= key {
                    return Err(malformed(format!(
                        "map keys not strictly increasing: {prev:?} then {key:?}"
                    )));
                }
            }
            self.expect(b':')?;
            let value = self.parse_value()?;
            last_key = Some(key.clone());
            map.insert(key, value);
            match self.next()? {
                b',' => continue,
                b'}' => return Ok(Value::Map(map)),
                other => {
                    return Err(malformed(format!(
                        "expected ',' or '}}' in map, got {:?}",
                        other as char
                    )))
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(entries: Vec<(&str, Value)>) -> Value {
        Value::Map(
            entries
                .into_iter()
                .map(|(k, v)| (k.to_owned(), v))
                .collect(),
        )
    }

    #[test]
    fn key_order_is_irrelevant_to_encoding() {
        let ab = map(vec![("a", Value::Int(1)), ("b", Value::Int(2))]);
        let ba = map(vec![("b", Value::Int(2)), ("a", Value::Int(1))]);
        assert_eq!(encode(&ab), encode(&ba));
        assert_eq!(encode(&ab), b"{\"a\":1,\"b\":2}");
    }

    #[test]
    fn scalar_forms() {
        assert_eq!(encode(&Value::Int(0)), b"0");
        assert_eq!(encode(&Value::Int(-17)), b"-17");
        assert_eq!(encode(&Value::text("a\"b\\c\nd")), b"\"a\\\"b\\\\c\\nd\"");
        assert_eq!(encode(&Value::text("\u{1}")), b"\"\\u0001\"");
        assert_eq!(encode(&Value::bytes(vec![0xff, 0x00, 0x10])), b"b\"_wAQ\"");
        assert_eq!(encode(&Value::List(vec![])), b"[]");
        assert_eq!(encode(&Value::Map(BTreeMap::new())), b"{}");
    }

    #[test]
    fn decode_rejects_truncation_and_trailing_bytes() {
        let doc = map(vec![("k", Value::text("v"))]);
        let bytes = encode(&doc);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extended = bytes.clone();
        extended.push(b' ');
        assert!(decode(&extended).is_err());
    }

    #[test]
    fn decode_rejects_non_canonical_forms() {
        for bad in [
            &b"{\"b\":1,\"a\":2}"[..], // unsorted keys
            b"{\"a\":1,\"a\":2}",      // duplicate keys
            b"01",                     // leading zero
            b"-0",                     // negative zero
            b"\"\\u0041\"",            // over-long escape for 'A'
            b"\"\\u000a\"",            // \u for a char with a short escape
            b"{ \"a\":1}",             // whitespace
            b"b\"_wAQ=\"",             // padded base64
        ] {
            assert!(decode(bad).is_err(), "accepted {:?}", String::from_utf8_lossy(bad));
        }
    }

    #[test]
    fn text_is_normalized_to_nfc() {
        // e + combining acute accent normalizes to a single scalar.
        let decomposed = Value::text("e\u{0301}");
        let composed = Value::text("\u{00e9}");
        assert_eq!(encode(&decomposed), encode(&composed));
        // The decomposed byte form is therefore not canonical input.
        assert!(decode("\"e\u{0301}\"".as_bytes()).is_err());
    }

    fn arb_value() -> impl Strategy<Value = Value> {
        let leaf = prop_oneof![
            any::<i64>().prop_map(Value::Int),
            "[a-zA-Z0-9 _.:/\\\\\"\n\t-]{0,24}".prop_map(Value::Text),
            proptest::collection::vec(any::<u8>(), 0..32).prop_map(Value::Bytes),
        ];
        leaf.prop_recursive(3, 48, 6, |inner| {
            prop_oneof![
                proptest::collection::vec(inner.clone(), 0..6).prop_map(Value::List),
                proptest::collection::btree_map("[a-z]{1,8}", inner, 0..6).prop_map(Value::Map),
            ]
        })
    }

    proptest! {
        #[test]
        fn round_trip_identity(doc in arb_value()) {
            let bytes = encode(&doc);
            let back = decode(&bytes).expect("decode of own encoding");
            prop_assert_eq!(&back, &doc);
            prop_assert_eq!(encode(&back), bytes);
        }

        #[test]
        fn encoding_is_deterministic(doc in arb_value()) {
            prop_assert_eq!(encode(&doc), encode(&doc.clone()));
        }
    }
}
