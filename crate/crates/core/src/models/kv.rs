//! Key/value record files: `u32` BE key length, key, `u32` BE value
//! length, value, repeated until end of file.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct KeyValuePair {
    pub key: Vec<u8>,
    pub value: Vec<u8>,
}

impl KeyValuePair {
    pub fn new(key: impl Into<Vec<u8>>, value: impl Into<Vec<u8>>) -> Self {
        Self { key: key.into(), value: value.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed key/value record at byte {offset}")]
pub struct KvFormatError {
    pub offset: usize,
}

pub fn write_pair(out: &mut Vec<u8>, key: &[u8], value: &[u8]) {
    out.extend_from_slice(&(key.len() as u32).to_be_bytes());
    out.extend_from_slice(key);
    out.extend_from_slice(&(value.len() as u32).to_be_bytes());
    out.extend_from_slice(value);
}

pub fn encode_pairs<'a>(pairs: impl IntoIterator<Item = &'a KeyValuePair>) -> Vec<u8> {
    let mut out = Vec::new();
    for p in pairs {
        write_pair(&mut out, &p.key, &p.value);
    }
    out
}

pub fn decode_pairs(bytes: &[u8]) -> Result<Vec<KeyValuePair>, KvFormatError> {
    let mut pairs = Vec::new();
    let mut at = 0;
    let take = |at: &mut usize| -> Result<Vec<u8>, KvFormatError> {
        let start = *at;
        let len_bytes = bytes.get(*at..*at + 4).ok_or(KvFormatError { offset: start })?;
        let len = u32::from_be_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
        *at += 4;
        let field = bytes.get(*at..*at + len).ok_or(KvFormatError { offset: start })?;
        *at += len;
        Ok(field.to_vec())
    };
    while at < bytes.len() {
        let key = take(&mut at)?;
        let value = take(&mut at)?;
        pairs.push(KeyValuePair { key, value });
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_bit_exact() {
        let bytes = encode_pairs(&[KeyValuePair::new("ab", "c")]);
        assert_eq!(bytes, [0, 0, 0, 2, b'a', b'b', 0, 0, 0, 1, b'c']);
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = encode_pairs(&[KeyValuePair::new("ab", "c")]);
        assert_eq!(decode_pairs(&bytes[..7]), Err(KvFormatError { offset: 6 }));
        assert_eq!(decode_pairs(&[0, 0]), Err(KvFormatError { offset: 0 }));
    }

    proptest! {
        #[test]
        fn roundtrip(pairs in proptest::collection::vec((any::<Vec<u8>>(), any::<Vec<u8>>()), 0..20)) {
            let pairs: Vec<KeyValuePair> = pairs.into_iter().map(|(k, v)| KeyValuePair::new(k, v)).collect();
            prop_assert_eq!(decode_pairs(&encode_pairs(&pairs)).unwrap(), pairs);
        }
    }
}
