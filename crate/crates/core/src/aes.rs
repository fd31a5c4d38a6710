//! First-round AES-128 operations: the S-box layer that produces the
//! classification targets and maps key hypotheses onto model classes.

use serde::{Deserialize, Serialize};

#[rustfmt::skip]
pub const SBOX: [u8; 256] = [
    0x63, 0x7c, 0x77, 0x7b, 0xf2, 0x6b, 0x6f, 0xc5, 0x30, 0x01, 0x67, 0x2b, 0xfe, 0xd7, 0xab, 0x76,
    0xca, 0x82, 0xc9, 0x7d, 0xfa, 0x59, 0x47, 0xf0, 0xad, 0xd4, 0xa2, 0xaf, 0x9c, 0xa4, 0x72, 0xc0,
    0xb7, 0xfd, 0x93, 0x26, 0x36, 0x3f, 0xf7, 0xcc, 0x34, 0xa5, 0xe5, 0xf1, 0x71, 0xd8, 0x31, 0x15,
    0x04, 0xc7, 0x23, 0xc3, 0x18, 0x96, 0x05, 0x9a, 0x07, 0x12, 0x80, 0xe2, 0xeb, 0x27, 0xb2, 0x75,
    0x09, 0x83, 0x2c, 0x1a, 0x1b, 0x6e, 0x5a, 0xa0, 0x52, 0x3b, 0xd6, 0xb3, 0x29, 0xe3, 0x2f, 0x84,
    0x53, 0xd1, 0x00, 0xed, 0x20, 0xfc, 0xb1, 0x5b, 0x6a, 0xcb, 0xbe, 0x39, 0x4a, 0x4c, 0x58, 0xcf,
    0xd0, 0xef, 0xaa, 0xfb, 0x43, 0x4d, 0x33, 0x85, 0x45, 0xf9, 0x02, 0x7f, 0x50, 0x3c, 0x9f, 0xa8,
    0x51, 0xa3, 0x40, 0x8f, 0x92, 0x9d, 0x38, 0xf5, 0xbc, 0xb6, 0xda, 0x21, 0x10, 0xff, 0xf3, 0xd2,
    0xcd, 0x0c, 0x13, 0xec, 0x5f, 0x97, 0x44, 0x17, 0xc4, 0xa7, 0x7e, 0x3d, 0x64, 0x5d, 0x19, 0x73,
    0x60, 0x81, 0x4f, 0xdc, 0x22, 0x2a, 0x90, 0x88, 0x46, 0xee, 0xb8, 0x14, 0xde, 0x5e, 0x0b, 0xdb,
    0xe0, 0x32, 0x3a, 0x0a, 0x49, 0x06, 0x24, 0x5c, 0xc2, 0xd3, 0xac, 0x62, 0x91, 0x95, 0xe4, 0x79,
    0xe7, 0xc8, 0x37, 0x6d, 0x8d, 0xd5, 0x4e, 0xa9, 0x6c, 0x56, 0xf4, 0xea, 0x65, 0x7a, 0xae, 0x08,
    0xba, 0x78, 0x25, 0x2e, 0x1c, 0xa6, 0xb4, 0xc6, 0xe8, 0xdd, 0x74, 0x1f, 0x4b, 0xbd, 0x8b, 0x8a,
    0x70, 0x3e, 0xb5, 0x66, 0x48, 0x03, 0xf6, 0x0e, 0x61, 0x35, 0x57, 0xb9, 0x86, 0xc1, 0x1d, 0x9e,
    0xe1, 0xf8, 0x98, 0x11, 0x69, 0xd9, 0x8e, 0x94, 0x9b, 0x1e, 0x87, 0xe9, 0xce, 0x55, 0x28, 0xdf,
    0x8c, 0xa1, 0x89, 0x0d, 0xbf, 0xe6, 0x42, 0x68, 0x41, 0x99, 0x2d, 0x0f, 0xb0, 0x54, 0xbb, 0x16,
];

/// Inverse S-box, built from `SBOX` at compile time.
pub const INV_SBOX: [u8; 256] = {
    let mut inv = [0u8; 256];
    let mut i = 0;
    while i < 256 {
        inv[SBOX[i] as usize] = i as u8;
        i += 1;
    }
    inv
};

#[inline]
pub fn sbox(v: u8) -> u8 {
    SBOX[v as usize]
}

#[inline]
pub fn hamming_weight(v: u8) -> u32 {
    v.count_ones()
}

/// Model class predicted for a key guess: `sbox(pt_byte ^ key_guess)`.
#[inline]
pub fn hypothesis_class(pt_byte: u8, key_guess: u8) -> u8 {
    SBOX[(pt_byte ^ key_guess) as usize]
}

/// Recovers the key byte consistent with one labelled trace.
#[inline]
pub fn key_from_label(pt_byte: u8, label: u8) -> u8 {
    INV_SBOX[label as usize] ^ pt_byte
}

macro_rules! block16 {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub [u8; 16]);

        impl $name {
            pub fn as_bytes(&self) -> &[u8; 16] {
                &self.0
            }
        }

        impl std::ops::Index<usize> for $name {
            type Output = u8;
            fn index(&self, i: usize) -> &u8 {
                &self.0[i]
            }
        }

        impl TryFrom<&[u8]> for $name {
            type Error = crate::Error;
            fn try_from(s: &[u8]) -> crate::Result<Self> {
                let arr: [u8; 16] = s.try_into().map_err(|_| {
                    crate::Error::InvalidInput(format!(
                        concat!(stringify!($name), " needs 16 bytes, got {}"),
                        s.len()
                    ))
                })?;
                Ok(Self(arr))
            }
        }
    };
}

block16!(
    /// AES-128 key.
    KeyBytes
);
block16!(
    /// One 128-bit plaintext block.
    PlaintextBytes
);
block16!(
    /// First-round S-box outputs, one per key byte.
    LabelBytes
);

impl Default for KeyBytes {
    /// `{0x00, 0x11, 0x22, ..., 0xFF}`.
    fn default() -> Self {
        let mut k = [0u8; 16];
        for (i, b) in k.iter_mut().enumerate() {
            *b = (i as u8) * 0x11;
        }
        KeyBytes(k)
    }
}

/// First AddRoundKey followed by SubBytes.
pub fn first_round_labels(pt: &PlaintextBytes, key: &KeyBytes) -> LabelBytes {
    LabelBytes(std::array::from_fn(|b| sbox(pt.0[b] ^ key.0[b])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Independent S-box oracle: multiplicative inverse in GF(2^8) followed by
    // the affine transform.
    fn gf_mul(mut a: u8, mut b: u8) -> u8 {
        let mut p = 0u8;
        for _ in 0..8 {
            if b & 1 == 1 {
                p ^= a;
            }
            let hi = a & 0x80;
            a <<= 1;
            if hi != 0 {
                a ^= 0x1b;
            }
            b >>= 1;
        }
        p
    }

    fn oracle_sbox(a: u8) -> u8 {
        let inv = if a == 0 {
            0
        } else {
            (1..=255u8).find(|&b| gf_mul(a, b) == 1).unwrap()
        };
        inv ^ inv.rotate_left(1) ^ inv.rotate_left(2) ^ inv.rotate_left(3) ^ inv.rotate_left(4) ^ 0x63
    }

    #[test]
    fn table_matches_field_construction() {
        for v in 0..=255u8 {
            assert_eq!(sbox(v), oracle_sbox(v), "entry {v:#04x}");
        }
    }

    #[test]
    fn published_values() {
        assert_eq!(sbox(0x00), 0x63);
        assert_eq!(sbox(0x53), 0xed);
        assert_eq!(sbox(0x11), 0x82);
    }

    #[test]
    fn sbox_is_a_permutation() {
        let mut img: Vec<u8> = (0..=255u8).map(sbox).collect();
        img.sort_unstable();
        assert!(img.iter().enumerate().all(|(i, &v)| v as usize == i));
        for v in 0..=255u8 {
            assert_eq!(INV_SBOX[sbox(v) as usize], v);
        }
    }

    #[test]
    fn default_key() {
        let k = KeyBytes::default();
        assert_eq!(k[0], 0x00);
        assert_eq!(k[1], 0x11);
        assert_eq!(k[2], 0x22);
        assert_eq!(k[15], 0xff);
    }

    #[test]
    fn label_examples() {
        let key = KeyBytes::default();
        let same = first_round_labels(&PlaintextBytes(key.0), &key);
        assert!(same.0.iter().all(|&l| l == 0x63));

        let zero = first_round_labels(&PlaintextBytes([0; 16]), &key);
        assert_eq!(zero[1], sbox(0x11));

        let mut pt = [0u8; 16];
        pt[2] = 0x22;
        assert_eq!(first_round_labels(&PlaintextBytes(pt), &key)[2], 0x63);
    }

    #[test]
    fn hypotheses_are_distinct_per_plaintext() {
        for pt in [0x00u8, 0x5a, 0xff] {
            let mut seen = [false; 256];
            for k in 0..=255u8 {
                let c = hypothesis_class(pt, k) as usize;
                assert!(!seen[c]);
                seen[c] = true;
            }
        }
        assert_eq!(hypothesis_class(0, 0), 0x63);
    }

    #[test]
    fn wrong_length_is_rejected() {
        assert!(KeyBytes::try_from(&[0u8; 15][..]).is_err());
        assert!(KeyBytes::try_from(&[0u8; 16][..]).is_ok());
    }

    proptest! {
        #[test]
        fn labels_match_bytewise_hypotheses(pt in any::<[u8; 16]>(), key in any::<[u8; 16]>()) {
            let labels = first_round_labels(&PlaintextBytes(pt), &KeyBytes(key));
            for b in 0..16 {
                prop_assert_eq!(labels[b], hypothesis_class(pt[b], key[b]));
                prop_assert_eq!(key_from_label(pt[b], labels[b]), key[b]);
            }
        }
    }
}
