//! Content packager: CENC-encrypts media for a configured key.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use super::ContentKeySpec;
use crate::cdm::{cenc_apply, subsample_total, Subsample};
use crate::crypto::{self, AesKey, Iv};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CdnError {
    #[error("unknown key id {}", hex::encode(.0))]
    UnknownKeyId(Vec<u8>),
    #[error("subsample plan covers {plan} bytes, content is {content}")]
    PlanMismatch { plan: usize, content: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CencPackage {
    pub key_id: Vec<u8>,
    pub iv: Iv,
    pub subsamples: Vec<Subsample>,
    pub data: Vec<u8>,
}

pub struct Cdn {
    keys: BTreeMap<Vec<u8>, AesKey>,
    rng: ChaCha20Rng,
}

impl Cdn {
    pub fn new(keys: &[ContentKeySpec], seed: Option<u64>) -> Cdn {
        Cdn {
            keys: keys.iter().map(|k| (k.key_id.clone(), k.key)).collect(),
            rng: match seed {
                Some(s) => ChaCha20Rng::seed_from_u64(s),
                None => ChaCha20Rng::from_entropy(),
            },
        }
    }

    /// Encrypts the protected ranges of `plaintext` under a fresh random IV.
    pub fn encrypt_content(
        &mut self,
        key_id: &[u8],
        plaintext: &[u8],
        plan: &[Subsample],
    ) -> Result<CencPackage, CdnError> {
        let key = self.keys.get(key_id).ok_or_else(|| CdnError::UnknownKeyId(key_id.to_vec()))?;
        let total = subsample_total(plan);
        if total != plaintext.len() {
            return Err(CdnError::PlanMismatch { plan: total, content: plaintext.len() });
        }
        let iv: Iv = crypto::random_array(&mut self.rng);
        let mut data = plaintext.to_vec();
        cenc_apply(key, &iv, plan, &mut data);
        Ok(CencPackage {
            key_id: key_id.to_vec(),
            iv,
            subsamples: plan.to_vec(),
            data,
        })
    }
}

/// Repeats `clear`/`protected` runs over `len` bytes; the final run is cut short.
pub fn repeating_plan(len: usize, clear: usize, protected: usize) -> Vec<Subsample> {
    assert!(clear + protected > 0, "empty subsample pattern");
    let mut plan = Vec::new();
    let mut left = len;
    while left > 0 {
        let c = clear.min(left);
        let p = protected.min(left - c);
        plan.push(Subsample::new(c, p));
        left -= c + p;
    }
    plan
}
