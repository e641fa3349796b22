//! Paillier cryptosystem with two-party threshold decryption.
//!
//! The private exponent `λ = (p-1)(q-1)` is split additively into two shares
//! `λ₁ + λ₂ = ε` where `ε ≡ 0 (mod λ)` and `ε ≡ 1 (mod N)`. Each share holder
//! raises a ciphertext to its share; multiplying both partial results and
//! applying `L(x) = (x - 1) / N` yields the plaintext, while either partial
//! result alone does not.
//!
//! Ciphertexts carry a public fixed-point scale exponent: a ciphertext with
//! scale `s` encrypts an integer that stands for `value * 10^s`.

use std::fmt;

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::arith::{modinv, modpow};
use crate::encoding::{put_field, put_u32, put_u64, DecodeError, Reader};
use crate::prime;

/// Smallest prime size accepted in test mode.
pub const TEST_MIN_ZETA: u32 = 16;
/// Smallest prime size accepted for deployments.
pub const DEPLOYMENT_MIN_ZETA: u32 = 1024;

const KEY_FORMAT_VERSION: u8 = 1;
const PRIME_CANDIDATES: usize = 200_000;
const KEYGEN_RETRIES: usize = 16;

#[derive(Debug, Error)]
pub enum CryptoError {
    #[error("prime generation failed after {0} attempts")]
    KeyGeneration(usize),
    #[error("security parameter ζ={zeta} is below the minimum of {min} bits")]
    WeakParameter { zeta: u32, min: u32 },
    #[error("invalid key: {0}")]
    InvalidKey(&'static str),
    #[error("plaintext is outside [0, N)")]
    PlaintextRange,
    #[error("scalar is outside [0, N)")]
    ScalarRange,
    #[error("ciphertext is not a unit modulo N²")]
    InvalidCiphertext,
    #[error("corrupted ciphertext: L-function numerator is not divisible by N")]
    Corrupted,
    #[error("partial decryptions do not come from complementary shares of one split")]
    Pairing,
    #[error("ciphertext scales differ ({0} vs {1}); align them first")]
    ScaleMismatch(u32, u32),
    #[error("scale {0} does not fit the signed-byte wire encoding")]
    ScaleOverflow(u32),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

/// Which prime-size floor keygen enforces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeygenMode {
    /// ζ ≥ 16; small keys make exhaustive oracles feasible.
    Test,
    /// ζ ≥ 1024.
    Deployment,
}

impl KeygenMode {
    pub fn min_zeta(self) -> u32 {
        match self {
            KeygenMode::Test => TEST_MIN_ZETA,
            KeygenMode::Deployment => DEPLOYMENT_MIN_ZETA,
        }
    }
}

/// `pk = (g, N)` with `g = N + 1`.
#[derive(Clone, PartialEq, Eq)]
pub struct PublicKey {
    n: BigUint,
    n_squared: BigUint,
    g: BigUint,
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PublicKey")
            .field("bits", &self.n.bits())
            .finish()
    }
}

/// `sk = (λ, u)` with `u = λ⁻¹ mod N`. The primes are dropped after keygen.
#[derive(Clone, PartialEq, Eq)]
pub struct PrivateKey {
    lambda: BigUint,
    u: BigUint,
}

impl fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("PrivateKey(..)")
    }
}

/// Identifies one split of the private key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SplitId(pub u64);

/// Position of a share within its split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShareIndex {
    First,
    Second,
}

impl ShareIndex {
    fn to_byte(self) -> u8 {
        match self {
            ShareIndex::First => 1,
            ShareIndex::Second => 2,
        }
    }

    fn from_byte(b: u8) -> Result<Self, DecodeError> {
        match b {
            1 => Ok(ShareIndex::First),
            2 => Ok(ShareIndex::Second),
            _ => Err(DecodeError::Malformed("share index")),
        }
    }
}

/// Identity of the share that produced a partial decryption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ShareId {
    pub split: SplitId,
    pub index: ShareIndex,
}

/// One additive share `λᵢ` of the private exponent.
#[derive(Clone, PartialEq, Eq)]
pub struct KeyShare {
    value: BigUint,
    id: ShareId,
}

impl fmt::Debug for KeyShare {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyShare").field("id", &self.id).finish()
    }
}

/// How the first share of a split is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    /// `λ₁` uniform in `[1, λ·u]`, rejecting the values that would make a
    /// share zero or equal to `λ`.
    Uniform,
    /// `λ₂ = 2`, `λ₁ = ε - 2`. Cheap for the holder of the second share, but
    /// anyone holding `λ₁` can guess `ε` and decrypt everything.
    SmallSecondShare,
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Ciphertext {
    value: BigUint,
    scale: u32,
}

impl fmt::Debug for Ciphertext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Ciphertext")
            .field("scale", &self.scale)
            .finish_non_exhaustive()
    }
}

/// `Mᵢ = ⟦m⟧^λᵢ mod N²`.
#[derive(Clone, PartialEq, Eq)]
pub struct PartialDecryption {
    value: BigUint,
    share: ShareId,
}

impl fmt::Debug for PartialDecryption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PartialDecryption")
            .field("share", &self.share)
            .finish_non_exhaustive()
    }
}

/// Generates a key pair with two `zeta`-bit primes.
pub fn keygen<R: RngCore + CryptoRng>(
    zeta: u32,
    mode: KeygenMode,
    rng: &mut R,
) -> Result<(PublicKey, PrivateKey), CryptoError> {
    if zeta < mode.min_zeta() {
        return Err(CryptoError::WeakParameter {
            zeta,
            min: mode.min_zeta(),
        });
    }
    for _ in 0..KEYGEN_RETRIES {
        let p = prime::random_prime(zeta as u64, PRIME_CANDIDATES, rng)
            .ok_or(CryptoError::KeyGeneration(PRIME_CANDIDATES))?;
        let q = prime::random_prime(zeta as u64, PRIME_CANDIDATES, rng)
            .ok_or(CryptoError::KeyGeneration(PRIME_CANDIDATES))?;
        if p == q {
            continue;
        }
        if let Ok(keys) = keys_from_primes(&p, &q) {
            return Ok(keys);
        }
    }
    Err(CryptoError::KeyGeneration(KEYGEN_RETRIES))
}

/// Builds a key pair from caller-chosen primes. Used for toy keys such as
/// `p = 5, q = 7`; primality is the caller's responsibility.
pub fn keys_from_primes(
    p: &BigUint,
    q: &BigUint,
) -> Result<(PublicKey, PrivateKey), CryptoError> {
    if p == q || *p < BigUint::from(3u32) || *q < BigUint::from(3u32) {
        return Err(CryptoError::InvalidKey("primes must be distinct odd primes"));
    }
    let n = p * q;
    let lambda = (p - 1u32) * (q - 1u32);
    if !lambda.gcd(&n).is_one() {
        return Err(CryptoError::InvalidKey("gcd(λ, N) ≠ 1"));
    }
    let u = modinv(&lambda, &n)
        .ok_or(CryptoError::InvalidKey("λ is not invertible mod N"))?;
    Ok((PublicKey::from_modulus(n)?, PrivateKey { lambda, u }))
}

/// Splits `λ` into two shares summing to `ε = λ·u mod (λ·N)`.
pub fn split_key<R: RngCore + CryptoRng>(
    sk: &PrivateKey,
    pk: &PublicKey,
    mode: SplitMode,
    split: SplitId,
    rng: &mut R,
) -> Result<(KeyShare, KeyShare), CryptoError> {
    let modulus = &sk.lambda * &pk.n;
    let epsilon = (&sk.lambda * &sk.u) % &modulus;
    let two = BigUint::from(2u32);
    if epsilon <= two {
        return Err(CryptoError::InvalidKey("degenerate key"));
    }
    let first = match mode {
        SplitMode::Uniform => loop {
            // upper bound λ·u inclusive; λ₁ = ε would make λ₂ = 0
            let candidate = rng.gen_biguint_range(&BigUint::one(), &(&sk.lambda * &sk.u + 1u32));
            if candidate >= epsilon {
                continue;
            }
            let second = &epsilon - &candidate;
            if candidate != sk.lambda && second != sk.lambda && !second.is_zero() {
                break candidate;
            }
        },
        SplitMode::SmallSecondShare => &epsilon - &two,
    };
    let second = &epsilon - &first;
    Ok((
        KeyShare {
            value: first,
            id: ShareId {
                split,
                index: ShareIndex::First,
            },
        },
        KeyShare {
            value: second,
            id: ShareId {
                split,
                index: ShareIndex::Second,
            },
        },
    ))
}

/// `m = L(⟦m⟧^λ mod N²)·u mod N`.
pub fn dec(sk: &PrivateKey, pk: &PublicKey, c: &Ciphertext) -> Result<BigUint, CryptoError> {
    pk.check_ciphertext(c)?;
    let x = modpow(&c.value, &sk.lambda, &pk.n_squared);
    let l = pk.l_function(&x)?;
    Ok((l * &sk.u) % &pk.n)
}

pub fn pdec(share: &KeyShare, pk: &PublicKey, c: &Ciphertext) -> PartialDecryption {
    PartialDecryption {
        value: modpow(&c.value, &share.value, &pk.n_squared),
        share: share.id,
    }
}

/// `m = L(M₁·M₂ mod N²)`; requires the two shares of one split.
pub fn tdec(
    pd1: &PartialDecryption,
    pd2: &PartialDecryption,
    pk: &PublicKey,
) -> Result<BigUint, CryptoError> {
    if pd1.share.split != pd2.share.split || pd1.share.index == pd2.share.index {
        return Err(CryptoError::Pairing);
    }
    let product = (&pd1.value * &pd2.value) % &pk.n_squared;
    Ok(pk.l_function(&product)? % &pk.n)
}

impl PublicKey {
    pub fn from_modulus(n: BigUint) -> Result<Self, CryptoError> {
        if n.is_even() || n < BigUint::from(15u32) {
            return Err(CryptoError::InvalidKey("modulus must be an odd composite"));
        }
        let n_squared = &n * &n;
        let g = &n + 1u32;
        Ok(Self { n, n_squared, g })
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn n_squared(&self) -> &BigUint {
        &self.n_squared
    }

    pub fn g(&self) -> &BigUint {
        &self.g
    }

    /// `⌊log₂ N⌋`.
    pub fn log2_n(&self) -> u64 {
        self.n.bits() - 1
    }

    /// Samples `r ∈ Z_N^*`.
    pub fn random_unit<R: RngCore + CryptoRng>(&self, rng: &mut R) -> BigUint {
        loop {
            let r = rng.gen_biguint_range(&BigUint::one(), &self.n);
            if r.gcd(&self.n).is_one() {
                return r;
            }
        }
    }

    /// `⟦m⟧ = (1 + m·N)·r^N mod N²`.
    pub fn encrypt<R: RngCore + CryptoRng>(
        &self,
        m: &BigUint,
        scale: u32,
        rng: &mut R,
    ) -> Result<Ciphertext, CryptoError> {
        let r = self.random_unit(rng);
        self.encrypt_with_nonce(m, scale, &r)
    }

    /// Encryption with caller-supplied randomness `r`, which must be a unit mod N.
    pub fn encrypt_with_nonce(
        &self,
        m: &BigUint,
        scale: u32,
        r: &BigUint,
    ) -> Result<Ciphertext, CryptoError> {
        if *m >= self.n {
            return Err(CryptoError::PlaintextRange);
        }
        if r.is_zero() || *r >= self.n || !r.gcd(&self.n).is_one() {
            return Err(CryptoError::InvalidCiphertext);
        }
        let shortcut = (m * &self.n + 1u32) % &self.n_squared;
        let mask = modpow(r, &self.n, &self.n_squared);
        Ok(Ciphertext {
            value: (shortcut * mask) % &self.n_squared,
            scale,
        })
    }

    /// `⟦a + b⟧ = ⟦a⟧·⟦b⟧ mod N²`.
    pub fn add(&self, c1: &Ciphertext, c2: &Ciphertext) -> Result<Ciphertext, CryptoError> {
        if c1.scale != c2.scale {
            return Err(CryptoError::ScaleMismatch(c1.scale, c2.scale));
        }
        Ok(Ciphertext {
            value: (&c1.value * &c2.value) % &self.n_squared,
            scale: c1.scale,
        })
    }

    /// `⟦k·a⟧ = ⟦a⟧^k mod N²`; `k` is an unscaled integer.
    pub fn mul_scalar(&self, c: &Ciphertext, k: &BigUint) -> Result<Ciphertext, CryptoError> {
        if *k >= self.n {
            return Err(CryptoError::ScalarRange);
        }
        Ok(Ciphertext {
            value: modpow(&c.value, k, &self.n_squared),
            scale: c.scale,
        })
    }

    /// `⟦-a⟧`. Decrypts exactly like `mul_scalar(c, N - 1)` but uses the group
    /// inverse instead of a full-size exponentiation.
    pub fn negate(&self, c: &Ciphertext) -> Result<Ciphertext, CryptoError> {
        let inv = modinv(&c.value, &self.n_squared)
            .ok_or(CryptoError::InvalidCiphertext)?;
        Ok(Ciphertext {
            value: inv,
            scale: c.scale,
        })
    }

    /// `⟦a - b⟧`.
    pub fn sub(&self, c1: &Ciphertext, c2: &Ciphertext) -> Result<Ciphertext, CryptoError> {
        self.add(c1, &self.negate(c2)?)
    }

    /// Multiplies the plaintext by `10^by` and raises the scale tag to match,
    /// leaving the represented decimal unchanged.
    pub fn rescale_up(&self, c: &Ciphertext, by: u32) -> Result<Ciphertext, CryptoError> {
        let factor = BigUint::from(10u32).pow(by);
        let mut out = self.mul_scalar(c, &factor)?;
        out.scale = c.scale + by;
        Ok(out)
    }

    /// `L(x) = (x - 1) / N`, failing when `N` does not divide `x - 1`.
    pub fn l_function(&self, x: &BigUint) -> Result<BigUint, CryptoError> {
        if x.is_zero() {
            return Err(CryptoError::Corrupted);
        }
        let (quotient, remainder) = (x - 1u32).div_rem(&self.n);
        if !remainder.is_zero() {
            return Err(CryptoError::Corrupted);
        }
        Ok(quotient)
    }

    pub fn check_ciphertext(&self, c: &Ciphertext) -> Result<(), CryptoError> {
        if c.value.is_zero() || c.value >= self.n_squared || !c.value.gcd(&self.n).is_one() {
            return Err(CryptoError::InvalidCiphertext);
        }
        Ok(())
    }

    /// Version byte followed by the length-prefixed modulus.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![KEY_FORMAT_VERSION];
        put_field(&mut out, &self.n.to_bytes_be());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let mut r = Reader::new(bytes);
        let version = r.u8()?;
        if version != KEY_FORMAT_VERSION {
            return Err(DecodeError::Version(version).into());
        }
        let n = BigUint::from_bytes_be(r.field()?);
        r.finish()?;
        Self::from_modulus(n)
    }
}

impl PrivateKey {
    pub fn lambda(&self) -> &BigUint {
        &self.lambda
    }

    pub fn u(&self) -> &BigUint {
        &self.u
    }

    /// `ε = λ·u mod (λ·N)`, the sum every split of this key adds up to.
    pub fn epsilon(&self, pk: &PublicKey) -> BigUint {
        (&self.lambda * &self.u) % (&self.lambda * pk.n())
    }
}

impl KeyShare {
    pub fn value(&self) -> &BigUint {
        &self.value
    }

    pub fn id(&self) -> ShareId {
        self.id
    }

    pub fn partial_decrypt(&self, pk: &PublicKey, c: &Ciphertext) -> PartialDecryption {
        pdec(self, pk, c)
    }
}

impl Ciphertext {
    /// Wraps a raw group element, checking it is a unit mod N².
    pub fn from_raw(pk: &PublicKey, value: BigUint, scale: u32) -> Result<Self, CryptoError> {
        let c = Ciphertext { value, scale };
        pk.check_ciphertext(&c)?;
        Ok(c)
    }

    pub fn value(&self) -> &BigUint {
        &self.value
    }

    pub fn scale(&self) -> u32 {
        self.scale
    }

    /// Re-tags the scale without touching the plaintext.
    pub fn with_scale(mut self, scale: u32) -> Self {
        self.scale = scale;
        self
    }

    /// Big-endian value bytes followed by one signed byte holding the scale.
    pub fn to_bytes(&self) -> Result<Vec<u8>, CryptoError> {
        let scale = i8::try_from(self.scale).map_err(|_| CryptoError::ScaleOverflow(self.scale))?;
        let mut out = self.value.to_bytes_be();
        out.push(scale as u8);
        Ok(out)
    }

    pub fn from_bytes(pk: &PublicKey, bytes: &[u8]) -> Result<Self, CryptoError> {
        let (&scale, value) = bytes
            .split_last()
            .ok_or(DecodeError::Malformed("empty ciphertext"))?;
        let scale = scale as i8;
        if scale < 0 {
            return Err(DecodeError::Malformed("negative scale").into());
        }
        Self::from_raw(pk, BigUint::from_bytes_be(value), scale as u32)
    }
}

impl PartialDecryption {
    /// Rebuilds a partial decryption received over the wire; the receiver
    /// knows which share the sender holds.
    pub fn from_raw(pk: &PublicKey, value: BigUint, share: ShareId) -> Result<Self, CryptoError> {
        if value.is_zero() || value >= pk.n_squared {
            return Err(CryptoError::InvalidCiphertext);
        }
        Ok(Self { value, share })
    }

    pub fn value(&self) -> &BigUint {
        &self.value
    }

    pub fn share(&self) -> ShareId {
        self.share
    }
}

/// Everything the key generation center produces: the key pair and the two
/// splits it hands out (`⟨λ_c, λ_sc⟩` and `⟨λ_p, λ_sp⟩`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyMaterial {
    pub public: PublicKey,
    pub private: PrivateKey,
    pub csp_share: KeyShare,
    pub sp_csp_share: KeyShare,
    pub participant_share: KeyShare,
    pub sp_participant_share: KeyShare,
}

/// Split ids used for the two deployed splits.
pub const SERVER_SPLIT: SplitId = SplitId(1);
pub const PARTICIPANT_SPLIT: SplitId = SplitId(2);

impl KeyMaterial {
    pub fn generate<R: RngCore + CryptoRng>(
        zeta: u32,
        mode: KeygenMode,
        participant_split: SplitMode,
        rng: &mut R,
    ) -> Result<Self, CryptoError> {
        let (public, private) = keygen(zeta, mode, rng)?;
        Self::from_keys(public, private, participant_split, rng)
    }

    pub fn from_keys<R: RngCore + CryptoRng>(
        public: PublicKey,
        private: PrivateKey,
        participant_split: SplitMode,
        rng: &mut R,
    ) -> Result<Self, CryptoError> {
        let (csp_share, sp_csp_share) =
            split_key(&private, &public, SplitMode::Uniform, SERVER_SPLIT, rng)?;
        let (participant_share, sp_participant_share) =
            split_key(&private, &public, participant_split, PARTICIPANT_SPLIT, rng)?;
        Ok(Self {
            public,
            private,
            csp_share,
            sp_csp_share,
            participant_share,
            sp_participant_share,
        })
    }

    /// Version byte, then length-prefixed big-endian `N`, `λ`, `u`, and a
    /// counted list of shares (split id, index byte, value).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![KEY_FORMAT_VERSION];
        put_field(&mut out, &self.public.n.to_bytes_be());
        put_field(&mut out, &self.private.lambda.to_bytes_be());
        put_field(&mut out, &self.private.u.to_bytes_be());
        let shares = [
            &self.csp_share,
            &self.sp_csp_share,
            &self.participant_share,
            &self.sp_participant_share,
        ];
        put_u32(&mut out, shares.len() as u32);
        for share in shares {
            put_u64(&mut out, share.id.split.0);
            out.push(share.id.index.to_byte());
            put_field(&mut out, &share.value.to_bytes_be());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let mut r = Reader::new(bytes);
        let version = r.u8()?;
        if version != KEY_FORMAT_VERSION {
            return Err(DecodeError::Version(version).into());
        }
        let public = PublicKey::from_modulus(BigUint::from_bytes_be(r.field()?))?;
        let private = PrivateKey {
            lambda: BigUint::from_bytes_be(r.field()?),
            u: BigUint::from_bytes_be(r.field()?),
        };
        if !(&private.lambda * &private.u % &public.n).is_one() {
            return Err(CryptoError::InvalidKey("λ·u ≢ 1 (mod N)"));
        }
        let count = r.u32()?;
        if count != 4 {
            return Err(DecodeError::Malformed("share count").into());
        }
        let mut shares = Vec::with_capacity(4);
        for _ in 0..count {
            let split = SplitId(r.u64()?);
            let index = ShareIndex::from_byte(r.u8()?)?;
            let value = BigUint::from_bytes_be(r.field()?);
            shares.push(KeyShare {
                value,
                id: ShareId { split, index },
            });
        }
        r.finish()?;
        let mut it = shares.into_iter();
        let (csp_share, sp_csp_share, participant_share, sp_participant_share) = (
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
        );
        Ok(Self {
            public,
            private,
            csp_share,
            sp_csp_share,
            participant_share,
            sp_participant_share,
        })
    }
}
