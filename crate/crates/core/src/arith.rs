//! Modular exponentiation and inversion, the hot path of every protocol.
//! With the `gmp` feature these go through GMP; otherwise num-bigint.

use num_bigint::BigUint;

#[cfg(feature = "gmp")]
mod imp {
    use num_bigint::BigUint;
    use rug::integer::Order;
    use rug::Integer;

    fn to_gmp(v: &BigUint) -> Integer {
        Integer::from_digits(&v.to_u64_digits(), Order::Lsf)
    }

    fn from_gmp(v: &Integer) -> BigUint {
        BigUint::new(v.to_digits::<u32>(Order::Lsf))
    }

    pub fn modpow(base: &BigUint, exp: &BigUint, modulus: &BigUint) -> BigUint {
        let m = to_gmp(modulus);
        match to_gmp(base).pow_mod(&to_gmp(exp), &m) {
            Ok(v) => from_gmp(&v),
            // only a negative exponent fails, and `exp` is unsigned
            Err(_) => unreachable!("nonnegative exponent"),
        }
    }

    pub fn modinv(value: &BigUint, modulus: &BigUint) -> Option<BigUint> {
        to_gmp(value).invert(&to_gmp(modulus)).ok().map(|v| from_gmp(&v))
    }
}

#[cfg(not(feature = "gmp"))]
mod imp {
    use num_bigint::BigUint;

    pub fn modpow(base: &BigUint, exp: &BigUint, modulus: &BigUint) -> BigUint {
        base.modpow(exp, modulus)
    }

    pub fn modinv(value: &BigUint, modulus: &BigUint) -> Option<BigUint> {
        value.modinv(modulus)
    }
}

/// `base^exp mod modulus`; `modulus` must be nonzero.
pub fn modpow(base: &BigUint, exp: &BigUint, modulus: &BigUint) -> BigUint {
    imp::modpow(base, exp, modulus)
}

/// `value⁻¹ mod modulus`, if it exists.
pub fn modinv(value: &BigUint, modulus: &BigUint) -> Option<BigUint> {
    imp::modinv(value, modulus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::RandBigInt;
    use num_traits::One;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn agrees_with_num_bigint() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for bits in [8u64, 64, 500, 2048] {
            let mut m = rng.gen_biguint(bits);
            m.set_bit(0, true);
            m.set_bit(bits - 1, true);
            let b = rng.gen_biguint_below(&m);
            let e = rng.gen_biguint(bits);
            assert_eq!(modpow(&b, &e, &m), b.modpow(&e, &m));
            assert_eq!(modinv(&b, &m), b.modinv(&m));
        }
        assert_eq!(modpow(&BigUint::from(5u32), &BigUint::from(0u32), &BigUint::from(7u32)), BigUint::one());
        assert_eq!(modinv(&BigUint::from(6u32), &BigUint::from(9u32)), None);
    }
}
