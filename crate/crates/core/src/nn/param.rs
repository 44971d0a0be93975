use std::collections::BTreeMap;
use std::fmt;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest as _, Sha256};

use crate::error::{Error, Result};

/// Whether a tensor is learned or is running state (batch-norm statistics).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    pub kind: ParamKind,
    /// Frozen parameters neither accumulate gradients nor get optimizer updates.
    pub trainable: bool,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param {
            value,
            grad,
            kind: ParamKind::Weight,
            trainable: true,
        }
    }

    pub fn buffer(value: ArrayD<f64>) -> Self {
        Param {
            grad: ArrayD::zeros(IxDyn(&[0])),
            value,
            kind: ParamKind::Buffer,
            trainable: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Param::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Param::new(ArrayD::from_elem(IxDyn(shape), v))
    }

    /// He-normal initialization with the given fan-in.
    pub fn kaiming<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        Param::normal(shape, std, rng)
    }

    pub fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
        Param::new(ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape"))
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        Param::new(ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape"))
    }

    pub fn is_weight(&self) -> bool {
        self.kind == ParamKind::Weight
    }

    /// True when backward passes should accumulate into `grad`.
    #[inline]
    pub fn wants_grad(&self) -> bool {
        self.trainable && self.kind == ParamKind::Weight
    }
}

/// 64-bit content digest of a parameter collection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ContentDigest(pub u64);

impl fmt::Display for ContentDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

#[doc(hidden)]
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A collection of named parameters.
///
/// Implementors list their tensors in a fixed order; names are dotted paths.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| {
            if p.wants_grad() {
                p.grad.fill(0.0);
            }
        });
    }

    fn set_trainable(&mut self, trainable: bool) {
        self.visit_mut("", &mut |_, p| {
            if p.is_weight() {
                p.trainable = trainable;
            }
        });
    }

    fn num_weights(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.is_weight() {
                n += p.value.len();
            }
        });
        n
    }

    /// Digest over learned weights only.
    fn weight_digest(&self) -> ContentDigest {
        digest_filtered(self, |p| p.is_weight())
    }

    /// Digest over weights and running buffers: everything that affects an
    /// evaluation-mode forward pass.
    fn state_digest(&self) -> ContentDigest {
        digest_filtered(self, |_| true)
    }

    fn state_dict(&self, prefix: &str, out: &mut BTreeMap<String, ArrayD<f64>>) {
        self.visit(prefix, &mut |name, p| {
            out.insert(name.to_string(), p.value.clone());
        });
    }

    fn load_state_dict(&mut self, prefix: &str, map: &BTreeMap<String, ArrayD<f64>>) -> Result<()> {
        let mut err = None;
        self.visit_mut(prefix, &mut |name, p| {
            if err.is_some() {
                return;
            }
            match map.get(name) {
                None => err = Some(Error::Checkpoint(format!("missing tensor `{name}`"))),
                Some(v) if v.shape() != p.value.shape() => {
                    err = Some(Error::Checkpoint(format!(
                        "tensor `{name}` has shape {:?}, expected {:?}",
                        v.shape(),
                        p.value.shape()
                    )))
                }
                Some(v) => p.value.assign(v),
            }
        });
        err.map_or(Ok(()), Err)
    }

    fn copy_from(&mut self, other: &dyn Module) -> Result<()> {
        let mut map = BTreeMap::new();
        other.state_dict("", &mut map);
        self.load_state_dict("", &map)
    }
}

fn digest_filtered<M: Module + ?Sized>(m: &M, keep: impl Fn(&Param) -> bool) -> ContentDigest {
    let mut h = Sha256::new();
    m.visit("", &mut |name, p| {
        if !keep(p) {
            return;
        }
        h.update((name.len() as u32).to_le_bytes());
        h.update(name.as_bytes());
        h.update((p.value.ndim() as u32).to_le_bytes());
        for &d in p.value.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in p.value.iter() {
            h.update(v.to_bits().to_le_bytes());
        }
    });
    let out = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&out[..8]);
    ContentDigest(u64::from_be_bytes(b))
}

/// Digest of several modules taken together, in order.
pub fn combined_digest(parts: &[&dyn Module]) -> ContentDigest {
    let mut h = Sha256::new();
    for m in parts {
        h.update(m.state_digest().0.to_le_bytes());
    }
    let out = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&out[..8]);
    ContentDigest(u64::from_be_bytes(b))
}

/// State digest of a module registered as frozen, re-checked on demand.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrozenDigest {
    name: String,
    digest: ContentDigest,
}

impl FrozenDigest {
    pub fn register(name: impl Into<String>, module: &dyn Module) -> Self {
        FrozenDigest {
            name: name.into(),
            digest: module.state_digest(),
        }
    }

    pub fn digest(&self) -> ContentDigest {
        self.digest
    }

    pub fn verify(&self, module: &dyn Module) -> crate::Result<()> {
        let now = module.state_digest();
        if now != self.digest {
            return Err(crate::Error::FrozenViolation(format!(
                "{} digest {} became {}",
                self.name, self.digest, now
            )));
        }
        Ok(())
    }
}

/// Visits several named sub-modules under one prefix.
#[macro_export]
macro_rules! impl_module {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::nn::Module for $ty {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &$crate::nn::Param)) {
                $( $crate::nn::Module::visit(&self.$field, &$crate::nn::join(prefix, stringify!($field)), f); )*
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut $crate::nn::Param)) {
                $( $crate::nn::Module::visit_mut(&mut self.$field, &$crate::nn::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}

impl Module for Param {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(prefix, self)
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(prefix, self)
    }
}

impl<M: Module> Module for Vec<M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<M: Module> Module for Option<M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        if let Some(m) = self {
            m.visit(prefix, f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        if let Some(m) = self {
            m.visit_mut(prefix, f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Pair {
        a: Param,
        b: Param,
    }
    crate::impl_module!(Pair { a, b });

    #[test]
    fn digest_changes_iff_value_changes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = Pair {
            a: Param::normal(&[3, 2], 1.0, &mut rng),
            b: Param::buffer(ArrayD::zeros(IxDyn(&[2]))),
        };
        let d0 = m.state_digest();
        assert_eq!(d0, m.state_digest());
        let w0 = m.weight_digest();
        m.b.value[[0]] = 1.0;
        assert_ne!(d0, m.state_digest());
        assert_eq!(w0, m.weight_digest());
        m.a.value[[1, 1]] += 1e-12;
        assert_ne!(w0, m.weight_digest());
    }

    #[test]
    fn state_dict_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Pair {
            a: Param::normal(&[4], 1.0, &mut rng),
            b: Param::normal(&[2, 2], 1.0, &mut rng),
        };
        let mut n = Pair {
            a: Param::zeros(&[4]),
            b: Param::zeros(&[2, 2]),
        };
        n.copy_from(&m).unwrap();
        assert_eq!(m.state_digest(), n.state_digest());
        let mut bad = Pair {
            a: Param::zeros(&[5]),
            b: Param::zeros(&[2, 2]),
        };
        assert!(bad.copy_from(&m).is_err());
    }
}
