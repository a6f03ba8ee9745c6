//! Deterministic kernel feature maps for linear attention.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{add_bias, flops, matmul_bt, Matrix, Real};

/// Elementwise kernel function `f` with `K(x, y) = f(x)ᵀ f(y)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    #[default]
    Relu,
    Softplus,
    Exp,
    Elu,
    /// `f(z) = z⁴`
    Quartic,
}

impl KernelKind {
    pub const ALL: [KernelKind; 5] = [
        KernelKind::Relu,
        KernelKind::Softplus,
        KernelKind::Exp,
        KernelKind::Elu,
        KernelKind::Quartic,
    ];

    /// Whether `f` is nonnegative everywhere, which keeps attention
    /// normalizers away from sign changes.
    pub fn is_nonnegative(self) -> bool {
        !matches!(self, KernelKind::Elu)
    }

    #[inline]
    pub fn apply<T: Real>(self, z: T) -> T {
        match self {
            KernelKind::Relu => z.max(T::zero()),
            KernelKind::Softplus => z.max(T::zero()) + (-z.abs()).exp().ln_1p(),
            KernelKind::Exp => z.exp(),
            KernelKind::Elu => {
                if z > T::zero() {
                    z
                } else {
                    z.exp_m1()
                }
            }
            KernelKind::Quartic => {
                let z2 = z * z;
                z2 * z2
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Relu => "relu",
            KernelKind::Softplus => "softplus",
            KernelKind::Exp => "exp",
            KernelKind::Elu => "elu",
            KernelKind::Quartic => "quartic",
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KernelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownKind {
                what: "kernel",
                name: s.to_string(),
            })
    }
}

/// Trainable affine map applied before `f`: `φ(x) = f(W x + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureAffine<T> {
    /// `r′ × head_dim`
    pub w: Matrix<T>,
    /// length `r′`
    pub b: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelSpec<T> {
    pub kind: KernelKind,
    pub affine: Option<FeatureAffine<T>>,
}

impl<T: Real> KernelSpec<T> {
    pub fn plain(kind: KernelKind) -> Self {
        Self { kind, affine: None }
    }

    pub fn with_affine(kind: KernelKind, w: Matrix<T>, b: Vec<T>) -> Result<Self> {
        let spec = Self {
            kind,
            affine: Some(FeatureAffine { w, b }),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(a) = &self.affine {
            if a.w.rows() == 0 || a.w.rows() != a.b.len() {
                return Err(Error::shape("kernel affine", a.w.shape(), a.b.len()));
            }
        }
        Ok(())
    }

    /// Feature dimension `r` produced for inputs of width `head_dim`.
    pub fn feature_dim(&self, head_dim: usize) -> usize {
        self.affine.as_ref().map_or(head_dim, |a| a.w.rows())
    }

    /// Non-fatal diagnostics about this kernel under normalized attention.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.kind.is_nonnegative() {
            out.push(format!(
                "kernel `{}` can emit negative features; attention normalizers may vanish",
                self.kind
            ));
        }
        out
    }

    pub fn cast<U: Real>(&self) -> KernelSpec<U> {
        KernelSpec {
            kind: self.kind,
            affine: self.affine.as_ref().map(|a| FeatureAffine {
                w: a.w.cast(),
                b: a.b.iter().map(|&v| U::of(v.as_f64())).collect(),
            }),
        }
    }
}

/// Applies the feature map rowwise: `f(x)` or `f(x Wᵀ + b)`.
pub fn feature_map<T: Real>(x: &Matrix<T>, spec: &KernelSpec<T>) -> Result<Matrix<T>> {
    let pre = match &spec.affine {
        None => x.clone(),
        Some(a) => {
            if a.w.cols() != x.cols() {
                return Err(Error::shape("feature_map", x.shape(), a.w.shape()));
            }
            let mut z = matmul_bt(x, &a.w)?;
            add_bias(&mut z, &a.b)?;
            z
        }
    };
    let kind = spec.kind;
    flops::add(flops::KERNEL_FN * (pre.rows() * pre.cols()) as u64);
    Ok(pre.map(|z| kind.apply(z)))
}
