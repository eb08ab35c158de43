//! Named parameter storage and the two primitive layers (convolution and
//! channel layer-norm) everything else is assembled from.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{McmsError, Result};
use crate::tensor::ops::Padding;
use crate::tensor::{GradTape, Real, Tensor4, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    values: Vec<Tensor4<T>>,
}

/// Parameters of one [`ParamSet`] recorded as tape leaves.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wrap vars already on a tape, in [`ParamSet`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor4<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor4<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor4<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor4<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor4<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor4<T>] {
        &mut self.values
    }

    /// Total scalar count.
    pub fn element_count(&self) -> usize {
        self.values.iter().map(Tensor4::len).sum()
    }

    pub fn bind(&self, tape: &mut GradTape<T>) -> Result<Bound> {
        let vars = self
            .values
            .iter()
            .map(|v| tape.leaf(v.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { vars })
    }

    /// Like [`ParamSet::bind`] but nothing on the tape requires gradients.
    pub fn bind_frozen(&self, tape: &mut GradTape<T>) -> Result<Bound> {
        let vars = self
            .values
            .iter()
            .map(|v| tape.constant(v.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { vars })
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor4::cast).collect(),
        }
    }

    /// SHA-256 over names, shapes and f32 little-endian values, in order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.iter() {
            h.update(name.as_bytes());
            for d in v.shape() {
                h.update((d as u32).to_le_bytes());
            }
            for &x in v.data() {
                h.update((x.to_f64_lossy() as f32).to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Replace values from another set with identical names and shapes.
    pub fn assign(&mut self, other: &ParamSet<T>) -> Result<()> {
        if other.names != self.names {
            return Err(McmsError::InvalidArgument("parameter layouts differ".into()));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.shape() != src.shape() {
                return Err(McmsError::InvalidArgument("parameter shapes differ".into()));
            }
            *dst = src.clone();
        }
        Ok(())
    }
}

/// Fan-in scaled uniform `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, drawn in f64.
pub fn uniform_fan_in<T: Real>(shape: [usize; 4], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor4<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor4::from_fn(shape, |_, _, _, _| T::of(rng.random_range(-bound..bound)))
}

/// Convolution with bias, reflect `same` padding.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub groups: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        params: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
    ) -> Self {
        let shape = [cout, cin / groups, kernel, kernel];
        let fan_in = cin / groups * kernel * kernel;
        let weight = params.add(format!("{name}.weight"), uniform_fan_in(shape, fan_in, rng));
        let bias = params.add(format!("{name}.bias"), Tensor4::zeros([1, cout, 1, 1]));
        Conv {
            weight,
            bias,
            stride,
            groups,
        }
    }

    /// All-zero weights and bias; used for residual heads.
    pub fn zeroed<T: Real>(params: &mut ParamSet<T>, name: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        let weight = params.add(format!("{name}.weight"), Tensor4::zeros([cout, cin, kernel, kernel]));
        let bias = params.add(format!("{name}.bias"), Tensor4::zeros([1, cout, 1, 1]));
        Conv {
            weight,
            bias,
            stride: 1,
            groups: 1,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut GradTape<T>, bound: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(
            x,
            bound.var(self.weight),
            Some(bound.var(self.bias)),
            self.stride,
            Padding::SameReflect,
            self.groups,
        )
    }
}

/// Per-pixel normalization over channels with a learned affine.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(params: &mut ParamSet<T>, name: &str, channels: usize) -> Self {
        LayerNorm {
            gamma: params.add(format!("{name}.gamma"), Tensor4::full([1, channels, 1, 1], T::one())),
            beta: params.add(format!("{name}.beta"), Tensor4::zeros([1, channels, 1, 1])),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut GradTape<T>, bound: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, bound.var(self.gamma), bound.var(self.beta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn init_is_deterministic_and_bounded() {
        let make = |seed| {
            let mut ps = ParamSet::<f32>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Conv::new(&mut ps, &mut rng, "c", 4, 6, 3, 1, 1);
            ps
        };
        assert_eq!(make(1), make(1));
        assert_ne!(make(1).checksum(), make(2).checksum());
        let ps = make(3);
        let bound = 1.0 / (36f32).sqrt();
        assert!(ps.values()[0].data().iter().all(|v| v.abs() <= bound));
        assert_eq!(ps.values()[1].max_abs(), 0.0);
    }

    #[test]
    fn find_by_name() {
        let mut ps = ParamSet::<f64>::new();
        let ln = LayerNorm::new(&mut ps, "norm", 8);
        assert_eq!(ps.find("norm.beta"), Some(ln.beta));
        assert_eq!(ps.name(ln.gamma), "norm.gamma");
        assert_eq!(ps.element_count(), 16);
    }
}
