//! Grouped feature fusion.
//!
//! Two feature maps are summed, mixed by a shared 3x3 conv `M`, split into four
//! channel groups and pushed through a cascade of 1x1, 3x3, 5x5 and 7x7 convs
//! where each stage also receives the next group:
//!
//! ```text
//! G1 = conv1(C1)   G2 = conv3(G1 + C2)   G3 = conv5(G2 + C3)   G4 = conv7(G3 + C4)
//! out = [G1, G2, G3, G4] + M
//! ```

use rand_chacha::ChaCha8Rng;

use crate::error::{McmsError, Result};
use crate::layers::{Bound, Conv, ParamSet};
use crate::tensor::{GradTape, Real, Tensor4, Var};

pub const GROUP_KERNELS: [usize; 4] = [1, 3, 5, 7];

#[derive(Clone, Debug)]
pub struct GffParams {
    pub channels: usize,
    pub shared_conv3: Conv,
    pub group_convs: [Conv; 4],
}

impl GffParams {
    pub fn new<T: Real>(params: &mut ParamSet<T>, rng: &mut ChaCha8Rng, name: &str, channels: usize) -> Result<Self> {
        if channels == 0 || channels % 4 != 0 {
            return Err(McmsError::InvalidArgument(format!(
                "grouped fusion needs channels divisible by 4, got {channels}"
            )));
        }
        let shared_conv3 = Conv::new(params, rng, &format!("{name}.shared"), channels, channels, 3, 1, 1);
        let q = channels / 4;
        let group_convs = GROUP_KERNELS
            .map(|k| Conv::new(params, rng, &format!("{name}.group{k}"), q, q, k, 1, 1));
        Ok(GffParams {
            channels,
            shared_conv3,
            group_convs,
        })
    }

    /// Overwrite every conv with a Dirac (identity) kernel and zero bias.
    pub fn set_dirac<T: Real>(&self, params: &mut ParamSet<T>) {
        for conv in std::iter::once(&self.shared_conv3).chain(&self.group_convs) {
            let w = params.get_mut(conv.weight);
            let [o, i, kh, kw] = w.shape();
            *w = Tensor4::from_fn([o, i, kh, kw], |a, b, y, x| {
                if a == b && y == kh / 2 && x == kw / 2 {
                    T::one()
                } else {
                    T::zero()
                }
            });
            let b = params.get_mut(conv.bias);
            *b = Tensor4::zeros(b.shape());
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut GradTape<T>, bound: &Bound, i1: Var, i2: Var) -> Result<Var> {
        let (s1, s2) = (tape.shape(i1), tape.shape(i2));
        if s1 != s2 {
            return Err(McmsError::shape("gff", format!("{s1:?} vs {s2:?}")));
        }
        if s1[1] != self.channels {
            return Err(McmsError::shape(
                "gff",
                format!("{} channels, expected {}", s1[1], self.channels),
            ));
        }
        let sum = tape.add(i1, i2)?;
        let mixed = self.shared_conv3.forward(tape, bound, sum)?;
        let groups = tape.chunk(mixed, 4)?;
        let mut outs = Vec::with_capacity(4);
        let mut prev: Option<Var> = None;
        for (conv, &group) in self.group_convs.iter().zip(&groups) {
            let input = match prev {
                Some(p) => tape.add(p, group)?,
                None => group,
            };
            let g = conv.forward(tape, bound, input)?;
            outs.push(g);
            prev = Some(g);
        }
        let cat = tape.concat_channels(&outs)?;
        tape.add(cat, mixed)
    }

    /// Value-level forward.
    pub fn apply<T: Real>(&self, params: &ParamSet<T>, i1: &Tensor4<T>, i2: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut tape = GradTape::new();
        let bound = params.bind_frozen(&mut tape)?;
        let a = tape.constant(i1.clone())?;
        let b = tape.constant(i2.clone())?;
        let out = self.forward(&mut tape, &bound, a, b)?;
        Ok(tape.value(out).clone())
    }
}
