//! Named parameter structures.
//!
//! Model pieces are generic over their leaf type so the same layout serves
//! as stored weights (`Tensor`), graph handles (`Var`) and shapes
//! (`Vec<usize>`), with parameter names produced in one place.

use vlm_tensor::{Scalar, Tensor};

use crate::Result;

macro_rules! param_struct {
    ($(#[$meta:meta])* $name:ident { $($field:ident),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T> {
            $(pub $field: T,)*
        }

        impl<T> $name<T> {
            pub fn try_map<'a, U, E>(
                &'a self,
                prefix: &str,
                f: &mut impl FnMut(&str, &'a T) -> std::result::Result<U, E>,
            ) -> std::result::Result<$name<U>, E> {
                Ok($name {
                    $($field: f(&format!("{prefix}{}", stringify!($field)), &self.$field)?,)*
                })
            }

            pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
                $(f(&format!("{prefix}{}", stringify!($field)), &mut self.$field);)*
            }

            pub fn entries<'a>(&'a self, prefix: &str) -> Vec<(String, &'a T)> {
                let mut out = Vec::new();
                let _ = self.try_map(prefix, &mut |n, t| {
                    out.push((n.to_string(), t));
                    Ok::<_, std::convert::Infallible>(())
                });
                out
            }
        }
    };
}

pub(crate) use param_struct;

/// Draws `Normal(0, std)` values for a freshly allocated tensor.
pub fn normal_tensor<S: Scalar>(
    rng: &mut rand_chacha::ChaCha8Rng,
    shape: &[usize],
    std: f64,
) -> Result<Tensor<S>> {
    use rand_distr::{Distribution, Normal};
    let dist = Normal::new(0.0, std).map_err(|e| crate::VlmError::Invalid(e.to_string()))?;
    let n = shape.iter().product();
    let data = (0..n).map(|_| S::lit(dist.sample(rng))).collect();
    Ok(Tensor::new(shape.to_vec(), data)?)
}
