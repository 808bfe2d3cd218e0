//! Linear layers with optional low-rank adaptation.
//!
//! Adapted weight: W' = W + α·B·Aᵀ with B ∈ R^{d_in×r}, A ∈ R^{d_out×r}.
//! The forward path never materializes W': it runs the frozen base product
//! plus α·((x·B)·Aᵀ), so the base weight stays untouched while only A and B
//! receive gradients.

use crate::rng::Rng;
use crate::tensor::{Graph, Scalar, Tensor};

use super::{ModelError, Result};

#[derive(Debug, Clone)]
pub struct LoraPair<T: Scalar> {
    /// d_out × r
    pub a: Tensor<T>,
    /// d_in × r
    pub b: Tensor<T>,
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    pub name: String,
    /// d_in × d_out, frozen under LoRA training.
    pub w: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub lora: Option<LoraPair<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn init(name: &str, d_in: usize, d_out: usize, std: f64, rng: &mut Rng) -> Self {
        Linear {
            name: name.to_string(),
            w: Tensor::randn(vec![d_in, d_out], std, rng),
            bias: Some(Tensor::zeros(vec![d_out])),
            lora: None,
        }
    }

    pub fn init_zero(name: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            name: name.to_string(),
            w: Tensor::zeros(vec![d_in, d_out]),
            bias: Some(Tensor::zeros(vec![d_out])),
            lora: None,
        }
    }

    /// Attaches a rank-r adapter. A starts at zero so the adapted layer is
    /// initially bit-identical to the base; B carries the random directions
    /// that the first gradient step activates. B is scaled up so that the
    /// few thousand small steps of a desk-scale run move the adapted output
    /// far enough to matter.
    pub fn with_lora(mut self, rank: usize, alpha: f64, rng: &mut Rng) -> Self {
        if rank > 0 {
            let d_in = self.w.shape()[0];
            let d_out = self.w.shape()[1];
            self.lora = Some(LoraPair {
                a: Tensor::zeros(vec![d_out, rank]).with_grad(),
                b: Tensor::randn(vec![d_in, rank], 64.0 / (d_in as f64).sqrt(), rng)
                    .with_grad(),
                alpha,
            });
        }
        self
    }

    pub fn d_in(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.w.shape()[1]
    }

    /// x·W (+bias) (+ α·((x·B)·Aᵀ) when adapted).
    pub fn forward(&self, g: &Graph<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut out = g.matmul(x, &self.w)?;
        if let Some(b) = &self.bias {
            out = g.add_bias(&out, b)?;
        }
        if let Some(lora) = &self.lora {
            out = lora_apply(g, &out, x, &lora.a, &lora.b, T::of_f64(lora.alpha))?;
        }
        Ok(out)
    }

    /// Materialized W + α·B·Aᵀ, for checking the adapter path algebraically.
    pub fn merged_weight(&self, g: &Graph<T>) -> Result<Tensor<T>> {
        match &self.lora {
            None => Ok(self.w.clone()),
            Some(lora) => {
                let delta = g.matmul(&lora.b, &g.transpose(&lora.a)?)?;
                Ok(g.add(&self.w, &g.scale(&delta, T::of_f64(lora.alpha))?)?)
            }
        }
    }
}

/// Adds the low-rank path to a base linear output:
/// `base_out + α·((x·B)·Aᵀ)`, which equals x·(W + α·BAᵀ).
pub fn lora_apply<T: Scalar>(
    g: &Graph<T>,
    base_out: &Tensor<T>,
    x: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    alpha: T,
) -> Result<Tensor<T>> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[1] {
        return Err(ModelError::RankMismatch(format!(
            "lora A {ash:?} vs B {bsh:?}"
        )));
    }
    if x.shape().len() != 2 || x.shape()[1] != bsh[0] || base_out.shape()[1] != ash[0] {
        return Err(ModelError::RankMismatch(format!(
            "lora x {:?}, base {:?}, A {ash:?}, B {bsh:?}",
            x.shape(),
            base_out.shape()
        )));
    }
    if alpha == T::zero() {
        // bit-level identity with the base path
        return Ok(base_out.clone());
    }
    let down = g.matmul(x, b)?;
    let up = g.matmul(&down, &g.transpose(a)?)?;
    Ok(g.add(base_out, &g.scale(&up, alpha)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn alpha_zero_is_bit_identical_to_base() {
        let g = Graph::no_grad();
        let x = t(&[2, 2], &[0.3, -0.7, 1.5, 0.2]);
        let base = g.matmul(&x, &Tensor::eye(2)).unwrap();
        let a = t(&[2, 1], &[2.0, 0.0]);
        let b = t(&[2, 1], &[1.0, 0.0]);
        let out = lora_apply(&g, &base, &x, &a, &b, 0.0).unwrap();
        assert_eq!(out.data(), base.data());
    }

    #[test]
    fn hand_expanded_rank_one_adapter() {
        // W = I2, α = 0.5, B = [[1],[0]], A = [[2],[0]] -> W' = [[2,0],[0,1]]
        let g = Graph::no_grad();
        let lin = Linear {
            name: "t".into(),
            w: Tensor::eye(2),
            bias: None,
            lora: Some(LoraPair {
                a: t(&[2, 1], &[2.0, 0.0]),
                b: t(&[2, 1], &[1.0, 0.0]),
                alpha: 0.5,
            }),
        };
        let merged = lin.merged_weight(&g).unwrap();
        assert_eq!(merged.data(), &[2.0, 0.0, 0.0, 1.0]);
        // forward through the adapter path agrees with x·W'
        let x = t(&[1, 2], &[3.0, -1.0]);
        let via_adapter = lin.forward(&g, &x).unwrap();
        let via_merged = g.matmul(&x, &merged).unwrap();
        for (p, q) in via_adapter.data().iter().zip(via_merged.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn merged_vs_adapter_path_on_random_layers() {
        let mut rng = Rng::seed_from(31);
        for _ in 0..20 {
            let (d_in, d_out, r) = (
                1 + rng.gen_range(6),
                1 + rng.gen_range(6),
                1 + rng.gen_range(4),
            );
            let mut lin: Linear<f64> =
                Linear::init("t", d_in, d_out, 0.5, &mut rng).with_lora(r, 0.5, &mut rng);
            // activate the adapter: zero A would make the test vacuous
            if let Some(l) = &mut lin.lora {
                l.a = Tensor::randn(vec![d_out, r], 0.5, &mut rng);
            }
            let g = Graph::no_grad();
            let x = Tensor::randn(vec![3, d_in], 1.0, &mut rng);
            let via_adapter = lin.forward(&g, &x).unwrap();
            let merged = lin.merged_weight(&g).unwrap();
            let mut via_merged = g.matmul(&x, &merged).unwrap();
            if let Some(b) = &lin.bias {
                via_merged = g.add_bias(&via_merged, b).unwrap();
            }
            for (p, q) in via_adapter.data().iter().zip(via_merged.data()) {
                assert!((p - q).abs() < 1e-5, "{p} vs {q}");
            }
        }
    }

    #[test]
    fn rank_mismatch_is_rejected() {
        let g = Graph::no_grad();
        let x = t(&[1, 2], &[1.0, 2.0]);
        let base = t(&[1, 2], &[0.0, 0.0]);
        let a = t(&[2, 2], &[0.0; 4]);
        let b = t(&[2, 1], &[0.0; 2]);
        assert!(matches!(
            lora_apply(&g, &base, &x, &a, &b, 0.5),
            Err(ModelError::RankMismatch(_))
        ));
    }
}
