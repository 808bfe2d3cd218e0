//! Exactly invertible stand-in for a learned visual codec.
//!
//! Encoding is space-to-depth by factor `f` followed by a fixed orthogonal
//! channel mix Q (seeded, QᵀQ = I); decoding applies Qᵀ and depth-to-space.
//! Orthogonality makes decode∘encode an identity up to float error, which
//! turns reconstruction checks elsewhere in the crate into hard assertions.

use crate::imaging::ImageBuf;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

use super::{ModelError, Result};

/// (H/f)×(W/f) spatial grid with C = 3f² channels, row-major [y][x][c].
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid<T: Scalar> {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> LatentGrid<T> {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        LatentGrid {
            h,
            w,
            c,
            data: vec![T::zero(); h * w * c],
        }
    }

    pub fn randn(h: usize, w: usize, c: usize, rng: &mut Rng) -> Self {
        LatentGrid {
            h,
            w,
            c,
            data: (0..h * w * c).map(|_| T::of_f64(rng.normal())).collect(),
        }
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.h == other.h && self.w == other.w && self.c == other.c
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
    }

    /// Token count after patchify with patch size `p`.
    pub fn patch_count(&self, p: usize) -> Result<usize> {
        if p == 0 || self.h % p != 0 || self.w % p != 0 {
            return Err(ModelError::IndivisibleDims(format!(
                "latent {}x{} not divisible by patch {}",
                self.h, self.w, p
            )));
        }
        Ok((self.h / p) * (self.w / p))
    }

    /// Flattens p×p×C patches into rows, patch-grid row-major.
    pub fn patchify(&self, p: usize) -> Result<Tensor<T>> {
        let n = self.patch_count(p)?;
        let (gw, dim) = (self.w / p, p * p * self.c);
        let mut out = Vec::with_capacity(n * dim);
        for gy in 0..self.h / p {
            for gx in 0..gw {
                for py in 0..p {
                    for px in 0..p {
                        let y = gy * p + py;
                        let x = gx * p + px;
                        let base = (y * self.w + x) * self.c;
                        out.extend_from_slice(&self.data[base..base + self.c]);
                    }
                }
            }
        }
        Ok(Tensor::from_vec(vec![n, dim], out).expect("patchify"))
    }

    /// Inverse of [`LatentGrid::patchify`].
    pub fn unpatchify(tokens: &[T], p: usize, h: usize, w: usize, c: usize) -> Result<Self> {
        let dim = p * p * c;
        if h % p != 0 || w % p != 0 || tokens.len() != (h / p) * (w / p) * dim {
            return Err(ModelError::IndivisibleDims(format!(
                "unpatchify {} values into {}x{}x{} with patch {}",
                tokens.len(),
                h,
                w,
                c,
                p
            )));
        }
        let mut grid = LatentGrid::zeros(h, w, c);
        let gw = w / p;
        let mut it = tokens.iter();
        for gy in 0..h / p {
            for gx in 0..gw {
                for py in 0..p {
                    for px in 0..p {
                        let y = gy * p + py;
                        let x = gx * p + px;
                        let base = (y * w + x) * c;
                        for ch in 0..c {
                            grid.data[base + ch] = *it.next().expect("sized");
                        }
                    }
                }
            }
        }
        Ok(grid)
    }
}

/// Space-to-depth plus seeded orthogonal channel mixing.
#[derive(Debug, Clone)]
pub struct Codec<T: Scalar> {
    f: usize,
    /// C×C orthogonal matrix, row-major.
    q: Tensor<T>,
}

impl<T: Scalar> Codec<T> {
    pub fn seeded(f: usize, seed: u64) -> Self {
        assert!(f >= 1, "latent factor must be >= 1");
        let c = 3 * f * f;
        let q = orthogonal(c, seed);
        let data = q.into_iter().map(T::of_f64).collect();
        Codec {
            f,
            q: Tensor::from_vec(vec![c, c], data).expect("q"),
        }
    }

    /// Identity channel mixing; with f = 1 the whole codec is an identity.
    pub fn identity(f: usize) -> Self {
        Codec {
            f,
            q: Tensor::eye(3 * f * f),
        }
    }

    pub fn factor(&self) -> usize {
        self.f
    }

    pub fn channels(&self) -> usize {
        3 * self.f * self.f
    }

    pub fn q(&self) -> &Tensor<T> {
        &self.q
    }

    pub(crate) fn q_mut(&mut self) -> &mut Tensor<T> {
        &mut self.q
    }

    /// Replaces Q, e.g. when loading a checkpoint. Must be C×C.
    pub fn set_q(&mut self, q: Tensor<T>) -> Result<()> {
        let c = self.channels();
        if q.shape() != [c, c] {
            return Err(ModelError::ShapeMismatch(format!(
                "codec.q wants [{c}, {c}], got {:?}",
                q.shape()
            )));
        }
        self.q = q;
        Ok(())
    }

    pub fn encode(&self, img: &ImageBuf) -> Result<LatentGrid<T>> {
        let (h, w, f) = (img.height(), img.width(), self.f);
        if h % f != 0 || w % f != 0 {
            return Err(ModelError::IndivisibleDims(format!(
                "image {h}x{w} not divisible by latent factor {f}"
            )));
        }
        let c = self.channels();
        let q = self.q.data();
        let mut grid = LatentGrid::zeros(h / f, w / f, c);
        let mut cell = vec![T::zero(); c];
        for gy in 0..h / f {
            for gx in 0..w / f {
                // gather the f×f×3 block in (dy, dx, channel) order
                let mut k = 0;
                for dy in 0..f {
                    for dx in 0..f {
                        let p = img.px(gy * f + dy, gx * f + dx);
                        for ch in 0..3 {
                            cell[k] = T::of_f64(f64::from(p[ch]));
                            k += 1;
                        }
                    }
                }
                let base = (gy * (w / f) + gx) * c;
                for row in 0..c {
                    let mut acc = T::zero();
                    for col in 0..c {
                        acc = acc + q[row * c + col] * cell[col];
                    }
                    grid.data[base + row] = acc;
                }
            }
        }
        Ok(grid)
    }

    /// Applies Qᵀ and depth-to-space, clamping into [0,1].
    pub fn decode(&self, lat: &LatentGrid<T>) -> Result<ImageBuf> {
        let c = self.channels();
        if lat.c != c {
            return Err(ModelError::ShapeMismatch(format!(
                "latent has {} channels, codec wants {}",
                lat.c, c
            )));
        }
        let f = self.f;
        let q = self.q.data();
        let mut img = ImageBuf::new(lat.h * f, lat.w * f);
        let mut cell = vec![T::zero(); c];
        for gy in 0..lat.h {
            for gx in 0..lat.w {
                let base = (gy * lat.w + gx) * c;
                for row in 0..c {
                    let mut acc = T::zero();
                    for col in 0..c {
                        // Qᵀ[row][col] = Q[col][row]
                        acc = acc + q[col * c + row] * lat.data[base + col];
                    }
                    cell[row] = acc;
                }
                let mut k = 0;
                for dy in 0..f {
                    for dx in 0..f {
                        let rgb = [
                            cell[k].as_f64() as f32,
                            cell[k + 1].as_f64() as f32,
                            cell[k + 2].as_f64() as f32,
                        ];
                        img.put(gy * f + dy, gx * f + dx, rgb);
                        k += 3;
                    }
                }
            }
        }
        Ok(img)
    }
}

/// Seeded random orthogonal matrix via modified Gram-Schmidt (two passes).
fn orthogonal(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = Rng::seed_from(seed);
    let mut m: Vec<f64> = (0..n * n).map(|_| rng.normal()).collect();
    for _pass in 0..2 {
        for i in 0..n {
            for j in 0..i {
                let dot: f64 = (0..n).map(|k| m[i * n + k] * m[j * n + k]).sum();
                for k in 0..n {
                    m[i * n + k] -= dot * m[j * n + k];
                }
            }
            let norm: f64 = (0..n).map(|k| m[i * n + k] * m[i * n + k]).sum::<f64>().sqrt();
            for k in 0..n {
                m[i * n + k] /= norm;
            }
        }
    }
    m
}
