// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense linear algebra, stable kernels, seeded randomness and a scoped
//! adjoint tape.

pub mod kernels;
mod rng;
mod tape;
mod tensor;

pub use rng::SeededRng;
pub use tape::{AdjointTape, Gradients, NodeId};
pub use tensor::Tensor2;

use crate::error::{Error, Result};

pub fn matmul(a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    a.matmul(b)
}

pub fn softmax_rows(x: &Tensor2) -> Tensor2 {
    x.softmax_rows()
}

/// `u·v / (|u||v|)`.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "cosine of lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = kernels::norm(u);
    let nv = kernels::norm(v);
    if nu == 0.0 || nv == 0.0 || !nu.is_finite() || !nv.is_finite() {
        return Err(Error::DegenerateVector(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    Ok(kernels::dot(u, v) / (nu * nv))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Tensor2, b: &Tensor2) -> Tensor2 {
        let mut out = Tensor2::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn identity_and_zero_products() {
        let mut rng = SeededRng::new(1);
        let m = rng.gaussian_matrix(3, 3, 1.0);
        assert_eq!(matmul(&Tensor2::identity(3), &m).unwrap(), m);
        assert_eq!(
            matmul(&Tensor2::zeros(3, 3), &m).unwrap(),
            Tensor2::zeros(3, 3)
        );
    }

    #[test]
    fn matmul_matches_triple_loop_exactly() {
        let mut rng = SeededRng::new(2);
        for _ in 0..10 {
            let a = rng.gaussian_matrix(4, 4, 1.0);
            let b = rng.gaussian_matrix(4, 4, 1.0);
            assert_eq!(matmul(&a, &b).unwrap(), naive(&a, &b));
        }
    }

    #[test]
    fn matmul_shape_error() {
        let a = Tensor2::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_closed_forms() {
        let x = Tensor2::from_rows(&[
            vec![0.0, 0.0],
            vec![1000.0, 1000.0],
            vec![0.0, 3f64.ln()],
        ])
        .unwrap();
        let p = softmax_rows(&x);
        assert_eq!(p.row(0), &[0.5, 0.5]);
        assert_eq!(p.row(1), &[0.5, 0.5]);
        assert!((p.get(2, 0) - 0.25).abs() < 1e-15);
        assert!((p.get(2, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut rng = SeededRng::new(3);
        let x = rng.gaussian_matrix(5, 7, 3.0);
        let mut y = x.clone();
        y.data_mut().iter_mut().for_each(|v| *v += 12.5);
        let (px, py) = (softmax_rows(&x), softmax_rows(&y));
        for i in 0..5 {
            let s: f64 = px.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            for j in 0..7 {
                assert!((px.get(i, j) - py.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cosine_cases() {
        let v = [0.3, -1.2, 2.0];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine_sim(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_sim(&v, &neg).unwrap() + 1.0).abs() < 1e-15);
        let c = cosine_sim(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(
            cosine_sim(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateVector(_))
        ));
    }

    #[test]
    fn layer_norm_moments() {
        let mut rng = SeededRng::new(4);
        for _ in 0..50 {
            let x = rng.gaussian_vec(64, 5.0);
            let mut n = vec![0.0; 64];
            kernels::normalize(&x, &mut n);
            let mean = n.iter().sum::<f64>() / 64.0;
            let var = n.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-8);
        }
        let mut n = vec![1.0; 4];
        kernels::normalize(&[2.0; 4], &mut n);
        assert_eq!(n, vec![0.0; 4]);
    }

    #[test]
    fn gelu_grad_matches_fd() {
        for i in -40..40 {
            let x = i as f64 * 0.1;
            let h = 1e-5;
            let fd = (kernels::gelu(x + h) - kernels::gelu(x - h)) / (2.0 * h);
            assert!((fd - kernels::gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(kernels::argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(kernels::argmax(&[0.0; 4]), 0);
    }
}
