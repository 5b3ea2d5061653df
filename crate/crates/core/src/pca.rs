//! Linear compression of flattened adapters by principal components.

use crate::container::Container;
use crate::error::{Error, Result};
use crate::linalg::sym_eigen;
use crate::tensor::Tensor;

/// Feature dimension above which the fit switches to the `N×N` Gram matrix.
pub const GRAM_THRESHOLD: usize = 2048;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `d×k`, orthonormal columns in eigenvalue-descending order.
    pub components: Tensor,
    pub eigenvalues: Vec<f64>,
    /// Trace of the sample covariance.
    pub total_variance: f64,
}

/// Per-row means and the centered copy of `data`.
fn center(data: &Tensor) -> (Vec<f64>, Tensor) {
    let (n, d) = (data.rows(), data.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(data.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut c = data.clone();
    for row in c.data_mut().chunks_mut(d) {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    (mean, c)
}

pub fn pca_fit(data: &Tensor, k: usize) -> Result<PcaModel> {
    pca_fit_with(data, k, GRAM_THRESHOLD)
}

/// [`pca_fit`] with an explicit switch-over dimension for the Gram path.
pub fn pca_fit_with(data: &Tensor, k: usize, gram_threshold: usize) -> Result<PcaModel> {
    if !data.is_matrix() {
        return Err(Error::Shape("pca_fit needs an N×d matrix".into()));
    }
    let (n, d) = (data.rows(), data.cols());
    if n < 2 {
        return Err(Error::Config("pca_fit needs at least two samples".into()));
    }
    if k == 0 || k > (n - 1).min(d) {
        return Err(Error::Config(format!("k = {k} outside 1..={}", (n - 1).min(d))));
    }
    let (mean, xc) = center(data);
    let denom = (n - 1) as f64;
    let total_variance = xc.data().iter().map(|v| v * v).sum::<f64>() / denom;
    if total_variance <= 0.0 {
        return Err(Error::DegenerateData("all samples are identical".into()));
    }
    let xt = xc.transpose()?;
    let (eigenvalues, components) = if d <= gram_threshold {
        let cov = xt.matmul(&xc)?.map(|v| v / denom);
        let e = sym_eigen(&cov)?;
        let mut comps = Tensor::zeros(&[d, k]);
        for j in 0..k {
            for i in 0..d {
                comps.set(i, j, e.vectors.get(i, j));
            }
        }
        (e.values[..k].iter().map(|v| v.max(0.0)).collect(), comps)
    } else {
        let gram = xc.matmul(&xt)?.map(|v| v / denom);
        let e = sym_eigen(&gram)?;
        let mut comps = Tensor::zeros(&[d, k]);
        for j in 0..k {
            let lambda = e.values[j];
            if lambda <= 1e-12 * e.values[0] {
                return Err(Error::DegenerateData(format!("k = {k} exceeds the numerical rank of the data")));
            }
            let scale = 1.0 / (denom * lambda).sqrt();
            let mut col: Vec<f64> =
                (0..d).map(|i| (0..n).map(|r| xt.get(i, r) * e.vectors.get(r, j)).sum::<f64>() * scale).collect();
            let pivot = col.iter().copied().fold(0.0f64, |b, x| if x.abs() > b.abs() { x } else { b });
            if pivot < 0.0 {
                col.iter_mut().for_each(|x| *x = -*x);
            }
            for (i, x) in col.into_iter().enumerate() {
                comps.set(i, j, x);
            }
        }
        (e.values[..k].to_vec(), comps)
    };
    Ok(PcaModel { mean, components, eigenvalues, total_variance })
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn k(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `z = componentsᵀ·(x − mean)`.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!("expected {} features, got {}", self.dim(), x.len())));
        }
        let k = self.k();
        let mut z = vec![0.0; k];
        for (i, (xi, mi)) in x.iter().zip(&self.mean).enumerate() {
            let c = xi - mi;
            for (j, zj) in z.iter_mut().enumerate() {
                *zj += self.components.get(i, j) * c;
            }
        }
        Ok(z)
    }

    /// `x̂ = mean + components·z`.
    pub fn reconstruct(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.k() {
            return Err(Error::Shape(format!("expected {} coordinates, got {}", self.k(), z.len())));
        }
        Ok((0..self.dim())
            .map(|i| self.mean[i] + (0..self.k()).map(|j| self.components.get(i, j) * z[j]).sum::<f64>())
            .collect())
    }

    pub fn project_batch(&self, data: &Tensor) -> Result<Tensor> {
        if data.cols() != self.dim() {
            return Err(Error::Shape(format!("expected {} features, got {}", self.dim(), data.cols())));
        }
        let (mean, xc) = (&self.mean, data);
        let mut centered = xc.clone();
        for row in centered.data_mut().chunks_mut(self.dim()) {
            row.iter_mut().zip(mean).for_each(|(v, m)| *v -= m);
        }
        centered.matmul(&self.components)
    }

    pub fn reconstruct_batch(&self, z: &Tensor) -> Result<Tensor> {
        let mut out = z.matmul(&self.components.transpose()?)?;
        for row in out.data_mut().chunks_mut(self.dim()) {
            row.iter_mut().zip(&self.mean).for_each(|(v, m)| *v += m);
        }
        Ok(out)
    }

    /// Mean squared reconstruction error per element.
    pub fn reconstruction_mse(&self, data: &Tensor) -> Result<f64> {
        let rec = self.reconstruct_batch(&self.project_batch(data)?)?;
        Ok(rec.zip_map(data, |a, b| (a - b) * (a - b))?.sum() / data.len() as f64)
    }

    /// `(k', Σ_{j≤k'} λ_j / total_variance)` for `k' = 1..=k`.
    pub fn explained_variance_curve(&self) -> Vec<(usize, f64)> {
        let mut acc = 0.0;
        self.eigenvalues
            .iter()
            .enumerate()
            .map(|(j, l)| {
                acc += l;
                (j + 1, (acc / self.total_variance).min(1.0))
            })
            .collect()
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new("pca").with_meta("total_variance", self.total_variance)?;
        c.push("mean", Tensor::vector(self.mean.clone())?);
        c.push("components", self.components.clone());
        c.push("eigenvalues", Tensor::vector(self.eigenvalues.clone())?);
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("pca")?;
        let model = PcaModel {
            mean: c.tensor("mean")?.data().to_vec(),
            components: c.tensor("components")?.clone(),
            eigenvalues: c.tensor("eigenvalues")?.data().to_vec(),
            total_variance: c.meta_as("total_variance")?,
        };
        if model.components.shape() != [model.dim(), model.k()] {
            return Err(Error::Format("pca components do not match mean/eigenvalues".into()));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, seeded};

    fn cross() -> Tensor {
        Tensor::from_rows(&[vec![3.0, 0.0], vec![-3.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]]).unwrap()
    }

    /// `n` points on a random `r`-dimensional affine subspace of ℝ^d.
    fn linear_manifold(n: usize, d: usize, r: usize, seed: u64) -> Tensor {
        let mut rng = seeded(seed);
        let basis = normal_tensor(&mut rng, &[r, d], 1.0);
        let coords = normal_tensor(&mut rng, &[n, r], 1.0);
        let offset = normal_tensor(&mut rng, &[d], 1.0);
        let mut x = coords.matmul(&basis).unwrap();
        for row in x.data_mut().chunks_mut(d) {
            row.iter_mut().zip(offset.data()).for_each(|(v, o)| *v += o);
        }
        x
    }

    #[test]
    fn hand_covariance() {
        // sample covariance diag(18/3, 2/3)
        let m = pca_fit(&cross(), 1).unwrap();
        assert!((m.eigenvalues[0] - 6.0).abs() < 1e-12);
        assert!((m.total_variance - (6.0 + 2.0 / 3.0)).abs() < 1e-12);
        assert!((m.explained_variance_curve()[0].1 - 0.9).abs() < 1e-12);
    }

    #[test]
    fn planar_data_is_fully_explained() {
        let mut rng = seeded(3);
        let mut x = normal_tensor(&mut rng, &[20, 3], 1.0);
        for i in 0..20 {
            x.set(i, 2, 0.0);
        }
        let m = pca_fit(&x, 2).unwrap();
        assert!((m.explained_variance_curve()[1].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_points_are_degenerate() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert!(matches!(pca_fit(&x, 1), Err(Error::DegenerateData(_))));
    }

    #[test]
    fn k_out_of_range() {
        assert!(matches!(pca_fit(&cross(), 0), Err(Error::Config(_))));
        assert!(matches!(pca_fit(&cross(), 3), Err(Error::Config(_))));
    }

    #[test]
    fn isotropic_data_splits_variance() {
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]]).unwrap();
        let curve = pca_fit(&x, 2).unwrap().explained_variance_curve();
        assert!((curve[0].1 - 0.5).abs() < 1e-12 && (curve[1].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn projection_basics() {
        let x = linear_manifold(40, 6, 3, 1);
        let m = pca_fit(&x, 3).unwrap();
        assert!(m.project(&m.mean).unwrap().iter().all(|v| v.abs() < 1e-12));
        let lambda = 2.5;
        let shifted: Vec<f64> = (0..6).map(|i| m.mean[i] + lambda * m.components.get(i, 0)).collect();
        let z = m.project(&shifted).unwrap();
        assert!((z[0] - lambda).abs() < 1e-12 && z[1].abs() < 1e-12 && z[2].abs() < 1e-12);
        assert_eq!(m.reconstruct(&[0.0; 3]).unwrap(), m.mean);
        assert!(m.project(&[0.0; 5]).is_err());
        assert!(m.reconstruct(&[0.0; 2]).is_err());
    }

    #[test]
    fn projection_contracts() {
        let mut rng = seeded(12);
        let x = normal_tensor(&mut rng, &[30, 8], 1.0);
        let m = pca_fit(&x, 3).unwrap();
        for _ in 0..20 {
            let p = normal_tensor(&mut rng, &[8], 2.0);
            let z = m.project(p.data()).unwrap();
            let nz = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nc = p.data().iter().zip(&m.mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(nz <= nc + 1e-12);
        }
    }

    #[test]
    fn exact_recovery_on_linear_manifold() {
        let x = linear_manifold(50, 10, 3, 7);
        let m = pca_fit(&x, 4).unwrap();
        for i in 0..50 {
            let rec = m.reconstruct(&m.project(x.row(i)).unwrap()).unwrap();
            let err = rec.iter().zip(x.row(i)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(err <= 1e-8 * norm);
        }
        assert!((m.explained_variance_curve()[2].1 - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn error_non_increasing_in_k() {
        let mut rng = seeded(5);
        let x = normal_tensor(&mut rng, &[25, 7], 1.0);
        let errs: Vec<f64> = (1..=7).map(|k| pca_fit(&x, k).unwrap().reconstruction_mse(&x).unwrap()).collect();
        assert!(errs.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{errs:?}");
    }

    #[test]
    fn invariants_hold() {
        let mut rng = seeded(31);
        let x = normal_tensor(&mut rng, &[40, 9], 1.0);
        let m = pca_fit(&x, 5).unwrap();
        let gram = m.components.transpose().unwrap().matmul(&m.components).unwrap();
        assert!(gram.zip_map(&Tensor::eye(5), |a, b| a - b).unwrap().max_abs() < 1e-9);
        assert!(m.eigenvalues.windows(2).all(|w| w[0] >= w[1]) && m.eigenvalues[4] >= 0.0);
        let (_, xc) = center(&x);
        let cov = xc.transpose().unwrap().matmul(&xc).unwrap().map(|v| v / 39.0);
        for j in 0..5 {
            let v = Tensor::matrix(9, 1, (0..9).map(|i| m.components.get(i, j)).collect()).unwrap();
            let r = cov.matmul(&v).unwrap();
            let res = (0..9).map(|i| (r.data()[i] - m.eigenvalues[j] * v.data()[i]).powi(2)).sum::<f64>().sqrt();
            assert!(res <= 1e-8 * m.eigenvalues[0].max(1.0));
        }
        let z = vec![0.3, -1.0, 0.2, 0.0, 2.0];
        let back = m.project(&m.reconstruct(&z).unwrap()).unwrap();
        assert!(back.iter().zip(&z).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn gram_path_agrees_with_covariance_path() {
        let mut rng = seeded(77);
        let x = normal_tensor(&mut rng, &[12, 30], 1.0);
        let a = pca_fit_with(&x, 4, usize::MAX).unwrap();
        let b = pca_fit_with(&x, 4, 0).unwrap();
        for (la, lb) in a.eigenvalues.iter().zip(&b.eigenvalues) {
            assert!((la - lb).abs() < 1e-10);
        }
        assert!(a.components.zip_map(&b.components, |p, q| p - q).unwrap().max_abs() < 1e-8);
    }

    #[test]
    fn container_roundtrip_shape() {
        let m = pca_fit(&linear_manifold(10, 4, 2, 2), 2).unwrap();
        let c = Container::from_bytes(&m.to_container().unwrap().to_bytes().unwrap()).unwrap();
        let back = PcaModel::from_container(&c).unwrap();
        assert_eq!(back.components.shape(), &[4, 2]);
        assert!((back.mean[0] - m.mean[0]).abs() < 1e-5 * m.mean[0].abs().max(1.0));
    }
}
