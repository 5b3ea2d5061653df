//! Low-rank adapter data model: fusion, norm-balanced SVD
//! reparameterization, and lossless flattening through a layout registry.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::svd;
use crate::rng::{normal_tensor, Rng64};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    pub d_out: usize,
    pub d_in: usize,
    pub rank: usize,
}

impl LayerShape {
    pub fn new(name: impl Into<String>, d_out: usize, d_in: usize, rank: usize) -> Result<Self> {
        let s = LayerShape { name: name.into(), d_out, d_in, rank };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_out == 0 || self.d_in == 0 || self.rank == 0 {
            return Err(Error::Config(format!("layer {} has a zero dimension", self.name)));
        }
        if self.rank > self.d_out.min(self.d_in) {
            return Err(Error::Rank { rank: self.rank, max: self.d_out.min(self.d_in) });
        }
        Ok(())
    }

    /// Flat length of the layer, `d_out·r + r·d_in`.
    pub fn flat_len(&self) -> usize {
        self.d_out * self.rank + self.rank * self.d_in
    }
}

/// One adapted layer: `ΔW ≈ A·B` with `A: d_out×r`, `B: r×d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    shape: LayerShape,
    a: Tensor,
    b: Tensor,
}

impl LoraLayer {
    pub fn new(shape: LayerShape, a: Tensor, b: Tensor) -> Result<Self> {
        shape.validate()?;
        if a.shape() != [shape.d_out, shape.rank] || b.shape() != [shape.rank, shape.d_in] {
            return Err(Error::Shape(format!(
                "layer {}: A{:?} B{:?} do not match {}x{} rank {}",
                shape.name,
                a.shape(),
                b.shape(),
                shape.d_out,
                shape.d_in,
                shape.rank
            )));
        }
        Ok(LoraLayer { shape, a, b })
    }

    pub fn shape(&self) -> &LayerShape {
        &self.shape
    }

    pub fn a(&self) -> &Tensor {
        &self.a
    }

    pub fn b(&self) -> &Tensor {
        &self.b
    }

    pub fn random(shape: LayerShape, rng: &mut Rng64) -> Result<Self> {
        let a = normal_tensor(rng, &[shape.d_out, shape.rank], 1.0);
        let b = normal_tensor(rng, &[shape.rank, shape.d_in], 1.0);
        LoraLayer::new(shape, a, b)
    }
}

/// Fused update `Ŵ = A·B`.
pub fn fuse(layer: &LoraLayer) -> Tensor {
    layer.a.matmul(&layer.b).expect("layer invariants guarantee matching dims")
}

/// Rank-`r` norm-balanced factors of `w_hat`: `Â = U_r·√S_r`,
/// `B̂ = √S_r·V_rᵀ`. Column `i` of `Â` and row `i` of `B̂` both have norm
/// `√s_i`.
pub fn svd_reparam(name: &str, w_hat: &Tensor, rank: usize) -> Result<LoraLayer> {
    if !w_hat.is_matrix() {
        return Err(Error::Shape("svd_reparam needs a matrix".into()));
    }
    let (m, n) = (w_hat.rows(), w_hat.cols());
    if rank == 0 || rank > m.min(n) {
        return Err(Error::Rank { rank, max: m.min(n) });
    }
    let d = svd(w_hat)?;
    let mut a = Tensor::zeros(&[m, rank]);
    let mut b = Tensor::zeros(&[rank, n]);
    for k in 0..rank {
        let root = d.s[k].sqrt();
        for i in 0..m {
            a.set(i, k, d.u.get(i, k) * root);
        }
        for j in 0..n {
            b.set(k, j, d.v.get(j, k) * root);
        }
    }
    LoraLayer::new(LayerShape::new(name, m, n, rank)?, a, b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    id: String,
    layers: Vec<LoraLayer>,
    condition: Option<Vec<f64>>,
}

impl LoraAdapter {
    /// Validates unique names and sorts layers into canonical (name) order.
    pub fn new(id: impl Into<String>, mut layers: Vec<LoraLayer>, condition: Option<Vec<f64>>) -> Result<Self> {
        layers.sort_by(|a, b| a.shape.name.cmp(&b.shape.name));
        if layers.windows(2).any(|w| w[0].shape.name == w[1].shape.name) {
            return Err(Error::Config("duplicate layer names".into()));
        }
        if condition.as_ref().is_some_and(|c| c.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite { op: "LoraAdapter::new" });
        }
        Ok(LoraAdapter { id: id.into(), layers, condition })
    }

    pub fn random(id: impl Into<String>, shapes: &[LayerShape], rng: &mut Rng64) -> Result<Self> {
        let layers = shapes.iter().map(|s| LoraLayer::random(s.clone(), rng)).collect::<Result<_>>()?;
        LoraAdapter::new(id, layers, None)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn layers(&self) -> &[LoraLayer] {
        &self.layers
    }

    pub fn condition(&self) -> Option<&[f64]> {
        self.condition.as_deref()
    }

    pub fn shapes(&self) -> Vec<LayerShape> {
        self.layers.iter().map(|l| l.shape.clone()).collect()
    }
}

/// Fuses and re-factors every layer at its own rank.
pub fn reparameterize_adapter(adapter: &LoraAdapter) -> Result<LoraAdapter> {
    let layers = adapter
        .layers
        .iter()
        .map(|l| svd_reparam(&l.shape.name, &fuse(l), l.shape.rank))
        .collect::<Result<_>>()?;
    LoraAdapter::new(adapter.id.clone(), layers, adapter.condition.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Factor {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub layer: String,
    pub factor: Factor,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub len: usize,
}

/// Maps flat-vector ranges back to (layer, factor, shape). Entries are
/// contiguous and cover `[0, total)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutRegistry {
    shapes: Vec<LayerShape>,
    entries: Vec<LayoutEntry>,
    total: usize,
}

impl LayoutRegistry {
    pub fn from_shapes(shapes: &[LayerShape]) -> Result<Self> {
        let mut shapes = shapes.to_vec();
        shapes.sort_by(|a, b| a.name.cmp(&b.name));
        if shapes.windows(2).any(|w| w[0].name == w[1].name) {
            return Err(Error::Config("duplicate layer names".into()));
        }
        let mut entries = Vec::with_capacity(shapes.len() * 2);
        let mut offset = 0;
        for s in &shapes {
            s.validate()?;
            for (factor, rows, cols) in [(Factor::A, s.d_out, s.rank), (Factor::B, s.rank, s.d_in)] {
                entries.push(LayoutEntry { layer: s.name.clone(), factor, rows, cols, offset, len: rows * cols });
                offset += rows * cols;
            }
        }
        Ok(LayoutRegistry { shapes, entries, total: offset })
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    /// Checks the covering invariant; used after deserialization.
    pub fn validate(&self) -> Result<()> {
        let rebuilt = LayoutRegistry::from_shapes(&self.shapes)?;
        if &rebuilt != self {
            return Err(Error::Layout("registry entries are not a contiguous cover of its shapes".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatLora {
    pub id: String,
    pub vector: Vec<f64>,
    pub condition: Option<Vec<f64>>,
    pub registry: Arc<LayoutRegistry>,
}

impl FlatLora {
    pub fn new(vector: Vec<f64>, registry: Arc<LayoutRegistry>) -> Result<Self> {
        if vector.len() != registry.total_len() {
            return Err(Error::Layout(format!(
                "vector has {} values, registry expects {}",
                vector.len(),
                registry.total_len()
            )));
        }
        Ok(FlatLora { id: String::new(), vector, condition: None, registry })
    }
}

/// Row-major `A` then `B`, layer by layer in canonical order.
pub fn flatten(adapter: &LoraAdapter) -> FlatLora {
    let registry = LayoutRegistry::from_shapes(&adapter.shapes()).expect("adapter shapes already validated");
    flatten_with(adapter, Arc::new(registry)).expect("registry built from the adapter")
}

/// Flattens against an existing registry, which must describe the adapter.
pub fn flatten_with(adapter: &LoraAdapter, registry: Arc<LayoutRegistry>) -> Result<FlatLora> {
    if adapter.shapes() != registry.shapes() {
        return Err(Error::Layout(format!("adapter {} does not match the registry", adapter.id)));
    }
    let mut vector = Vec::with_capacity(registry.total_len());
    for l in &adapter.layers {
        vector.extend_from_slice(l.a.data());
        vector.extend_from_slice(l.b.data());
    }
    Ok(FlatLora { id: adapter.id.clone(), vector, condition: adapter.condition.clone(), registry })
}

pub fn unflatten(flat: &FlatLora) -> Result<LoraAdapter> {
    let reg = &flat.registry;
    if flat.vector.len() != reg.total_len() {
        return Err(Error::Layout(format!(
            "vector has {} values, registry expects {}",
            flat.vector.len(),
            reg.total_len()
        )));
    }
    let mut layers = Vec::with_capacity(reg.shapes.len());
    for (shape, pair) in reg.shapes.iter().zip(reg.entries.chunks(2)) {
        let take = |e: &LayoutEntry| {
            Tensor::matrix(e.rows, e.cols, flat.vector[e.offset..e.offset + e.len].to_vec())
        };
        layers.push(LoraLayer::new(shape.clone(), take(&pair[0])?, take(&pair[1])?)?);
    }
    LoraAdapter::new(flat.id.clone(), layers, flat.condition.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn mat(r: usize, c: usize, d: &[f64]) -> Tensor {
        Tensor::matrix(r, c, d.to_vec()).unwrap()
    }

    fn rel_frob(a: &Tensor, b: &Tensor) -> f64 {
        a.zip_map(b, |x, y| x - y).unwrap().frobenius() / b.frobenius()
    }

    #[test]
    fn fuse_rank_one() {
        let l = LoraLayer::new(LayerShape::new("l", 2, 2, 1).unwrap(), mat(2, 1, &[1.0, 0.0]), mat(1, 2, &[0.0, 2.0]))
            .unwrap();
        assert_eq!(fuse(&l).data(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn fuse_identity() {
        let l = LoraLayer::new(LayerShape::new("l", 2, 2, 2).unwrap(), Tensor::eye(2), Tensor::eye(2)).unwrap();
        assert_eq!(fuse(&l), Tensor::eye(2));
    }

    #[test]
    fn fuse_matches_triple_loop() {
        let mut rng = seeded(1);
        let l = LoraLayer::random(LayerShape::new("l", 6, 4, 2).unwrap(), &mut rng).unwrap();
        let w = fuse(&l);
        for i in 0..6 {
            for j in 0..4 {
                let e: f64 = (0..2).map(|k| l.a.get(i, k) * l.b.get(k, j)).sum();
                assert!((w.get(i, j) - e).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn reparam_diagonal() {
        let l = svd_reparam("l", &mat(2, 2, &[4.0, 0.0, 0.0, 1.0]), 2).unwrap();
        assert_eq!(l.a.data(), &[2.0, 0.0, 0.0, 1.0]);
        assert_eq!(l.b.data(), &[2.0, 0.0, 0.0, 1.0]);
        assert_eq!(fuse(&l).data(), &[4.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn reparam_zero_matrix() {
        let l = svd_reparam("l", &Tensor::zeros(&[3, 2]), 1).unwrap();
        assert!(l.a.data().iter().chain(l.b.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn reparam_recovers_planted_rank_two() {
        let mut rng = seeded(8);
        let u = normal_tensor(&mut rng, &[5, 2], 1.0);
        let v = normal_tensor(&mut rng, &[2, 5], 1.0);
        let w = u.matmul(&v).unwrap();
        let l = svd_reparam("l", &w, 2).unwrap();
        assert!(rel_frob(&fuse(&l), &w) <= 1e-10);
    }

    #[test]
    fn reparam_one_by_one() {
        let l = LoraLayer::new(LayerShape::new("l", 1, 1, 1).unwrap(), mat(1, 1, &[3.0]), mat(1, 1, &[2.0])).unwrap();
        let r = svd_reparam("l", &fuse(&l), 1).unwrap();
        assert!((r.a.data()[0].abs() - 6f64.sqrt()).abs() < 1e-15);
        assert!((r.b.data()[0].abs() - 6f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn rank_error() {
        assert!(matches!(svd_reparam("l", &Tensor::zeros(&[3, 2]), 3), Err(Error::Rank { rank: 3, max: 2 })));
    }

    #[test]
    fn imbalanced_factors_get_balanced() {
        let mut rng = seeded(21);
        let shape = LayerShape::new("l", 10, 8, 3).unwrap();
        let l = LoraLayer::random(shape.clone(), &mut rng).unwrap();
        let skewed = LoraLayer::new(shape, l.a.map(|x| x * 1000.0), l.b.map(|x| x / 1000.0)).unwrap();
        let ad = LoraAdapter::new("x", vec![skewed.clone()], None).unwrap();
        let out = reparameterize_adapter(&ad).unwrap();
        let r = &out.layers()[0];
        assert!(rel_frob(&fuse(r), &fuse(&skewed)) <= 1e-8);
        for k in 0..3 {
            let ca = (0..10).map(|i| r.a.get(i, k).powi(2)).sum::<f64>().sqrt();
            let rb = (0..8).map(|j| r.b.get(k, j).powi(2)).sum::<f64>().sqrt();
            assert!((ca - rb).abs() <= 1e-9);
        }
    }

    #[test]
    fn already_balanced_is_stable() {
        let mut rng = seeded(2);
        let shapes = vec![LayerShape::new("a", 6, 5, 2).unwrap(), LayerShape::new("b", 4, 7, 3).unwrap()];
        let once = reparameterize_adapter(&LoraAdapter::random("x", &shapes, &mut rng).unwrap()).unwrap();
        let twice = reparameterize_adapter(&once).unwrap();
        for (a, b) in once.layers().iter().zip(twice.layers()) {
            let diff = fuse(a).zip_map(&fuse(b), |x, y| x - y).unwrap().max_abs();
            assert!(diff <= 1e-12 * fuse(a).max_abs().max(1.0));
        }
    }

    #[test]
    fn flatten_single_layer() {
        let l = LoraLayer::new(LayerShape::new("l", 2, 2, 1).unwrap(), mat(2, 1, &[1.0, 2.0]), mat(1, 2, &[3.0, 4.0]))
            .unwrap();
        let f = flatten(&LoraAdapter::new("x", vec![l], None).unwrap());
        assert_eq!(f.vector, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn flatten_orders_layers_by_name() {
        let mk = |name: &str, v: f64| {
            LoraLayer::new(LayerShape::new(name, 1, 1, 1).unwrap(), mat(1, 1, &[v]), mat(1, 1, &[v + 0.5])).unwrap()
        };
        let ad = LoraAdapter::new("x", vec![mk("zeta", 1.0), mk("alpha", 2.0)], None).unwrap();
        assert_eq!(flatten(&ad).vector, vec![2.0, 2.5, 1.0, 1.5]);
        let flat = flatten(&ad);
        let e = &flat.registry.entries()[2];
        assert_eq!((e.layer.as_str(), e.factor, e.offset), ("zeta", Factor::A, 2));
    }

    #[test]
    fn truncated_vector_is_a_layout_error() {
        let mut rng = seeded(3);
        let shapes = vec![LayerShape::new("a", 3, 3, 1).unwrap()];
        let mut f = flatten(&LoraAdapter::random("x", &shapes, &mut rng).unwrap());
        f.vector.pop();
        assert!(matches!(unflatten(&f), Err(Error::Layout(_))));
        assert!(FlatLora::new(f.vector.clone(), f.registry.clone()).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut rng = seeded(3);
        let s = LayerShape::new("a", 2, 2, 1).unwrap();
        let l = LoraLayer::random(s, &mut rng).unwrap();
        assert!(LoraAdapter::new("x", vec![l.clone(), l], None).is_err());
    }

    fn shapes_strategy() -> impl Strategy<Value = Vec<LayerShape>> {
        prop::collection::vec((1usize..8, 1usize..8, 1usize..4), 1..5).prop_map(|dims| {
            dims.into_iter()
                .enumerate()
                .map(|(i, (o, n, r))| LayerShape::new(format!("layer{i}"), o, n, r.min(o).min(n)).unwrap())
                .collect()
        })
    }

    proptest! {
        #[test]
        fn flatten_unflatten_bijection(shapes in shapes_strategy(), seed in any::<u64>()) {
            let mut rng = seeded(seed);
            let ad = LoraAdapter::random("p", &shapes, &mut rng).unwrap();
            let flat = flatten(&ad);
            let expect: usize = shapes.iter().map(LayerShape::flat_len).sum();
            prop_assert_eq!(flat.vector.len(), expect);
            prop_assert_eq!(&unflatten(&flat).unwrap(), &ad);
            let v = crate::rng::normal_vec(&mut rng, expect);
            let f2 = FlatLora::new(v.clone(), flat.registry.clone()).unwrap();
            let back = flatten_with(&unflatten(&f2).unwrap(), flat.registry.clone()).unwrap();
            prop_assert_eq!(back.vector, v);
        }

        #[test]
        fn norm_balance_and_ordering(shapes in shapes_strategy(), seed in any::<u64>()) {
            let mut rng = seeded(seed);
            let ad = LoraAdapter::random("p", &shapes, &mut rng).unwrap();
            let out = reparameterize_adapter(&ad).unwrap();
            for (orig, l) in ad.layers().iter().zip(out.layers()) {
                let s = &l.shape;
                let w = fuse(orig);
                prop_assert!(rel_frob(&fuse(l), &w) <= 1e-8);
                let mut prev = f64::INFINITY;
                for k in 0..s.rank {
                    let ca = (0..s.d_out).map(|i| l.a.get(i, k).powi(2)).sum::<f64>().sqrt();
                    let rb = (0..s.d_in).map(|j| l.b.get(k, j).powi(2)).sum::<f64>().sqrt();
                    prop_assert!((ca - rb).abs() <= 1e-9);
                    prop_assert!(ca <= prev + 1e-12);
                    prev = ca;
                }
            }
        }
    }
}
