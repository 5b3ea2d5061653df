//! Synthetic teacher: adapter datasets on a known low-dimensional manifold.
//!
//! A latent code `u ~ N(0, I_p)` is mapped to a flat adapter vector
//! `x = G_lin·u + γ·G_nl(u) + σ_n·η`, where `G_lin` is a fixed Gaussian
//! `d×p` matrix and `G_nl(u) = W₂·φ(W₁·u)` a fixed random one-hidden-layer
//! map with `φ(h) = (h² − 1)/√2`. Each hidden unit has `h ~ N(0, 1)`, so
//! `φ(h)` is zero-mean, unit-variance and uncorrelated with every linear
//! function of `u`: the nonlinear branch cannot be absorbed by a linear
//! compressor. The paired condition is `c = C·u / ‖C·u‖`, a unit-norm
//! embedding that identifies `u` up to scale. Because the true generator is
//! known, generated adapters can be scored against the teacher directly.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::container::save_adapter;
use crate::error::{Error, Result};
use crate::lora::{reparameterize_adapter, unflatten, FlatLora, LayerShape, LayoutRegistry, LoraAdapter};
use crate::rng::{derive_seed, normal_tensor, seeded};
use crate::tensor::Tensor;

/// Hidden width of the teacher's nonlinear branch.
pub const TEACHER_HIDDEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherSpec {
    pub layers: Vec<LayerShape>,
    pub intrinsic_dim: usize,
    pub cond_dim: usize,
    pub gamma: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for TeacherSpec {
    /// Four 10×10 rank-2 layers (d = 160), p = 8, m_c = 16.
    fn default() -> Self {
        let layers = (0..4).map(|i| LayerShape { name: format!("layer{i}"), d_out: 10, d_in: 10, rank: 2 }).collect();
        TeacherSpec { layers, intrinsic_dim: 8, cond_dim: 16, gamma: 0.5, noise: 0.0, seed: 0 }
    }
}

impl TeacherSpec {
    pub fn validate(&self) -> Result<()> {
        if self.intrinsic_dim == 0 || self.cond_dim == 0 || self.layers.is_empty() {
            return Err(Error::Config("teacher needs p ≥ 1, m_c ≥ 1 and at least one layer".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(self.noise >= 0.0) {
            return Err(Error::Config(format!("γ must lie in [0, 1] and σ_n ≥ 0, got {} and {}", self.gamma, self.noise)));
        }
        for l in &self.layers {
            l.validate()?;
        }
        Ok(())
    }

    pub fn registry(&self) -> Result<LayoutRegistry> {
        LayoutRegistry::from_shapes(&self.layers)
    }
}

/// The fixed random maps of a teacher, drawn from its seed.
#[derive(Debug, Clone)]
pub struct Teacher {
    pub spec: TeacherSpec,
    g_lin: Tensor,
    w1: Tensor,
    w2: Tensor,
    c: Tensor,
}

impl Teacher {
    pub fn new(spec: TeacherSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.registry()?.total_len();
        let p = spec.intrinsic_dim;
        let mut rng = seeded(derive_seed(spec.seed, "teacher-maps"));
        // stored transposed so that row batches multiply on the right
        let g_lin = normal_tensor(&mut rng, &[p, d], 1.0);
        let mut w1 = normal_tensor(&mut rng, &[p, TEACHER_HIDDEN], 1.0);
        // unit-norm columns make every hidden pre-activation standard normal
        for j in 0..TEACHER_HIDDEN {
            let norm = (0..p).map(|i| w1.get(i, j).powi(2)).sum::<f64>().sqrt();
            for i in 0..p {
                w1.set(i, j, w1.get(i, j) / norm);
            }
        }
        let w2 = normal_tensor(&mut rng, &[TEACHER_HIDDEN, d], (p as f64 / TEACHER_HIDDEN as f64).sqrt());
        let c = normal_tensor(&mut rng, &[p, spec.cond_dim], 1.0);
        Ok(Teacher { spec, g_lin, w1, w2, c })
    }

    pub fn dim(&self) -> usize {
        self.g_lin.cols()
    }

    /// Noise-free flat vectors for a batch of latents (`n×p`).
    pub fn generate_clean(&self, u: &Tensor) -> Result<Tensor> {
        let mut x = u.matmul(&self.g_lin)?;
        if self.spec.gamma != 0.0 {
            let h = u.matmul(&self.w1)?.map(|v| (v * v - 1.0) * std::f64::consts::FRAC_1_SQRT_2);
            let nl = h.matmul(&self.w2)?;
            let gamma = self.spec.gamma;
            x = x.zip_map(&nl, |a, b| a + gamma * b)?;
        }
        Ok(x)
    }

    /// Unit-norm condition embeddings for a batch of latents.
    pub fn conditions(&self, u: &Tensor) -> Result<Tensor> {
        let mut c = u.matmul(&self.c)?;
        let m = c.cols();
        for row in c.data_mut().chunks_mut(m) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::DegenerateData("latent maps to a zero condition".into()));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub spec: TeacherSpec,
    /// `N×d` teacher vectors in registry order.
    pub flat: Tensor,
    /// `N×m_c`, unit rows.
    pub conditions: Tensor,
    /// `N×p` ground-truth latents.
    pub latents: Tensor,
    pub registry: Arc<LayoutRegistry>,
    /// Whether `flat` rows hold norm-balanced factors rather than the raw
    /// teacher output.
    pub balanced: bool,
}

pub fn teacher_generate(spec: &TeacherSpec, n: usize) -> Result<SynthDataset> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    let teacher = Teacher::new(spec.clone())?;
    let mut rng = seeded(derive_seed(spec.seed, "teacher-samples"));
    let latents = normal_tensor(&mut rng, &[n, spec.intrinsic_dim], 1.0);
    let mut flat = teacher.generate_clean(&latents)?;
    if spec.noise > 0.0 {
        let eta = normal_tensor(&mut rng, flat.shape(), spec.noise);
        flat.add_assign(&eta)?;
    }
    let conditions = teacher.conditions(&latents)?;
    let registry = Arc::new(spec.registry()?);
    Ok(SynthDataset { spec: spec.clone(), flat, conditions, latents, registry, balanced: false })
}

/// Result of a nearest-condition lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherMatch {
    pub index: usize,
    pub similarity: f64,
    pub flat: Vec<f64>,
    pub latent: Vec<f64>,
}

/// Row whose condition has the highest cosine similarity to `c`; ties go to
/// the lowest index.
pub fn teacher_lookup(dataset: &SynthDataset, c: &[f64]) -> Result<TeacherMatch> {
    let n = dataset.len();
    if n == 0 {
        return Err(Error::DegenerateData("lookup in an empty dataset".into()));
    }
    if c.len() != dataset.conditions.cols() {
        return Err(Error::Shape(format!("condition of width {} vs {}", c.len(), dataset.conditions.cols())));
    }
    let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let (mut best, mut best_sim) = (0, f64::NEG_INFINITY);
    for i in 0..n {
        let row = dataset.conditions.row(i);
        let rn = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        let sim = row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>() / (rn * norm);
        if sim > best_sim {
            best = i;
            best_sim = sim;
        }
    }
    Ok(TeacherMatch {
        index: best,
        similarity: best_sim,
        flat: dataset.flat.row(best).to_vec(),
        latent: dataset.latents.row(best).to_vec(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    kind: String,
    dtype: String,
    rows: usize,
    dim: usize,
    spec: TeacherSpec,
    registry: LayoutRegistry,
    #[serde(default)]
    balanced: bool,
    files: Vec<(String, String, usize)>,
}

fn write_blob(path: &Path, t: &Tensor) -> Result<()> {
    let bytes: Vec<u8> = t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_blob(path: &Path, rows: usize, cols: usize) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != rows * cols * 4 {
        return Err(Error::Format(format!("{} holds {} bytes, expected {}", path.display(), bytes.len(), rows * cols * 4)));
    }
    let data = bytes.chunks_exact(4).map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))).collect();
    Tensor::matrix(rows, cols, data)
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        self.flat.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.flat.cols()
    }

    /// Row `i` as an adapter, optionally norm-balanced.
    pub fn adapter(&self, i: usize, balance: bool) -> Result<LoraAdapter> {
        let mut flat = FlatLora::new(self.flat.row(i).to_vec(), self.registry.clone())?;
        flat.id = format!("teacher-{i:05}");
        flat.condition = Some(self.conditions.row(i).to_vec());
        let adapter = unflatten(&flat)?;
        if balance && !self.balanced {
            reparameterize_adapter(&adapter)
        } else {
            Ok(adapter)
        }
    }

    /// Saves the dataset as `manifest.json` plus little-endian binary32
    /// blobs `flat.bin`, `conditions.bin`, `latents.bin`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let blobs = [("flat", &self.flat), ("conditions", &self.conditions), ("latents", &self.latents)];
        let manifest = DatasetManifest {
            kind: "synth-dataset".into(),
            dtype: "f32".into(),
            rows: self.len(),
            dim: self.dim(),
            spec: self.spec.clone(),
            registry: (*self.registry).clone(),
            balanced: self.balanced,
            files: blobs.iter().map(|(n, t)| (format!("{n}.bin"), n.to_string(), t.cols())).collect(),
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        for (name, t) in blobs {
            write_blob(&dir.join(format!("{name}.bin")), t)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        if m.kind != "synth-dataset" || m.dtype != "f32" {
            return Err(Error::Format(format!("unexpected dataset kind {} / dtype {}", m.kind, m.dtype)));
        }
        m.registry.validate()?;
        if m.registry.total_len() != m.dim {
            return Err(Error::Layout(format!("registry covers {} entries, data has {}", m.registry.total_len(), m.dim)));
        }
        let width = |name: &str| {
            m.files
                .iter()
                .find(|(_, n, _)| n == name)
                .map(|(_, _, w)| *w)
                .ok_or_else(|| Error::Format(format!("manifest lists no {name} blob")))
        };
        let flat = read_blob(&dir.join("flat.bin"), m.rows, width("flat")?)?;
        let conditions = read_blob(&dir.join("conditions.bin"), m.rows, width("conditions")?)?;
        let latents = read_blob(&dir.join("latents.bin"), m.rows, width("latents")?)?;
        if flat.cols() != m.dim {
            return Err(Error::Format("flat blob width disagrees with manifest".into()));
        }
        Ok(SynthDataset { spec: m.spec, flat, conditions, latents, registry: Arc::new(m.registry), balanced: m.balanced })
    }

    /// Writes rows `indices` as balanced `.wsf` adapters into `dir`.
    pub fn export_adapters(&self, indices: &[usize], dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for &i in indices {
            let adapter = self.adapter(i, true)?;
            save_adapter(&adapter, &dir.join(format!("{}.wsf", adapter.id())))?;
        }
        Ok(())
    }

    /// Subset of rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<SynthDataset> {
        let pick = |t: &Tensor| {
            let mut data = Vec::with_capacity(indices.len() * t.cols());
            for &i in indices {
                data.extend_from_slice(t.row(i));
            }
            Tensor::matrix(indices.len(), t.cols(), data)
        };
        Ok(SynthDataset {
            spec: self.spec.clone(),
            flat: pick(&self.flat)?,
            conditions: pick(&self.conditions)?,
            latents: pick(&self.latents)?,
            registry: self.registry.clone(),
            balanced: self.balanced,
        })
    }

    /// Same rows with every adapter norm-balanced; the fused weights are
    /// unchanged.
    pub fn to_balanced(&self) -> Result<SynthDataset> {
        if self.balanced {
            return Ok(self.clone());
        }
        let rows = crate::par::map_indices(self.len(), |i| -> Result<Vec<f64>> {
            let adapter = self.adapter(i, true)?;
            Ok(crate::lora::flatten_with(&adapter, self.registry.clone())?.vector)
        });
        let mut data = Vec::with_capacity(self.flat.len());
        for r in rows {
            data.extend(r?);
        }
        Ok(SynthDataset { flat: Tensor::matrix(self.len(), self.dim(), data)?, balanced: true, ..self.clone() })
    }
}
