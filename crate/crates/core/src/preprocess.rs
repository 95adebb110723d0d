//! Image preprocessing chain and the synthetic phantom cohort generator.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_blob, write_blob, BlobDtype, Tensor};

/// Gaussian kernels are cut at this many standard deviations.
pub const GAUSSIAN_TRUNCATE: f64 = 3.0;

/// A `[D, H, W]` intensity volume with its voxel spacing in millimetres.
#[derive(Debug, Clone)]
pub struct Volume {
    pub data: Tensor,
    pub voxel_size: [f64; 3],
}

impl Volume {
    pub fn new(data: Tensor, voxel_size: [f64; 3]) -> Result<Volume> {
        if data.rank() != 3 {
            return Err(Error::Dimension(format!(
                "volume must be [D, H, W], got {:?}",
                data.shape()
            )));
        }
        if let Some(v) = data.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite voxel {v}")));
        }
        if voxel_size.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config(format!(
                "voxel size must be positive, got {voxel_size:?}"
            )));
        }
        Ok(Volume { data, voxel_size })
    }

    pub fn depth(&self) -> usize {
        self.data.shape()[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Control,
    Pd,
}

impl Label {
    /// Class index; PD is the positive class.
    pub fn index(self) -> usize {
        match self {
            Label::Control => 0,
            Label::Pd => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub label: Label,
    /// Volume blob, relative to the manifest's directory unless absolute.
    pub path: String,
    pub group_id: String,
}

fn unit_voxels() -> [f64; 3] {
    [1.0; 3]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub dataset_name: String,
    pub subjects: Vec<SubjectRecord>,
    #[serde(default)]
    pub center_slice: Option<usize>,
    #[serde(default = "unit_voxels")]
    pub voxel_size: [f64; 3],
    /// Directory the relative subject paths resolve against; set on load.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in &self.subjects {
            if !seen.insert(&s.subject_id) {
                return Err(Error::Input(format!(
                    "duplicate subject id {}",
                    s.subject_id
                )));
            }
        }
        for label in [Label::Control, Label::Pd] {
            if !self.subjects.iter().any(|s| s.label == label) {
                return Err(Error::Input(format!(
                    "dataset {} has no {label:?} subjects",
                    self.dataset_name
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<DatasetManifest> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn volume_path(&self, subject: &SubjectRecord) -> PathBuf {
        let p = Path::new(&subject.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn load_volume(&self, subject: &SubjectRecord) -> Result<Volume> {
        let data = read_blob(self.volume_path(subject))?;
        Volume::new(data, self.voxel_size)
    }

    pub fn label_of(&self, subject_id: &str) -> Option<Label> {
        self.subjects
            .iter()
            .find(|s| s.subject_id == subject_id)
            .map(|s| s.label)
    }
}

/// `count` contiguous axial slices starting at `center − count / 2`.
pub fn extract_slices(vol: &Volume, center: usize, count: usize) -> Result<Vec<Tensor>> {
    let d = vol.depth();
    let start = center.checked_sub(count / 2);
    let (h, w) = (vol.data.shape()[1], vol.data.shape()[2]);
    match start {
        Some(s) if count > 0 && s + count <= d => Ok((s..s + count)
            .map(|z| {
                let plane = vol.data.data()[z * h * w..(z + 1) * h * w].to_vec();
                Tensor::new(plane, &[h, w]).expect("slice shape")
            })
            .collect()),
        _ => Err(Error::Range(format!(
            "{count} slices around {center} do not fit in depth {d}"
        ))),
    }
}

/// Linear interpolation weights along one axis (align-corners false).
fn axis_weights(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Separable (bi/tri)linear resampling with the align-corners-false
/// convention; source coordinates below 0 clamp to the first sample.
pub fn resample(x: &Tensor, target: &[usize]) -> Result<Tensor> {
    if !(2..=3).contains(&x.rank()) || target.len() != x.rank() {
        return Err(Error::Dimension(format!(
            "resample needs a rank-2/3 input and matching target, got {:?} → {target:?}",
            x.shape()
        )));
    }
    if target.contains(&0) {
        return Err(Error::Config(format!("zero target extent in {target:?}")));
    }
    let mut shape = x.shape().to_vec();
    let mut data = x.data().to_vec();
    for axis in 0..shape.len() {
        if shape[axis] == target[axis] {
            continue;
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let (n_in, n_out) = (shape[axis], target[axis]);
        let weights = axis_weights(n_in, n_out);
        let mut out = vec![0.0; outer * n_out * inner];
        for o in 0..outer {
            for (j, &(i0, i1, t)) in weights.iter().enumerate() {
                let dst = (o * n_out + j) * inner;
                let a = (o * n_in + i0) * inner;
                let b = (o * n_in + i1) * inner;
                for k in 0..inner {
                    out[dst + k] = data[a + k] + t * (data[b + k] - data[a + k]);
                }
            }
        }
        data = out;
        shape[axis] = n_out;
    }
    Tensor::new(data, &shape)
}

/// Min-max scaling to `[0, 1]`; constant inputs become all zeros.
pub fn normalize_intensity(x: &Tensor) -> Result<Tensor> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in x.data() {
        if !v.is_finite() {
            return Err(Error::Input(format!("non-finite intensity {v}")));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    let data = if span > 0.0 {
        x.data().iter().map(|v| (v - lo) / span).collect()
    } else {
        vec![0.0; x.numel()]
    };
    Tensor::new(data, x.shape())
}

/// Index into `[0, n)` with half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (GAUSSIAN_TRUNCATE * sigma + 0.5) as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-0.5 * d * d / (sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian smoothing with per-axis sigma `sigma_mm / voxel_size`,
/// truncated at three sigma, reflecting at the borders.
pub fn gaussian_filter(x: &Tensor, sigma_mm: f64, voxel_size: &[f64]) -> Result<Tensor> {
    if voxel_size.len() != x.rank() {
        return Err(Error::Dimension(format!(
            "{} voxel sizes for a rank-{} input",
            voxel_size.len(),
            x.rank()
        )));
    }
    if voxel_size.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Config(format!(
            "voxel sizes must be positive, got {voxel_size:?}"
        )));
    }
    if !(sigma_mm >= 0.0) {
        return Err(Error::Config(format!("sigma must be ≥ 0, got {sigma_mm}")));
    }
    let shape = x.shape().to_vec();
    let mut data = x.data().to_vec();
    for axis in 0..shape.len() {
        let sigma = sigma_mm / voxel_size[axis];
        if sigma == 0.0 {
            continue;
        }
        let kernel = gaussian_kernel(sigma);
        let radius = (kernel.len() / 2) as isize;
        let n = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; data.len()];
        for o in 0..outer {
            for j in 0..n {
                let dst = (o * n + j) * inner;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let src = reflect(j as isize + ki as isize - radius, n);
                    let base = (o * n + src) * inner;
                    for k in 0..inner {
                        out[dst + k] += kv * data[base + k];
                    }
                }
            }
        }
        data = out;
    }
    Tensor::new(data, &shape)
}

/// 2D chain: slices → resample → per-slice normalization → Gaussian filter.
pub fn prepare_slices(
    vol: &Volume,
    center: usize,
    count: usize,
    size: usize,
    sigma_mm: f64,
) -> Result<Vec<Tensor>> {
    let (h, w) = (vol.data.shape()[1], vol.data.shape()[2]);
    let pixel = [
        vol.voxel_size[1] * h as f64 / size as f64,
        vol.voxel_size[2] * w as f64 / size as f64,
    ];
    extract_slices(vol, center, count)?
        .iter()
        .map(|s| {
            gaussian_filter(
                &normalize_intensity(&resample(s, &[size, size])?)?,
                sigma_mm,
                &pixel,
            )
        })
        .collect()
}

/// 3D chain: resample → per-volume normalization → Gaussian filter.
pub fn prepare_volume(vol: &Volume, size: usize, sigma_mm: f64) -> Result<Tensor> {
    let sh = vol.data.shape();
    let voxel: Vec<f64> = (0..3)
        .map(|a| vol.voxel_size[a] * sh[a] as f64 / size as f64)
        .collect();
    gaussian_filter(
        &normalize_intensity(&resample(&vol.data, &[size, size, size])?)?,
        sigma_mm,
        &voxel,
    )
}

/// Parameters of the phantom cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub effect_size: f64,
    pub noise_sd: f64,
    pub seed: u64,
    #[serde(default = "default_synth_size")]
    pub size: usize,
    #[serde(default = "default_dataset_name")]
    pub dataset_name: String,
}

fn default_synth_size() -> usize {
    64
}

fn default_dataset_name() -> String {
    "synthetic".into()
}

impl SynthSpec {
    pub fn new(n_subjects: usize, effect_size: f64, noise_sd: f64, seed: u64) -> SynthSpec {
        SynthSpec {
            n_subjects,
            effect_size,
            noise_sd,
            seed,
            size: default_synth_size(),
            dataset_name: default_dataset_name(),
        }
    }
}

/// Midbrain blob intensity above the surrounding tissue for controls; the
/// PD blob is dimmer by `0.5 · effect_size` of this and smaller in radius by
/// `0.3 · effect_size`.
const BLOB_CONTRAST: f64 = 0.4;
const BLOB_RADIUS: f64 = 0.12;
const TISSUE: f64 = 0.5;

fn smoothstep_inside(r: f64, width: f64) -> f64 {
    1.0 / (1.0 + ((r - 1.0) / width).exp())
}

/// One phantom volume: a soft-edged ellipsoidal "brain" with a central
/// "midbrain" blob, subject-level jitter, and white Gaussian noise.
pub fn phantom_volume(
    size: usize,
    label: Label,
    effect_size: f64,
    noise_sd: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    // draws happen in the same order for both classes
    let axes = [
        0.36 * (1.0 + rng.gen_range(-0.05..0.05)),
        0.42 * (1.0 + rng.gen_range(-0.05..0.05)),
        0.34 * (1.0 + rng.gen_range(-0.05..0.05)),
    ];
    let shift = [
        rng.gen_range(-0.01..0.01),
        rng.gen_range(-0.01..0.01),
        rng.gen_range(-0.01..0.01),
    ];
    let contrast_jitter = rng.gen_range(-0.05..0.05);
    let radius_jitter = rng.gen_range(-0.05..0.05);
    let pd = if label == Label::Pd { effect_size } else { 0.0 };
    let contrast = BLOB_CONTRAST * (1.0 - 0.5 * pd + contrast_jitter);
    let radius = BLOB_RADIUS * (1.0 - 0.3 * pd + radius_jitter);
    let noise =
        Normal::new(0.0, noise_sd.max(0.0)).map_err(|e| Error::Config(format!("noise_sd: {e}")))?;
    let n = size * size * size;
    let mut data = Vec::with_capacity(n);
    let coord = |i: usize| (i as f64 + 0.5) / size as f64 - 0.5;
    for z in 0..size {
        for y in 0..size {
            for x in 0..size {
                let p = [
                    coord(z) - shift[0],
                    coord(y) - shift[1],
                    coord(x) - shift[2],
                ];
                let re = (0..3).map(|a| (p[a] / axes[a]).powi(2)).sum::<f64>().sqrt();
                let rb = (p.iter().map(|v| v * v).sum::<f64>()).sqrt() / radius;
                let v =
                    TISSUE * smoothstep_inside(re, 0.04) + contrast * smoothstep_inside(rb, 0.15);
                data.push(v + noise.sample(rng));
            }
        }
    }
    Tensor::new(data, &[size, size, size])
}

/// Writes `n_subjects` phantom volumes (`sub-XXX.kvt`, f32) and `manifest.json`
/// under `out_dir`. Labels alternate control/PD; subject `i` draws from its own
/// stream of the seeded generator, so files do not depend on generation order.
pub fn synth_generate(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    if spec.n_subjects < 4 || !spec.n_subjects.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "need an even number of at least 4 subjects, got {}",
            spec.n_subjects
        )));
    }
    if spec.size < 8 {
        return Err(Error::Config(format!("volume size {} below 8", spec.size)));
    }
    if !spec.effect_size.is_finite() || !(spec.noise_sd >= 0.0) {
        return Err(Error::Config(
            "effect size and noise sd must be finite, noise ≥ 0".into(),
        ));
    }
    let out = out_dir.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let width = (spec.n_subjects - 1).to_string().len().max(3);
    let mut subjects = Vec::with_capacity(spec.n_subjects);
    for i in 0..spec.n_subjects {
        let label = if i % 2 == 0 {
            Label::Control
        } else {
            Label::Pd
        };
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64);
        let vol = phantom_volume(spec.size, label, spec.effect_size, spec.noise_sd, &mut rng)?;
        let id = format!("sub-{i:0width$}");
        let file = format!("{id}.kvt");
        write_blob(out.join(&file), &vol, BlobDtype::F32)?;
        subjects.push(SubjectRecord {
            subject_id: id.clone(),
            label,
            path: file,
            group_id: id,
        });
    }
    let manifest = DatasetManifest {
        dataset_name: spec.dataset_name.clone(),
        subjects,
        center_slice: None,
        voxel_size: [1.0; 3],
        root: out.to_path_buf(),
    };
    manifest.save(out.join("manifest.json"))?;
    Ok(manifest)
}
