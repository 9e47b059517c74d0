//! Approximately paired VIS/NIR face data: on-disk layout, subject-disjoint
//! protocol splits, image loading, and a deterministic synthetic generator
//! that stands in for private face databases.
//!
//! Layout: `root/{vis|nir}/{subject_id}/{pose_tag}_{index}.png`. A VIS image
//! and its NIR partner share the same relative path under the two domain
//! roots, so pairing is a pure path computation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nirgan_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VIS_DIR: &str = "vis";
pub const NIR_DIR: &str = "nir";
/// Provenance file written next to a generated dataset.
pub const DATASET_MANIFEST: &str = "dataset.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoseTag {
    NeutralFrontal,
    TiltUp,
    TiltDown,
    LeftRotation,
    RightRotation,
    Blank,
    Smile,
}

impl PoseTag {
    pub const ALL: [PoseTag; 7] = [
        PoseTag::NeutralFrontal,
        PoseTag::TiltUp,
        PoseTag::TiltDown,
        PoseTag::LeftRotation,
        PoseTag::RightRotation,
        PoseTag::Blank,
        PoseTag::Smile,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PoseTag::NeutralFrontal => "neutral-frontal",
            PoseTag::TiltUp => "tilt-up",
            PoseTag::TiltDown => "tilt-down",
            PoseTag::LeftRotation => "left-rotation",
            PoseTag::RightRotation => "right-rotation",
            PoseTag::Blank => "blank",
            PoseTag::Smile => "smile",
        }
    }
}

impl fmt::Display for PoseTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PoseTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PoseTag::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown pose tag {s:?}")))
    }
}

/// One VIS image and its approximately aligned NIR partner.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairedSample {
    pub subject_id: String,
    pub pose_tag: PoseTag,
    pub vis_path: PathBuf,
    pub nir_path: PathBuf,
}

impl PairedSample {
    /// Builds the sample for `{subject}/{pose}_{index}.png` under `root`.
    pub fn at(root: &Path, subject_id: &str, pose_tag: PoseTag, index: usize) -> Self {
        let file = format!("{pose_tag}_{index:03}.png");
        PairedSample {
            subject_id: subject_id.to_string(),
            pose_tag,
            vis_path: root.join(VIS_DIR).join(subject_id).join(&file),
            nir_path: root.join(NIR_DIR).join(subject_id).join(&file),
        }
    }

    fn rebase(&self, f: impl Fn(&Path) -> PathBuf) -> Self {
        PairedSample {
            vis_path: f(&self.vis_path),
            nir_path: f(&self.nir_path),
            ..self.clone()
        }
    }
}

/// Lists every pair under `root` by the directory convention, sorted by path.
pub fn scan_dataset(root: &Path) -> Result<Vec<PairedSample>> {
    let vis_root = root.join(VIS_DIR);
    let mut samples = Vec::new();
    for subject in sorted_entries(&vis_root)? {
        if !subject.is_dir() {
            continue;
        }
        let subject_id = file_name(&subject)?;
        for file in sorted_entries(&subject)? {
            if file.extension().and_then(|e| e.to_str()) != Some("png") {
                continue;
            }
            let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let pose = stem
                .rsplit_once('_')
                .map(|(p, _)| p)
                .ok_or_else(|| Error::Decode {
                    path: file.clone(),
                    detail: "file name is not {pose_tag}_{index}.png".into(),
                })?;
            let pose_tag = pose.parse().map_err(|_| Error::Decode {
                path: file.clone(),
                detail: format!("unknown pose tag {pose:?}"),
            })?;
            let nir_path = root.join(NIR_DIR).join(&subject_id).join(file.file_name().expect("file"));
            if !nir_path.is_file() {
                return Err(Error::io(
                    nir_path,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "NIR partner missing"),
                ));
            }
            samples.push(PairedSample {
                subject_id: subject_id.clone(),
                pose_tag,
                vis_path: file,
                nir_path,
            });
        }
    }
    if samples.is_empty() {
        return Err(Error::Protocol(format!("no VIS/NIR pairs under {}", root.display())));
    }
    Ok(samples)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn file_name(path: &Path) -> Result<String> {
    path.file_name()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| Error::Decode {
            path: path.to_path_buf(),
            detail: "non-UTF-8 name".into(),
        })
}

/// Subject-disjoint train/test partition with a fixed number of pairs per subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSplit {
    pub train_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
    pub pairs_per_subject: usize,
    pub train: Vec<PairedSample>,
    pub test: Vec<PairedSample>,
}

impl ProtocolSplit {
    /// Fails with a protocol violation when any subject is on both sides.
    pub fn check_disjoint(&self) -> Result<()> {
        let train: BTreeSet<&str> = self
            .train_subjects
            .iter()
            .map(String::as_str)
            .chain(self.train.iter().map(|s| s.subject_id.as_str()))
            .collect();
        let shared: Vec<&str> = self
            .test_subjects
            .iter()
            .map(String::as_str)
            .chain(self.test.iter().map(|s| s.subject_id.as_str()))
            .filter(|s| train.contains(s))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if shared.is_empty() {
            Ok(())
        } else {
            Err(Error::ProtocolViolation(format!(
                "subjects in both train and test: {}",
                shared.join(", ")
            )))
        }
    }

    /// Writes the split with sample paths relative to `root`.
    pub fn save(&self, path: &Path, root: &Path) -> Result<()> {
        let rel = |p: &Path| p.strip_prefix(root).unwrap_or(p).to_path_buf();
        let stored = ProtocolSplit {
            train: self.train.iter().map(|s| s.rebase(rel)).collect(),
            test: self.test.iter().map(|s| s.rebase(rel)).collect(),
            ..self.clone()
        };
        write_json(path, &stored)
    }

    /// Reads a split written by [`ProtocolSplit::save`], resolving paths against `root`.
    pub fn load(path: &Path, root: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let stored: ProtocolSplit = serde_json::from_str(&text).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let abs = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { root.join(p) };
        Ok(ProtocolSplit {
            train: stored.train.iter().map(|s| s.rebase(abs)).collect(),
            test: stored.test.iter().map(|s| s.rebase(abs)).collect(),
            ..stored
        })
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Checkpoint(format!("serialize {}: {e}", path.display())))?;
    text.push('\n');
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Picks disjoint train and test subjects and `pairs_per_subject` pairs for
/// each. Only subjects with enough pairs are eligible. Deterministic in `seed`.
pub fn make_split(
    samples: &[PairedSample],
    n_train_subjects: usize,
    n_test_subjects: usize,
    pairs_per_subject: usize,
    seed: u64,
) -> Result<ProtocolSplit> {
    if pairs_per_subject == 0 {
        return Err(Error::Protocol("pairs_per_subject must be at least 1".into()));
    }
    let mut by_subject: BTreeMap<&str, Vec<&PairedSample>> = BTreeMap::new();
    for s in samples {
        by_subject.entry(&s.subject_id).or_default().push(s);
    }
    let mut eligible: Vec<&str> = by_subject
        .iter()
        .filter(|(_, v)| v.len() >= pairs_per_subject)
        .map(|(k, _)| *k)
        .collect();
    let needed = n_train_subjects + n_test_subjects;
    if eligible.len() < needed {
        return Err(Error::Protocol(format!(
            "need {needed} subjects with at least {pairs_per_subject} pairs, found {} (of {} subjects)",
            eligible.len(),
            by_subject.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    eligible.shuffle(&mut rng);
    let mut train_subjects: Vec<String> = eligible[..n_train_subjects].iter().map(|s| s.to_string()).collect();
    let mut test_subjects: Vec<String> = eligible[n_train_subjects..needed].iter().map(|s| s.to_string()).collect();
    train_subjects.sort();
    test_subjects.sort();
    let mut pick = |subjects: &[String]| -> Vec<PairedSample> {
        let mut out = Vec::new();
        for subject in subjects {
            let mut pool = by_subject[subject.as_str()].clone();
            pool.sort();
            pool.shuffle(&mut rng);
            let mut chosen: Vec<PairedSample> = pool[..pairs_per_subject].iter().map(|s| (*s).clone()).collect();
            chosen.sort();
            out.extend(chosen);
        }
        out
    };
    let train = pick(&train_subjects);
    let test = pick(&test_subjects);
    let split = ProtocolSplit {
        train_subjects,
        test_subjects,
        pairs_per_subject,
        train,
        test,
    };
    split.check_disjoint()?;
    Ok(split)
}

/// Parameters of the synthetic face generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_subjects: usize,
    pub images_per_subject: usize,
    pub resolution: usize,
    /// Maximum NIR misalignment, in whole pixels along each axis.
    pub jitter_px: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_subjects: 24,
            images_per_subject: 14,
            resolution: 64,
            jitter_px: 3,
            noise_sigma: 0.02,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.images_per_subject == 0 || self.resolution == 0 {
            return Err(Error::Config("synthetic: counts and resolution must be at least 1".into()));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config("synthetic: noise_sigma must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn subject_id(index: usize) -> String {
        format!("s{index:04}")
    }
}

/// Deterministic VIS→NIR intensity proxy: `clip((0.6r + 0.3g + 0.1b)^0.8, 0, 1)`.
pub fn spectral_proxy_transform(r: f64, g: f64, b: f64) -> Result<f64> {
    for (name, v) in [("r", r), ("g", g), ("b", b)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Range(format!("channel {name} = {v} outside [0, 1]")));
        }
    }
    Ok((0.6 * r + 0.3 * g + 0.1 * b).powf(0.8).clamp(0.0, 1.0))
}

/// Radial falloff `1 − 0.3·(d/d_max)²` at pixel `(x, y)` of a square image.
pub fn vignette(x: usize, y: usize, resolution: usize) -> f64 {
    let c = resolution as f64 / 2.0;
    let (dx, dy) = (x as f64 + 0.5 - c, y as f64 + 0.5 - c);
    let d2 = dx * dx + dy * dy;
    let dmax2 = 2.0 * c * c;
    1.0 - 0.3 * d2 / dmax2
}

/// NIR intensities (row-major, in [0, 1]) for an 8-bit RGB image before any
/// noise or misalignment: proxy transform then vignette.
pub fn proxy_image(rgb: &[u8], resolution: usize) -> Result<Vec<f64>> {
    if rgb.len() != 3 * resolution * resolution {
        return Err(Error::Shape(format!(
            "expected {} RGB bytes for a {resolution}² image, got {}",
            3 * resolution * resolution,
            rgb.len()
        )));
    }
    let mut out = Vec::with_capacity(resolution * resolution);
    for (i, px) in rgb.chunks(3).enumerate() {
        let [r, g, b] = [px[0], px[1], px[2]].map(|v| f64::from(v) / 255.0);
        let n = spectral_proxy_transform(r, g, b)?;
        out.push(n * vignette(i % resolution, i / resolution, resolution));
    }
    Ok(out)
}

/// Per-subject face parameterization, in coordinates where the image spans [-1, 1].
#[derive(Clone, Debug)]
struct Identity {
    face: (f64, f64),
    skin: [f64; 3],
    hair: [f64; 3],
    hairline: f64,
    background: [f64; 3],
    eye_dx: f64,
    eye_y: f64,
    eye_r: f64,
    iris: [f64; 3],
    brow: f64,
    nose_len: f64,
    mouth_y: f64,
    mouth_w: f64,
    lips: [f64; 3],
}

impl Identity {
    fn sample(rng: &mut impl Rng) -> Self {
        let mut u = |lo: f64, hi: f64| rng.gen_range(lo..hi);
        let r = u(0.45, 0.95);
        let skin = [r, r * u(0.6, 0.85), r * u(0.4, 0.7)];
        Identity {
            face: (u(0.48, 0.64), u(0.62, 0.78)),
            skin,
            hair: [u(0.02, 0.6), u(0.02, 0.45), u(0.02, 0.35)],
            hairline: u(0.15, 0.6),
            background: [u(0.1, 0.95), u(0.1, 0.95), u(0.1, 0.95)],
            eye_dx: u(0.15, 0.3),
            eye_y: u(-0.2, -0.02),
            eye_r: u(0.05, 0.1),
            iris: [u(0.0, 0.5), u(0.0, 0.5), u(0.0, 0.6)],
            brow: u(0.015, 0.05),
            nose_len: u(0.08, 0.22),
            mouth_y: u(0.22, 0.38),
            mouth_w: u(0.1, 0.25),
            lips: [u(0.4, 0.9), u(0.1, 0.4), u(0.1, 0.4)],
        }
    }
}

/// Pose geometry plus small per-image variation.
#[derive(Clone, Copy, Debug)]
struct View {
    dx: f64,
    dy: f64,
    squash_x: f64,
    squash_y: f64,
    smile: f64,
    eye_open: f64,
    light: f64,
    light_slope: f64,
}

impl View {
    fn sample(pose: PoseTag, rng: &mut impl Rng) -> Self {
        let (dx, dy, squash_x, squash_y, smile, eye_open) = match pose {
            PoseTag::NeutralFrontal => (0.0, 0.0, 1.0, 1.0, 0.0, 1.0),
            PoseTag::TiltUp => (0.0, -0.08, 1.0, 0.93, 0.0, 1.0),
            PoseTag::TiltDown => (0.0, 0.08, 1.0, 0.93, 0.0, 1.0),
            PoseTag::LeftRotation => (-0.1, 0.0, 0.9, 1.0, 0.0, 1.0),
            PoseTag::RightRotation => (0.1, 0.0, 0.9, 1.0, 0.0, 1.0),
            PoseTag::Blank => (0.0, 0.0, 1.0, 1.0, 0.0, 0.6),
            PoseTag::Smile => (0.0, 0.0, 1.0, 1.0, 1.0, 0.85),
        };
        View {
            dx: dx + rng.gen_range(-0.03..0.03),
            dy: dy + rng.gen_range(-0.03..0.03),
            squash_x,
            squash_y,
            smile,
            eye_open,
            light: rng.gen_range(0.85..1.1),
            light_slope: rng.gen_range(-0.15..0.15),
        }
    }
}

/// Anti-aliased coverage of an ellipse centred at `c` with radii `r`.
fn ellipse(p: (f64, f64), c: (f64, f64), r: (f64, f64), aa: f64) -> f64 {
    let (u, v) = ((p.0 - c.0) / r.0, (p.1 - c.1) / r.1);
    let sd = ((u * u + v * v).sqrt() - 1.0) * r.0.min(r.1);
    (0.5 - sd / aa).clamp(0.0, 1.0)
}

fn blend(dst: &mut [f64; 3], src: [f64; 3], alpha: f64) {
    for k in 0..3 {
        dst[k] += (src[k] - dst[k]) * alpha;
    }
}

/// Renders one VIS face as 8-bit RGB, row-major.
fn render_face(id: &Identity, view: &View, resolution: usize) -> Vec<u8> {
    let aa = 2.0 / resolution as f64;
    let mut out = Vec::with_capacity(3 * resolution * resolution);
    let (fx, fy) = (id.face.0 * view.squash_x, id.face.1 * view.squash_y);
    let centre = (view.dx * 0.5, 0.05 + view.dy * 0.3);
    let feat = |x: f64, y: f64| (centre.0 + view.dx + x * view.squash_x, centre.1 + view.dy + y * view.squash_y);
    for row in 0..resolution {
        for col in 0..resolution {
            let p = (
                (col as f64 + 0.5) * aa - 1.0,
                (row as f64 + 0.5) * aa - 1.0,
            );
            let mut px = id.background;
            // Hair: a slightly larger ellipse whose lower part is hidden by the face.
            let hair = ellipse(p, (centre.0, centre.1 - 0.06), (fx * 1.08, fy * 1.02), aa);
            let above = ((centre.1 - fy * (1.0 - id.hairline)) - p.1) / aa;
            blend(&mut px, id.hair, hair * (0.5 + above).clamp(0.0, 1.0));
            let face = ellipse(p, centre, (fx, fy), aa);
            let face_vis = face * (1.0 - (0.5 + above).clamp(0.0, 1.0) * 0.95);
            blend(&mut px, id.skin, face_vis);
            for side in [-1.0, 1.0] {
                let eye = feat(side * id.eye_dx, id.eye_y);
                let brow_c = (eye.0, eye.1 - id.eye_r * 1.8);
                let brow = ellipse(p, brow_c, (id.eye_r * 1.3, id.brow), aa);
                blend(&mut px, id.hair, brow * face);
                let open = id.eye_r * 0.6 * view.eye_open;
                let white = ellipse(p, eye, (id.eye_r, open.max(1e-3)), aa);
                blend(&mut px, [0.95, 0.95, 0.92], white * face);
                let iris = ellipse(p, eye, (id.eye_r * 0.5, open.min(id.eye_r * 0.5).max(1e-3)), aa);
                blend(&mut px, id.iris, iris * face);
            }
            let nose_top = feat(0.0, id.eye_y + 0.05);
            let nose = ellipse(
                p,
                (nose_top.0, nose_top.1 + id.nose_len / 2.0),
                (0.03, id.nose_len / 2.0),
                aa,
            );
            let shade = [id.skin[0] * 0.75, id.skin[1] * 0.7, id.skin[2] * 0.7];
            blend(&mut px, shade, nose * face);
            let mouth_c = feat(0.0, id.mouth_y);
            let t = (p.0 - mouth_c.0) / id.mouth_w;
            let curve = mouth_c.1 + view.smile * 0.06 * (1.0 - t * t).max(0.0);
            let mouth = ellipse(p, (mouth_c.0, curve), (id.mouth_w * (1.0 + 0.2 * view.smile), 0.035), aa);
            blend(&mut px, id.lips, mouth * face);
            let light = view.light * (1.0 + view.light_slope * p.0);
            for v in px {
                out.push(((v * light).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

/// NIR partner bytes: proxy + vignette, additive noise, then an integer
/// translation by `(dx, dy)` with edge replication.
fn render_nir(vis: &[u8], spec: &SyntheticSpec, rng: &mut impl Rng) -> Result<Vec<u8>> {
    let res = spec.resolution;
    let mut base = proxy_image(vis, res)?;
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
        for v in &mut base {
            *v += noise.sample(rng);
        }
    }
    let j = spec.jitter_px as i64;
    let (dx, dy) = (rng.gen_range(-j..=j), rng.gen_range(-j..=j));
    let last = res as i64 - 1;
    let mut out = Vec::with_capacity(res * res);
    for y in 0..res as i64 {
        for x in 0..res as i64 {
            let (sx, sy) = ((x - dx).clamp(0, last), (y - dy).clamp(0, last));
            let v = base[(sy * res as i64 + sx) as usize];
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct DatasetManifest<'a> {
    spec: &'a SyntheticSpec,
    samples: Vec<PairedSample>,
}

/// Writes `n_subjects × images_per_subject` pairs plus `dataset.json` under
/// `out_dir` and returns the samples. Byte-identical for a fixed spec.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, out_dir: &Path) -> Result<Vec<PairedSample>> {
    spec.validate()?;
    let res = spec.resolution as u32;
    let mut samples = Vec::with_capacity(spec.n_subjects * spec.images_per_subject);
    for subject in 0..spec.n_subjects {
        let subject_id = SyntheticSpec::subject_id(subject);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(subject as u64 + 1);
        let identity = Identity::sample(&mut rng);
        for d in [VIS_DIR, NIR_DIR] {
            let dir = out_dir.join(d).join(&subject_id);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for index in 0..spec.images_per_subject {
            let pose = PoseTag::ALL[index % PoseTag::ALL.len()];
            let view = View::sample(pose, &mut rng);
            let vis = render_face(&identity, &view, spec.resolution);
            let nir = render_nir(&vis, spec, &mut rng)?;
            let sample = PairedSample::at(out_dir, &subject_id, pose, index);
            save_png(&sample.vis_path, image::ColorType::Rgb8, &vis, res)?;
            save_png(&sample.nir_path, image::ColorType::L8, &nir, res)?;
            samples.push(sample);
        }
    }
    let rel: Vec<_> = samples
        .iter()
        .map(|s| s.rebase(|p| p.strip_prefix(out_dir).unwrap_or(p).to_path_buf()))
        .collect();
    write_json(
        &out_dir.join(DATASET_MANIFEST),
        &DatasetManifest { spec, samples: rel },
    )?;
    Ok(samples)
}

fn save_png(path: &Path, color: image::ColorType, bytes: &[u8], side: u32) -> Result<()> {
    save_png_rect(path, color, bytes, side, side)
}

fn save_png_rect(path: &Path, color: image::ColorType, bytes: &[u8], w: u32, h: u32) -> Result<()> {
    image::save_buffer_with_format(path, bytes, w, h, color, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Decode {
            path: path.to_path_buf(),
            detail: other.to_string(),
        },
    })
}

/// Writes a `(1, 3, h, w)` image with values in [-1, 1] as an RGB PNG.
pub fn save_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (n, c, h, w) = image.dims4()?;
    if n != 1 || c != 3 {
        return Err(Error::Shape(format!("save_image expects (1, 3, h, w), got {:?}", image.shape())));
    }
    let plane = h * w;
    let d = image.data();
    let mut bytes = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for k in 0..3 {
            bytes.push(to_byte(d[k * plane + i]));
        }
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    save_png_rect(path, image::ColorType::Rgb8, &bytes, w as u32, h as u32)
}

fn to_byte(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

/// Decodes an image to `(1, 3, resolution, resolution)` in [-1, 1]; grayscale
/// files are replicated across the three channels.
pub fn load_image(path: &Path, resolution: usize) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0f32; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for k in 0..3 {
            data[k * plane + i] = f32::from(px.0[k]) / 127.5 - 1.0;
        }
    }
    let t = Tensor::new(vec![1, 3, h, w], data)?;
    let t = t.resize_bilinear(resolution, resolution)?;
    Ok(t.map(|v| v.clamp(-1.0, 1.0)))
}

fn load_pair(sample: &PairedSample, resolution: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let dims = |p: &Path| {
        image::image_dimensions(p).map_err(|e| Error::Decode {
            path: p.to_path_buf(),
            detail: e.to_string(),
        })
    };
    let (dv, dn) = (dims(&sample.vis_path)?, dims(&sample.nir_path)?);
    if dv != dn {
        return Err(Error::Decode {
            path: sample.nir_path.clone(),
            detail: format!("size {dn:?} differs from VIS partner {dv:?}"),
        });
    }
    Ok((
        load_image(&sample.vis_path, resolution)?,
        load_image(&sample.nir_path, resolution)?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Vis,
    Nir,
    Paired,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Batch {
    Single(Tensor<f32>),
    Paired { vis: Tensor<f32>, nir: Tensor<f32> },
}

/// Decoded, resized pairs held in memory; batches are handed out by value.
#[derive(Clone, Debug)]
pub struct PairedImages {
    vis: Vec<Tensor<f32>>,
    nir: Vec<Tensor<f32>>,
    subjects: Vec<String>,
}

impl PairedImages {
    pub fn load(samples: &[PairedSample], resolution: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Protocol("no samples to load".into()));
        }
        let mut vis = Vec::with_capacity(samples.len());
        let mut nir = Vec::with_capacity(samples.len());
        for s in samples {
            let (v, n) = load_pair(s, resolution)?;
            vis.push(v);
            nir.push(n);
        }
        Ok(PairedImages {
            vis,
            nir,
            subjects: samples.iter().map(|s| s.subject_id.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.vis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vis.is_empty()
    }

    pub fn subjects(&self) -> &[String] {
        &self.subjects
    }

    /// Index-aligned `(vis, nir)` batch for the given sample indices.
    pub fn paired(&self, idx: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        Ok((self.domain(Domain::Vis, idx)?, self.domain(Domain::Nir, idx)?))
    }

    /// One domain's images for the given indices (`Paired` is rejected).
    pub fn domain(&self, domain: Domain, idx: &[usize]) -> Result<Tensor<f32>> {
        let src = match domain {
            Domain::Vis => &self.vis,
            Domain::Nir => &self.nir,
            Domain::Paired => return Err(Error::Protocol("use PairedImages::paired for paired batches".into())),
        };
        let items: Vec<_> = idx
            .iter()
            .map(|&i| {
                src.get(i)
                    .cloned()
                    .ok_or_else(|| Error::Protocol(format!("sample index {i} out of range")))
            })
            .collect::<Result<_>>()?;
        Ok(Tensor::concat_batch(&items)?)
    }
}

/// Seeded permutation of `0..n`.
pub fn shuffled_indices(n: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// First `batch_size` samples of a seeded shuffle, decoded at `resolution`.
pub fn load_batch(
    samples: &[PairedSample],
    domain: Domain,
    batch_size: usize,
    resolution: usize,
    seed: u64,
) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::Protocol("cannot draw a batch from an empty split".into()));
    }
    let order = shuffled_indices(samples.len(), seed, 0);
    let chosen: Vec<PairedSample> = order
        .iter()
        .take(batch_size.max(1))
        .map(|&i| samples[i].clone())
        .collect();
    let n = chosen.len();
    let paths: Vec<&Path> = match domain {
        Domain::Vis => chosen.iter().map(|s| s.vis_path.as_path()).collect(),
        Domain::Nir => chosen.iter().map(|s| s.nir_path.as_path()).collect(),
        Domain::Paired => {
            let images = PairedImages::load(&chosen, resolution)?;
            let idx: Vec<usize> = (0..n).collect();
            let (vis, nir) = images.paired(&idx)?;
            return Ok(Batch::Paired { vis, nir });
        }
    };
    let items: Vec<_> = paths
        .into_iter()
        .map(|p| load_image(p, resolution))
        .collect::<Result<_>>()?;
    Ok(Batch::Single(Tensor::concat_batch(&items)?))
}
