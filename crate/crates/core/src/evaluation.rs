//! Cross-spectral verification: translate VIS probes to fake NIR, embed them
//! and the real NIR gallery with the frozen extractor, score every
//! probe/gallery pair by cosine similarity, and report Rank-1 and TAR@FAR.

use std::collections::BTreeSet;
use std::path::Path;

use nirgan_tensor::{ParameterSet, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{ffe_forward_embedding, Embedding, FfeConfig};
use crate::data::{Domain, PairedImages, ProtocolSplit};
use crate::error::{Error, Result};
use crate::generator::{generator_forward, GeneratorConfig};
use crate::training::{TrainState, EVAL_FFE_PREFIX};

/// Images pushed through a network at once during evaluation.
const CHUNK: usize = 16;

/// Probe × gallery cosine similarities, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    scores: Vec<f64>,
    probe_ids: Vec<String>,
    gallery_ids: Vec<String>,
}

impl ScoreMatrix {
    pub fn new(rows: Vec<Vec<f64>>, probe_ids: Vec<String>, gallery_ids: Vec<String>) -> Result<Self> {
        if rows.len() != probe_ids.len() {
            return Err(Error::Shape(format!("{} score rows for {} probes", rows.len(), probe_ids.len())));
        }
        let mut scores = Vec::with_capacity(rows.len() * gallery_ids.len());
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != gallery_ids.len() {
                return Err(Error::Shape(format!(
                    "row {i} has {} scores for {} gallery entries",
                    row.len(),
                    gallery_ids.len()
                )));
            }
            scores.extend(row);
        }
        if let Some(bad) = scores.iter().find(|s| !(-1.0..=1.0).contains(*s)) {
            return Err(Error::Range(format!("score {bad} outside [-1, 1]")));
        }
        Ok(ScoreMatrix {
            scores,
            probe_ids,
            gallery_ids,
        })
    }

    /// Scores every probe embedding against every gallery embedding.
    pub fn from_embeddings(
        probes: &[Embedding],
        probe_ids: Vec<String>,
        gallery: &[Embedding],
        gallery_ids: Vec<String>,
    ) -> Result<Self> {
        if probes.len() != probe_ids.len() || gallery.len() != gallery_ids.len() {
            return Err(Error::Shape("embedding and identifier counts differ".into()));
        }
        let rows = probes
            .iter()
            .map(|p| gallery.iter().map(|g| p.cosine(g)).collect())
            .collect();
        Self::new(rows, probe_ids, gallery_ids)
    }

    pub fn n_probes(&self) -> usize {
        self.probe_ids.len()
    }

    pub fn n_gallery(&self) -> usize {
        self.gallery_ids.len()
    }

    pub fn probe_ids(&self) -> &[String] {
        &self.probe_ids
    }

    pub fn gallery_ids(&self) -> &[String] {
        &self.gallery_ids
    }

    pub fn get(&self, probe: usize, gallery: usize) -> f64 {
        self.scores[probe * self.n_gallery() + gallery]
    }

    pub fn row(&self, probe: usize) -> &[f64] {
        let g = self.n_gallery();
        &self.scores[probe * g..(probe + 1) * g]
    }

    /// `(genuine, impostor)` scores over all pairs.
    pub fn split_scores(&self) -> (Vec<f64>, Vec<f64>) {
        let (mut genuine, mut impostor) = (Vec::new(), Vec::new());
        for (p, pid) in self.probe_ids.iter().enumerate() {
            for (g, gid) in self.gallery_ids.iter().enumerate() {
                let s = self.get(p, g);
                if pid == gid {
                    genuine.push(s);
                } else {
                    impostor.push(s);
                }
            }
        }
        (genuine, impostor)
    }
}

/// Embeds images in chunks, resizing to the extractor's input size.
pub fn embed_images(images: &Tensor<f32>, ffe: &FfeConfig, params: &ParameterSet<f32>) -> Result<Vec<Embedding>> {
    let (n, ..) = images.dims4()?;
    let r = ffe.input_resolution;
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(CHUNK) {
        let idx: Vec<_> = (start..(start + CHUNK).min(n)).collect();
        let items: Vec<_> = idx.iter().map(|&i| images.batch_item(i)).collect::<Result<_, _>>()?;
        let chunk = Tensor::concat_batch(&items)?.resize_bilinear(r, r)?;
        out.extend(ffe_forward_embedding(&chunk, ffe, params)?);
    }
    Ok(out)
}

/// Translates images in chunks.
pub fn translate_images(
    images: &Tensor<f32>,
    config: &GeneratorConfig,
    ffe: &FfeConfig,
    params: &ParameterSet<f32>,
) -> Result<Tensor<f32>> {
    let (n, ..) = images.dims4()?;
    let mut out = Vec::new();
    for start in (0..n).step_by(CHUNK) {
        let items: Vec<_> = (start..(start + CHUNK).min(n))
            .map(|i| images.batch_item(i))
            .collect::<Result<_, _>>()?;
        out.push(generator_forward(&Tensor::concat_batch(&items)?, config, ffe, params)?);
    }
    Ok(Tensor::concat_batch(&out)?)
}

/// `score[p][g] = cosine(embed(G(probe_p)), embed(gallery_g))`.
#[allow(clippy::too_many_arguments)]
pub fn build_score_matrix(
    probes_vis: &Tensor<f32>,
    probe_ids: Vec<String>,
    gallery_nir: &Tensor<f32>,
    gallery_ids: Vec<String>,
    generator: &GeneratorConfig,
    ffe: &FfeConfig,
    generator_params: &ParameterSet<f32>,
    eval_ffe_params: &ParameterSet<f32>,
) -> Result<ScoreMatrix> {
    if probe_ids.is_empty() || gallery_ids.is_empty() {
        return Err(Error::Protocol("probe and gallery sets must be non-empty".into()));
    }
    let fake_nir = translate_images(probes_vis, generator, ffe, generator_params)?;
    let probes = embed_images(&fake_nir, ffe, eval_ffe_params)?;
    let gallery = embed_images(gallery_nir, ffe, eval_ffe_params)?;
    ScoreMatrix::from_embeddings(&probes, probe_ids, &gallery, gallery_ids)
}

/// Fraction of probes whose best gallery match is the same subject; ties go
/// to the lowest gallery index.
pub fn rank1(matrix: &ScoreMatrix) -> Result<f64> {
    if matrix.n_probes() == 0 {
        return Err(Error::Protocol("no probes".into()));
    }
    let gallery: BTreeSet<&str> = matrix.gallery_ids.iter().map(String::as_str).collect();
    let mut hits = 0usize;
    for (p, pid) in matrix.probe_ids.iter().enumerate() {
        if !gallery.contains(pid.as_str()) {
            return Err(Error::Protocol(format!("probe subject {pid} has no gallery entry")));
        }
        let row = matrix.row(p);
        let mut best = 0;
        for (g, &s) in row.iter().enumerate().skip(1) {
            if s > row[best] {
                best = g;
            }
        }
        if matrix.gallery_ids[best] == *pid {
            hits += 1;
        }
    }
    Ok(hits as f64 / matrix.n_probes() as f64)
}

/// TAR at one requested FAR level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TarAtFar {
    pub far: f64,
    pub tar: f64,
    /// Chosen acceptance threshold (accept when score ≥ threshold).
    pub threshold: f64,
    /// Impostor acceptance rate actually realized at `threshold`.
    pub achieved_far: f64,
    /// False when there are fewer than `1/far` impostor pairs, so the level
    /// cannot be resolved and only `achieved_far` is meaningful.
    pub resolvable: bool,
}

/// For each level `f`, picks among the observed scores the threshold with the
/// largest impostor acceptance rate not above `f` (the lowest such threshold),
/// and reports the genuine acceptance rate there. If even the highest score
/// admits more than `f` impostors, that threshold is used and flagged through
/// `achieved_far`.
pub fn tar_at_far(matrix: &ScoreMatrix, far_levels: &[f64]) -> Result<Vec<TarAtFar>> {
    let (mut genuine, mut impostor) = matrix.split_scores();
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::Protocol(format!(
            "need genuine and impostor pairs, have {} and {}",
            genuine.len(),
            impostor.len()
        )));
    }
    genuine.sort_by(f64::total_cmp);
    impostor.sort_by(f64::total_cmp);
    let (ng, ni) = (genuine.len() as f64, impostor.len() as f64);
    let at_least = |sorted: &[f64], t: f64| sorted.len() - sorted.partition_point(|&s| s < t);
    let mut thresholds: Vec<f64> = genuine.iter().chain(&impostor).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    far_levels
        .iter()
        .map(|&f| {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Range(format!("FAR level {f} outside [0, 1]")));
            }
            // FAR is non-increasing in the threshold, so the first admissible
            // threshold in ascending order has the largest admissible FAR.
            let far_at = |t: f64| at_least(&impostor, t) as f64 / ni;
            let t = thresholds
                .iter()
                .copied()
                .find(|&t| far_at(t) <= f)
                .unwrap_or(*thresholds.last().expect("non-empty"));
            Ok(TarAtFar {
                far: f,
                tar: at_least(&genuine, t) as f64 / ng,
                threshold: t,
                achieved_far: far_at(t),
                resolvable: ni * f >= 1.0,
            })
        })
        .collect()
}

/// Serialized evaluation result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub protocol: String,
    pub rank1: f64,
    #[serde(rename = "tar_far_0.01")]
    pub tar_far_0_01: f64,
    #[serde(rename = "tar_far_0.001")]
    pub tar_far_0_001: f64,
    pub n_genuine: usize,
    pub n_impostor: usize,
    pub checkpoint_step: u64,
}

impl EvalReport {
    pub fn from_matrix(matrix: &ScoreMatrix, protocol: &str, checkpoint_step: u64) -> Result<Self> {
        let (genuine, impostor) = matrix.split_scores();
        let tar = tar_at_far(matrix, &[0.01, 0.001])?;
        Ok(EvalReport {
            protocol: protocol.to_string(),
            rank1: rank1(matrix)?,
            tar_far_0_01: tar[0].tar,
            tar_far_0_001: tar[1].tar,
            n_genuine: genuine.len(),
            n_impostor: impostor.len(),
            checkpoint_step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::data::write_json(path, self)
    }
}

/// Fails with a protocol violation if any test subject was trained on.
pub fn check_no_overlap(split: &ProtocolSplit, trained_on: &[String]) -> Result<()> {
    split.check_disjoint()?;
    let trained: BTreeSet<&str> = trained_on.iter().map(String::as_str).collect();
    let leaked: BTreeSet<&str> = split
        .test
        .iter()
        .map(|s| s.subject_id.as_str())
        .chain(split.test_subjects.iter().map(String::as_str))
        .filter(|s| trained.contains(s))
        .collect();
    if leaked.is_empty() {
        Ok(())
    } else {
        Err(Error::ProtocolViolation(format!(
            "test subjects seen in training: {}",
            leaked.into_iter().collect::<Vec<_>>().join(", ")
        )))
    }
}

/// End-to-end report over the test partition: VIS probes through G, real NIR gallery.
pub fn evaluate_protocol(split: &ProtocolSplit, state: &TrainState, protocol: &str) -> Result<EvalReport> {
    check_no_overlap(split, &state.train_subjects)?;
    if split.test.is_empty() {
        return Err(Error::Protocol("test split is empty".into()));
    }
    let cfg = &state.config;
    let images = PairedImages::load(&split.test, cfg.train.resolution)?;
    let idx: Vec<usize> = (0..images.len()).collect();
    let ids = images.subjects().to_vec();
    let matrix = build_score_matrix(
        &images.domain(Domain::Vis, &idx)?,
        ids.clone(),
        &images.domain(Domain::Nir, &idx)?,
        ids,
        &cfg.generator,
        &cfg.ffe,
        &state.network("g."),
        &state.network(EVAL_FFE_PREFIX),
    )?;
    EvalReport::from_matrix(&matrix, protocol, state.step)
}
