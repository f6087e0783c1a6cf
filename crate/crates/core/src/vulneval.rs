//! Vulnerability evaluation: synthetic populations, accomplice selection,
//! score sets, threshold selection, FAR / FRR / MMPMR / RMMR, the
//! MMPMR-vs-FRR curve and the end-to-end attack campaign.
//!
//! A comparison is accepted when its score is `>= t`.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morpher::{
    bio_morph, embedding_midpoint_deviation, invert, midpoint_morph, BioMorphConfig, BioNets,
    InversionConfig, InversionNets, MorphMethod, MorphRecord,
};
use crate::nets::{match_score, Biometric, Encoder, Perceptual};
use crate::rng;
use crate::stylegen::{Generator, LatentStack, LatentStats, Mapping};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PopulationConfig {
    pub n_ids: usize,
    pub imgs_per_id: usize,
    /// Variant perturbation as a fraction of the per-coordinate latent spread.
    pub sigma_id: f64,
    pub seed: u64,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        PopulationConfig {
            n_ids: 200,
            imgs_per_id: 4,
            sigma_id: 0.15,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Identity {
    pub images: Vec<Tensor<f32>>,
    pub embeddings: Vec<Tensor<f32>>,
    /// Index of the image used as this identity's enrolment and morph source.
    pub representative: usize,
}

impl Identity {
    pub fn representative_image(&self) -> &Tensor<f32> {
        &self.images[self.representative]
    }

    pub fn representative_embedding(&self) -> &Tensor<f32> {
        &self.embeddings[self.representative]
    }
}

#[derive(Clone, Debug)]
pub struct Population {
    pub config: PopulationConfig,
    pub identities: Vec<Identity>,
}

/// Synthetic population: identity `i` has base latent
/// `sample_identity(derive(seed, i))` and `imgs_per_id` variants
/// `base + sigma_id * std ⊙ N(0, I)`. The representative is the variant with
/// the smallest perturbation.
pub fn build_population(
    gen: &Generator,
    mapping: &Mapping,
    bio: &Biometric,
    stats: &LatentStats,
    cfg: &PopulationConfig,
) -> Result<Population> {
    if !(cfg.sigma_id > 0.0 && cfg.sigma_id.is_finite()) {
        return Err(Error::Config(format!("sigma_id must be positive, got {}", cfg.sigma_id)));
    }
    if cfg.n_ids == 0 || cfg.imgs_per_id < 2 {
        return Err(Error::Config(
            "population needs n_ids >= 1 and imgs_per_id >= 2".into(),
        ));
    }
    let d = gen.config.style_dim;
    if stats.std.shape() != [d] {
        return Err(Error::Dims("latent stats do not match the generator".into()));
    }
    let identities = (0..cfg.n_ids)
        .map(|i| {
            let base = mapping.sample_identity(rng::derive_indexed(cfg.seed, "population", i as u64))?;
            let base = base.tensor();
            let mut r = rng::rng_indexed(cfg.seed, "population-variants", i as u64);
            let mut images = Vec::with_capacity(cfg.imgs_per_id);
            let mut embeddings = Vec::with_capacity(cfg.imgs_per_id);
            let mut best = (f64::INFINITY, 0);
            for k in 0..cfg.imgs_per_id {
                let noise = rng::normal(&mut r, &[d], 1.0);
                let norm: f64 = noise.data().iter().map(|&v| (v as f64).powi(2)).sum();
                if norm < best.0 {
                    best = (norm, k);
                }
                let w = Tensor::from_fn(&[d], |j| {
                    base.data()[j] + cfg.sigma_id as f32 * stats.std.data()[j] * noise.data()[j]
                });
                let img = gen.synthesize(&LatentStack::tied(&w, gen.config.layers)?)?;
                embeddings.push(bio.embed(&img)?);
                images.push(img);
            }
            Ok(Identity {
                images,
                embeddings,
                representative: best.1,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Population {
        config: cfg.clone(),
        identities,
    })
}

impl Population {
    /// Population from a directory with one subdirectory per identity holding
    /// PNG or MTEN images. Subdirectories and files are taken in name order
    /// and the first image of each identity is its representative.
    pub fn from_image_dir(dir: impl AsRef<Path>, bio: &Biometric) -> Result<Self> {
        let dir = dir.as_ref();
        let listed = |p: &Path| -> Result<Vec<std::path::PathBuf>> {
            let mut v: Vec<_> = std::fs::read_dir(p)
                .map_err(|e| Error::Missing {
                    path: p.to_path_buf(),
                    detail: e.to_string(),
                })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .collect();
            v.sort();
            Ok(v)
        };
        let mut identities = Vec::new();
        for sub in listed(dir)?.into_iter().filter(|p| p.is_dir()) {
            let files: Vec<_> = listed(&sub)?
                .into_iter()
                .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("png" | "mten")))
                .collect();
            if files.len() < 2 {
                return Err(Error::Config(format!(
                    "identity directory {} needs at least 2 images",
                    sub.display()
                )));
            }
            let images = files
                .iter()
                .map(crate::imageio::read_image)
                .collect::<Result<Vec<_>>>()?;
            let embeddings = images.iter().map(|x| bio.embed(x)).collect::<Result<_>>()?;
            identities.push(Identity {
                images,
                embeddings,
                representative: 0,
            });
        }
        if identities.is_empty() {
            return Err(Error::Config(format!("no identity directories under {}", dir.display())));
        }
        let imgs_per_id = identities.iter().map(|i| i.images.len()).min().unwrap_or(0);
        Ok(Population {
            config: PopulationConfig {
                n_ids: identities.len(),
                imgs_per_id,
                ..Default::default()
            },
            identities,
        })
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    /// Scores of every same-identity image pair.
    pub fn genuine_pairs(&self) -> Vec<ScoredPair> {
        let mut out = Vec::new();
        for (i, id) in self.identities.iter().enumerate() {
            for a in 0..id.embeddings.len() {
                for b in a + 1..id.embeddings.len() {
                    out.push(ScoredPair {
                        a: i,
                        b: i,
                        score: match_score(&id.embeddings[a], &id.embeddings[b]),
                    });
                }
            }
        }
        out
    }

    /// Scores of every different-identity image pair.
    pub fn imposter_pairs(&self) -> Vec<ScoredPair> {
        let mut out = Vec::new();
        for (i, x) in self.identities.iter().enumerate() {
            for (j, y) in self.identities.iter().enumerate().skip(i + 1) {
                for u in &x.embeddings {
                    for v in &y.embeddings {
                        out.push(ScoredPair {
                            a: i,
                            b: j,
                            score: match_score(u, v),
                        });
                    }
                }
            }
        }
        out
    }

    /// Write `population.json`, `images.mten` (`[N, k, R, R, 3]`) and
    /// `embeddings.mten` (`[N, k, e]`) into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let k = self.config.imgs_per_id;
        if self.identities.iter().any(|i| i.images.len() != k) {
            return Err(Error::Dims("ragged populations cannot be saved".into()));
        }
        let img_shape = self.identities[0].images[0].shape().to_vec();
        let e = self.identities[0].embeddings[0].len();
        let mut images = Vec::new();
        let mut embs = Vec::new();
        for id in &self.identities {
            for (x, v) in id.images.iter().zip(&id.embeddings) {
                images.extend_from_slice(x.data());
                embs.extend_from_slice(v.data());
            }
        }
        let n = self.len();
        let mut shape = vec![n, k];
        shape.extend(&img_shape);
        crate::mten::write(dir.join("images.mten"), &Tensor::new(shape, images)?)?;
        crate::mten::write(dir.join("embeddings.mten"), &Tensor::new(vec![n, k, e], embs)?)?;
        let manifest = PopulationManifest {
            kind: "population".into(),
            config: self.config.clone(),
            representatives: self.identities.iter().map(|i| i.representative).collect(),
        };
        std::fs::write(dir.join("population.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("population.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Missing {
            path: path.clone(),
            detail: e.to_string(),
        })?;
        let m: PopulationManifest = serde_json::from_str(&text)?;
        let images = crate::mten::read(dir.join("images.mten"))?;
        let embs = crate::mten::read(dir.join("embeddings.mten"))?;
        let (n, k) = (m.config.n_ids, m.config.imgs_per_id);
        if images.rank() != 5 || images.shape()[..2] != [n, k] || embs.rank() != 3 || embs.shape()[..2] != [n, k] {
            return Err(Error::Dims(format!(
                "population files are {:?} / {:?}, manifest says {n} x {k}",
                images.shape(),
                embs.shape()
            )));
        }
        if m.representatives.len() != n || m.representatives.iter().any(|&r| r >= k) {
            return Err(Error::Format("population representatives out of range".into()));
        }
        let img_shape = images.shape()[2..].to_vec();
        let img_len: usize = img_shape.iter().product();
        let e = embs.shape()[2];
        let identities = (0..n)
            .map(|i| {
                let images = (0..k)
                    .map(|j| {
                        let o = (i * k + j) * img_len;
                        Tensor::new(img_shape.clone(), images.data()[o..o + img_len].to_vec())
                    })
                    .collect::<Result<_>>()?;
                let embeddings = (0..k)
                    .map(|j| {
                        let o = (i * k + j) * e;
                        Tensor::new(vec![e], embs.data()[o..o + e].to_vec())
                    })
                    .collect::<Result<_>>()?;
                Ok(Identity {
                    images,
                    embeddings,
                    representative: m.representatives[i],
                })
            })
            .collect::<Result<_>>()?;
        Ok(Population {
            config: m.config,
            identities,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PopulationManifest {
    kind: String,
    config: PopulationConfig,
    representatives: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub a: usize,
    pub b: usize,
    pub score: f64,
}

/// Accomplice chosen for one subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccompliceMatch {
    pub subject: usize,
    pub accomplice: usize,
    pub score: f64,
    /// Sampled candidate set, in sampling order.
    pub friends: Vec<usize>,
}

/// For every identity draw `n_friends` distinct other identities and keep the
/// one whose representative image matches best (lower index on ties).
pub fn select_accomplices(pop: &Population, n_friends: usize, seed: u64) -> Result<Vec<AccompliceMatch>> {
    let n = pop.len();
    if n < 2 {
        return Err(Error::Config(format!("accomplice selection needs >= 2 identities, got {n}")));
    }
    if n_friends == 0 || n_friends > n - 1 {
        return Err(Error::Config(format!(
            "n_friends must be in 1..={}, got {n_friends}",
            n - 1
        )));
    }
    (0..n)
        .map(|s| {
            let mut r: ChaCha8Rng = rng::rng_indexed(seed, "friends", s as u64);
            let others: Vec<usize> = (0..n).filter(|&j| j != s).collect();
            let friends: Vec<usize> = others.choose_multiple(&mut r, n_friends).copied().collect();
            let me = pop.identities[s].representative_embedding();
            let mut best: Option<(f64, usize)> = None;
            for &f in &friends {
                let sc = match_score(me, pop.identities[f].representative_embedding());
                best = match best {
                    Some((bs, bi)) if bs > sc || (bs == sc && bi < f) => Some((bs, bi)),
                    _ => Some((sc, f)),
                };
            }
            let (score, accomplice) = best.expect("n_friends >= 1");
            Ok(AccompliceMatch {
                subject: s,
                accomplice,
                score,
                friends,
            })
        })
        .collect()
}

/// Bona fide and morph score lists.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub imposter: Vec<f64>,
    pub mmmss: Vec<f64>,
}

fn check_scores(scores: &[f64], rate: &str) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::EmptyScores {
            rate: rate.into(),
            detail: "score list is empty".into(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Invalid(format!("non-finite score in {rate} list")));
    }
    Ok(())
}

fn frac(count: usize, n: usize) -> f64 {
    count as f64 / n as f64
}

/// `#{s >= t} / N` over imposter scores.
pub fn far_at(imposter: &[f64], t: f64) -> Result<f64> {
    check_scores(imposter, "FAR")?;
    Ok(frac(imposter.iter().filter(|&&s| s >= t).count(), imposter.len()))
}

/// `#{s < t} / N` over genuine scores.
pub fn frr_at(genuine: &[f64], t: f64) -> Result<f64> {
    check_scores(genuine, "FRR")?;
    Ok(frac(genuine.iter().filter(|&&s| s < t).count(), genuine.len()))
}

/// `#{s >= t} / N` over morph min-scores.
pub fn mmpmr_at(mmmss: &[f64], t: f64) -> Result<f64> {
    check_scores(mmmss, "MMPMR")?;
    Ok(frac(mmmss.iter().filter(|&&s| s >= t).count(), mmmss.len()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub far: f64,
    pub frr: f64,
    pub mmpmr: f64,
    pub rmmr: f64,
}

pub fn rates_at(scores: &ScoreSet, t: f64) -> Result<Rates> {
    if !t.is_finite() {
        return Err(Error::Invalid(format!("threshold must be finite, got {t}")));
    }
    let far = far_at(&scores.imposter, t)?;
    let frr = frr_at(&scores.genuine, t)?;
    let mmpmr = mmpmr_at(&scores.mmmss, t)?;
    Ok(Rates {
        far,
        frr,
        mmpmr,
        rmmr: mmpmr + frr,
    })
}

fn sorted(scores: &[f64]) -> Vec<f64> {
    let mut v = scores.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Smallest observed imposter score `t` with `FAR(t) <= target`, or
/// `max + 1` when no observed score qualifies.
pub fn threshold_at_far(imposter: &[f64], target_far: f64) -> Result<f64> {
    check_scores(imposter, "FAR")?;
    if !(target_far > 0.0 && target_far <= 1.0) {
        return Err(Error::Config(format!("target FAR must be in (0, 1], got {target_far}")));
    }
    let s = sorted(imposter);
    let n = s.len();
    let mut i = 0;
    while i < n {
        // scores >= s[i] are exactly s[i..] because s[i] is a first occurrence
        if frac(n - i, n) <= target_far {
            return Ok(s[i]);
        }
        let v = s[i];
        while i < n && s[i] == v {
            i += 1;
        }
    }
    Ok(s[n - 1] + 1.0)
}

/// Largest observed genuine score `t` with `FRR(t) <= target`.
pub fn threshold_at_frr(genuine: &[f64], target_frr: f64) -> Result<f64> {
    check_scores(genuine, "FRR")?;
    if !(0.0..=1.0).contains(&target_frr) {
        return Err(Error::Config(format!("target FRR must be in [0, 1], got {target_frr}")));
    }
    let s = sorted(genuine);
    let n = s.len();
    let mut best = s[0];
    let mut i = 0;
    while i < n {
        if frac(i, n) <= target_frr {
            best = s[i];
        } else {
            break;
        }
        let v = s[i];
        while i < n && s[i] == v {
            i += 1;
        }
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub frr: f64,
    pub mmpmr: f64,
    /// Absent when there are no imposter scores.
    pub far: Option<f64>,
}

/// Sweep every distinct genuine or morph score, plus one sentinel below and
/// one above all of them, in increasing order.
pub fn roc_mmpmr_frr(scores: &ScoreSet) -> Result<Vec<RocPoint>> {
    check_scores(&scores.genuine, "FRR")?;
    check_scores(&scores.mmmss, "MMPMR")?;
    let mut ts: Vec<f64> = scores.genuine.iter().chain(&scores.mmmss).copied().collect();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let (lo, hi) = (ts[0] - 1.0, ts[ts.len() - 1] + 1.0);
    ts.insert(0, lo);
    ts.push(hi);
    let g = sorted(&scores.genuine);
    let m = sorted(&scores.mmmss);
    let imp = sorted(&scores.imposter);
    let below = |v: &[f64], t: f64| v.partition_point(|&s| s < t);
    Ok(ts
        .into_iter()
        .map(|t| RocPoint {
            threshold: t,
            frr: frac(below(&g, t), g.len()),
            mmpmr: frac(m.len() - below(&m, t), m.len()),
            far: (!imp.is_empty()).then(|| frac(imp.len() - below(&imp, t), imp.len())),
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorKind {
    FixedFar,
    FixedFrr,
}

/// Rates at one anchored threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub anchor: AnchorKind,
    pub target: f64,
    /// Set when a FAR target is below `1 / N_imposter` and cannot be resolved.
    pub refused: bool,
    pub threshold: Option<f64>,
    pub far: Option<f64>,
    pub frr: Option<f64>,
    pub mmpmr: Option<f64>,
    pub rmmr: Option<f64>,
    /// Set when there are no morph scores.
    pub mmpmr_undefined: bool,
}

impl EvalReport {
    fn resolved(anchor: AnchorKind, target: f64, t: f64, scores: &ScoreSet) -> Result<Self> {
        let far = far_at(&scores.imposter, t)?;
        let frr = frr_at(&scores.genuine, t)?;
        let mmpmr = if scores.mmmss.is_empty() {
            None
        } else {
            Some(mmpmr_at(&scores.mmmss, t)?)
        };
        Ok(EvalReport {
            anchor,
            target,
            refused: false,
            threshold: Some(t),
            far: Some(far),
            frr: Some(frr),
            mmpmr,
            rmmr: mmpmr.map(|m| m + frr),
            mmpmr_undefined: mmpmr.is_none(),
        })
    }

    /// Report at the threshold meeting `target_far`. Targets below
    /// `1 / N_imposter` are refused rather than silently rounded.
    pub fn at_far(scores: &ScoreSet, target_far: f64) -> Result<Self> {
        check_scores(&scores.imposter, "FAR")?;
        if target_far < 1.0 / scores.imposter.len() as f64 {
            return Ok(EvalReport {
                anchor: AnchorKind::FixedFar,
                target: target_far,
                refused: true,
                threshold: None,
                far: None,
                frr: None,
                mmpmr: None,
                rmmr: None,
                mmpmr_undefined: scores.mmmss.is_empty(),
            });
        }
        let t = threshold_at_far(&scores.imposter, target_far)?;
        Self::resolved(AnchorKind::FixedFar, target_far, t, scores)
    }

    pub fn at_frr(scores: &ScoreSet, target_frr: f64) -> Result<Self> {
        let t = threshold_at_frr(&scores.genuine, target_frr)?;
        Self::resolved(AnchorKind::FixedFrr, target_frr, t, scores)
    }
}

pub const HISTOGRAM_BINS: usize = 100;

/// Counts per kind over 100 uniform bins on `[-1, 1]`; a score of exactly 1
/// falls in the last bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub genuine: Vec<u64>,
    pub imposter: Vec<u64>,
    pub mmmss: Vec<u64>,
}

pub fn histogram_bin(s: f64) -> usize {
    (((s + 1.0) * (HISTOGRAM_BINS as f64 / 2.0)).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1)
}

impl Histogram {
    pub fn of(scores: &ScoreSet) -> Self {
        let count = |v: &[f64]| {
            let mut h = vec![0u64; HISTOGRAM_BINS];
            for &s in v {
                h[histogram_bin(s)] += 1;
            }
            h
        };
        Histogram {
            genuine: count(&scores.genuine),
            imposter: count(&scores.imposter),
            mmmss: count(&scores.mmmss),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,genuine,imposter,mmmss\n");
        let w = 2.0 / HISTOGRAM_BINS as f64;
        for i in 0..HISTOGRAM_BINS {
            let lo = -1.0 + i as f64 * w;
            let _ = writeln!(
                s,
                "{lo:.2},{:.2},{},{},{}",
                lo + w,
                self.genuine[i],
                self.imposter[i],
                self.mmmss[i]
            );
        }
        s
    }
}

pub fn roc_to_csv(points: &[RocPoint]) -> String {
    let mut s = String::from("threshold,frr,mmpmr,far\n");
    for p in points {
        let far = p.far.map(|f| f.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{far}", p.threshold, p.frr, p.mmpmr);
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CampaignConfig {
    pub n_friends: usize,
    pub far_targets: Vec<f64>,
    pub frr_targets: Vec<f64>,
    pub seed: u64,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            n_friends: 50,
            far_targets: vec![1e-2, 1e-5],
            frr_targets: vec![0.0073],
            seed: 1,
        }
    }
}

/// Networks a campaign needs.
#[derive(Clone, Copy)]
pub struct CampaignNets<'a> {
    pub gen: &'a Generator,
    pub perceptual: &'a Perceptual,
    pub biometric: &'a Biometric,
    pub encoder: Option<&'a Encoder>,
    pub stats: &'a LatentStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairFailure {
    pub accomplice: usize,
    pub imposter: usize,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub n_genuine: usize,
    pub n_imposter: usize,
    pub n_morphs: usize,
    pub genuine_mean: Option<f64>,
    pub imposter_mean: Option<f64>,
    pub mmmss_mean: Option<f64>,
    /// `genuine_mean - imposter_mean`.
    pub separation: Option<f64>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Everything one campaign method produced.
#[derive(Clone, Debug)]
pub struct CampaignOutcome {
    pub method: MorphMethod,
    pub records: Vec<MorphRecord>,
    pub failures: Vec<PairFailure>,
    pub scores: ScoreSet,
    pub genuine_pairs: Vec<ScoredPair>,
    pub imposter_pairs: Vec<ScoredPair>,
    pub fixed_far: Vec<EvalReport>,
    pub fixed_frr: Vec<EvalReport>,
    pub roc: Vec<RocPoint>,
    pub histogram: Histogram,
    /// Mean embedding deviation of the morphs from the source midpoint.
    pub deviation_mean: Option<f64>,
}

/// JSON form of a [`CampaignOutcome`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: MorphMethod,
    pub pairs: usize,
    pub failures: Vec<PairFailure>,
    pub summary: ScoreSummary,
    pub fixed_far: Vec<EvalReport>,
    pub fixed_frr: Vec<EvalReport>,
    pub roc_points: usize,
    pub deviation_mean: Option<f64>,
}

impl CampaignOutcome {
    pub fn summary(&self) -> ScoreSummary {
        let g = mean(&self.scores.genuine);
        let i = mean(&self.scores.imposter);
        ScoreSummary {
            n_genuine: self.scores.genuine.len(),
            n_imposter: self.scores.imposter.len(),
            n_morphs: self.scores.mmmss.len(),
            genuine_mean: g,
            imposter_mean: i,
            mmmss_mean: mean(&self.scores.mmmss),
            separation: g.zip(i).map(|(g, i)| g - i),
        }
    }

    pub fn report(&self) -> MethodReport {
        MethodReport {
            method: self.method,
            pairs: self.records.len() + self.failures.len(),
            failures: self.failures.clone(),
            summary: self.summary(),
            fixed_far: self.fixed_far.clone(),
            fixed_frr: self.fixed_frr.clone(),
            roc_points: self.roc.len(),
            deviation_mean: self.deviation_mean,
        }
    }

    pub fn scores_csv(&self) -> String {
        let mut s = String::from("kind,subject_a,subject_b,score\n");
        for p in &self.genuine_pairs {
            let _ = writeln!(s, "genuine,{},{},{}", p.a, p.b, p.score);
        }
        for p in &self.imposter_pairs {
            let _ = writeln!(s, "imposter,{},{},{}", p.a, p.b, p.score);
        }
        for r in &self.records {
            let _ = writeln!(s, "mmmss,{},{},{}", r.accomplice, r.imposter, r.mmmss);
        }
        s
    }

    pub fn records_csv(&self) -> String {
        let mut s = String::from("accomplice,imposter,score_accomplice,score_imposter,mmmss\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.accomplice, r.imposter, r.score_accomplice, r.score_imposter, r.mmmss
            );
        }
        s
    }

    /// Write `scores.csv`, `records.csv`, `roc.csv` and `histogram.csv` into `dir`.
    pub fn write_tables(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("scores.csv"), self.scores_csv())?;
        std::fs::write(dir.join("records.csv"), self.records_csv())?;
        std::fs::write(dir.join("roc.csv"), roc_to_csv(&self.roc))?;
        std::fs::write(dir.join("histogram.csv"), self.histogram.to_csv())?;
        Ok(())
    }
}

/// Build one morph per `(subject, accomplice)` pair, score it against both
/// source images and evaluate the population at the configured anchors.
///
/// Inversions for midpoint morphs are computed once per identity. Jobs run on
/// `workers` threads; results are gathered in pair order. A failing pair is
/// recorded and skipped.
#[allow(clippy::too_many_arguments)]
pub fn run_attack_campaign(
    pop: &Population,
    pairs: &[AccompliceMatch],
    method: MorphMethod,
    nets: &CampaignNets,
    inversion: &InversionConfig,
    bio_cfg: &BioMorphConfig,
    cfg: &CampaignConfig,
    workers: usize,
) -> Result<CampaignOutcome> {
    for p in pairs {
        if p.subject >= pop.len() || p.accomplice >= pop.len() {
            return Err(Error::Config(format!(
                "pair ({}, {}) outside a population of {}",
                p.accomplice,
                p.subject,
                pop.len()
            )));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let src = |i: usize| pop.identities[i].representative_image();
    let morphs: Vec<Result<Tensor<f32>>> = pool.install(|| match method {
        MorphMethod::Midpoint => {
            let mut needed: Vec<usize> = pairs.iter().flat_map(|p| [p.accomplice, p.subject]).collect();
            needed.sort_unstable();
            needed.dedup();
            let inv_nets = InversionNets {
                gen: nets.gen,
                perceptual: nets.perceptual,
                stats: nets.stats,
                encoder: nets.encoder,
            };
            let inverted: Vec<Result<LatentStack>> = needed
                .par_iter()
                .map(|&i| invert(src(i), &inv_nets, inversion, None).map(|r| r.latent))
                .collect();
            let lookup = |i: usize| -> Result<&LatentStack> {
                let k = needed.binary_search(&i).expect("collected above");
                inverted[k].as_ref().map_err(|e| Error::Invalid(format!("inversion of identity {i}: {e}")))
            };
            pairs
                .par_iter()
                .map(|p| midpoint_morph(nets.gen, lookup(p.accomplice)?, lookup(p.subject)?))
                .collect()
        }
        MorphMethod::Bio => {
            let bio_nets = BioNets {
                gen: nets.gen,
                biometric: nets.biometric,
                stats: nets.stats,
                encoder: nets.encoder,
            };
            pairs
                .par_iter()
                .map(|p| bio_morph(src(p.accomplice), src(p.subject), &bio_nets, bio_cfg).map(|r| r.image))
                .collect()
        }
    });
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut deviations = Vec::new();
    for (p, m) in pairs.iter().zip(morphs) {
        let scored = m.and_then(|img| {
            let e = nets.biometric.embed(&img)?;
            let sa = match_score(&e, pop.identities[p.accomplice].representative_embedding());
            let si = match_score(&e, pop.identities[p.subject].representative_embedding());
            let dev = embedding_midpoint_deviation(nets.biometric, &img, src(p.accomplice), src(p.subject))?;
            Ok((MorphRecord::new(method, p.accomplice, p.subject, img, sa, si), dev))
        });
        match scored {
            Ok((r, dev)) => {
                records.push(r);
                deviations.push(dev);
            }
            Err(e) => failures.push(PairFailure {
                accomplice: p.accomplice,
                imposter: p.subject,
                error: e.to_string(),
            }),
        }
    }
    let genuine_pairs = pop.genuine_pairs();
    let imposter_pairs = pop.imposter_pairs();
    let scores = ScoreSet {
        genuine: genuine_pairs.iter().map(|p| p.score).collect(),
        imposter: imposter_pairs.iter().map(|p| p.score).collect(),
        mmmss: records.iter().map(|r| r.mmmss).collect(),
    };
    let fixed_far = cfg
        .far_targets
        .iter()
        .map(|&t| EvalReport::at_far(&scores, t))
        .collect::<Result<_>>()?;
    let fixed_frr = cfg
        .frr_targets
        .iter()
        .map(|&t| EvalReport::at_frr(&scores, t))
        .collect::<Result<_>>()?;
    let roc = if scores.mmmss.is_empty() {
        Vec::new()
    } else {
        roc_mmpmr_frr(&scores)?
    };
    let histogram = Histogram::of(&scores);
    Ok(CampaignOutcome {
        method,
        records,
        failures,
        fixed_far,
        fixed_frr,
        roc,
        histogram,
        deviation_mean: mean(&deviations),
        scores,
        genuine_pairs,
        imposter_pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn far_threshold_example() {
        let imp = [0.1, 0.2, 0.3, 0.4, 0.5];
        assert_eq!(threshold_at_far(&imp, 0.2).unwrap(), 0.5);
        assert_eq!(threshold_at_far(&imp, 1.0).unwrap(), 0.1);
        assert_eq!(threshold_at_far(&imp, 0.1).unwrap(), 1.5);
        assert_eq!(far_at(&imp, 1.5).unwrap(), 0.0);
    }

    #[test]
    fn far_threshold_with_ties() {
        let imp = [0.3, 0.3, 0.3, 0.1];
        assert_eq!(threshold_at_far(&imp, 0.5).unwrap(), 1.3);
        assert_eq!(threshold_at_far(&imp, 0.75).unwrap(), 0.3);
    }

    #[test]
    fn frr_threshold_cases() {
        let g = [0.9, 0.5, 0.7, 0.6];
        assert_eq!(threshold_at_frr(&g, 0.0).unwrap(), 0.5);
        assert_eq!(threshold_at_frr(&g, 0.25).unwrap(), 0.6);
        assert_eq!(threshold_at_frr(&g, 1.0).unwrap(), 0.9);
    }

    #[test]
    fn rates_extremes() {
        let s = ScoreSet {
            genuine: vec![0.8, 0.9],
            imposter: vec![0.1, 0.2],
            mmmss: vec![0.5],
        };
        let lo = rates_at(&s, -5.0).unwrap();
        assert_eq!((lo.far, lo.frr, lo.mmpmr), (1.0, 0.0, 1.0));
        let hi = rates_at(&s, 5.0).unwrap();
        assert_eq!((hi.far, hi.frr, hi.mmpmr, hi.rmmr), (0.0, 1.0, 0.0, 1.0));
    }

    #[test]
    fn empty_lists_name_the_rate() {
        let s = ScoreSet {
            genuine: vec![0.5],
            imposter: vec![],
            mmmss: vec![0.5],
        };
        let e = rates_at(&s, 0.0).unwrap_err();
        assert!(e.to_string().contains("FAR"), "{e}");
        assert!(threshold_at_frr(&[], 0.1).is_err());
    }

    #[test]
    fn roc_single_scores() {
        let s = ScoreSet {
            genuine: vec![0.8],
            imposter: vec![],
            mmmss: vec![0.4],
        };
        let r = roc_mmpmr_frr(&s).unwrap();
        let pts: Vec<(f64, f64, f64)> = r.iter().map(|p| (p.threshold, p.frr, p.mmpmr)).collect();
        assert_eq!(
            pts,
            vec![(-0.6, 0.0, 1.0), (0.4, 0.0, 1.0), (0.8, 0.0, 0.0), (1.8, 1.0, 0.0)]
        );
    }

    #[test]
    fn refused_far_anchor() {
        let s = ScoreSet {
            genuine: vec![0.8, 0.7],
            imposter: vec![0.1; 10],
            mmmss: vec![],
        };
        let r = EvalReport::at_far(&s, 1e-5).unwrap();
        assert!(r.refused && r.threshold.is_none() && r.mmpmr_undefined);
        let ok = EvalReport::at_far(&s, 0.1).unwrap();
        assert!(!ok.refused && ok.mmpmr.is_none() && ok.mmpmr_undefined);
    }

    #[test]
    fn histogram_edges() {
        assert_eq!(histogram_bin(-1.0), 0);
        assert_eq!(histogram_bin(1.0), 99);
        assert_eq!(histogram_bin(0.0), 50);
        assert_eq!(histogram_bin(-0.99), 0);
    }
}
