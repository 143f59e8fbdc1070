//! Synthetic heterogeneous world: one AU-annotated clip dataset and one
//! expression-annotated clip dataset, generated from shared latent AU
//! activations but rendered through distinct domain feature maps and
//! never sharing samples or annotations.
//!
//! Expression labels come from a ground-truth generator built on the
//! FACS prior with a slice of its weight moved off the prior support,
//! so the prior initialization is informative but not perfect.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::container::{read_container, write_container, DATA_MAGIC};
use crate::error::{Error, Result};
use crate::facs::{build_prior_matrix, builtin_facs_table, normalize_rows, BP4D_AUS, EXPR_7};
use crate::numerics::{rng_for, Tensor};
use crate::tsp::Task;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticWorldSpec {
    pub au_ids: Vec<u32>,
    pub expressions: Vec<String>,
    pub frames: usize,
    pub d_raw: usize,
    pub au_samples: usize,
    pub fe_samples: usize,
    pub train_fraction: f64,
    /// Std of per-frame Gaussian feature noise.
    pub feature_noise: f64,
    /// Std of the noise added to generator scores before the label argmax.
    pub label_noise: f64,
    /// Probability an on-support AU fails to activate in a latent draw.
    pub support_dropout: f64,
    /// Probability an off-support AU activates anyway.
    pub prevalence: f64,
    /// Fraction of each generator row's weight moved off the prior support.
    pub off_support_mass: f64,
    /// Penalty per active AU outside a class's prototypical configuration.
    pub off_support_penalty: f64,
    /// Per-clip intensity gain is log-uniform in [1/spread, spread];
    /// 1.0 disables the variation.
    pub gain_spread: f64,
    /// Probability that an AU annotation in the TRAIN split is flipped
    /// (annotation noise); test labels stay clean.
    pub annotation_flip: f64,
    /// Weight of each domain's random feature component relative to the
    /// shared semantic core of an AU direction.
    pub domain_shift: f64,
}

impl Default for SyntheticWorldSpec {
    fn default() -> Self {
        SyntheticWorldSpec {
            au_ids: BP4D_AUS.to_vec(),
            expressions: EXPR_7.iter().map(|s| s.to_string()).collect(),
            frames: 8,
            d_raw: 64,
            au_samples: 320,
            fe_samples: 160,
            train_fraction: 0.75,
            feature_noise: 0.4,
            label_noise: 0.05,
            support_dropout: 0.1,
            prevalence: 0.08,
            off_support_mass: 0.1,
            off_support_penalty: 0.25,
            gain_spread: 4.0,
            annotation_flip: 0.15,
            domain_shift: 0.25,
        }
    }
}

impl SyntheticWorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.au_ids.is_empty() || self.expressions.is_empty() {
            return Err(Error::Config("empty label space".into()));
        }
        if self.frames == 0 || self.d_raw == 0 {
            return Err(Error::Config("frames and d_raw must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.train_fraction) && self.train_fraction != 1.0 {
            return Err(Error::Config("train_fraction must lie in (0, 1]".into()));
        }
        for (name, v) in [
            ("support_dropout", self.support_dropout),
            ("prevalence", self.prevalence),
            ("off_support_mass", self.off_support_mass),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.gain_spread < 1.0 {
            return Err(Error::Config("gain_spread must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.annotation_flip) {
            return Err(Error::Config("annotation_flip must lie in [0, 1]".into()));
        }
        if self.domain_shift < 0.0 || !self.domain_shift.is_finite() {
            return Err(Error::Config("domain_shift must be non-negative".into()));
        }
        Ok(())
    }
}

/// A set of clips with one annotation paradigm.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipDataset {
    pub task: Task,
    pub domain_id: u32,
    /// One n×d_raw tensor per clip.
    pub clips: Vec<Tensor>,
    /// N×K one-hot (expression) or N×M binary (AU).
    pub labels: Tensor,
    /// N×M latent AU activations behind each clip, kept for oracles.
    pub latents: Tensor,
}

impl ClipDataset {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    fn select(&self, idx: std::ops::Range<usize>) -> ClipDataset {
        let rows =
            |t: &Tensor| Tensor::from_rows(&idx.clone().map(|i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        ClipDataset {
            task: self.task,
            domain_id: self.domain_id,
            clips: self.clips[idx.clone()].to_vec(),
            labels: rows(&self.labels),
            latents: rows(&self.latents),
        }
    }

    /// Leading `fraction` of the samples (generation order is already
    /// random, so a prefix is an unbiased subset).
    pub fn head_fraction(&self, fraction: f64) -> Result<ClipDataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "fraction must lie in (0, 1], got {fraction}"
            )));
        }
        let n = ((self.len() as f64 * fraction).round() as usize).max(1);
        Ok(self.select(0..n.min(self.len())))
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub spec: SyntheticWorldSpec,
    pub seed: u64,
    /// Ground-truth K×M score matrix behind expression labels.
    pub generator: Tensor,
    /// Per-class score offsets (gives the no-AU configuration a home).
    pub bias: Vec<f64>,
    pub au_train: ClipDataset,
    pub au_test: ClipDataset,
    pub fe_train: ClipDataset,
    pub fe_test: ClipDataset,
}

/// Ground-truth scores for a latent activation row.
pub fn generator_scores(generator: &Tensor, bias: &[f64], latent: &[f64]) -> Vec<f64> {
    (0..generator.rows())
        .map(|k| {
            bias[k]
                + generator
                    .row(k)
                    .iter()
                    .zip(latent)
                    .map(|(g, a)| g * a)
                    .sum::<f64>()
        })
        .collect()
}

fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate() {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

fn build_generator(spec: &SyntheticWorldSpec, seed: u64) -> Result<(Tensor, Vec<f64>)> {
    let table = builtin_facs_table();
    let expr_refs: Vec<&str> = spec.expressions.iter().map(|s| s.as_str()).collect();
    let prior = build_prior_matrix(&table, &expr_refs, &spec.au_ids)?;
    let w0 = normalize_rows(&prior);
    let (k, m) = (w0.rows(), w0.cols());
    let mut rng = rng_for(seed, "world.generator");
    let mut g = Tensor::zeros(k, m);
    for r in 0..k {
        let off_cols: Vec<usize> = (0..m).filter(|&c| prior.p.at(r, c) == 0.0).collect();
        let mut off_weights: Vec<f64> = off_cols.iter().map(|_| rng.gen_range(0.0..1.0)).collect();
        let total: f64 = off_weights.iter().sum();
        if total > 0.0 {
            for w in &mut off_weights {
                *w *= spec.off_support_mass / total;
            }
        }
        for c in 0..m {
            let on = (1.0 - spec.off_support_mass) * w0.at(r, c);
            let off = off_cols
                .iter()
                .position(|&x| x == c)
                .map_or(0.0, |i| off_weights[i]);
            let penalty = if prior.p.at(r, c) == 0.0 { spec.off_support_penalty } else { 0.0 };
            g.set(r, c, on + off - penalty);
        }
    }
    for a in 0..k {
        for b in a + 1..k {
            if g.row(a) == g.row(b) {
                return Err(Error::Config(format!(
                    "degenerate generator: rows {a} and {b} identical"
                )));
            }
        }
    }
    // only the all-zero AU configuration should fall to this class
    let bias: Vec<f64> = spec
        .expressions
        .iter()
        .map(|name| if name == "Neutral" { 0.1 } else { 0.0 })
        .collect();
    Ok((g, bias))
}

fn sample_latent(
    prior: &Tensor,
    class: usize,
    spec: &SyntheticWorldSpec,
    rng: &mut impl Rng,
) -> Vec<f64> {
    (0..prior.cols())
        .map(|m| {
            let on_support = prior.at(class, m) != 0.0;
            let p = if on_support { 1.0 - spec.support_dropout } else { spec.prevalence };
            if rng.gen_range(0.0..1.0) < p {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

fn render_clip(
    latent: &[f64],
    map: &Tensor,
    spec: &SyntheticWorldSpec,
    rng: &mut impl Rng,
) -> Tensor {
    let n = spec.frames;
    let noise = Normal::new(0.0, spec.feature_noise).expect("valid std");
    let mut clip = Tensor::zeros(n, spec.d_raw);
    // subject-dependent expression intensity, constant within a clip
    let gain = (rng.gen_range(-1.0..1.0) * spec.gain_spread.ln()).exp();
    let center = (n / 2) as f64;
    let width = (n as f64 / 4.0).max(1.0);
    for t in 0..n {
        // AU intensity peaks at the center frame
        let z = (t as f64 - center) / width;
        let intensity = 0.3 + 0.7 * (-0.5 * z * z).exp();
        for c in 0..spec.d_raw {
            let signal: f64 = latent
                .iter()
                .enumerate()
                .map(|(m, a)| a * map.at(m, c))
                .sum();
            clip.set(t, c, gain * intensity * signal + noise.sample(rng));
        }
    }
    clip
}

fn domain_map(spec: &SyntheticWorldSpec, seed: u64, label: &str) -> Result<Tensor> {
    let m = spec.au_ids.len();
    // The shared core of each AU's feature direction is the frozen
    // text-space encoding of its description: the synthetic stand-in for
    // the vision-language alignment a pretrained encoder pair provides.
    let enc = crate::tsp::SurrogateEncoder::new(
        seed,
        16,
        spec.d_raw,
        crate::tsp::DEFAULT_VOCAB,
        crate::tsp::DEFAULT_MAX_TOKENS,
    );
    let table = builtin_facs_table();
    let templates = spec
        .au_ids
        .iter()
        .map(|&id| {
            let desc = &table.au(id)?.description;
            crate::tsp::tokenize(
                &format!("a facial action of {desc}"),
                crate::tsp::DEFAULT_VOCAB,
                crate::tsp::DEFAULT_MAX_TOKENS,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let weights = crate::tsp::idf_weights(&templates);
    let specific = crate::numerics::seeded_gaussian(seed, label, m, spec.d_raw, 1.0);
    let scale = (spec.d_raw as f64).sqrt();
    let mut t = Tensor::zeros(m, spec.d_raw);
    for r in 0..m {
        let core = enc.encode_pooled(&templates[r], Some(&weights[r]))?;
        let core_norm = core.data().iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let spec_norm = specific.row(r).iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for c in 0..spec.d_raw {
            let v = core.at(0, c) / core_norm + spec.domain_shift * specific.at(r, c) / spec_norm;
            t.set(r, c, scale * v);
        }
    }
    Ok(t)
}

pub fn generate_synthetic_world(spec: &SyntheticWorldSpec, seed: u64) -> Result<SyntheticWorld> {
    spec.validate()?;
    let table = builtin_facs_table();
    let expr_refs: Vec<&str> = spec.expressions.iter().map(|s| s.as_str()).collect();
    let prior = build_prior_matrix(&table, &expr_refs, &spec.au_ids)?;
    let (generator, bias) = build_generator(spec, seed)?;
    let k = spec.expressions.len();
    let m = spec.au_ids.len();

    let map_au = domain_map(spec, seed, "world.map.au")?;
    let map_fe = domain_map(spec, seed, "world.map.fe")?;

    let make = |task: Task, count: usize, map: &Tensor, domain_id: u32, rng_label: &str| {
        let mut rng = rng_for(seed, rng_label);
        let noise = Normal::new(0.0, spec.label_noise).expect("valid std");
        let mut clips = Vec::with_capacity(count);
        let mut labels = Tensor::zeros(count, if task == Task::Au { m } else { k });
        let mut latents = Tensor::zeros(count, m);
        for i in 0..count {
            let class = rng.gen_range(0..k);
            let latent = sample_latent(&prior.p, class, spec, &mut rng);
            for (c, &a) in latent.iter().enumerate() {
                latents.set(i, c, a);
            }
            match task {
                Task::Au => {
                    for (c, &a) in latent.iter().enumerate() {
                        labels.set(i, c, a);
                    }
                }
                Task::Expression => {
                    let mut scores = generator_scores(&generator, &bias, &latent);
                    for s in &mut scores {
                        *s += noise.sample(&mut rng);
                    }
                    labels.set(i, argmax(&scores), 1.0);
                }
            }
            clips.push(render_clip(&latent, map, spec, &mut rng));
        }
        ClipDataset { task, domain_id, clips, labels, latents }
    };

    let au_all = make(Task::Au, spec.au_samples, &map_au, 0, "world.samples.au");
    let fe_all = make(Task::Expression, spec.fe_samples, &map_fe, 1, "world.samples.fe");

    let split = |d: &ClipDataset| {
        let cut = ((d.len() as f64 * spec.train_fraction).round() as usize)
            .clamp(1, d.len().saturating_sub(1).max(1));
        (d.select(0..cut), d.select(cut..d.len()))
    };
    let (mut au_train, au_test) = split(&au_all);
    let (fe_train, fe_test) = split(&fe_all);
    if spec.annotation_flip > 0.0 {
        let mut rng = rng_for(seed, "world.annotation_flip");
        for i in 0..au_train.labels.len() {
            if rng.gen_range(0.0..1.0) < spec.annotation_flip {
                let d = au_train.labels.data_mut();
                d[i] = 1.0 - d[i];
            }
        }
    }

    Ok(SyntheticWorld {
        spec: spec.clone(),
        seed,
        generator,
        bias,
        au_train,
        au_test,
        fe_train,
        fe_test,
    })
}

impl SyntheticWorld {
    /// Persist all four datasets in the SSMDATA1 container; the spec and
    /// seed travel separately in the run manifest.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut blobs = Vec::new();
        blobs.push(("generator".to_string(), self.generator.clone()));
        blobs.push((
            "bias".to_string(),
            Tensor::new(1, self.bias.len(), self.bias.clone())?,
        ));
        for (name, d) in self.datasets() {
            let n = d.len();
            let flat = Tensor::from_rows(
                &d.clips
                    .iter()
                    .flat_map(|c| (0..c.rows()).map(|r| c.row(r).to_vec()).collect::<Vec<_>>())
                    .collect::<Vec<_>>(),
            )?;
            blobs.push((format!("{name}.frames"), flat));
            blobs.push((format!("{name}.labels"), d.labels.clone()));
            blobs.push((format!("{name}.latents"), d.latents.clone()));
            blobs.push((
                format!("{name}.meta"),
                Tensor::new(1, 3, vec![n as f64, self.spec.frames as f64, d.domain_id as f64])?,
            ));
        }
        write_container(path, DATA_MAGIC, &blobs)
    }

    pub fn load(path: &Path, spec: &SyntheticWorldSpec, seed: u64) -> Result<SyntheticWorld> {
        let blobs = read_container(path, DATA_MAGIC)?;
        let get = |name: &str| -> Result<&Tensor> {
            blobs
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("{}: missing blob {name}", path.display())))
        };
        let read_set = |name: &str, task: Task| -> Result<ClipDataset> {
            let meta = get(&format!("{name}.meta"))?;
            let (n, frames, domain_id) =
                (meta.at(0, 0) as usize, meta.at(0, 1) as usize, meta.at(0, 2) as u32);
            let flat = get(&format!("{name}.frames"))?;
            if flat.rows() != n * frames {
                return Err(Error::Format(format!("{name}: frame count mismatch")));
            }
            let clips = (0..n)
                .map(|i| {
                    Tensor::from_rows(
                        &(0..frames)
                            .map(|t| flat.row(i * frames + t).to_vec())
                            .collect::<Vec<_>>(),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ClipDataset {
                task,
                domain_id,
                clips,
                labels: get(&format!("{name}.labels"))?.clone(),
                latents: get(&format!("{name}.latents"))?.clone(),
            })
        };
        Ok(SyntheticWorld {
            spec: spec.clone(),
            seed,
            generator: get("generator")?.clone(),
            bias: get("bias")?.data().to_vec(),
            au_train: read_set("au_train", Task::Au)?,
            au_test: read_set("au_test", Task::Au)?,
            fe_train: read_set("fe_train", Task::Expression)?,
            fe_test: read_set("fe_test", Task::Expression)?,
        })
    }

    fn datasets(&self) -> [(&'static str, &ClipDataset); 4] {
        [
            ("au_train", &self.au_train),
            ("au_test", &self.au_test),
            ("fe_train", &self.fe_train),
            ("fe_test", &self.fe_test),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticWorldSpec { au_samples: 24, fe_samples: 16, ..Default::default() };
        let a = generate_synthetic_world(&spec, 5).unwrap();
        let b = generate_synthetic_world(&spec, 5).unwrap();
        assert_eq!(a.au_train, b.au_train);
        assert_eq!(a.fe_test, b.fe_test);
        let c = generate_synthetic_world(&spec, 6).unwrap();
        assert_ne!(a.au_train.labels, c.au_train.labels);
    }

    #[test]
    fn shapes_and_splits() {
        let spec = SyntheticWorldSpec {
            au_samples: 40,
            fe_samples: 20,
            annotation_flip: 0.0,
            ..Default::default()
        };
        let w = generate_synthetic_world(&spec, 1).unwrap();
        assert_eq!(w.au_train.len(), 30);
        assert_eq!(w.au_test.len(), 10);
        assert_eq!(w.fe_train.len(), 15);
        assert_eq!(w.fe_test.len(), 5);
        assert_eq!(w.au_train.clips[0].rows(), 8);
        assert_eq!(w.au_train.clips[0].cols(), 64);
        assert_eq!(w.au_train.labels.cols(), 12);
        assert_eq!(w.fe_train.labels.cols(), 7);
        // expression labels one-hot
        for r in 0..w.fe_train.labels.rows() {
            assert_eq!(w.fe_train.labels.row(r).iter().sum::<f64>(), 1.0);
        }
        // without annotation noise, AU labels equal latents
        assert_eq!(w.au_train.labels, w.au_train.latents);
    }

    #[test]
    fn zero_label_noise_matches_bayes_oracle() {
        let spec = SyntheticWorldSpec {
            label_noise: 0.0,
            fe_samples: 60,
            au_samples: 20,
            ..Default::default()
        };
        let w = generate_synthetic_world(&spec, 9).unwrap();
        for ds in [&w.fe_train, &w.fe_test] {
            for i in 0..ds.len() {
                let scores = generator_scores(&w.generator, &w.bias, ds.latents.row(i));
                let truth = ds.labels.row(i).iter().position(|&v| v == 1.0).unwrap();
                assert_eq!(argmax(&scores), truth);
            }
        }
    }

    #[test]
    fn domains_are_heterogeneous() {
        let spec = SyntheticWorldSpec { au_samples: 60, fe_samples: 60, ..Default::default() };
        let w = generate_synthetic_world(&spec, 3).unwrap();
        let mean_feature = |d: &ClipDataset| {
            let mut acc = vec![0.0; d.clips[0].cols()];
            let mut count = 0.0;
            for c in &d.clips {
                for r in 0..c.rows() {
                    for (a, &v) in acc.iter_mut().zip(c.row(r)) {
                        *a += v;
                    }
                    count += 1.0;
                }
            }
            acc.into_iter().map(|x| x / count).collect::<Vec<_>>()
        };
        let ma = mean_feature(&w.au_train);
        let mb = mean_feature(&w.fe_train);
        let dist: f64 = ma.iter().zip(&mb).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(dist > 0.0);
    }

    #[test]
    fn generator_off_support_mass_and_penalty() {
        let spec = SyntheticWorldSpec::default();
        let w = generate_synthetic_world(&spec, 2).unwrap();
        let table = builtin_facs_table();
        let expr_refs: Vec<&str> = spec.expressions.iter().map(|s| s.as_str()).collect();
        let prior = build_prior_matrix(&table, &expr_refs, &spec.au_ids).unwrap();
        // Happiness row: on-support weight sums to 0.9, off-support
        // positive mass sums to 0.1 before the constant penalty
        let r = 0;
        let mut on = 0.0;
        let mut off = 0.0;
        for c in 0..12 {
            if prior.p.at(r, c) != 0.0 {
                on += w.generator.at(r, c);
            } else {
                off += w.generator.at(r, c) + spec.off_support_penalty;
            }
        }
        assert!((on - 0.9).abs() < 1e-12);
        assert!((off - 0.1).abs() < 1e-12);
    }

    #[test]
    fn head_fraction_and_validation() {
        let spec = SyntheticWorldSpec {
            au_samples: 40,
            fe_samples: 20,
            annotation_flip: 0.0,
            ..Default::default()
        };
        let w = generate_synthetic_world(&spec, 1).unwrap();
        let h = w.au_train.head_fraction(0.2).unwrap();
        assert_eq!(h.len(), 6);
        assert_eq!(h.clips[0], w.au_train.clips[0]);
        assert!(w.au_train.head_fraction(0.0).is_err());
        let bad = SyntheticWorldSpec { frames: 0, ..Default::default() };
        assert!(generate_synthetic_world(&bad, 1).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let spec = SyntheticWorldSpec { au_samples: 12, fe_samples: 8, ..Default::default() };
        let w = generate_synthetic_world(&spec, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("world.ssmdata");
        w.save(&path).unwrap();
        let back = SyntheticWorld::load(&path, &spec, 4).unwrap();
        assert_eq!(back.au_train, w.au_train);
        assert_eq!(back.fe_test, w.fe_test);
        assert_eq!(back.generator, w.generator);
    }
}
