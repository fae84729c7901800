//! Synthetic corpus generator with planted grounding structure.
//!
//! Each pair gets a scene context drawn from a fixed pool of context
//! directions. Explicit phrases copy their gold region's embedding plus
//! noise, so a direct similarity model can ground them. Implicit phrases
//! blend the gold embedding with the scene context, and a subset of
//! regions ("confounders") sit near that same context direction — so a
//! model must identify and discount the contextual component to recover
//! the gold region. With at least as many context directions as feature
//! dimensions, no fixed linear map can remove the context; input-specific
//! attention over a codebook can.
//!
//! All features pass through f32 quantization before the corpus is
//! returned, so the in-memory corpus is bit-identical to a written and
//! reloaded one.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{
    BoundingBox, CorpusError, GoldAnnotation, GroundingCorpus, PairedSample, Phrase, Region,
    RelationTag, Result, MAX_REGIONS,
};

/// Share of implicit phrases tagged as commonsense understanding; the
/// remainder splits evenly over the other three implicit tags.
const CU_SHARE: f64 = 0.345;

const CANVAS: f64 = 512.0;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub test_pairs: usize,
    /// Phrases per sentence (n).
    pub phrases_per_pair: usize,
    /// Regions per image (m).
    pub regions_per_pair: usize,
    /// Shared feature dimension for phrases and regions.
    pub dim: usize,
    /// Probability that a phrase is implicit rather than explicit.
    pub implicit_fraction: f64,
    /// Standard deviation of the additive feature noise.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Size of the context-direction pool. Keeping this at or above `dim`
    /// ensures the contexts span the whole feature space.
    pub context_clusters: usize,
    /// Blend weight of the context direction in implicit phrase features:
    /// `(1 - w) * gold + w * context`.
    pub centroid_mix: f64,
    /// Fraction of each image's regions placed near the scene context.
    pub confounder_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            train_pairs: 200,
            val_pairs: 50,
            test_pairs: 50,
            phrases_per_pair: 4,
            regions_per_pair: 12,
            dim: 32,
            implicit_fraction: 0.1,
            noise_sigma: 0.1,
            seed: 0,
            context_clusters: 48,
            centroid_mix: 0.5,
            confounder_fraction: 0.25,
        }
    }
}

impl SynthConfig {
    fn confounders_per_pair(&self) -> usize {
        ((self.confounder_fraction * self.regions_per_pair as f64).round() as usize)
            .max(1)
            .min(self.regions_per_pair.saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(CorpusError::Config(msg));
        if !(0.0..=1.0).contains(&self.implicit_fraction) {
            return err(format!(
                "implicit_fraction must be in [0, 1], got {}",
                self.implicit_fraction
            ));
        }
        if !(0.0..=1.0).contains(&self.centroid_mix) {
            return err(format!(
                "centroid_mix must be in [0, 1], got {}",
                self.centroid_mix
            ));
        }
        if !(0.0..1.0).contains(&self.confounder_fraction) {
            return err(format!(
                "confounder_fraction must be in [0, 1), got {}",
                self.confounder_fraction
            ));
        }
        if self.dim == 0 {
            return err("dim must be at least 1".into());
        }
        if self.phrases_per_pair == 0 {
            return err("phrases_per_pair must be at least 1".into());
        }
        if self.regions_per_pair == 0 {
            return err("regions_per_pair must be at least 1".into());
        }
        if self.regions_per_pair > MAX_REGIONS {
            return err(format!(
                "regions_per_pair {} exceeds the cap of {MAX_REGIONS}",
                self.regions_per_pair
            ));
        }
        if self.context_clusters == 0 {
            return err("context_clusters must be at least 1".into());
        }
        if self.train_pairs + self.val_pairs + self.test_pairs == 0 {
            return err("at least one split must be nonempty".into());
        }
        let free = self.regions_per_pair - self.confounders_per_pair();
        if free < self.phrases_per_pair {
            return err(format!(
                "only {free} non-confounder regions for {} phrases; raise regions_per_pair",
                self.phrases_per_pair
            ));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return err(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        Ok(())
    }
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<GroundingCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let contexts: Vec<Vec<f64>> = (0..cfg.context_clusters)
        .map(|_| unit_vector(cfg.dim, &mut rng))
        .collect();

    let mut annotations = Vec::new();
    let mut next_pair_id = 0u64;
    let mut generate_split = |count: usize, annotated: bool, rng: &mut ChaCha8Rng| {
        let mut pairs = Vec::with_capacity(count);
        for _ in 0..count {
            let pair_id = next_pair_id;
            next_pair_id += 1;
            pairs.push(generate_pair(
                cfg,
                pair_id,
                &contexts,
                annotated.then_some(&mut annotations),
                rng,
            ));
        }
        pairs
    };

    let train = generate_split(cfg.train_pairs, false, &mut rng);
    let val = generate_split(cfg.val_pairs, true, &mut rng);
    let test = generate_split(cfg.test_pairs, true, &mut rng);

    let mut corpus = GroundingCorpus {
        d_p: cfg.dim,
        d_r: cfg.dim,
        train,
        val,
        test,
        annotations,
    };
    quantize(&mut corpus);
    corpus.validate()?;
    Ok(corpus)
}

fn generate_pair(
    cfg: &SynthConfig,
    pair_id: u64,
    contexts: &[Vec<f64>],
    mut annotations: Option<&mut Vec<GoldAnnotation>>,
    rng: &mut ChaCha8Rng,
) -> PairedSample {
    let m = cfg.regions_per_pair;
    let n = cfg.phrases_per_pair;
    let d = cfg.dim;
    let context = &contexts[rng.random_range(0..contexts.len())];

    // Regions: a confounder subset sits near the scene context, the rest
    // are independent directions.
    let n_conf = cfg.confounders_per_pair();
    let mut slots: Vec<usize> = (0..m).collect();
    slots.shuffle(rng);
    let confounder_slots: std::collections::HashSet<usize> =
        slots[..n_conf].iter().copied().collect();
    let mut embeddings: Vec<Vec<f64>> = (0..m)
        .map(|slot| {
            if confounder_slots.contains(&slot) {
                add_noise(context, cfg.noise_sigma, rng)
            } else {
                unit_vector(d, rng)
            }
        })
        .collect();

    // Gold assignment draws from the non-confounder pool without
    // replacement; leftovers serve as duplicate objects for NU phrases.
    let mut pool: Vec<usize> = (0..m).filter(|s| !confounder_slots.contains(s)).collect();
    pool.shuffle(rng);
    let mut spares = pool.split_off(n);

    let mut phrases = Vec::with_capacity(n);
    for (k, &gold) in pool.iter().enumerate() {
        let implicit = rng.random::<f64>() < cfg.implicit_fraction;
        let tag = if implicit {
            draw_implicit_tag(rng)
        } else {
            RelationTag::Explicit
        };

        let mut gold_ids = vec![gold as u32];
        if tag == RelationTag::Nu {
            if let Some(extra) = spares.pop() {
                // duplicate object: a second, near-identical valid region
                embeddings[extra] = add_noise(&embeddings[gold].clone(), cfg.noise_sigma, rng);
                gold_ids.push(extra as u32);
            }
        }

        let base = &embeddings[gold];
        let embedding = if implicit {
            let mixed: Vec<f64> = base
                .iter()
                .zip(context)
                .map(|(g, c)| (1.0 - cfg.centroid_mix) * g + cfg.centroid_mix * c)
                .collect();
            add_noise(&mixed, cfg.noise_sigma, rng)
        } else {
            add_noise(base, cfg.noise_sigma, rng)
        };

        if let Some(anns) = annotations.as_deref_mut() {
            anns.push(GoldAnnotation {
                pair_id,
                phrase_id: k as u32,
                gold_region_ids: gold_ids,
                relation_tag: tag,
            });
        }
        phrases.push(Phrase {
            phrase_id: k as u32,
            text: Some(format!("phrase-{pair_id}-{k}")),
            embedding,
        });
    }

    let boxes = grid_boxes(m, rng);
    let image = embeddings
        .into_iter()
        .zip(boxes)
        .enumerate()
        .map(|(slot, (embedding, bbox))| Region {
            region_id: slot as u32,
            bbox,
            embedding,
        })
        .collect();

    PairedSample {
        pair_id,
        sentence: phrases,
        image,
    }
}

fn draw_implicit_tag(rng: &mut ChaCha8Rng) -> RelationTag {
    let u = rng.random::<f64>();
    if u < CU_SHARE {
        RelationTag::Cu
    } else {
        // even split of the remainder
        match (((u - CU_SHARE) / (1.0 - CU_SHARE) * 3.0) as usize).min(2) {
            0 => RelationTag::Ccu,
            1 => RelationTag::Sru,
            _ => RelationTag::Nu,
        }
    }
}

fn unit_vector(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        v[0] = 1.0;
        return v;
    }
    for x in &mut v {
        *x /= norm;
    }
    v
}

fn add_noise(base: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    base.iter()
        .map(|&v| {
            let noise: f64 = StandardNormal.sample(rng);
            v + sigma * noise
        })
        .collect()
}

/// Non-overlapping jittered boxes on a grid covering the canvas. Distinct
/// regions never overlap, so recall hits require retrieving the gold box.
fn grid_boxes(m: usize, rng: &mut ChaCha8Rng) -> Vec<BoundingBox> {
    let cols = (m as f64).sqrt().ceil() as usize;
    let rows = m.div_ceil(cols);
    let cw = CANVAS / cols as f64;
    let ch = CANVAS / rows as f64;
    (0..m)
        .map(|k| {
            let cx = (k % cols) as f64 * cw;
            let cy = (k / cols) as f64 * ch;
            let x1 = cx + cw * (0.02 + 0.2 * rng.random::<f64>());
            let x2 = cx + cw * (0.6 + 0.35 * rng.random::<f64>());
            let y1 = cy + ch * (0.02 + 0.2 * rng.random::<f64>());
            let y2 = cy + ch * (0.6 + 0.35 * rng.random::<f64>());
            BoundingBox::new(x1, y1, x2, y2)
        })
        .collect()
}

fn quantize(corpus: &mut GroundingCorpus) {
    let q = |v: &mut Vec<f64>| {
        for x in v.iter_mut() {
            *x = (*x as f32) as f64;
        }
    };
    for split in [
        &mut corpus.train,
        &mut corpus.val,
        &mut corpus.test,
    ] {
        for pair in split.iter_mut() {
            for phrase in &mut pair.sentence {
                q(&mut phrase.embedding);
            }
            for region in &mut pair.image {
                q(&mut region.embedding);
            }
        }
    }
}
