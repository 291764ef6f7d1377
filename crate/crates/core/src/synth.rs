//! Planted synthetic corpus.
//!
//! Every image is a scene of four concepts (subject, verb, object, place).
//! Subject, object and place each contribute one region: a noisy copy of a
//! fixed per-concept prototype. Several concepts come in confusable pairs
//! whose prototypes are strongly correlated (`man`/`boy`, `dog`/`cat`, ...),
//! so detectors fire on both and the downstream stages have something to
//! disambiguate. Captions are drawn from a handful of templates over the
//! planted concepts, so the words a caption should mention are known.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{Caption, CorpusError, Dataset, DatasetEntry};
use crate::util::substream;

const SUBJECTS: [&str; 8] = ["man", "boy", "woman", "girl", "dog", "cat", "horse", "cow"];
const OBJECTS: [&str; 8] = ["bike", "skateboard", "pizza", "sandwich", "frisbee", "ball", "kite", "umbrella"];
const PLACES: [(&str, &str); 5] =
    [("beach", "on the beach"), ("park", "in the park"), ("street", "on the street"), ("field", "in a field"), ("kitchen", "in the kitchen")];

/// Pairs whose region prototypes are correlated.
const CONFUSABLE: [(&str, &str); 9] = [
    ("man", "boy"),
    ("woman", "girl"),
    ("dog", "cat"),
    ("horse", "cow"),
    ("bike", "skateboard"),
    ("pizza", "sandwich"),
    ("frisbee", "ball"),
    ("kite", "umbrella"),
    ("beach", "field"),
];

fn verbs_for(object: &str) -> &'static [&'static str] {
    match object {
        "bike" | "skateboard" => &["riding"],
        "pizza" | "sandwich" => &["eating"],
        "frisbee" => &["catching", "throwing"],
        "ball" => &["chasing", "kicking"],
        "kite" => &["flying"],
        _ => &["holding"],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub images: usize,
    pub region_dim: usize,
    pub image_dim: usize,
    pub captions_per_image: usize,
    /// Standard deviation of the per-coordinate region noise.
    pub region_noise: f64,
    /// Cosine between the prototypes of a confusable pair.
    pub confusion: f64,
    /// Norm of every prototype.
    pub prototype_scale: f64,
    /// Pure-noise regions added to every image.
    pub background_regions: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            images: 50,
            region_dim: 24,
            image_dim: 16,
            captions_per_image: 5,
            region_noise: 0.3,
            confusion: 0.75,
            prototype_scale: 3.0,
            background_regions: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedScene {
    pub subject: String,
    pub verb: String,
    pub object: String,
    pub place: String,
}

impl PlantedScene {
    pub fn words(&self) -> [&str; 4] {
        [&self.subject, &self.verb, &self.object, &self.place]
    }

    fn caption(&self, template: usize) -> String {
        let (s, v, o) = (&self.subject, &self.verb, &self.object);
        let p = PLACES.iter().find(|(n, _)| *n == self.place).map_or("", |(_, p)| p);
        match template {
            0 => format!("a {s} {v} a {o} {p}"),
            1 => format!("a {s} is {v} a {o}"),
            2 => format!("a {s} {v} a {o}"),
            3 => format!("the {s} is {v} a {o} {p}"),
            4 => format!("a {s} with a {o} {p}"),
            _ => format!("a {s} {p} {v} a {o}"),
        }
    }
}

const TEMPLATES: usize = 6;

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub dataset: Dataset,
    pub scenes: Vec<PlantedScene>,
    pub prototypes: Vec<(String, Vec<f64>)>,
}

fn gaussian<R: Rng>(rng: &mut R, n: usize, sd: f64) -> Vec<f64> {
    (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalized(mut v: Vec<f64>, scale: f64) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x *= scale / n);
    v
}

fn prototypes(config: &SynthConfig) -> Vec<(String, Vec<f64>)> {
    let mut rng = substream(config.seed, "synth-prototypes");
    let d = config.region_dim;
    let mut out: Vec<(String, Vec<f64>)> = Vec::new();
    let concepts = SUBJECTS.iter().chain(&OBJECTS).copied().chain(PLACES.iter().map(|p| p.0));
    for c in concepts {
        let fresh = normalized(gaussian(&mut rng, d, 1.0), 1.0);
        let twin = CONFUSABLE.iter().find(|(_, b)| *b == c).map(|(a, _)| *a);
        let v = match twin.and_then(|a| out.iter().find(|(n, _)| n == a)) {
            Some((_, base)) => {
                let c = config.confusion;
                let base = normalized(base.clone(), 1.0);
                // remove the shared direction so the cosine is exactly `confusion`
                let along: f64 = fresh.iter().zip(&base).map(|(x, y)| x * y).sum();
                let orth = normalized(fresh.iter().zip(&base).map(|(x, y)| x - along * y).collect(), 1.0);
                base.iter().zip(&orth).map(|(b, o)| c * b + (1.0 - c * c).sqrt() * o).collect()
            }
            None => fresh,
        };
        out.push((c.to_string(), normalized(v, config.prototype_scale)));
    }
    out
}

/// Generates the corpus; all randomness comes from `config.seed`.
pub fn generate(config: &SynthConfig) -> Result<SynthCorpus, CorpusError> {
    let protos = prototypes(config);
    let proto = |name: &str| &protos.iter().find(|(n, _)| n == name).expect("known concept").1;
    let mut rng = substream(config.seed, "synth-images");
    let projection: Vec<Vec<f64>> =
        (0..config.image_dim).map(|_| gaussian(&mut rng, config.region_dim, 1.0 / (config.region_dim as f64).sqrt())).collect();

    let mut entries = Vec::with_capacity(config.images);
    let mut scenes = Vec::with_capacity(config.images);
    for i in 0..config.images {
        let object = *OBJECTS.choose(&mut rng).unwrap();
        let scene = PlantedScene {
            subject: SUBJECTS.choose(&mut rng).unwrap().to_string(),
            verb: verbs_for(object).choose(&mut rng).unwrap().to_string(),
            object: object.to_string(),
            place: PLACES.choose(&mut rng).unwrap().0.to_string(),
        };
        let mut regions: Vec<Vec<f64>> = [&scene.subject, &scene.object, &scene.place]
            .iter()
            .map(|c| proto(c).iter().zip(gaussian(&mut rng, config.region_dim, config.region_noise)).map(|(p, n)| p + n).collect())
            .collect();
        for _ in 0..config.background_regions {
            regions.push(gaussian(&mut rng, config.region_dim, config.region_noise));
        }
        regions.shuffle(&mut rng);
        let mut pooled = vec![0.0; config.region_dim];
        for r in &regions {
            pooled.iter_mut().zip(r).for_each(|(a, b)| *a += b);
        }
        let image_feature: Vec<f64> = projection.iter().map(|row| row.iter().zip(&pooled).map(|(a, b)| a * b).sum()).collect();

        let id = format!("img{i:05}");
        let mut templates: Vec<usize> = (0..TEMPLATES).collect();
        templates.shuffle(&mut rng);
        let captions = (0..config.captions_per_image)
            .map(|k| Caption::new(id.clone(), scene.caption(templates[k % TEMPLATES])).expect("templates are non-empty"))
            .collect();
        entries.push(DatasetEntry { image_id: id, captions, regions, image_feature: Some(image_feature) });
        scenes.push(scene);
    }
    let dataset = Dataset::new(config.region_dim, Some(config.image_dim), entries)?;
    Ok(SynthCorpus { dataset, scenes, prototypes: protos })
}
